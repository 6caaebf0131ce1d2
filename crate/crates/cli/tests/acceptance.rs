//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails or exceeds its time budget.

use std::fs;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use xdiff_core::diagnostics::{hl2_pointwise_gap, twin_experiment, TwinExperimentResult};
use xdiff_core::hypotheses::{
    check_h3, check_ion_lemma, check_lemma_g, estimate_cr, expected_verdicts, run_check, SimplexSampler, Verdict,
};
use xdiff_core::mobility::{g_matrix, projector_l, projector_lperp};
use xdiff_core::simplex::{hessian, hessian_inverse};
use xdiff_core::solver::{self_convergence, simulate};
use xdiff_core::{CrossDiffusionModel, InitialData, ModelSpec, Reaction, SolverConfig};

const SEED: u64 = 42;

struct Outcome {
    pass: bool,
    detail: String,
}

fn criterion(number: u32, name: &str, budget_secs: u64, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let out = f();
    let elapsed = start.elapsed();
    let in_time = elapsed <= Duration::from_secs(budget_secs);
    let pass = out.pass && in_time;
    println!(
        "{} criterion {number} ({name}): {} [{:.1} s of {budget_secs} s]",
        if pass { "PASS" } else { "FAIL" },
        out.detail,
        elapsed.as_secs_f64()
    );
    pass
}

#[derive(Default, Clone, Copy)]
struct IdentityDefects {
    line_sums: f64,
    projectors: f64,
    gpl: f64,
    hessian: f64,
}

impl IdentityDefects {
    fn max(self, o: Self) -> Self {
        Self {
            line_sums: self.line_sums.max(o.line_sums),
            projectors: self.projectors.max(o.projectors),
            gpl: self.gpl.max(o.gpl),
            hessian: self.hessian.max(o.hessian),
        }
    }
}

fn matrix_identities() -> Outcome {
    let mut worst = IdentityDefects::default();
    let mut failures = Vec::new();
    for m in ModelSpec::catalog() {
        let points = SimplexSampler::new(m.n, 1e-6, SEED)
            .unwrap()
            .sample_simplex(10_000)
            .unwrap();
        let d = points
            .par_iter()
            .map(|ac| {
                let c = ac.composition();
                let k = ac.values().len();
                let id = DMatrix::<f64>::identity(k, k);
                let bm = m.augmented_mobility(&c);
                let (p, q) = (projector_l(ac), projector_lperp(ac));
                let projectors = [
                    (&p * &p - &p).amax(),
                    (&q * &q - &q).amax(),
                    (&p * &q).amax(),
                    (&p + &q - &id).amax(),
                ]
                .into_iter()
                .fold(0.0, f64::max);
                let g = g_matrix(&bm, ac).unwrap().entries;
                let gpl = (&p * &g - &g).amax().max((&g * &p - &g).amax());
                let n = c.species();
                let hess = (hessian(&c).unwrap() * hessian_inverse(&c) - DMatrix::identity(n, n)).amax();
                IdentityDefects {
                    line_sums: bm.max_line_sum(),
                    projectors,
                    gpl,
                    hessian: hess,
                }
            })
            .reduce(IdentityDefects::default, IdentityDefects::max);
        if d.line_sums > 1e-13 || d.projectors > 1e-14 || d.gpl > 1e-11 || d.hessian > 1e-10 {
            failures.push(m.name.clone());
        }
        worst = worst.max(d);
    }
    Outcome {
        pass: failures.is_empty(),
        detail: format!(
            "7 models x 10^4 samples: line sums {:.1e}, projectors {:.1e}, GPL {:.1e}, hessian {:.1e}{}",
            worst.line_sums,
            worst.projectors,
            worst.gpl,
            worst.hessian,
            if failures.is_empty() {
                String::new()
            } else {
                format!("; over tolerance: {failures:?}")
            }
        ),
    }
}

fn lemma_g() -> Outcome {
    let mut failures = Vec::new();
    let mut slack = f64::INFINITY;
    for m in ModelSpec::catalog() {
        let c_a = check_h3(&m, 10_000, SEED).unwrap().empirical_constant();
        let r = check_lemma_g(&m, c_a, 10_000, SEED).unwrap();
        slack = slack.min(r.statistic);
        if r.verdict != Verdict::Pass {
            failures.push(format!("{} (statistic {:e})", m.name, r.statistic));
        }
    }
    let scalar = ModelSpec::scalar(0.0).unwrap();
    let c_exact = check_h3(&scalar, 10_000, SEED).unwrap().statistic;
    let eq = check_lemma_g(&scalar, c_exact, 10_000, SEED).unwrap();
    let deviation = eq.details["max_deviation"];
    if deviation > 1e-12 {
        failures.push(format!("scalar alpha = 0 equality deviates by {deviation:e}"));
    }
    let ion = check_ion_lemma(&ModelSpec::preset("ion_channel").unwrap(), 10_000, SEED).unwrap();
    if ion.verdict != Verdict::Pass {
        failures.push(format!("ion improved inequality (statistic {:e})", ion.statistic));
    }
    Outcome {
        pass: failures.is_empty(),
        detail: format!(
            "smallest relative slack {slack:.3e}, scalar alpha = 0 deviation {deviation:.1e} with c_A = {c_exact}, ion improved inequality {}{}",
            ion.verdict,
            if failures.is_empty() { String::new() } else { format!("; failures: {failures:?}") }
        ),
    }
}

fn cli_exit_code(body: &str) -> i32 {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    let out = dir.path().join("out");
    fs::write(&cfg, body.replace("OUT", &out.display().to_string())).unwrap();
    Command::new(env!("CARGO_BIN_EXE_xdiff"))
        .args(["check", "--config"])
        .arg(&cfg)
        .output()
        .unwrap()
        .status
        .code()
        .unwrap()
}

fn hypothesis_table() -> Outcome {
    const SAMPLES: usize = 100_000;
    let mut mismatches = Vec::new();
    let mut rows = 0;
    for m in ModelSpec::catalog() {
        for (request, want) in expected_verdicts(&m) {
            let r = run_check(&m, request, SAMPLES, SEED).unwrap();
            rows += 1;
            if r.verdict != want {
                mismatches.push(format!("{} {}: {} (expected {want})", m.name, r.hypothesis, r.verdict));
            }
            let ion_failure = m.name == "ion_channel" && want == Verdict::Fail;
            if ion_failure {
                let w = r.witness.as_ref().unwrap();
                if w.entry != Some((0, 0)) || w.points[0][0] >= 1e-4 {
                    mismatches.push(format!(
                        "ion {} witness {:?} at {:?}",
                        r.hypothesis, w.entry, w.points[0]
                    ));
                }
            }
        }
    }
    let codes = [
        (
            r#"{"model": {"name": "thin_film"}, "experiment": {"checks": ["H3", "H4ii", "H5", "LemG", "GPL"], "samples": 100000}, "output": {"directory": "OUT"}}"#,
            0,
        ),
        (
            r#"{"model": {"name": "ion_channel"}, "experiment": {"checks": ["H4ii"], "samples": 100000}, "output": {"directory": "OUT"}}"#,
            2,
        ),
        (
            r#"{"model": {"name": "scalar"}, "experiment": {"checks": []}, "output": {"directory": "OUT"}}"#,
            1,
        ),
    ];
    let got: Vec<i32> = codes.iter().map(|(body, _)| cli_exit_code(body)).collect();
    for ((_, want), got) in codes.iter().zip(&got) {
        if want != got {
            mismatches.push(format!("exit code {got}, expected {want}"));
        }
    }
    Outcome {
        pass: mismatches.is_empty(),
        detail: format!(
            "{rows} verdicts at 10^5 samples, CLI exit codes {got:?} (want [0, 2, 1]){}",
            if mismatches.is_empty() {
                String::new()
            } else {
                format!("; mismatches: {mismatches:?}")
            }
        ),
    }
}

fn solver_structure() -> Outcome {
    let cfg = SolverConfig::new(1e-3, 0.5, 1e-6, 128, 1.0);
    let runs = [
        (
            ModelSpec::scalar(1.0).unwrap(),
            InitialData::Cosine {
                base: vec![0.5],
                amplitude: vec![0.2],
            },
        ),
        (
            ModelSpec::preset("maxwell_stefan").unwrap(),
            InitialData::Step {
                left: vec![0.5, 1.0 / 6.0],
                right: vec![1.0 / 6.0, 0.5],
            },
        ),
    ];
    let results: Vec<(bool, String)> = runs
        .par_iter()
        .map(|(m, init)| {
            let traj = simulate(m, &init.build(cfg.grid()).unwrap(), &cfg).unwrap();
            let interior = traj.states.iter().all(|s| s.is_interior());
            let drift = traj.ledger.max_mass_drift();
            let monotone = traj.ledger.entropy_non_increasing(0.0);
            let min_production = traj.ledger.records.iter().map(|r| r.production).fold(f64::INFINITY, f64::min);
            let errors: Vec<f64> = self_convergence(m, init, &cfg, 3).unwrap().iter().map(|l| l.error).collect();
            let decreasing = errors.windows(2).all(|w| w[1] < w[0]);
            let errors: Vec<String> = errors.iter().map(|e| format!("{e:.2e}")).collect();
            let ok = interior && drift <= 1e-8 && monotone && min_production >= -1e-11 && decreasing;
            (
                ok,
                format!(
                    "{}: interior {interior}, mass drift {drift:.2e}{}, entropy non-increasing {monotone}, min production {min_production:.2e}, self-convergence [{}]",
                    m.name,
                    if drift <= 1e-8 { "" } else { " (> 1e-8)" },
                    errors.join(", ")
                ),
            )
        })
        .collect();
    Outcome {
        pass: results.iter().all(|r| r.0),
        detail: results.iter().map(|r| r.1.as_str()).collect::<Vec<_>>().join("; "),
    }
}

/// Item-5 style checks on the `delta in {1e-3, 1e-2}` pair.
fn scaling_pair(m: &ModelSpec, cfg: &SolverConfig) -> (bool, String) {
    let fine = cfg.refined(4, 2);
    let init = InitialData::default_for(m.species()).build(cfg.grid()).unwrap();
    let (small, large): (TwinExperimentResult, TwinExperimentResult) = rayon::join(
        || twin_experiment(m, &init, 1e-3, cfg, &fine).unwrap(),
        || twin_experiment(m, &init, 1e-2, cfg, &fine).unwrap(),
    );
    let ratio = large.initial_entropy() / small.initial_entropy();
    let finite = [&small, &large].iter().all(|r| r.fitted_c.is_some_and(f64::is_finite));
    let violations = small.envelope_violations + large.envelope_violations;
    let i1 = small.max_i1().max(large.max_i1());
    let ok = (80.0..=120.0).contains(&ratio) && finite && violations == 0 && i1 <= 1e-11;
    let c = |r: &TwinExperimentResult| r.fitted_c.map_or(f64::NAN, |c| c);
    (
        ok,
        format!(
            "ratio {ratio:.2}, C* ({:.2}, {:.2}), violations {violations}, max I1 {i1:.1e}",
            c(&small),
            c(&large)
        ),
    )
}

fn weak_strong_stability() -> Outcome {
    let cfg = SolverConfig::new(1e-3, 0.5, 1e-6, 64, 1.0);
    let results: Vec<(bool, String)> = ModelSpec::catalog()
        .par_iter()
        .map(|m| {
            let init = InitialData::default_for(m.species()).build(cfg.grid()).unwrap();
            let zero = twin_experiment(m, &init, 0.0, &cfg, &cfg).unwrap();
            let (ok, text) = scaling_pair(m, &cfg);
            let h_zero = zero.max_entropy();
            (
                ok && h_zero <= 1e-10,
                format!("{}: max H at delta 0 {h_zero:.1e}, {text}", m.name),
            )
        })
        .collect();
    Outcome {
        pass: results.iter().all(|r| r.0),
        detail: results.iter().map(|r| r.1.as_str()).collect::<Vec<_>>().join("; "),
    }
}

fn pointwise_hl2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst = f64::INFINITY;
    let pairs = 100_000;
    for _ in 0..pairs {
        let y = 1.0 - rng.random::<f64>();
        let z = 1.0 - rng.random::<f64>();
        worst = worst.min(hl2_pointwise_gap(y, z));
    }
    Outcome {
        pass: worst >= -1e-14,
        detail: format!("{pairs} pairs in (0,1]^2, smallest gap {worst:.3e}"),
    }
}

fn reaction_extension() -> Outcome {
    let m = ModelSpec::preset("maxwell_stefan")
        .unwrap()
        .with_reaction(Reaction::Logistic { rate: 1.0 }, 1.0)
        .unwrap();
    let cr = estimate_cr(&m, 100_000, SEED).unwrap();
    let sups: Vec<String> = cr
        .refinement
        .iter()
        .map(|l| format!("{:.2} at margin {:.0e}", l.supremum, l.margin))
        .collect();
    let cfg = SolverConfig::new(1e-3, 0.5, 1e-6, 64, 1.0);
    let (twin_ok, twin_text) = scaling_pair(&m, &cfg);
    Outcome {
        pass: cr.verdict == Verdict::Pass && twin_ok,
        detail: format!(
            "C_R estimate {} (suprema {}); reaction twin {} ({twin_text})",
            cr.verdict,
            sups.join(", "),
            if twin_ok { "PASS" } else { "FAIL" }
        ),
    }
}

fn main() {
    let results = [
        criterion(1, "matrix identities", 30, matrix_identities),
        criterion(2, "subspace positivity lemma", 60, lemma_g),
        criterion(3, "hypothesis regression table", 60, hypothesis_table),
        criterion(4, "solver structure", 300, solver_structure),
        criterion(5, "weak-strong stability", 600, weak_strong_stability),
        criterion(6, "pointwise L2 bound", 5, pointwise_hl2),
        criterion(7, "reaction extension", 300, reaction_extension),
    ];
    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed} of {} criteria pass", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
