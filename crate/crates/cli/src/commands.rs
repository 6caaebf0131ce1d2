//! The four subcommands. Each returns the exit status or an error that maps
//! to one.

use std::io;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use xdiff_core::diagnostics::{twin_experiment, TwinExperimentResult};
use xdiff_core::hypotheses::{run_check, HypothesisReport, Verdict};
use xdiff_core::solver::{self_convergence, simulate_final, simulate_with, EntropyLedger};
use xdiff_core::{CrossDiffusionModel, GridField, InitialData, ModelSpec, SolverConfig};

use crate::config::{build_model, with_parameter, ConfigError, Format, LoadedConfig, SweepAxis};
use crate::output::{float, optional, write_atomic, CsvTable, Provenance};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    Pass = 0,
    ConfigError = 1,
    Fail = 2,
    Inconclusive = 3,
    SolverFailure = 4,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        self as i32
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot write output in {}: {source}", path.display())]
    Output { path: PathBuf, source: io::Error },
    #[error("solver failure: {0}")]
    Solver(xdiff_core::Error),
}

impl CliError {
    pub fn status(&self) -> ExitStatus {
        match self {
            Self::Config(_) | Self::Output { .. } => ExitStatus::ConfigError,
            Self::Solver(_) => ExitStatus::SolverFailure,
        }
    }
}

/// Errors raised by the numerics are solver failures; the rest reject the
/// configuration.
fn classify(cfg: &LoadedConfig, e: xdiff_core::Error) -> CliError {
    use xdiff_core::Error as E;
    match e {
        E::NewtonDiverged { .. } | E::NonFiniteEntropyVars(_) | E::BoundaryReference(_) | E::DegenerateSeries(_) => {
            CliError::Solver(e)
        }
        other => CliError::Config(cfg.error_at("model", other.to_string())),
    }
}

struct Sink {
    dir: PathBuf,
    format: Format,
    provenance: Provenance,
}

impl Sink {
    fn new(command: &'static str, cfg: &LoadedConfig) -> Result<Self, CliError> {
        let out = &cfg.config.output;
        let dir = out.directory.clone();
        std::fs::create_dir_all(&dir).map_err(|source| CliError::Output {
            path: dir.clone(),
            source,
        })?;
        Ok(Self {
            dir,
            format: out.format,
            provenance: Provenance::new(command, cfg.config.experiment.seed, &cfg.config),
        })
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        let err = |source| CliError::Output {
            path: self.dir.clone(),
            source,
        };
        let path = write_atomic(&self.dir, name, bytes).map_err(err)?;
        println!("wrote {}", path.display());
        Ok(())
    }

    fn json(&self, name: &str, result: impl Serialize) -> Result<(), CliError> {
        if !self.format.json() {
            return Ok(());
        }
        let bytes = self
            .provenance
            .json_document(result)
            .map_err(|source| CliError::Output {
                path: self.dir.clone(),
                source,
            })?;
        self.write(name, &bytes)
    }

    fn csv(&self, name: &str, table: CsvTable) -> Result<(), CliError> {
        if !self.format.csv() {
            return Ok(());
        }
        self.write(name, &table.into_bytes())
    }

    fn table(&self, header: &[&str]) -> CsvTable {
        let header: Vec<String> = header.iter().map(|s| s.to_string()).collect();
        CsvTable::new(&self.provenance, &header)
    }
}

pub fn cmd_check(cfg: LoadedConfig) -> Result<ExitStatus, CliError> {
    let m = cfg.model()?;
    let requests = cfg.checks(&m)?;
    let (samples, seed) = (cfg.config.experiment.samples, cfg.config.experiment.seed);
    let sink = Sink::new("check", &cfg)?;

    let reports: Vec<HypothesisReport> = requests
        .par_iter()
        .map(|&r| run_check(&m, r, samples, seed))
        .collect::<xdiff_core::Result<_>>()
        .map_err(|e| classify(&cfg, e))?;

    let mut table = sink.table(&[
        "hypothesis",
        "model",
        "verdict",
        "statistic",
        "samples",
        "margin",
        "seed",
    ]);
    for r in &reports {
        println!("{} {} {} statistic={:e}", r.hypothesis, r.model, r.verdict, r.statistic);
        table.row([
            r.hypothesis.to_string(),
            r.model.clone(),
            r.verdict.to_string(),
            float(r.statistic),
            r.samples.to_string(),
            float(r.margin),
            r.seed.to_string(),
        ]);
    }
    sink.json("reports.json", json!({ "reports": reports }))?;
    sink.csv("checks.csv", table)?;

    let verdicts: Vec<Verdict> = reports.iter().map(|r| r.verdict).collect();
    Ok(if verdicts.contains(&Verdict::Fail) {
        ExitStatus::Fail
    } else if verdicts.contains(&Verdict::Inconclusive) {
        ExitStatus::Inconclusive
    } else {
        ExitStatus::Pass
    })
}

fn trajectory_header(n: usize) -> Vec<String> {
    let mut h = vec!["t".to_string(), "x".to_string()];
    h.extend((1..=n).map(|i| format!("u{i}")));
    h.push("u0".into());
    h
}

fn push_state(table: &mut CsvTable, t: f64, state: &GridField) {
    let grid = state.grid();
    for k in 0..grid.cells {
        let cell = state.cell(k);
        let mut row = vec![float(t), float(grid.center(k))];
        row.extend(cell[1..].iter().map(|&u| float(u)));
        row.push(float(cell[0]));
        table.row(row);
    }
}

fn ledger_table(sink: &Sink, ledger: &EntropyLedger, n: usize) -> CsvTable {
    let mut header: Vec<String> = [
        "step",
        "t",
        "entropy",
        "production",
        "regularization",
        "reaction_work",
        "newton_iterations",
        "residual",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((0..=n).map(|i| format!("mass_u{i}")));
    let mut table = CsvTable::new(&sink.provenance, &header);
    for r in &ledger.records {
        let mut row = vec![
            r.step.to_string(),
            float(r.t),
            float(r.entropy),
            float(r.production),
            float(r.regularization),
            float(r.reaction_work),
            r.newton_iterations.to_string(),
            float(r.residual),
        ];
        row.extend(r.mass.iter().map(|&x| float(x)));
        table.row(row);
    }
    table
}

pub fn cmd_simulate(mut cfg: LoadedConfig) -> Result<ExitStatus, CliError> {
    let m = cfg.model()?;
    let solver = cfg.solver()?;
    let init = cfg.initial(m.species())?;
    let field = init
        .build(solver.grid())
        .map_err(|e| cfg.error_at("initial", e.to_string()))?;
    let sink = Sink::new("simulate", &cfg)?;

    let mut trajectory = sink.table(
        &trajectory_header(m.species())
            .iter()
            .map(String::as_str)
            .collect::<Vec<_>>(),
    );
    let mut ledger = EntropyLedger::default();
    let outcome = simulate_with(&m, &field, &solver, |rec, state| {
        push_state(&mut trajectory, rec.t, state);
        ledger.records.push(rec.clone());
    });
    let failure = match outcome {
        Ok(()) => None,
        Err(e @ xdiff_core::Error::NewtonDiverged { .. }) => Some(e),
        Err(e) => return Err(classify(&cfg, e)),
    };
    let failure_json = failure.as_ref().map(|e| match e {
        xdiff_core::Error::NewtonDiverged {
            step,
            residual,
            iterations,
        } => json!({ "step": step, "residual": residual, "iterations": iterations, "message": e.to_string() }),
        _ => unreachable!(),
    });

    let summary = json!({
        "steps": ledger.records.len().saturating_sub(1),
        "max_mass_drift": ledger.max_mass_drift(),
        "max_inequality_defect": ledger.max_inequality_defect(solver.tau),
        "entropy_non_increasing": ledger.entropy_non_increasing(0.0),
    });
    sink.csv("trajectory.csv", trajectory)?;
    sink.csv("ledger.csv", ledger_table(&sink, &ledger, m.species()))?;
    sink.json(
        "ledger.json",
        json!({
            "model": m.name,
            "summary": summary,
            "failure": failure_json,
            "records": ledger.records,
        }),
    )?;
    match failure {
        Some(e) => {
            eprintln!("error: {e}");
            Ok(ExitStatus::SolverFailure)
        }
        None => {
            println!(
                "{} steps, mass drift {:e}, entropy {:e} -> {:e}",
                summary["steps"],
                ledger.max_mass_drift(),
                ledger.records.first().map_or(0.0, |r| r.entropy),
                ledger.records.last().map_or(0.0, |r| r.entropy)
            );
            Ok(ExitStatus::Pass)
        }
    }
}

fn twin_table(sink: &Sink, r: &TwinExperimentResult) -> CsvTable {
    let mut table = sink.table(&["t", "H", "lower_bound", "I1", "I2"]);
    for (k, (t, h)) in r.h_series.iter().enumerate() {
        let pick = |s: &Option<Vec<(f64, f64)>>| optional(s.as_ref().and_then(|v| v.get(k)).map(|p| p.1));
        table.row([
            float(*t),
            float(*h),
            float(r.lower_bound_series[k].1),
            pick(&r.i1_series),
            pick(&r.i2_series),
        ]);
    }
    table
}

pub fn cmd_twin(mut cfg: LoadedConfig) -> Result<ExitStatus, CliError> {
    let m = cfg.model()?;
    let delta = cfg.delta()?;
    let solver = cfg.solver()?;
    let fine = cfg.reference_solver(&solver)?;
    let init = cfg.initial(m.species())?;
    let field = init
        .build(solver.grid())
        .map_err(|e| cfg.error_at("initial", e.to_string()))?;
    let sink = Sink::new("twin", &cfg)?;

    let r = twin_experiment(&m, &field, delta, &solver, &fine).map_err(|e| classify(&cfg, e))?;
    println!(
        "H(0) = {:e}, max H = {:e}, C* = {}, envelope violations = {}",
        r.initial_entropy(),
        r.max_entropy(),
        r.fitted_c.map_or("none".to_string(), |c| format!("{c:e}")),
        r.envelope_violations
    );
    sink.csv("twin.csv", twin_table(&sink, &r))?;
    sink.json("twin.json", &r)?;
    Ok(ExitStatus::Pass)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: f64,
    pub h0: f64,
    pub max_h: f64,
    pub fitted_c: Option<f64>,
    /// Entropy change over the unperturbed coarse run.
    pub entropy_drift: f64,
    /// Terminal `L^2` distance to the `(tau/16, 4M)` reference.
    pub self_convergence_error: f64,
}

struct RowSetup {
    model: ModelSpec,
    solver: SolverConfig,
    fine: SolverConfig,
    delta: f64,
}

fn entropy_drift(m: &ModelSpec, init: &InitialData, cfg: &SolverConfig) -> xdiff_core::Result<f64> {
    let f0 = init.build(cfg.grid())?;
    let (_, ledger) = simulate_final(m, &f0, cfg)?;
    let entropy = |r: Option<&xdiff_core::StepRecord>| r.map_or(0.0, |r| r.entropy);
    Ok(entropy(ledger.records.last()) - entropy(ledger.records.first()))
}

fn convergence_error(m: &ModelSpec, init: &InitialData, cfg: &SolverConfig) -> xdiff_core::Result<f64> {
    Ok(self_convergence(m, init, cfg, 1)?[0].error)
}

fn sweep_row(
    setup: &RowSetup,
    value: f64,
    init: &InitialData,
    shared_error: Option<f64>,
) -> xdiff_core::Result<SweepRow> {
    let field = init.build(setup.solver.grid())?;
    let m = &setup.model;
    let ((twin, drift), error) = rayon::join(
        || {
            rayon::join(
                || twin_experiment(m, &field, setup.delta, &setup.solver, &setup.fine),
                || entropy_drift(m, init, &setup.solver),
            )
        },
        || match shared_error {
            Some(e) => Ok(e),
            None => convergence_error(m, init, &setup.solver),
        },
    );
    let twin = twin?;
    Ok(SweepRow {
        value,
        h0: twin.initial_entropy(),
        max_h: twin.max_entropy(),
        fitted_c: twin.fitted_c,
        entropy_drift: drift?,
        self_convergence_error: error?,
    })
}

pub fn cmd_sweep(mut cfg: LoadedConfig) -> Result<ExitStatus, CliError> {
    let sweep = cfg.sweep()?;
    let base_model = cfg.model()?;
    let solver = cfg.solver()?;
    let delta = cfg.delta()?;
    let init = cfg.initial(base_model.species())?;
    cfg.reference_solver(&solver)?;

    let setups: Vec<RowSetup> = sweep
        .values
        .iter()
        .map(|&v| -> Result<RowSetup, ConfigError> {
            let (mut model, mut s, mut d) = (base_model.clone(), solver, delta);
            match sweep.axis {
                SweepAxis::Delta => d = v,
                SweepAxis::Tau => {
                    s.tau = v;
                    s.validate().map_err(|e| cfg.error_at("values", e.to_string()))?;
                }
                SweepAxis::Parameter => {
                    let path = sweep.parameter.as_deref().expect("validated");
                    let params = with_parameter(&cfg.config.model, path, v).map_err(|e| cfg.error_at("values", e))?;
                    model =
                        build_model(&params, cfg.config.reaction.as_ref()).map_err(|e| cfg.error_at("values", e))?;
                }
            }
            let fine = cfg.reference_solver(&s)?;
            Ok(RowSetup {
                model,
                solver: s,
                fine,
                delta: d,
            })
        })
        .collect::<Result<_, _>>()?;
    let sink = Sink::new("sweep", &cfg)?;

    // The unperturbed run does not see delta, so one convergence run serves
    // every row of a delta axis.
    let shared_error = match sweep.axis {
        SweepAxis::Delta => Some(convergence_error(&base_model, &init, &solver).map_err(|e| classify(&cfg, e))?),
        _ => None,
    };
    let rows: Vec<SweepRow> = setups
        .par_iter()
        .zip(&sweep.values)
        .map(|(s, &v)| sweep_row(s, v, &init, shared_error))
        .collect::<xdiff_core::Result<_>>()
        .map_err(|e| classify(&cfg, e))?;

    let mut table = sink.table(&[
        "value",
        "H0",
        "max_H",
        "C_star",
        "entropy_drift",
        "self_convergence_error",
    ]);
    for r in &rows {
        println!(
            "value {:e}: H(0) = {:e}, max H = {:e}, C* = {}, drift = {:e}, error = {:e}",
            r.value,
            r.h0,
            r.max_h,
            r.fitted_c.map_or("none".to_string(), |c| format!("{c:e}")),
            r.entropy_drift,
            r.self_convergence_error
        );
        table.row([
            float(r.value),
            float(r.h0),
            float(r.max_h),
            optional(r.fitted_c),
            float(r.entropy_drift),
            float(r.self_convergence_error),
        ]);
    }
    sink.csv("sweep.csv", table)?;
    sink.json("sweep.json", json!({ "axis": sweep.axis, "rows": rows }))?;
    Ok(ExitStatus::Pass)
}

/// Loads the config at `path` and applies command-line overrides.
pub fn load(
    path: &Path,
    seed: Option<u64>,
    out: Option<PathBuf>,
    format: Option<Format>,
) -> Result<LoadedConfig, CliError> {
    let mut cfg = LoadedConfig::load(path)?;
    if let Some(s) = seed {
        cfg.config.experiment.seed = s;
    }
    if let Some(d) = out {
        cfg.config.output.directory = d;
    }
    if let Some(f) = format {
        cfg.config.output.format = f;
    }
    Ok(cfg)
}
