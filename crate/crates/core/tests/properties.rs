use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use xdiff_core::diagnostics::{
    envelope_violations, gronwall_fit, hl2_lower_bound, hl2_pointwise_gap, relative_entropy,
};
use xdiff_core::hypotheses::{refinement_verdict, SimplexSampler, Verdict};
use xdiff_core::mobility::{change_of_variables_residual, g_matrix, project_l, projector_l, projector_lperp};
use xdiff_core::simplex::{entropy_density, from_entropy_vars, hessian, hessian_inverse, to_entropy_vars};
use xdiff_core::solver::{simulate, InitialData, SolverConfig};
use xdiff_core::{AugmentedComposition, Composition, CrossDiffusionModel, EntropyVars, Grid, GridField, ModelSpec};

fn interior(n: usize, floor: f64) -> impl Strategy<Value = Composition> {
    prop::collection::vec(floor..1.0f64, n + 1).prop_map(|w| {
        let total: f64 = w.iter().sum();
        Composition::new(w[1..].iter().map(|x| x / total).collect()).unwrap()
    })
}

fn any_model() -> impl Strategy<Value = ModelSpec> {
    (0..ModelSpec::catalog().len()).prop_map(|k| ModelSpec::catalog().swap_remove(k))
}

fn model_and_point(floor: f64) -> impl Strategy<Value = (ModelSpec, Composition)> {
    any_model().prop_flat_map(move |m| {
        let n = m.n;
        (Just(m), interior(n, floor))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn entropy_variables_round_trip(c in (1usize..=3).prop_flat_map(|n| interior(n, 1e-9))) {
        let back = from_entropy_vars(&to_entropy_vars(&c).unwrap());
        for (a, b) in back.fractions().iter().zip(c.fractions()) {
            prop_assert!((a - b).abs() <= 1e-12 * b);
        }
    }

    #[test]
    fn entropy_density_is_convex(
        (a, b) in (1usize..=3).prop_flat_map(|n| (interior(n, 1e-6), interior(n, 1e-6))),
        lambda in 0.0..1.0f64,
    ) {
        let mix: Vec<f64> = a.fractions().iter().zip(b.fractions())
            .map(|(x, y)| lambda * x + (1.0 - lambda) * y).collect();
        let lhs = entropy_density(&Composition::new(mix).unwrap());
        let rhs = lambda * entropy_density(&a) + (1.0 - lambda) * entropy_density(&b);
        prop_assert!(lhs <= rhs + 1e-14);
    }

    #[test]
    fn hessian_inverse_is_psd_and_inverts(c in (1usize..=3).prop_flat_map(|n| interior(n, 1e-4))) {
        let hi = hessian_inverse(&c);
        prop_assert!((&hi - hi.transpose()).amax() == 0.0);
        let min = hi.clone().symmetric_eigen().eigenvalues.min();
        prop_assert!(min >= -1e-14);
        let prod = hessian(&c).unwrap() * &hi;
        let n = c.species();
        prop_assert!((prod - DMatrix::identity(n, n)).amax() <= 1e-10);
    }

    #[test]
    fn inverse_transform_lands_inside(w in prop::collection::vec(-30.0..30.0f64, 1..=3)) {
        let c = from_entropy_vars(&EntropyVars::new(w).unwrap());
        prop_assert!(c.fractions().iter().all(|&x| x > 0.0));
        prop_assert!(c.fractions().iter().sum::<f64>() < 1.0);
        prop_assert!(c.solvent() > 0.0);
    }

    #[test]
    fn inverse_transform_keeps_every_entry_positive(w in prop::collection::vec(-300.0..300.0f64, 1..=3)) {
        let c = from_entropy_vars(&EntropyVars::new(w).unwrap());
        prop_assert!(c.fractions().iter().all(|&x| x > 0.0));
        prop_assert!(c.solvent() > 0.0);
    }

    #[test]
    fn augmented_mobility_has_zero_line_sums((m, c) in model_and_point(1e-6)) {
        let bm = m.augmented_mobility(&c);
        prop_assert!(bm.max_line_sum() <= 1e-13);
        prop_assert_eq!(bm.species_block(), m.mobility(&c));
    }

    #[test]
    fn projector_algebra(c in (1usize..=3).prop_flat_map(|n| interior(n, 1e-6))) {
        let ac = c.augmented();
        let (p, q) = (projector_l(&ac), projector_lperp(&ac));
        let k = ac.values().len();
        let id = DMatrix::<f64>::identity(k, k);
        prop_assert!((&p * &p - &p).amax() <= 1e-14);
        prop_assert!((&q * &q - &q).amax() <= 1e-14);
        prop_assert!((&p * &q).amax() <= 1e-14);
        prop_assert!((&p + &q - id).amax() <= 1e-14);
    }

    #[test]
    fn g_commutes_with_projection((m, c) in model_and_point(1e-2)) {
        let ac = c.augmented();
        let g = g_matrix(&m.augmented_mobility(&c), &ac).unwrap();
        let p = projector_l(&ac);
        prop_assert!((&p * &g.entries - &g.entries).amax() <= 1e-12);
        prop_assert!((&g.entries * &p - &g.entries).amax() <= 1e-12);
        let root = DVector::from_vec(ac.sqrt());
        prop_assert!((&g.entries * &root).amax() <= 1e-12);
        prop_assert!((g.entries.transpose() * &root).amax() <= 1e-12);
    }

    #[test]
    fn change_of_variables_identity(
        c in (1usize..=3).prop_flat_map(|n| interior(n, 1e-6)),
        raw in prop::collection::vec(-1.0..1.0f64, 4),
    ) {
        let ac = c.augmented();
        let z = project_l(&ac, &DVector::from_vec(raw[..ac.values().len()].to_vec()));
        prop_assert!(change_of_variables_residual(&ac, &z) <= 1e-12);
    }

    #[test]
    fn reduced_mobility_is_consistent((m, c) in model_and_point(1e-6)) {
        let ac = c.augmented();
        let rho = m.reduced_mobility(&ac).unwrap();
        let bbar = m.augmented_mobility(&c).entries;
        let u = ac.values();
        let scale = 1.0 + bbar.amax();
        for i in 0..u.len() {
            for j in 0..u.len() {
                prop_assert!((u[i] * rho[(i, j)] - bbar[(i, j)]).abs() <= 1e-12 * scale);
            }
        }
    }

    #[test]
    fn subspace_form_is_nonnegative(
        (m, c) in model_and_point(1e-4),
        raw in prop::collection::vec(-1.0..1.0f64, 4),
    ) {
        let ac = c.augmented();
        let g = g_matrix(&m.augmented_mobility(&c), &ac).unwrap();
        let z = project_l(&ac, &DVector::from_vec(raw[..ac.values().len()].to_vec()));
        let q = z.dot(&(&g.entries * &z));
        prop_assert!(q >= -1e-12 * (1.0 + g.entries.amax()) * z.norm_squared());
    }

    #[test]
    fn pointwise_l2_bound(y in 1e-300..=1.0f64, z in 1e-300..=1.0f64) {
        prop_assert!(hl2_pointwise_gap(y, z) >= -1e-14);
    }

    #[test]
    fn sampler_respects_margin(seed in any::<u64>(), n in 1usize..=3, margin in 0.0..0.2f64) {
        let s = SimplexSampler::new(n, margin, seed).unwrap().with_boundary_fraction(0.5);
        for p in s.sample_simplex(32).unwrap() {
            prop_assert!(p.values().iter().all(|&x| x >= margin * (1.0 - 1e-12)));
            prop_assert!((p.values().iter().sum::<f64>() - 1.0).abs() <= 1e-14);
        }
    }

    #[test]
    fn gronwall_envelope_dominates(
        h0 in 1e-10..1.0f64,
        logs in prop::collection::vec(-3.0..3.0f64, 1..40),
    ) {
        let mut series = vec![(0.0, h0)];
        series.extend(logs.iter().enumerate().map(|(k, l)| ((k + 1) as f64 * 0.05, h0 * l.exp())));
        let c = gronwall_fit(&series).unwrap();
        prop_assert_eq!(envelope_violations(&series, c), 0);
    }

    #[test]
    fn refinement_verdict_of_constant_sequences(s in 1e-6..1e6f64) {
        prop_assert_eq!(refinement_verdict(&[s, s, s]), Verdict::Pass);
        prop_assert_eq!(refinement_verdict(&[s, 11.0 * s, 121.0 * s]), Verdict::Fail);
    }
}

fn random_field(n: usize, seed: u64, cells: usize) -> GridField {
    let s = SimplexSampler::new(n, 1e-3, seed).unwrap();
    let cells_data: Vec<Composition> = s
        .sample_simplex(cells)
        .unwrap()
        .iter()
        .map(AugmentedComposition::composition)
        .collect();
    GridField::from_compositions(Grid::new(cells, 1.0).unwrap(), &cells_data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn relative_entropy_dominates_l2_bound(n in 1usize..=3, a in any::<u64>(), b in any::<u64>()) {
        let (u, v) = (random_field(n, a, 12), random_field(n, b, 12));
        let h = relative_entropy(&u, &v).unwrap();
        let lb = hl2_lower_bound(&u, &v).unwrap();
        prop_assert!(lb >= 0.0);
        prop_assert!(h >= lb - 1e-12);
        prop_assert_eq!(relative_entropy(&u, &u).unwrap(), 0.0);
        if u != v {
            prop_assert!(h > 0.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn solver_keeps_states_inside_and_conserves_mass(
        m in any_model(),
        amp in 0.1..0.9f64,
        seed in any::<u64>(),
    ) {
        let n = m.species();
        let bary = 1.0 / (n as f64 + 1.0);
        let sign = |i: usize| if (seed >> i) & 1 == 0 { 1.0 } else { -1.0 };
        let init = InitialData::Cosine {
            base: vec![bary; n],
            amplitude: (0..n).map(|i| sign(i) * amp * bary / n as f64).collect(),
        };
        let cfg = SolverConfig::new(2e-3, 2e-2, 0.0, 16, 1.0);
        let traj = simulate(&m, &init.build(cfg.grid()).unwrap(), &cfg).unwrap();
        for s in &traj.states {
            prop_assert!(s.is_interior());
            for cell in s.cells() {
                prop_assert!(cell[1..].iter().sum::<f64>() < 1.0);
            }
        }
        prop_assert!(traj.ledger.max_mass_drift() <= 1e-10);
        prop_assert!(traj.ledger.max_inequality_defect(cfg.tau) <= 1e-12 * traj.ledger.records.len() as f64);
    }
}
