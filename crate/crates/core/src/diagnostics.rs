//! Relative entropy between fields and the twin-run stability experiment.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::CrossDiffusionModel;
use crate::simplex::{AugmentedComposition, GridField};
use crate::solver::{self, face_mobility, inject, restrict, simulate_with, SolverConfig};

/// Interior margin kept by the twin perturbation.
pub const PERTURBATION_MARGIN: f64 = 1e-6;

/// Relative tolerance of the Gronwall envelope test.
pub const ENVELOPE_TOLERANCE: f64 = 1e-12;

/// `y log(y/z) - y + z`, accurate also for `y` close to `z`.
pub fn relative_entropy_density(y: f64, z: f64) -> f64 {
    if y == 0.0 {
        return z;
    }
    let x = (y - z) / z;
    if x.abs() < 1e-2 {
        // (1+x)log(1+x) - x = sum_{k>=2} (-1)^k x^k / (k(k-1))
        let mut term = x * x;
        let mut sum = 0.0;
        for k in 2..12 {
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            sum += sign * term / (k * (k - 1)) as f64;
            term *= x;
        }
        z * sum
    } else {
        y * (y / z).ln() - y + z
    }
}

/// `y log(y/z) - y + z - (y - z)^2 / (2 max(y, z))`, nonnegative on `(0, 1]^2`.
pub fn hl2_pointwise_gap(y: f64, z: f64) -> f64 {
    relative_entropy_density(y, z) - 0.5 * (y - z).powi(2) / y.max(z)
}

fn same_shape(u: &GridField, v: &GridField) -> Result<()> {
    if u.grid() != v.grid() || u.species() != v.species() {
        return Err(Error::DimensionMismatch(format!(
            "fields differ: {} cells x {} species vs {} cells x {} species",
            u.grid().cells,
            u.species(),
            v.grid().cells,
            v.species()
        )));
    }
    Ok(())
}

/// `sum_{i=0}^n int u_i log(u_i/v_i) - u_i + v_i dx`.
pub fn relative_entropy(u: &GridField, v: &GridField) -> Result<f64> {
    same_shape(u, v)?;
    if let Some(k) = (0..v.grid().cells).find(|&k| v.cell(k).iter().any(|&x| !(x > 0.0))) {
        return Err(Error::BoundaryReference(k));
    }
    let dx = u.grid().dx();
    let total = solver::neumaier_sum(u.cells().zip(v.cells()).map(|(a, b)| {
        a.iter()
            .zip(b)
            .map(|(y, z)| relative_entropy_density(*y, *z))
            .sum::<f64>()
    }));
    Ok(total * dx)
}

/// `1/2 sum_{i=0}^n int |u_i - v_i|^2 dx`.
pub fn hl2_lower_bound(u: &GridField, v: &GridField) -> Result<f64> {
    same_shape(u, v)?;
    let dx = u.grid().dx();
    let s: f64 = u
        .cells()
        .zip(v.cells())
        .map(|(a, b)| a.iter().zip(b).map(|(y, z)| (y - z).powi(2)).sum::<f64>())
        .sum();
    Ok(0.5 * s * dx)
}

fn require_interior(f: &GridField) -> Result<()> {
    match (0..f.grid().cells).find(|&k| f.cell(k).iter().any(|&x| !(x > 0.0))) {
        Some(k) => Err(Error::BoundaryComposition(f.composition(k).fractions().to_vec())),
        None => Ok(()),
    }
}

fn reduced(m: &dyn CrossDiffusionModel, cell: &[f64]) -> Result<nalgebra::DMatrix<f64>> {
    let ac = AugmentedComposition::new(cell.to_vec())?;
    match m.reduced_mobility(&ac) {
        Some(r) => Ok(r),
        None => {
            let b = m.augmented_mobility(&ac.composition()).entries;
            Ok(nalgebra::DMatrix::from_fn(b.nrows(), b.ncols(), |i, j| {
                b[(i, j)] / cell[i]
            }))
        }
    }
}

/// Instantaneous integrands of the two terms of the relative entropy
/// balance, summed over cell faces:
///
/// `I1 = -sum_ij int Bbar_ij(u) grad log(u_j/v_j) . grad log(u_i/v_i)` and
/// `I2 = -sum_ij int (rho_ij(u) - rho_ij(v)) u_i grad log v_j . grad log(u_i/v_i)`.
pub fn decomposition_observables(m: &dyn CrossDiffusionModel, u: &GridField, v: &GridField) -> Result<(f64, f64)> {
    same_shape(u, v)?;
    require_interior(u)?;
    require_interior(v)?;
    crate::mobility::check_species(m, u.species())?;
    let dx = u.grid().dx();
    let mp = u.species() + 1;
    let (mut i1, mut i2) = (0.0, 0.0);
    let mut ru_prev = reduced(m, u.cell(0))?;
    let mut rv_prev = reduced(m, v.cell(0))?;
    for k in 0..u.grid().cells - 1 {
        let (ul, ur, vl, vr) = (u.cell(k), u.cell(k + 1), v.cell(k), v.cell(k + 1));
        let ru_next = reduced(m, ur)?;
        let rv_next = reduced(m, vr)?;
        let bbar = face_mobility(m, ul, ur);
        let g: Vec<f64> = (0..mp)
            .map(|i| ((ur[i] / vr[i]).ln() - (ul[i] / vl[i]).ln()) / dx)
            .collect();
        let gv: Vec<f64> = (0..mp).map(|j| (vr[j].ln() - vl[j].ln()) / dx).collect();
        for i in 0..mp {
            let ui = 0.5 * (ul[i] + ur[i]);
            for j in 0..mp {
                i1 -= bbar[(i, j)] * g[i] * g[j] * dx;
                let drho = 0.5 * (ru_prev[(i, j)] + ru_next[(i, j)]) - 0.5 * (rv_prev[(i, j)] + rv_next[(i, j)]);
                i2 -= drho * ui * gv[j] * g[i] * dx;
            }
        }
        ru_prev = ru_next;
        rv_prev = rv_next;
    }
    Ok((i1, i2))
}

/// Smallest `C` with `H(t) <= H(0) exp(C t)` at every stamp.
pub fn gronwall_fit(series: &[(f64, f64)]) -> Result<f64> {
    let Some(&(_, h0)) = series.first() else {
        return Err(Error::DegenerateSeries(0.0));
    };
    if !(h0 > 1e-14) {
        return Err(Error::DegenerateSeries(h0));
    }
    Ok(series
        .iter()
        .skip(1)
        .filter(|(t, h)| *t > 0.0 && *h > 0.0)
        .map(|(t, h)| (h / h0).ln() / t)
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Stamps where the series exceeds `H(0) exp(C t)` by more than the relative
/// tolerance.
pub fn envelope_violations(series: &[(f64, f64)], c: f64) -> usize {
    let Some(&(t0, h0)) = series.first() else {
        return 0;
    };
    series
        .iter()
        .filter(|(t, h)| *h > h0 * (c * (t - t0)).exp() * (1.0 + ENVELOPE_TOLERANCE))
        .count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwinExperimentResult {
    pub delta: f64,
    pub h_series: Vec<(f64, f64)>,
    pub lower_bound_series: Vec<(f64, f64)>,
    /// `None` when `H(0)` vanishes and no growth rate can be fitted.
    pub fitted_c: Option<f64>,
    pub envelope_violations: usize,
    pub i1_series: Option<Vec<(f64, f64)>>,
    pub i2_series: Option<Vec<(f64, f64)>>,
    /// Smallest augmented entry of the reference run.
    pub positivity_floor: f64,
    /// Largest `|grad log v_j|` of the reference run.
    pub max_log_gradient: f64,
    pub time_refinement: usize,
    pub space_refinement: usize,
}

impl TwinExperimentResult {
    pub fn initial_entropy(&self) -> f64 {
        self.h_series.first().map_or(0.0, |p| p.1)
    }

    pub fn max_entropy(&self) -> f64 {
        self.h_series.iter().map(|p| p.1).fold(0.0, f64::max)
    }

    /// `sup_t H(t)/H(0)`, or `None` when `H(0) = 0`.
    pub fn max_growth(&self) -> Option<f64> {
        let h0 = self.initial_entropy();
        (h0 > 0.0).then(|| self.max_entropy() / h0)
    }

    pub fn max_i1(&self) -> f64 {
        self.i1_series
            .iter()
            .flatten()
            .map(|p| p.1)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Mass-neutral bump moved from the solvent to species 1, clipped to keep
/// every entry at least [`PERTURBATION_MARGIN`].
pub fn perturb(init: &GridField, delta: f64) -> Result<GridField> {
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "perturbation size must be >= 0, got {delta}"
        )));
    }
    let grid = init.grid();
    let bump: Vec<f64> = (0..grid.cells)
        .map(|k| {
            let x = (grid.center(k) / grid.length - 0.3) / 0.2;
            if x.abs() < 1.0 {
                0.5 * (1.0 + (std::f64::consts::PI * x).cos())
            } else {
                0.0
            }
        })
        .collect();
    let mean = bump.iter().sum::<f64>() / grid.cells as f64;
    let m = init.species() + 1;
    let mut data = init.raw().to_vec();
    for (k, b) in bump.iter().enumerate() {
        let cell = &mut data[k * m..(k + 1) * m];
        let lo = PERTURBATION_MARGIN - cell[1];
        let hi = cell[0] - PERTURBATION_MARGIN;
        let p = (delta * (b - mean)).clamp(lo.min(0.0), hi.max(0.0));
        cell[1] += p;
        cell[0] -= p;
    }
    GridField::from_augmented(grid, init.species(), data)
}

/// Integer ratio `a / b` if it is one to `1e-9` relative.
fn integer_ratio(a: f64, b: f64) -> Option<usize> {
    let r = a / b;
    let k = r.round();
    ((r - k).abs() <= 1e-9 * k.max(1.0) && k >= 1.0).then_some(k as usize)
}

/// Checks that `fine` either equals `coarse` or refines it by an integer
/// factor of at least 4 in time and 2 in space; returns the factors.
pub fn refinement_factors(coarse: &SolverConfig, fine: &SolverConfig) -> Result<(usize, usize)> {
    let mismatch = |msg: String| Err(Error::ConfigMismatch(msg));
    if (coarse.t_final - fine.t_final).abs() > 1e-12 * coarse.t_final
        || (coarse.length - fine.length).abs() > 1e-12 * coarse.length
    {
        return mismatch("reference run must share T and the domain length".into());
    }
    let rt = integer_ratio(coarse.tau, fine.tau);
    let rx = fine
        .cells
        .is_multiple_of(coarse.cells)
        .then(|| fine.cells / coarse.cells);
    match (rt, rx) {
        (Some(1), Some(1)) => Ok((1, 1)),
        (Some(t), Some(x)) if t >= 4 && x >= 2 => Ok((t, x)),
        _ => mismatch(format!(
            "reference (tau {}, M {}) must equal (tau {}, M {}) or refine it by >= 4 in tau and >= 2 in M, with integer factors",
            fine.tau, fine.cells, coarse.tau, coarse.cells
        )),
    }
}

/// Runs the perturbed coarse solution `u` next to an unperturbed reference
/// `v` on `cfg_fine` and tracks `H(u|v)` at every coarse stamp.
pub fn twin_experiment(
    m: &dyn CrossDiffusionModel,
    init: &GridField,
    delta: f64,
    cfg: &SolverConfig,
    cfg_fine: &SolverConfig,
) -> Result<TwinExperimentResult> {
    cfg.validate()?;
    cfg_fine.validate()?;
    let (rt, rx) = refinement_factors(cfg, cfg_fine)?;
    let start = solver::project_inward(init);
    let u0 = perturb(&start, delta)?;
    let v0 = inject(&start, rx)?;

    let (coarse, fine) = rayon::join(
        || -> Result<Vec<GridField>> {
            let mut states = Vec::new();
            simulate_with(m, &u0, cfg, |_, s| states.push(s.clone()))?;
            Ok(states)
        },
        || -> Result<(Vec<GridField>, f64, f64)> {
            let mut states = Vec::new();
            let (mut floor, mut grad) = (f64::INFINITY, 0.0_f64);
            let dx = cfg_fine.grid().dx();
            let mut failure = None;
            simulate_with(m, &v0, cfg_fine, |rec, s| {
                if rec.step % rt != 0 || failure.is_some() {
                    return;
                }
                floor = floor.min(s.raw().iter().copied().fold(f64::INFINITY, f64::min));
                for k in 0..s.grid().cells - 1 {
                    for (a, b) in s.cell(k).iter().zip(s.cell(k + 1)) {
                        grad = grad.max(((b.ln() - a.ln()) / dx).abs());
                    }
                }
                match restrict(s, rx) {
                    Ok(r) => states.push(r),
                    Err(e) => failure = Some(e),
                }
            })?;
            match failure {
                Some(e) => Err(e),
                None => Ok((states, floor, grad)),
            }
        },
    );
    let coarse = coarse?;
    let (fine, floor, grad) = fine?;

    let mut h_series = Vec::with_capacity(coarse.len());
    let mut lower = Vec::with_capacity(coarse.len());
    let mut i1 = Vec::with_capacity(coarse.len());
    let mut i2 = Vec::with_capacity(coarse.len());
    for (k, (u, v)) in coarse.iter().zip(&fine).enumerate() {
        let t = k as f64 * cfg.tau;
        h_series.push((t, relative_entropy(u, v)?));
        lower.push((t, hl2_lower_bound(u, v)?));
        let (a, b) = decomposition_observables(m, u, v)?;
        i1.push((t, a));
        i2.push((t, b));
    }
    let fitted_c = match gronwall_fit(&h_series) {
        Ok(c) => Some(c),
        Err(Error::DegenerateSeries(_)) => None,
        Err(e) => return Err(e),
    };
    let envelope_violations = fitted_c.map_or(0, |c| envelope_violations(&h_series, c));
    Ok(TwinExperimentResult {
        delta,
        h_series,
        lower_bound_series: lower,
        fitted_c,
        envelope_violations,
        i1_series: Some(i1),
        i2_series: Some(i2),
        positivity_floor: floor,
        max_log_gradient: grad,
        time_refinement: rt,
        space_refinement: rx,
    })
}
