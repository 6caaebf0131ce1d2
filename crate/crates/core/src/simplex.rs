//! States on the Gibbs simplex and the Boltzmann entropy calculus.
//!
//! A [`Composition`] holds the species fractions `u_1..u_n`; the solvent
//! fraction `u_0 = 1 - sum(u_i)` is carried alongside so that values produced
//! from entropy variables keep full relative precision near `u_0 = 0`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Slack allowed on the closed-simplex constraints for values that went
/// through floating-point arithmetic.
pub const SIMPLEX_SLACK: f64 = 1e-12;

#[inline]
fn xlogx_minus_x(x: f64) -> f64 {
    if x > 0.0 {
        x * (x.ln() - 1.0)
    } else {
        0.0
    }
}

/// Species volume fractions `u_1..u_n`, a point of the closed simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Composition {
    u: Vec<f64>,
    u0: f64,
}

impl Composition {
    pub fn new(u: Vec<f64>) -> Result<Self> {
        if u.is_empty() {
            return Err(Error::InvalidComposition(u));
        }
        let total: f64 = u.iter().sum();
        let in_box = u
            .iter()
            .all(|&x| x.is_finite() && (-SIMPLEX_SLACK..=1.0 + SIMPLEX_SLACK).contains(&x));
        if !in_box || total > 1.0 + SIMPLEX_SLACK {
            return Err(Error::InvalidComposition(u));
        }
        let u: Vec<f64> = u.into_iter().map(|x| x.clamp(0.0, 1.0)).collect();
        let u0 = (1.0 - u.iter().sum::<f64>()).max(0.0);
        Ok(Self { u, u0 })
    }

    /// The barycenter `u_i = 1/(n+1)`, where the entropy attains its minimum.
    pub fn uniform(n: usize) -> Self {
        let v = 1.0 / (n as f64 + 1.0);
        Self { u: vec![v; n], u0: v }
    }

    pub fn species(&self) -> usize {
        self.u.len()
    }

    pub fn fractions(&self) -> &[f64] {
        &self.u
    }

    pub fn solvent(&self) -> f64 {
        self.u0
    }

    /// All species fractions and the solvent strictly positive.
    pub fn is_interior(&self) -> bool {
        self.u0 > 0.0 && self.u.iter().all(|&x| x > 0.0)
    }

    pub fn augmented(&self) -> AugmentedComposition {
        let mut bar_u = Vec::with_capacity(self.u.len() + 1);
        bar_u.push(self.u0);
        bar_u.extend_from_slice(&self.u);
        AugmentedComposition { bar_u }
    }

    fn require_interior(&self) -> Result<()> {
        if self.is_interior() {
            Ok(())
        } else {
            Err(Error::BoundaryComposition(self.u.clone()))
        }
    }
}

/// The augmented vector `(u_0, u_1, ..., u_n)` with entries summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedComposition {
    bar_u: Vec<f64>,
}

impl AugmentedComposition {
    pub fn new(bar_u: Vec<f64>) -> Result<Self> {
        let total: f64 = bar_u.iter().sum();
        if bar_u.len() < 2 || bar_u.iter().any(|&x| !x.is_finite() || x < -SIMPLEX_SLACK) || (total - 1.0).abs() > 1e-10
        {
            return Err(Error::InvalidComposition(bar_u));
        }
        Ok(Self {
            bar_u: bar_u.into_iter().map(|x| x.max(0.0)).collect(),
        })
    }

    /// Index 0 is the solvent.
    pub fn values(&self) -> &[f64] {
        &self.bar_u
    }

    pub fn species(&self) -> usize {
        self.bar_u.len() - 1
    }

    pub fn is_interior(&self) -> bool {
        self.bar_u.iter().all(|&x| x > 0.0)
    }

    pub fn min_entry(&self) -> f64 {
        self.bar_u.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Entrywise square root, the unit vector spanning `L(u)^perp`.
    pub fn sqrt(&self) -> Vec<f64> {
        self.bar_u.iter().map(|x| x.sqrt()).collect()
    }

    pub fn composition(&self) -> Composition {
        Composition {
            u: self.bar_u[1..].to_vec(),
            u0: self.bar_u[0],
        }
    }
}

/// Entropy variables `w_i = log(u_i / u_0)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyVars {
    w: Vec<f64>,
}

impl EntropyVars {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() || w.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteEntropyVars(w));
        }
        Ok(Self { w })
    }

    pub fn values(&self) -> &[f64] {
        &self.w
    }
}

/// `h(u) = sum_{i=0}^n u_i (log u_i - 1)` with `0 log 0 = 0`.
pub fn entropy_density(c: &Composition) -> f64 {
    xlogx_minus_x(c.u0) + c.u.iter().map(|&x| xlogx_minus_x(x)).sum::<f64>()
}

/// Same as [`entropy_density`] on an augmented vector.
pub fn augmented_entropy_density(bar_u: &[f64]) -> f64 {
    bar_u.iter().map(|&x| xlogx_minus_x(x)).sum()
}

pub fn to_entropy_vars(c: &Composition) -> Result<EntropyVars> {
    c.require_interior()?;
    let log_u0 = c.u0.ln();
    Ok(EntropyVars {
        w: c.u.iter().map(|x| x.ln() - log_u0).collect(),
    })
}

/// Writes `(u_0, u_1, ..., u_n)` for the entropy variables `w` into `out`.
///
/// The exponentials are shifted by `max(0, w_1, ..., w_n)` so that no term
/// overflows; every output entry is strictly positive for finite `w` unless
/// it underflows below the smallest subnormal.
pub fn augmented_from_entropy_vars(w: &[f64], out: &mut [f64]) {
    debug_assert_eq!(out.len(), w.len() + 1);
    let shift = w.iter().copied().fold(0.0_f64, f64::max);
    out[0] = (-shift).exp();
    let mut denom = out[0];
    for (o, &wi) in out[1..].iter_mut().zip(w) {
        *o = (wi - shift).exp();
        denom += *o;
    }
    for o in out.iter_mut() {
        *o /= denom;
    }
}

pub fn from_entropy_vars(w: &EntropyVars) -> Composition {
    let mut bar_u = vec![0.0; w.w.len() + 1];
    augmented_from_entropy_vars(&w.w, &mut bar_u);
    Composition {
        u0: bar_u[0],
        u: bar_u[1..].to_vec(),
    }
}

/// `(h'')^{-1}_{ij} = delta_ij u_i - u_i u_j`.
pub fn hessian_inverse(c: &Composition) -> DMatrix<f64> {
    let u = &c.u;
    let n = u.len();
    DMatrix::from_fn(n, n, |i, j| {
        let d = if i == j { u[i] } else { 0.0 };
        d - u[i] * u[j]
    })
}

/// `h''_{ij} = delta_ij / u_i + 1 / u_0`, defined only in the open simplex.
pub fn hessian(c: &Composition) -> Result<DMatrix<f64>> {
    c.require_interior()?;
    let n = c.u.len();
    let inv0 = 1.0 / c.u0;
    Ok(DMatrix::from_fn(
        n,
        n,
        |i, j| {
            if i == j {
                1.0 / c.u[i] + inv0
            } else {
                inv0
            }
        },
    ))
}

/// Uniform 1-D grid on `[0, length]` with `cells` cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub cells: usize,
    pub length: f64,
}

impl Grid {
    pub fn new(cells: usize, length: f64) -> Result<Self> {
        if cells < 2 || !(length > 0.0 && length.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "grid needs at least 2 cells and a positive length (got {cells}, {length})"
            )));
        }
        Ok(Self { cells, length })
    }

    pub fn dx(&self) -> f64 {
        self.length / self.cells as f64
    }

    pub fn center(&self, k: usize) -> f64 {
        (k as f64 + 0.5) * self.dx()
    }
}

/// Piecewise-constant field of compositions on a [`Grid`].
///
/// Values are stored cell by cell in augmented order `(u_0, u_1, ..., u_n)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridField {
    grid: Grid,
    species: usize,
    data: Vec<f64>,
}

impl GridField {
    pub fn from_compositions(grid: Grid, values: &[Composition]) -> Result<Self> {
        if values.len() != grid.cells {
            return Err(Error::DimensionMismatch(format!(
                "{} values for {} cells",
                values.len(),
                grid.cells
            )));
        }
        let species = values[0].species();
        let mut data = Vec::with_capacity(grid.cells * (species + 1));
        for c in values {
            if c.species() != species {
                return Err(Error::DimensionMismatch("mixed species counts in one field".into()));
            }
            data.push(c.u0);
            data.extend_from_slice(&c.u);
        }
        Ok(Self { grid, species, data })
    }

    pub fn constant(grid: Grid, c: &Composition) -> Self {
        let cell = c.augmented();
        let mut data = Vec::with_capacity(grid.cells * cell.bar_u.len());
        for _ in 0..grid.cells {
            data.extend_from_slice(&cell.bar_u);
        }
        Self {
            grid,
            species: c.species(),
            data,
        }
    }

    /// Builds a field from raw augmented cell data, validating every cell.
    pub fn from_augmented(grid: Grid, species: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.cells * (species + 1) {
            return Err(Error::DimensionMismatch(format!(
                "{} values for {} cells of {} components",
                data.len(),
                grid.cells,
                species + 1
            )));
        }
        for cell in data.chunks(species + 1) {
            AugmentedComposition::new(cell.to_vec())?;
        }
        Ok(Self { grid, species, data })
    }

    pub(crate) fn from_augmented_unchecked(grid: Grid, species: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), grid.cells * (species + 1));
        Self { grid, species, data }
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }

    pub fn species(&self) -> usize {
        self.species
    }

    /// Augmented values `(u_0, ..., u_n)` of cell `k`.
    pub fn cell(&self, k: usize) -> &[f64] {
        let m = self.species + 1;
        &self.data[k * m..(k + 1) * m]
    }

    pub fn composition(&self, k: usize) -> Composition {
        let cell = self.cell(k);
        Composition {
            u0: cell[0],
            u: cell[1..].to_vec(),
        }
    }

    pub fn cells(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.species + 1)
    }

    pub fn raw(&self) -> &[f64] {
        &self.data
    }

    pub fn is_interior(&self) -> bool {
        self.data.iter().all(|&x| x > 0.0)
    }

    /// `sum_k u_i(x_k) dx` for every augmented index `i`.
    pub fn masses(&self) -> Vec<f64> {
        let dx = self.grid.dx();
        let mut m = vec![0.0; self.species + 1];
        for cell in self.cells() {
            for (mi, &x) in m.iter_mut().zip(cell) {
                *mi += x * dx;
            }
        }
        m
    }
}

/// Midpoint-rule integral of the entropy density over the grid.
pub fn entropy_functional(f: &GridField) -> f64 {
    let dx = f.grid.dx();
    f.cells().map(augmented_entropy_density).sum::<f64>() * dx
}
