//! Mobility-matrix algebra on the augmented simplex.
//!
//! Index 0 of every augmented object refers to the solvent.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::CrossDiffusionModel;
use crate::simplex::{hessian_inverse, AugmentedComposition, Composition};

/// A vector with one entry per augmented index.
pub type ProbeVector = DVector<f64>;

/// The `(n+1) x (n+1)` augmented mobility at one composition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedMobility {
    pub entries: DMatrix<f64>,
}

impl AugmentedMobility {
    /// Lower-right `n x n` block.
    pub fn species_block(&self) -> DMatrix<f64> {
        let m = self.entries.nrows();
        self.entries.view((1, 1), (m - 1, m - 1)).into_owned()
    }

    /// Largest absolute row or column sum.
    pub fn max_line_sum(&self) -> f64 {
        let rows = self.entries.row_iter().map(|r| r.sum().abs());
        let cols = self.entries.column_iter().map(|c| c.sum().abs());
        rows.chain(cols).fold(0.0, f64::max)
    }
}

/// `G_ij = Bbar_ij / sqrt(u_i u_j)` together with the point it was built at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GMatrix {
    pub entries: DMatrix<f64>,
    pub composition: AugmentedComposition,
}

/// `B(u) = A(u) h''(u)^{-1}`.
pub fn mobility_matrix(m: &dyn CrossDiffusionModel, c: &Composition) -> Result<DMatrix<f64>> {
    check_species(m, c.species())?;
    Ok(m.diffusion(c) * hessian_inverse(c))
}

pub(crate) fn check_species(m: &dyn CrossDiffusionModel, n: usize) -> Result<()> {
    if m.species() != n {
        return Err(Error::DimensionMismatch(format!(
            "model {} has {} species, composition has {}",
            m.name(),
            m.species(),
            n
        )));
    }
    Ok(())
}

/// Borders `B` with the negated row and column sums so that every line of
/// the result sums to zero.
pub fn augment(b: &DMatrix<f64>) -> AugmentedMobility {
    let n = b.nrows();
    let mut e = DMatrix::zeros(n + 1, n + 1);
    e.view_mut((1, 1), (n, n)).copy_from(b);
    let mut total = 0.0;
    for i in 0..n {
        let row: f64 = b.row(i).sum();
        let col: f64 = b.column(i).sum();
        e[(i + 1, 0)] = -row;
        e[(0, i + 1)] = -col;
        total += row;
    }
    e[(0, 0)] = total;
    AugmentedMobility { entries: e }
}

pub fn g_matrix(bm: &AugmentedMobility, ac: &AugmentedComposition) -> Result<GMatrix> {
    let u = ac.values();
    if bm.entries.nrows() != u.len() {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} mobility at a point with {} components",
            bm.entries.nrows(),
            bm.entries.ncols(),
            u.len()
        )));
    }
    if !ac.is_interior() {
        return Err(Error::BoundaryComposition(u[1..].to_vec()));
    }
    let r = ac.sqrt();
    let entries = DMatrix::from_fn(u.len(), u.len(), |i, j| bm.entries[(i, j)] / (r[i] * r[j]));
    Ok(GMatrix {
        entries,
        composition: ac.clone(),
    })
}

/// `y - sqrt(u) (sqrt(u) . y)`.
pub fn project_l(ac: &AugmentedComposition, y: &ProbeVector) -> ProbeVector {
    y - project_lperp(ac, y)
}

/// `sqrt(u) (sqrt(u) . y)`.
pub fn project_lperp(ac: &AugmentedComposition, y: &ProbeVector) -> ProbeVector {
    let r = DVector::from_vec(ac.sqrt());
    let dot = r.dot(y);
    r * dot
}

/// Matrix of [`project_l`].
pub fn projector_l(ac: &AugmentedComposition) -> DMatrix<f64> {
    let m = ac.values().len();
    DMatrix::identity(m, m) - projector_lperp(ac)
}

/// Matrix of [`project_lperp`].
pub fn projector_lperp(ac: &AugmentedComposition) -> DMatrix<f64> {
    let r = DVector::from_vec(ac.sqrt());
    &r * r.transpose()
}

/// `z^T G z` after projecting `z` into `L(u)`.
pub fn subspace_quadratic_form(g: &GMatrix, z: &ProbeVector) -> f64 {
    let zl = project_l(&g.composition, z);
    zl.dot(&(&g.entries * &zl))
}

/// Residual `|h''^{-1} xi - eta|_inf` of the change of variables that maps a
/// subspace vector `z` to species coordinates, with
/// `xi_i = z_0/sqrt(u_0) - z_i/sqrt(u_i)` and `eta_i = -sqrt(u_i) z_i`.
pub fn change_of_variables_residual(ac: &AugmentedComposition, z: &ProbeVector) -> f64 {
    let u = ac.values();
    let r = ac.sqrt();
    let n = u.len() - 1;
    let xi = DVector::from_fn(n, |i, _| z[0] / r[0] - z[i + 1] / r[i + 1]);
    let eta = DVector::from_fn(n, |i, _| -r[i + 1] * z[i + 1]);
    let h = hessian_inverse(&ac.composition());
    (h * xi - eta).amax()
}
