//! Catalog of volume-filling cross-diffusion models.
//!
//! Every catalog model carries its reduced mobility `rho_ij = Bbar_ij / u_i`
//! in closed form, so that it stays defined up to the simplex boundary.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mobility::{augment, AugmentedMobility};
use crate::simplex::{hessian, hessian_inverse, AugmentedComposition, Composition};

/// A cross-diffusion system `d_t u = div(A(u) grad u) + r(u)` on the simplex.
///
/// Catalog models are [`ModelSpec`] values; the trait exists so that checkers
/// can also be pointed at hand-built (for instance fault-injected) models.
pub trait CrossDiffusionModel: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;

    fn species(&self) -> usize;

    /// The exponent `s` in `(0, 1]` of the positivity condition.
    fn entropy_exponent(&self) -> f64;

    /// `A(u)`, `n x n`.
    fn diffusion(&self, c: &Composition) -> DMatrix<f64>;

    /// `B(u) = A(u) h''(u)^{-1}`.
    fn mobility(&self, c: &Composition) -> DMatrix<f64> {
        self.diffusion(c) * hessian_inverse(c)
    }

    fn augmented_mobility(&self, c: &Composition) -> AugmentedMobility {
        augment(&self.mobility(c))
    }

    /// `h''(u) A(u)`. Defaults to the numerical product.
    fn hessian_diffusion(&self, c: &Composition) -> Result<DMatrix<f64>> {
        Ok(hessian(c)? * self.diffusion(c))
    }

    /// `rho_ij = Bbar_ij / u_i` in factored form, if the model provides one.
    fn reduced_mobility(&self, _ac: &AugmentedComposition) -> Option<DMatrix<f64>> {
        None
    }

    /// Species reaction rates `r_1..r_n`; the solvent rate is minus their sum.
    fn reaction(&self, _c: &Composition) -> Option<DVector<f64>> {
        None
    }

    /// Constant of the strengthened subspace inequality, for models that
    /// have one.
    fn improved_lemma_constant(&self) -> Option<f64> {
        None
    }

    /// Writes `B` at the augmented point `bar_u` row-major into `out`.
    fn mobility_into(&self, bar_u: &[f64], out: &mut [f64]) {
        let c = AugmentedComposition::new(bar_u.to_vec())
            .expect("solver state left the simplex")
            .composition();
        let b = self.mobility(&c);
        let n = b.nrows();
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = b[(i, j)];
            }
        }
    }

    /// Writes the species reaction rates at `bar_u` into `out`; returns
    /// false when the model has no reaction.
    fn reaction_into(&self, bar_u: &[f64], out: &mut [f64]) -> bool {
        let c = AugmentedComposition::new(bar_u.to_vec())
            .expect("solver state left the simplex")
            .composition();
        match self.reaction(&c) {
            Some(r) => {
                out.copy_from_slice(r.as_slice());
                true
            }
            None => false,
        }
    }
}

/// Parameters of the catalog models. The tag doubles as the model name in
/// configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelParams {
    Scalar {
        #[serde(default = "default_alpha")]
        alpha: f64,
    },
    Multiphase {
        #[serde(default = "one")]
        q11: f64,
        #[serde(default = "one")]
        q12: f64,
        #[serde(default = "one")]
        q22: f64,
    },
    Tumor {
        #[serde(default = "one")]
        beta: f64,
        #[serde(default = "one")]
        theta: f64,
    },
    BusenbergTravis {
        #[serde(default = "default_bt")]
        p: Vec<Vec<f64>>,
    },
    MaxwellStefan {
        #[serde(default = "one")]
        d01: f64,
        #[serde(default = "two")]
        d02: f64,
        #[serde(default = "three")]
        d12: f64,
    },
    ThinFilm {
        #[serde(default = "default_thin_film")]
        a: Vec<Vec<f64>>,
    },
    IonChannel {
        #[serde(default = "default_ion")]
        d: Vec<f64>,
    },
}

fn one() -> f64 {
    1.0
}
fn two() -> f64 {
    2.0
}
fn three() -> f64 {
    3.0
}
fn default_alpha() -> f64 {
    1.0
}
fn default_bt() -> Vec<Vec<f64>> {
    vec![vec![1.5, 0.5], vec![0.5, 1.5]]
}
fn default_thin_film() -> Vec<Vec<f64>> {
    vec![vec![1.0; 3]; 3]
}
fn default_ion() -> Vec<f64> {
    vec![1.0, 2.0]
}

impl ModelParams {
    pub const NAMES: [&'static str; 7] = [
        "scalar",
        "multiphase",
        "tumor",
        "busenberg_travis",
        "maxwell_stefan",
        "thin_film",
        "ion_channel",
    ];

    pub fn preset(name: &str) -> Result<Self> {
        Ok(match name {
            "scalar" => Self::Scalar { alpha: default_alpha() },
            "multiphase" => Self::Multiphase {
                q11: 1.0,
                q12: 1.0,
                q22: 1.0,
            },
            "tumor" => Self::Tumor { beta: 1.0, theta: 1.0 },
            "busenberg_travis" => Self::BusenbergTravis { p: default_bt() },
            "maxwell_stefan" => Self::MaxwellStefan {
                d01: 1.0,
                d02: 2.0,
                d12: 3.0,
            },
            "thin_film" => Self::ThinFilm { a: default_thin_film() },
            "ion_channel" => Self::IonChannel { d: default_ion() },
            other => return Err(Error::InvalidParameter(format!("unknown model {other:?}"))),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Scalar { .. } => "scalar",
            Self::Multiphase { .. } => "multiphase",
            Self::Tumor { .. } => "tumor",
            Self::BusenbergTravis { .. } => "busenberg_travis",
            Self::MaxwellStefan { .. } => "maxwell_stefan",
            Self::ThinFilm { .. } => "thin_film",
            Self::IonChannel { .. } => "ion_channel",
        }
    }
}

type ReactionFn = dyn Fn(&Composition) -> DVector<f64> + Send + Sync;

/// Reaction terms `r_1..r_n`.
#[derive(Clone)]
pub enum Reaction {
    /// `r_i = rate * u_i * (u_0 - 1/2)`.
    Logistic {
        rate: f64,
    },
    Custom {
        label: String,
        f: Arc<ReactionFn>,
    },
}

impl Reaction {
    pub fn custom<F>(label: impl Into<String>, f: F) -> Self
    where
        F: Fn(&Composition) -> DVector<f64> + Send + Sync + 'static,
    {
        Self::Custom {
            label: label.into(),
            f: Arc::new(f),
        }
    }

    pub fn evaluate(&self, c: &Composition) -> DVector<f64> {
        match self {
            Self::Logistic { rate } => {
                let g = rate * (c.solvent() - 0.5);
                DVector::from_iterator(c.species(), c.fractions().iter().map(|u| g * u))
            }
            Self::Custom { f, .. } => f(c),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Self::Logistic { rate } => format!("logistic(rate={rate})"),
            Self::Custom { label, .. } => label.clone(),
        }
    }
}

impl fmt::Debug for Reaction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// A catalog model with validated parameters.
#[derive(Debug, Clone)]
pub struct ModelSpec {
    pub name: String,
    pub n: usize,
    pub params: ModelParams,
    pub s: f64,
    reaction: Option<Reaction>,
    reaction_constant_hint: Option<f64>,
}

impl ModelSpec {
    pub fn from_params(params: ModelParams) -> Result<Self> {
        let (n, s) = match &params {
            ModelParams::Scalar { alpha } => {
                if !(0.0..=1.0).contains(alpha) {
                    return Err(Error::InvalidParameter(format!(
                        "scalar model needs alpha in [0, 1], got {alpha}"
                    )));
                }
                (1, (alpha + 1.0) / 2.0)
            }
            ModelParams::Multiphase { q11, q12, q22 } => {
                if !(*q11 > 0.0 && *q12 > 0.0 && *q22 > 0.0) {
                    return Err(Error::InvalidParameter(
                        "multiphase coefficients must be positive".into(),
                    ));
                }
                if !(16.0 * q11 * q22 > q12 * q12) {
                    return Err(Error::InvalidParameter(format!(
                        "multiphase model needs 16 q11 q22 > q12^2 (got {} <= {})",
                        16.0 * q11 * q22,
                        q12 * q12
                    )));
                }
                (2, 1.0)
            }
            ModelParams::Tumor { beta, theta } => {
                if !(*beta > 0.0 && *theta > 0.0) {
                    return Err(Error::InvalidParameter("tumor parameters must be positive".into()));
                }
                if !(*theta < 4.0 / beta.sqrt()) {
                    return Err(Error::InvalidParameter(format!(
                        "tumor model needs theta < 4/sqrt(beta) (theta = {theta}, beta = {beta})"
                    )));
                }
                (2, 1.0)
            }
            ModelParams::BusenbergTravis { p } => {
                let m = square(p, "interaction matrix")?;
                let n = m.nrows();
                if n == 0 {
                    return Err(Error::InvalidParameter("empty interaction matrix".into()));
                }
                if (&m - m.transpose()).amax() > 1e-12 {
                    return Err(Error::InvalidParameter("interaction matrix must be symmetric".into()));
                }
                let lo = m.clone().symmetric_eigen().eigenvalues.min();
                if !(lo > 0.0) {
                    return Err(Error::InvalidParameter(format!(
                        "interaction matrix must be positive definite (smallest eigenvalue {lo})"
                    )));
                }
                (n, 1.0)
            }
            ModelParams::MaxwellStefan { d01, d02, d12 } => {
                if !(*d01 > 0.0 && *d02 > 0.0 && *d12 > 0.0) {
                    return Err(Error::InvalidParameter(
                        "Maxwell-Stefan coefficients must be positive".into(),
                    ));
                }
                (2, 0.5)
            }
            ModelParams::ThinFilm { a } => {
                let m = square(a, "hopping table")?;
                if m.nrows() < 2 {
                    return Err(Error::InvalidParameter(
                        "hopping table needs at least two components".into(),
                    ));
                }
                for i in 0..m.nrows() {
                    for j in 0..i {
                        if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 {
                            return Err(Error::InvalidParameter("hopping table must be symmetric".into()));
                        }
                        if !(m[(i, j)] > 0.0) {
                            return Err(Error::InvalidParameter("hopping rates must be positive".into()));
                        }
                    }
                }
                (m.nrows() - 1, 0.5)
            }
            ModelParams::IonChannel { d } => {
                if d.is_empty() || d.iter().any(|x| !(*x > 0.0)) {
                    return Err(Error::InvalidParameter("ion diffusivities must be positive".into()));
                }
                (d.len(), 0.5)
            }
        };
        Ok(Self {
            name: params.name().to_string(),
            n,
            params,
            s,
            reaction: None,
            reaction_constant_hint: None,
        })
    }

    pub fn preset(name: &str) -> Result<Self> {
        Self::from_params(ModelParams::preset(name)?)
    }

    pub fn catalog() -> Vec<Self> {
        ModelParams::NAMES
            .iter()
            .map(|n| Self::preset(n).expect("presets are valid"))
            .collect()
    }

    pub fn scalar(alpha: f64) -> Result<Self> {
        Self::from_params(ModelParams::Scalar { alpha })
    }

    pub fn multiphase(q11: f64, q12: f64, q22: f64) -> Result<Self> {
        Self::from_params(ModelParams::Multiphase { q11, q12, q22 })
    }

    pub fn tumor(beta: f64, theta: f64) -> Result<Self> {
        Self::from_params(ModelParams::Tumor { beta, theta })
    }

    pub fn busenberg_travis(p: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_params(ModelParams::BusenbergTravis { p })
    }

    pub fn maxwell_stefan(d01: f64, d02: f64, d12: f64) -> Result<Self> {
        Self::from_params(ModelParams::MaxwellStefan { d01, d02, d12 })
    }

    pub fn thin_film(a: Vec<Vec<f64>>) -> Result<Self> {
        Self::from_params(ModelParams::ThinFilm { a })
    }

    pub fn ion_channel(d: Vec<f64>) -> Result<Self> {
        Self::from_params(ModelParams::IonChannel { d })
    }

    /// Attaches reaction terms after checking that `r_i` vanishes wherever
    /// `u_i` does.
    pub fn with_reaction(mut self, r: Reaction, constant_hint: f64) -> Result<Self> {
        let n = self.n;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for i in 0..n {
            for _ in 0..32 {
                let e: Vec<f64> = (0..=n).map(|_| Exp1.sample(&mut rng)).collect();
                let total: f64 = e.iter().sum();
                let mut u: Vec<f64> = e[1..].iter().map(|x| x / total).collect();
                u[i] = 0.0;
                let c = Composition::new(u)?;
                let value = r.evaluate(&c);
                if value.len() != n {
                    return Err(Error::DimensionMismatch(format!(
                        "reaction returned {} rates for {} species",
                        value.len(),
                        n
                    )));
                }
                if !(value[i].abs() <= 1e-14) {
                    return Err(Error::InvalidReaction {
                        species: i + 1,
                        value: value[i],
                    });
                }
            }
        }
        self.reaction = Some(r);
        self.reaction_constant_hint = Some(constant_hint);
        Ok(self)
    }

    pub fn reaction_term(&self) -> Option<&Reaction> {
        self.reaction.as_ref()
    }

    pub fn reaction_constant_hint(&self) -> Option<f64> {
        self.reaction_constant_hint
    }

    /// `h''A` where the model has a closed form for it.
    pub fn closed_form_hessian_diffusion(&self, c: &Composition) -> Option<DMatrix<f64>> {
        let u = c.fractions();
        match &self.params {
            ModelParams::Scalar { alpha } => Some(DMatrix::from_element(1, 1, u[0].powf(alpha - 1.0))),
            ModelParams::Multiphase { q11, q12, q22 } => Some(DMatrix::from_row_slice(
                2,
                2,
                &[
                    2.0 * q11 + 2.0 * q12 * u[1],
                    q12 * u[0],
                    q12 * u[1],
                    2.0 * q22 + 2.0 * q12 * u[0],
                ],
            )),
            ModelParams::Tumor { beta, theta } => Some(DMatrix::from_row_slice(
                2,
                2,
                &[2.0, 0.0, beta * theta * u[1], 2.0 * beta * (1.0 + theta * u[0])],
            )),
            ModelParams::BusenbergTravis { p } => Some(to_matrix(p)),
            _ => None,
        }
    }

    /// Reduced mobility written row-major into `out` (`(n+1)^2` entries).
    pub fn reduced_into(&self, bar_u: &[f64], out: &mut [f64]) {
        let m = self.n + 1;
        debug_assert_eq!(out.len(), m * m);
        match &self.params {
            ModelParams::Scalar { alpha } => {
                let (u0, u1) = (bar_u[0], bar_u[1]);
                let p = u1.powf(*alpha);
                out[0] = u0 * u1 * p;
                out[1] = -out[0];
                out[2] = -u0 * u0 * p;
                out[3] = u0 * u0 * p;
            }
            ModelParams::Multiphase { .. } | ModelParams::Tumor { .. } | ModelParams::BusenbergTravis { .. } => {
                let mut d = vec![0.0; self.n * self.n];
                self.dissipation_into(bar_u, &mut d);
                reduced_from_dissipation(bar_u, &d, out);
            }
            ModelParams::MaxwellStefan { d01, d02, d12 } => {
                let dd = [[0.0, *d01, *d02], [*d01, 0.0, *d12], [*d02, *d12, 0.0]];
                let u = bar_u;
                let a = d01 * d02 * u[0] + d01 * d12 * u[1] + d02 * d12 * u[2];
                for i in 0..3 {
                    let mut diag = 0.0;
                    for j in 0..3 {
                        if i == j {
                            continue;
                        }
                        let k = 3 - i - j;
                        let g = dd[i][k] * u[i] + dd[j][k] * u[j] + (dd[i][k] + dd[j][k] - dd[i][j]) * u[k];
                        out[i * 3 + j] = -u[j] * g / a;
                        diag += u[j] * g / a;
                    }
                    out[i * 3 + i] = diag;
                }
            }
            ModelParams::ThinFilm { a } => {
                for i in 0..m {
                    let mut diag = 0.0;
                    for j in 0..m {
                        if i != j {
                            out[i * m + j] = -a[i][j] * bar_u[j];
                            diag += a[i][j] * bar_u[j];
                        }
                    }
                    out[i * m + i] = diag;
                }
            }
            ModelParams::IonChannel { d } => {
                let u0 = bar_u[0];
                out.iter_mut().for_each(|x| *x = 0.0);
                let mut total = 0.0;
                for (j, dj) in d.iter().enumerate() {
                    let du = dj * bar_u[j + 1];
                    total += du;
                    out[j + 1] = -du / u0;
                    out[(j + 1) * m] = -dj;
                    out[(j + 1) * m + j + 1] = *dj;
                }
                out[0] = total / u0;
            }
        }
    }

    /// `h''A` for the models where it is a polynomial, row-major.
    fn dissipation_into(&self, bar_u: &[f64], out: &mut [f64]) {
        let u = &bar_u[1..];
        match &self.params {
            ModelParams::Multiphase { q11, q12, q22 } => {
                out[0] = 2.0 * q11 + 2.0 * q12 * u[1];
                out[1] = q12 * u[0];
                out[2] = q12 * u[1];
                out[3] = 2.0 * q22 + 2.0 * q12 * u[0];
            }
            ModelParams::Tumor { beta, theta } => {
                out[0] = 2.0;
                out[1] = 0.0;
                out[2] = beta * theta * u[1];
                out[3] = 2.0 * beta * (1.0 + theta * u[0]);
            }
            ModelParams::BusenbergTravis { p } => {
                let n = self.n;
                for i in 0..n {
                    out[i * n..(i + 1) * n].copy_from_slice(&p[i]);
                }
            }
            _ => unreachable!("no polynomial dissipation matrix"),
        }
    }
}

/// `rho_ij = u_j (K D K^T)_ij` with `K_0k = -u_k`, `K_ik = delta_ik - u_k`,
/// which holds whenever `A = h''^{-1} D`.
fn reduced_from_dissipation(bar_u: &[f64], d: &[f64], out: &mut [f64]) {
    let n = bar_u.len() - 1;
    let m = n + 1;
    let u = &bar_u[1..];
    // c_k = sum_l u_l D_lk
    let mut c = vec![0.0; n];
    for l in 0..n {
        for k in 0..n {
            c[k] += u[l] * d[l * n + k];
        }
    }
    // F = K D, F_ik = [i >= 1] D_{i-1,k} - c_k
    let mut f = vec![0.0; m * n];
    for i in 0..m {
        for k in 0..n {
            let own = if i > 0 { d[(i - 1) * n + k] } else { 0.0 };
            f[i * n + k] = own - c[k];
        }
    }
    for i in 0..m {
        let e: f64 = (0..n).map(|k| f[i * n + k] * u[k]).sum();
        for j in 0..m {
            let own = if j > 0 { f[i * n + j - 1] } else { 0.0 };
            out[i * m + j] = bar_u[j] * (own - e);
        }
    }
}

fn square(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>> {
    let n = rows.len();
    if rows.iter().any(|r| r.len() != n) {
        return Err(Error::InvalidParameter(format!("{what} must be square")));
    }
    if rows.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::InvalidParameter(format!("{what} has non-finite entries")));
    }
    Ok(to_matrix(rows))
}

fn to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    DMatrix::from_fn(n, n, |i, j| rows[i][j])
}

impl CrossDiffusionModel for ModelSpec {
    fn name(&self) -> &str {
        &self.name
    }

    fn species(&self) -> usize {
        self.n
    }

    fn entropy_exponent(&self) -> f64 {
        self.s
    }

    fn diffusion(&self, c: &Composition) -> DMatrix<f64> {
        let u = c.fractions();
        let u0 = c.solvent();
        match &self.params {
            ModelParams::Scalar { alpha } => DMatrix::from_element(1, 1, u0 * u[0].powf(*alpha)),
            ModelParams::Multiphase { q11, q12, q22 } => {
                let (u1, u2) = (u[0], u[1]);
                let q1 = q11 * u1 + q12 * u1 * u2;
                let q2 = q12 * u1 * u2 + q22 * u2;
                DMatrix::from_row_slice(
                    2,
                    2,
                    &[
                        u1 * (2.0 * q11 + q12 * u2 * (2.0 - u2) - 2.0 * q1),
                        u1 * (q12 * u1 * (1.0 - u1) - 2.0 * q2),
                        u2 * (q12 * u2 * (1.0 - u2) - 2.0 * q1),
                        u2 * (2.0 * q22 + q12 * u1 * (2.0 - u1) - 2.0 * q2),
                    ],
                )
            }
            ModelParams::Tumor { beta, theta } => {
                let (u1, u2) = (u[0], u[1]);
                DMatrix::from_row_slice(
                    2,
                    2,
                    &[
                        2.0 * u1 * (1.0 - u1) - beta * theta * u1 * u2 * u2,
                        -2.0 * beta * u1 * u2 * (1.0 + theta * u1),
                        -2.0 * u1 * u2 + beta * theta * (1.0 - u2) * u2 * u2,
                        2.0 * beta * u2 * (1.0 - u2) * (1.0 + theta * u1),
                    ],
                )
            }
            ModelParams::BusenbergTravis { p } => {
                let n = self.n;
                let pu: Vec<f64> = (0..n).map(|j| (0..n).map(|k| p[j][k] * u[k]).sum()).collect();
                DMatrix::from_fn(n, n, |i, j| u[i] * (p[i][j] - pu[j]))
            }
            ModelParams::MaxwellStefan { d01, d02, d12 } => {
                let (u1, u2) = (u[0], u[1]);
                let a = d01 * d02 * u0 + d01 * d12 * u1 + d02 * d12 * u2;
                DMatrix::from_row_slice(
                    2,
                    2,
                    &[
                        d02 + (d12 - d02) * u1,
                        (d12 - d01) * u1,
                        (d12 - d02) * u2,
                        d01 + (d12 - d01) * u2,
                    ],
                ) / a
            }
            ModelParams::ThinFilm { a } => {
                let n = self.n;
                DMatrix::from_fn(n, n, |i, j| {
                    let (ii, jj) = (i + 1, j + 1);
                    if i == j {
                        (1..=n)
                            .filter(|&k| k != ii)
                            .map(|k| (a[ii][k] - a[ii][0]) * u[k - 1])
                            .sum::<f64>()
                            + a[ii][0]
                    } else {
                        -(a[ii][jj] - a[ii][0]) * u[i]
                    }
                })
            }
            ModelParams::IonChannel { d } => {
                let n = self.n;
                DMatrix::from_fn(n, n, |i, j| {
                    let delta = if i == j { 1.0 } else { 0.0 };
                    d[i] * (delta + u[i] / u0)
                })
            }
        }
    }

    fn mobility(&self, c: &Composition) -> DMatrix<f64> {
        let n = self.n;
        let mut out = vec![0.0; n * n];
        self.mobility_into(c.augmented().values(), &mut out);
        DMatrix::from_row_slice(n, n, &out)
    }

    fn hessian_diffusion(&self, c: &Composition) -> Result<DMatrix<f64>> {
        match self.closed_form_hessian_diffusion(c) {
            Some(d) => Ok(d),
            None => Ok(hessian(c)? * self.diffusion(c)),
        }
    }

    fn reduced_mobility(&self, ac: &AugmentedComposition) -> Option<DMatrix<f64>> {
        let m = self.n + 1;
        let mut out = vec![0.0; m * m];
        self.reduced_into(ac.values(), &mut out);
        Some(DMatrix::from_row_slice(m, m, &out))
    }

    fn reaction(&self, c: &Composition) -> Option<DVector<f64>> {
        self.reaction.as_ref().map(|r| r.evaluate(c))
    }

    fn improved_lemma_constant(&self) -> Option<f64> {
        match &self.params {
            ModelParams::IonChannel { d } => Some(d.iter().copied().fold(f64::INFINITY, f64::min)),
            _ => None,
        }
    }

    fn mobility_into(&self, bar_u: &[f64], out: &mut [f64]) {
        let n = self.n;
        let m = n + 1;
        match &self.params {
            ModelParams::IonChannel { d } => {
                out.iter_mut().for_each(|x| *x = 0.0);
                for i in 0..n {
                    out[i * n + i] = d[i] * bar_u[i + 1];
                }
            }
            _ => {
                let mut rho = vec![0.0; m * m];
                self.reduced_into(bar_u, &mut rho);
                for i in 0..n {
                    for j in 0..n {
                        out[i * n + j] = bar_u[i + 1] * rho[(i + 1) * m + j + 1];
                    }
                }
            }
        }
    }

    fn reaction_into(&self, bar_u: &[f64], out: &mut [f64]) -> bool {
        match &self.reaction {
            None => false,
            Some(Reaction::Logistic { rate }) => {
                let g = rate * (bar_u[0] - 0.5);
                for (o, u) in out.iter_mut().zip(&bar_u[1..]) {
                    *o = g * u;
                }
                true
            }
            Some(r) => {
                let c = AugmentedComposition::new(bar_u.to_vec())
                    .expect("solver state left the simplex")
                    .composition();
                out.copy_from_slice(r.evaluate(&c).as_slice());
                true
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mobility::mobility_matrix;
    use approx::assert_relative_eq;

    fn comp(u: &[f64]) -> Composition {
        Composition::new(u.to_vec()).unwrap()
    }

    fn interior_points(n: usize) -> Vec<Composition> {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        (0..200)
            .map(|_| {
                let e: Vec<f64> = (0..=n).map(|_| Exp1.sample(&mut rng)).collect();
                let t: f64 = e.iter().sum();
                comp(&e[1..].iter().map(|x| x / t).collect::<Vec<_>>())
            })
            .collect()
    }

    #[test]
    fn scalar_examples() {
        let m = ModelSpec::scalar(0.0).unwrap();
        assert_relative_eq!(m.diffusion(&comp(&[0.5]))[(0, 0)], 0.5);
        let m = ModelSpec::scalar(1.0).unwrap();
        assert_eq!(m.s, 1.0);
        let d = hessian(&comp(&[0.5])).unwrap() * m.diffusion(&comp(&[0.5]));
        assert_relative_eq!(d[(0, 0)], 1.0, max_relative = 1e-14);
        assert!(ModelSpec::scalar(1.5).is_err());
        assert!(ModelSpec::scalar(-0.1).is_err());
    }

    #[test]
    fn multiphase_examples() {
        let m = ModelSpec::multiphase(1.0, 1.0, 1.0).unwrap();
        let d = m.closed_form_hessian_diffusion(&comp(&[0.0, 0.0])).unwrap();
        assert_eq!(d, DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 2.0]));
        assert!(ModelSpec::multiphase(1.0, 5.0, 1.0).is_err());
        for c in interior_points(2) {
            let d = m.closed_form_hessian_diffusion(&c).unwrap();
            let sym = (&d + d.transpose()) * 0.5;
            assert!(sym.determinant() >= 3.75 - 1e-12);
        }
    }

    #[test]
    fn tumor_examples() {
        let m = ModelSpec::tumor(1.0, 1.0).unwrap();
        let c = comp(&[0.3, 0.4]);
        let d = m.hessian_diffusion(&c).unwrap();
        let want = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.4, 2.6]);
        assert!((&d - &want).amax() < 1e-15);
        let numeric = hessian(&c).unwrap() * m.diffusion(&c);
        assert!((numeric - want).amax() < 1e-12);
        assert!(ModelSpec::tumor(1.0, 5.0).is_err());
    }

    #[test]
    fn busenberg_travis_examples() {
        let m = ModelSpec::busenberg_travis(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let a = m.diffusion(&comp(&[0.25, 0.25]));
        let want = DMatrix::from_row_slice(2, 2, &[0.1875, -0.0625, -0.0625, 0.1875]);
        assert!((a - want).amax() < 1e-16);
        assert!(ModelSpec::busenberg_travis(vec![vec![1.0, 0.2], vec![0.0, 1.0]]).is_err());
        assert!(ModelSpec::busenberg_travis(vec![vec![1.0, 2.0], vec![2.0, 1.0]]).is_err());
    }

    #[test]
    fn maxwell_stefan_examples() {
        let m = ModelSpec::maxwell_stefan(2.0, 2.0, 2.0).unwrap();
        for c in interior_points(2).iter().take(20) {
            let a = m.diffusion(c);
            assert!((a - DMatrix::identity(2, 2) * 0.5).amax() < 1e-14);
        }
        assert!(ModelSpec::maxwell_stefan(1.0, 0.0, 1.0).is_err());
        // a(u) at u = (0.25, 0.25) with (1, 2, 3)
        let a = 1.0 * 2.0 * 0.5 + 1.0 * 3.0 * 0.25 + 2.0 * 3.0 * 0.25;
        assert_relative_eq!(a, 3.25);
    }

    #[test]
    fn thin_film_examples() {
        let m = ModelSpec::preset("thin_film").unwrap();
        let c = comp(&[0.25, 0.25]);
        let bm = m.augmented_mobility(&c);
        assert_relative_eq!(bm.entries[(1, 2)], -0.0625, max_relative = 1e-14);
        assert_relative_eq!(bm.entries[(1, 1)], 0.1875, max_relative = 1e-14);
        assert!(ModelSpec::thin_film(vec![vec![1.0, 2.0], vec![1.0, 1.0]]).is_err());
        assert!(ModelSpec::thin_film(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).is_err());
    }

    #[test]
    fn ion_channel_examples() {
        let m = ModelSpec::ion_channel(vec![2.0, 3.0]).unwrap();
        let bm = m.augmented_mobility(&comp(&[0.2, 0.3]));
        assert_relative_eq!(bm.entries[(0, 0)], 1.3, max_relative = 1e-14);
        assert_eq!(bm.entries[(1, 2)], 0.0);
        assert_eq!(m.improved_lemma_constant(), Some(2.0));
        assert!(ModelSpec::ion_channel(vec![1.0, -1.0]).is_err());
    }

    #[test]
    fn factored_reduced_mobility_matches_numeric_augmentation() {
        for m in ModelSpec::catalog() {
            for c in interior_points(m.n) {
                let ac = c.augmented();
                let rho = m.reduced_mobility(&ac).unwrap();
                let numeric = augment(&mobility_matrix(&m, &c).unwrap()).entries;
                let scale = numeric.amax().max(1.0);
                for i in 0..=m.n {
                    for j in 0..=m.n {
                        let got = ac.values()[i] * rho[(i, j)];
                        assert!(
                            (got - numeric[(i, j)]).abs() <= 1e-12 * scale,
                            "{} ({i},{j}): {got} vs {}",
                            m.name,
                            numeric[(i, j)]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn closed_forms_match_numeric_product() {
        for m in ModelSpec::catalog() {
            for c in interior_points(m.n) {
                if let Some(d) = m.closed_form_hessian_diffusion(&c) {
                    let numeric = hessian(&c).unwrap() * m.diffusion(&c);
                    assert!((d - numeric).amax() < 1e-11, "{}", m.name);
                }
            }
        }
    }

    #[test]
    fn reactions() {
        let m = ModelSpec::preset("maxwell_stefan")
            .unwrap()
            .with_reaction(Reaction::Logistic { rate: 1.0 }, 1.0)
            .unwrap();
        let r = m.reaction(&comp(&[0.2, 0.3])).unwrap();
        assert_relative_eq!(r[0], 0.2 * 0.0, epsilon = 1e-16);
        let r = m.reaction(&comp(&[0.2, 0.1])).unwrap();
        assert_relative_eq!(r[0], 0.2 * 0.2, max_relative = 1e-14);

        let bad = Reaction::custom("constant", |c: &Composition| DVector::from_element(c.species(), 0.1));
        assert!(matches!(
            ModelSpec::preset("tumor").unwrap().with_reaction(bad, 1.0),
            Err(Error::InvalidReaction { species: 1, .. })
        ));
    }
}
