//! One-dimensional implicit Euler scheme in entropy variables.
//!
//! Each step solves, cell by cell on a uniform grid with no-flux ends,
//!
//! ```text
//! u(w) - u_prev - tau [ (F_{k+1/2} - F_{k-1/2})/dx + r(u) ]
//!     + tau eps [ -(G_{k+1/2} - G_{k-1/2})/dx + w ] = 0
//! ```
//!
//! with `F = B_face (w_{k+1} - w_k)/dx`, `B_face` the mean of the two cell
//! mobilities and `G = (w_{k+1} - w_k)/dx` the `H^1` regularization. The
//! unknowns are the entropy variables, so every state lies strictly inside
//! the simplex. Newton's method uses a finite-difference Jacobian assembled
//! with a three-coloring of the cells and solved as a block-tridiagonal
//! system.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::CrossDiffusionModel;
use crate::simplex::{augmented_entropy_density, augmented_from_entropy_vars, Grid, GridField};

fn default_epsilon() -> f64 {
    1e-6
}
fn default_m_reg() -> u32 {
    1
}
fn default_tol() -> f64 {
    1e-12
}
fn default_max_iter() -> usize {
    50
}
fn default_linesearch() -> f64 {
    0.5
}
fn default_length() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub tau: f64,
    #[serde(rename = "T")]
    pub t_final: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_m_reg")]
    pub m_reg: u32,
    pub cells: usize,
    #[serde(default = "default_length")]
    pub length: f64,
    #[serde(default = "default_tol")]
    pub newton_tol: f64,
    #[serde(default = "default_max_iter")]
    pub newton_max_iter: usize,
    /// Step-length reduction factor of the backtracking line search.
    #[serde(default = "default_linesearch")]
    pub linesearch: f64,
}

impl SolverConfig {
    pub fn new(tau: f64, t_final: f64, epsilon: f64, cells: usize, length: f64) -> Self {
        Self {
            tau,
            t_final,
            epsilon,
            m_reg: 1,
            cells,
            length,
            newton_tol: default_tol(),
            newton_max_iter: default_max_iter(),
            linesearch: default_linesearch(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.t_final >= self.tau * (1.0 - 1e-12)) {
            return bad(format!("T = {} must be at least tau = {}", self.t_final, self.tau));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be nonnegative, got {}", self.epsilon));
        }
        if self.m_reg != 1 {
            return bad(format!("only m_reg = 1 is supported, got {}", self.m_reg));
        }
        if !(self.newton_tol > 0.0) {
            return bad("newton_tol must be positive".into());
        }
        if self.newton_max_iter == 0 {
            return bad("newton_max_iter must be positive".into());
        }
        if !(self.linesearch > 0.0 && self.linesearch < 1.0) {
            return bad(format!("linesearch factor must lie in (0, 1), got {}", self.linesearch));
        }
        Grid::new(self.cells, self.length).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        Ok(())
    }

    pub fn grid(&self) -> Grid {
        Grid {
            cells: self.cells,
            length: self.length,
        }
    }

    /// `N = round(T / tau)`.
    pub fn steps(&self) -> usize {
        ((self.t_final / self.tau).round() as usize).max(1)
    }

    /// The same run with `tau / time_factor` and `cells * space_factor`.
    pub fn refined(&self, time_factor: usize, space_factor: usize) -> Self {
        Self {
            tau: self.tau / time_factor as f64,
            cells: self.cells * space_factor,
            ..*self
        }
    }
}

/// Initial profiles on `[0, L]`, evaluated at cell centers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialData {
    Constant {
        u: Vec<f64>,
    },
    /// `left` on `[0, L/2)`, `right` on `[L/2, L]`.
    Step {
        left: Vec<f64>,
        right: Vec<f64>,
    },
    /// `u_i = base_i + amplitude_i cos(pi x / L)`.
    Cosine {
        base: Vec<f64>,
        amplitude: Vec<f64>,
    },
}

/// Boundary cells are mixed with the barycenter by this weight.
pub const INWARD_MIXING: f64 = 1e-8;

impl InitialData {
    /// A smooth profile that is symmetric about the barycenter.
    pub fn default_for(n: usize) -> Self {
        let base = vec![1.0 / (n as f64 + 1.0); n];
        let amp = (0..n)
            .map(|i| if i % 2 == 0 { 0.15 } else { -0.1 } / n as f64)
            .collect();
        Self::Cosine { base, amplitude: amp }
    }

    pub fn species(&self) -> usize {
        match self {
            Self::Constant { u } => u.len(),
            Self::Step { left, .. } => left.len(),
            Self::Cosine { base, .. } => base.len(),
        }
    }

    pub fn build(&self, grid: Grid) -> Result<GridField> {
        let n = self.species();
        let lengths_ok = match self {
            Self::Constant { .. } => true,
            Self::Step { left, right } => left.len() == right.len(),
            Self::Cosine { base, amplitude } => base.len() == amplitude.len(),
        };
        if n == 0 || !lengths_ok {
            return Err(Error::InvalidConfig("initial data vectors disagree in length".into()));
        }
        let mut data = Vec::with_capacity(grid.cells * (n + 1));
        for k in 0..grid.cells {
            let x = grid.center(k);
            let u: Vec<f64> = match self {
                Self::Constant { u } => u.clone(),
                Self::Step { left, right } => {
                    if x < 0.5 * grid.length {
                        left.clone()
                    } else {
                        right.clone()
                    }
                }
                Self::Cosine { base, amplitude } => {
                    let c = (std::f64::consts::PI * x / grid.length).cos();
                    base.iter().zip(amplitude).map(|(b, a)| b + a * c).collect()
                }
            };
            let c = crate::simplex::Composition::new(u)
                .map_err(|e| Error::InvalidConfig(format!("initial value in cell {k}: {e}")))?;
            data.push(c.solvent());
            data.extend_from_slice(c.fractions());
        }
        Ok(project_inward(&GridField::from_augmented(grid, n, data)?))
    }
}

/// Mixes every cell that touches the boundary with the barycenter.
pub fn project_inward(f: &GridField) -> GridField {
    let m = f.species() + 1;
    let bary = 1.0 / m as f64;
    let mut data = f.raw().to_vec();
    for cell in data.chunks_mut(m) {
        if cell.iter().any(|&x| x <= 0.0) {
            for x in cell.iter_mut() {
                *x = (1.0 - INWARD_MIXING) * *x + INWARD_MIXING * bary;
            }
        }
    }
    GridField::from_augmented_unchecked(f.grid(), f.species(), data)
}

/// Per-step record of the discrete entropy balance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub t: f64,
    /// `int h(u) dx`.
    pub entropy: f64,
    /// Discrete entropy production of the new state.
    pub production: f64,
    /// `eps b(w, w)`.
    pub regularization: f64,
    /// `int r(u) . w dx`.
    pub reaction_work: f64,
    pub newton_iterations: usize,
    pub residual: f64,
    /// Masses `int u_i dx` for `i = 0..n`.
    pub mass: Vec<f64>,
    /// Mass removed from each species by the zeroth-order regularization
    /// term in this step, `tau eps int w_i dx`.
    pub regularization_mass_source: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EntropyLedger {
    pub records: Vec<StepRecord>,
}

impl EntropyLedger {
    /// Largest violation of `H_k + tau (P_k + eps b_k - R_k) <= H_{k-1}`.
    pub fn max_inequality_defect(&self, tau: f64) -> f64 {
        self.records
            .windows(2)
            .map(|w| {
                let (a, b) = (&w[0], &w[1]);
                b.entropy + tau * (b.production + b.regularization - b.reaction_work) - a.entropy
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Largest relative change of any species mass from the first record.
    pub fn max_mass_drift(&self) -> f64 {
        let Some(first) = self.records.first() else {
            return 0.0;
        };
        self.records
            .iter()
            .flat_map(|r| {
                r.mass
                    .iter()
                    .zip(&first.mass)
                    .skip(1)
                    .map(|(m, m0)| ((m - m0) / m0).abs())
            })
            .fold(0.0, f64::max)
    }

    pub fn entropy_non_increasing(&self, tolerance: f64) -> bool {
        self.records
            .windows(2)
            .all(|w| w[1].entropy <= w[0].entropy + tolerance)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryField {
    pub times: Vec<f64>,
    pub states: Vec<GridField>,
    pub ledger: EntropyLedger,
}

impl TrajectoryField {
    pub fn last(&self) -> &GridField {
        self.states.last().expect("trajectory holds the initial state")
    }
}

/// Cell states derived from the entropy variables.
#[derive(Clone)]
struct CellState {
    n: usize,
    u: Vec<f64>,
    b: Vec<f64>,
    r: Vec<f64>,
    reacts: bool,
}

impl CellState {
    fn new(n: usize, cells: usize) -> Self {
        Self {
            n,
            u: vec![0.0; cells * (n + 1)],
            b: vec![0.0; cells * n * n],
            r: vec![0.0; cells * n],
            reacts: false,
        }
    }

    fn update(&mut self, m: &dyn CrossDiffusionModel, w: &[f64], k: usize) {
        let n = self.n;
        let u = &mut self.u[k * (n + 1)..(k + 1) * (n + 1)];
        augmented_from_entropy_vars(&w[k * n..(k + 1) * n], u);
        m.mobility_into(u, &mut self.b[k * n * n..(k + 1) * n * n]);
        self.reacts = m.reaction_into(u, &mut self.r[k * n..(k + 1) * n]);
    }

    fn update_all(&mut self, m: &dyn CrossDiffusionModel, w: &[f64]) {
        for k in 0..self.u.len() / (self.n + 1) {
            self.update(m, w, k);
        }
    }
}

struct Stepper<'a> {
    model: &'a dyn CrossDiffusionModel,
    cfg: &'a SolverConfig,
    tau: f64,
    n: usize,
    cells: usize,
    dx: f64,
}

impl<'a> Stepper<'a> {
    fn residual(&self, w: &[f64], st: &CellState, prev: &[f64], out: &mut [f64]) {
        let (n, dx, tau, eps) = (self.n, self.dx, self.tau, self.cfg.epsilon);
        for k in 0..self.cells {
            for i in 0..n {
                let mut v = st.u[k * (n + 1) + 1 + i] - prev[k * (n + 1) + 1 + i];
                v += tau * eps * w[k * n + i];
                if st.reacts {
                    v -= tau * st.r[k * n + i];
                }
                out[k * n + i] = v;
            }
        }
        let nn = n * n;
        for k in 0..self.cells - 1 {
            let (bl, br) = (&st.b[k * nn..(k + 1) * nn], &st.b[(k + 1) * nn..(k + 2) * nn]);
            for i in 0..n {
                let mut flux = 0.0;
                for j in 0..n {
                    let dw = w[(k + 1) * n + j] - w[k * n + j];
                    flux += 0.5 * (bl[i * n + j] + br[i * n + j]) * dw;
                }
                let reg = eps * (w[(k + 1) * n + i] - w[k * n + i]);
                let f = tau * (flux + reg) / (dx * dx);
                out[k * n + i] -= f;
                out[(k + 1) * n + i] += f;
            }
        }
    }

    fn evaluate(&self, w: &[f64], prev: &[f64], st: &mut CellState, out: &mut [f64]) -> f64 {
        st.update_all(self.model, w);
        self.residual(w, st, prev, out);
        max_abs(out)
    }

    /// Damped Newton iteration from `w`. On failure returns the last
    /// residual and the iterations spent.
    fn newton(&self, mut w: Vec<f64>, p: &[f64]) -> std::result::Result<Solved, (f64, usize)> {
        let (n, cfg) = (self.n, self.cfg);
        let mut st = CellState::new(n, self.cells);
        let mut r = vec![0.0; w.len()];
        let mut res = self.evaluate(&w, p, &mut st, &mut r);
        let mut iterations = 0;
        let mut trial_state = st.clone();
        let mut trial_r = vec![0.0; w.len()];
        let mut trial_w = vec![0.0; w.len()];
        while !(res <= cfg.newton_tol) {
            if iterations >= cfg.newton_max_iter || !res.is_finite() {
                return Err((res, iterations));
            }
            iterations += 1;
            let (lo, di, up) = self.jacobian(&w, p, &st, &r);
            let neg: Vec<f64> = r.iter().map(|x| -x).collect();
            let Some(delta) = block_thomas(&lo, &di, &up, &neg, n) else {
                return Err((res, iterations));
            };
            let merit = l2_norm(&r);
            let mut lambda = (MAX_NEWTON_UPDATE / max_abs(&delta)).min(1.0);
            let mut accepted = false;
            for _ in 0..=MAX_HALVINGS {
                for ((t, x), d) in trial_w.iter_mut().zip(&w).zip(&delta) {
                    *t = x + lambda * d;
                }
                let tr = self.evaluate(&trial_w, p, &mut trial_state, &mut trial_r);
                if tr.is_finite() && l2_norm(&trial_r) < (1.0 - 1e-4 * lambda) * merit {
                    std::mem::swap(&mut w, &mut trial_w);
                    std::mem::swap(&mut st, &mut trial_state);
                    std::mem::swap(&mut r, &mut trial_r);
                    res = tr;
                    accepted = true;
                    break;
                }
                lambda *= cfg.linesearch;
            }
            if !accepted {
                return Err((res, iterations));
            }
        }
        Ok((w, st, res, iterations))
    }

    /// Block-tridiagonal Jacobian `(lower, diag, upper)` by colored forward
    /// differences around `w`, given the residual `r0` and state `st` at `w`.
    #[allow(clippy::type_complexity)]
    fn jacobian(
        &self,
        w: &[f64],
        prev: &[f64],
        st: &CellState,
        r0: &[f64],
    ) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
        let (n, cells) = (self.n, self.cells);
        let mut lower = vec![DMatrix::zeros(n, n); cells];
        let mut diag = vec![DMatrix::zeros(n, n); cells];
        let mut upper = vec![DMatrix::zeros(n, n); cells];
        let mut wp = w.to_vec();
        let mut sp = st.clone();
        let mut rp = vec![0.0; w.len()];
        let mut steps = vec![0.0; cells];
        let colors = 3.min(cells);
        for color in 0..colors {
            for i in 0..n {
                for k in (color..cells).step_by(colors) {
                    let x = w[k * n + i];
                    let h = f64::EPSILON.sqrt() * x.abs().max(1.0);
                    wp[k * n + i] = x + h;
                    steps[k] = wp[k * n + i] - x;
                    sp.update(self.model, &wp, k);
                }
                self.residual(&wp, &sp, prev, &mut rp);
                for k in (color..cells).step_by(colors) {
                    let h = steps[k];
                    for row in k.saturating_sub(1)..(k + 2).min(cells) {
                        for a in 0..n {
                            let d = (rp[row * n + a] - r0[row * n + a]) / h;
                            if row + 1 == k {
                                upper[row][(a, i)] = d;
                            } else if row == k {
                                diag[row][(a, i)] = d;
                            } else {
                                lower[row][(a, i)] = d;
                            }
                        }
                    }
                }
                for k in (color..cells).step_by(colors) {
                    wp[k * n + i] = w[k * n + i];
                    sp.update(self.model, &wp, k);
                }
            }
        }
        (lower, diag, upper)
    }
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Solves the block-tridiagonal system in place of `rhs`.
fn block_thomas(
    lower: &[DMatrix<f64>],
    diag: &[DMatrix<f64>],
    upper: &[DMatrix<f64>],
    rhs: &[f64],
    n: usize,
) -> Option<Vec<f64>> {
    let cells = diag.len();
    let mut y: Vec<DVector<f64>> = Vec::with_capacity(cells);
    let mut modified_upper: Vec<DMatrix<f64>> = Vec::with_capacity(cells);
    for k in 0..cells {
        let b = DVector::from_column_slice(&rhs[k * n..(k + 1) * n]);
        let (d, yk) = if k == 0 {
            (diag[0].clone(), b)
        } else {
            let l = &lower[k];
            (&diag[k] - l * &modified_upper[k - 1], b - l * &y[k - 1])
        };
        let lu = d.lu();
        let cu = lu.solve(&upper[k])?;
        let yk = lu.solve(&yk)?;
        modified_upper.push(cu);
        y.push(yk);
    }
    let mut x = vec![0.0; cells * n];
    let mut next = DVector::zeros(n);
    for k in (0..cells).rev() {
        let xk = if k + 1 == cells {
            y[k].clone()
        } else {
            &y[k] - &modified_upper[k] * &next
        };
        if xk.iter().any(|v| !v.is_finite()) {
            return None;
        }
        x[k * n..(k + 1) * n].copy_from_slice(xk.as_slice());
        next = xk;
    }
    Some(x)
}

type Solved = (Vec<f64>, CellState, f64, usize);

/// Smallest continuation increment before a step is declared failed.
pub const MIN_CONTINUATION_STEP: f64 = 1e-6;

/// Largest number of step-length halvings tried by the line search.
pub const MAX_HALVINGS: usize = 40;

/// Newton updates are scaled so that no entropy variable moves by more
/// than this in one iteration.
pub const MAX_NEWTON_UPDATE: f64 = 2.0;

/// Outcome of one time step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub state: GridField,
    pub w: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

fn entropy_vars_of(f: &GridField) -> Result<Vec<f64>> {
    let n = f.species();
    let mut w = Vec::with_capacity(f.grid().cells * n);
    for (k, cell) in f.cells().enumerate() {
        if cell.iter().any(|&x| !(x > 0.0)) {
            return Err(Error::BoundaryComposition(f.composition(k).fractions().to_vec()));
        }
        let l0 = cell[0].ln();
        w.extend(cell[1..].iter().map(|x| x.ln() - l0));
    }
    Ok(w)
}

/// Advances `prev` by one implicit Euler step.
pub fn step(m: &dyn CrossDiffusionModel, prev: &GridField, cfg: &SolverConfig) -> Result<GridField> {
    Ok(step_from(m, prev, &entropy_vars_of(prev)?, cfg, 1)?.state)
}

fn step_from(
    m: &dyn CrossDiffusionModel,
    prev: &GridField,
    w_prev: &[f64],
    cfg: &SolverConfig,
    step_index: usize,
) -> Result<StepOutcome> {
    let n = prev.species();
    crate::mobility::check_species(m, n)?;
    let grid = prev.grid();
    let mut stepper = Stepper {
        model: m,
        cfg,
        tau: cfg.tau,
        n,
        cells: grid.cells,
        dx: grid.dx(),
    };
    let p = prev.raw();
    let mut total = 0;
    let diverged = |residual, iterations| Error::NewtonDiverged {
        step: step_index,
        residual,
        iterations,
    };
    let direct = match stepper.newton(w_prev.to_vec(), p) {
        Ok(done) => {
            total += done.3;
            Some(done)
        }
        Err((_, it)) => {
            total += it;
            None
        }
    };
    let (w, st, res, _) = match direct {
        Some(done) => done,
        None => {
            // Continuation in the step weight: solve with theta tau for
            // theta rising from 0, where w_prev is the exact solution.
            let mut theta = 0.0_f64;
            let mut dtheta = 0.25;
            let mut current = w_prev.to_vec();
            let mut last = None;
            while theta < 1.0 {
                let next = (theta + dtheta).min(1.0);
                stepper.tau = next * cfg.tau;
                match stepper.newton(current.clone(), p) {
                    Ok(done) => {
                        total += done.3;
                        current.clone_from(&done.0);
                        theta = next;
                        dtheta *= 2.0;
                        last = Some(done);
                    }
                    Err((res, it)) => {
                        total += it;
                        dtheta *= 0.25;
                        if dtheta < MIN_CONTINUATION_STEP {
                            return Err(diverged(res, total));
                        }
                    }
                }
            }
            last.expect("continuation reached theta = 1")
        }
    };
    Ok(StepOutcome {
        state: GridField::from_augmented_unchecked(grid, n, st.u),
        w,
        iterations: total,
        residual: res,
    })
}

/// Runs `N = round(T/tau)` steps from `init`, calling `observe` on the
/// initial state (step 0) and after every step.
pub fn simulate_with<F>(m: &dyn CrossDiffusionModel, init: &GridField, cfg: &SolverConfig, mut observe: F) -> Result<()>
where
    F: FnMut(&StepRecord, &GridField),
{
    cfg.validate()?;
    if init.grid().cells != cfg.cells || (init.grid().length - cfg.length).abs() > 1e-12 * cfg.length {
        return Err(Error::DimensionMismatch(format!(
            "initial field has {} cells on length {}, configuration asks for {} on {}",
            init.grid().cells,
            init.grid().length,
            cfg.cells,
            cfg.length
        )));
    }
    crate::mobility::check_species(m, init.species())?;
    let mut state = project_inward(init);
    let mut w = entropy_vars_of(&state)?;
    observe(&record(m, &state, &w, cfg, 0, 0, 0.0)?, &state);
    for k in 1..=cfg.steps() {
        let out = step_from(m, &state, &w, cfg, k)?;
        state = out.state;
        w = out.w;
        let rec = record(m, &state, &w, cfg, k, out.iterations, out.residual)?;
        observe(&rec, &state);
    }
    Ok(())
}

pub fn simulate(m: &dyn CrossDiffusionModel, init: &GridField, cfg: &SolverConfig) -> Result<TrajectoryField> {
    let mut traj = TrajectoryField {
        times: Vec::new(),
        states: Vec::new(),
        ledger: EntropyLedger::default(),
    };
    simulate_with(m, init, cfg, |rec, state| {
        traj.times.push(rec.t);
        traj.states.push(state.clone());
        traj.ledger.records.push(rec.clone());
    })?;
    Ok(traj)
}

/// Final state and ledger without storing the intermediate states.
pub fn simulate_final(
    m: &dyn CrossDiffusionModel,
    init: &GridField,
    cfg: &SolverConfig,
) -> Result<(GridField, EntropyLedger)> {
    let mut last = init.clone();
    let mut ledger = EntropyLedger::default();
    simulate_with(m, init, cfg, |rec, state| {
        ledger.records.push(rec.clone());
        last = state.clone();
    })?;
    Ok((last, ledger))
}

fn record(
    m: &dyn CrossDiffusionModel,
    state: &GridField,
    w: &[f64],
    cfg: &SolverConfig,
    k: usize,
    iterations: usize,
    residual: f64,
) -> Result<StepRecord> {
    let n = state.species();
    let grid = state.grid();
    let dx = grid.dx();
    let mut reg = 0.0;
    let mut source = vec![0.0; n];
    for c in 0..grid.cells {
        for i in 0..n {
            let x = w[c * n + i];
            reg += x * x * dx;
            source[i] += cfg.tau * cfg.epsilon * x * dx;
            if c + 1 < grid.cells {
                let g = (w[(c + 1) * n + i] - x) / dx;
                reg += g * g * dx;
            }
        }
    }
    let mut reaction_work = 0.0;
    let mut r = vec![0.0; n];
    for (c, cell) in state.cells().enumerate() {
        if m.reaction_into(cell, &mut r) {
            reaction_work += (0..n).map(|i| r[i] * w[c * n + i]).sum::<f64>() * dx;
        }
    }
    Ok(StepRecord {
        step: k,
        t: k as f64 * cfg.tau,
        entropy: neumaier_sum(state.cells().map(augmented_entropy_density)) * dx,
        production: discrete_entropy_production(m, state)?,
        regularization: cfg.epsilon * reg,
        reaction_work,
        newton_iterations: iterations,
        residual,
        mass: state.masses(),
        regularization_mass_source: source,
    })
}

pub(crate) fn neumaier_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0_f64, 0.0_f64);
    for v in values {
        let t = s + v;
        if s.abs() >= v.abs() {
            c += (s - t) + v;
        } else {
            c += (v - t) + s;
        }
        s = t;
    }
    s + c
}

/// Logarithmic mean `(x - y)/(ln x - ln y)`, continuous at `x = y`.
pub fn log_mean(x: f64, y: f64) -> f64 {
    let d = x / y - 1.0;
    if d.abs() < 1e-4 {
        y * (1.0 + d * (0.5 + d * (-1.0 / 12.0 + d * (1.0 / 24.0 - d * 19.0 / 720.0))))
    } else {
        (x - y) / (x / y).ln()
    }
}

/// Face-averaged augmented mobility between cells `k` and `k + 1`.
pub(crate) fn face_mobility(m: &dyn CrossDiffusionModel, left: &[f64], right: &[f64]) -> DMatrix<f64> {
    let n = left.len() - 1;
    let mut bl = vec![0.0; n * n];
    let mut br = vec![0.0; n * n];
    m.mobility_into(left, &mut bl);
    m.mobility_into(right, &mut br);
    let avg = DMatrix::from_fn(n, n, |i, j| 0.5 * (bl[i * n + j] + br[i * n + j]));
    crate::mobility::augment(&avg).entries
}

/// Entropy production in the integrable form
/// `(1/s^2) sum_ij Bbar_ij/(u_i^s u_j^s) grad u_i^s . grad u_j^s`.
///
/// Faces use the mean of the adjacent cell mobilities and the logarithmic
/// mean of `u_i^s` as the face value, which makes this the exact
/// counterpart of the dissipation `grad w . B grad w` of the scheme.
pub fn discrete_entropy_production(m: &dyn CrossDiffusionModel, f: &GridField) -> Result<f64> {
    if !f.is_interior() {
        let k = (0..f.grid().cells)
            .find(|&k| f.cell(k).iter().any(|&x| !(x > 0.0)))
            .unwrap_or(0);
        return Err(Error::BoundaryComposition(f.composition(k).fractions().to_vec()));
    }
    let s = m.entropy_exponent();
    let dx = f.grid().dx();
    let mp = f.species() + 1;
    let mut faces = Vec::with_capacity(f.grid().cells);
    for k in 0..f.grid().cells - 1 {
        let (l, r) = (f.cell(k), f.cell(k + 1));
        let bbar = face_mobility(m, l, r);
        let mut q = vec![0.0; mp];
        for i in 0..mp {
            let (a, b) = (l[i].powf(s), r[i].powf(s));
            let grad = (b - a) / dx;
            q[i] = if a == b { 0.0 } else { grad / log_mean(b, a) };
        }
        let mut p = 0.0;
        for i in 0..mp {
            for j in 0..mp {
                p += bbar[(i, j)] * q[i] * q[j];
            }
        }
        faces.push(p / (s * s) * dx);
    }
    Ok(neumaier_sum(faces.into_iter()))
}

/// The same production written directly as
/// `sum_ij Bbar_ij grad log u_i . grad log u_j`.
pub fn entropy_production_log_form(m: &dyn CrossDiffusionModel, f: &GridField) -> Result<f64> {
    if !f.is_interior() {
        return Err(Error::BoundaryComposition(f.composition(0).fractions().to_vec()));
    }
    let dx = f.grid().dx();
    let mp = f.species() + 1;
    let mut faces = Vec::with_capacity(f.grid().cells);
    for k in 0..f.grid().cells - 1 {
        let (l, r) = (f.cell(k), f.cell(k + 1));
        let bbar = face_mobility(m, l, r);
        let g: Vec<f64> = (0..mp).map(|i| (r[i].ln() - l[i].ln()) / dx).collect();
        let mut p = 0.0;
        for i in 0..mp {
            for j in 0..mp {
                p += bbar[(i, j)] * g[i] * g[j];
            }
        }
        faces.push(p * dx);
    }
    Ok(neumaier_sum(faces.into_iter()))
}

/// Restricts a field to a grid `factor` times coarser by cell averaging.
pub fn restrict(f: &GridField, factor: usize) -> Result<GridField> {
    let grid = f.grid();
    if factor == 0 || !grid.cells.is_multiple_of(factor) {
        return Err(Error::DimensionMismatch(format!(
            "cannot restrict {} cells by a factor {}",
            grid.cells, factor
        )));
    }
    let m = f.species() + 1;
    let coarse = Grid::new(grid.cells / factor, grid.length)?;
    let mut data = vec![0.0; coarse.cells * m];
    for k in 0..grid.cells {
        let c = k / factor;
        for (i, x) in f.cell(k).iter().enumerate() {
            data[c * m + i] += x / factor as f64;
        }
    }
    Ok(GridField::from_augmented_unchecked(coarse, f.species(), data))
}

/// Copies every cell of `f` into `factor` finer cells.
pub fn inject(f: &GridField, factor: usize) -> Result<GridField> {
    let grid = f.grid();
    let fine = Grid::new(grid.cells * factor, grid.length)?;
    let mut data = Vec::with_capacity(fine.cells * (f.species() + 1));
    for cell in f.cells() {
        for _ in 0..factor {
            data.extend_from_slice(cell);
        }
    }
    Ok(GridField::from_augmented_unchecked(fine, f.species(), data))
}

/// `sqrt(sum_k sum_{i>=1} |u_i - v_i|^2 dx)`.
pub fn l2_distance(u: &GridField, v: &GridField) -> Result<f64> {
    if u.grid() != v.grid() || u.species() != v.species() {
        return Err(Error::DimensionMismatch("fields live on different grids".into()));
    }
    let dx = u.grid().dx();
    let s: f64 = u
        .cells()
        .zip(v.cells())
        .map(|(a, b)| a[1..].iter().zip(&b[1..]).map(|(x, y)| (x - y).powi(2)).sum::<f64>())
        .sum();
    Ok((s * dx).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceLevel {
    pub tau: f64,
    pub cells: usize,
    pub error: f64,
}

/// Terminal `L^2` errors of the runs `(tau/2^l, M 2^l)`, `l = 0..levels`,
/// against a `(tau/16, 4M)` reference restricted to each level's grid.
pub fn self_convergence(
    m: &dyn CrossDiffusionModel,
    init: &InitialData,
    cfg: &SolverConfig,
    levels: usize,
) -> Result<Vec<ConvergenceLevel>> {
    let reference_cfg = cfg.refined(16, 4);
    let mut configs: Vec<SolverConfig> = (0..levels).map(|l| cfg.refined(1 << l, 1 << l)).collect();
    configs.push(reference_cfg);
    let finals: Vec<Result<GridField>> = configs
        .par_iter()
        .map(|c| {
            let f0 = init.build(c.grid())?;
            simulate_final(m, &f0, c).map(|(last, _)| last)
        })
        .collect();
    let mut finals = finals.into_iter().collect::<Result<Vec<_>>>()?;
    let reference = finals.pop().expect("reference run");
    configs
        .iter()
        .zip(&finals)
        .take(levels)
        .map(|(c, f)| {
            let factor = reference.grid().cells / c.cells;
            let r = if factor > 0 && reference.grid().cells % c.cells == 0 {
                restrict(&reference, factor)?
            } else {
                return Err(Error::DimensionMismatch(format!(
                    "reference grid of {} cells does not refine {} cells",
                    reference.grid().cells,
                    c.cells
                )));
            };
            Ok(ConvergenceLevel {
                tau: c.tau,
                cells: c.cells,
                error: l2_distance(f, &r)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelSpec;
    use crate::simplex::Composition;

    fn cfg(cells: usize, tau: f64, t: f64, eps: f64) -> SolverConfig {
        SolverConfig::new(tau, t, eps, cells, 1.0)
    }

    #[test]
    fn constant_state_is_a_fixed_point_without_regularization() {
        let m = ModelSpec::preset("maxwell_stefan").unwrap();
        let c = Composition::new(vec![0.2, 0.5]).unwrap();
        let f = GridField::constant(Grid::new(8, 1.0).unwrap(), &c);
        let out = step(&m, &f, &cfg(8, 1e-2, 1e-2, 0.0)).unwrap();
        for (a, b) in out.raw().iter().zip(f.raw()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn constant_state_moves_by_regularization_scale() {
        let m = ModelSpec::preset("tumor").unwrap();
        let c = Composition::new(vec![0.2, 0.5]).unwrap();
        let f = GridField::constant(Grid::new(8, 1.0).unwrap(), &c);
        let (eps, tau) = (1e-6, 1e-2);
        let out = step(&m, &f, &cfg(8, tau, tau, eps)).unwrap();
        let wmax = [0.2f64, 0.5]
            .iter()
            .map(|x| (x / 0.3f64).ln().abs())
            .fold(0.0, f64::max);
        for (a, b) in out.raw().iter().zip(f.raw()) {
            assert!((a - b).abs() <= eps * tau * wmax);
        }
    }

    #[test]
    fn scalar_step_stays_inside() {
        let m = ModelSpec::scalar(0.0).unwrap();
        let init = InitialData::Step {
            left: vec![0.9],
            right: vec![0.05],
        };
        let c = cfg(16, 1e-2, 1e-2, 1e-6);
        let out = step(&m, &init.build(c.grid()).unwrap(), &c).unwrap();
        assert!(out.is_interior());
        assert!(out.cells().all(|cell| cell[1] < 1.0));
    }

    #[test]
    fn one_step_run_has_two_stamps() {
        let m = ModelSpec::preset("scalar").unwrap();
        let c = cfg(8, 1e-3, 1e-3, 1e-6);
        let f = InitialData::default_for(1).build(c.grid()).unwrap();
        let traj = simulate(&m, &f, &c).unwrap();
        assert_eq!(traj.times.len(), 2);
        assert_eq!(traj.ledger.records.len(), 2);
    }

    #[test]
    fn boundary_initial_data_is_mixed_inward() {
        let init = InitialData::Step {
            left: vec![1.0, 0.0],
            right: vec![0.0, 0.0],
        };
        let f = init.build(Grid::new(4, 1.0).unwrap()).unwrap();
        assert!(f.is_interior());
        assert!((f.cell(0)[1] - (1.0 - INWARD_MIXING * (2.0 / 3.0))).abs() < 1e-15);
    }

    #[test]
    fn production_forms_agree() {
        let m = ModelSpec::scalar(1.0).unwrap();
        let grid = Grid::new(32, 1.0).unwrap();
        let values: Vec<Composition> = (0..32)
            .map(|k| Composition::new(vec![0.3 + 0.4 * grid.center(k)]).unwrap())
            .collect();
        let f = GridField::from_compositions(grid, &values).unwrap();
        let a = discrete_entropy_production(&m, &f).unwrap();
        let b = entropy_production_log_form(&m, &f).unwrap();
        assert!(a > 0.0);
        assert!((a - b).abs() <= 1e-9 * b);
        let flat = GridField::constant(grid, &values[3]);
        assert_eq!(discrete_entropy_production(&m, &flat).unwrap(), 0.0);
    }

    #[test]
    fn log_mean_is_continuous() {
        for d in [1e-7_f64, 1e-5, 0.99e-4, 1.01e-4, 1e-3] {
            let want = d / d.ln_1p();
            assert!((log_mean(1.0 + d, 1.0) - want).abs() < 1e-15);
        }
        assert_eq!(log_mean(0.3, 0.3), 0.3);
    }

    #[test]
    fn restriction_and_injection_round_trip() {
        let f = InitialData::default_for(2).build(Grid::new(8, 1.0).unwrap()).unwrap();
        let g = restrict(&inject(&f, 4).unwrap(), 4).unwrap();
        assert!(l2_distance(&f, &g).unwrap() < 1e-16);
        assert!(restrict(&f, 3).is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = cfg(8, 1e-3, 1e-3, 0.0);
        assert!(c.validate().is_ok());
        c.m_reg = 2;
        assert!(c.validate().is_err());
        assert!(cfg(8, 0.0, 1.0, 0.0).validate().is_err());
        assert!(cfg(8, 1e-2, 1e-3, 0.0).validate().is_err());
        assert!(cfg(1, 1e-3, 1e-3, 0.0).validate().is_err());
        assert_eq!(cfg(8, 1e-3, 0.5, 0.0).steps(), 500);
    }
}
