//! Primal-dual forward-backward iteration for one minimizing-movement step.
//!
//! The step is the saddle problem `min_x max_y Phi(x, y) - F(y) + G(x)` with
//! primal variables `x = (mu, m)`, dual variables `y = (Q, q, nu)` and
//!
//! ```text
//! Phi(x, y) = tau V[mu] + sum_i M(mu_bar_i) : Q_i + (I m)_i : q_i + (K mu)_i . nu_i
//! F(y)      = tau U*(nu / tau) + sum_i indicator_K(Q_i, q_i)
//! G(x)      = indicator of the admissible set
//! ```
//!
//! where `mu_bar = (mu + mu_k) / 2`.

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::cone::{proj_k, proj_k_newton_from, NewtonOptions, ProjectionMethod};
use crate::cone_fast;
use rayon::prelude::*;
use crate::constraint::{ActiveSetState, AdmissibleSet, BoxConstraint};
use crate::dense::{Mat, SymMat};
use crate::energy::ConvexSplit;
use crate::error::{Error, Result};
use crate::grid::{dot, Grid};
use crate::models::{Mobility, Model};
use crate::state::{MomentumField, SpeciesField};

/// Primal variables `(mu, m)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrimalState {
    pub mu: SpeciesField,
    pub m: MomentumField,
}

impl PrimalState {
    pub fn at_rest(mu: SpeciesField) -> Self {
        let m = MomentumField::zeros(*mu.grid(), mu.species_count());
        Self { mu, m }
    }

    /// `a self + b other`.
    pub fn combine(&self, a: f64, other: &PrimalState, b: f64) -> PrimalState {
        let mut out = self.clone();
        for (o, v) in out.mu.as_mut_slice().iter_mut().zip(other.mu.as_slice()) {
            *o = a * *o + b * v;
        }
        for (o, v) in out.m.as_mut_slice().iter_mut().zip(other.m.as_slice()) {
            *o = a * *o + b * v;
        }
        out
    }

    pub fn norm(&self) -> f64 {
        (dot(self.mu.as_slice(), self.mu.as_slice()) + dot(self.m.as_slice(), self.m.as_slice())).sqrt()
    }

    pub fn dist(&self, other: &PrimalState) -> f64 {
        self.combine(1.0, other, -1.0).norm()
    }
}

/// Dual variables `(Q, q, nu)`: one symmetric `n x n` and one `n x d` matrix
/// per cell, and the preconditioner dual with `r` components per cell.
/// The matrices are stored row-major, cell after cell.
#[derive(Debug, Clone, PartialEq)]
pub struct DualState {
    n: usize,
    d: usize,
    cap_q: Vec<f64>,
    q: Vec<f64>,
    pub nu: Vec<f64>,
}

impl DualState {
    pub fn zeros(cells: usize, n: usize, d: usize, r: usize) -> Self {
        Self {
            n,
            d,
            cap_q: vec![0.0; cells * n * n],
            q: vec![0.0; cells * n * d],
            nu: vec![0.0; r * cells],
        }
    }

    pub fn cells(&self) -> usize {
        self.q.len() / (self.n * self.d)
    }

    pub fn species(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn cap_q_at(&self, cell: usize) -> SymMat {
        let nn = self.n * self.n;
        SymMat::new(Mat::from_row_slice(self.n, self.n, &self.cap_q[cell * nn..(cell + 1) * nn]))
    }

    pub fn q_at(&self, cell: usize) -> Mat {
        let nd = self.n * self.d;
        Mat::from_row_slice(self.n, self.d, &self.q[cell * nd..(cell + 1) * nd])
    }

    pub fn set_cell(&mut self, cell: usize, cap_q: &SymMat, q: &Mat) {
        let nn = self.n * self.n;
        let nd = self.n * self.d;
        self.cap_q[cell * nn..(cell + 1) * nn].copy_from_slice(cap_q.as_mat().as_slice());
        self.q[cell * nd..(cell + 1) * nd].copy_from_slice(q.as_slice());
    }

    /// Raw `Q` storage.
    pub fn cap_q_slice(&self) -> &[f64] {
        &self.cap_q
    }

    /// Raw `q` storage.
    pub fn q_slice(&self) -> &[f64] {
        &self.q
    }

    /// `self + s * other`.
    pub fn axpy(&self, s: f64, other: &DualState) -> DualState {
        let f = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x + s * y).collect();
        DualState {
            n: self.n,
            d: self.d,
            cap_q: f(&self.cap_q, &other.cap_q),
            q: f(&self.q, &other.q),
            nu: f(&self.nu, &other.nu),
        }
    }

    pub fn dot(&self, other: &DualState) -> f64 {
        dot(&self.cap_q, &other.cap_q) + dot(&self.q, &other.q) + dot(&self.nu, &other.nu)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }
}

/// Dual and primal step sizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSizes {
    pub gamma: f64,
    pub gamma_bar: f64,
    /// Whether the sizes were estimated from the coupling operator norm.
    pub auto: bool,
}

/// Settings of the inner solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PdfbConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub gamma: Option<f64>,
    pub gamma_bar: Option<f64>,
    pub method: ProjectionMethod,
    /// Fraction of `1 / L` used by the automatic step rule.
    pub step_factor: f64,
    /// Automatic steps are `gamma = r factor / L` and
    /// `gamma_bar = factor / (r L)`, so that `gamma gamma_bar L^2` does not
    /// depend on `r`.
    pub step_ratio: f64,
    pub power_iterations: usize,
    /// Iterations between divergence checks.
    pub window: usize,
}

impl Default for PdfbConfig {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 5000,
            gamma: None,
            gamma_bar: None,
            method: ProjectionMethod::Newton,
            step_factor: 0.9,
            step_ratio: 1.0,
            power_iterations: 20,
            window: 50,
        }
    }
}

/// Outcome of [`solve_saddle`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdfbReport {
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub converged: bool,
    pub steps: StepSizes,
    pub halvings: usize,
    /// `max(primal, dual)` residual sampled once per check window.
    pub history: Vec<f64>,
}

/// Data of one minimizing-movement step.
#[derive(Debug, Clone)]
pub struct SaddleProblem {
    pub grid: Grid,
    pub mobility: Mobility,
    pub split: ConvexSplit,
    pub bx: BoxConstraint,
    pub mu_k: SpeciesField,
    pub tau: f64,
    admissible: AdmissibleSet,
}

/// Full iteration state `(x, x_bar, y)` plus warm starts of the inner solves.
#[derive(Debug, Clone)]
pub struct Iterate {
    pub x: PrimalState,
    pub x_bar: PrimalState,
    pub y: DualState,
    pub active: Option<ActiveSetState>,
    pub precond_primal: Option<Vec<f64>>,
}

impl Iterate {
    /// `x = x_bar = (mu_k, 0)` with the given duals.
    pub fn start(problem: &SaddleProblem, y: DualState) -> Self {
        let x = PrimalState::at_rest(problem.mu_k.clone());
        Self {
            x_bar: x.clone(),
            x,
            y,
            active: None,
            precond_primal: None,
        }
    }
}

impl SaddleProblem {
    pub fn new(model: &Model, mu_k: SpeciesField, tau: f64) -> Result<Self> {
        if mu_k.species_count() != 2 || model.species() != 2 {
            return Err(Error::Shape(format!(
                "model has {} species, state has {}",
                model.species(),
                mu_k.species_count()
            )));
        }
        if !(tau >= 0.0) {
            return Err(Error::Config(format!("time step {tau} must be nonnegative")));
        }
        let grid = *mu_k.grid();
        let bx = model.box_constraint();
        Ok(Self {
            grid,
            mobility: model.mobility(),
            split: model.split(),
            admissible: AdmissibleSet::new(grid, model.species(), bx.clone())?,
            bx,
            mu_k,
            tau,
        })
    }

    pub fn species(&self) -> usize {
        self.mu_k.species_count()
    }

    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    pub fn components(&self) -> usize {
        self.split.components()
    }

    pub fn zero_dual(&self) -> DualState {
        DualState::zeros(self.grid.num_cells(), self.species(), self.dim(), self.components())
    }

    /// `(mu + mu_k) / 2` in one cell.
    fn midpoint(&self, mu: &SpeciesField, cell: usize) -> [f64; 2] {
        let nc = self.grid.num_cells();
        let (a, b) = (mu.as_slice(), self.mu_k.as_slice());
        [0.5 * (a[cell] + b[cell]), 0.5 * (a[nc + cell] + b[nc + cell])]
    }

    /// `(I m)_i`, written row-major `n x d` per cell into `out`.
    fn interpolate_momentum_into(&self, m: &MomentumField, out: &mut [f64]) {
        let n = self.species();
        let d = self.dim();
        let nc = self.grid.num_cells();
        let mut vals = vec![0.0; nc * d];
        for a in 0..n {
            self.grid.interpolate_into(m.species(a), &mut vals);
            for c in 0..nc {
                out[c * n * d + a * d..c * n * d + (a + 1) * d].copy_from_slice(&vals[c * d..(c + 1) * d]);
            }
        }
    }

    /// `I^T q`, boundary faces clamped.
    fn interpolate_adjoint(&self, q: &[f64]) -> MomentumField {
        let n = self.species();
        let d = self.dim();
        let nc = self.grid.num_cells();
        let mut out = MomentumField::zeros(self.grid, n);
        let mut vals = vec![0.0; nc * d];
        for a in 0..n {
            for c in 0..nc {
                vals[c * d..(c + 1) * d].copy_from_slice(&q[c * n * d + a * d..c * n * d + (a + 1) * d]);
            }
            let dst = out.species_mut(a);
            self.grid.interpolate_adjoint_into(&vals, dst);
            self.grid.clamp_boundary(dst);
        }
        out
    }

    /// Writes a packed symmetric `2 x 2` matrix into full storage.
    fn put_sym(dst: &mut [f64], [a, b, c]: [f64; 3]) {
        dst.copy_from_slice(&[a, b, b, c]);
    }

    /// `S : Q` for packed `S` and full `Q`.
    fn sym_dot([a, b, c]: [f64; 3], q: &[f64]) -> f64 {
        a * q[0] + b * (q[1] + q[2]) + c * q[3]
    }

    /// Value of `Phi(x, y)`.
    pub fn phi_value(&self, x: &PrimalState, y: &DualState) -> Result<f64> {
        let nc = self.grid.num_cells();
        let mut total = self.tau * self.split.remainder.normalized(&x.mu)?;
        for c in 0..nc {
            let m = self.mobility.eval_packed(&self.midpoint(&x.mu, c));
            total += Self::sym_dot(m, &y.cap_q[4 * c..4 * c + 4]);
        }
        let mut im = vec![0.0; y.q.len()];
        self.interpolate_momentum_into(&x.m, &mut im);
        total += dot(&im, &y.q);
        total += dot(&self.split.apply_k(&x.mu), &y.nu);
        Ok(total)
    }

    /// Gradient of `Phi` in the dual variables; `Phi` is linear in `y`, so
    /// this depends on `x` only.
    pub fn phi_grad_y(&self, x: &PrimalState) -> DualState {
        let mut out = self.zero_dual();
        for (c, dst) in out.cap_q.chunks_exact_mut(4).enumerate() {
            Self::put_sym(dst, self.mobility.eval_packed(&self.midpoint(&x.mu, c)));
        }
        self.interpolate_momentum_into(&x.m, &mut out.q);
        out.nu = self.split.apply_k(&x.mu);
        out
    }

    /// Adjoint of the linearized coupling, `J(x)^T y`.
    pub fn jacobian_adjoint(&self, x: &PrimalState, y: &DualState) -> PrimalState {
        let nc = self.grid.num_cells();
        let mut mu = SpeciesField::zeros(self.grid, self.species());
        {
            let data = mu.as_mut_slice();
            for c in 0..nc {
                let parts = self.mobility.partials_packed(&self.midpoint(&x.mu, c));
                let qc = &y.cap_q[4 * c..4 * c + 4];
                data[c] = 0.5 * Self::sym_dot(parts[0], qc);
                data[nc + c] = 0.5 * Self::sym_dot(parts[1], qc);
            }
        }
        self.split.add_k_adjoint(&y.nu, &mut mu);
        PrimalState {
            mu,
            m: self.interpolate_adjoint(&y.q),
        }
    }

    /// Gradient of `Phi` in the primal variables.
    pub fn phi_grad_x(&self, x: &PrimalState, y: &DualState) -> Result<PrimalState> {
        let mut g = self.jacobian_adjoint(x, y);
        if self.tau != 0.0 && !self.split.remainder.is_zero() {
            let rv = self.split.remainder_gradient(&x.mu)?;
            for (o, v) in g.mu.as_mut_slice().iter_mut().zip(rv.as_slice()) {
                *o += self.tau * v;
            }
        }
        Ok(g)
    }

    /// Linearized coupling `J(x) w = (DM(mu_bar)[dmu] / 2, I dm, K dmu)`.
    pub fn jacobian_apply(&self, x: &PrimalState, w: &PrimalState) -> DualState {
        let nc = self.grid.num_cells();
        let mut out = self.zero_dual();
        let dm = w.mu.as_slice();
        for (c, dst) in out.cap_q.chunks_exact_mut(4).enumerate() {
            let dir = self
                .mobility
                .directional_packed(&self.midpoint(&x.mu, c), &[dm[c], dm[nc + c]]);
            Self::put_sym(dst, dir.map(|v| 0.5 * v));
        }
        self.interpolate_momentum_into(&w.m, &mut out.q);
        out.nu = self.split.apply_k(&w.mu);
        out
    }

    /// Estimates `|J(x)|` by power iteration on `J^T J`.
    pub fn coupling_norm(&self, x: &PrimalState, iterations: usize) -> f64 {
        let n = self.species();
        let nc = self.grid.num_cells();
        let nf = self.grid.num_faces();
        // deterministic, non-symmetric start vector
        let mu = SpeciesField::new(
            self.grid,
            n,
            (0..n * nc).map(|i| 1.0 + 0.37 * ((i * 7919 % 101) as f64 / 101.0)).collect(),
        )
        .expect("sizes agree");
        let m = MomentumField::clamped(
            self.grid,
            n,
            (0..n * nf).map(|i| 1.0 - 0.53 * ((i * 104729 % 97) as f64 / 97.0)).collect(),
        )
        .expect("sizes agree");
        let mut w = PrimalState { mu, m };
        let mut lambda = 0.0;
        for _ in 0..iterations.max(1) {
            let nrm = w.norm();
            if nrm == 0.0 {
                return 0.0;
            }
            w = w.combine(1.0 / nrm, &w, 0.0);
            let jw = self.jacobian_apply(x, &w);
            lambda = jw.norm();
            w = self.jacobian_adjoint(x, &jw);
        }
        lambda
    }

    /// Dual proximal step: cellwise projection onto the cone and the
    /// conjugate preconditioner prox.
    fn prox_f(
        &self,
        y0: &DualState,
        gamma: f64,
        method: ProjectionMethod,
        prev: Option<&DualState>,
        guess: Option<&[f64]>,
    ) -> Result<(DualState, Option<Vec<f64>>)> {
        let mut out = y0.clone();
        let d = self.dim();
        let opts = NewtonOptions::default();
        out.cap_q
            .par_chunks_mut(4)
            .zip(out.q.par_chunks_mut(2 * d))
            .enumerate()
            .with_min_len(256)
            .try_for_each(|(c, (qm, q))| -> Result<()> {
                let start = prev.map(|p| &p.q[2 * d * c..2 * d * (c + 1)]);
                let fast = match (method, d) {
                    (ProjectionMethod::Newton, 1) => project_fast::<1>(qm, q, start, opts),
                    (ProjectionMethod::Newton, 2) => project_fast::<2>(qm, q, start, opts),
                    _ => None,
                };
                let (cap_q, qv) = match fast {
                    Some(v) => v,
                    None => {
                        let q0m = SymMat::new(Mat::from_row_slice(2, 2, qm));
                        let q0 = Mat::from_row_slice(2, d, q);
                        let start = start.map(|s| Mat::from_row_slice(2, d, s));
                        let (pair, _) = match method {
                            ProjectionMethod::Newton => proj_k_newton_from(&q0m, &q0, start.as_ref(), opts)?,
                            _ => proj_k(&q0m, &q0, method)?,
                        };
                        let mut flat = [0.0; 4];
                        flat[..2 * d].copy_from_slice(pair.q.as_slice());
                        let c = &pair.cap_q;
                        ([c[(0, 0)], c[(0, 1)], c[(1, 1)]], flat)
                    }
                };
                Self::put_sym(qm, cap_q);
                q.copy_from_slice(&qv[..2 * d]);
                Ok(())
            })?;
        let w = if self.components() == 0 {
            None
        } else {
            let (nu, w) = self
                .split
                .prox_conjugate_with(&self.grid, &y0.nu, gamma, self.tau, guess)?;
            out.nu = nu;
            Some(w)
        };
        Ok((out, w))
    }

    fn prox_g(&self, x0: &PrimalState, warm: Option<&ActiveSetState>) -> Result<(PrimalState, ActiveSetState)> {
        let out = self.admissible.project(&x0.mu, &x0.m, &self.mu_k, warm)?;
        Ok((PrimalState { mu: out.mu, m: out.m }, out.state))
    }
}

/// Two-species Newton projection on raw cell storage. Returns packed `Q`
/// and `q` padded to four entries.
fn project_fast<const D: usize>(
    qm: &[f64],
    q: &[f64],
    start: Option<&[f64]>,
    opts: NewtonOptions,
) -> Option<([f64; 3], [f64; 4])> {
    let pack = |v: &[f64]| -> [[f64; D]; 2] { std::array::from_fn(|i| std::array::from_fn(|k| v[i * D + k])) };
    let out = cone_fast::project::<D>(
        [qm[0], 0.5 * (qm[1] + qm[2]), qm[3]],
        pack(q),
        start.map(pack),
        opts.tol,
        opts.max_iter,
        opts.max_halvings,
    )?;
    let mut flat = [0.0; 4];
    for i in 0..2 {
        for k in 0..D {
            flat[i * D + k] = out.q[i][k];
        }
    }
    Some((out.cap_q, flat))
}

/// Residuals of one iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationResiduals {
    pub primal: f64,
    pub dual: f64,
}

/// One iteration of the printed update triple:
///
/// ```text
/// y+    = prox_{gamma F}(y + gamma J(x)(x_bar - x) + gamma grad_y Phi(x, y))
/// x+    = prox_{gamma_bar G}(x - gamma_bar grad_x Phi(x, y+))
/// x_bar+ = 2 x+ - x - gamma_bar (grad_x Phi(x+, y+) - grad_x Phi(x, y+))
/// ```
pub fn pdfb_iterate(
    problem: &SaddleProblem,
    it: &Iterate,
    steps: StepSizes,
    method: ProjectionMethod,
) -> Result<(Iterate, IterationResiduals)> {
    let (g, gb) = (steps.gamma, steps.gamma_bar);
    let dx = it.x_bar.combine(1.0, &it.x, -1.0);
    let jdx = problem.jacobian_apply(&it.x, &dx);
    let gy = problem.phi_grad_y(&it.x);
    let y0 = it.y.axpy(g, &jdx).axpy(g, &gy);
    let (y, w) = problem.prox_f(&y0, g, method, Some(&it.y), it.precond_primal.as_deref())?;

    let gx = problem.phi_grad_x(&it.x, &y)?;
    let x0 = it.x.combine(1.0, &gx, -gb);
    let (x, active) = problem.prox_g(&x0, it.active.as_ref())?;

    let gx_new = problem.phi_grad_x(&x, &y)?;
    let diff = gx_new.combine(1.0, &gx, -1.0);
    let x_bar = x.combine(2.0, &it.x, -1.0).combine(1.0, &diff, -gb);

    let primal = x.dist(&it.x) / (gb * it.x.norm().max(1.0));
    let dual = y.axpy(-1.0, &it.y).norm() / (g * it.y.norm().max(1.0));
    Ok((
        Iterate {
            x,
            x_bar,
            y,
            active: Some(active),
            precond_primal: w,
        },
        IterationResiduals { primal, dual },
    ))
}

/// Resolves the step sizes: explicit values from the configuration or
/// `factor / L` with `L` the estimated coupling norm at `x`.
pub fn step_sizes(problem: &SaddleProblem, x: &PrimalState, config: &PdfbConfig) -> StepSizes {
    if let (Some(gamma), Some(gamma_bar)) = (config.gamma, config.gamma_bar) {
        return StepSizes {
            gamma,
            gamma_bar,
            auto: false,
        };
    }
    let l = problem.coupling_norm(x, config.power_iterations).max(1e-12);
    let s = config.step_factor / l;
    let r = config.step_ratio;
    StepSizes {
        gamma: config.gamma.unwrap_or(s * r),
        gamma_bar: config.gamma_bar.unwrap_or(s / r),
        auto: true,
    }
}

/// Runs the iteration from `x = (mu_k, 0)` with warm-start duals `y0`.
/// Returns the final iterate (its `x.mu` is the new density) and a report.
/// Failing to reach the tolerance is reported through `converged`, not as
/// an error.
pub fn solve_saddle_from(
    problem: &SaddleProblem,
    y0: DualState,
    config: &PdfbConfig,
) -> Result<(Iterate, PdfbReport)> {
    if !(config.tol > 0.0) || config.max_iter == 0 {
        return Err(Error::Config("PDFB tolerance and iteration cap must be positive".into()));
    }
    if !(config.step_ratio > 0.0 && config.step_ratio.is_finite()) {
        return Err(Error::Config(format!("step ratio {} must be positive", config.step_ratio)));
    }
    let mut it = Iterate::start(problem, y0);
    let mut steps = step_sizes(problem, &it.x, config);
    if !(steps.gamma > 0.0 && steps.gamma_bar > 0.0) {
        return Err(Error::Config(format!(
            "step sizes must be positive, got {} and {}",
            steps.gamma, steps.gamma_bar
        )));
    }
    let window = config.window.max(1);
    let mut checkpoint = it.clone();
    let mut last_check = f64::INFINITY;
    let mut history = Vec::new();
    let mut halvings = 0;
    let mut res = IterationResiduals {
        primal: f64::INFINITY,
        dual: f64::INFINITY,
    };
    let mut l = 0;
    while l < config.max_iter {
        l += 1;
        let step = pdfb_iterate(problem, &it, steps, config.method);
        let (next, r) = match step {
            Ok(v) if v.1.primal.is_finite() && v.1.dual.is_finite() => v,
            failed => {
                if halvings >= 30 {
                    return Err(match failed {
                        Err(e) => Error::Iteration {
                            iteration: l,
                            source: Box::new(e),
                        },
                        Ok(_) => Error::NonConvergence {
                            stage: "PDFB",
                            iterations: l,
                            residual: f64::NAN,
                        },
                    });
                }
                if let Err(e) = &failed {
                    debug!("PDFB iteration {l} failed ({e}); halving steps");
                }
                steps.gamma *= 0.5;
                steps.gamma_bar *= 0.5;
                halvings += 1;
                it = checkpoint.clone();
                continue;
            }
        };
        it = next;
        res = r;
        let worst = r.primal.max(r.dual);
        if worst <= config.tol {
            history.push(worst);
            return Ok((
                it,
                PdfbReport {
                    iterations: l,
                    primal_residual: r.primal,
                    dual_residual: r.dual,
                    converged: true,
                    steps,
                    halvings,
                    history,
                },
            ));
        }
        if l % window == 0 {
            history.push(worst);
            if worst > 2.0 * last_check && last_check.is_finite() {
                warn!("PDFB residual grew from {last_check:.3e} to {worst:.3e}; halving step sizes");
                steps.gamma *= 0.5;
                steps.gamma_bar *= 0.5;
                halvings += 1;
                it = checkpoint.clone();
                last_check = f64::INFINITY;
            } else {
                last_check = worst;
                checkpoint = it.clone();
            }
        }
    }
    Ok((
        it,
        PdfbReport {
            iterations: l,
            primal_residual: res.primal,
            dual_residual: res.dual,
            converged: false,
            steps,
            halvings,
            history,
        },
    ))
}

/// Solves one step from cold duals and returns the new densities.
pub fn solve_saddle(
    mu_k: &SpeciesField,
    model: &Model,
    tau: f64,
    config: &PdfbConfig,
) -> Result<(SpeciesField, PdfbReport)> {
    let problem = SaddleProblem::new(model, mu_k.clone(), tau)?;
    let y0 = problem.zero_dual();
    let (it, report) = solve_saddle_from(&problem, y0, config)?;
    Ok((it.x.mu, report))
}
