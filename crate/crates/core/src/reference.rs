//! Backward-Euler finite-difference scheme used as ground truth for the
//! time-accuracy study.
//!
//! The unknowns of one step are ordered cell-major (`u[c * n + alpha]`) so
//! that the Jacobian is banded. It is approximated by forward differences
//! with column colouring and factorized by banded LU.

use serde::{Deserialize, Serialize};

use crate::energy::{discrete_energy, EnergySpec};
use crate::error::{Error, Result};
use crate::jko::{min_box_slack, FlowFailure, StepDiagnostics, Trajectory};
use crate::models::{Mobility, Model};
use crate::state::SpeciesField;

/// Floor applied to densities before evaluating logarithms.
pub const LOG_FLOOR: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceConfig {
    pub tau_ref: f64,
    /// Target for `max |R|`, scaled by `max(1, max |mu^k|)`.
    pub tol: f64,
    pub max_newton: usize,
    /// How many times a failed step may be split into two half steps.
    pub max_halvings: usize,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self { tau_ref: 1e-3, tol: 1e-11, max_newton: 40, max_halvings: 5 }
    }
}

impl ReferenceConfig {
    fn validate(&self) -> Result<()> {
        if !(self.tau_ref > 0.0 && self.tau_ref.is_finite()) {
            return Err(Error::Config(format!("reference time step {} must be positive", self.tau_ref)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config("reference Newton tolerance must be positive".into()));
        }
        Ok(())
    }
}

/// Outcome of one reference step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceStepReport {
    pub newton_iterations: usize,
    pub residual: f64,
    /// Number of sub-steps actually taken (1 unless the step was split).
    pub substeps: usize,
}

/// Residual of the implicit step,
/// `R(mu) = mu - mu_k - tau A[Mbar_f grad_h(dE/dmu)]`, with face mobilities
/// averaged from the two neighbouring cells.
pub struct Residual<'a> {
    mobility: Mobility,
    energy: &'a EnergySpec,
    mu_k: &'a SpeciesField,
    tau: f64,
}

impl<'a> Residual<'a> {
    pub fn new(mobility: Mobility, energy: &'a EnergySpec, mu_k: &'a SpeciesField, tau: f64) -> Self {
        Self { mobility, energy, mu_k, tau }
    }

    /// Residual in species-major layout, like the field itself.
    pub fn eval(&self, mu: &SpeciesField) -> Result<Vec<f64>> {
        let grid = *mu.grid();
        let nc = grid.num_cells();
        let n = mu.species_count();
        let mut clamped = mu.clone();
        for v in clamped.as_mut_slice() {
            *v = v.max(LOG_FLOOR);
        }
        let g = self.energy.gradient(&clamped)?;
        let nf = grid.num_faces();
        let mut grads = vec![0.0; n * nf];
        for a in 0..n {
            grid.gradient_into(g.species(a), &mut grads[a * nf..(a + 1) * nf]);
        }
        let cells: Vec<[f64; 3]> = (0..nc).map(|c| self.mobility.eval_packed(&mu.at(c))).collect();
        let mut flux = vec![0.0; nf];
        let mut div = vec![0.0; nc];
        let mut out = vec![0.0; n * nc];
        for a in 0..n {
            for (f, fl) in flux.iter_mut().enumerate() {
                *fl = match grid.face_neighbors(f) {
                    Some((l, r)) => {
                        let row = |m: &[f64; 3], b: usize| match (a, b) {
                            (0, 0) => m[0],
                            (1, 1) => m[2],
                            _ => m[1],
                        };
                        (0..n)
                            .map(|b| 0.5 * (row(&cells[l], b) + row(&cells[r], b)) * grads[b * nf + f])
                            .sum()
                    }
                    None => 0.0,
                };
            }
            grid.divergence_into(&flux, &mut div);
            let (m, m0) = (mu.species(a), self.mu_k.species(a));
            for c in 0..nc {
                out[a * nc + c] = m[c] - m0[c] - self.tau * div[c];
            }
        }
        Ok(out)
    }
}

/// Banded matrix with `kl` sub- and `ku` super-diagonals, stored by rows
/// with room for the fill-in of partial pivoting.
#[derive(Debug, Clone)]
pub struct BandMatrix {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        let width = 2 * kl + ku + 1;
        Self { n, kl, ku, width, data: vec![0.0; n * width] }
    }

    pub fn size(&self) -> usize {
        self.n
    }

    /// Whether `(i, j)` lies inside the declared band.
    pub fn in_band(&self, i: usize, j: usize) -> bool {
        j + self.kl >= i && j <= i + self.ku
    }

    // row i stores columns i - kl ..= i + kl + ku
    fn slot(&self, i: usize, j: usize) -> usize {
        i * self.width + (j + self.kl - i)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if j + self.kl < i || j > i + self.kl + self.ku {
            0.0
        } else {
            self.data[self.slot(i, j)]
        }
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        assert!(self.in_band(i, j), "entry ({i}, {j}) outside the band");
        let s = self.slot(i, j);
        self.data[s] = v;
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| {
                let lo = i.saturating_sub(self.kl);
                let hi = (i + self.ku).min(self.n - 1);
                (lo..=hi).map(|j| self.get(i, j) * x[j]).sum()
            })
            .collect()
    }

    /// Solves `A x = b` by Gaussian elimination with partial pivoting,
    /// consuming the matrix.
    pub fn solve(mut self, b: &[f64]) -> Result<Vec<f64>> {
        let n = self.n;
        if b.len() != n {
            return Err(Error::Shape(format!("right-hand side has length {}, expected {n}", b.len())));
        }
        let mut x = b.to_vec();
        let scale = self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let tiny = scale * f64::EPSILON * n as f64;
        // rows below k reach column at most k + kl + ku after swaps
        for k in 0..n {
            let last_row = (k + self.kl).min(n - 1);
            let mut p = k;
            for i in k + 1..=last_row {
                if self.get(i, k).abs() > self.get(p, k).abs() {
                    p = i;
                }
            }
            let piv = self.get(p, k);
            if !(piv.abs() > tiny) {
                return Err(Error::LinearSolver { iterations: k, residual: piv.abs() });
            }
            let last_col = (k + self.kl + self.ku).min(n - 1);
            if p != k {
                for j in k..=last_col {
                    let (a, c) = (self.slot(k, j), self.slot(p, j));
                    self.data.swap(a, c);
                }
                x.swap(k, p);
            }
            for i in k + 1..=last_row {
                let f = self.get(i, k) / piv;
                if f == 0.0 {
                    continue;
                }
                for j in k + 1..=last_col {
                    let s = self.slot(i, j);
                    self.data[s] -= f * self.get(k, j);
                }
                let s = self.slot(i, k);
                self.data[s] = 0.0;
                x[i] -= f * x[k];
            }
        }
        for k in (0..n).rev() {
            let last_col = (k + self.kl + self.ku).min(n - 1);
            let mut acc = x[k];
            for j in k + 1..=last_col {
                acc -= self.get(k, j) * x[j];
            }
            x[k] = acc / self.get(k, k);
        }
        Ok(x)
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Half-bandwidth of the Jacobian in cell-major ordering.
fn bandwidth(energy: &EnergySpec, mu: &SpeciesField) -> usize {
    let grid = mu.grid();
    let n = mu.species_count();
    let reach = if energy.dirichlet.iter().any(|&c| c != 0.0) { 2 } else { 1 };
    let stride = if grid.dim() == 2 { grid.cells()[0] } else { 1 };
    n * (reach * stride + 1) - 1
}

fn to_cell_major(field: &[f64], n: usize, nc: usize) -> Vec<f64> {
    let mut out = vec![0.0; field.len()];
    for a in 0..n {
        for c in 0..nc {
            out[c * n + a] = field[a * nc + c];
        }
    }
    out
}

fn finite_residual(res: &Residual, mu: &SpeciesField) -> Option<Vec<f64>> {
    match res.eval(mu) {
        Ok(r) if r.iter().all(|v| v.is_finite()) => Some(r),
        _ => None,
    }
}

fn jacobian(res: &Residual, mu: &SpeciesField, r0: &[f64], bw: usize) -> Result<BandMatrix> {
    let n = mu.species_count();
    let nc = mu.num_cells();
    let size = n * nc;
    let mut jac = BandMatrix::zeros(size, bw, bw);
    let colors = (2 * bw + 1).min(size);
    let mut probe = mu.clone();
    for color in 0..colors {
        let cols: Vec<usize> = (color..size).step_by(colors).collect();
        let mut steps = vec![0.0; cols.len()];
        {
            let data = probe.as_mut_slice();
            for (s, &u) in steps.iter_mut().zip(&cols) {
                let idx = (u % n) * nc + u / n;
                let v = data[idx];
                *s = f64::EPSILON.sqrt() * v.abs().max(1e-3);
                data[idx] = v + *s;
            }
        }
        let r1 = res.eval(&probe)?;
        {
            let data = probe.as_mut_slice();
            for &u in &cols {
                let idx = (u % n) * nc + u / n;
                data[idx] = mu.as_slice()[idx];
            }
        }
        for (&u, &s) in cols.iter().zip(&steps) {
            let lo = u.saturating_sub(bw);
            let hi = (u + bw).min(size - 1);
            for row in lo..=hi {
                let idx = (row % n) * nc + row / n;
                jac.set(row, u, (r1[idx] - r0[idx]) / s);
            }
        }
    }
    Ok(jac)
}

/// Newton solve of one implicit step with a fixed `tau`.
fn newton_step(
    mu_k: &SpeciesField,
    mobility: Mobility,
    energy: &EnergySpec,
    tau: f64,
    config: &ReferenceConfig,
) -> Result<(SpeciesField, usize, f64)> {
    let res = Residual::new(mobility, energy, mu_k, tau);
    let n = mu_k.species_count();
    let nc = mu_k.num_cells();
    let bw = bandwidth(energy, mu_k);
    let target = config.tol * max_abs(mu_k.as_slice()).max(1.0);
    let mut mu = mu_k.clone();
    let mut r = finite_residual(&res, &mu)
        .ok_or_else(|| Error::Domain("reference residual is not finite at the initial state".into()))?;
    for it in 0..config.max_newton {
        if max_abs(&r) <= target {
            return Ok((mu, it, max_abs(&r)));
        }
        let jac = jacobian(&res, &mu, &r, bw)?;
        let rhs: Vec<f64> = to_cell_major(&r, n, nc).iter().map(|v| -v).collect();
        let delta = jac.solve(&rhs)?;
        let base = norm2(&r);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..30 {
            let mut trial = mu.clone();
            for (u, d) in delta.iter().enumerate() {
                trial.as_mut_slice()[(u % n) * nc + u / n] += t * d;
            }
            if let Some(rt) = finite_residual(&res, &trial) {
                if norm2(&rt) <= (1.0 - 1e-4 * t) * base {
                    accepted = Some((trial, rt));
                    break;
                }
            }
            t *= 0.5;
        }
        match accepted {
            Some((m, rt)) => {
                mu = m;
                r = rt;
            }
            None => break,
        }
    }
    let residual = max_abs(&r);
    if residual <= target {
        return Ok((mu, config.max_newton, residual));
    }
    Err(Error::NonConvergence { stage: "reference Newton", iterations: config.max_newton, residual })
}

fn split_step(
    mu_k: &SpeciesField,
    mobility: Mobility,
    energy: &EnergySpec,
    tau: f64,
    config: &ReferenceConfig,
    depth: usize,
) -> Result<(SpeciesField, ReferenceStepReport)> {
    match newton_step(mu_k, mobility, energy, tau, config) {
        Ok((mu, iterations, residual)) => {
            Ok((mu, ReferenceStepReport { newton_iterations: iterations, residual, substeps: 1 }))
        }
        Err(e) if depth >= config.max_halvings => Err(e),
        Err(_) => {
            let (mid, a) = split_step(mu_k, mobility, energy, 0.5 * tau, config, depth + 1)?;
            let (end, b) = split_step(&mid, mobility, energy, 0.5 * tau, config, depth + 1)?;
            Ok((
                end,
                ReferenceStepReport {
                    newton_iterations: a.newton_iterations + b.newton_iterations,
                    residual: b.residual,
                    substeps: a.substeps + b.substeps,
                },
            ))
        }
    }
}

/// One backward-Euler step of length `tau` from `mu_k`. A step whose Newton
/// iteration fails is replaced by two half steps, recursively.
pub fn backward_euler_step(
    mu_k: &SpeciesField,
    model: &Model,
    tau: f64,
    config: &ReferenceConfig,
) -> Result<(SpeciesField, ReferenceStepReport)> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("time step {tau} must be positive")));
    }
    if mu_k.species_count() != model.species() {
        return Err(Error::Shape(format!(
            "state has {} species, model '{}' has {}",
            mu_k.species_count(),
            model.name(),
            model.species()
        )));
    }
    let energy = model.energy();
    split_step(mu_k, model.mobility(), &energy, tau, config, 0)
}

/// Runs `steps` backward Euler steps of size `config.tau_ref`, calling
/// `observe` after the initial state and after every step. The
/// diagnostics reuse the flow layout: `pdfb_iterations` holds the Newton
/// iteration count and `primal_residual` the final residual.
pub fn run_reference_with(
    mu0: &SpeciesField,
    model: &Model,
    steps: usize,
    cadence: usize,
    config: &ReferenceConfig,
    observe: &mut dyn FnMut(&StepDiagnostics, &SpeciesField) -> Result<()>,
) -> std::result::Result<Trajectory, Box<FlowFailure>> {
    let mut traj = Trajectory::default();
    let fail = |step, error, partial| Box::new(FlowFailure { step, error, partial });
    let setup = config.validate().and_then(|_| {
        if cadence == 0 {
            Err(Error::Config("output cadence must be at least 1".into()))
        } else {
            StepDiagnostics::initial(mu0, model)
        }
    });
    let init = match setup.and_then(|d| observe(&d, mu0).map(|_| d)) {
        Ok(d) => d,
        Err(e) => return Err(fail(0, e, traj)),
    };
    traj.diagnostics.push(init);
    traj.states.push((0, mu0.clone()));
    let energy = model.energy();
    let bx = model.box_constraint();
    let mut mu = mu0.clone();
    for step in 1..=steps {
        let advance = backward_euler_step(&mu, model, config.tau_ref, config).and_then(|(next, report)| {
            let diag = StepDiagnostics {
                step,
                time: step as f64 * config.tau_ref,
                energy: discrete_energy(&energy, &next)?,
                masses: next.masses(),
                min_box_slack: min_box_slack(&bx, &next),
                pdfb_iterations: report.newton_iterations,
                primal_residual: report.residual,
                dual_residual: 0.0,
                converged: true,
            };
            observe(&diag, &next)?;
            Ok((next, diag))
        });
        let (next, diag) = match advance {
            Ok(v) => v,
            Err(e) => return Err(fail(step, e, traj)),
        };
        mu = next;
        traj.diagnostics.push(diag);
        if step % cadence == 0 || step == steps {
            traj.states.push((step, mu.clone()));
        }
    }
    Ok(traj)
}

/// [`run_reference_with`] without an observer.
pub fn run_reference(
    mu0: &SpeciesField,
    model: &Model,
    steps: usize,
    cadence: usize,
    config: &ReferenceConfig,
) -> Result<Trajectory> {
    run_reference_with(mu0, model, steps, cadence, config, &mut |_, _| Ok(())).map_err(|f| f.error)
}

/// `|a - b|_2 / |b|_2` over all species jointly.
pub fn relative_error(a: &SpeciesField, b: &SpeciesField) -> Result<f64> {
    a.check_compatible(b)?;
    let den = norm2(b.as_slice());
    if den == 0.0 {
        return Err(Error::Domain("relative error against a zero field".into()));
    }
    let num: f64 = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(num.sqrt() / den)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dense::{lu_solve, Mat};

    #[test]
    fn band_solve_matches_dense() {
        let n = 9;
        let (kl, ku) = (2, 1);
        let mut band = BandMatrix::zeros(n, kl, ku);
        let mut dense = Mat::zeros(n, n);
        let mut seed = 7u64;
        let mut next = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        for i in 0..n {
            for j in 0..n {
                if band.in_band(i, j) {
                    // small diagonal forces pivoting
                    let v = if i == j { 0.01 * next() } else { next() };
                    band.set(i, j, v);
                    dense[(i, j)] = v;
                }
            }
        }
        let b: Vec<f64> = (0..n).map(|i| i as f64 - 3.0).collect();
        let x = band.clone().solve(&b).unwrap();
        let y = lu_solve(&dense, &b).unwrap();
        for (u, v) in x.iter().zip(&y) {
            assert!((u - v).abs() < 1e-10, "{u} vs {v}");
        }
        let back = band.matvec(&x);
        for (u, v) in back.iter().zip(&b) {
            assert!((u - v).abs() < 1e-10);
        }
    }
}
