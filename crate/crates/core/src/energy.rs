//! Discrete free energies, their convex splitting and the proximal map of the
//! conjugate preconditioner.
//!
//! The discrete energy on a grid with spacing `h` in `d` dimensions is
//!
//! ```text
//! E_h[mu] = sum_i (U(mu_i) + V(x_i) . mu_i) h^d
//!         + sum_alpha c_alpha / 2 sum_faces |d_h mu_alpha|^2 h^d
//! ```
//!
//! and the solver works with the normalized energy `E_h / h^d`. A splitting
//! writes the normalized energy as `U[K mu] + V[mu]` with `U` convex and
//! separable over the components of `K mu`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dense::Mat;
use crate::error::{Error, Result};
use crate::grid::{dot, Grid};
use crate::krylov::{cg, ShiftedLaplacian};
use crate::state::SpeciesField;

/// Values in `[-ENTROPY_SLACK, 0)` are read as exact zeros by the entropy.
pub const ENTROPY_SLACK: f64 = 1e-12;

const SCALAR_NEWTON_CAP: usize = 200;

/// Pointwise internal energy contributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InternalTerm {
    /// `mu_s (log mu_s - 1)`.
    Entropy { species: usize },
    /// `P_eps(mu_plus - mu_minus)` with `P_eps(r) = eps^8 / (8 r^8) - eps^2 / (2 r^2)`.
    LennardJones { eps: f64, plus: usize, minus: usize },
    /// `a / 2 (sum_alpha mu_alpha)^2`.
    Interaction { a: f64 },
}

/// Confinement potential `V_alpha(x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Confinement {
    None,
    /// `V_alpha(x) = sigma_alpha |x|^2 / 2`.
    Harmonic { sigma: Vec<f64> },
}

/// A discrete free energy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergySpec {
    pub species: usize,
    pub internal: Vec<InternalTerm>,
    pub confinement: Confinement,
    /// Dirichlet weight per species (`0` for none).
    pub dirichlet: Vec<f64>,
}

pub fn lj_value(eps: f64, r: f64) -> f64 {
    let e2 = eps * eps;
    let s = e2 / (r * r);
    0.125 * s.powi(4) - 0.5 * s
}

pub fn lj_derivative(eps: f64, r: f64) -> f64 {
    let e2 = eps * eps;
    -e2.powi(4) / r.powi(9) + e2 / r.powi(3)
}

pub fn lj_second_derivative(eps: f64, r: f64) -> f64 {
    let e2 = eps * eps;
    9.0 * e2.powi(4) / r.powi(10) - 3.0 * e2 / r.powi(4)
}

/// Largest separation below which `P_eps` is convex: `3^(1/6) eps`.
pub fn lj_convexity_limit(eps: f64) -> f64 {
    3f64.powf(1.0 / 6.0) * eps
}

fn entropy_value(v: f64) -> Result<f64> {
    if v > 0.0 {
        Ok(v * (v.ln() - 1.0))
    } else if v >= -ENTROPY_SLACK {
        Ok(0.0)
    } else {
        Err(Error::Domain(format!("entropy evaluated at {v}")))
    }
}

fn entropy_derivative(v: f64) -> Result<f64> {
    if v > 0.0 {
        Ok(v.ln())
    } else {
        Err(Error::Domain(format!("log of non-positive density {v}")))
    }
}

/// Convex conjugate of `v (log v - 1)`, namely `exp(nu)`.
pub fn entropy_conjugate(nu: f64) -> f64 {
    nu.exp()
}

impl EnergySpec {
    pub fn zero(species: usize) -> Self {
        Self {
            species,
            internal: Vec::new(),
            confinement: Confinement::None,
            dirichlet: vec![0.0; species],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.internal.is_empty()
            && matches!(self.confinement, Confinement::None)
            && self.dirichlet.iter().all(|&c| c == 0.0)
    }

    fn check(&self, mu: &SpeciesField) -> Result<()> {
        if mu.species_count() != self.species {
            return Err(Error::Shape(format!(
                "energy expects {} species, field has {}",
                self.species,
                mu.species_count()
            )));
        }
        Ok(())
    }

    fn potential(&self, grid: &Grid, cell: usize, alpha: usize) -> f64 {
        match &self.confinement {
            Confinement::None => 0.0,
            Confinement::Harmonic { sigma } => {
                let x = grid.cell_center(cell);
                let r2 = if grid.dim() == 1 {
                    x[0] * x[0]
                } else {
                    x[0] * x[0] + x[1] * x[1]
                };
                0.5 * sigma[alpha] * r2
            }
        }
    }

    fn internal_at(&self, vals: &[f64]) -> Result<f64> {
        let mut acc = 0.0;
        for t in &self.internal {
            acc += match *t {
                InternalTerm::Entropy { species } => entropy_value(vals[species])?,
                InternalTerm::LennardJones { eps, plus, minus } => {
                    let r = vals[plus] - vals[minus];
                    if r <= 0.0 {
                        return Err(Error::Domain(format!("film separation {r} is not positive")));
                    }
                    lj_value(eps, r)
                }
                InternalTerm::Interaction { a } => {
                    let s: f64 = vals.iter().sum();
                    0.5 * a * s * s
                }
            };
        }
        Ok(acc)
    }

    /// Normalized energy `E_h / h^d`.
    pub fn normalized(&self, mu: &SpeciesField) -> Result<f64> {
        self.check(mu)?;
        let grid = *mu.grid();
        let nc = grid.num_cells();
        let mut total = 0.0;
        for c in 0..nc {
            let vals = mu.at(c);
            total += self.internal_at(&vals)?;
            for (a, v) in vals.iter().enumerate() {
                total += self.potential(&grid, c, a) * v;
            }
        }
        let mut grad = vec![0.0; grid.num_faces()];
        for (a, &coeff) in self.dirichlet.iter().enumerate() {
            if coeff == 0.0 {
                continue;
            }
            grid.gradient_into(mu.species(a), &mut grad);
            total += 0.5 * coeff * dot(&grad, &grad);
        }
        Ok(total)
    }

    /// Discrete energy `E_h`.
    pub fn value(&self, mu: &SpeciesField) -> Result<f64> {
        Ok(self.normalized(mu)? * mu.grid().cell_volume())
    }

    /// Gradient of the normalized energy with respect to the cell values.
    pub fn gradient(&self, mu: &SpeciesField) -> Result<SpeciesField> {
        self.check(mu)?;
        let grid = *mu.grid();
        let nc = grid.num_cells();
        let mut out = SpeciesField::zeros(grid, self.species);
        {
            let g = out.as_mut_slice();
            for c in 0..nc {
                let vals = mu.at(c);
                for t in &self.internal {
                    match *t {
                        InternalTerm::Entropy { species } => {
                            g[species * nc + c] += entropy_derivative(vals[species])?;
                        }
                        InternalTerm::LennardJones { eps, plus, minus } => {
                            let r = vals[plus] - vals[minus];
                            if r <= 0.0 {
                                return Err(Error::Domain(format!(
                                    "film separation {r} is not positive"
                                )));
                            }
                            let p = lj_derivative(eps, r);
                            g[plus * nc + c] += p;
                            g[minus * nc + c] -= p;
                        }
                        InternalTerm::Interaction { a } => {
                            let s: f64 = vals.iter().sum();
                            for alpha in 0..self.species {
                                g[alpha * nc + c] += a * s;
                            }
                        }
                    }
                }
                for alpha in 0..self.species {
                    g[alpha * nc + c] += self.potential(&grid, c, alpha);
                }
            }
        }
        let mut lap = vec![0.0; nc];
        for (a, &coeff) in self.dirichlet.iter().enumerate() {
            if coeff == 0.0 {
                continue;
            }
            grid.laplacian_into(mu.species(a), &mut lap);
            for (gi, li) in out.species_mut(a).iter_mut().zip(&lap) {
                *gi -= coeff * li;
            }
        }
        Ok(out)
    }
}

/// Discrete energy `E_h`; [`EnergySpec::normalized`] gives `E_h / h^d`.
pub fn discrete_energy(spec: &EnergySpec, mu: &SpeciesField) -> Result<f64> {
    spec.value(mu)
}

/// One convex component of the preconditioner, acting on one row of `K mu`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PrecondTerm {
    /// `w^2 * weight / 2` per cell.
    Quadratic { weight: f64 },
    /// `w (log w - 1)` per cell.
    Entropy,
    /// `P_eps(w)` per cell.
    LennardJones { eps: f64 },
    /// `coeff / 2 sum_faces |d_h w|^2`.
    Dirichlet { coeff: f64 },
}

/// Splitting of a normalized energy into `U[K mu] + V[mu]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexSplit {
    /// `r x n` coupling matrix applied cellwise.
    pub k: Vec<Vec<f64>>,
    pub terms: Vec<PrecondTerm>,
    pub remainder: EnergySpec,
}

impl ConvexSplit {
    /// No preconditioner: `U = 0`, `V` is the whole energy.
    pub fn none(energy: EnergySpec) -> Self {
        Self {
            k: Vec::new(),
            terms: Vec::new(),
            remainder: energy,
        }
    }

    pub fn components(&self) -> usize {
        self.terms.len()
    }

    pub fn species(&self) -> usize {
        self.remainder.species
    }

    pub fn k_matrix(&self) -> Mat {
        let n = self.species();
        Mat::from_fn(self.components(), n, |r, a| self.k[r][a])
    }

    /// `K mu`, component-major with one block of cells per component.
    pub fn apply_k(&self, mu: &SpeciesField) -> Vec<f64> {
        let nc = mu.num_cells();
        let mut out = vec![0.0; self.components() * nc];
        for (r, row) in self.k.iter().enumerate() {
            for (a, &w) in row.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let src = mu.species(a);
                for (o, s) in out[r * nc..(r + 1) * nc].iter_mut().zip(src) {
                    *o += w * s;
                }
            }
        }
        out
    }

    /// Adds `K^T nu` into `out`.
    pub fn add_k_adjoint(&self, nu: &[f64], out: &mut SpeciesField) {
        let nc = out.num_cells();
        for (r, row) in self.k.iter().enumerate() {
            for (a, &w) in row.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let dst = out.species_mut(a);
                for (o, s) in dst.iter_mut().zip(&nu[r * nc..(r + 1) * nc]) {
                    *o += w * s;
                }
            }
        }
    }

    /// `U[w]` for a component-major field `w`.
    pub fn precond_value(&self, grid: &Grid, w: &[f64]) -> Result<f64> {
        let nc = grid.num_cells();
        let mut total = 0.0;
        let mut grad = vec![0.0; grid.num_faces()];
        for (r, term) in self.terms.iter().enumerate() {
            let comp = &w[r * nc..(r + 1) * nc];
            match *term {
                PrecondTerm::Quadratic { weight } => {
                    total += 0.5 * weight * dot(comp, comp);
                }
                PrecondTerm::Entropy => {
                    for &v in comp {
                        total += entropy_value(v)?;
                    }
                }
                PrecondTerm::LennardJones { eps } => {
                    for &v in comp {
                        if v <= 0.0 {
                            return Err(Error::Domain(format!("film separation {v} is not positive")));
                        }
                        total += lj_value(eps, v);
                    }
                }
                PrecondTerm::Dirichlet { coeff } => {
                    grid.gradient_into(comp, &mut grad);
                    total += 0.5 * coeff * dot(&grad, &grad);
                }
            }
        }
        Ok(total)
    }

    /// Gradient of `U` at a component-major field.
    pub fn precond_gradient(&self, grid: &Grid, w: &[f64]) -> Result<Vec<f64>> {
        let nc = grid.num_cells();
        let mut out = vec![0.0; w.len()];
        for (r, term) in self.terms.iter().enumerate() {
            let comp = &w[r * nc..(r + 1) * nc];
            let dst = &mut out[r * nc..(r + 1) * nc];
            match *term {
                PrecondTerm::Quadratic { weight } => {
                    for (o, v) in dst.iter_mut().zip(comp) {
                        *o = weight * v;
                    }
                }
                PrecondTerm::Entropy => {
                    for (o, &v) in dst.iter_mut().zip(comp) {
                        *o = entropy_derivative(v)?;
                    }
                }
                PrecondTerm::LennardJones { eps } => {
                    for (o, &v) in dst.iter_mut().zip(comp) {
                        if v <= 0.0 {
                            return Err(Error::Domain(format!("film separation {v} is not positive")));
                        }
                        *o = lj_derivative(eps, v);
                    }
                }
                PrecondTerm::Dirichlet { coeff } => {
                    grid.laplacian_into(comp, dst);
                    dst.iter_mut().for_each(|o| *o *= -coeff);
                }
            }
        }
        Ok(out)
    }

    /// `U[K mu] + V[mu]`, which must reproduce the normalized energy.
    pub fn split_value(&self, mu: &SpeciesField) -> Result<f64> {
        let w = self.apply_k(mu);
        Ok(self.precond_value(mu.grid(), &w)? + self.remainder.normalized(mu)?)
    }

    /// Gradient of the remainder `V`.
    pub fn remainder_gradient(&self, mu: &SpeciesField) -> Result<SpeciesField> {
        self.remainder.gradient(mu)
    }

    /// Proximal map of `s * tau U^*(. / tau)` at `nu0`, computed through
    /// Moreau's identity as `nu0 - s * prox_{tau U / s}(nu0 / s)`.
    pub fn prox_conjugate(&self, grid: &Grid, nu0: &[f64], s: f64, tau: f64) -> Result<Vec<f64>> {
        Ok(self.prox_conjugate_with(grid, nu0, s, tau, None)?.0)
    }

    /// Same as [`ConvexSplit::prox_conjugate`] but seeded with `guess` and
    /// also returning the primal minimizer `w`.
    pub fn prox_conjugate_with(
        &self,
        grid: &Grid,
        nu0: &[f64],
        s: f64,
        tau: f64,
        guess: Option<&[f64]>,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let w = self.prox_primal(grid, nu0, s, tau, guess)?;
        let nu = nu0.iter().zip(&w).map(|(x, wi)| x - s * wi).collect();
        Ok((nu, w))
    }

    /// Minimizer `w` of `tau U(w) + s/2 |w - nu0/s|^2`. `guess` seeds the
    /// iterative solves.
    pub fn prox_primal(
        &self,
        grid: &Grid,
        nu0: &[f64],
        s: f64,
        tau: f64,
        guess: Option<&[f64]>,
    ) -> Result<Vec<f64>> {
        if !(s > 0.0) || tau < 0.0 {
            return Err(Error::Config(format!(
                "proximal step {s} and time step {tau} must be positive"
            )));
        }
        let nc = grid.num_cells();
        let mut out = vec![0.0; nu0.len()];
        for (r, term) in self.terms.iter().enumerate() {
            let x = &nu0[r * nc..(r + 1) * nc];
            let dst = &mut out[r * nc..(r + 1) * nc];
            match *term {
                PrecondTerm::Quadratic { weight } => {
                    let d = tau * weight + s;
                    for (o, v) in dst.iter_mut().zip(x) {
                        *o = v / d;
                    }
                }
                PrecondTerm::Entropy => {
                    dst.par_iter_mut()
                        .zip(x.par_iter())
                        .try_for_each(|(o, &xi)| -> Result<()> {
                            *o = prox_entropy_scalar(xi, s, tau)?;
                            Ok(())
                        })?;
                }
                PrecondTerm::LennardJones { eps } => {
                    let g = guess.map(|g| &g[r * nc..(r + 1) * nc]);
                    dst.par_iter_mut()
                        .enumerate()
                        .try_for_each(|(i, o)| -> Result<()> {
                            *o = prox_lj_scalar(x[i], s, tau, eps, g.map(|g| g[i]))?;
                            Ok(())
                        })?;
                }
                PrecondTerm::Dirichlet { coeff } => {
                    let w = prox_dirichlet_slice(grid, x, s, tau, coeff)?;
                    dst.copy_from_slice(&w);
                }
            }
        }
        Ok(out)
    }
}

/// Gradient of the remainder of a splitting.
pub fn energy_gradient_remainder(split: &ConvexSplit, mu: &SpeciesField) -> Result<SpeciesField> {
    split.remainder_gradient(mu)
}

/// Proximal map of the conjugate preconditioner term (see
/// [`ConvexSplit::prox_conjugate`]).
pub fn prox_preconditioner(
    split: &ConvexSplit,
    grid: &Grid,
    nu0: &[f64],
    step: f64,
    tau: f64,
) -> Result<Vec<f64>> {
    split.prox_conjugate(grid, nu0, step, tau)
}

/// Solves `tau log w + s w = x` for `w > 0`, i.e. the minimizer of
/// `tau w (log w - 1) + s/2 (w - x/s)^2`. Works in `y = log w`, where the
/// equation `tau y + s e^y = x` is monotone with the bracket
/// `[min(0, (x - s)/tau), ln(max(1, x/s))]`.
pub fn prox_entropy_scalar(x: f64, s: f64, tau: f64) -> Result<f64> {
    if tau == 0.0 {
        return Ok((x / s).max(0.0));
    }
    let f = |y: f64| tau * y + s * y.exp() - x;
    let mut lo = ((x - s) / tau).min(0.0);
    let mut hi = (x / s).max(1.0).ln();
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::ProxFailed { argument: x });
    }
    // Newton from the better-conditioned end of the bracket.
    let mut y = if x / s > 1.0 { hi } else { lo.max(hi - 50.0) };
    if f(lo) > 0.0 || f(hi) < 0.0 {
        return Err(Error::ProxFailed { argument: x });
    }
    for _ in 0..SCALAR_NEWTON_CAP {
        let fy = f(y);
        let scale = tau * y.abs().max(1.0) + x.abs() + s;
        if fy.abs() <= 1e-15 * scale {
            return Ok(y.exp());
        }
        if fy > 0.0 {
            hi = y;
        } else {
            lo = y;
        }
        let dfy = tau + s * y.exp();
        let mut next = y - fy / dfy;
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - y).abs() <= 1e-15 * y.abs().max(1.0) {
            return Ok(next.exp());
        }
        y = next;
        if hi - lo <= 1e-16 * y.abs().max(1.0) {
            return Ok(y.exp());
        }
    }
    Err(Error::ProxFailed { argument: x })
}

/// Solves `tau P_eps'(w) + s w = x` for `w > 0` by bracketed Newton. When
/// `s + tau P_eps''` changes sign (outside the convex range of `P_eps`) the
/// root nearest to `guess` inside the bracket is returned.
pub fn prox_lj_scalar(x: f64, s: f64, tau: f64, eps: f64, guess: Option<f64>) -> Result<f64> {
    if tau == 0.0 {
        return Ok((x / s).max(f64::MIN_POSITIVE));
    }
    let f = |w: f64| tau * lj_derivative(eps, w) + s * w - x;
    let mut hi = eps.max(x / s);
    if f(hi) < 0.0 {
        return Err(Error::ProxFailed { argument: x });
    }
    let mut lo = if x > s * eps { eps } else { eps * 0.5 };
    let mut k = 0;
    while f(lo) >= 0.0 {
        lo *= 0.5;
        k += 1;
        if k > 200 {
            return Err(Error::ProxFailed { argument: x });
        }
    }
    let mut w = match guess {
        Some(g) if g > lo && g < hi => g,
        _ => 0.5 * (lo + hi),
    };
    for _ in 0..SCALAR_NEWTON_CAP {
        let fw = f(w);
        if fw == 0.0 {
            return Ok(w);
        }
        if fw > 0.0 {
            hi = w;
        } else {
            lo = w;
        }
        let dfw = tau * lj_second_derivative(eps, w) + s;
        let mut next = if dfw > 0.0 { w - fw / dfw } else { f64::NAN };
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - w).abs() <= 1e-15 * w.abs() {
            return Ok(next);
        }
        w = next;
        if hi - lo <= 1e-15 * w {
            return Ok(w);
        }
    }
    Err(Error::ProxFailed { argument: x })
}

fn prox_dirichlet_slice(grid: &Grid, x: &[f64], s: f64, tau: f64, coeff: f64) -> Result<Vec<f64>> {
    let op = ShiftedLaplacian::new(*grid, s, tau * coeff);
    let mut w = vec![0.0; x.len()];
    op.solve(x, &mut w);
    cg(
        &mut |v, o| op.apply(v, o),
        &mut |v, o| op.solve(v, o),
        x,
        &mut w,
        1e-13,
        200,
    )?;
    Ok(w)
}

/// Solves `(s I - tau coeff Delta_h) nu = nu0`.
pub fn prox_dirichlet(
    nu0: &crate::grid::ScalarField,
    step: f64,
    tau: f64,
    coeff: f64,
) -> Result<crate::grid::ScalarField> {
    if !(step > 0.0) {
        return Err(Error::Config(format!("proximal step {step} must be positive")));
    }
    let grid = *nu0.grid();
    let w = prox_dirichlet_slice(&grid, nu0.values(), step, tau, coeff)?;
    crate::grid::ScalarField::new(grid, w)
}
