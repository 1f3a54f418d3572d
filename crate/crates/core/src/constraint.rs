//! Euclidean projection onto the discrete admissible set: the continuity
//! equation linking the new densities to the old ones through the momentum,
//! together with coupled box constraints `b0 <= M mu <= b1` in every cell.
//!
//! The projection is computed with a primal-dual active-set loop. Each pass
//! fixes the active box rows and solves the equality constrained projection
//! through its Schur complement. The continuity block of that complement is
//! `I - Delta_h` per species and is inverted exactly, so only the (usually
//! small) system on the active box multipliers is solved iteratively. Active
//! sets are read off an exact cellwise projection onto the box.

use std::borrow::Cow;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::dense::{lu_solve, Mat};
use crate::error::{Error, Result};
use crate::grid::{dot, Grid};
use crate::krylov::{cg, ShiftedLaplacian};
use crate::state::{MomentumField, SpeciesField};

/// Outer iteration cap of the active-set loop.
pub const MAX_OUTER: usize = 50;
const SCHUR_TOL: f64 = 1e-14;
const TIKHONOV: f64 = 1e-12;

/// Coupled box constraint `lo <= coupling * mu_i <= hi` for every cell `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxConstraint {
    /// `p x n` row-major coupling matrix.
    pub coupling: Vec<Vec<f64>>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxConstraint {
    pub fn new(coupling: Vec<Vec<f64>>, lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        let b = Self { coupling, lo, hi };
        b.validate()?;
        Ok(b)
    }

    /// No constraint at all.
    pub fn none() -> Self {
        Self {
            coupling: Vec::new(),
            lo: Vec::new(),
            hi: Vec::new(),
        }
    }

    /// `mu_alpha >= 0` for each of `n` species.
    pub fn nonnegative(n: usize) -> Self {
        Self {
            coupling: (0..n)
                .map(|a| (0..n).map(|b| if a == b { 1.0 } else { 0.0 }).collect())
                .collect(),
            lo: vec![0.0; n],
            hi: vec![f64::INFINITY; n],
        }
    }

    pub fn rows(&self) -> usize {
        self.coupling.len()
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.rows();
        if self.lo.len() != p || self.hi.len() != p {
            return Err(Error::Config(format!(
                "box has {p} rows but {} lower and {} upper bounds",
                self.lo.len(),
                self.hi.len()
            )));
        }
        let n = self.coupling.first().map_or(0, |r| r.len());
        for (b, row) in self.coupling.iter().enumerate() {
            if row.len() != n {
                return Err(Error::Config("ragged box coupling matrix".into()));
            }
            if row.iter().all(|&v| v == 0.0) {
                return Err(Error::Config(format!("box row {b} is zero")));
            }
            if !(self.lo[b] <= self.hi[b]) {
                return Err(Error::Config(format!(
                    "box row {b} has lower bound {} above upper bound {}",
                    self.lo[b], self.hi[b]
                )));
            }
        }
        Ok(())
    }

    fn row_value(&self, beta: usize, mu: &SpeciesField, cell: usize) -> f64 {
        let nc = mu.num_cells();
        let data = mu.as_slice();
        self.coupling[beta]
            .iter()
            .enumerate()
            .map(|(a, w)| w * data[a * nc + cell])
            .sum()
    }

    /// Largest amount by which `mu` leaves the box.
    pub fn violation(&self, mu: &SpeciesField) -> f64 {
        let mut v: f64 = 0.0;
        for b in 0..self.rows() {
            for c in 0..mu.num_cells() {
                let x = self.row_value(b, mu, c);
                v = v.max(self.lo[b] - x).max(x - self.hi[b]);
            }
        }
        v
    }

    /// Necessary condition for a nonempty admissible set: the conserved
    /// totals must be compatible with every row.
    pub fn check_mass(&self, totals: &[f64], cells: usize) -> Result<()> {
        let nc = cells as f64;
        for b in 0..self.rows() {
            let s: f64 = self.coupling[b].iter().zip(totals).map(|(w, t)| w * t).sum();
            let slack = 1e-12 * s.abs().max(1.0);
            if s < nc * self.lo[b] - slack || s > nc * self.hi[b] + slack {
                return Err(Error::Infeasible(format!(
                    "row {b}: conserved total {s} incompatible with bounds [{}, {}] on {cells} cells",
                    self.lo[b], self.hi[b]
                )));
            }
        }
        Ok(())
    }
}

/// Active sets and multipliers of one projection, reusable as a warm start.
#[derive(Debug, Clone, PartialEq)]
pub struct ActiveSetState {
    /// Continuity multipliers, species-major over cells.
    pub phi: Vec<f64>,
    /// Box multipliers, row-major over cells (`lambda[beta * nc + i]`).
    pub lambda: Vec<f64>,
    pub lower: Vec<bool>,
    pub upper: Vec<bool>,
}

impl ActiveSetState {
    pub fn cold(n: usize, p: usize, cells: usize) -> Self {
        Self {
            phi: vec![0.0; n * cells],
            lambda: vec![0.0; p * cells],
            lower: vec![false; p * cells],
            upper: vec![false; p * cells],
        }
    }

    pub fn active_count(&self) -> usize {
        self.lower.iter().chain(&self.upper).filter(|&&a| a).count()
    }
}

/// Result of [`prox_admissible`].
#[derive(Debug, Clone)]
pub struct ProxOutput {
    pub mu: SpeciesField,
    pub m: MomentumField,
    pub state: ActiveSetState,
    pub outer_iterations: usize,
    pub continuity_residual: f64,
    pub box_violation: f64,
    pub complementarity: f64,
}

/// Per-row maximum over cells of `|C_beta|` with
/// `C = lambda - [lambda + (M mu - b0)]_- - [lambda + (M mu - b1)]_+`.
pub fn complementary_residual(mu: &SpeciesField, lambda: &[f64], bx: &BoxConstraint) -> Vec<f64> {
    let nc = mu.num_cells();
    (0..bx.rows())
        .map(|b| {
            (0..nc).fold(0.0f64, |m, c| {
                let l = lambda[b * nc + c];
                let x = bx.row_value(b, mu, c);
                let c_val = l - (l + x - bx.lo[b]).min(0.0) - (l + x - bx.hi[b]).max(0.0);
                m.max(c_val.abs())
            })
        })
        .collect()
}

/// Largest `|mu - mu_k + A m|` over species and cells.
pub fn continuity_residual(mu: &SpeciesField, m: &MomentumField, mu_k: &SpeciesField) -> f64 {
    let grid = *mu.grid();
    let mut div = vec![0.0; grid.num_cells()];
    let mut r: f64 = 0.0;
    for a in 0..mu.species_count() {
        grid.divergence_into(m.species(a), &mut div);
        for ((d, x), y) in div.iter().zip(mu.species(a)).zip(mu_k.species(a)) {
            r = r.max((x - y + d).abs());
        }
    }
    r
}

/// Equality constrained projection with fixed active sets.
///
/// Minimizes `|mu - mu0|^2 / 2 + |m - m0|^2 / 2` subject to
/// `mu_alpha + A m_alpha = cont_rhs_alpha` and `M_beta mu_i = b` on every
/// active `(beta, i)`, where `b` is the lower bound on `lower` rows and the
/// upper bound on `upper` rows. Returns the minimizer and the multipliers
/// `(phi, lambda)`, with `lambda` zero off the active set.
pub struct SaddleSystem<'a> {
    grid: Grid,
    n: usize,
    bx: &'a BoxConstraint,
    mm: Mat,
    cont: Cow<'a, ShiftedLaplacian>,
    active: Vec<(usize, usize, f64)>,
    /// Active rows grouped by cell.
    groups: Vec<Vec<usize>>,
}

impl<'a> SaddleSystem<'a> {
    pub fn new(grid: Grid, n: usize, bx: &'a BoxConstraint, lower: &[bool], upper: &[bool]) -> Self {
        let cont = Cow::Owned(ShiftedLaplacian::new(grid, 1.0, 1.0));
        Self::build(grid, n, bx, lower, upper, cont)
    }

    /// Same as [`SaddleSystem::new`] with a prebuilt `I - Delta_h` solver.
    pub fn with_solver(
        grid: Grid,
        n: usize,
        bx: &'a BoxConstraint,
        lower: &[bool],
        upper: &[bool],
        cont: &'a ShiftedLaplacian,
    ) -> Self {
        Self::build(grid, n, bx, lower, upper, Cow::Borrowed(cont))
    }

    fn build(
        grid: Grid,
        n: usize,
        bx: &'a BoxConstraint,
        lower: &[bool],
        upper: &[bool],
        cont: Cow<'a, ShiftedLaplacian>,
    ) -> Self {
        let nc = grid.num_cells();
        let p = bx.rows();
        let mut active = Vec::new();
        for b in 0..p {
            for c in 0..nc {
                if lower[b * nc + c] {
                    active.push((b, c, bx.lo[b]));
                } else if upper[b * nc + c] {
                    active.push((b, c, bx.hi[b]));
                }
            }
        }
        let m = if p == 0 {
            Mat::zeros(0, n)
        } else {
            Mat::from_fn(p, n, |b, a| bx.coupling[b][a])
        };
        let mut groups: Vec<Vec<usize>> = Vec::new();
        let mut slot = vec![usize::MAX; nc];
        for (k, &(_, c, _)) in active.iter().enumerate() {
            if slot[c] == usize::MAX {
                slot[c] = groups.len();
                groups.push(Vec::new());
            }
            groups[slot[c]].push(k);
        }
        Self {
            grid,
            n,
            bx,
            mm: m.gram(),
            cont,
            active,
            groups,
        }
    }

    fn b_transpose(&self, lam: &[f64], out: &mut [f64]) {
        let nc = self.grid.num_cells();
        out.iter_mut().for_each(|v| *v = 0.0);
        for (k, &(b, c, _)) in self.active.iter().enumerate() {
            for a in 0..self.n {
                out[a * nc + c] += self.bx.coupling[b][a] * lam[k];
            }
        }
    }

    fn b_apply(&self, z: &[f64], out: &mut [f64]) {
        let nc = self.grid.num_cells();
        for (k, &(b, c, _)) in self.active.iter().enumerate() {
            out[k] = (0..self.n).map(|a| self.bx.coupling[b][a] * z[a * nc + c]).sum();
        }
    }

    fn c_inverse(&self, r: &[f64], out: &mut [f64]) {
        let nc = self.grid.num_cells();
        for a in 0..self.n {
            self.cont.solve(&r[a * nc..(a + 1) * nc], &mut out[a * nc..(a + 1) * nc]);
        }
    }

    /// `(D - B C^-1 B^T) lam` on the active rows, plus an optional shift.
    fn schur_apply(&self, lam: &[f64], out: &mut [f64], shift: f64, scratch: &mut [Vec<f64>; 2]) {
        let [t, z] = scratch;
        self.b_transpose(lam, t);
        self.c_inverse(t, z);
        self.b_apply(z, out);
        // block diagonal D couples the active rows that share a cell
        for ks in &self.groups {
            for &k in ks {
                let bk = self.active[k].0;
                let mut acc = 0.0;
                for &l in ks {
                    acc += self.mm[(bk, self.active[l].0)] * lam[l];
                }
                out[k] = acc - out[k] + shift * lam[k];
            }
        }
    }

    /// Solves the projection. `lam_guess` seeds the iterative part.
    pub fn solve(
        &self,
        mu0: &SpeciesField,
        m0: &MomentumField,
        cont_rhs: &SpeciesField,
        lam_guess: Option<&[f64]>,
    ) -> Result<(SpeciesField, MomentumField, Vec<f64>, Vec<f64>)> {
        let grid = self.grid;
        let nc = grid.num_cells();
        let nf = grid.num_faces();
        let n = self.n;
        // residual of the constraints at (mu0, m0)
        let mut r_phi = vec![0.0; n * nc];
        let mut div = vec![0.0; nc];
        for a in 0..n {
            grid.divergence_into(m0.species(a), &mut div);
            for c in 0..nc {
                r_phi[a * nc + c] = mu0.species(a)[c] + div[c] - cont_rhs.species(a)[c];
            }
        }
        let na = self.active.len();
        let mut r_lam = vec![0.0; na];
        for (k, &(b, c, bound)) in self.active.iter().enumerate() {
            r_lam[k] = self.bx.row_value(b, mu0, c) - bound;
        }

        let mut lam = vec![0.0; na];
        if na > 0 {
            let mut cr = vec![0.0; n * nc];
            self.c_inverse(&r_phi, &mut cr);
            let mut bcr = vec![0.0; na];
            self.b_apply(&cr, &mut bcr);
            let rhs: Vec<f64> = r_lam.iter().zip(&bcr).map(|(a, b)| a - b).collect();
            if let Some(g) = lam_guess {
                lam.copy_from_slice(g);
            }
            let diag: Vec<f64> = self
                .active
                .iter()
                .map(|&(b, _, _)| self.mm[(b, b)])
                .collect();
            let mut scratch = [vec![0.0; n * nc], vec![0.0; n * nc]];
            let mut shift = 0.0;
            let mut attempt = 0;
            loop {
                let res = cg(
                    &mut |v, o| self.schur_apply(v, o, shift, &mut scratch),
                    &mut |v, o| {
                        for ((oi, vi), di) in o.iter_mut().zip(v).zip(&diag) {
                            *oi = vi / di;
                        }
                    },
                    &rhs,
                    &mut lam,
                    SCHUR_TOL,
                    20 * na + 200,
                );
                match res {
                    Ok(_) => break,
                    Err(e) if attempt == 0 => {
                        warn!("Schur complement on {na} active rows is singular ({e}); applying Tikhonov shift");
                        shift = TIKHONOV;
                        attempt += 1;
                        lam.iter_mut().for_each(|v| *v = 0.0);
                    }
                    Err(e) => {
                        // accept the best iterate if it still meets the target accuracy
                        let mut o = vec![0.0; na];
                        self.schur_apply(&lam, &mut o, shift, &mut scratch);
                        let res: f64 = o.iter().zip(&rhs).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                        let bn = dot(&rhs, &rhs).sqrt().max(f64::MIN_POSITIVE);
                        if res <= 1e-10 * bn {
                            break;
                        }
                        return Err(e);
                    }
                }
            }
        }
        let mut bt = vec![0.0; n * nc];
        self.b_transpose(&lam, &mut bt);
        let rhs_phi: Vec<f64> = r_phi.iter().zip(&bt).map(|(a, b)| a - b).collect();
        let mut phi = vec![0.0; n * nc];
        self.c_inverse(&rhs_phi, &mut phi);

        // u = u0 - J^T v
        let mut mu = mu0.clone();
        let mut jt_mu = vec![0.0; n * nc];
        self.b_transpose(&lam, &mut jt_mu);
        for (i, v) in mu.as_mut_slice().iter_mut().enumerate() {
            *v -= phi[i] + jt_mu[i];
        }
        let mut m = m0.clone();
        let mut adj = vec![0.0; nf];
        for a in 0..n {
            grid.divergence_adjoint_into(&phi[a * nc..(a + 1) * nc], &mut adj);
            for (x, d) in m.species_mut(a).iter_mut().zip(&adj) {
                *x -= d;
            }
            grid.clamp_boundary(m.species_mut(a));
        }
        let mut lambda_full = vec![0.0; self.bx.rows() * nc];
        for (k, &(b, c, _)) in self.active.iter().enumerate() {
            lambda_full[b * nc + c] = lam[k];
        }
        Ok((mu, m, phi, lambda_full))
    }
}

/// Convenience wrapper around [`SaddleSystem`].
pub fn solve_saddle_system(
    mu0: &SpeciesField,
    m0: &MomentumField,
    cont_rhs: &SpeciesField,
    bx: &BoxConstraint,
    lower: &[bool],
    upper: &[bool],
) -> Result<(SpeciesField, MomentumField, Vec<f64>, Vec<f64>)> {
    mu0.check_compatible(cont_rhs)?;
    let sys = SaddleSystem::new(*mu0.grid(), mu0.species_count(), bx, lower, upper);
    sys.solve(mu0, m0, cont_rhs, None)
}

/// Exact Euclidean projection onto the polyhedron `lo <= M x <= hi` in one
/// cell, found by testing the KKT conditions of every admissible pattern of
/// active rows (the empty pattern first).
#[derive(Debug, Clone)]
pub struct CellProjector {
    n: usize,
    rows: Vec<Vec<f64>>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    patterns: Vec<Pattern>,
}

#[derive(Debug, Clone)]
struct Pattern {
    /// `(row, is_upper)` pairs.
    active: Vec<(usize, bool)>,
    gram_inv: Mat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum RowState {
    Free,
    Lower,
    Upper,
}

impl CellProjector {
    pub fn new(bx: &BoxConstraint, n: usize) -> Self {
        let p = bx.rows();
        let candidates: Vec<(usize, bool)> = (0..p)
            .flat_map(|b| {
                let mut v = Vec::new();
                if bx.lo[b].is_finite() {
                    v.push((b, false));
                }
                if bx.hi[b].is_finite() && bx.hi[b] != bx.lo[b] {
                    v.push((b, true));
                }
                v
            })
            .collect();
        let mut patterns = vec![Pattern {
            active: Vec::new(),
            gram_inv: Mat::zeros(0, 0),
        }];
        // subsets of size 1..=n with at most one bound per row
        let mut frontier: Vec<Vec<usize>> = vec![Vec::new()];
        for _ in 0..n.min(p) {
            let mut next = Vec::new();
            for set in &frontier {
                let start = set.last().map_or(0, |&l| l + 1);
                for k in start..candidates.len() {
                    if set.iter().any(|&j| candidates[j].0 == candidates[k].0) {
                        continue;
                    }
                    let mut s = set.clone();
                    s.push(k);
                    let active: Vec<(usize, bool)> = s.iter().map(|&j| candidates[j]).collect();
                    let a = Mat::from_fn(active.len(), n, |i, j| bx.coupling[active[i].0][j]);
                    if let Some(gram_inv) = invert(&a.gram()) {
                        patterns.push(Pattern { active, gram_inv });
                        next.push(s);
                    }
                }
            }
            frontier = next;
        }
        Self {
            n,
            rows: bx.coupling.clone(),
            lo: bx.lo.clone(),
            hi: bx.hi.clone(),
            patterns,
        }
    }

    fn row_dot(&self, b: usize, x: &[f64]) -> f64 {
        self.rows[b].iter().zip(x).map(|(a, v)| a * v).sum()
    }

    /// Projects `x` in place and writes the multipliers and row states.
    fn project(&self, x: &mut [f64], lambda: &mut [f64], state: &mut [RowState]) {
        let p = self.rows.len();
        if (0..p).all(|b| {
            let v = self.row_dot(b, x);
            v >= self.lo[b] && v <= self.hi[b]
        }) {
            lambda.iter_mut().for_each(|l| *l = 0.0);
            state.iter_mut().for_each(|s| *s = RowState::Free);
            return;
        }
        let scale = x.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let feas_tol = 1e-14 * scale;
        let mut best: Option<(f64, Vec<f64>, &Pattern, Vec<f64>)> = None;
        let mut y = vec![0.0; self.n];
        for pat in &self.patterns {
            let resid: Vec<f64> = pat
                .active
                .iter()
                .map(|&(b, up)| self.row_dot(b, x) - if up { self.hi[b] } else { self.lo[b] })
                .collect();
            let lam = pat.gram_inv.matvec(&resid);
            y.copy_from_slice(x);
            for (i, &(b, _)) in pat.active.iter().enumerate() {
                for (yj, a) in y.iter_mut().zip(&self.rows[b]) {
                    *yj -= a * lam[i];
                }
            }
            let mut bad: f64 = 0.0;
            for (i, &(_, up)) in pat.active.iter().enumerate() {
                bad = bad.max(if up { -lam[i] } else { lam[i] });
            }
            for b in 0..p {
                if pat.active.iter().any(|&(r, _)| r == b) {
                    continue;
                }
                let v = self.row_dot(b, &y);
                bad = bad.max(self.lo[b] - v).max(v - self.hi[b]);
            }
            if bad <= feas_tol {
                best = Some((bad, y.clone(), pat, lam));
                break;
            }
            if best.as_ref().is_none_or(|(b0, ..)| bad < *b0) {
                best = Some((bad, y.clone(), pat, lam));
            }
        }
        let (_, y, pat, lam) = best.expect("the empty pattern always exists");
        x.copy_from_slice(&y);
        lambda.iter_mut().for_each(|l| *l = 0.0);
        state.iter_mut().for_each(|s| *s = RowState::Free);
        for (i, &(b, up)) in pat.active.iter().enumerate() {
            lambda[b] = lam[i];
            state[b] = if up { RowState::Upper } else { RowState::Lower };
        }
    }
}

fn invert(a: &Mat) -> Option<Mat> {
    let n = a.rows();
    let mut inv = Mat::zeros(n, n);
    for j in 0..n {
        let mut e = vec![0.0; n];
        e[j] = 1.0;
        let col = lu_solve(a, &e).ok()?;
        for i in 0..n {
            inv[(i, j)] = col[i];
        }
    }
    // reject nearly dependent rows
    let cond = a.max_abs() * inv.max_abs();
    (cond.is_finite() && cond < 1e10).then_some(inv)
}

/// Cellwise box projection of `mu` plus the resulting multipliers and
/// active sets (row-major over cells).
fn project_box(
    proj: &CellProjector,
    mu: &mut SpeciesField,
    lambda: &mut [f64],
    lower: &mut [bool],
    upper: &mut [bool],
) {
    let nc = mu.num_cells();
    let n = mu.species_count();
    let p = proj.rows.len();
    if p == 0 {
        return;
    }
    let data = mu.as_mut_slice();
    let mut x = vec![0.0; n];
    let mut lam = vec![0.0; p];
    let mut st = vec![RowState::Free; p];
    for c in 0..nc {
        for a in 0..n {
            x[a] = data[a * nc + c];
        }
        proj.project(&mut x, &mut lam, &mut st);
        for a in 0..n {
            data[a * nc + c] = x[a];
        }
        for b in 0..p {
            lambda[b * nc + c] = lam[b];
            lower[b * nc + c] = st[b] == RowState::Lower;
            upper[b * nc + c] = st[b] == RowState::Upper;
        }
    }
}

/// Primal point, multipliers and dual objective for continuity multipliers
/// `phi`: `mu = P_box(mu0 - phi)`, `m = m0 - A^T phi`.
struct DualEval {
    mu: SpeciesField,
    m: MomentumField,
    state: ActiveSetState,
    /// Continuity residual `mu + A m - mu_k`, the gradient of the dual.
    grad: Vec<f64>,
    value: f64,
}

fn eval_dual(
    phi: &[f64],
    mu0: &SpeciesField,
    m0: &MomentumField,
    mu_k: &SpeciesField,
    proj: &CellProjector,
) -> DualEval {
    let grid = *mu0.grid();
    let n = mu0.species_count();
    let nc = grid.num_cells();
    let p = proj.rows.len();
    let mut mu = mu0.clone();
    for (v, f) in mu.as_mut_slice().iter_mut().zip(phi) {
        *v -= f;
    }
    let mut state = ActiveSetState::cold(n, p, nc);
    state.phi.copy_from_slice(phi);
    project_box(proj, &mut mu, &mut state.lambda, &mut state.lower, &mut state.upper);
    let mut m = m0.clone();
    let mut adj = vec![0.0; grid.num_faces()];
    let mut div = vec![0.0; nc];
    let mut grad = vec![0.0; n * nc];
    for a in 0..n {
        grid.divergence_adjoint_into(&phi[a * nc..(a + 1) * nc], &mut adj);
        let ma = m.species_mut(a);
        for (x, d) in ma.iter_mut().zip(&adj) {
            *x -= d;
        }
        grid.clamp_boundary(ma);
        grid.divergence_into(m.species(a), &mut div);
        for c in 0..nc {
            grad[a * nc + c] = mu.species(a)[c] + div[c] - mu_k.species(a)[c];
        }
    }
    let dist: f64 = mu
        .as_slice()
        .iter()
        .zip(mu0.as_slice())
        .chain(m.as_slice().iter().zip(m0.as_slice()))
        .map(|(a, b)| 0.5 * (a - b) * (a - b))
        .sum();
    let value = dist + dot(phi, &grad);
    DualEval {
        mu,
        m,
        state,
        grad,
        value,
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Projects `(mu0, m0)` onto the admissible set attached to the previous
/// densities `mu_k`. `warm` supplies multipliers of an earlier projection.
///
/// The continuity multipliers are found by maximizing the concave dual
/// function. Each step solves the saddle system for the current active sets,
/// which is the exact maximizer of the dual on the current polyhedral piece,
/// and a backtracking line search guards against active sets that are
/// inconsistent with the conserved mass.
pub fn prox_admissible(
    mu0: &SpeciesField,
    m0: &MomentumField,
    mu_k: &SpeciesField,
    bx: &BoxConstraint,
    warm: Option<&ActiveSetState>,
) -> Result<ProxOutput> {
    AdmissibleSet::new(*mu0.grid(), mu0.species_count(), bx.clone())?.project(mu0, m0, mu_k, warm)
}

/// Reusable projector onto the admissible set of a fixed grid and box.
#[derive(Debug, Clone)]
pub struct AdmissibleSet {
    grid: Grid,
    n: usize,
    bx: BoxConstraint,
    proj: CellProjector,
    cont: ShiftedLaplacian,
}

impl AdmissibleSet {
    pub fn new(grid: Grid, n: usize, bx: BoxConstraint) -> Result<Self> {
        if bx.rows() > 0 && bx.coupling[0].len() != n {
            return Err(Error::Shape(format!(
                "box couples {} species, state has {n}",
                bx.coupling[0].len()
            )));
        }
        bx.validate()?;
        Ok(Self {
            grid,
            n,
            proj: CellProjector::new(&bx, n),
            cont: ShiftedLaplacian::new(grid, 1.0, 1.0),
            bx,
        })
    }

    pub fn box_constraint(&self) -> &BoxConstraint {
        &self.bx
    }

    /// Projection of `(mu0, m0)`; see [`prox_admissible`].
    pub fn project(
        &self,
        mu0: &SpeciesField,
        m0: &MomentumField,
        mu_k: &SpeciesField,
        warm: Option<&ActiveSetState>,
    ) -> Result<ProxOutput> {
        mu0.check_compatible(mu_k)?;
        let (grid, n, bx) = (self.grid, self.n, &self.bx);
        let nc = grid.num_cells();
        if mu0.grid() != &grid || m0.grid() != &grid || m0.species_count() != n || mu0.species_count() != n {
            return Err(Error::GeometryMismatch);
        }
        bx.check_mass(&mu_k.totals(), nc)?;
        let p = bx.rows();
        let scale = max_abs(mu_k.as_slice()).max(max_abs(mu0.as_slice())).max(1.0);
        let tol = 1e-13 * scale;

        // the first Newton step starts from the warm (or empty) active sets and
        // is accepted without a line search; it only fixes the starting point
        let (lower, upper, lam) = match warm {
            Some(w) if w.lower.len() == p * nc => (w.lower.clone(), w.upper.clone(), Some(&w.lambda)),
            _ => (vec![false; p * nc], vec![false; p * nc], None),
        };
        let first = self.newton_phi(mu0, m0, mu_k, &lower, &upper, lam);
        let phi0 = match (first, warm) {
            (Ok(phi), _) => phi,
            (Err(_), Some(w)) if w.phi.len() == n * nc => w.phi.clone(),
            (Err(_), _) => vec![0.0; n * nc],
        };
        let mut cur = eval_dual(&phi0, mu0, m0, mu_k, &self.proj);
        let mut prev_sets = Some((lower, upper));
        for outer in 1..=MAX_OUTER {
            let res = max_abs(&cur.grad);
            let same_sets = prev_sets
                .as_ref()
                .is_some_and(|(l, u)| *l == cur.state.lower && *u == cur.state.upper);
            if res <= tol || (same_sets && res <= 1e-11 * scale) {
                return Ok(finish(cur, mu_k, bx, outer));
            }
            // Newton step on the current piece. When its saddle system is
            // singular (typically every cell sits on a bound and the mass does
            // not match) the dual has no maximizer on this piece; a regularized
            // step with an exact line search carries the multipliers across the
            // next breakpoint instead.
            let newton = self.newton_phi(
                mu0,
                m0,
                mu_k,
                &cur.state.lower,
                &cur.state.upper,
                Some(&cur.state.lambda),
            );
            let accepted = match newton {
                Ok(phi_new) => {
                    let dir: Vec<f64> = phi_new.iter().zip(&cur.state.phi).map(|(a, b)| a - b).collect();
                    let slope = dot(&cur.grad, &dir);
                    let mut t = 1.0;
                    let mut accepted = None;
                    for _ in 0..60 {
                        let trial: Vec<f64> = cur.state.phi.iter().zip(&dir).map(|(a, d)| a + t * d).collect();
                        let next = eval_dual(&trial, mu0, m0, mu_k, &self.proj);
                        let slack = 1e-14 * cur.value.abs().max(1.0);
                        let armijo = next.value >= cur.value + 1e-4 * t * slope - slack;
                        if armijo {
                            accepted = Some(next);
                            break;
                        }
                        t *= 0.5;
                    }
                    accepted
                }
                Err(_) => {
                    let dir = self.regularized_direction(&cur);
                    self.exact_search(&cur, &dir, mu0, m0, mu_k)
                }
            };
            let Some(next) = accepted else {
                if res <= 1e-11 * scale {
                    return Ok(finish(cur, mu_k, bx, outer));
                }
                return Err(Error::ActiveSetCycling {
                    iterations: outer,
                    complementarity: 0.0,
                    continuity: res,
                });
            };
            prev_sets = Some((cur.state.lower.clone(), cur.state.upper.clone()));
            cur = next;
        }
        let res = max_abs(&cur.grad);
        if res <= 1e-11 * scale {
            return Ok(finish(cur, mu_k, bx, MAX_OUTER));
        }
        warn!("admissible projection stopped after {MAX_OUTER} passes with continuity residual {res:.3e}");
        Err(Error::ActiveSetCycling {
            iterations: MAX_OUTER,
            complementarity: complementary_residual(&cur.mu, &cur.state.lambda, bx)
                .into_iter()
                .fold(0.0, f64::max),
            continuity: res,
        })
    }

    /// Solves `(J + A A^T + delta I) d = grad` by conjugate gradients, where
    /// `J` is the derivative of the cellwise box projection on the current
    /// active sets. Falls back to the preconditioned gradient when CG does
    /// not give an ascent direction.
    fn regularized_direction(&self, cur: &DualEval) -> Vec<f64> {
        let (grid, n) = (self.grid, self.n);
        let nc = grid.num_cells();
        let p = self.bx.rows();
        // per cell: active coupling rows and the inverse of their Gram matrix
        let cells: Vec<Option<(Mat, Mat)>> = (0..nc)
            .map(|c| {
                let rows: Vec<usize> = (0..p)
                    .filter(|&b| cur.state.lower[b * nc + c] || cur.state.upper[b * nc + c])
                    .collect();
                if rows.is_empty() {
                    return None;
                }
                let m = Mat::from_fn(rows.len(), n, |i, a| self.bx.coupling[rows[i]][a]);
                invert(&m.gram()).map(|g| (m, g))
            })
            .collect();
        let delta = 1e-8;
        let mut adj = vec![0.0; grid.num_faces()];
        let mut div = vec![0.0; nc];
        let mut apply = |v: &[f64], out: &mut [f64]| {
            for a in 0..n {
                grid.divergence_adjoint_into(&v[a * nc..(a + 1) * nc], &mut adj);
                grid.clamp_boundary(&mut adj);
                grid.divergence_into(&adj, &mut div);
                for c in 0..nc {
                    out[a * nc + c] = div[c] + delta * v[a * nc + c];
                }
            }
            let mut x = vec![0.0; n];
            for c in 0..nc {
                for a in 0..n {
                    x[a] = v[a * nc + c];
                }
                let px = match &cells[c] {
                    None => x.clone(),
                    Some((m, g)) => {
                        let w = g.matvec(&m.matvec(&x));
                        let back = m.transpose().matvec(&w);
                        x.iter().zip(&back).map(|(a, b)| a - b).collect()
                    }
                };
                for a in 0..n {
                    out[a * nc + c] += px[a];
                }
            }
        };
        let mut precond = |r: &[f64], z: &mut [f64]| {
            for a in 0..n {
                self.cont.solve(&r[a * nc..(a + 1) * nc], &mut z[a * nc..(a + 1) * nc]);
            }
        };
        let mut d = vec![0.0; n * nc];
        // the system is nearly singular on purpose, so CG rarely meets the
        // tolerance; any ascent direction it produces serves the line search
        let _ = cg(&mut apply, &mut precond, &cur.grad, &mut d, 1e-10, 10 * n * nc + 100);
        if !(d.iter().all(|v| v.is_finite()) && dot(&d, &cur.grad) > 0.0) {
            precond(&cur.grad, &mut d);
        }
        d
    }

    /// Maximizes the concave dual along `dir` by bisection on the directional
    /// derivative, which is nonincreasing in the step length.
    fn exact_search(
        &self,
        cur: &DualEval,
        dir: &[f64],
        mu0: &SpeciesField,
        m0: &MomentumField,
        mu_k: &SpeciesField,
    ) -> Option<DualEval> {
        let at = |t: f64| {
            let trial: Vec<f64> = cur.state.phi.iter().zip(dir).map(|(a, d)| a + t * d).collect();
            eval_dual(&trial, mu0, m0, mu_k, &self.proj)
        };
        if dot(&cur.grad, dir) <= 0.0 {
            return None;
        }
        let (mut lo, mut hi) = (0.0, 1.0);
        let mut upper = at(hi);
        let mut expansions = 0;
        while dot(&upper.grad, dir) > 0.0 {
            expansions += 1;
            if expansions > 200 {
                return None;
            }
            lo = hi;
            hi *= 2.0;
            upper = at(hi);
        }
        let mut lower = None;
        for _ in 0..200 {
            if hi - lo <= 1e-14 * hi {
                break;
            }
            let mid = 0.5 * (lo + hi);
            let e = at(mid);
            if dot(&e.grad, dir) > 0.0 {
                lo = mid;
                lower = Some(e);
            } else {
                hi = mid;
                upper = e;
            }
        }
        let slack = 1e-14 * cur.value.abs().max(1.0);
        if upper.value >= cur.value - slack {
            Some(upper)
        } else {
            lower.filter(|e| e.value >= cur.value - slack)
        }
    }

    /// Continuity multipliers of the equality constrained projection with
    /// the given active sets.
    fn newton_phi(
        &self,
        mu0: &SpeciesField,
        m0: &MomentumField,
        mu_k: &SpeciesField,
        lower: &[bool],
        upper: &[bool],
        lambda: Option<&Vec<f64>>,
    ) -> Result<Vec<f64>> {
        let nc = self.grid.num_cells();
        let sys = SaddleSystem::with_solver(self.grid, self.n, &self.bx, lower, upper, &self.cont);
        let guess: Option<Vec<f64>> =
            lambda.map(|l| sys.active.iter().map(|&(b, c, _)| l[b * nc + c]).collect());
        let (_, _, phi, _) = sys.solve(mu0, m0, mu_k, guess.as_deref())?;
        Ok(phi)
    }
}

fn finish(cur: DualEval, mu_k: &SpeciesField, bx: &BoxConstraint, outer: usize) -> ProxOutput {
    let continuity_residual = continuity_residual(&cur.mu, &cur.m, mu_k);
    let box_violation = bx.violation(&cur.mu).max(0.0);
    let complementarity = complementary_residual(&cur.mu, &cur.state.lambda, bx)
        .into_iter()
        .fold(0.0, f64::max);
    ProxOutput {
        mu: cur.mu,
        m: cur.m,
        state: cur.state,
        outer_iterations: outer,
        continuity_residual,
        box_violation,
        complementarity,
    }
}
