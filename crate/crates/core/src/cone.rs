//! Per-cell matrix kernels for the transport action and its dual cone.
//!
//! The action of a pair `(M, m)` with `M` symmetric `n x n` and `m` of size
//! `n x d` is `f(M, m) = 1/2 m : M^+ m` when `M` is positive semidefinite and
//! every row of `m` expressed in the eigenbasis of `M` vanishes on its kernel;
//! it is `+inf` otherwise. It is the support function of the closed convex set
//!
//! ```text
//! K = { (Q, q) : Q + q q^T / 2 <= 0 }   (Loewner order)
//! ```
//!
//! and the kernels below project onto `K` either by a semismooth Newton method
//! on the reduced objective `F1(q) = 1/2 |q - q0|^2 + 1/2 |Y_+(q)|^2`,
//! `Y(q) = Q0 + q q^T / 2`, or by the multiplier iteration on `Z >= 0`.

use smallvec::SmallVec;

use crate::cone_fast;
use crate::dense::{lu_solve, Mat, SymMat};
use crate::error::{Error, Result};

const JACOBI_SWEEPS: usize = 30;

/// Spectral decomposition `S = U diag(values) U^T` with eigenvalues in
/// descending order and eigenvectors stored as the columns of `vectors`.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenDecomp {
    pub values: SmallVec<[f64; 4]>,
    pub vectors: Mat,
}

impl EigenDecomp {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Column `alpha` of `U`.
    pub fn vector(&self, alpha: usize) -> SmallVec<[f64; 4]> {
        (0..self.dim()).map(|i| self.vectors[(i, alpha)]).collect()
    }

    /// `U diag(f(values)) U^T`.
    pub fn compose(&self, f: impl Fn(f64) -> f64) -> SymMat {
        let n = self.dim();
        let w: SmallVec<[f64; 4]> = self.values.iter().map(|&l| f(l)).collect();
        let mut out = Mat::zeros(n, n);
        for (a, &wa) in w.iter().enumerate() {
            if wa == 0.0 {
                continue;
            }
            for i in 0..n {
                let ui = self.vectors[(i, a)] * wa;
                for j in 0..n {
                    out[(i, j)] += ui * self.vectors[(j, a)];
                }
            }
        }
        SymMat::new(out)
    }

    pub fn max_value(&self) -> f64 {
        self.values.first().copied().unwrap_or(0.0)
    }

    pub fn min_value(&self) -> f64 {
        self.values.last().copied().unwrap_or(0.0)
    }
}

/// Symmetric eigendecomposition. Closed form for `n <= 2`, cyclic Jacobi
/// rotations otherwise. The first component of each eigenvector whose
/// magnitude exceeds `1e-14` is made positive.
pub fn eig_sym(s: &SymMat) -> Result<EigenDecomp> {
    let n = s.dim();
    let mut dec = match n {
        0 => EigenDecomp {
            values: SmallVec::new(),
            vectors: Mat::zeros(0, 0),
        },
        1 => EigenDecomp {
            values: SmallVec::from_slice(&[s[(0, 0)]]),
            vectors: Mat::identity(1),
        },
        2 => eig2(s[(0, 0)], s[(0, 1)], s[(1, 1)]),
        _ => jacobi(s)?,
    };
    for a in 0..n {
        let first = (0..n)
            .map(|i| dec.vectors[(i, a)])
            .find(|v| v.abs() > 1e-14)
            .unwrap_or(1.0);
        if first < 0.0 {
            for i in 0..n {
                dec.vectors[(i, a)] = -dec.vectors[(i, a)];
            }
        }
    }
    Ok(dec)
}

fn eig2(a: f64, b: f64, c: f64) -> EigenDecomp {
    let mean = 0.5 * (a + c);
    let half = 0.5 * (a - c);
    let r = half.hypot(b);
    let theta = 0.5 * (2.0 * b).atan2(a - c);
    let (sn, cs) = theta.sin_cos();
    let mut vectors = Mat::zeros(2, 2);
    vectors[(0, 0)] = cs;
    vectors[(1, 0)] = sn;
    vectors[(0, 1)] = -sn;
    vectors[(1, 1)] = cs;
    EigenDecomp {
        values: SmallVec::from_slice(&[mean + r, mean - r]),
        vectors,
    }
}

fn jacobi(s: &SymMat) -> Result<EigenDecomp> {
    let n = s.dim();
    let mut a = s.as_mat().clone();
    let mut v = Mat::identity(n);
    let target = (1e-15 * s.frob_norm()).powi(2);
    let off = |a: &Mat| {
        let mut acc = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                acc += a[(p, q)] * a[(p, q)];
            }
        }
        acc
    };
    let mut converged = false;
    for _ in 0..JACOBI_SWEEPS {
        let o = off(&a);
        if o <= target || o == 0.0 {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let sign = if theta >= 0.0 { 1.0 } else { -1.0 };
                let t = sign / (theta.abs() + theta.hypot(1.0));
                let c = 1.0 / t.hypot(1.0);
                let sn = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[(k, p)], a[(k, q)]);
                    a[(k, p)] = c * akp - sn * akq;
                    a[(k, q)] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[(p, k)], a[(q, k)]);
                    a[(p, k)] = c * apk - sn * aqk;
                    a[(q, k)] = sn * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[(k, p)], v[(k, q)]);
                    v[(k, p)] = c * vkp - sn * vkq;
                    v[(k, q)] = sn * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        let o = off(&a);
        if o > target.max(f64::MIN_POSITIVE) * 1e4 {
            return Err(Error::EigenNoConvergence {
                sweeps: JACOBI_SWEEPS,
            });
        }
    }
    let mut order: SmallVec<[usize; 4]> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let vectors = Mat::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok(EigenDecomp { values, vectors })
}

/// Projection onto the positive semidefinite cone.
pub fn proj_psd(s: &SymMat) -> Result<SymMat> {
    Ok(eig_sym(s)?.compose(|l| l.max(0.0)))
}

/// Directional derivative of the PSD projection at `Y` along `Z`.
pub fn dproj_psd(y: &SymMat, z: &SymMat) -> Result<SymMat> {
    Ok(dproj_psd_eig(&eig_sym(y)?, z))
}

/// [`dproj_psd`] with a precomputed decomposition of `Y`.
///
/// The divided-difference weight is `1` when both eigenvalues are positive,
/// `0` when neither is, and the quotient `(l_a+ - l_b+) / (l_a - l_b)`
/// otherwise (the two eigenvalues are then distinct).
pub fn dproj_psd_eig(eig: &EigenDecomp, z: &SymMat) -> SymMat {
    let n = eig.dim();
    let u = &eig.vectors;
    // W = U^T Z U
    let w = u.transpose().matmul(z.as_mat()).matmul(u);
    let mut h = Mat::zeros(n, n);
    for a in 0..n {
        for b in 0..n {
            let (la, lb) = (eig.values[a], eig.values[b]);
            let weight = match (la > 0.0, lb > 0.0) {
                (true, true) => 1.0,
                (false, false) => 0.0,
                _ => (la.max(0.0) - lb.max(0.0)) / (la - lb),
            };
            h[(a, b)] = weight * w[(a, b)];
        }
    }
    SymMat::new(u.matmul(&h).matmul(&u.transpose()))
}

/// Admissibility thresholds used by [`action_value`].
pub fn eig_tolerance(m: &SymMat) -> f64 {
    1e-12 * m.max_abs().max(1.0)
}

pub const KERNEL_TOLERANCE: f64 = 1e-10;

/// Row `alpha` of `U^T m`, i.e. the coefficients of `m` along eigenvector `alpha`.
fn coefficients(eig: &EigenDecomp, m: &Mat, alpha: usize) -> SmallVec<[f64; 4]> {
    let n = eig.dim();
    (0..m.cols())
        .map(|k| (0..n).map(|i| eig.vectors[(i, alpha)] * m[(i, k)]).sum())
        .collect()
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// The action `f(M, m)`; returns `f64::INFINITY` for inadmissible pairs.
pub fn action_value(m_mat: &SymMat, m: &Mat) -> f64 {
    let Ok(eig) = eig_sym(m_mat) else {
        return f64::INFINITY;
    };
    let tol = eig_tolerance(m_mat);
    if eig.min_value() < -tol {
        return f64::INFINITY;
    }
    let mut total = 0.0;
    for a in 0..eig.dim() {
        let c = coefficients(&eig, m, a);
        let l = eig.values[a];
        if l <= tol {
            if c.iter().any(|x| x.abs() > KERNEL_TOLERANCE) {
                return f64::INFINITY;
            }
        } else {
            total += 0.5 * norm2(&c) / l;
        }
    }
    total
}

/// A point of the dual set together with its rectangular part.
#[derive(Debug, Clone, PartialEq)]
pub struct DualPair {
    pub cap_q: SymMat,
    pub q: Mat,
}

impl DualPair {
    pub fn new(cap_q: SymMat, q: Mat) -> Self {
        Self { cap_q, q }
    }

    pub fn zeros(n: usize, d: usize) -> Self {
        Self {
            cap_q: SymMat::zeros(n),
            q: Mat::zeros(n, d),
        }
    }

    /// `Q + q q^T / 2`.
    pub fn constraint_matrix(&self) -> SymMat {
        self.cap_q.add(&SymMat::new(self.q.gram().scale(0.5)))
    }

    /// Largest eigenvalue of `Q + q q^T / 2`, clipped below at zero.
    pub fn violation(&self) -> Result<f64> {
        Ok(eig_sym(&self.constraint_matrix())?.max_value().max(0.0))
    }

    /// `M : Q + m : q`.
    pub fn pairing(&self, m_mat: &SymMat, m: &Mat) -> f64 {
        m_mat.frob_dot(&self.cap_q) + m.frob_dot(&self.q)
    }

    pub fn distance(&self, other: &DualPair) -> f64 {
        let dq = self.cap_q.sub(&other.cap_q).frob_norm();
        let dr = self.q.sub(&other.q).frob_norm();
        dq.hypot(dr)
    }
}

/// Maximizer of `M : Q + m : q` over `K` for an admissible pair:
/// `q* = M^+ m` and `Q* = -q* q*^T / 2`.
pub fn support_recovery_pair(m_mat: &SymMat, m: &Mat) -> Result<DualPair> {
    if !action_value(m_mat, m).is_finite() {
        return Err(Error::Inadmissible(
            "mobility is indefinite or the momentum has a kernel component".into(),
        ));
    }
    let eig = eig_sym(m_mat)?;
    let tol = eig_tolerance(m_mat);
    let (n, d) = (m.rows(), m.cols());
    let mut q = Mat::zeros(n, d);
    for a in 0..n {
        let l = eig.values[a];
        if l <= tol {
            continue;
        }
        let c = coefficients(&eig, m, a);
        for i in 0..n {
            let ui = eig.vectors[(i, a)] / l;
            for k in 0..d {
                q[(i, k)] += ui * c[k];
            }
        }
    }
    let cap_q = SymMat::new(q.gram().scale(-0.5));
    Ok(DualPair { cap_q, q })
}

/// Member of the dual set whose pairing with an inadmissible `(M, m)` grows
/// linearly in `scale`. Returns `None` when the pair is admissible.
///
/// A negative eigenvalue `l` with eigenvector `u` gives `Q = -scale u u^T`,
/// `q = 0` with pairing `-scale * l`. A momentum coefficient `c` on a kernel
/// direction `u` gives `q = scale u c^T`, `Q = -scale^2 |c|^2 u u^T / 2` with
/// pairing `scale |c|^2` (up to the tiny eigenvalue).
pub fn unboundedness_witness(m_mat: &SymMat, m: &Mat, scale: f64) -> Result<Option<DualPair>> {
    let eig = eig_sym(m_mat)?;
    let tol = eig_tolerance(m_mat);
    let (n, d) = (m.rows(), m.cols());
    let outer = |a: usize, w: f64| {
        let mut out = Mat::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                out[(i, j)] = w * eig.vectors[(i, a)] * eig.vectors[(j, a)];
            }
        }
        SymMat::new(out)
    };
    if eig.min_value() < -tol {
        let a = n - 1;
        return Ok(Some(DualPair {
            cap_q: outer(a, -scale),
            q: Mat::zeros(n, d),
        }));
    }
    for a in 0..n {
        if eig.values[a] > tol {
            continue;
        }
        let c = coefficients(&eig, m, a);
        if c.iter().all(|x| x.abs() <= KERNEL_TOLERANCE) {
            continue;
        }
        let q = Mat::from_fn(n, d, |i, k| scale * eig.vectors[(i, a)] * c[k]);
        let cap_q = outer(a, -0.5 * scale * scale * norm2(&c));
        return Ok(Some(DualPair { cap_q, q }));
    }
    Ok(None)
}

/// Which algorithm produced a projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProjectionMethod {
    Newton,
    Admm,
}

/// Convergence summary of a single projection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionReport {
    pub method: ProjectionMethod,
    pub iterations: usize,
    /// Newton: `|grad F1|`. Multiplier iteration: cone violation.
    pub residual: f64,
    /// Multiplier iteration only: first iterate whose violation met the tolerance.
    pub first_feasible: Option<usize>,
    /// Newton handed over to the multiplier iteration.
    pub fell_back: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub max_halvings: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            max_iter: 50,
            max_halvings: 30,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdmmOptions {
    pub gamma: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for AdmmOptions {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            tol: 1e-12,
            max_iter: 2000,
        }
    }
}

struct Reduced {
    f: f64,
    grad: Mat,
    eig: EigenDecomp,
}

fn reduced(q0m: &SymMat, q0: &Mat, q: &Mat) -> Result<Reduced> {
    let y = q0m.add(&SymMat::new(q.gram().scale(0.5)));
    let eig = eig_sym(&y)?;
    let yp = eig.compose(|l| l.max(0.0));
    let dq = q.sub(q0);
    let f = 0.5 * dq.frob_dot(&dq) + 0.5 * yp.frob_dot(&yp);
    let grad = dq.add(&yp.as_mat().matmul(q));
    Ok(Reduced { f, grad, eig })
}

/// Semismooth Newton step `-H^{-1} grad` for the reduced objective. The
/// generalized Hessian `xi -> xi + Y_+ xi + D proj(Y)[sym(xi q^T)] q` is
/// assembled in the eigenbasis of `Y`, where the projection derivative acts
/// entrywise through the divided differences `W`.
fn newton_step(red: &Reduced, q: &Mat) -> Option<Mat> {
    let (n, d) = (q.rows(), q.cols());
    let nd = n * d;
    let u = &red.eig.vectors;
    let lam = &red.eig.values;
    let w = |a: usize, b: usize| {
        let (la, lb) = (lam[a], lam[b]);
        match (la > 0.0, lb > 0.0) {
            (true, true) => 1.0,
            (false, false) => 0.0,
            _ => (la.max(0.0) - lb.max(0.0)) / (la - lb),
        }
    };
    // rotated q and gradient
    let ut = u.transpose();
    let qt = ut.matmul(q);
    let gt = ut.matmul(&red.grad);
    let mut h = Mat::zeros(nd, nd);
    for b in 0..n {
        for j in 0..d {
            let row = b * d + j;
            for a in 0..n {
                let wab = w(a, b);
                for k in 0..d {
                    let col = a * d + k;
                    let mut v = 0.5 * wab * qt[(b, k)] * qt[(a, j)];
                    if a == b {
                        if j == k {
                            v += 1.0 + lam[a].max(0.0);
                        }
                        v += 0.5 * (0..n).map(|c| w(a, c) * qt[(c, k)] * qt[(c, j)]).sum::<f64>();
                    }
                    h[(row, col)] = v;
                }
            }
        }
    }
    let rhs: Vec<f64> = gt.as_slice().iter().map(|g| -g).collect();
    let st = lu_solve(&h, &rhs).ok()?;
    Some(u.matmul(&Mat::from_row_slice(n, d, &st)))
}

fn recover(red: &Reduced, q: &Mat) -> DualPair {
    let ym = red.eig.compose(|l| l.min(0.0));
    DualPair {
        cap_q: ym.sub(&SymMat::new(q.gram().scale(0.5))),
        q: q.clone(),
    }
}

/// Euclidean projection of `(Q0, q0)` onto the dual set by semismooth Newton
/// on the reduced objective, with a backtracking line search. After
/// `max_iter` iterations without convergence the multiplier iteration takes
/// over from scratch.
pub fn proj_k_newton(
    q0m: &SymMat,
    q0: &Mat,
    opts: NewtonOptions,
) -> Result<(DualPair, ProjectionReport)> {
    proj_k_newton_from(q0m, q0, None, opts)
}

/// [`proj_k_newton`] started from `start` (for instance the projection of a
/// nearby point) instead of `q0`.
pub fn proj_k_newton_from(
    q0m: &SymMat,
    q0: &Mat,
    start: Option<&Mat>,
    opts: NewtonOptions,
) -> Result<(DualPair, ProjectionReport)> {
    check_shapes(q0m, q0)?;
    if q0m.dim() == 2 {
        if let Some(out) = match q0.cols() {
            1 => fast_two::<1>(q0m, q0, start, opts),
            2 => fast_two::<2>(q0m, q0, start, opts),
            _ => None,
        } {
            return Ok(out);
        }
    }
    let target = opts.tol * q0.frob_norm().max(1.0);
    let mut q = q0.clone();
    let mut red = reduced(q0m, q0, &q)?;
    if red.eig.max_value() <= 0.0 {
        return Ok((
            DualPair::new(q0m.clone(), q0.clone()),
            ProjectionReport {
                method: ProjectionMethod::Newton,
                iterations: 0,
                residual: 0.0,
                first_feasible: None,
                fell_back: false,
            },
        ));
    }
    if let Some(s) = start.filter(|s| s.rows() == q0.rows() && s.cols() == q0.cols()) {
        let r = reduced(q0m, q0, s)?;
        if r.f < red.f {
            q = s.clone();
            red = r;
        }
    }
    let mut gnorm = red.grad.frob_norm();
    for it in 1..=opts.max_iter {
        if gnorm <= target {
            return Ok((recover(&red, &q), newton_report(it - 1, gnorm)));
        }
        let step = newton_step(&red, &q).unwrap_or_else(|| red.grad.scale(-1.0));
        let slope = red.grad.frob_dot(&step);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let cand = q.add(&step.scale(t));
            let r = reduced(q0m, q0, &cand)?;
            let armijo = r.f <= red.f + 1e-4 * t * slope + 4.0 * f64::EPSILON * red.f.abs();
            let gn = r.grad.frob_norm();
            if armijo || gn < gnorm * (1.0 - 1e-4 * t) {
                accepted = Some((cand, r, gn));
                break;
            }
            t *= 0.5;
        }
        match accepted {
            Some((cand, r, gn)) => {
                q = cand;
                red = r;
                gnorm = gn;
            }
            None => break,
        }
    }
    if gnorm <= target {
        return Ok((recover(&red, &q), newton_report(opts.max_iter, gnorm)));
    }
    let fallback = AdmmOptions {
        gamma: safe_admm_step(q0),
        max_iter: 100_000,
        ..AdmmOptions::default()
    };
    let (pair, mut rep) = proj_k_admm(q0m, q0, fallback)?;
    rep.fell_back = true;
    Ok((pair, rep))
}

fn fast_two<const D: usize>(
    q0m: &SymMat,
    q0: &Mat,
    start: Option<&Mat>,
    opts: NewtonOptions,
) -> Option<(DualPair, ProjectionReport)> {
    let pack = |m: &Mat| -> [[f64; D]; 2] { std::array::from_fn(|i| std::array::from_fn(|k| m[(i, k)])) };
    let start = start.filter(|s| s.rows() == 2 && s.cols() == D).map(pack);
    let out = cone_fast::project::<D>(
        [q0m[(0, 0)], q0m[(0, 1)], q0m[(1, 1)]],
        pack(q0),
        start,
        opts.tol,
        opts.max_iter,
        opts.max_halvings,
    )?;
    let [a, b, c] = out.cap_q;
    let cap_q = SymMat::from_rows(&[&[a, b], &[b, c]]);
    let q = Mat::from_fn(2, D, |i, k| out.q[i][k]);
    Some((DualPair::new(cap_q, q), newton_report(out.iterations, out.residual)))
}

fn newton_report(iterations: usize, residual: f64) -> ProjectionReport {
    ProjectionReport {
        method: ProjectionMethod::Newton,
        iterations,
        residual,
        first_feasible: None,
        fell_back: false,
    }
}

fn check_shapes(q0m: &SymMat, q0: &Mat) -> Result<()> {
    if q0m.dim() != q0.rows() {
        return Err(Error::Shape(format!(
            "Q is {0}x{0} but q has {1} rows",
            q0m.dim(),
            q0.rows()
        )));
    }
    Ok(())
}

/// A multiplier step for which the iteration below contracts: the map
/// `Z -> Q + q q^T / 2` is Lipschitz with constant at most `1 + |q0|^2`.
pub fn safe_admm_step(q0: &Mat) -> f64 {
    1.0 / (1.0 + q0.frob_dot(q0))
}

/// Cone violation of the multiplier iterates `1..=iterations` (the first
/// entry is the violation of the starting point `(Q0, q0)`).
pub fn admm_violation_history(
    q0m: &SymMat,
    q0: &Mat,
    gamma: f64,
    iterations: usize,
) -> Result<Vec<f64>> {
    check_shapes(q0m, q0)?;
    let mut z = SymMat::zeros(q0m.dim());
    let mut z_eig = eig_sym(&z)?;
    let mut out = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let inv = z_eig.compose(|l| 1.0 / (1.0 + l));
        let pair = DualPair::new(q0m.sub(&z), inv.as_mat().matmul(q0));
        let r = pair.constraint_matrix();
        out.push(eig_sym(&r)?.max_value().max(0.0));
        z_eig = eig_sym(&z.add(&r.scale(gamma)))?;
        z_eig.values.iter_mut().for_each(|l| *l = l.max(0.0));
        z = z_eig.compose(|l| l);
    }
    Ok(out)
}

/// Projection onto the dual set by the multiplier iteration
///
/// ```text
/// Q = Q0 - Z,  q = (I + Z)^{-1} q0,  Z <- proj_psd(Z + gamma (Q + q q^T / 2)).
/// ```
///
/// Terminates once the cone violation and the multiplier change are both
/// below `tol` (the latter relative to `max(1, |Z|)`).
pub fn proj_k_admm(
    q0m: &SymMat,
    q0: &Mat,
    opts: AdmmOptions,
) -> Result<(DualPair, ProjectionReport)> {
    check_shapes(q0m, q0)?;
    if !(opts.gamma > 0.0 && opts.gamma <= 1.0) {
        return Err(Error::Config(format!(
            "multiplier step {} must lie in (0, 1]",
            opts.gamma
        )));
    }
    let n = q0m.dim();
    let mut z = SymMat::zeros(n);
    let mut z_eig = eig_sym(&z)?;
    let mut first_feasible = None;
    let mut last_violation = f64::INFINITY;
    for it in 1..=opts.max_iter {
        let cap_q = q0m.sub(&z);
        let inv = z_eig.compose(|l| 1.0 / (1.0 + l));
        let q = inv.as_mat().matmul(q0);
        let pair = DualPair::new(cap_q, q);
        let r = pair.constraint_matrix();
        let violation = eig_sym(&r)?.max_value().max(0.0);
        if violation <= opts.tol && first_feasible.is_none() {
            first_feasible = Some(it);
        }
        let trial = z.add(&r.scale(opts.gamma));
        z_eig = eig_sym(&trial)?;
        let z_new = z_eig.compose(|l| l.max(0.0));
        z_eig.values.iter_mut().for_each(|l| *l = l.max(0.0));
        let dz = z_new.sub(&z).frob_norm();
        z = z_new;
        last_violation = violation;
        if violation <= opts.tol && dz <= opts.tol * z.frob_norm().max(1.0) {
            return Ok((
                pair,
                ProjectionReport {
                    method: ProjectionMethod::Admm,
                    iterations: it,
                    residual: violation,
                    first_feasible,
                    fell_back: false,
                },
            ));
        }
    }
    Err(Error::ProjectionFailed {
        residual: last_violation,
    })
}

/// Projection with the configured method.
pub fn proj_k(
    q0m: &SymMat,
    q0: &Mat,
    method: ProjectionMethod,
) -> Result<(DualPair, ProjectionReport)> {
    match method {
        ProjectionMethod::Newton => proj_k_newton(q0m, q0, NewtonOptions::default()),
        ProjectionMethod::Admm => proj_k_admm(q0m, q0, AdmmOptions::default()),
    }
}

/// Reduced objective gradient `q - q0 + Y_+(q) q` at `q`, exposed for tests
/// and diagnostics.
pub fn reduced_gradient(q0m: &SymMat, q0: &Mat, q: &Mat) -> Result<Mat> {
    Ok(reduced(q0m, q0, q)?.grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_sym(rng: &mut ChaCha8Rng, n: usize, r: f64) -> SymMat {
        SymMat::new(Mat::from_fn(n, n, |_, _| rng.random_range(-r..r)))
    }

    fn random_rect(rng: &mut ChaCha8Rng, n: usize, d: usize, r: f64) -> Mat {
        Mat::from_fn(n, d, |_, _| rng.random_range(-r..r))
    }

    #[test]
    fn eig_diagonal() {
        let e = eig_sym(&SymMat::diag(&[3.0, 1.0])).unwrap();
        assert_eq!(e.values.as_slice(), &[3.0, 1.0]);
        assert_eq!(e.vectors, Mat::identity(2));
    }

    #[test]
    fn eig_swap_matrix() {
        let e = eig_sym(&SymMat::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]])).unwrap();
        assert_relative_eq!(e.values[0], 1.0, epsilon = 1e-15);
        assert_relative_eq!(e.values[1], -1.0, epsilon = 1e-15);
        let s = 0.5f64.sqrt();
        assert_relative_eq!(e.vectors[(0, 0)], s, epsilon = 1e-15);
        assert_relative_eq!(e.vectors[(1, 0)], s, epsilon = 1e-15);
        assert_relative_eq!(e.vectors[(0, 1)], s, epsilon = 1e-15);
        assert_relative_eq!(e.vectors[(1, 1)], -s, epsilon = 1e-15);
    }

    #[test]
    fn eig_reconstructs_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in [2usize, 3, 4] {
            for _ in 0..50 {
                let s = random_sym(&mut rng, n, 3.0);
                let e = eig_sym(&s).unwrap();
                let back = e.compose(|l| l);
                assert!(back.sub(&s).max_abs() <= 1e-10 * s.max_abs().max(1.0));
                let utu = e.vectors.transpose().matmul(&e.vectors);
                assert!(utu.sub(&Mat::identity(n)).max_abs() <= 1e-12);
                assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
            }
        }
    }

    #[test]
    fn psd_projection_examples() {
        let p = SymMat::from_rows(&[&[2.0, 1.0], &[1.0, 2.0]]);
        assert!(proj_psd(&p).unwrap().sub(&p).max_abs() < 1e-14);
        let d = proj_psd(&SymMat::diag(&[1.0, -2.0])).unwrap();
        assert!(d.sub(&SymMat::diag(&[1.0, 0.0])).max_abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let s = random_sym(&mut rng, 3, 2.0);
            let p = proj_psd(&s).unwrap();
            // Moreau: P and P - S are orthogonal
            assert!(p.frob_dot(&p.sub(&s)).abs() < 1e-12);
            assert!(proj_psd(&p).unwrap().sub(&p).max_abs() < 1e-12);
        }
    }

    #[test]
    fn dproj_examples() {
        let z = SymMat::from_rows(&[&[0.3, -1.0], &[-1.0, 2.0]]);
        let pd = SymMat::from_rows(&[&[3.0, 0.5], &[0.5, 1.0]]);
        assert!(dproj_psd(&pd, &z).unwrap().sub(&z).max_abs() < 1e-13);
        let nd = pd.scale(-1.0);
        assert!(dproj_psd(&nd, &z).unwrap().max_abs() < 1e-15);

        let y = SymMat::diag(&[2.0, -1.0]);
        let z = SymMat::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let d = dproj_psd(&y, &z).unwrap();
        assert_relative_eq!(d[(0, 1)], 2.0 / 3.0, epsilon = 1e-14);
        assert_relative_eq!(d[(0, 0)], 0.0, epsilon = 1e-14);
        let eps = 1e-6;
        let fd = proj_psd(&y.add(&z.scale(eps)))
            .unwrap()
            .sub(&proj_psd(&y.sub(&z.scale(eps))).unwrap())
            .scale(0.5 / eps);
        assert!(fd.sub(&d).max_abs() < 1e-5);
    }

    #[test]
    fn action_examples() {
        let m = Mat::from_rows(&[&[1.0], &[0.0]]);
        assert_relative_eq!(action_value(&SymMat::identity(2), &m), 0.5);
        let k = Mat::from_rows(&[&[0.0], &[1.0]]);
        assert!(action_value(&SymMat::diag(&[1.0, 0.0]), &k).is_infinite());
        let mm = SymMat::from_rows(&[&[2.0, 1.0], &[1.0, 2.0]]);
        let ones = Mat::from_rows(&[&[1.0], &[1.0]]);
        assert_relative_eq!(action_value(&mm, &ones), 1.0 / 3.0, epsilon = 1e-15);
        assert!(action_value(&SymMat::diag(&[1.0, -1.0]), &Mat::zeros(2, 1)).is_infinite());
    }

    #[test]
    fn recovery_examples() {
        let m = Mat::from_rows(&[&[1.0], &[0.0]]);
        let p = support_recovery_pair(&SymMat::identity(2), &m).unwrap();
        assert!(p.cap_q.sub(&SymMat::diag(&[-0.5, 0.0])).max_abs() < 1e-15);
        assert_eq!(p.q, m);
        let z = support_recovery_pair(&SymMat::identity(2), &Mat::zeros(2, 1)).unwrap();
        assert_eq!(z, DualPair::zeros(2, 1));
        let mm = SymMat::from_rows(&[&[2.0, 1.0], &[1.0, 2.0]]);
        let ones = Mat::from_rows(&[&[1.0], &[1.0]]);
        let p = support_recovery_pair(&mm, &ones).unwrap();
        assert_relative_eq!(p.pairing(&mm, &ones), 1.0 / 3.0, epsilon = 1e-14);
        assert!(support_recovery_pair(&SymMat::diag(&[1.0, 0.0]), &Mat::from_rows(&[&[0.0], &[1.0]]))
            .is_err());
    }

    #[test]
    fn witnesses_grow() {
        let neg = SymMat::diag(&[1.0, -0.5]);
        let m = Mat::zeros(2, 1);
        let kern = SymMat::diag(&[1.0, 0.0]);
        let mk = Mat::from_rows(&[&[0.0], &[0.7]]);
        for s in [1.0, 10.0, 100.0] {
            let w = unboundedness_witness(&neg, &m, s).unwrap().unwrap();
            assert!(w.violation().unwrap() <= 1e-12);
            assert_relative_eq!(w.pairing(&neg, &m), 0.5 * s, epsilon = 1e-12);
            let w = unboundedness_witness(&kern, &mk, s).unwrap().unwrap();
            assert!(w.violation().unwrap() <= 1e-10 * s * s);
            assert_relative_eq!(w.pairing(&kern, &mk), 0.49 * s, epsilon = 1e-12);
        }
        assert!(unboundedness_witness(&SymMat::identity(2), &mk, 1.0)
            .unwrap()
            .is_none());
    }

    #[test]
    fn newton_scalar_example() {
        let (p, rep) = proj_k_newton(
            &SymMat::diag(&[0.0]),
            &Mat::from_rows(&[&[2.0]]),
            NewtonOptions::default(),
        )
        .unwrap();
        assert!(rep.residual <= 1e-12);
        assert_relative_eq!(p.cap_q[(0, 0)], -0.695_620_769_559_862, epsilon = 1e-5);
        assert_relative_eq!(p.q[(0, 0)], 1.179_509_024_602_15, epsilon = 1e-5);
        // the point lies on the boundary of the cone
        assert!((p.cap_q[(0, 0)] + 0.5 * p.q[(0, 0)].powi(2)).abs() < 1e-12);
    }

    #[test]
    fn projection_of_member_is_identity() {
        let q0m = SymMat::from_rows(&[&[-2.0, 0.1], &[0.1, -1.0]]);
        let q0 = Mat::from_rows(&[&[0.5], &[0.2]]);
        let (p, rep) = proj_k_newton(&q0m, &q0, NewtonOptions::default()).unwrap();
        assert_eq!(rep.iterations, 0);
        assert_eq!(p, DualPair::new(q0m.clone(), q0.clone()));
        let (p, _) = proj_k_admm(&q0m, &q0, AdmmOptions::default()).unwrap();
        assert!(p.distance(&DualPair::new(q0m, q0)) < 1e-15);
    }

    #[test]
    fn newton_and_admm_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (n, d) in [(2usize, 1usize), (2, 2), (3, 2)] {
            for _ in 0..30 {
                let q0m = random_sym(&mut rng, n, 2.0);
                let q0 = random_rect(&mut rng, n, d, 2.0);
                let (a, _) = proj_k_newton(&q0m, &q0, NewtonOptions::default()).unwrap();
                let opts = AdmmOptions {
                    gamma: safe_admm_step(&q0),
                    max_iter: 100_000,
                    ..Default::default()
                };
                let (b, _) = proj_k_admm(&q0m, &q0, opts).unwrap();
                assert!(a.distance(&b) < 1e-8, "n={n} d={d}: {}", a.distance(&b));
                assert!(a.violation().unwrap() <= 1e-10);
            }
        }
    }

    #[test]
    fn admm_rejects_bad_step() {
        let r = proj_k_admm(
            &SymMat::zeros(1),
            &Mat::zeros(1, 1),
            AdmmOptions {
                gamma: 1.5,
                ..Default::default()
            },
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
