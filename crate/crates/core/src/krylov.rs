//! Matrix-free Krylov solvers and a fast solver for shifted Neumann
//! Laplacians used as a preconditioner.

use crate::error::{Error, Result};
use crate::grid::{dot, Grid};

/// Outcome of an iterative linear solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveReport {
    pub iterations: usize,
    /// Final residual relative to the right-hand side norm.
    pub relative_residual: f64,
}

/// Preconditioned conjugate gradients for a symmetric positive definite
/// operator. `x` holds the initial guess on entry and the solution on exit.
pub fn cg(
    apply: &mut dyn FnMut(&[f64], &mut [f64]),
    precond: &mut dyn FnMut(&[f64], &mut [f64]),
    b: &[f64],
    x: &mut [f64],
    tol: f64,
    max_iter: usize,
) -> Result<SolveReport> {
    let n = b.len();
    let bnorm = dot(b, b).sqrt();
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(SolveReport {
            iterations: 0,
            relative_residual: 0.0,
        });
    }
    let mut r = vec![0.0; n];
    apply(x, &mut r);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    let mut rnorm = dot(&r, &r).sqrt();
    if rnorm <= tol * bnorm {
        return Ok(SolveReport {
            iterations: 0,
            relative_residual: rnorm / bnorm,
        });
    }
    let mut z = vec![0.0; n];
    precond(&r, &mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut ap = vec![0.0; n];
    for it in 1..=max_iter {
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::LinearSolver {
                iterations: it,
                residual: rnorm / bnorm,
            });
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        rnorm = dot(&r, &r).sqrt();
        if rnorm <= tol * bnorm {
            // guard against drift of the recursive residual
            apply(x, &mut ap);
            let true_res = b
                .iter()
                .zip(&ap)
                .map(|(bi, ai)| (bi - ai) * (bi - ai))
                .sum::<f64>()
                .sqrt();
            if true_res <= 10.0 * tol * bnorm {
                return Ok(SolveReport {
                    iterations: it,
                    relative_residual: true_res / bnorm,
                });
            }
            for i in 0..n {
                r[i] = b[i] - ap[i];
            }
            rnorm = true_res;
        }
        precond(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::LinearSolver {
        iterations: max_iter,
        residual: rnorm / bnorm,
    })
}

/// Restarted GMRES with right preconditioning. `x` holds the initial guess on
/// entry and the solution on exit.
pub fn gmres(
    apply: &mut dyn FnMut(&[f64], &mut [f64]),
    precond: &mut dyn FnMut(&[f64], &mut [f64]),
    b: &[f64],
    x: &mut [f64],
    tol: f64,
    restart: usize,
    max_iter: usize,
) -> Result<SolveReport> {
    let n = b.len();
    let bnorm = dot(b, b).sqrt();
    if bnorm == 0.0 {
        x.iter_mut().for_each(|v| *v = 0.0);
        return Ok(SolveReport {
            iterations: 0,
            relative_residual: 0.0,
        });
    }
    let m = restart.max(1);
    let mut total = 0;
    let mut tmp = vec![0.0; n];
    let mut w = vec![0.0; n];
    loop {
        apply(x, &mut tmp);
        let r: Vec<f64> = b.iter().zip(&tmp).map(|(bi, ai)| bi - ai).collect();
        let beta = dot(&r, &r).sqrt();
        if beta <= tol * bnorm {
            return Ok(SolveReport {
                iterations: total,
                relative_residual: beta / bnorm,
            });
        }
        if total >= max_iter {
            return Err(Error::LinearSolver {
                iterations: total,
                residual: beta / bnorm,
            });
        }
        let mut v: Vec<Vec<f64>> = vec![r.iter().map(|ri| ri / beta).collect()];
        let mut zs: Vec<Vec<f64>> = Vec::with_capacity(m);
        let mut h = vec![vec![0.0; m]; m + 1];
        let (mut cs, mut sn) = (vec![0.0; m], vec![0.0; m]);
        let mut g = vec![0.0; m + 1];
        g[0] = beta;
        let mut k_used = 0;
        for k in 0..m {
            let mut z = vec![0.0; n];
            precond(&v[k], &mut z);
            apply(&z, &mut w);
            zs.push(z);
            for (j, vj) in v.iter().enumerate() {
                let hj = dot(&w, vj);
                h[j][k] = hj;
                for i in 0..n {
                    w[i] -= hj * vj[i];
                }
            }
            let hn = dot(&w, &w).sqrt();
            h[k + 1][k] = hn;
            for j in 0..k {
                let t = cs[j] * h[j][k] + sn[j] * h[j + 1][k];
                h[j + 1][k] = -sn[j] * h[j][k] + cs[j] * h[j + 1][k];
                h[j][k] = t;
            }
            let denom = h[k][k].hypot(h[k + 1][k]);
            if denom == 0.0 {
                k_used = k;
                break;
            }
            cs[k] = h[k][k] / denom;
            sn[k] = h[k + 1][k] / denom;
            h[k][k] = denom;
            h[k + 1][k] = 0.0;
            g[k + 1] = -sn[k] * g[k];
            g[k] *= cs[k];
            total += 1;
            k_used = k + 1;
            if g[k + 1].abs() <= tol * bnorm || hn == 0.0 || total >= max_iter {
                break;
            }
            v.push(w.iter().map(|wi| wi / hn).collect());
        }
        let mut y = vec![0.0; k_used];
        for i in (0..k_used).rev() {
            let mut s = g[i];
            for j in (i + 1)..k_used {
                s -= h[i][j] * y[j];
            }
            y[i] = s / h[i][i];
        }
        for (j, yj) in y.iter().enumerate() {
            for i in 0..n {
                x[i] += yj * zs[j][i];
            }
        }
        if k_used == 0 {
            return Err(Error::LinearSolver {
                iterations: total,
                residual: beta / bnorm,
            });
        }
    }
}

/// Exact solver for `(a I - b Delta_h) x = r` with the Neumann Laplacian,
/// `a > 0`, `b >= 0`. One dimension uses the Thomas algorithm; two dimensions
/// diagonalize the separable operator with the discrete cosine eigenbasis.
#[derive(Debug, Clone)]
pub struct ShiftedLaplacian {
    grid: Grid,
    a: f64,
    b: f64,
    basis: Option<CosineBasis>,
}

#[derive(Debug, Clone)]
struct CosineBasis {
    vx: Vec<f64>,
    vy: Vec<f64>,
    lx: Vec<f64>,
    ly: Vec<f64>,
}

fn cosine_basis(n: usize, h: f64) -> (Vec<f64>, Vec<f64>) {
    // column k of v is the k-th orthonormal eigenvector, stored row-major n x n
    let mut v = vec![0.0; n * n];
    let mut lam = vec![0.0; n];
    let pi = std::f64::consts::PI;
    for k in 0..n {
        let norm = if k == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        };
        for i in 0..n {
            v[i * n + k] = norm * (pi * k as f64 * (i as f64 + 0.5) / n as f64).cos();
        }
        let s = (pi * k as f64 / (2.0 * n as f64)).sin();
        lam[k] = 4.0 * s * s / (h * h);
    }
    (v, lam)
}

impl ShiftedLaplacian {
    pub fn new(grid: Grid, a: f64, b: f64) -> Self {
        let basis = (grid.dim() == 2).then(|| {
            let [nx, ny] = grid.cells();
            let (vx, lx) = cosine_basis(nx, grid.h());
            let (vy, ly) = cosine_basis(ny, grid.h());
            CosineBasis { vx, vy, lx, ly }
        });
        Self { grid, a, b, basis }
    }

    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        self.grid.laplacian_into(x, out);
        for (o, xi) in out.iter_mut().zip(x) {
            *o = self.a * xi - self.b * *o;
        }
    }

    pub fn solve(&self, r: &[f64], out: &mut [f64]) {
        match &self.basis {
            None => self.thomas(r, out),
            Some(basis) => self.spectral(basis, r, out),
        }
    }

    fn thomas(&self, r: &[f64], out: &mut [f64]) {
        let n = r.len();
        let c = self.b / (self.grid.h() * self.grid.h());
        if n == 1 {
            out[0] = r[0] / self.a;
            return;
        }
        // tridiagonal: off-diagonal -c, diagonal a + c * (number of neighbours)
        let diag = |i: usize| self.a + c * if i == 0 || i == n - 1 { 1.0 } else { 2.0 };
        let mut cp = vec![0.0; n];
        let mut denom = diag(0);
        cp[0] = -c / denom;
        out[0] = r[0] / denom;
        for i in 1..n {
            denom = diag(i) + c * cp[i - 1];
            cp[i] = -c / denom;
            out[i] = (r[i] + c * out[i - 1]) / denom;
        }
        for i in (0..n - 1).rev() {
            out[i] -= cp[i] * out[i + 1];
        }
    }

    fn spectral(&self, basis: &CosineBasis, r: &[f64], out: &mut [f64]) {
        let [nx, ny] = self.grid.cells();
        // r is laid out as rows j (y) of length nx (x): R[j][i]
        // hat = Vy^T R Vx
        let mut t = vec![0.0; ny * nx];
        for j in 0..ny {
            for k in 0..nx {
                let mut s = 0.0;
                for i in 0..nx {
                    s += r[i + nx * j] * basis.vx[i * nx + k];
                }
                t[j * nx + k] = s;
            }
        }
        let mut hat = vec![0.0; ny * nx];
        for l in 0..ny {
            for j in 0..ny {
                let w = basis.vy[j * ny + l];
                if w == 0.0 {
                    continue;
                }
                for k in 0..nx {
                    hat[l * nx + k] += w * t[j * nx + k];
                }
            }
        }
        for l in 0..ny {
            for k in 0..nx {
                hat[l * nx + k] /= self.a + self.b * (basis.lx[k] + basis.ly[l]);
            }
        }
        // back: X = Vy hat Vx^T
        let mut t2 = vec![0.0; ny * nx];
        for j in 0..ny {
            for l in 0..ny {
                let w = basis.vy[j * ny + l];
                for k in 0..nx {
                    t2[j * nx + k] += w * hat[l * nx + k];
                }
            }
        }
        for j in 0..ny {
            for i in 0..nx {
                let mut s = 0.0;
                for k in 0..nx {
                    s += t2[j * nx + k] * basis.vx[i * nx + k];
                }
                out[i + nx * j] = s;
            }
        }
    }
}
