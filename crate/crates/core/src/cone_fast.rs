//! Allocation-free semismooth Newton projection for two species, the size
//! used by every model in this crate. Mirrors the general kernel in `cone`.

/// Spectral data of a symmetric 2x2 matrix: eigenvalues in descending order
/// and the matching unit eigenvectors as columns of `u`.
#[derive(Clone, Copy)]
struct Eig2 {
    lam: [f64; 2],
    u: [[f64; 2]; 2],
}

fn eig2(a: f64, b: f64, c: f64) -> Eig2 {
    let mean = 0.5 * (a + c);
    let half = 0.5 * (a - c);
    let r = half.hypot(b);
    let theta = 0.5 * (2.0 * b).atan2(a - c);
    let (sn, cs) = theta.sin_cos();
    Eig2 {
        lam: [mean + r, mean - r],
        u: [[cs, -sn], [sn, cs]],
    }
}

impl Eig2 {
    /// `U diag(f(lam)) U^T` packed as `(s00, s01, s11)`.
    fn compose(&self, f: impl Fn(f64) -> f64) -> [f64; 3] {
        let w = [f(self.lam[0]), f(self.lam[1])];
        let u = &self.u;
        [
            w[0] * u[0][0] * u[0][0] + w[1] * u[0][1] * u[0][1],
            w[0] * u[0][0] * u[1][0] + w[1] * u[0][1] * u[1][1],
            w[0] * u[1][0] * u[1][0] + w[1] * u[1][1] * u[1][1],
        ]
    }
}

struct Reduced<const D: usize> {
    f: f64,
    grad: [[f64; D]; 2],
    eig: Eig2,
}

fn reduced<const D: usize>(q0m: &[f64; 3], q0: &[[f64; D]; 2], q: &[[f64; D]; 2]) -> Reduced<D> {
    let dot = |x: &[f64; D], y: &[f64; D]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
    let y00 = q0m[0] + 0.5 * dot(&q[0], &q[0]);
    let y01 = q0m[1] + 0.5 * dot(&q[0], &q[1]);
    let y11 = q0m[2] + 0.5 * dot(&q[1], &q[1]);
    let eig = eig2(y00, y01, y11);
    let yp = eig.compose(|l| l.max(0.0));
    let mut grad = [[0.0; D]; 2];
    let mut f = 0.0;
    for k in 0..D {
        let d0 = q[0][k] - q0[0][k];
        let d1 = q[1][k] - q0[1][k];
        f += 0.5 * (d0 * d0 + d1 * d1);
        grad[0][k] = d0 + yp[0] * q[0][k] + yp[1] * q[1][k];
        grad[1][k] = d1 + yp[1] * q[0][k] + yp[2] * q[1][k];
    }
    f += 0.5 * eig.lam.iter().map(|l| l.max(0.0).powi(2)).sum::<f64>();
    Reduced { f, grad, eig }
}

/// Gaussian elimination with partial pivoting on a small dense system.
fn solve_small<const M: usize>(mut a: [[f64; M]; M], mut b: [f64; M], m: usize) -> Option<[f64; M]> {
    for k in 0..m {
        let p = (k..m).max_by(|&i, &j| a[i][k].abs().total_cmp(&a[j][k].abs()))?;
        if a[p][k].abs() < 1e-300 {
            return None;
        }
        a.swap(k, p);
        b.swap(k, p);
        for i in (k + 1)..m {
            let l = a[i][k] / a[k][k];
            for j in k..m {
                a[i][j] -= l * a[k][j];
            }
            b[i] -= l * b[k];
        }
    }
    let mut x = [0.0; M];
    for i in (0..m).rev() {
        let s: f64 = ((i + 1)..m).map(|j| a[i][j] * x[j]).sum();
        x[i] = (b[i] - s) / a[i][i];
    }
    x.iter().all(|v| v.is_finite()).then_some(x)
}

fn newton_step<const D: usize>(red: &Reduced<D>, q: &[[f64; D]; 2]) -> Option<[[f64; D]; 2]> {
    let u = &red.eig.u;
    let lam = &red.eig.lam;
    let w = |a: usize, b: usize| {
        let (la, lb) = (lam[a], lam[b]);
        match (la > 0.0, lb > 0.0) {
            (true, true) => 1.0,
            (false, false) => 0.0,
            _ => (la.max(0.0) - lb.max(0.0)) / (la - lb),
        }
    };
    // rotate into the eigenbasis: row a of U^T x is sum_i u[i][a] x[i]
    let rot = |x: &[[f64; D]; 2]| {
        let mut out = [[0.0; D]; 2];
        for a in 0..2 {
            for k in 0..D {
                out[a][k] = u[0][a] * x[0][k] + u[1][a] * x[1][k];
            }
        }
        out
    };
    let qt = rot(q);
    let gt = rot(&red.grad);
    let mut h = [[0.0; 4]; 4];
    let mut rhs = [0.0; 4];
    for b in 0..2 {
        for j in 0..D {
            let row = b * D + j;
            rhs[row] = -gt[b][j];
            for a in 0..2 {
                let wab = w(a, b);
                for k in 0..D {
                    let mut v = 0.5 * wab * qt[b][k] * qt[a][j];
                    if a == b {
                        if j == k {
                            v += 1.0 + lam[a].max(0.0);
                        }
                        v += 0.5 * (0..2).map(|c| w(a, c) * qt[c][k] * qt[c][j]).sum::<f64>();
                    }
                    h[row][a * D + k] = v;
                }
            }
        }
    }
    let st = solve_small(h, rhs, 2 * D)?;
    let mut step = [[0.0; D]; 2];
    for i in 0..2 {
        for k in 0..D {
            step[i][k] = u[i][0] * st[k] + u[i][1] * st[D + k];
        }
    }
    Some(step)
}

fn norm<const D: usize>(x: &[[f64; D]; 2]) -> f64 {
    x.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
}

/// Result of the fast projection: `(Q, q)` packed as `Q = (s00, s01, s11)`,
/// the iteration count and the final gradient norm.
pub(crate) struct Fast<const D: usize> {
    pub cap_q: [f64; 3],
    pub q: [[f64; D]; 2],
    pub iterations: usize,
    pub residual: f64,
}

/// Newton projection for `n = 2`. Returns `None` when the iteration does not
/// reach the tolerance, in which case the caller falls back to the general
/// kernel.
pub(crate) fn project<const D: usize>(
    q0m: [f64; 3],
    q0: [[f64; D]; 2],
    start: Option<[[f64; D]; 2]>,
    tol: f64,
    max_iter: usize,
    max_halvings: usize,
) -> Option<Fast<D>> {
    let target = tol * norm(&q0).max(1.0);
    let mut q = q0;
    let mut red = reduced(&q0m, &q0, &q);
    if red.eig.lam[0] <= 0.0 {
        return Some(Fast {
            cap_q: q0m,
            q: q0,
            iterations: 0,
            residual: 0.0,
        });
    }
    if let Some(s) = start {
        let r = reduced(&q0m, &q0, &s);
        if r.f < red.f {
            q = s;
            red = r;
        }
    }
    let mut gnorm = norm(&red.grad);
    let mut it = 0;
    while gnorm > target {
        if it == max_iter {
            return None;
        }
        it += 1;
        let step = newton_step(&red, &q).unwrap_or_else(|| red.grad.map(|r| r.map(|g| -g)));
        let slope: f64 = red.grad.iter().flatten().zip(step.iter().flatten()).map(|(a, b)| a * b).sum();
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..=max_halvings {
            let mut cand = q;
            for i in 0..2 {
                for k in 0..D {
                    cand[i][k] += t * step[i][k];
                }
            }
            let r = reduced(&q0m, &q0, &cand);
            let armijo = r.f <= red.f + 1e-4 * t * slope + 4.0 * f64::EPSILON * red.f.abs();
            let gn = norm(&r.grad);
            if armijo || gn < gnorm * (1.0 - 1e-4 * t) {
                accepted = Some((cand, r, gn));
                break;
            }
            t *= 0.5;
        }
        let (cand, r, gn) = accepted?;
        q = cand;
        red = r;
        gnorm = gn;
    }
    let ym = red.eig.compose(|l| l.min(0.0));
    let dot = |x: &[f64; D], y: &[f64; D]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
    Some(Fast {
        cap_q: [
            ym[0] - 0.5 * dot(&q[0], &q[0]),
            ym[1] - 0.5 * dot(&q[0], &q[1]),
            ym[2] - 0.5 * dot(&q[1], &q[1]),
        ],
        q,
        iterations: it,
        residual: gnorm,
    })
}
