//! Oracle checks for the admissible-set projection.

use crossdiff::constraint::{
    complementary_residual, continuity_residual, prox_admissible, solve_saddle_system, BoxConstraint,
};
use crossdiff::dense::{lu_solve, Mat};
use crossdiff::grid::Grid;
use crossdiff::state::{MomentumField, SpeciesField};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Explicit constraint matrix for the continuity equation over the unknowns
/// `(mu, m_interior)`, species by species.
struct Dense {
    n: usize,
    nc: usize,
    interior: Vec<usize>,
    nf: usize,
}

impl Dense {
    fn new(g: &Grid, n: usize) -> Self {
        let interior = (0..g.num_faces()).filter(|&f| !g.is_boundary_face(f)).collect();
        Self {
            n,
            nc: g.num_cells(),
            interior,
            nf: g.num_faces(),
        }
    }

    fn unknowns(&self) -> usize {
        self.n * (self.nc + self.interior.len())
    }

    fn pack(&self, mu: &SpeciesField, m: &MomentumField) -> Vec<f64> {
        let mut v = mu.as_slice().to_vec();
        for a in 0..self.n {
            v.extend(self.interior.iter().map(|&f| m.species(a)[f]));
        }
        v
    }

    fn unpack_mu(&self, g: Grid, u: &[f64]) -> SpeciesField {
        SpeciesField::new(g, self.n, u[..self.n * self.nc].to_vec()).unwrap()
    }

    /// Continuity rows `mu_alpha + A m_alpha`.
    fn continuity_rows(&self, g: &Grid) -> Vec<Vec<f64>> {
        let nu = self.unknowns();
        let ni = self.interior.len();
        let mut rows = Vec::new();
        let mut div = vec![0.0; self.nc];
        for a in 0..self.n {
            for c in 0..self.nc {
                let mut r = vec![0.0; nu];
                r[a * self.nc + c] = 1.0;
                for (k, &f) in self.interior.iter().enumerate() {
                    let mut e = vec![0.0; self.nf];
                    e[f] = 1.0;
                    g.divergence_into(&e, &mut div);
                    r[self.n * self.nc + a * ni + k] = div[c];
                }
                rows.push(r);
            }
        }
        rows
    }

    fn box_row(&self, bx: &BoxConstraint, beta: usize, cell: usize) -> Vec<f64> {
        let mut r = vec![0.0; self.unknowns()];
        for a in 0..self.n {
            r[a * self.nc + cell] = bx.coupling[beta][a];
        }
        r
    }
}

/// Solves `min |u - u0|^2 / 2` subject to `rows u = rhs` with a dense KKT
/// factorization. Returns `None` when the system is singular or inaccurate.
fn dense_equality_projection(u0: &[f64], rows: &[Vec<f64>], rhs: &[f64]) -> Option<Vec<f64>> {
    let nu = u0.len();
    let nr = rows.len();
    let size = nu + nr;
    let kkt = Mat::from_fn(size, size, |i, j| {
        if i < nu && j < nu {
            (i == j) as u8 as f64
        } else if i < nu {
            rows[j - nu][i]
        } else if j < nu {
            rows[i - nu][j]
        } else {
            0.0
        }
    });
    let mut b = u0.to_vec();
    b.extend_from_slice(rhs);
    let x = lu_solve(&kkt, &b).ok()?;
    let back = kkt.matvec(&x);
    let err = back.iter().zip(&b).fold(0.0f64, |m, (a, c)| m.max((a - c).abs()));
    (err < 1e-9).then(|| x[..nu].to_vec())
}

fn objective(u: &[f64], u0: &[f64]) -> f64 {
    u.iter().zip(u0).map(|(a, b)| 0.5 * (a - b).powi(2)).sum()
}

/// Enumerates every lower/upper/inactive pattern of the box rows and keeps
/// the best feasible equality-constrained projection.
fn brute_force(
    g: Grid,
    n: usize,
    mu0: &SpeciesField,
    m0: &MomentumField,
    mu_k: &SpeciesField,
    bx: &BoxConstraint,
) -> Vec<f64> {
    let d = Dense::new(&g, n);
    let nc = g.num_cells();
    let u0 = d.pack(mu0, m0);
    let base_rows = d.continuity_rows(&g);
    let base_rhs = mu_k.as_slice().to_vec();
    let slots = bx.rows() * nc;
    let mut best: Option<(f64, Vec<f64>)> = None;
    for code in 0..3usize.pow(slots as u32) {
        let mut rows = base_rows.clone();
        let mut rhs = base_rhs.clone();
        let mut k = code;
        for s in 0..slots {
            let (beta, cell) = (s / nc, s % nc);
            match k % 3 {
                1 if bx.lo[beta].is_finite() => {
                    rows.push(d.box_row(bx, beta, cell));
                    rhs.push(bx.lo[beta]);
                }
                2 if bx.hi[beta].is_finite() => {
                    rows.push(d.box_row(bx, beta, cell));
                    rhs.push(bx.hi[beta]);
                }
                0 => {}
                _ => {
                    k = usize::MAX;
                    break;
                }
            }
            k /= 3;
        }
        if k == usize::MAX {
            continue;
        }
        let Some(u) = dense_equality_projection(&u0, &rows, &rhs) else {
            continue;
        };
        let mu = d.unpack_mu(g, &u);
        if bx.violation(&mu) > 1e-10 {
            continue;
        }
        let f = objective(&u, &u0);
        if best.as_ref().is_none_or(|(b, _)| f < *b) {
            best = Some((f, u));
        }
    }
    best.expect("some pattern is feasible").1
}

fn random_field(rng: &mut ChaCha8Rng, g: Grid, n: usize, lo: f64, hi: f64) -> SpeciesField {
    let data = (0..n * g.num_cells()).map(|_| rng.random_range(lo..hi)).collect();
    SpeciesField::new(g, n, data).unwrap()
}

fn random_momentum(rng: &mut ChaCha8Rng, g: Grid, n: usize, scale: f64) -> MomentumField {
    let data = (0..n * g.num_faces()).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
    MomentumField::clamped(g, n, data).unwrap()
}

#[test]
fn no_box_matches_dense_least_squares() {
    let g = Grid::line(8, 0.25, 0.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mu_k = random_field(&mut rng, g, 1, 0.5, 1.5);
    let mu0 = random_field(&mut rng, g, 1, -1.0, 2.0);
    let m0 = random_momentum(&mut rng, g, 1, 1.0);
    let out = prox_admissible(&mu0, &m0, &mu_k, &BoxConstraint::none(), None).unwrap();

    let d = Dense::new(&g, 1);
    let u = dense_equality_projection(&d.pack(&mu0, &m0), &d.continuity_rows(&g), mu_k.as_slice()).unwrap();
    let got = d.pack(&out.mu, &out.m);
    for (a, b) in got.iter().zip(&u) {
        assert!((a - b).abs() < 1e-11, "{a} vs {b}");
    }
    assert!(out.continuity_residual < 1e-11);
}

#[test]
fn matches_brute_force_qp_on_small_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    // n = 1 on four cells: 4 densities and 3 interior faces
    let g = Grid::line(4, 0.5, 0.0).unwrap();
    let bx = BoxConstraint::new(vec![vec![1.0]], vec![0.0], vec![0.6]).unwrap();
    for _ in 0..20 {
        let mu_k = random_field(&mut rng, g, 1, 0.1, 0.5);
        let mu0 = random_field(&mut rng, g, 1, -0.5, 1.2);
        let m0 = random_momentum(&mut rng, g, 1, 0.5);
        let out = prox_admissible(&mu0, &m0, &mu_k, &bx, None).unwrap();
        let oracle = brute_force(g, 1, &mu0, &m0, &mu_k, &bx);
        let got = Dense::new(&g, 1).pack(&out.mu, &out.m);
        for (a, b) in got.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }
    // two species with the saturation pattern on two cells: 4 densities, 2 faces
    let g = Grid::line(2, 0.5, 0.0).unwrap();
    let bx = BoxConstraint::new(
        vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]],
        vec![0.0, 0.0, f64::NEG_INFINITY],
        vec![f64::INFINITY, f64::INFINITY, 1.0],
    )
    .unwrap();
    for _ in 0..20 {
        let mu_k = random_field(&mut rng, g, 2, 0.05, 0.45);
        let mu0 = random_field(&mut rng, g, 2, -0.4, 1.0);
        let m0 = random_momentum(&mut rng, g, 2, 0.5);
        let out = prox_admissible(&mu0, &m0, &mu_k, &bx, None).unwrap();
        let oracle = brute_force(g, 2, &mu0, &m0, &mu_k, &bx);
        let got = Dense::new(&g, 2).pack(&out.mu, &out.m);
        for (a, b) in got.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }
    // 2 x 2 grid, one species: 4 densities and 4 interior faces
    let g = Grid::square([2, 2], 0.5, [0.0, 0.0]).unwrap();
    let bx = BoxConstraint::nonnegative(1);
    for _ in 0..20 {
        let mu_k = random_field(&mut rng, g, 1, 0.0, 0.3);
        let mu0 = random_field(&mut rng, g, 1, -0.6, 0.6);
        let m0 = random_momentum(&mut rng, g, 1, 0.5);
        let out = prox_admissible(&mu0, &m0, &mu_k, &bx, None).unwrap();
        let oracle = brute_force(g, 1, &mu0, &m0, &mu_k, &bx);
        let got = Dense::new(&g, 1).pack(&out.mu, &out.m);
        for (a, b) in got.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }
}

#[test]
fn saturation_box_is_enforced() {
    let g = Grid::over_box(1, -1.0, 1.0, 40).unwrap();
    let bx = BoxConstraint::new(
        vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]],
        vec![0.0, 0.0, f64::NEG_INFINITY],
        vec![f64::INFINITY, f64::INFINITY, 1.0],
    )
    .unwrap();
    let mu_k = SpeciesField::from_fns(g, &[&|_| 0.3, &|_| 0.3]);
    // somewhere the total reaches 1.2
    let mu0 = SpeciesField::from_fns(g, &[&|x| 0.3 + 0.3 * (-8.0 * x[0] * x[0]).exp(), &|x| {
        0.3 + 0.3 * (-8.0 * x[0] * x[0]).exp()
    }]);
    let out = prox_admissible(&mu0, &MomentumField::zeros(g, 2), &mu_k, &bx, None).unwrap();
    for c in 0..g.num_cells() {
        let v = out.mu.at(c);
        assert!(v[0] + v[1] <= 1.0 + 1e-12);
        assert!(v[0] >= -1e-12 && v[1] >= -1e-12);
    }
    assert!(out.continuity_residual <= 1e-11);
    assert!(out.box_violation <= 1e-12);
    assert!(out.complementarity <= 1e-10);
    let comp = complementary_residual(&out.mu, &out.state.lambda, &bx);
    assert!(comp.iter().all(|&c| c <= 1e-10));
}

#[test]
fn projection_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = Grid::square([6, 5], 0.2, [0.0, 0.0]).unwrap();
    let bx = BoxConstraint::nonnegative(2);
    let mu_k = random_field(&mut rng, g, 2, 0.2, 1.0);
    let mu0 = random_field(&mut rng, g, 2, -0.5, 1.5);
    let m0 = random_momentum(&mut rng, g, 2, 0.3);
    let out = prox_admissible(&mu0, &m0, &mu_k, &bx, None).unwrap();
    assert!(out.continuity_residual <= 1e-11);
    assert!(out.box_violation <= 1e-12);
    assert!(out.complementarity <= 1e-10);

    // mass
    for (a, b) in out.mu.totals().iter().zip(mu_k.totals()) {
        assert!((a - b).abs() < 1e-11);
    }

    // variational inequality against random admissible points
    let d = Dense::new(&g, 2);
    let u0 = d.pack(&mu0, &m0);
    let us = d.pack(&out.mu, &out.m);
    let mut div = vec![0.0; g.num_cells()];
    for _ in 0..50 {
        let mt = random_momentum(&mut rng, g, 2, 0.005);
        let mut mut_ = mu_k.clone();
        for a in 0..2 {
            g.divergence_into(mt.species(a), &mut div);
            for (x, dv) in mut_.species_mut(a).iter_mut().zip(&div) {
                *x -= dv;
            }
        }
        assert!(bx.violation(&mut_) <= 0.0);
        assert!(continuity_residual(&mut_, &mt, &mu_k) < 1e-12);
        let ut = d.pack(&mut_, &mt);
        let vi: f64 = u0
            .iter()
            .zip(&us)
            .zip(&ut)
            .map(|((a, s), t)| (a - s) * (t - s))
            .sum();
        assert!(vi <= 1e-8, "{vi}");
    }

    // idempotence
    let again = prox_admissible(&out.mu, &out.m, &mu_k, &bx, None).unwrap();
    assert!(again.mu.max_abs_diff(&out.mu) <= 1e-10);
    let drift = again
        .m
        .as_slice()
        .iter()
        .zip(out.m.as_slice())
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    assert!(drift <= 1e-10);

    // warm start reproduces the answer
    let warm = prox_admissible(&mu0, &m0, &mu_k, &bx, Some(&out.state)).unwrap();
    assert!(warm.mu.max_abs_diff(&out.mu) <= 1e-10);
}

#[test]
fn saddle_system_hand_example() {
    // one species on two cells, h = 1: unknowns (mu_1, mu_2, m) with the
    // constraints mu_1 + m = a, mu_2 - m = b
    let g = Grid::line(2, 1.0, 0.0).unwrap();
    let mu0 = SpeciesField::new(g, 1, vec![1.0, 2.0]).unwrap();
    let m0 = MomentumField::clamped(g, 1, vec![0.0, 0.5, 0.0]).unwrap();
    let rhs = SpeciesField::new(g, 1, vec![1.5, 1.0]).unwrap();
    let (mu, m, phi, _) = solve_saddle_system(&mu0, &m0, &rhs, &BoxConstraint::none(), &[], &[]).unwrap();
    // JJ^T = [[2, -1], [-1, 2]], J u0 - v0 = (1.5 - 1.5, 1.5 - 1.0) = (0, 0.5)
    let v = [0.5 / 3.0, 1.0 / 3.0];
    assert!((phi[0] - v[0]).abs() < 1e-14 && (phi[1] - v[1]).abs() < 1e-14);
    assert!((mu.species(0)[0] - (1.0 - v[0])).abs() < 1e-14);
    assert!((mu.species(0)[1] - (2.0 - v[1])).abs() < 1e-14);
    assert!((m.species(0)[1] - (0.5 - (v[0] - v[1]))).abs() < 1e-14);

    // consistent right-hand side leaves the point alone
    let rhs = SpeciesField::new(g, 1, vec![1.5, 1.5]).unwrap();
    let (mu, m, phi, _) = solve_saddle_system(&mu0, &m0, &rhs, &BoxConstraint::none(), &[], &[]).unwrap();
    assert!(phi.iter().all(|v| v.abs() < 1e-15));
    assert_eq!(mu, mu0);
    assert_eq!(m, m0);
}

#[test]
fn saddle_system_random_residual() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = Grid::square([4, 4], 0.25, [0.0, 0.0]).unwrap();
    let bx = BoxConstraint::new(
        vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]],
        vec![0.0, 0.0, f64::NEG_INFINITY],
        vec![f64::INFINITY, f64::INFINITY, 1.0],
    )
    .unwrap();
    let nc = g.num_cells();
    let lower: Vec<bool> = (0..3 * nc).map(|k| k < 2 * nc && rng.random_bool(0.3)).collect();
    let upper: Vec<bool> = (0..3 * nc).map(|k| k >= 2 * nc && rng.random_bool(0.3)).collect();
    let mu0 = random_field(&mut rng, g, 2, -1.0, 1.0);
    let m0 = random_momentum(&mut rng, g, 2, 1.0);
    let rhs = random_field(&mut rng, g, 2, 0.0, 1.0);
    let (mu, m, phi, lambda) = solve_saddle_system(&mu0, &m0, &rhs, &bx, &lower, &upper).unwrap();

    // full block system: u + J^T v = u0 and J u = v0
    let d = Dense::new(&g, 2);
    let mut rows = d.continuity_rows(&g);
    let mut v = phi.clone();
    let mut v0 = rhs.as_slice().to_vec();
    for beta in 0..3 {
        for c in 0..nc {
            let k = beta * nc + c;
            if lower[k] || upper[k] {
                rows.push(d.box_row(&bx, beta, c));
                v.push(lambda[k]);
                v0.push(if lower[k] { bx.lo[beta] } else { bx.hi[beta] });
            }
        }
    }
    let u = d.pack(&mu, &m);
    let u0 = d.pack(&mu0, &m0);
    let mut worst: f64 = 0.0;
    for i in 0..u.len() {
        let jtv: f64 = rows.iter().zip(&v).map(|(r, vi)| r[i] * vi).sum();
        worst = worst.max((u[i] + jtv - u0[i]).abs());
    }
    for (r, b) in rows.iter().zip(&v0) {
        let ju: f64 = r.iter().zip(&u).map(|(a, x)| a * x).sum();
        worst = worst.max((ju - b).abs());
    }
    assert!(worst <= 1e-11, "{worst}");
}

/// Every cell clamped at a bound with the wrong total mass: the dual is
/// linear on this piece and the multipliers have to travel a long way.
#[test]
fn fully_clamped_start_reaches_the_optimum() {
    let g = Grid::line(4, 0.5, 0.0).unwrap();
    let bx = BoxConstraint::new(vec![vec![1.0]], vec![0.0], vec![0.6]).unwrap();
    let mu0 = SpeciesField::new(g, 1, vec![-0.481139, 0.770127, -0.372245, 0.822577]).unwrap();
    let m0 = MomentumField::clamped(g, 1, vec![0.0, 0.189908, 0.275310, 0.055673, 0.0]).unwrap();
    let mu_k = SpeciesField::new(g, 1, vec![0.251275, 0.167498, 0.415190, 0.370938]).unwrap();
    let out = prox_admissible(&mu0, &m0, &mu_k, &bx, None).unwrap();
    let oracle = brute_force(g, 1, &mu0, &m0, &mu_k, &bx);
    let got = Dense::new(&g, 1).pack(&out.mu, &out.m);
    for (a, b) in got.iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-8, "{a} vs {b}");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let saturation = BoxConstraint::new(
        vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]],
        vec![0.0, 0.0, f64::NEG_INFINITY],
        vec![f64::INFINITY, f64::INFINITY, 1.0],
    )
    .unwrap();
    let square = Grid::square([2, 2], 0.5, [0.0, 0.0]).unwrap();
    let cases = [
        (g, 1, bx, (0.05, 0.55), (-1.0, 1.6)),
        (Grid::line(2, 0.5, 0.0).unwrap(), 2, saturation, (0.05, 0.45), (-1.0, 1.5)),
        (square, 1, BoxConstraint::nonnegative(1), (0.0, 0.3), (-1.5, 0.8)),
    ];
    for (g, n, bx, k_range, range) in cases {
        for _ in 0..300 {
            let mu_k = random_field(&mut rng, g, n, k_range.0, k_range.1);
            let mu0 = random_field(&mut rng, g, n, range.0, range.1);
            let m0 = random_momentum(&mut rng, g, n, 1.0);
            let out = prox_admissible(&mu0, &m0, &mu_k, &bx, None).unwrap();
            let oracle = brute_force(g, n, &mu0, &m0, &mu_k, &bx);
            let got = Dense::new(&g, n).pack(&out.mu, &out.m);
            for (a, b) in got.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-8, "{a} vs {b}");
            }
        }
    }
}
