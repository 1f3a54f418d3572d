//! Staggered-grid operators: hand-evaluated stencils and exact adjoints.

use crossdiff::grid::{CellVectorField, FluxField, Grid, ScalarField};
use crossdiff::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn random_flux(rng: &mut ChaCha8Rng, grid: Grid) -> FluxField {
    FluxField::clamped(grid, random(rng, grid.num_faces())).unwrap()
}

fn assert_close(got: &[f64], want: &[f64], tol: f64) {
    assert_eq!(got.len(), want.len());
    for (g, w) in got.iter().zip(want) {
        assert!((g - w).abs() <= tol, "{got:?} vs {want:?}");
    }
}

#[test]
fn divergence_of_three_cells_telescopes() {
    let g = Grid::line(3, 1.0, 0.0).unwrap();
    let c = 2.5;
    let div = g.divergence(&FluxField::new(g, vec![0.0, c, c, 0.0]).unwrap()).unwrap();
    assert_close(div.values(), &[c, 0.0, -c], 0.0);
}

#[test]
fn divergence_at_half_spacing() {
    let g = Grid::line(4, 0.5, 0.0).unwrap();
    let div = g.divergence(&FluxField::new(g, vec![0.0, 1.0, 3.0, 2.0, 0.0]).unwrap()).unwrap();
    assert_close(div.values(), &[2.0, 4.0, -2.0, -4.0], 1e-15);
}

#[test]
fn zero_flux_has_zero_divergence() {
    for g in [Grid::line(7, 0.3, -1.0).unwrap(), Grid::square([5, 4], 0.2, [0.0, 0.0]).unwrap()] {
        let div = g.divergence(&FluxField::zeros(g)).unwrap();
        assert!(div.values().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn clamped_divergence_sums_to_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let g = Grid::square([9, 7], 0.1, [0.0, 0.0]).unwrap();
    let div = g.divergence(&random_flux(&mut rng, g)).unwrap();
    let scale: f64 = div.values().iter().map(|v| v.abs()).sum();
    assert!(div.sum().abs() <= 1e-14 * scale);
}

#[test]
fn divergence_adjoint_examples() {
    let g = Grid::line(6, 0.4, 0.0).unwrap();
    let adj = g.divergence_adjoint(&ScalarField::new(g, vec![1.7; 6]).unwrap()).unwrap();
    assert!(adj.values().iter().all(|&v| v.abs() < 1e-15));

    let g = Grid::line(2, 1.0, 0.0).unwrap();
    let (a, b) = (0.3, -1.1);
    let adj = g.divergence_adjoint(&ScalarField::new(g, vec![a, b]).unwrap()).unwrap();
    assert_close(adj.values(), &[0.0, a - b, 0.0], 1e-15);
    // <A e, phi> for the unit interior face
    let e = FluxField::new(g, vec![0.0, 1.0, 0.0]).unwrap();
    let lhs = g.divergence(&e).unwrap().dot(&ScalarField::new(g, vec![a, b]).unwrap());
    assert!((lhs - e.dot(&adj)).abs() < 1e-15);
}

#[test]
fn divergence_adjoint_identity_on_random_fields() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for g in [Grid::square([8, 8], 0.125, [0.0, 0.0]).unwrap(), Grid::line(16, 0.1, 0.0).unwrap()] {
        for _ in 0..20 {
            let sigma = random_flux(&mut rng, g);
            let phi = ScalarField::new(g, random(&mut rng, g.num_cells())).unwrap();
            let lhs = g.divergence(&sigma).unwrap().dot(&phi);
            let adj = g.divergence_adjoint(&phi).unwrap();
            assert!(adj.is_boundary_clamped());
            let rhs = sigma.dot(&adj);
            assert!((lhs - rhs).abs() <= 1e-14 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
        }
    }
}

#[test]
fn interpolation_examples() {
    let g = Grid::square([3, 2], 0.5, [0.0, 0.0]).unwrap();
    let w = g.interpolate(&FluxField::new(g, vec![0.7; g.num_faces()]).unwrap()).unwrap();
    assert!(w.values().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    let w = g.interpolate(&FluxField::zeros(g)).unwrap();
    assert!(w.values().iter().all(|&v| v == 0.0));

    let g = Grid::line(2, 1.0, 0.0).unwrap();
    let w = g.interpolate(&FluxField::new(g, vec![0.0, 2.0, 4.0]).unwrap()).unwrap();
    assert_close(w.values(), &[1.0, 3.0], 0.0);
}

#[test]
fn interpolation_adjoint_examples() {
    let g = Grid::line(2, 1.0, 0.0).unwrap();
    let zero = g.interpolate_adjoint(&CellVectorField::new(g, vec![0.0; 2]).unwrap()).unwrap();
    assert!(zero.values().iter().all(|&v| v == 0.0));
    let (a, b) = (0.9, -0.4);
    let adj = g.interpolate_adjoint(&CellVectorField::new(g, vec![a, b]).unwrap()).unwrap();
    assert_close(adj.values(), &[0.0, 0.5 * (a + b), 0.0], 1e-16);
}

#[test]
fn interpolation_adjoint_identity_on_random_fields() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for g in [Grid::line(16, 0.2, 0.0).unwrap(), Grid::square([4, 4], 0.25, [0.0, 0.0]).unwrap()] {
        for _ in 0..20 {
            let sigma = random_flux(&mut rng, g);
            let w = CellVectorField::new(g, random(&mut rng, g.num_cells() * g.dim())).unwrap();
            let lhs = g.interpolate(&sigma).unwrap().dot(&w);
            let rhs = sigma.dot(&g.interpolate_adjoint(&w).unwrap());
            assert!((lhs - rhs).abs() <= 1e-14 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
        }
    }
}

#[test]
fn partial_derivative_examples() {
    let g = Grid::line(3, 1.0, 0.0).unwrap();
    let d = g.partial_derivative(&ScalarField::new(g, vec![0.0, 1.0, 4.0]).unwrap(), 0).unwrap();
    assert_close(&d, &[0.0, 1.0, 3.0, 0.0], 0.0);

    let g = Grid::square([4, 3], 0.25, [-0.5, 0.0]).unwrap();
    let c = ScalarField::new(g, vec![2.0; 12]).unwrap();
    for axis in 0..2 {
        assert!(g.partial_derivative(&c, axis).unwrap().iter().all(|&v| v == 0.0));
    }
    let lin = ScalarField::from_fn(g, |x| x[0]);
    let dx = g.partial_derivative(&lin, 0).unwrap();
    for (f, v) in dx.iter().enumerate() {
        let i = f % 5;
        let want = if i == 0 || i == 4 { 0.0 } else { 1.0 };
        assert!((v - want).abs() < 1e-13, "face {f}: {v}");
    }
    assert_eq!(g.partial_derivative(&c, 2), Err(Error::InvalidAxis { axis: 2, dim: 2 }));
}

#[test]
fn laplacian_examples() {
    let g = Grid::line(3, 1.0, 0.0).unwrap();
    let lap = g.neumann_laplacian(&ScalarField::new(g, vec![1.0, 0.0, 1.0]).unwrap()).unwrap();
    assert_close(lap.values(), &[-1.0, 2.0, -1.0], 0.0);
    let g = Grid::square([5, 5], 0.2, [0.0, 0.0]).unwrap();
    let lap = g.neumann_laplacian(&ScalarField::new(g, vec![-3.0; 25]).unwrap()).unwrap();
    assert!(lap.values().iter().all(|&v| v == 0.0));
}

#[test]
fn laplacian_is_symmetric_negative_semidefinite() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let g = Grid::square([8, 8], 0.125, [0.0, 0.0]).unwrap();
    for _ in 0..20 {
        let u = ScalarField::new(g, random(&mut rng, 64)).unwrap();
        let v = ScalarField::new(g, random(&mut rng, 64)).unwrap();
        let (lu, lv) = (g.neumann_laplacian(&u).unwrap(), g.neumann_laplacian(&v).unwrap());
        let (a, b) = (lu.dot(&v), u.dot(&lv));
        // relative to the Cauchy-Schwarz bound of either pairing
        let scale = (lu.dot(&lu) * v.dot(&v)).sqrt().max((u.dot(&u) * lv.dot(&lv)).sqrt());
        assert!((a - b).abs() <= 1e-14 * scale, "{a} vs {b}");
        assert!(lu.dot(&u) <= 0.0);
        let mass: f64 = lu.values().iter().map(|x| x.abs()).sum();
        assert!(lu.sum().abs() <= 1e-14 * mass, "{}", lu.sum());
    }
}

#[test]
fn operators_are_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = Grid::square([6, 5], 0.3, [0.0, 0.0]).unwrap();
    let (a, b) = (0.7, -1.3);
    let s = random_flux(&mut rng, g);
    let r = random_flux(&mut rng, g);
    let comb: Vec<f64> = s.values().iter().zip(r.values()).map(|(x, y)| a * x + b * y).collect();
    let comb = FluxField::new(g, comb).unwrap();
    let check = |lhs: &[f64], x: &[f64], y: &[f64]| {
        for ((l, p), q) in lhs.iter().zip(x).zip(y) {
            assert!((l - (a * p + b * q)).abs() < 1e-12);
        }
    };
    check(
        g.divergence(&comb).unwrap().values(),
        g.divergence(&s).unwrap().values(),
        g.divergence(&r).unwrap().values(),
    );
    check(
        g.interpolate(&comb).unwrap().values(),
        g.interpolate(&s).unwrap().values(),
        g.interpolate(&r).unwrap().values(),
    );
    let u = ScalarField::new(g, random(&mut rng, 30)).unwrap();
    let v = ScalarField::new(g, random(&mut rng, 30)).unwrap();
    let uv: Vec<f64> = u.values().iter().zip(v.values()).map(|(x, y)| a * x + b * y).collect();
    check(
        g.neumann_laplacian(&ScalarField::new(g, uv).unwrap()).unwrap().values(),
        g.neumann_laplacian(&u).unwrap().values(),
        g.neumann_laplacian(&v).unwrap().values(),
    );
}

#[test]
fn clamped_fluxes_vanish_on_the_boundary() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let g = Grid::square([4, 3], 0.5, [0.0, 0.0]).unwrap();
    let s = random_flux(&mut rng, g);
    assert!(s.is_boundary_clamped());
    for f in 0..g.num_faces() {
        if g.is_boundary_face(f) {
            assert_eq!(s.values()[f], 0.0);
        }
    }
    assert_eq!(g.num_faces() - g.num_interior_faces(), 2 * 3 + 2 * 4);
}

#[test]
fn mismatched_geometry_is_rejected() {
    let a = Grid::line(4, 0.5, 0.0).unwrap();
    let b = Grid::line(4, 0.25, 0.0).unwrap();
    assert_eq!(a.divergence(&FluxField::zeros(b)), Err(Error::GeometryMismatch));
    assert_eq!(a.neumann_laplacian(&ScalarField::zeros(b)), Err(Error::GeometryMismatch));
}
