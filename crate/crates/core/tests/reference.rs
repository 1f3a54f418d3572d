//! Backward-Euler reference scheme against hand-assembled linear systems
//! and conservation checks.

use crossdiff::dense::{lu_solve, Mat};
use crossdiff::energy::discrete_energy;
use crossdiff::grid::Grid;
use crossdiff::models::Model;
use crossdiff::reference::{
    backward_euler_step, relative_error, run_reference, ReferenceConfig, Residual,
};
use crossdiff::state::SpeciesField;
use crossdiff::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn skt_initial(cells: usize) -> (Model, SpeciesField) {
    let model = Model::skt(1).unwrap();
    let grid = Grid::over_box(1, -5.0, 5.0, cells).unwrap();
    let mu = model.initial_data(grid).unwrap();
    (model, mu)
}

#[test]
fn constant_state_is_kept() {
    let model = Model::skt(1).unwrap();
    let grid = Grid::over_box(1, -5.0, 5.0, 30).unwrap();
    let mu = SpeciesField::new(grid, 2, [vec![0.2; 30], vec![0.7; 30]].concat()).unwrap();
    let (next, report) = backward_euler_step(&mu, &model, 1e-3, &ReferenceConfig::default()).unwrap();
    assert_eq!(report.newton_iterations, 0);
    assert_eq!(next, mu);
}

#[test]
fn skt_step_conserves_mass_and_dissipates() {
    let (model, mu) = skt_initial(100);
    let cfg = ReferenceConfig::default();
    let (next, report) = backward_euler_step(&mu, &model, cfg.tau_ref, &cfg).unwrap();
    assert!(report.residual <= 1e-11);
    for (a, b) in next.totals().iter().zip(mu.totals()) {
        assert!((a - b).abs() <= 1e-11 * b, "{a} vs {b}");
    }
    let e = model.energy();
    assert!(discrete_energy(&e, &next).unwrap() < discrete_energy(&e, &mu).unwrap());
}

#[test]
fn residual_vanishes_at_the_returned_state() {
    let (model, mu) = skt_initial(60);
    let cfg = ReferenceConfig::default();
    let (next, _) = backward_euler_step(&mu, &model, 0.05, &cfg).unwrap();
    let e = model.energy();
    let r = Residual::new(model.mobility(), &e, &mu, 0.05).eval(&next).unwrap();
    assert!(r.iter().all(|v| v.abs() <= 1e-11));
}

/// With mobility `diag(mu)` and a fixed potential the implicit step is
/// linear: `mu_c - mu_c^k - tau / h^2 sum_faces (+-) mbar_f (V_R - V_L) = 0`.
#[test]
fn linear_mobility_step_matches_dense_solve() {
    let model = Model::saturation_fp().with("saturation", 0.0).unwrap().with("a", 0.0).unwrap();
    let nc = 12;
    let grid = Grid::over_box(1, -1.0, 1.0, nc).unwrap();
    let h = grid.h();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mu_k = SpeciesField::new(grid, 2, (0..2 * nc).map(|_| rng.random_range(0.1..0.4)).collect()).unwrap();
    let tau = 0.05;
    let (next, _) = backward_euler_step(&mu_k, &model, tau, &ReferenceConfig::default()).unwrap();
    for (a, sigma) in [(0usize, 4.0f64), (1, 2.0)] {
        let v: Vec<f64> = (0..nc).map(|c| 0.5 * sigma * grid.cell_center(c)[0].powi(2)).collect();
        let mut mat = Mat::identity(nc);
        let k = tau / (h * h);
        for l in 0..nc - 1 {
            let r = l + 1;
            let dv = v[r] - v[l];
            // F = 0.5 (mu_l + mu_r) dv / h enters the residual of cell l
            // with -tau / h and that of cell r with +tau / h
            for (row, sign) in [(l, 1.0), (r, -1.0)] {
                mat[(row, l)] -= sign * k * 0.5 * dv;
                mat[(row, r)] -= sign * k * 0.5 * dv;
            }
        }
        let want = lu_solve(&mat, mu_k.species(a)).unwrap();
        for (g, w) in next.species(a).iter().zip(&want) {
            assert!((g - w).abs() < 1e-11, "{g} vs {w}");
        }
    }
}

#[test]
fn trajectory_records_every_step() {
    let (model, mu) = skt_initial(40);
    let cfg = ReferenceConfig::default();
    let traj = run_reference(&mu, &model, 20, 5, &cfg).unwrap();
    assert_eq!(traj.diagnostics.len(), 21);
    let kept: Vec<usize> = traj.states.iter().map(|(s, _)| *s).collect();
    assert_eq!(kept, vec![0, 5, 10, 15, 20]);
    let m0 = mu.masses();
    for d in &traj.diagnostics {
        for (a, b) in d.masses.iter().zip(&m0) {
            assert!((a - b).abs() <= 1e-11 * b);
        }
    }
    for w in traj.diagnostics.windows(2) {
        assert!(w[1].energy <= w[0].energy);
    }
}

#[test]
fn failed_newton_reports_non_convergence() {
    let (model, mu) = skt_initial(20);
    let cfg = ReferenceConfig { max_newton: 0, max_halvings: 2, ..ReferenceConfig::default() };
    let err = backward_euler_step(&mu, &model, 1e-3, &cfg).unwrap_err();
    assert!(matches!(err, Error::NonConvergence { .. }), "{err}");
}

#[test]
fn nonpositive_reference_step_is_rejected() {
    let (model, mu) = skt_initial(20);
    let cfg = ReferenceConfig { tau_ref: -1.0, ..ReferenceConfig::default() };
    assert!(matches!(run_reference(&mu, &model, 1, 1, &cfg), Err(Error::Config(_))));
}

#[test]
fn relative_error_identities() {
    let (_, mu) = skt_initial(25);
    assert_eq!(relative_error(&mu, &mu).unwrap(), 0.0);
    let mut twice = mu.clone();
    for v in twice.as_mut_slice() {
        *v *= 2.0;
    }
    assert!((relative_error(&twice, &mu).unwrap() - 1.0).abs() < 1e-15);
}

#[test]
fn relative_error_matches_hand_norms() {
    let grid = Grid::line(3, 1.0, 0.0).unwrap();
    let a = SpeciesField::new(grid, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let b = SpeciesField::new(grid, 2, vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
    // |a - b|^2 = 0 + 1 + 4 + 9 + 16 + 25 = 55, |b|^2 = 6
    let want = (55.0f64 / 6.0).sqrt();
    assert!((relative_error(&a, &b).unwrap() - want).abs() < 1e-15);
}

#[test]
fn relative_error_rejects_mismatched_geometry() {
    let (_, a) = skt_initial(20);
    let (_, b) = skt_initial(21);
    assert_eq!(relative_error(&a, &b), Err(Error::GeometryMismatch));
}
