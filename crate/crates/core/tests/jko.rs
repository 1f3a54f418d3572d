//! Time-loop behaviour: stationary states, conservation, dissipation and
//! failure reporting.

use crossdiff::energy::discrete_energy;
use crossdiff::grid::Grid;
use crossdiff::jko::{jko_step, run_flow, run_flow_with, JkoConfig, StepWarmStart};
use crossdiff::models::Model;
use crossdiff::state::SpeciesField;
use crossdiff::Error;

fn setup(model: &Model, cells: usize) -> (SpeciesField, JkoConfig) {
    let d = model.defaults();
    let grid = Grid::over_box(model.dim, d.lo, d.hi, cells).unwrap();
    let mu = model.initial_data(grid).unwrap();
    let mut cfg = JkoConfig::new(d.tau, d.steps);
    cfg.pdfb.step_ratio = d.step_ratio;
    (mu, cfg)
}

#[test]
fn constant_state_does_not_move() {
    let model = Model::skt(1).unwrap();
    let grid = Grid::over_box(1, -5.0, 5.0, 40).unwrap();
    let mu = SpeciesField::new(grid, 2, [vec![0.4; 40], vec![0.1; 40]].concat()).unwrap();
    let cfg = JkoConfig::new(0.1, 1);
    let (next, diag) = jko_step(&mu, &model, 0.1, &cfg, &mut StepWarmStart::default(), 1).unwrap();
    assert!(next.max_abs_diff(&mu) < 1e-9);
    let e0 = discrete_energy(&model.energy(), &mu).unwrap();
    assert!((diag.energy - e0).abs() < 1e-9);
}

#[test]
fn one_skt_step_decreases_energy() {
    let model = Model::skt(1).unwrap();
    let (mu, cfg) = setup(&model, 100);
    let e0 = discrete_energy(&model.energy(), &mu).unwrap();
    let (_, diag) = jko_step(&mu, &model, 0.1, &cfg, &mut StepWarmStart::default(), 1).unwrap();
    assert!(diag.energy < e0, "{} vs {e0}", diag.energy);
}

#[test]
fn saturation_step_stays_below_the_cap() {
    let model = Model::saturation_fp();
    let (mu, cfg) = setup(&model, 100);
    let (next, diag) = jko_step(&mu, &model, 0.1, &cfg, &mut StepWarmStart::default(), 1).unwrap();
    let (a, b) = (next.species(0), next.species(1));
    for c in 0..next.num_cells() {
        assert!(a[c] + b[c] <= 1.0 + 1e-12);
        assert!(a[c] >= -1e-12 && b[c] >= -1e-12);
    }
    assert!(diag.min_box_slack >= -1e-12);
}

#[test]
fn zero_steps_keep_the_initial_state_only() {
    let model = Model::skt(1).unwrap();
    let (mu, mut cfg) = setup(&model, 50);
    cfg.steps = 0;
    let traj = run_flow(&mu, &model, &cfg).unwrap();
    assert_eq!(traj.states.len(), 1);
    assert_eq!(traj.states[0].1, mu);
    assert_eq!(traj.diagnostics.len(), 1);
}

#[test]
fn skt_flow_conserves_mass() {
    let model = Model::skt(1).unwrap();
    let (mu, mut cfg) = setup(&model, 100);
    cfg.pdfb.max_iter = 1000;
    let traj = run_flow(&mu, &model, &cfg).unwrap();
    assert_eq!(traj.diagnostics.len(), 11);
    let m0 = mu.masses();
    for d in &traj.diagnostics {
        for (a, b) in d.masses.iter().zip(&m0) {
            assert!((a - b).abs() <= 1e-10 * b, "step {}: {a} vs {b}", d.step);
        }
    }
}

#[test]
fn two_layer_film_energy_is_non_increasing() {
    let model = Model::two_layer_film();
    let (mu, mut cfg) = setup(&model, 100);
    cfg.steps = 100;
    cfg.cadence = 25;
    let traj = run_flow(&mu, &model, &cfg).unwrap();
    for w in traj.diagnostics.windows(2) {
        let slack = 1e-9 * w[0].energy.abs().max(1.0);
        assert!(w[1].energy <= w[0].energy + slack, "step {}", w[1].step);
    }
    let kept: Vec<usize> = traj.states.iter().map(|(s, _)| *s).collect();
    assert_eq!(kept, vec![0, 25, 50, 75, 100]);
}

#[test]
fn observer_failure_returns_partial_trajectory() {
    let model = Model::skt(1).unwrap();
    let (mu, mut cfg) = setup(&model, 30);
    cfg.steps = 5;
    cfg.pdfb.max_iter = 50;
    let err = run_flow_with(&mu, &model, &cfg, &mut |d, _| {
        if d.step == 2 {
            Err(Error::Config("stop".into()))
        } else {
            Ok(())
        }
    })
    .unwrap_err();
    assert_eq!(err.step, 2);
    assert_eq!(err.partial.diagnostics.len(), 2);
    assert_eq!(err.error, Error::Config("stop".into()));
}

#[test]
fn infeasible_initial_state_is_rejected() {
    let model = Model::saturation_fp();
    let grid = Grid::over_box(1, -1.0, 1.0, 10).unwrap();
    let mu = SpeciesField::new(grid, 2, vec![0.6; 20]).unwrap();
    let err = run_flow(&mu, &model, &JkoConfig::new(0.1, 1)).unwrap_err();
    assert_eq!(err.step, 0);
    assert!(err.partial.states.is_empty());
}

#[test]
fn invalid_time_step_is_a_config_error() {
    let model = Model::skt(1).unwrap();
    let (mu, _) = setup(&model, 10);
    let err = run_flow(&mu, &model, &JkoConfig::new(0.0, 1)).unwrap_err();
    assert!(matches!(err.error, Error::Config(_)));
}

#[test]
fn stationary_rule_stops_early() {
    let model = Model::skt(1).unwrap();
    let grid = Grid::over_box(1, -5.0, 5.0, 20).unwrap();
    let mu = SpeciesField::new(grid, 2, vec![0.3; 40]).unwrap();
    let mut cfg = JkoConfig::new(0.1, 50);
    cfg.stationary_tol = Some(1e-9);
    let traj = run_flow(&mu, &model, &cfg).unwrap();
    assert!(traj.stationary);
    assert_eq!(traj.diagnostics.len(), 2);
}
