//! Outer minimizing-movement loop with structure-preservation diagnostics.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::constraint::BoxConstraint;
use crate::energy::discrete_energy;
use crate::error::{Error, Result};
use crate::models::Model;
use crate::pdfb::{solve_saddle_from, DualState, PdfbConfig, SaddleProblem};
use crate::state::SpeciesField;

/// Relative slack allowed in the energy non-increase check.
pub const DISSIPATION_SLACK: f64 = 1e-9;

/// Settings of a run of the time loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JkoConfig {
    pub tau: f64,
    pub steps: usize,
    pub pdfb: PdfbConfig,
    /// Keep every `cadence`-th state in the trajectory (the last one is
    /// always kept).
    pub cadence: usize,
    /// Report energy increases beyond the slack as errors instead of warnings.
    pub strict_dissipation: bool,
    /// Stop early once `max |mu^{k+1} - mu^k| <= tol * max(1, max |mu^k|)`.
    pub stationary_tol: Option<f64>,
}

impl JkoConfig {
    pub fn new(tau: f64, steps: usize) -> Self {
        Self {
            tau,
            steps,
            pdfb: PdfbConfig::default(),
            cadence: 1,
            strict_dissipation: false,
            stationary_tol: None,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("time step {} must be positive", self.tau)));
        }
        if self.cadence == 0 {
            return Err(Error::Config("output cadence must be at least 1".into()));
        }
        Ok(())
    }
}

/// Per-step record of the conserved and dissipated quantities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub time: f64,
    pub energy: f64,
    pub masses: Vec<f64>,
    /// Smallest distance to a finite box bound over rows and cells
    /// (negative when violated, infinite without finite bounds).
    pub min_box_slack: f64,
    pub pdfb_iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub converged: bool,
}

impl StepDiagnostics {
    /// Diagnostics of a state that was not produced by a solve.
    pub fn initial(mu: &SpeciesField, model: &Model) -> Result<Self> {
        Ok(Self {
            step: 0,
            time: 0.0,
            energy: discrete_energy(&model.energy(), mu)?,
            masses: mu.masses(),
            min_box_slack: min_box_slack(&model.box_constraint(), mu),
            pdfb_iterations: 0,
            primal_residual: 0.0,
            dual_residual: 0.0,
            converged: true,
        })
    }
}

/// Smallest slack `min(M mu - lo, hi - M mu)` over finite bounds.
pub fn min_box_slack(bx: &BoxConstraint, mu: &SpeciesField) -> f64 {
    let nc = mu.num_cells();
    let data = mu.as_slice();
    let mut slack = f64::INFINITY;
    for b in 0..bx.rows() {
        for c in 0..nc {
            let v: f64 = bx.coupling[b]
                .iter()
                .enumerate()
                .map(|(a, w)| w * data[a * nc + c])
                .sum();
            if bx.lo[b].is_finite() {
                slack = slack.min(v - bx.lo[b]);
            }
            if bx.hi[b].is_finite() {
                slack = slack.min(bx.hi[b] - v);
            }
        }
    }
    slack
}

/// Warm-start data carried from one step to the next.
#[derive(Debug, Clone, Default)]
pub struct StepWarmStart {
    pub duals: Option<DualState>,
}

/// One minimizing-movement step from `mu_k`.
pub fn jko_step(
    mu_k: &SpeciesField,
    model: &Model,
    tau: f64,
    config: &JkoConfig,
    warm: &mut StepWarmStart,
    step: usize,
) -> Result<(SpeciesField, StepDiagnostics)> {
    let energy_spec = model.energy();
    let before = discrete_energy(&energy_spec, mu_k)?;
    let problem = SaddleProblem::new(model, mu_k.clone(), tau)?;
    let y0 = match warm.duals.take() {
        Some(y) if y.cells() == mu_k.num_cells() => y,
        _ => problem.zero_dual(),
    };
    let (it, report) = solve_saddle_from(&problem, y0, &config.pdfb)?;
    warm.duals = Some(it.y);
    let mu = it.x.mu;
    let after = discrete_energy(&energy_spec, &mu)?;
    if !report.converged {
        warn!(
            "step {step}: PDFB stopped after {} iterations with residuals {:.3e} / {:.3e}",
            report.iterations, report.primal_residual, report.dual_residual
        );
    }
    let slack = DISSIPATION_SLACK * before.abs().max(1.0);
    if after > before + slack {
        if config.strict_dissipation && report.converged {
            return Err(Error::Dissipation { step, before, after });
        }
        warn!("step {step}: energy increased from {before:.17e} to {after:.17e}");
    }
    let diag = StepDiagnostics {
        step,
        time: step as f64 * tau,
        energy: after,
        masses: mu.masses(),
        min_box_slack: min_box_slack(&model.box_constraint(), &mu),
        pdfb_iterations: report.iterations,
        primal_residual: report.primal_residual,
        dual_residual: report.dual_residual,
        converged: report.converged,
    };
    Ok((mu, diag))
}

/// Stored states and the diagnostics of every step (index 0 is the
/// initial state).
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    /// `(step, state)` pairs kept according to the cadence.
    pub states: Vec<(usize, SpeciesField)>,
    pub diagnostics: Vec<StepDiagnostics>,
    /// The loop ended early on a stationary state.
    pub stationary: bool,
}

impl Trajectory {
    pub fn last_state(&self) -> Option<&SpeciesField> {
        self.states.last().map(|(_, s)| s)
    }
}

/// Failure of a run: the step that failed, the cause and everything
/// computed before it.
#[derive(Debug)]
pub struct FlowFailure {
    pub step: usize,
    pub error: Error,
    pub partial: Trajectory,
}

impl std::fmt::Display for FlowFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "step {} failed: {}", self.step, self.error)
    }
}

impl std::error::Error for FlowFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Runs the time loop, calling `observe` after the initial state and after
/// every step. An error from `observe` stops the run.
pub fn run_flow_with(
    mu0: &SpeciesField,
    model: &Model,
    config: &JkoConfig,
    observe: &mut dyn FnMut(&StepDiagnostics, &SpeciesField) -> Result<()>,
) -> std::result::Result<Trajectory, Box<FlowFailure>> {
    let mut traj = Trajectory::default();
    let fail = |step, error, partial| Box::new(FlowFailure { step, error, partial });
    let setup = config
        .validate()
        .and_then(|_| model.box_constraint().check_mass(&mu0.totals(), mu0.num_cells()))
        .and_then(|_| check_feasible(&model.box_constraint(), mu0))
        .and_then(|_| StepDiagnostics::initial(mu0, model));
    let init = match setup {
        Ok(d) => d,
        Err(e) => return Err(fail(0, e, traj)),
    };
    if let Err(e) = observe(&init, mu0) {
        return Err(fail(0, e, traj));
    }
    traj.diagnostics.push(init);
    traj.states.push((0, mu0.clone()));
    let mut mu = mu0.clone();
    let mut warm = StepWarmStart::default();
    for step in 1..=config.steps {
        let (next, diag) = match jko_step(&mu, model, config.tau, config, &mut warm, step) {
            Ok(v) => v,
            Err(e) => return Err(fail(step, e, traj)),
        };
        if let Err(e) = observe(&diag, &next) {
            return Err(fail(step, e, traj));
        }
        let change = next.max_abs_diff(&mu);
        let scale = mu.as_slice().iter().fold(1.0f64, |m, v| m.max(v.abs()));
        traj.diagnostics.push(diag);
        mu = next;
        let stationary = config.stationary_tol.is_some_and(|tol| change <= tol * scale);
        if step % config.cadence == 0 || step == config.steps || stationary {
            traj.states.push((step, mu.clone()));
        }
        if stationary {
            traj.stationary = true;
            break;
        }
    }
    Ok(traj)
}

/// [`run_flow_with`] without an observer.
pub fn run_flow(
    mu0: &SpeciesField,
    model: &Model,
    config: &JkoConfig,
) -> std::result::Result<Trajectory, Box<FlowFailure>> {
    run_flow_with(mu0, model, config, &mut |_, _| Ok(()))
}

fn check_feasible(bx: &BoxConstraint, mu: &SpeciesField) -> Result<()> {
    let v = bx.violation(mu);
    if v > 1e-12 {
        return Err(Error::Inadmissible(format!("initial state violates the box by {v:.3e}")));
    }
    Ok(())
}
