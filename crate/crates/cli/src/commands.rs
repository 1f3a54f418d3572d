//! The three subcommands. Each one writes its files into the configured
//! output directory and a `run_meta.json` describing the resolved run.

use std::collections::BTreeSet;
use std::path::Path;

use crossdiff::jko::{jko_step, run_flow_with, FlowFailure, StepDiagnostics, StepWarmStart, Trajectory};
use crossdiff::reference::{relative_error, run_reference_with};
use crossdiff::state::SpeciesField;
use log::info;
use serde_json::json;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::output::{self, DiagnosticsWriter, StudyRow};

fn prepare_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))
}

/// Streams diagnostics and cadence snapshots while a trajectory is computed.
struct Sink<'a> {
    dir: &'a Path,
    diagnostics: DiagnosticsWriter,
    cadence: usize,
    last_step: usize,
    written: BTreeSet<usize>,
    /// Output failure raised inside the observer callback.
    io_error: Option<CliError>,
}

impl<'a> Sink<'a> {
    fn new(dir: &'a Path, species: usize, cadence: usize, last_step: usize) -> Result<Self, CliError> {
        prepare_dir(dir)?;
        let diagnostics = DiagnosticsWriter::create(&dir.join("diagnostics.csv"), species)?;
        Ok(Self { dir, diagnostics, cadence, last_step, written: BTreeSet::new(), io_error: None })
    }

    fn observe(&mut self, d: &StepDiagnostics, mu: &SpeciesField) -> crossdiff::Result<()> {
        let res = self.diagnostics.write(d).and_then(|_| {
            if d.step % self.cadence == 0 || d.step == self.last_step {
                self.snapshot(d.step, mu)
            } else {
                Ok(())
            }
        });
        res.map_err(|e| {
            let msg = e.to_string();
            self.io_error = Some(e);
            crossdiff::Error::Config(msg)
        })
    }

    fn snapshot(&mut self, step: usize, mu: &SpeciesField) -> Result<(), CliError> {
        if self.written.insert(step) {
            output::write_fields(&output::fields_path(self.dir, step), mu)?;
        }
        Ok(())
    }

    /// Writes kept states the streaming pass skipped (an early stop on a
    /// stationary state).
    fn finish(&mut self, traj: &Trajectory) -> Result<(), CliError> {
        for (step, mu) in &traj.states {
            self.snapshot(*step, mu)?;
        }
        Ok(())
    }

    fn failure(&mut self, f: &FlowFailure) -> CliError {
        if let Some(e) = self.io_error.take() {
            return e;
        }
        if let Err(e) = self.finish(&f.partial) {
            return e;
        }
        CliError::Solver { message: f.to_string(), diagnostics: Some(self.diagnostics.path().to_path_buf()) }
    }
}

fn outcome(traj: &Trajectory) -> serde_json::Value {
    let last = traj.diagnostics.last();
    json!({
        "status": if traj.stationary { "stationary" } else { "completed" },
        "steps_completed": last.map(|d| d.step).unwrap_or(0),
        "final_time": last.map(|d| d.time).unwrap_or(0.0),
        "unconverged_steps": traj.diagnostics.iter().filter(|d| !d.converged).count(),
    })
}

fn failed_outcome(f: &FlowFailure) -> serde_json::Value {
    json!({
        "status": "failed",
        "failed_step": f.step,
        "steps_completed": f.partial.diagnostics.last().map(|d| d.step).unwrap_or(0),
        "error": f.error.to_string(),
    })
}

fn write_meta(
    dir: &Path,
    command: &str,
    cfg: &RunConfig,
    extra: serde_json::Value,
    outcome: serde_json::Value,
) -> Result<(), CliError> {
    let config = serde_json::to_value(cfg).map_err(|e| CliError::Io(e.to_string()))?;
    let meta = json!({
        "command": command,
        "config": config,
        "settings": extra,
        "outcome": outcome,
    });
    output::write_json(&dir.join("run_meta.json"), &meta)
}

/// Gradient-flow run with the JKO scheme.
pub fn cmd_run(cfg: &RunConfig) -> Result<(), CliError> {
    let dir = cfg.output_dir.as_path();
    let mu0 = cfg.initial_state()?;
    let jko = cfg.jko(cfg.tau, cfg.steps);
    let mut sink = Sink::new(dir, mu0.species_count(), cfg.cadence, cfg.steps)?;
    info!("running {} for {} steps of size {}", cfg.model.name(), cfg.steps, cfg.tau);
    let result = run_flow_with(&mu0, &cfg.model, &jko, &mut |d, mu| sink.observe(d, mu));
    match result {
        Ok(traj) => {
            sink.finish(&traj)?;
            write_meta(dir, "run", cfg, json!({}), outcome(&traj))
        }
        Err(f) => {
            write_meta(dir, "run", cfg, json!({}), failed_outcome(&f))?;
            Err(sink.failure(&f))
        }
    }
}

/// Number of steps of size `tau` that reach `t_end`, rejecting horizons
/// that are not a whole multiple of the step.
fn whole_steps(t_end: f64, tau: f64, what: &str) -> Result<usize, CliError> {
    let n = (t_end / tau).round();
    if (n * tau - t_end).abs() > 1e-9 * t_end.max(1.0) {
        return Err(CliError::Config(format!("{what}: horizon {t_end} is not a multiple of the step {tau}")));
    }
    Ok(n as usize)
}

fn reference_to(cfg: &RunConfig, dir: &Path, t_end: f64, cadence: usize) -> Result<SpeciesField, CliError> {
    let solver = &cfg.reference.solver;
    let steps = whole_steps(t_end, solver.tau_ref, "reference.t_end")?;
    let mu0 = cfg.initial_state()?;
    let mut sink = Sink::new(dir, mu0.species_count(), cadence, steps)?;
    info!("reference run: {steps} backward Euler steps of size {}", solver.tau_ref);
    let result = run_reference_with(&mu0, &cfg.model, steps, cadence, solver, &mut |d, mu| sink.observe(d, mu));
    let settings = json!({ "tau_ref": solver.tau_ref, "t_end": t_end, "steps": steps, "cadence": cadence });
    match result {
        Ok(traj) => {
            sink.finish(&traj)?;
            write_meta(dir, "reference", cfg, settings, outcome(&traj))?;
            let (_, last) = traj.states.last().expect("initial state is always kept");
            Ok(last.clone())
        }
        Err(f) => {
            write_meta(dir, "reference", cfg, settings, failed_outcome(&f))?;
            Err(sink.failure(&f))
        }
    }
}

/// Backward Euler reference trajectory in the same file layout as `run`.
pub fn cmd_reference(cfg: &RunConfig) -> Result<(), CliError> {
    reference_to(cfg, &cfg.output_dir, cfg.reference.t_end, cfg.reference.cadence).map(|_| ())
}

/// JKO run of length `t_end` at step `tau`. When `t_end` is not a multiple
/// of `tau` the last step is shortened so the run ends exactly at `t_end`.
fn study_member(cfg: &RunConfig, dir: &Path, tau: f64, t_end: f64) -> Result<SpeciesField, CliError> {
    let full = (t_end / tau + 1e-9).floor() as usize;
    let rest = t_end - full as f64 * tau;
    let mut taus = vec![tau; full];
    if rest > 1e-9 * t_end {
        taus.push(rest);
    }
    let steps = taus.len();
    let mu0 = cfg.initial_state()?;
    let jko = cfg.jko(tau, steps);
    let mut sink = Sink::new(dir, mu0.species_count(), cfg.cadence, steps)?;
    let settings = json!({ "tau": tau, "t_end": t_end, "step_sizes": taus });
    let mut traj = Trajectory::default();

    let fail = |sink: &mut Sink, traj: Trajectory, step: usize, error: crossdiff::Error| {
        let f = FlowFailure { step, error, partial: traj };
        match write_meta(dir, "study-convergence", cfg, settings.clone(), failed_outcome(&f)) {
            Ok(()) => sink.failure(&f),
            Err(e) => e,
        }
    };
    let init = StepDiagnostics::initial(&mu0, &cfg.model).and_then(|d| sink.observe(&d, &mu0).map(|_| d));
    match init {
        Ok(d) => traj.diagnostics.push(d),
        Err(e) => return Err(fail(&mut sink, traj, 0, e)),
    }
    traj.states.push((0, mu0.clone()));
    let mut mu = mu0;
    let mut warm = StepWarmStart::default();
    let mut time = 0.0;
    for (i, &dt) in taus.iter().enumerate() {
        let step = i + 1;
        let advance = jko_step(&mu, &cfg.model, dt, &jko, &mut warm, step).and_then(|(next, mut d)| {
            time += dt;
            d.time = time;
            sink.observe(&d, &next)?;
            Ok((next, d))
        });
        match advance {
            Ok((next, d)) => {
                traj.diagnostics.push(d);
                mu = next;
            }
            Err(e) => return Err(fail(&mut sink, traj, step, e)),
        }
    }
    traj.states.push((steps, mu.clone()));
    sink.finish(&traj)?;
    write_meta(dir, "study-convergence", cfg, settings, outcome(&traj))?;
    Ok(mu)
}

/// `ln(e_coarse / e_fine) / ln(tau_coarse / tau_fine)`.
pub fn observed_order(tau_coarse: f64, e_coarse: f64, tau_fine: f64, e_fine: f64) -> f64 {
    (e_coarse / e_fine).ln() / (tau_coarse / tau_fine).ln()
}

/// Time-step convergence study against the backward Euler reference.
pub fn cmd_convergence_study(cfg: &RunConfig) -> Result<Vec<StudyRow>, CliError> {
    let dir = cfg.output_dir.as_path();
    prepare_dir(dir)?;
    let t_end = cfg.study.t_end;
    let ref_steps = whole_steps(t_end, cfg.reference.solver.tau_ref, "study.t_end")?;
    let reference = reference_to(cfg, &dir.join("reference"), t_end, ref_steps.max(1))?;

    let mut rows: Vec<StudyRow> = Vec::new();
    for &tau in &cfg.study.taus {
        info!("study member tau = {tau}");
        let mu = study_member(cfg, &dir.join(format!("tau_{tau}")), tau, t_end)?;
        let err = relative_error(&mu, &reference)?;
        let order = rows.last().map(|p| observed_order(p.tau, p.relative_error, tau, err));
        rows.push(StudyRow { tau, relative_error: err, observed_order: order });
    }
    output::write_study(&dir.join("convergence.csv"), &rows)?;
    let table: Vec<_> = rows
        .iter()
        .map(|r| json!({ "tau": r.tau, "relative_error": r.relative_error, "observed_order": r.observed_order }))
        .collect();
    write_meta(
        dir,
        "study-convergence",
        cfg,
        json!({ "taus": cfg.study.taus, "t_end": t_end, "tau_ref": cfg.reference.solver.tau_ref }),
        json!({ "status": "completed", "table": table }),
    )?;
    Ok(rows)
}
