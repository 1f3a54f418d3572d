//! Run configuration: a TOML file read as flat dotted keys.

use std::collections::BTreeMap;
use std::path::PathBuf;

use crossdiff::cone::ProjectionMethod;
use crossdiff::grid::Grid;
use crossdiff::jko::JkoConfig;
use crossdiff::models::Model;
use crossdiff::pdfb::PdfbConfig;
use crossdiff::reference::ReferenceConfig;
use crossdiff::state::SpeciesField;
use serde::Serialize;

use crate::error::CliError;

const MODEL_NAMES: [&str; 4] = ["skt", "surfactant", "two_layer_film", "saturation_fp"];

/// Keys accepted besides the per-model parameters `model.<name>`.
const KEYS: &[&str] = &[
    "model.name",
    "model.dim",
    "grid.lo",
    "grid.hi",
    "grid.cells",
    "time.tau",
    "time.steps",
    "pdfb.gamma",
    "pdfb.gamma_bar",
    "pdfb.tol",
    "pdfb.max_iter",
    "pdfb.method",
    "pdfb.step_factor",
    "pdfb.step_ratio",
    "pdfb.power_iterations",
    "pdfb.window",
    "output.dir",
    "output.cadence",
    "run.strict_dissipation",
    "run.stationary_tol",
    "initial.constant",
    "study.taus",
    "study.t_end",
    "reference.tau_ref",
    "reference.tol",
    "reference.max_newton",
    "reference.max_halvings",
    "reference.t_end",
    "reference.cadence",
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridSettings {
    pub lo: f64,
    pub hi: f64,
    pub cells: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudySettings {
    pub taus: Vec<f64>,
    pub t_end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReferenceSettings {
    pub solver: ReferenceConfig,
    /// Final time of the `reference` command.
    pub t_end: f64,
    pub cadence: usize,
}

/// A default value chosen by this program rather than by the model definition.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Flagged {
    pub key: String,
    pub value: serde_json::Value,
}

/// Fully resolved configuration of one invocation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub model: Model,
    pub grid: GridSettings,
    pub tau: f64,
    pub steps: usize,
    pub pdfb: PdfbConfig,
    pub output_dir: PathBuf,
    pub cadence: usize,
    pub strict_dissipation: bool,
    pub stationary_tol: Option<f64>,
    /// Spatially constant initial densities replacing the model's profile.
    pub initial_constant: Option<Vec<f64>>,
    pub study: StudySettings,
    pub reference: ReferenceSettings,
    /// Defaults in effect that the model definitions leave open.
    pub assumed_defaults: Vec<Flagged>,
}

struct Entries<'a> {
    source: &'a str,
    values: BTreeMap<String, toml::Value>,
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, toml::Value>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

/// 1-based line on which `key` is assigned, following `[table]` headers.
pub fn locate(source: &str, key: &str) -> Option<usize> {
    let mut table = String::new();
    for (i, raw) in source.lines().enumerate() {
        let line = raw.trim();
        if line.starts_with('[') {
            table = line.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            continue;
        }
        let Some((lhs, _)) = line.split_once('=') else { continue };
        let lhs: String = lhs.split('.').map(|s| s.trim().trim_matches('"')).collect::<Vec<_>>().join(".");
        let full = if table.is_empty() { lhs } else { format!("{table}.{lhs}") };
        if full == key {
            return Some(i + 1);
        }
    }
    None
}

impl<'a> Entries<'a> {
    fn err(&self, key: &str, msg: impl std::fmt::Display) -> CliError {
        match locate(self.source, key) {
            Some(line) => CliError::Config(format!("line {line}, key '{key}': {msg}")),
            None => CliError::Config(format!("key '{key}': {msg}")),
        }
    }

    fn take(&mut self, key: &str) -> Option<toml::Value> {
        self.values.remove(key)
    }

    fn float(&mut self, key: &str) -> Result<Option<f64>, CliError> {
        match self.take(key) {
            None => Ok(None),
            Some(toml::Value::Float(v)) => Ok(Some(v)),
            Some(toml::Value::Integer(v)) => Ok(Some(v as f64)),
            Some(other) => Err(self.err(key, format!("expected a number, found {}", other.type_str()))),
        }
    }

    fn count(&mut self, key: &str) -> Result<Option<usize>, CliError> {
        match self.take(key) {
            None => Ok(None),
            Some(toml::Value::Integer(v)) if v >= 0 => Ok(Some(v as usize)),
            Some(other) => Err(self.err(key, format!("expected a non-negative integer, found {other}"))),
        }
    }

    fn string(&mut self, key: &str) -> Result<Option<String>, CliError> {
        match self.take(key) {
            None => Ok(None),
            Some(toml::Value::String(s)) => Ok(Some(s)),
            Some(other) => Err(self.err(key, format!("expected a string, found {}", other.type_str()))),
        }
    }

    fn boolean(&mut self, key: &str) -> Result<Option<bool>, CliError> {
        match self.take(key) {
            None => Ok(None),
            Some(toml::Value::Boolean(b)) => Ok(Some(b)),
            Some(other) => Err(self.err(key, format!("expected true or false, found {}", other.type_str()))),
        }
    }

    fn floats(&mut self, key: &str) -> Result<Option<Vec<f64>>, CliError> {
        match self.take(key) {
            None => Ok(None),
            Some(toml::Value::Array(items)) => {
                let mut out = Vec::with_capacity(items.len());
                for v in items {
                    match v {
                        toml::Value::Float(x) => out.push(x),
                        toml::Value::Integer(x) => out.push(x as f64),
                        other => {
                            return Err(self.err(key, format!("expected numbers, found {}", other.type_str())))
                        }
                    }
                }
                Ok(Some(out))
            }
            Some(other) => Err(self.err(key, format!("expected an array, found {}", other.type_str()))),
        }
    }
}

fn positive(e: &Entries, key: &str, v: f64) -> Result<f64, CliError> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(e.err(key, format!("must be positive, got {v}")))
    }
}

impl RunConfig {
    /// Parses and resolves a configuration file's contents.
    pub fn parse(source: &str) -> Result<Self, CliError> {
        let table: toml::Table = source.parse().map_err(|e: toml::de::Error| {
            let line = e.span().map(|s| source[..s.start].matches('\n').count() + 1);
            match line {
                Some(l) => CliError::Config(format!("line {l}: {}", e.message())),
                None => CliError::Config(e.message().to_string()),
            }
        })?;
        let mut values = BTreeMap::new();
        flatten("", &table, &mut values);
        let mut e = Entries { source, values };
        let mut flagged = Vec::new();
        let mut flag = |key: &str, value: serde_json::Value| {
            flagged.push(Flagged { key: key.to_string(), value });
        };

        let name = e.string("model.name")?.ok_or_else(|| {
            CliError::Config(format!("missing key 'model.name' (one of {})", MODEL_NAMES.join(", ")))
        })?;
        if !MODEL_NAMES.contains(&name.as_str()) {
            return Err(e.err(
                "model.name",
                format!("unknown model '{name}'; valid models are {}", MODEL_NAMES.join(", ")),
            ));
        }
        let dim = e.count("model.dim")?.unwrap_or(1);
        let mut model = Model::by_name(&name, dim).map_err(|err| e.err("model.dim", err))?;
        let param_keys: Vec<String> = e
            .values
            .keys()
            .filter(|k| k.starts_with("model.") && !KEYS.contains(&k.as_str()))
            .cloned()
            .collect();
        for key in &param_keys {
            let pname = &key["model.".len()..];
            let v = e.float(key)?.expect("key is present");
            model.set(pname, v).map_err(|err| e.err(key, err))?;
        }
        for p in model.assumed_defaults() {
            let key = format!("model.{}", p.name);
            if !param_keys.contains(&key) {
                flag(&key, p.value.into());
            }
        }

        let d = model.defaults();
        let lo = e.float("grid.lo")?.unwrap_or(d.lo);
        let hi = e.float("grid.hi")?.unwrap_or(d.hi);
        if !(hi > lo) {
            return Err(e.err("grid.hi", format!("domain [{lo}, {hi}] is empty")));
        }
        let cells = e.count("grid.cells")?.unwrap_or(d.cells);
        if cells == 0 {
            return Err(e.err("grid.cells", "must be at least 1"));
        }
        let tau = match e.float("time.tau")? {
            Some(v) => positive(&e, "time.tau", v)?,
            None => d.tau,
        };
        let steps = match e.count("time.steps")? {
            Some(v) => v,
            None => {
                // the model definitions fix the horizon only for skt and two_layer_film
                if matches!(name.as_str(), "surfactant" | "saturation_fp") {
                    flag("time.steps", d.steps.into());
                }
                d.steps
            }
        };

        let mut pdfb = PdfbConfig { step_ratio: d.step_ratio, ..PdfbConfig::default() };
        if let Some(v) = e.float("pdfb.gamma")? {
            pdfb.gamma = Some(positive(&e, "pdfb.gamma", v)?);
        }
        if let Some(v) = e.float("pdfb.gamma_bar")? {
            pdfb.gamma_bar = Some(positive(&e, "pdfb.gamma_bar", v)?);
        }
        match e.float("pdfb.tol")? {
            Some(v) => pdfb.tol = positive(&e, "pdfb.tol", v)?,
            None => flag("pdfb.tol", pdfb.tol.into()),
        }
        match e.count("pdfb.max_iter")? {
            Some(0) => return Err(e.err("pdfb.max_iter", "must be at least 1")),
            Some(v) => pdfb.max_iter = v,
            None => flag("pdfb.max_iter", pdfb.max_iter.into()),
        }
        match e.string("pdfb.method")?.as_deref() {
            Some("newton") => pdfb.method = ProjectionMethod::Newton,
            Some("admm") => pdfb.method = ProjectionMethod::Admm,
            Some(other) => {
                return Err(e.err("pdfb.method", format!("unknown method '{other}' (newton or admm)")))
            }
            None => {}
        }
        match e.float("pdfb.step_factor")? {
            Some(v) => pdfb.step_factor = positive(&e, "pdfb.step_factor", v)?,
            None if pdfb.gamma.is_none() || pdfb.gamma_bar.is_none() => {
                flag("pdfb.step_factor", pdfb.step_factor.into())
            }
            None => {}
        }
        match e.float("pdfb.step_ratio")? {
            Some(v) => pdfb.step_ratio = positive(&e, "pdfb.step_ratio", v)?,
            None if pdfb.gamma.is_none() || pdfb.gamma_bar.is_none() => {
                flag("pdfb.step_ratio", pdfb.step_ratio.into())
            }
            None => {}
        }
        if let Some(v) = e.count("pdfb.power_iterations")? {
            pdfb.power_iterations = v.max(1);
        }
        if let Some(v) = e.count("pdfb.window")? {
            pdfb.window = v.max(1);
        }

        let output_dir = PathBuf::from(e.string("output.dir")?.unwrap_or_else(|| "output".to_string()));
        let cadence = e.count("output.cadence")?.unwrap_or(1);
        if cadence == 0 {
            return Err(e.err("output.cadence", "must be at least 1"));
        }
        let strict_dissipation = e.boolean("run.strict_dissipation")?.unwrap_or(false);
        let stationary_tol = match e.float("run.stationary_tol")? {
            Some(v) => Some(positive(&e, "run.stationary_tol", v)?),
            None => None,
        };

        let initial_constant = match e.floats("initial.constant")? {
            Some(v) if v.len() != model.species() => {
                return Err(e.err(
                    "initial.constant",
                    format!("expected {} values, one per species, got {}", model.species(), v.len()),
                ))
            }
            Some(v) if v.iter().any(|x| !(x.is_finite() && *x >= 0.0)) => {
                return Err(e.err("initial.constant", "densities must be finite and nonnegative"))
            }
            other => other,
        };

        let taus = match e.floats("study.taus")? {
            Some(v) if v.is_empty() => return Err(e.err("study.taus", "needs at least one time step")),
            Some(v) => {
                for &t in &v {
                    positive(&e, "study.taus", t)?;
                }
                v
            }
            None => vec![0.4, 0.2, 0.1, 0.05],
        };
        let study_t_end = match e.float("study.t_end")? {
            Some(v) => positive(&e, "study.t_end", v)?,
            None => 1.0,
        };

        let mut solver = ReferenceConfig::default();
        if let Some(v) = e.float("reference.tau_ref")? {
            solver.tau_ref = positive(&e, "reference.tau_ref", v)?;
        }
        if let Some(v) = e.float("reference.tol")? {
            solver.tol = positive(&e, "reference.tol", v)?;
        }
        match e.count("reference.max_newton")? {
            Some(v) => solver.max_newton = v,
            None => flag("reference.max_newton", solver.max_newton.into()),
        }
        if let Some(v) = e.count("reference.max_halvings")? {
            solver.max_halvings = v;
        }
        let ref_t_end = match e.float("reference.t_end")? {
            Some(v) => positive(&e, "reference.t_end", v)?,
            None => tau * steps as f64,
        };
        let ref_cadence = match e.count("reference.cadence")? {
            Some(0) => return Err(e.err("reference.cadence", "must be at least 1")),
            Some(v) => v,
            None => ((tau / solver.tau_ref).round() as usize).max(1),
        };

        if let Some(key) = e.values.keys().next().cloned() {
            let hint = if key.starts_with("model.") {
                let known: Vec<String> = model.params.iter().map(|p| format!("model.{}", p.name)).collect();
                format!(" (model parameters: {})", if known.is_empty() { "none".into() } else { known.join(", ") })
            } else {
                String::new()
            };
            return Err(e.err(&key, format!("unknown key{hint}")));
        }

        Ok(Self {
            model,
            grid: GridSettings { lo, hi, cells },
            tau,
            steps,
            pdfb,
            output_dir,
            cadence,
            strict_dissipation,
            stationary_tol,
            initial_constant,
            study: StudySettings { taus, t_end: study_t_end },
            reference: ReferenceSettings { solver, t_end: ref_t_end, cadence: ref_cadence },
            assumed_defaults: flagged,
        })
    }

    pub fn grid(&self) -> Result<Grid, CliError> {
        Ok(Grid::over_box(self.model.dim, self.grid.lo, self.grid.hi, self.grid.cells)?)
    }

    pub fn initial_state(&self) -> Result<SpeciesField, CliError> {
        let grid = self.grid()?;
        match &self.initial_constant {
            Some(values) => {
                let nc = grid.num_cells();
                let data = values.iter().flat_map(|&v| std::iter::repeat_n(v, nc)).collect();
                Ok(SpeciesField::new(grid, values.len(), data)?)
            }
            None => Ok(self.model.initial_data(grid)?),
        }
    }

    /// Time-loop settings at time step `tau`.
    pub fn jko(&self, tau: f64, steps: usize) -> JkoConfig {
        let mut cfg = JkoConfig::new(tau, steps);
        cfg.pdfb = self.pdfb.clone();
        cfg.cadence = self.cadence;
        cfg.strict_dissipation = self.strict_dissipation;
        cfg.stationary_tol = self.stationary_tol;
        cfg
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self, CliError> {
        let source = std::fs::read_to_string(path)
            .map_err(|err| CliError::Io(format!("cannot read {}: {err}", path.display())))?;
        Self::parse(&source)
    }
}
