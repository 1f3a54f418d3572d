//! CSV and JSON writers and the matching readers.
//!
//! Real numbers are written with 17 significant digits (`{:.16e}`), which
//! round-trips every `f64` exactly.

use std::fs::File;
use std::path::{Path, PathBuf};

use crossdiff::jko::StepDiagnostics;
use crossdiff::state::SpeciesField;

use crate::error::CliError;

pub fn real(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_real(s: &str, path: &Path) -> Result<f64, CliError> {
    s.trim()
        .parse()
        .map_err(|_| CliError::Io(format!("{}: '{s}' is not a number", path.display())))
}

fn create(path: &Path) -> Result<csv::Writer<File>, CliError> {
    let file = File::create(path).map_err(|e| CliError::Io(format!("cannot create {}: {e}", path.display())))?;
    Ok(csv::Writer::from_writer(file))
}

pub fn fields_path(dir: &Path, step: usize) -> PathBuf {
    dir.join(format!("fields_{step}.csv"))
}

pub fn fields_header(dim: usize, species: usize) -> Vec<String> {
    let mut h = vec!["x".to_string()];
    if dim == 2 {
        h.push("y".into());
    }
    h.extend((1..=species).map(|a| format!("mu_{a}")));
    h
}

/// One row per cell (cell index order) with its centre and densities.
pub fn write_fields(path: &Path, mu: &SpeciesField) -> Result<(), CliError> {
    let grid = mu.grid();
    let mut w = create(path)?;
    w.write_record(fields_header(grid.dim(), mu.species_count()))?;
    for c in 0..mu.num_cells() {
        let x = grid.cell_center(c);
        let mut row: Vec<String> = x[..grid.dim()].iter().map(|&v| real(v)).collect();
        row.extend(mu.at(c).iter().map(|&v| real(v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Header and rows of a fields file.
pub fn read_fields(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>), CliError> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        rows.push(rec.iter().map(|s| parse_real(s, path)).collect::<Result<Vec<_>, _>>()?);
    }
    Ok((header, rows))
}

pub fn diagnostics_header(species: usize) -> Vec<String> {
    let mut h = vec!["step".to_string(), "time".into(), "energy".into()];
    h.extend((1..=species).map(|a| format!("mass_{a}")));
    h.extend(["min_box_slack", "pdfb_iters", "primal_res", "dual_res"].map(String::from));
    h
}

/// Streams one diagnostics row per step, flushing after each row so that
/// a failed run leaves every completed step on disk.
pub struct DiagnosticsWriter {
    path: PathBuf,
    w: csv::Writer<File>,
}

impl DiagnosticsWriter {
    pub fn create(path: &Path, species: usize) -> Result<Self, CliError> {
        let mut w = create(path)?;
        w.write_record(diagnostics_header(species))?;
        w.flush()?;
        Ok(Self { path: path.to_path_buf(), w })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write(&mut self, d: &StepDiagnostics) -> Result<(), CliError> {
        let mut row = vec![d.step.to_string(), real(d.time), real(d.energy)];
        row.extend(d.masses.iter().map(|&m| real(m)));
        row.push(real(d.min_box_slack));
        row.push(d.pdfb_iterations.to_string());
        row.push(real(d.primal_residual));
        row.push(real(d.dual_residual));
        self.w.write_record(&row)?;
        self.w.flush()?;
        Ok(())
    }
}

/// Parses a diagnostics file back. The `converged` flag is not stored and
/// comes back as `true`.
pub fn read_diagnostics(path: &Path) -> Result<Vec<StepDiagnostics>, CliError> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    let species = header.iter().filter(|h| h.starts_with("mass_")).count();
    if header != diagnostics_header(species) {
        return Err(CliError::Io(format!("{}: unexpected header {header:?}", path.display())));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let f = |i: usize| parse_real(&rec[i], path);
        let int = |i: usize| {
            rec[i]
                .parse::<usize>()
                .map_err(|_| CliError::Io(format!("{}: '{}' is not an integer", path.display(), &rec[i])))
        };
        out.push(StepDiagnostics {
            step: int(0)?,
            time: f(1)?,
            energy: f(2)?,
            masses: (0..species).map(|a| f(3 + a)).collect::<Result<_, _>>()?,
            min_box_slack: f(3 + species)?,
            pdfb_iterations: int(4 + species)?,
            primal_residual: f(5 + species)?,
            dual_residual: f(6 + species)?,
            converged: true,
        });
    }
    Ok(out)
}

/// Row of the convergence table.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyRow {
    pub tau: f64,
    pub relative_error: f64,
    pub observed_order: Option<f64>,
}

/// Writes the table; the order column is left out for a single time step.
pub fn write_study(path: &Path, rows: &[StudyRow]) -> Result<(), CliError> {
    let mut w = create(path)?;
    let with_order = rows.len() > 1;
    if with_order {
        w.write_record(["tau", "relative_error", "observed_order"])?;
    } else {
        w.write_record(["tau", "relative_error"])?;
    }
    for r in rows {
        let mut rec = vec![real(r.tau), real(r.relative_error)];
        if with_order {
            rec.push(r.observed_order.map(real).unwrap_or_default());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_study(path: &Path) -> Result<Vec<StudyRow>, CliError> {
    let mut r = csv::Reader::from_path(path)?;
    let cols = r.headers()?.len();
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let order = if cols > 2 && !rec[2].is_empty() { Some(parse_real(&rec[2], path)?) } else { None };
        out.push(StudyRow {
            tau: parse_real(&rec[0], path)?,
            relative_error: parse_real(&rec[1], path)?,
            observed_order: order,
        });
    }
    Ok(out)
}

pub fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))
}
