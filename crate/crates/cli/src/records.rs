//! Line-delimited metrics files and two-column curve data.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use msl_core::meta::Mode;
use msl_core::RunRecord;
use serde::{Deserialize, Serialize};

/// One outer iteration as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsLine {
    pub iter: usize,
    pub mode: String,
    pub outer_loss: f64,
    pub step_losses: Vec<f64>,
    pub weights: Vec<f64>,
    pub wall_ms: f64,
}

impl MetricsLine {
    pub fn new(r: &RunRecord, mode: Mode) -> Self {
        Self {
            iter: r.outer_iter,
            mode: mode.as_str().to_string(),
            outer_loss: r.outer_loss,
            step_losses: r.per_step_losses.clone(),
            weights: r.weights.clone(),
            wall_ms: r.wall_ms,
        }
    }

    pub fn to_record(&self) -> RunRecord {
        RunRecord {
            outer_iter: self.iter,
            outer_loss: self.outer_loss,
            per_step_losses: self.step_losses.clone(),
            weights: self.weights.clone(),
            wall_ms: self.wall_ms,
        }
    }
}

/// Appends one JSON object per line and flushes after each, so the file
/// is parseable at any point of a run.
pub struct MetricsWriter {
    out: BufWriter<File>,
    mode: Mode,
}

impl MetricsWriter {
    /// Creates (or truncates) `path`.
    pub fn create(path: &Path, mode: Mode) -> std::io::Result<Self> {
        Ok(Self {
            out: BufWriter::new(File::create(path)?),
            mode,
        })
    }

    pub fn write(&mut self, r: &RunRecord) -> std::io::Result<()> {
        let line = serde_json::to_string(&MetricsLine::new(r, self.mode))?;
        writeln!(self.out, "{line}")?;
        self.out.flush()
    }
}

/// Reads every complete line; a torn final line is ignored.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsLine>, String> {
    let f = File::open(path).map_err(|e| format!("cannot open metrics {}: {e}", path.display()))?;
    let lines: Vec<String> = BufReader::new(f)
        .lines()
        .collect::<Result<_, _>>()
        .map_err(|e| format!("cannot read metrics {}: {e}", path.display()))?;
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(rec) => out.push(rec),
            Err(_) if i + 1 == lines.len() => break,
            Err(e) => return Err(format!("{}:{}: {e}", path.display(), i + 1)),
        }
    }
    Ok(out)
}

/// `iteration value` rows.
pub fn curve_text(points: impl IntoIterator<Item = (usize, f64)>) -> String {
    points.into_iter().map(|(i, v)| format!("{i} {v}\n")).collect()
}
