//! Metrics stream: one JSON object per line, one line per optimization step
//! and one per evaluation. Step lines carry the loss breakdown; evaluation
//! lines carry the error fractions. `wall_time` is seconds since the run
//! (or resume) started and is the only field exempt from bit-for-bit
//! reproducibility.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::losses::LossBreakdown;

use super::TrainError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub epoch: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss: Option<LossBreakdown>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub student_error: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_error: Option<f64>,
    pub wall_time: f64,
}

impl MetricsRecord {
    /// The reproducible portion: everything except wall time.
    pub fn deterministic_view(&self) -> MetricsRecord {
        MetricsRecord { wall_time: 0.0, ..self.clone() }
    }
}

pub fn write_metrics_line<W: Write>(w: &mut W, record: &MetricsRecord) -> std::io::Result<()> {
    let line = serde_json::to_string(record).expect("metrics record serializes");
    writeln!(w, "{line}")
}

/// Reads a whole metrics file, failing with the 1-based line number of the
/// first malformed line. Blank lines are ignored.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>, TrainError> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: MetricsRecord = serde_json::from_str(&line)
            .map_err(|e| TrainError::Metrics { line: idx + 1, message: e.to_string() })?;
        out.push(record);
    }
    Ok(out)
}
