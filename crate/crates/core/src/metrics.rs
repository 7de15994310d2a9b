//! Per-round metrics and the files a run leaves behind.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Plane density at or below which an MSB plane counts as prunable.
pub const PRUNABLE_DENSITY: f64 = 0.03;

pub const CSV_HEADER: [&str; 10] = [
    "round",
    "test_loss",
    "test_accuracy",
    "mean_client_bits",
    "client_bits",
    "global_bits",
    "msb_density",
    "prunable_msb_planes",
    "pruned_planes",
    "uploaded_bits",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: u64,
    pub test_loss: f64,
    pub test_accuracy: f64,
    /// Mean over clients of each client's assigned average bit-width.
    pub mean_client_bits: f64,
    /// Assigned average bit-width of every client after the round.
    pub client_bits: Vec<f64>,
    /// Aggregated per-layer bit-widths.
    pub global_bits: Vec<f64>,
    /// Per-layer MSB density before pruning, averaged over participants.
    pub msb_density: Vec<f64>,
    pub prunable_msb_planes: u64,
    pub pruned_planes: u64,
    /// Upload size per participant, in participant order.
    pub uploaded_bits: Vec<u64>,
}

/// One line of `rounds.jsonl`: the CSV row plus values that are not
/// reproducible or too wide for the table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    #[serde(flatten)]
    pub metrics: RoundMetrics,
    pub participants: Vec<usize>,
    /// `(client_id, p_n)` aggregation weights.
    pub aggregation_weights: Vec<(usize, f64)>,
    /// Per-participant bit-widths received and uploaded.
    pub delivered_bits: Vec<Vec<u8>>,
    pub uploaded_layer_bits: Vec<Vec<u8>>,
    pub wall_time_ms: f64,
}

fn join<T: ToString>(values: &[T]) -> String {
    values.iter().map(T::to_string).collect::<Vec<_>>().join(";")
}

impl RoundMetrics {
    pub fn csv_row(&self) -> [String; 10] {
        [
            self.round.to_string(),
            self.test_loss.to_string(),
            self.test_accuracy.to_string(),
            self.mean_client_bits.to_string(),
            join(&self.client_bits),
            join(&self.global_bits),
            join(&self.msb_density),
            self.prunable_msb_planes.to_string(),
            self.pruned_planes.to_string(),
            join(&self.uploaded_bits),
        ]
    }
}

pub fn write_metrics_csv(path: &Path, rows: &[RoundMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CSV_HEADER)?;
    for row in rows {
        w.write_record(row.csv_row())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads back `(round, test_loss, test_accuracy, mean_client_bits)` from a
/// metrics file; list columns are skipped.
pub fn read_metrics_summary(path: &Path) -> Result<Vec<(u64, f64, f64, f64)>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.deserialize::<(u64, f64, f64, f64, String, String, String, u64, u64, String)>() {
        let (round, loss, acc, bits, ..) = rec?;
        out.push((round, loss, acc, bits));
    }
    Ok(out)
}

pub fn write_rounds_jsonl(path: &Path, records: &[RoundRecord]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = BufWriter::new(File::create(path)?);
    for rec in records {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> RoundMetrics {
        RoundMetrics {
            round: 1,
            test_loss: 0.5,
            test_accuracy: 0.75,
            mean_client_bits: 3.0,
            client_bits: vec![2.0, 4.0],
            global_bits: vec![3.5],
            msb_density: vec![0.25],
            prunable_msb_planes: 0,
            pruned_planes: 1,
            uploaded_bits: vec![100, 200],
        }
    }

    #[test]
    fn lists_are_semicolon_joined() {
        let row = sample().csv_row();
        assert_eq!(row[4], "2;4");
        assert_eq!(row[9], "100;200");
    }

    #[test]
    fn csv_summary_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        write_metrics_csv(&path, &[sample()]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("round,test_loss,test_accuracy,mean_client_bits,"));
        assert_eq!(read_metrics_summary(&path).unwrap(), vec![(1, 0.5, 0.75, 3.0)]);
    }
}
