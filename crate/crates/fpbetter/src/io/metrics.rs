//! Per-epoch training metrics, persisted as line-delimited JSON.
//!
//! The metrics file is part of the deterministic run output: identical
//! configurations write byte-identical files. Wall-clock timings therefore
//! live in a separate sidecar (`timing.jsonl`), written by the CLI.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One training epoch's record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    /// Survival-probability floor in effect during this epoch.
    pub p_min: f64,
    /// Expected active blocks under the epoch's schedule.
    pub expected_blocks: f64,
    /// Mean adversarial training loss over the epoch's iterations.
    pub train_adv_loss: f64,
    /// Fraction of branches executed by training forwards:
    /// executed / (forward passes * L).
    pub branch_fraction: f64,
    /// Clean accuracy on the evaluation split (when evaluated this epoch).
    pub clean_acc: Option<f64>,
    /// PGD-10 robust accuracy on the evaluation split.
    pub pgd10_acc: Option<f64>,
    /// PGD-10 robust accuracy on the fixed training subset that the
    /// collapse monitor watches.
    pub train_pgd10_acc: Option<f64>,
}

/// Write one JSON record per line.
pub fn write_metrics(path: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for m in metrics {
        let line = serde_json::to_string(m)
            .map_err(|e| Error::Dataset(format!("metrics encode: {e}")))?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Dataset(format!("metrics line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        let records = vec![
            EpochMetrics {
                epoch: 0,
                lr: 0.1,
                p_min: 0.5,
                expected_blocks: 5.75,
                train_adv_loss: 0.693,
                branch_fraction: 0.71,
                clean_acc: Some(0.9),
                pgd10_acc: Some(0.5),
                train_pgd10_acc: None,
            },
            EpochMetrics {
                epoch: 1,
                lr: 0.01,
                p_min: 0.54,
                expected_blocks: 5.84,
                train_adv_loss: 0.65,
                branch_fraction: 0.72,
                clean_acc: None,
                pgd10_acc: None,
                train_pgd10_acc: None,
            },
        ];
        write_metrics(&path, &records).unwrap();
        assert_eq!(read_metrics(&path).unwrap(), records);
    }
}
