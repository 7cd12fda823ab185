use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Result, TceError};

pub const METRICS_FILE: &str = "metrics.tsv";
pub const METRICS_HEADER: &str = "epoch\tmean_loss\tlr\tr_t\tmean_TAC\tmean_MAC";

/// One row of `metrics.tsv`. Row 0 is the initialisation, whose loss is
/// `NaN`; `lr` is the rate used during the epoch and `r_t` the mining
/// radius at its end.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub r_t: f64,
    pub mean_tac: f64,
    pub mean_mac: f64,
}

impl EpochMetrics {
    pub fn describe(&self) -> String {
        format!(
            "epoch {}: loss {:.5} lr {} r(t) {:.4} TAC {:.4} MAC {:.4}",
            self.epoch, self.mean_loss, self.lr, self.r_t, self.mean_tac, self.mean_mac
        )
    }
}

pub fn to_tsv(rows: &[EpochMetrics]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.epoch, r.mean_loss, r.lr, r.r_t, r.mean_tac, r.mean_mac
        );
    }
    s
}

pub fn write(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    std::fs::write(path, to_tsv(rows)).map_err(|e| TceError::io(path, e))
}

/// Parses a metrics log written by [`write`].
pub fn parse(text: &str) -> Result<Vec<EpochMetrics>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(TceError::Dataset("metrics log has an unexpected header".into()));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = || TceError::Dataset(format!("metrics log line {} is malformed", i + 2));
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 6 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok(EpochMetrics {
                epoch: f[0].parse().map_err(|_| bad())?,
                mean_loss: num(f[1])?,
                lr: num(f[2])?,
                r_t: num(f[3])?,
                mean_tac: num(f[4])?,
                mean_mac: num(f[5])?,
            })
        })
        .collect()
}
