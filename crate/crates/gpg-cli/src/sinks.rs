//! Metrics file writers. CSV columns follow the metrics-row field order;
//! JSONL carries one object per row with the same keys. Floats print in
//! Rust's shortest round-trip form, so identical runs produce identical
//! bytes.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;

use gpg_core::TrainMetricsRow;

pub const CSV_HEADER: &str = "step,mean_reward,mean_group_std,alpha,prop_all_zero,prop_all_one,loss,valid_proportion,collect_rounds_used";

pub fn write_csv(path: &Path, rows: &[TrainMetricsRow]) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.step,
            r.mean_reward,
            r.mean_group_std,
            r.alpha,
            r.prop_all_zero,
            r.prop_all_one,
            r.loss,
            r.valid_proportion,
            r.collect_rounds_used
        )?;
    }
    w.flush()
}

pub fn write_jsonl(path: &Path, rows: &[TrainMetricsRow]) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in rows {
        let line = serde_json::to_string(r).map_err(io::Error::other)?;
        writeln!(w, "{line}")?;
    }
    w.flush()
}

/// One line per seed of a sweep.
pub struct SummaryRow {
    pub seed: u64,
    pub steps: usize,
    pub final_mean_reward: f64,
    pub final_loss: f64,
    pub mean_alpha: f64,
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "seed,steps,final_mean_reward,final_loss,mean_alpha")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.seed, r.steps, r.final_mean_reward, r.final_loss, r.mean_alpha
        )?;
    }
    w.flush()
}
