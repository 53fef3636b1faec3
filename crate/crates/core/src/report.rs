//! Run-directory files: manifest, CSV metrics and the plain-text report.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::bpi::{normalize_by_mean, normalize_rows, ProbeRow};
use crate::budget::normalize_by_max;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::schedule::{EpochRow, PruneSummary, UpdateRow};

pub const MANIFEST: &str = "manifest.json";
pub const EPOCH_METRICS: &str = "metrics_epoch.csv";
pub const UPDATE_METRICS: &str = "metrics_update.csv";
pub const SUMMARY: &str = "summary.json";
pub const PROBE: &str = "probe.csv";
pub const PROBE_MAX: &str = "probe_max.csv";
pub const PROBE_MEAN: &str = "probe_mean.csv";
pub const BP_MAX: &str = "bp_max.csv";
pub const BP_MEAN: &str = "bp_mean.csv";

/// Written once before a run starts. Completion details (end time, files
/// actually produced) go into the summary so this file never changes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub started: String,
    pub threads: usize,
    pub config: RunConfig,
    /// Files the command will write, relative to the run directory.
    pub outputs: Vec<String>,
    /// Checkpoint the run starts from, if any.
    pub init_checkpoint: Option<PathBuf>,
    /// Baseline run directory used for accuracy deltas, if any.
    pub baseline: Option<PathBuf>,
}

/// Summary written when a run finishes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub command: String,
    pub finished: String,
    pub files: Vec<String>,
    /// Validation accuracy of the final model; absent for probe runs.
    pub acc_final: Option<f64>,
    /// Baseline accuracy and `acc_final − baseline` when a baseline is known.
    pub acc_baseline: Option<f64>,
    pub acc_delta: Option<f64>,
    pub prune: Option<PruneSummary>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    Ok(fs::write(path, serde_json::to_vec_pretty(value)?)?)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Format(format!("{}: {e}", path.display()))))
        .collect()
}

/// Max- and mean-normalised copies of `rows`, grouped by checkpoint.
pub fn normalized_probe_tables(rows: &[ProbeRow]) -> (Vec<ProbeRow>, Vec<ProbeRow>) {
    (
        normalize_rows(rows, normalize_by_max),
        normalize_rows(rows, normalize_by_mean),
    )
}

/// Block performance of the last update step, as probe-style rows.
pub fn last_update_rows(updates: &[UpdateRow], label: &str) -> Vec<ProbeRow> {
    let Some(last) = updates.last().map(|u| u.step) else {
        return Vec::new();
    };
    updates
        .iter()
        .filter(|u| u.step == last)
        .map(|u| ProbeRow {
            checkpoint: label.to_string(),
            block_index: u.block_index,
            block_type: u.block_type,
            bp_class: u.bp_class,
            bp_patch: u.bp_patch,
        })
        .collect()
}

/// Contents of a finished run directory.
#[derive(Clone, Debug)]
pub struct RunReport {
    pub manifest: RunManifest,
    pub summary: RunSummary,
    pub epochs: Vec<EpochRow>,
    pub updates: Vec<UpdateRow>,
    pub probe: Vec<ProbeRow>,
}

impl RunReport {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: RunManifest = read_json(&dir.join(MANIFEST))?;
        let summary: RunSummary = read_json(&dir.join(SUMMARY))?;
        let probing = manifest.command == "probe";
        let epochs = if probing {
            Vec::new()
        } else {
            read_csv(&dir.join(EPOCH_METRICS))?
        };
        let updates = if summary.prune.is_some() {
            read_csv(&dir.join(UPDATE_METRICS))?
        } else {
            Vec::new()
        };
        let probe = if probing {
            read_csv(&dir.join(PROBE))?
        } else {
            Vec::new()
        };
        Ok(RunReport {
            manifest,
            summary,
            epochs,
            updates,
            probe,
        })
    }

    /// Block-performance rows behind the normalised tables: the probe
    /// output, or the final budget update of a pruning run.
    pub fn bp_rows(&self) -> Vec<ProbeRow> {
        if self.probe.is_empty() {
            last_update_rows(&self.updates, "final")
        } else {
            self.probe.clone()
        }
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let m = &self.manifest;
        let _ = writeln!(s, "run: {} (seed {}, started {})", m.command, m.seed, m.started);
        if !self.epochs.is_empty() {
            let _ = writeln!(s, "epochs: {}", self.epochs.len());
        }
        if let Some(acc) = self.summary.acc_final {
            let _ = writeln!(s, "final accuracy: {acc:.4}");
        }
        if !self.probe.is_empty() {
            let mut names: Vec<&str> = self.probe.iter().map(|r| r.checkpoint.as_str()).collect();
            names.dedup();
            let _ = writeln!(s, "probed checkpoints: {}", names.join(", "));
        }
        if let (Some(b), Some(d)) = (self.summary.acc_baseline, self.summary.acc_delta) {
            let _ = writeln!(s, "baseline accuracy: {b:.4} (delta {d:+.4})");
        }
        if let Some(p) = &self.summary.prune {
            let _ = writeln!(
                s,
                "parameters: {} of {} kept ({:.2}% removed, target keep ratio {:.3})",
                p.params_remaining,
                p.params_total,
                100.0 * (1.0 - p.kept_fraction),
                p.keep_ratio_target
            );
            let _ = writeln!(s, "accuracy after compaction: {:.4}", p.acc_compacted);
            if p.frozen {
                let _ = writeln!(s, "frozen backbone: relative change {:.3e}", p.backbone_rel_change);
            }
            let _ = writeln!(
                s,
                "{:>5} {:>5} {:>8} {:>9} {:>9}  kept [in, out, inner]",
                "block", "type", "kappa", "params", "total"
            );
            for b in &p.blocks {
                let _ = writeln!(
                    s,
                    "{:>5} {:>5} {:>8.4} {:>9} {:>9}  {:?}",
                    b.block_index,
                    b.block_type.as_str(),
                    b.kappa_block,
                    b.params_remaining,
                    b.params_total,
                    b.kept
                );
            }
        }
        s
    }
}
