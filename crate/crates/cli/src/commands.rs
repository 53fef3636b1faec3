use std::fs;
use std::path::{Path, PathBuf};

use blockprune::bpi::{probe_mode, probe_rows, ProbeRow};
use blockprune::checkpoint;
use blockprune::config::RunConfig;
use blockprune::data::Dataset;
use blockprune::report::{self, RunManifest, RunReport, RunSummary};
use blockprune::schedule::{self, EpochRow, Phase, PruneObserver};
use blockprune::{Error, MaskSet, Result, Vit};

use crate::Common;

pub const EXIT_CONFIG: u8 = 3;
pub const EXIT_INFEASIBLE: u8 = 4;
pub const EXIT_NUMERIC: u8 = 5;
pub const EXIT_IO: u8 = 6;

/// Exit status for an error. clap already uses 2 for usage errors.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Infeasible(_) => EXIT_INFEASIBLE,
        Error::NonFinite { .. } => EXIT_NUMERIC,
        Error::Io(_) | Error::Json(_) | Error::Csv(_) | Error::Format(_) | Error::MissingFile(_) => EXIT_IO,
        _ => 1,
    }
}

const FINAL_CHECKPOINT: &str = "model.bin";

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(k) = common.keep_ratio {
        cfg.pruning.keep_ratio = k;
    }
    if common.frozen {
        cfg.optimizer.frozen = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Creates the run directory and writes the manifest and resolved config.
fn start_run(
    command: &str,
    common: &Common,
    cfg: &RunConfig,
    outputs: &[&str],
    init: Option<&Path>,
    baseline: Option<&Path>,
) -> Result<RunManifest> {
    fs::create_dir_all(&common.out)?;
    let manifest = RunManifest {
        command: command.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: cfg.seed,
        started: now(),
        threads: 1,
        config: cfg.clone(),
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
        init_checkpoint: init.map(Path::to_path_buf),
        baseline: baseline.map(Path::to_path_buf),
    };
    report::write_json(&common.out.join(report::MANIFEST), &manifest)?;
    fs::write(common.out.join("config.toml"), cfg.to_toml()?)?;
    Ok(manifest)
}

fn finish_run(dir: &Path, manifest: &RunManifest, mut summary: RunSummary) -> Result<()> {
    let mut files: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n != report::SUMMARY)
        .collect();
    files.push(report::SUMMARY.into());
    files.sort();
    summary.command = manifest.command.clone();
    summary.finished = now();
    summary.files = files;
    report::write_json(&dir.join(report::SUMMARY), &summary)
}

fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    cfg.data.load(cfg.model.image_size, cfg.model.num_classes)
}

fn periodic_name(epoch: usize) -> String {
    format!("ckpt_epoch{:03}.bin", epoch + 1)
}

fn meta(phase: Phase, epoch: usize, acc: Option<f64>) -> serde_json::Value {
    serde_json::json!({ "phase": phase.as_str(), "epoch": epoch, "acc": acc })
}

pub fn train(common: &Common) -> Result<()> {
    let cfg = resolve(common)?;
    let manifest = start_run(
        "train",
        common,
        &cfg,
        &[report::EPOCH_METRICS, FINAL_CHECKPOINT, report::SUMMARY],
        None,
        None,
    )?;
    let (train, val) = load_data(&cfg)?;
    let mut model = schedule::init_model(&cfg)?;
    let dir = common.out.clone();
    let every = cfg.train.checkpoint_every;
    let rows = schedule::train_plain(
        &mut model,
        &cfg,
        &train,
        &val,
        cfg.train.epochs,
        0,
        Phase::Train,
        &mut |row: &EpochRow, m: &Vit<f32>| {
            if every > 0 && (row.epoch + 1).is_multiple_of(every) {
                checkpoint::save(
                    &dir.join(periodic_name(row.epoch)),
                    m,
                    None,
                    meta(row.phase, row.epoch, Some(row.acc)),
                )?;
            }
            Ok(())
        },
    )?;
    report::write_csv(&dir.join(report::EPOCH_METRICS), &rows)?;
    let acc = rows.last().map(|r| r.acc);
    checkpoint::save(
        &dir.join(FINAL_CHECKPOINT),
        &model,
        None,
        meta(Phase::Train, cfg.train.epochs, acc),
    )?;
    finish_run(
        &dir,
        &manifest,
        RunSummary {
            command: String::new(),
            finished: String::new(),
            files: Vec::new(),
            acc_final: acc,
            acc_baseline: None,
            acc_delta: None,
            prune: None,
        },
    )
}

/// Saves periodic checkpoints (with the current soft masks) while pruning.
struct Saver {
    dir: PathBuf,
    every: usize,
}

impl PruneObserver for Saver {
    fn epoch(&mut self, row: &EpochRow, model: &Vit<f32>, masks: Option<&MaskSet>) -> Result<()> {
        if self.every > 0 && (row.epoch + 1).is_multiple_of(self.every) {
            checkpoint::save(
                &self.dir.join(periodic_name(row.epoch)),
                model,
                masks,
                meta(row.phase, row.epoch, Some(row.acc)),
            )?;
        }
        Ok(())
    }
}

fn baseline_accuracy(dir: &Path) -> Option<f64> {
    match report::read_json::<RunSummary>(&dir.join(report::SUMMARY)) {
        Ok(s) if s.acc_final.is_some() => s.acc_final,
        Ok(_) => {
            log::warn!("baseline {} has no final accuracy", dir.display());
            None
        }
        Err(e) => {
            log::warn!("baseline {} unusable: {e}", dir.display());
            None
        }
    }
}

pub fn prune(common: &Common, init: Option<PathBuf>, baseline: Option<PathBuf>) -> Result<()> {
    let cfg = resolve(common)?;
    schedule::check_feasible(&cfg)?;
    let manifest = start_run(
        "prune",
        common,
        &cfg,
        &[
            report::EPOCH_METRICS,
            report::UPDATE_METRICS,
            "trajectory.csv",
            "state.json",
            FINAL_CHECKPOINT,
            report::SUMMARY,
        ],
        init.as_deref(),
        baseline.as_deref(),
    )?;
    let model = match &init {
        Some(path) => {
            let ck = checkpoint::load(path)?;
            if ck.model.config != cfg.model {
                return Err(Error::Config(format!(
                    "{} was saved with a different model config",
                    path.display()
                )));
            }
            ck.model
        }
        None => schedule::init_model(&cfg)?,
    };
    if baseline.is_none() {
        log::warn!("no baseline run given; the summary will not report an accuracy delta");
    }
    let acc_baseline = baseline.as_deref().and_then(baseline_accuracy);
    let (train, val) = load_data(&cfg)?;
    let dir = common.out.clone();
    let mut saver = Saver {
        dir: dir.clone(),
        every: cfg.train.checkpoint_every,
    };
    let out = schedule::run_pruning(model, &cfg, &train, &val, &mut saver)?;
    report::write_csv(&dir.join(report::EPOCH_METRICS), &out.epochs)?;
    report::write_csv(&dir.join(report::UPDATE_METRICS), &out.updates)?;
    report::write_csv(&dir.join("trajectory.csv"), &out.trajectory)?;
    report::write_json(&dir.join("state.json"), &out.state)?;
    checkpoint::save(
        &dir.join(FINAL_CHECKPOINT),
        &out.model,
        Some(&out.masks),
        meta(Phase::Finetune, out.state.epoch, Some(out.summary.acc_final)),
    )?;
    let s = &out.summary;
    log::info!(
        "kept {} of {} block parameters ({:.4}), accuracy {:.4}",
        s.params_remaining,
        s.params_total,
        s.kept_fraction,
        s.acc_final
    );
    finish_run(
        &dir,
        &manifest,
        RunSummary {
            command: String::new(),
            finished: String::new(),
            files: Vec::new(),
            acc_final: Some(s.acc_final),
            acc_baseline,
            acc_delta: acc_baseline.map(|b| s.acc_final - b),
            prune: Some(out.summary),
        },
    )
}

fn checkpoint_label(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

pub fn probe(common: &Common, checkpoints: &[PathBuf]) -> Result<()> {
    let cfg = resolve(common)?;
    let manifest = start_run(
        "probe",
        common,
        &cfg,
        &[report::PROBE, report::PROBE_MAX, report::PROBE_MEAN, report::SUMMARY],
        None,
        None,
    )?;
    let (train, val) = load_data(&cfg)?;
    let mut rows: Vec<ProbeRow> = Vec::new();
    for path in checkpoints {
        let ck = checkpoint::load(path)?;
        if ck.model.config != cfg.model {
            return Err(Error::Config(format!(
                "{} does not match the configured model geometry",
                path.display()
            )));
        }
        // Soft masks only apply to an uncompacted model.
        let masks = ck.masks.as_ref().filter(|_| ck.model.is_dense());
        let bp = probe_mode(&ck.model, masks, &cfg.bpi_config(), &train, &val, &cfg.probe_config())?;
        log::info!("probed {}", path.display());
        rows.extend(probe_rows(&checkpoint_label(path), &bp));
    }
    let dir = &common.out;
    let (max, mean) = report::normalized_probe_tables(&rows);
    report::write_csv(&dir.join(report::PROBE), &rows)?;
    report::write_csv(&dir.join(report::PROBE_MAX), &max)?;
    report::write_csv(&dir.join(report::PROBE_MEAN), &mean)?;
    finish_run(
        dir,
        &manifest,
        RunSummary {
            command: String::new(),
            finished: String::new(),
            files: Vec::new(),
            acc_final: None,
            acc_baseline: None,
            acc_delta: None,
            prune: None,
        },
    )
}

pub fn report(dir: &Path) -> Result<()> {
    let run = RunReport::load(dir)?;
    print!("{}", run.render());
    let rows = run.bp_rows();
    if !rows.is_empty() {
        let (max, mean) = report::normalized_probe_tables(&rows);
        report::write_csv(&dir.join(report::BP_MAX), &max)?;
        report::write_csv(&dir.join(report::BP_MEAN), &mean)?;
        println!("wrote {} and {}", report::BP_MAX, report::BP_MEAN);
    }
    Ok(())
}

pub fn eval(common: &Common, path: &Path) -> Result<()> {
    let cfg = resolve(common)?;
    let ck = checkpoint::load(path)?;
    if ck.model.config != cfg.model {
        return Err(Error::Config(format!(
            "{} does not match the configured model geometry",
            path.display()
        )));
    }
    let (_, val) = load_data(&cfg)?;
    let masks = ck.masks.as_ref().filter(|_| ck.model.is_dense());
    let (loss, acc) = schedule::evaluate(&ck.model, masks, &val, cfg.train.batch_size, &cfg.train.augment)?;
    println!(
        "{}",
        serde_json::json!({
            "checkpoint": path.display().to_string(),
            "loss": loss,
            "acc": acc,
            "block_params": ck.model.block_params(),
        })
    );
    Ok(())
}
