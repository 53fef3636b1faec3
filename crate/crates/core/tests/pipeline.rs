#![allow(clippy::field_reassign_with_default)]

use blockprune::bpi::{probe_mode, PatchHead};
use blockprune::config::RunConfig;
use blockprune::data::{write_idx_images, write_idx_labels, DataSource, SyntheticSpec};
use blockprune::schedule::{self, Phase};
use blockprune::{Error, MaskSet, VitConfig};

fn tiny() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 1;
    cfg.model = VitConfig {
        image_size: 16,
        embed_dim: 16,
        heads: 2,
        depth: 2,
        mlp_ratio: 2,
        ..VitConfig::default()
    };
    cfg.data = DataSource::Synthetic(SyntheticSpec {
        image_size: 16,
        train_per_class: 4,
        val_per_class: 2,
        ..SyntheticSpec::default()
    });
    cfg.train.batch_size = 8;
    cfg.schedule.epochs_warmup = 1;
    cfg.schedule.epochs_sparsify = 2;
    cfg.schedule.epochs_sharpen = 2;
    cfg.schedule.epochs_finetune = 1;
    cfg.bpi.patch_head = PatchHead::PooledLinear;
    cfg
}

#[test]
fn schedule_follows_its_ramps() {
    let mut cfg = tiny();
    cfg.pruning.keep_ratio = 0.4;
    let (train, val) = cfg.data.load(16, 10).unwrap();
    let out = schedule::run_pruning(schedule::init_model(&cfg).unwrap(), &cfg, &train, &val, &mut ()).unwrap();

    let phases: Vec<Phase> = out.epochs.iter().map(|r| r.phase).collect();
    use Phase::*;
    assert_eq!(phases, [Warmup, Sparsify, Sparsify, Sharpen, Sharpen, Finetune]);

    // One update per epoch outside warm-up; targets fall, then hold at κ^m
    // while the temperature falls to its floor.
    let t = &out.trajectory;
    assert_eq!(t.len(), 4);
    assert!(t.windows(2).all(|w| w[1].kappa_target <= w[0].kappa_target));
    assert!(t.windows(2).all(|w| w[1].tau <= w[0].tau));
    assert_eq!(t[1].kappa_target, 0.4);
    assert_eq!(t[3].tau, cfg.pruning.tau_floor);
    for p in t {
        assert!((p.kept_fraction - p.kappa_target).abs() < 0.05, "{p:?}");
    }
    assert_eq!(out.updates.len(), 4 * 4, "one row per block per update");

    let s = &out.summary;
    assert!((s.kept_fraction - 0.4).abs() < 0.05);
    assert_eq!(s.params_remaining, out.model.block_params());
    // Stored as f32, so the sharpest masks may saturate.
    assert!(out
        .masks
        .blocks
        .iter()
        .flat_map(|b| b.m_in.iter())
        .all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn pruning_is_deterministic() {
    let cfg = tiny();
    let (train, val) = cfg.data.load(16, 10).unwrap();
    let a = schedule::run_pruning(schedule::init_model(&cfg).unwrap(), &cfg, &train, &val, &mut ()).unwrap();
    let b = schedule::run_pruning(schedule::init_model(&cfg).unwrap(), &cfg, &train, &val, &mut ()).unwrap();
    assert_eq!(a.epochs, b.epochs);
    assert_eq!(a.updates, b.updates);
    assert_eq!(a.masks, b.masks);
    assert_eq!(a.model.store.tensors(), b.model.store.tensors());
}

#[test]
fn sharpen_without_reranking_keeps_the_kept_set() {
    let mut cfg = tiny();
    cfg.schedule.updates_during_sharpen = false;
    let (train, val) = cfg.data.load(16, 10).unwrap();
    let out = schedule::run_pruning(schedule::init_model(&cfg).unwrap(), &cfg, &train, &val, &mut ()).unwrap();
    // Only sparsification updates produce block rows.
    assert_eq!(out.updates.len(), 2 * 4);
    let last = out.trajectory.last().unwrap();
    assert_eq!(last.tau, cfg.pruning.tau_floor);
}

#[test]
fn frozen_mode_barely_moves_the_backbone() {
    let mut cfg = tiny();
    cfg.optimizer.frozen = true;
    let (train, val) = cfg.data.load(16, 10).unwrap();
    let out = schedule::run_pruning(schedule::init_model(&cfg).unwrap(), &cfg, &train, &val, &mut ()).unwrap();
    assert!(out.summary.frozen);
    assert!(out.summary.backbone_rel_change < 1e-4);
    let mut live = tiny();
    live.optimizer.frozen = false;
    let moved = schedule::run_pruning(schedule::init_model(&live).unwrap(), &live, &train, &val, &mut ()).unwrap();
    assert!(moved.summary.backbone_rel_change > 1e-3);
}

#[test]
fn infeasible_targets_fail_before_training() {
    let mut cfg = tiny();
    cfg.pruning.keep_ratio = 0.01;
    let (train, val) = cfg.data.load(16, 10).unwrap();
    let err = schedule::run_pruning(schedule::init_model(&cfg).unwrap(), &cfg, &train, &val, &mut ()).unwrap_err();
    assert!(matches!(err, Error::Infeasible(_)), "{err}");
    cfg.pruning.kappa_floor = 0.0;
    assert!(
        matches!(schedule::check_feasible(&cfg), Err(Error::Infeasible(_))),
        "guards alone"
    );
}

#[test]
fn idx_data_trains() {
    let dir = tempfile::tempdir().unwrap();
    let (side, n) = (20, 30);
    let pixels: Vec<u8> = (0..n * side * side).map(|i| ((i * 37) % 251) as u8).collect();
    let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
    let p = |s: &str| dir.path().join(s);
    write_idx_images(&p("ti"), side, side, &pixels).unwrap();
    write_idx_labels(&p("tl"), &labels).unwrap();
    write_idx_images(&p("vi"), side, side, &pixels[..10 * side * side]).unwrap();
    write_idx_labels(&p("vl"), &labels[..10]).unwrap();
    let mut cfg = tiny();
    cfg.model.channels = 1;
    cfg.data = DataSource::Idx {
        train_images: p("ti"),
        train_labels: p("tl"),
        val_images: p("vi"),
        val_labels: p("vl"),
    };
    let (train, val) = cfg.data.load(16, 10).unwrap();
    assert_eq!((train.len(), val.len(), train.side, train.channels), (30, 10, 16, 1));
    let mut model = schedule::init_model(&cfg).unwrap();
    let rows = schedule::train_plain(&mut model, &cfg, &train, &val, 1, 0, Phase::Train, &mut |_, _| Ok(())).unwrap();
    assert!(rows[0].loss.is_finite());

    write_idx_labels(&p("bad"), &[3, 12]).unwrap();
    write_idx_images(&p("two"), side, side, &pixels[..2 * side * side]).unwrap();
    cfg.data = DataSource::Idx {
        train_images: p("two"),
        train_labels: p("bad"),
        val_images: p("vi"),
        val_labels: p("vl"),
    };
    assert!(cfg.data.load(16, 10).is_err(), "label 12 is out of range");
}

#[test]
fn probe_is_read_only_and_repeatable() {
    let mut cfg = tiny();
    cfg.probe.epochs = 1;
    let (train, val) = cfg.data.load(16, 10).unwrap();
    let model = schedule::init_model(&cfg).unwrap();
    let before = model.clone();
    let masks = MaskSet::ones(&cfg.model);
    let a = probe_mode(
        &model,
        Some(&masks),
        &cfg.bpi_config(),
        &train,
        &val,
        &cfg.probe_config(),
    )
    .unwrap();
    let b = probe_mode(
        &model,
        Some(&masks),
        &cfg.bpi_config(),
        &train,
        &val,
        &cfg.probe_config(),
    )
    .unwrap();
    assert_eq!(a, b);
    assert_eq!(a.class.len(), 4);
    assert_eq!(model.store.tensors(), before.store.tensors());
}
