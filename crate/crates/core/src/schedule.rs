//! The pruning run: warm-up, sparsification, sharpening, compaction and
//! fine-tuning, plus dense baseline training and evaluation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bpi::{BlockPerformance, BpAccumulator, BpiHeads};
use crate::budget::{allocate, block_importance};
use crate::config::{RunConfig, FROZEN_LR};
use crate::data::{batch_iter, epoch_rng, Augment, Dataset};
use crate::error::{Error, Result};
use crate::masking::{
    block_scales, guard_min, mask_update_count, normalize_and_concat, plan_keep_counts, values_from_ranks, BlockPlan,
    RankedBlockScore, TaylorAccumulator,
};
use crate::tensor::{AdamW, AdamWConfig, Tape, Tensor};
use crate::vit::{block_param_count, count_params, BlockKind, MaskGradients, MaskSet, Vit};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Dense baseline training.
    Train,
    Warmup,
    Sparsify,
    Sharpen,
    Finetune,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Train => "train",
            Phase::Warmup => "warmup",
            Phase::Sparsify => "sparsify",
            Phase::Sharpen => "sharpen",
            Phase::Finetune => "finetune",
        }
    }
}

/// `κ(t) = 1 − p (1 − κ^m)`.
pub fn intermediate_target(progress: f64, keep_ratio: f64) -> f64 {
    // Written around κ^m so the end of the ramp hits it exactly.
    let p = progress.clamp(0.0, 1.0);
    if p == 0.0 {
        1.0
    } else {
        keep_ratio + (1.0 - p) * (1.0 - keep_ratio)
    }
}

/// `τ = max(τ_floor, τ_0 (1 − q))`.
pub fn tau_ramp(progress: f64, tau0: f64, tau_floor: f64) -> f64 {
    (tau0 * (1.0 - progress.clamp(0.0, 1.0))).max(tau_floor)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub phase: Phase,
    pub loss: f64,
    pub acc: f64,
    pub kappa_global: f64,
    pub tau: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateRow {
    pub step: usize,
    pub block_index: usize,
    pub block_type: BlockKind,
    pub bp_class: f64,
    pub bp_patch: f64,
    pub kappa_block: f64,
    pub params_remaining: usize,
}

/// Global state at one update step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetPoint {
    pub step: usize,
    pub phase: Phase,
    /// Sparsification progress `p` (1 once sharpening starts).
    pub progress: f64,
    pub kappa_target: f64,
    /// Remaining / total block parameters after the update.
    pub kept_fraction: f64,
    pub tau: f64,
}

/// Phase, counters and the current targets of a pruning run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub phase: Phase,
    pub epoch: usize,
    pub step: usize,
    pub kappa_target: f64,
    pub tau: f64,
    pub seed: u64,
    pub updates: usize,
    pub stop_gradient_checks: usize,
}

/// Kept fraction of block parameters under `masks`.
pub fn kept_fraction(model: &Vit<f32>, masks: &MaskSet) -> Result<f64> {
    let (mut kept, mut total) = (0usize, 0usize);
    for i in 0..masks.len() {
        let p = count_params(&model.config, masks, i)?;
        kept += p.remaining;
        total += p.total;
    }
    Ok(kept as f64 / total as f64)
}

/// Mean loss and accuracy of `model` on `ds` (no augmentation other than
/// normalisation).
pub fn evaluate(
    model: &Vit<f32>,
    masks: Option<&MaskSet>,
    ds: &Dataset,
    batch_size: usize,
    aug: &Augment,
) -> Result<(f64, f64)> {
    if ds.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let aug = Augment { flip: false, ..*aug };
    let (mut loss, mut correct) = (0.0, 0usize);
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (images, labels) = ds.batch::<f32>(chunk, &aug, None)?;
        let (logits, _) = model.forward_masked(&images, masks)?;
        let mut tape = Tape::new();
        let l = tape.constant(logits.clone())?;
        let ce = tape.softmax_cross_entropy(l, &labels)?;
        loss += tape.value(ce).item() as f64 * chunk.len() as f64;
        correct += count_correct(&logits, &labels);
    }
    Ok((loss / ds.len() as f64, correct as f64 / ds.len() as f64))
}

fn count_correct(logits: &Tensor<f32>, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks_exact(k)
        .zip(labels)
        .filter(|(row, &l)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
            best == l
        })
        .count()
}

/// Outputs of one training step.
struct StepOut {
    loss: f64,
    bp: Option<BlockPerformance>,
    mask_grads: Option<MaskGradients>,
}

/// One optimisation step of the backbone, and of the heads when given.
fn train_step(
    model: &mut Vit<f32>,
    optim: &mut AdamW<f32>,
    masks: Option<&MaskSet>,
    heads: Option<&mut BpiHeads<f32>>,
    images: &Tensor<f32>,
    labels: &[usize],
    check_stop_gradient: bool,
) -> Result<StepOut> {
    let mut tape = Tape::new();
    let params = model.store.bind(&mut tape, true)?;
    let binding = masks.map(|m| m.bind(&mut tape, true)).transpose()?;
    let out = model.forward_on_tape(&mut tape, &params, binding.as_ref(), images)?;
    let task = tape.softmax_cross_entropy(out.logits, labels)?;
    let loss = tape.value(task).item() as f64;

    let mut bp = None;
    let mut total = task;
    let mut head_params = Vec::new();
    if let Some(h) = heads.as_deref() {
        head_params = h.bind(&mut tape)?;
        let record = h.record(&mut tape, &head_params, &out.states, labels)?;
        if check_stop_gradient {
            let g = tape.backward(record.loss)?;
            for (&v, name) in params.iter().zip(model.store.names()) {
                if g.get(v).is_some_and(|t| t.data().iter().any(|&x| x != 0.0)) {
                    return Err(Error::State(format!("head loss reached backbone tensor {name}")));
                }
            }
        }
        bp = Some(record.performance(&tape));
        total = tape.add(task, record.loss)?;
    }
    let grads = tape.backward(total)?;
    let g: Vec<Tensor<f32>> = params.iter().map(|&v| grads.get_or_zeros(v, tape.shape(v))).collect();
    let decay = model.store.decay_flags().to_vec();
    optim.step(model.store.tensors_mut(), &g, &decay)?;
    if let Some(h) = heads {
        h.apply_gradients(&tape, &head_params, &grads)?;
    }
    let mask_grads = binding.map(|b| b.gradients(&tape, Some(&grads))).transpose()?;
    Ok(StepOut { loss, bp, mask_grads })
}

fn model_optimizer(model: &Vit<f32>, cfg: &RunConfig, lr: f64) -> AdamW<f32> {
    AdamW::new(
        AdamWConfig {
            lr,
            weight_decay: cfg.optimizer.weight_decay,
            ..AdamWConfig::default()
        },
        model.store.tensors(),
    )
}

/// Fresh model for `cfg`, deterministic in the seed.
pub fn init_model(cfg: &RunConfig) -> Result<Vit<f32>> {
    Vit::new(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.seed))
}

fn check_data(cfg: &RunConfig, train: &Dataset, val: &Dataset) -> Result<()> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("train and validation sets must be non-empty".into()));
    }
    for ds in [train, val] {
        if ds.side != cfg.model.image_size || ds.channels != cfg.model.channels || ds.classes != cfg.model.num_classes {
            return Err(Error::Config("dataset geometry does not match the model".into()));
        }
    }
    Ok(())
}

/// Trains `model` without masks for `epochs`. `epoch_offset` numbers the
/// rows and seeds the shuffles; `on_epoch` runs after each epoch.
#[allow(clippy::too_many_arguments)]
pub fn train_plain(
    model: &mut Vit<f32>,
    cfg: &RunConfig,
    train: &Dataset,
    val: &Dataset,
    epochs: usize,
    epoch_offset: usize,
    phase: Phase,
    on_epoch: &mut dyn FnMut(&EpochRow, &Vit<f32>) -> Result<()>,
) -> Result<Vec<EpochRow>> {
    check_data(cfg, train, val)?;
    let mut optim = model_optimizer(model, cfg, cfg.optimizer.lr_model);
    let aug = cfg.train.augment;
    let mut rows = Vec::with_capacity(epochs);
    for e in 0..epochs {
        let epoch = epoch_offset + e;
        let mut flips = epoch_rng(cfg.seed, epoch as u64, 1);
        let (mut sum, mut n) = (0.0, 0usize);
        for idx in batch_iter(train.len(), cfg.train.batch_size, cfg.seed, epoch as u64)? {
            let (images, labels) = train.batch::<f32>(&idx, &aug, Some(&mut flips))?;
            let out = train_step(model, &mut optim, None, None, &images, &labels, false)?;
            sum += out.loss * idx.len() as f64;
            n += idx.len();
        }
        let (_, acc) = evaluate(model, None, val, cfg.train.batch_size, &aug)?;
        let row = EpochRow {
            epoch,
            phase,
            loss: sum / n as f64,
            acc,
            kappa_global: model.block_params() as f64 / dense_block_params(&model.config) as f64,
            tau: 0.0,
        };
        log::info!(
            "epoch {epoch} {} loss {:.4} acc {:.4}",
            phase.as_str(),
            row.loss,
            row.acc
        );
        on_epoch(&row, model)?;
        rows.push(row);
    }
    Ok(rows)
}

fn dense_block_params(config: &crate::vit::VitConfig) -> usize {
    let masks = MaskSet::ones(config);
    (0..masks.len())
        .map(|i| count_params(config, &masks, i).map(|p| p.total).unwrap_or(0))
        .sum()
}

/// Everything a pruning run produces.
#[derive(Clone, Debug)]
pub struct PruneOutcome {
    /// Compacted and fine-tuned model.
    pub model: Vit<f32>,
    /// Soft masks at the end of sharpening.
    pub masks: MaskSet,
    pub epochs: Vec<EpochRow>,
    pub updates: Vec<UpdateRow>,
    pub trajectory: Vec<TargetPoint>,
    pub state: RunState,
    pub summary: PruneSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockSummary {
    pub block_index: usize,
    pub block_type: BlockKind,
    pub kappa_block: f64,
    pub params_total: usize,
    pub params_remaining: usize,
    /// Kept channels `[in, out, inner]` after compaction.
    pub kept: [usize; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneSummary {
    pub keep_ratio_target: f64,
    pub params_total: usize,
    pub params_remaining: usize,
    pub kept_fraction: f64,
    /// Validation accuracy right after compaction, before fine-tuning.
    pub acc_compacted: f64,
    pub acc_final: f64,
    pub frozen: bool,
    /// `‖θ_end − θ_start‖ / ‖θ_start‖` of the backbone over the pruning phases.
    pub backbone_rel_change: f64,
    pub blocks: Vec<BlockSummary>,
}

fn flat_norm(store: &[Tensor<f32>]) -> f64 {
    store
        .iter()
        .flat_map(|t| t.data().iter())
        .map(|&v| (v as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn diff_norm(a: &[Tensor<f32>], b: &[Tensor<f32>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.data().iter().zip(y.data()))
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Hooks invoked while a pruning run progresses.
pub trait PruneObserver {
    fn epoch(&mut self, _row: &EpochRow, _model: &Vit<f32>, _masks: Option<&MaskSet>) -> Result<()> {
        Ok(())
    }
}

impl PruneObserver for () {}

/// Rebuilds all masks from accumulated statistics at one update step.
struct Updater<'a> {
    cfg: &'a RunConfig,
    bp: BpAccumulator,
    taylor: TaylorAccumulator,
    /// Ranks and kept count of the last update of each block.
    last: Vec<Option<(Vec<usize>, usize)>>,
}

impl Updater<'_> {
    fn rerank(
        &mut self,
        model: &Vit<f32>,
        masks: &mut MaskSet,
        target: f64,
        tau: f64,
        step: usize,
    ) -> Result<Vec<UpdateRow>> {
        let cfg = &self.cfg.pruning;
        let bp = self.bp.read_and_reset()?;
        let taylor = self.taylor.read_and_reset()?;
        let counts: Vec<_> = (0..masks.len())
            .map(|i| count_params(&model.config, masks, i))
            .collect::<Result<_>>()?;
        let totals: Vec<usize> = counts.iter().map(|c| c.total).collect();
        let denom: Vec<usize> = if cfg.static_param_count {
            totals.clone()
        } else {
            counts.iter().map(|c| c.remaining.max(1)).collect()
        };
        let imp = block_importance(&bp.class, &bp.patch, &denom, cfg.alpha, cfg.eps)?;
        let solution = allocate(&imp.merged, &totals, target, cfg.kappa_floor)?;
        let scales = cfg.scales();
        let ranked: Vec<RankedBlockScore> = masks
            .blocks
            .iter()
            .zip(&taylor)
            .map(|(b, t)| normalize_and_concat([&t[0], &t[1], &t[2]], block_scales(b.kind, &scales)))
            .collect::<Result<_>>()?;
        let plans: Vec<BlockPlan<'_>> = masks
            .blocks
            .iter()
            .zip(&ranked)
            .zip(&solution.keep)
            .map(|((b, r), &k)| BlockPlan {
                kind: b.kind,
                ranked: r,
                keep_ratio: k,
            })
            .collect();
        let plan = plan_keep_counts(&plans, model.config.heads, target)?;
        let mut rows = Vec::with_capacity(masks.len());
        for (i, block) in masks.blocks.iter_mut().enumerate() {
            let up = mask_update_count(&ranked[i], plan.counts[i], tau, cfg.m_ref)?;
            let [a, b, c] = up.values;
            block.m_in = a;
            block.m_out = b;
            block.m_inner = c;
            self.last[i] = Some((up.ranks, up.kept));
            rows.push(UpdateRow {
                step,
                block_index: i,
                block_type: block.kind,
                bp_class: bp.class[i],
                bp_patch: bp.patch[i],
                kappa_block: solution.keep[i],
                params_remaining: plan.params[i],
            });
        }
        Ok(rows)
    }

    /// Re-evaluates the last ranking at a new temperature.
    fn sharpen_only(&mut self, masks: &mut MaskSet, tau: f64) -> Result<bool> {
        if self.last.iter().any(Option::is_none) {
            return Ok(false);
        }
        self.bp.read_and_reset()?;
        self.taylor.read_and_reset()?;
        for (block, last) in masks.blocks.iter_mut().zip(&self.last) {
            let (ranks, k) = last.as_ref().expect("checked above");
            let lens = [block.m_in.len(), block.m_out.len(), block.m_inner.len()];
            let [a, b, c] = values_from_ranks(ranks, lens, *k, tau, self.cfg.pruning.m_ref)?;
            block.m_in = a;
            block.m_out = b;
            block.m_inner = c;
        }
        Ok(true)
    }
}

/// Fails early when `κ^m` is below the per-block floor or below what the
/// channel guards leave in place.
pub fn check_feasible(cfg: &RunConfig) -> Result<()> {
    let p = &cfg.pruning;
    if p.keep_ratio < p.kappa_floor {
        return Err(Error::Infeasible(format!(
            "keep ratio {} is below the per-block floor {}",
            p.keep_ratio, p.kappa_floor
        )));
    }
    let heads = cfg.model.heads;
    let (mut least, mut total) = (0, 0);
    for b in &MaskSet::ones(&cfg.model).blocks {
        let n = [b.m_in.len(), b.m_out.len(), b.m_inner.len()];
        let g = n.map(guard_min);
        least += block_param_count(b.kind, heads, g[0], g[2], g[1]);
        total += block_param_count(b.kind, heads, n[0], n[2], n[1]);
    }
    if p.keep_ratio * (total as f64) < least as f64 {
        return Err(Error::Infeasible(format!(
            "keep ratio {} is below the {:.4} the channel guards keep",
            p.keep_ratio,
            least as f64 / total as f64
        )));
    }
    Ok(())
}

/// Runs warm-up, sparsification and sharpening on `model`, compacts it and
/// fine-tunes the result.
pub fn run_pruning(
    mut model: Vit<f32>,
    cfg: &RunConfig,
    train: &Dataset,
    val: &Dataset,
    observer: &mut dyn PruneObserver,
) -> Result<PruneOutcome> {
    cfg.validate()?;
    check_feasible(cfg)?;
    check_data(cfg, train, val)?;
    if !model.is_dense() {
        return Err(Error::State("pruning needs an uncompacted model".into()));
    }
    let sched = &cfg.schedule;
    let pcfg = &cfg.pruning;
    let aug = cfg.train.augment;
    let steps_per_epoch = train.len().div_ceil(cfg.train.batch_size);
    let freq = sched.mask_update_freq.unwrap_or(steps_per_epoch);
    let warm_steps = sched.epochs_warmup * steps_per_epoch;
    let sparse_steps = sched.epochs_sparsify * steps_per_epoch;
    let sharpen_steps = sched.epochs_sharpen * steps_per_epoch;

    let mut masks = MaskSet::ones(&model.config);
    let mut heads = BpiHeads::<f32>::new(&model.config, &cfg.bpi_config(), &mut epoch_rng(cfg.seed, 0, 7))?;
    let lr = if cfg.optimizer.frozen {
        FROZEN_LR
    } else {
        cfg.optimizer.lr_model
    };
    let mut optim = model_optimizer(&model, cfg, lr);
    let start = model.store.tensors().to_vec();

    let mut updater = Updater {
        cfg,
        bp: BpAccumulator::new(model.num_blocks()),
        taylor: TaylorAccumulator::new(&masks),
        last: vec![None; model.num_blocks()],
    };
    let mut state = RunState {
        phase: Phase::Warmup,
        epoch: 0,
        step: 0,
        kappa_target: 1.0,
        tau: pcfg.tau0,
        seed: cfg.seed,
        updates: 0,
        stop_gradient_checks: 0,
    };
    let mut epochs = Vec::new();
    let mut updates = Vec::new();
    let mut trajectory = Vec::new();

    for epoch in 0..sched.pruning_epochs() {
        state.epoch = epoch;
        state.phase = if epoch < sched.epochs_warmup {
            Phase::Warmup
        } else if epoch < sched.epochs_warmup + sched.epochs_sparsify {
            Phase::Sparsify
        } else {
            Phase::Sharpen
        };
        let mut flips = epoch_rng(cfg.seed, epoch as u64, 1);
        let (mut sum, mut n) = (0.0, 0usize);
        for idx in batch_iter(train.len(), cfg.train.batch_size, cfg.seed, epoch as u64)? {
            let (images, labels) = train.batch::<f32>(&idx, &aug, Some(&mut flips))?;
            let out = train_step(
                &mut model,
                &mut optim,
                Some(&masks),
                Some(&mut heads),
                &images,
                &labels,
                cfg.bpi.check_stop_gradient,
            )?;
            if cfg.bpi.check_stop_gradient {
                state.stop_gradient_checks += 1;
            }
            if !out.loss.is_finite() {
                return Err(Error::NonFinite { op: "training loss" });
            }
            sum += out.loss * idx.len() as f64;
            n += idx.len();
            updater.bp.add(out.bp.as_ref().expect("heads are attached"))?;
            updater
                .taylor
                .accumulate(&masks, out.mask_grads.as_ref().expect("masks are bound"))?;
            state.step += 1;

            if !state.step.is_multiple_of(freq) {
                continue;
            }
            if state.phase == Phase::Warmup {
                // Statistics only cover the latest update interval.
                updater.bp.read_and_reset()?;
                updater.taylor.read_and_reset()?;
                continue;
            }
            let progress = ((state.step - warm_steps) as f64 / sparse_steps.max(1) as f64).min(1.0);
            if state.phase == Phase::Sharpen {
                let q = (state.step - warm_steps - sparse_steps) as f64 / sharpen_steps.max(1) as f64;
                state.tau = tau_ramp(q, pcfg.tau0, pcfg.tau_floor);
                state.kappa_target = pcfg.keep_ratio;
            } else {
                state.kappa_target = intermediate_target(progress, pcfg.keep_ratio);
            }
            let rerank = state.phase == Phase::Sparsify || sched.updates_during_sharpen;
            if rerank || !updater.sharpen_only(&mut masks, state.tau)? {
                updates.extend(updater.rerank(&model, &mut masks, state.kappa_target, state.tau, state.step)?);
            }
            state.updates += 1;
            trajectory.push(TargetPoint {
                step: state.step,
                phase: state.phase,
                progress: if state.phase == Phase::Sharpen { 1.0 } else { progress },
                kappa_target: state.kappa_target,
                kept_fraction: kept_fraction(&model, &masks)?,
                tau: state.tau,
            });
        }
        let (_, acc) = evaluate(&model, Some(&masks), val, cfg.train.batch_size, &aug)?;
        let row = EpochRow {
            epoch,
            phase: state.phase,
            loss: sum / n.max(1) as f64,
            acc,
            kappa_global: kept_fraction(&model, &masks)?,
            tau: state.tau,
        };
        log::info!(
            "epoch {epoch} {} loss {:.4} acc {:.4} kappa {:.4} tau {:.4}",
            row.phase.as_str(),
            row.loss,
            row.acc,
            row.kappa_global,
            row.tau
        );
        observer.epoch(&row, &model, Some(&masks))?;
        epochs.push(row);
    }

    let backbone_rel_change = diff_norm(&start, model.store.tensors()) / flat_norm(&start).max(f64::MIN_POSITIVE);
    let binary = masks.binarized();
    let mut compact = model.compact(&binary)?;
    let mut blocks = Vec::with_capacity(masks.len());
    for (i, geo) in compact.geometry.iter().enumerate() {
        let p = count_params(&model.config, &masks, i)?;
        let kept = [geo.in_idx.len(), geo.out_idx.len(), geo.inner_idx.len()];
        let lens = masks.blocks[i].partials().map(|(_, m)| m.len());
        if kept.iter().zip(lens).any(|(&k, n)| k < guard_min(n)) {
            return Err(Error::Infeasible(format!("block {i} fell below its channel guard")));
        }
        blocks.push(BlockSummary {
            block_index: i,
            block_type: geo.kind,
            kappa_block: p.remaining as f64 / p.total as f64,
            params_total: p.total,
            params_remaining: p.remaining,
            kept,
        });
    }
    let (_, acc_compacted) = evaluate(&compact, None, val, cfg.train.batch_size, &aug)?;
    state.phase = Phase::Finetune;
    let first = sched.pruning_epochs();
    let finetune = train_plain(
        &mut compact,
        cfg,
        train,
        val,
        sched.epochs_finetune,
        first,
        Phase::Finetune,
        &mut |row, m| observer.epoch(row, m, None),
    )?;
    let acc_final = finetune.last().map_or(acc_compacted, |r| r.acc);
    epochs.extend(finetune);
    state.epoch = first + sched.epochs_finetune;

    let params_total: usize = blocks.iter().map(|b| b.params_total).sum();
    let params_remaining = compact.block_params();
    let summary = PruneSummary {
        keep_ratio_target: pcfg.keep_ratio,
        params_total,
        params_remaining,
        kept_fraction: params_remaining as f64 / params_total as f64,
        acc_compacted,
        acc_final,
        frozen: cfg.optimizer.frozen,
        backbone_rel_change,
        blocks,
    };
    Ok(PruneOutcome {
        model: compact,
        masks,
        epochs,
        updates,
        trajectory,
        state,
        summary,
    })
}
