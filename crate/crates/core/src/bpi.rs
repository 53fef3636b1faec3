//! Block performance indicator: per-block classifier heads that measure how
//! much each block reduces the cross-entropy of the class token and of the
//! patch tokens.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{batch_iter, epoch_rng, Augment, Dataset};
use crate::error::{Error, Result};
use crate::params::{normal, ParamStore};
use crate::tensor::{AdamW, AdamWConfig, Gradients, Scalar, Tape, Tensor, Var};
use crate::vit::{BlockKind, BlockTrace, MaskSet, Vit, VitConfig};

const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatchHead {
    /// One residual conv unit on the patch grid, pooled, then linear.
    #[default]
    Resnet,
    /// Mean over patch tokens, then linear.
    PooledLinear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BpiConfig {
    pub patch_head: PatchHead,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for BpiConfig {
    fn default() -> Self {
        BpiConfig {
            patch_head: PatchHead::Resnet,
            lr: 5e-4,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum PatchSlots {
    Resnet {
        conv1: usize,
        ln1_g: usize,
        ln1_b: usize,
        conv2: usize,
        ln2_g: usize,
        ln2_b: usize,
        w: usize,
        b: usize,
    },
    Pooled {
        w: usize,
        b: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct HeadSlots {
    cls_w: usize,
    cls_b: usize,
    patch: PatchSlots,
}

/// The heads of every block plus their optimizer.
#[derive(Clone, Debug)]
pub struct BpiHeads<S> {
    pub store: ParamStore<S>,
    slots: Vec<HeadSlots>,
    grid: usize,
    embed: usize,
    optim: AdamW<S>,
}

/// Per-block head losses recorded on a tape.
#[derive(Clone, Debug)]
pub struct BpiRecord {
    /// Sum of every head's loss on its block output; the training loss.
    pub loss: Var,
    /// `[class, patch]` losses of head `i` on `x_{i-1}` and on `x_i`.
    pub before: Vec<[Var; 2]>,
    pub after: Vec<[Var; 2]>,
}

/// `ΔΨ^c` and `ΔΨ^p` of every block for one batch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BlockPerformance {
    pub class: Vec<f64>,
    pub patch: Vec<f64>,
}

impl BpiRecord {
    /// `ΔΨ_i = L(h_i(x_{i-1})) − L(h_i(x_i))` for both token kinds.
    pub fn performance<S: Scalar>(&self, tape: &Tape<S>) -> BlockPerformance {
        let loss = |v: Var| tape.value(v).item().as_f64();
        let delta = |j: usize| {
            self.before
                .iter()
                .zip(&self.after)
                .map(|(b, a)| loss(b[j]) - loss(a[j]))
                .collect()
        };
        BlockPerformance {
            class: delta(0),
            patch: delta(1),
        }
    }
}

impl<S: Scalar> BpiHeads<S> {
    pub fn new(model: &VitConfig, config: &BpiConfig, rng: &mut impl Rng) -> Result<Self> {
        model.validate()?;
        let (e, k) = (model.embed_dim, model.num_classes);
        let mut store = ParamStore::new();
        let mut slots = Vec::with_capacity(model.num_blocks());
        let conv_std = (1.0 / (9 * e) as f64).sqrt();
        for i in 0..model.num_blocks() {
            let name = |s: &str| format!("bpi{i}.{s}");
            let cls_w = store.push(name("cls.w"), normal(rng, &[e, k], INIT_STD));
            let cls_b = store.push(name("cls.b"), Tensor::zeros(&[k]));
            let patch = match config.patch_head {
                PatchHead::Resnet => PatchSlots::Resnet {
                    conv1: store.push(name("conv1"), normal(rng, &[9 * e, e], conv_std)),
                    ln1_g: store.push(name("ln1.g"), Tensor::full(&[e], S::one())),
                    ln1_b: store.push(name("ln1.b"), Tensor::zeros(&[e])),
                    conv2: store.push(name("conv2"), normal(rng, &[9 * e, e], conv_std)),
                    ln2_g: store.push(name("ln2.g"), Tensor::full(&[e], S::one())),
                    ln2_b: store.push(name("ln2.b"), Tensor::zeros(&[e])),
                    w: store.push(name("patch.w"), normal(rng, &[e, k], INIT_STD)),
                    b: store.push(name("patch.b"), Tensor::zeros(&[k])),
                },
                PatchHead::PooledLinear => PatchSlots::Pooled {
                    w: store.push(name("patch.w"), normal(rng, &[e, k], INIT_STD)),
                    b: store.push(name("patch.b"), Tensor::zeros(&[k])),
                },
            };
            slots.push(HeadSlots { cls_w, cls_b, patch });
        }
        let optim = AdamW::new(
            AdamWConfig {
                lr: config.lr,
                weight_decay: config.weight_decay,
                ..AdamWConfig::default()
            },
            store.tensors(),
        );
        Ok(BpiHeads {
            store,
            slots,
            grid: model.grid(),
            embed: e,
            optim,
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.slots.len()
    }

    pub fn bind(&self, tape: &mut Tape<S>) -> Result<Vec<Var>> {
        self.store.bind(tape, true)
    }

    /// `[class, patch]` cross-entropy of head `block` on the token map `x`.
    pub fn head_losses(
        &self,
        tape: &mut Tape<S>,
        params: &[Var],
        block: usize,
        x: Var,
        labels: &[usize],
    ) -> Result<[Var; 2]> {
        let slots = self
            .slots
            .get(block)
            .ok_or_else(|| Error::Config(format!("no head for block {block}")))?;
        let p = |i: usize| params[i];
        let shape = tape.shape(x).to_vec();
        let (e, patches) = (self.embed, self.grid * self.grid);
        if shape.len() != 3 || shape[1] != patches + 1 || shape[2] != e {
            return Err(Error::shape("bpi head", &shape, &[patches + 1, e]));
        }
        let n = shape[0];
        let cls = tape.narrow(x, 1, 0, 1)?;
        let cls = tape.reshape(cls, &[n, e])?;
        let cls_logits = tape.linear(cls, p(slots.cls_w), Some(p(slots.cls_b)))?;
        let cls_loss = tape.softmax_cross_entropy(cls_logits, labels)?;

        let tokens = tape.narrow(x, 1, 1, patches)?;
        let pooled = match slots.patch {
            PatchSlots::Pooled { .. } => tape.mean(tokens, 1)?,
            PatchSlots::Resnet {
                conv1,
                ln1_g,
                ln1_b,
                conv2,
                ln2_g,
                ln2_b,
                ..
            } => {
                let g = self.grid;
                let grid = tape.reshape(tokens, &[n, g, g, e])?;
                let h = tape.conv3x3(grid, p(conv1))?;
                let h = tape.layernorm(h, p(ln1_g), p(ln1_b))?;
                let h = tape.gelu(h)?;
                let h = tape.conv3x3(h, p(conv2))?;
                let h = tape.layernorm(h, p(ln2_g), p(ln2_b))?;
                let h = tape.add(h, grid)?;
                let h = tape.gelu(h)?;
                let h = tape.reshape(h, &[n, patches, e])?;
                tape.mean(h, 1)?
            }
        };
        let (w, b) = match slots.patch {
            PatchSlots::Pooled { w, b } | PatchSlots::Resnet { w, b, .. } => (w, b),
        };
        let patch_logits = tape.linear(pooled, p(w), Some(p(b)))?;
        let patch_loss = tape.softmax_cross_entropy(patch_logits, labels)?;
        Ok([cls_loss, patch_loss])
    }

    /// Records every head on the block inputs and outputs. `states` are the
    /// residual stream `x_0 .. x_B`; they are detached here so no gradient
    /// from the head losses can reach whatever produced them.
    pub fn record(&self, tape: &mut Tape<S>, params: &[Var], states: &[Var], labels: &[usize]) -> Result<BpiRecord> {
        if states.len() != self.num_blocks() + 1 {
            return Err(Error::Config(format!(
                "trace has {} blocks, heads expect {}",
                states.len().saturating_sub(1),
                self.num_blocks()
            )));
        }
        let detached: Vec<Var> = states.iter().map(|&s| tape.detach(s)).collect::<Result<_>>()?;
        let mut before = Vec::with_capacity(self.num_blocks());
        let mut after = Vec::with_capacity(self.num_blocks());
        let mut loss: Option<Var> = None;
        for i in 0..self.num_blocks() {
            before.push(self.head_losses(tape, params, i, detached[i], labels)?);
            let a = self.head_losses(tape, params, i, detached[i + 1], labels)?;
            for v in a {
                loss = Some(match loss {
                    Some(acc) => tape.add(acc, v)?,
                    None => v,
                });
            }
            after.push(a);
        }
        let loss = loss.ok_or_else(|| Error::Config("no blocks to measure".into()))?;
        Ok(BpiRecord { loss, before, after })
    }

    /// One optimizer step of the heads from gradients on `params`.
    pub fn apply_gradients(&mut self, tape: &Tape<S>, params: &[Var], grads: &Gradients<S>) -> Result<()> {
        let g: Vec<Tensor<S>> = params.iter().map(|&v| grads.get_or_zeros(v, tape.shape(v))).collect();
        let decay = self.store.decay_flags().to_vec();
        self.optim.step(self.store.tensors_mut(), &g, &decay)
    }
}

/// Measures `ΔΨ` on a detached trace and trains the heads one step.
pub fn bpi_step<S: Scalar>(
    heads: &mut BpiHeads<S>,
    trace: &BlockTrace<S>,
    labels: &[usize],
) -> Result<(BlockPerformance, f64)> {
    let mut tape = Tape::new();
    let params = heads.bind(&mut tape)?;
    let states: Vec<Var> = trace
        .states
        .iter()
        .map(|s| tape.constant(s.clone()))
        .collect::<Result<_>>()?;
    let record = heads.record(&mut tape, &params, &states, labels)?;
    let grads = tape.backward(record.loss)?;
    heads.apply_gradients(&tape, &params, &grads)?;
    Ok((record.performance(&tape), tape.value(record.loss).item().as_f64()))
}

/// Head-only training settings for [`probe_mode`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: Augment,
}

/// Trains fresh heads on a frozen backbone, then reports the mean block
/// performance over `eval`. The model is only read.
pub fn probe_mode(
    model: &Vit<f32>,
    masks: Option<&MaskSet>,
    config: &BpiConfig,
    train: &Dataset,
    eval: &Dataset,
    probe: &ProbeConfig,
) -> Result<BlockPerformance> {
    if eval.is_empty() {
        return Err(Error::Config("probe evaluation set is empty".into()));
    }
    let mut heads = BpiHeads::<f32>::new(&model.config, config, &mut epoch_rng(probe.seed, 0, 7))?;
    for epoch in 0..probe.epochs {
        let mut flips = epoch_rng(probe.seed, epoch as u64, 1);
        for idx in batch_iter(train.len(), probe.batch_size, probe.seed, epoch as u64)? {
            let (images, labels) = train.batch::<f32>(&idx, &probe.augment, Some(&mut flips))?;
            let (_, trace) = model.forward_masked(&images, masks)?;
            bpi_step(&mut heads, &trace, &labels)?;
        }
    }
    let aug = Augment {
        flip: false,
        ..probe.augment
    };
    let blocks = heads.num_blocks();
    let mut total = BlockPerformance {
        class: vec![0.0; blocks],
        patch: vec![0.0; blocks],
    };
    let idx: Vec<usize> = (0..eval.len()).collect();
    for chunk in idx.chunks(probe.batch_size.max(1)) {
        let (images, labels) = eval.batch::<f32>(chunk, &aug, None)?;
        let (_, trace) = model.forward_masked(&images, masks)?;
        let mut tape = Tape::new();
        let params = heads.store.bind(&mut tape, false)?;
        let states: Vec<Var> = trace
            .states
            .iter()
            .map(|s| tape.constant(s.clone()))
            .collect::<Result<_>>()?;
        let bp = heads.record(&mut tape, &params, &states, &labels)?.performance(&tape);
        let w = chunk.len() as f64;
        total.class.iter_mut().zip(&bp.class).for_each(|(t, v)| *t += w * v);
        total.patch.iter_mut().zip(&bp.patch).for_each(|(t, v)| *t += w * v);
    }
    let n = eval.len() as f64;
    total.class.iter_mut().for_each(|v| *v /= n);
    total.patch.iter_mut().for_each(|v| *v /= n);
    Ok(total)
}

/// Running mean of block performance between budget updates.
#[derive(Clone, Debug, Default)]
pub struct BpAccumulator {
    class: Vec<f64>,
    patch: Vec<f64>,
    steps: usize,
}

impl BpAccumulator {
    pub fn new(blocks: usize) -> Self {
        BpAccumulator {
            class: vec![0.0; blocks],
            patch: vec![0.0; blocks],
            steps: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn add(&mut self, bp: &BlockPerformance) -> Result<()> {
        if bp.class.len() != self.class.len() || bp.patch.len() != self.patch.len() {
            return Err(Error::Config("block performance length mismatch".into()));
        }
        if bp.class.iter().chain(&bp.patch).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "block performance",
            });
        }
        self.class.iter_mut().zip(&bp.class).for_each(|(s, v)| *s += v);
        self.patch.iter_mut().zip(&bp.patch).for_each(|(s, v)| *s += v);
        self.steps += 1;
        Ok(())
    }

    pub fn read_and_reset(&mut self) -> Result<BlockPerformance> {
        if self.steps == 0 {
            return Err(Error::State(
                "no block performance accumulated since the last update".into(),
            ));
        }
        let n = self.steps as f64;
        let out = BlockPerformance {
            class: self.class.iter().map(|s| s / n).collect(),
            patch: self.patch.iter().map(|s| s / n).collect(),
        };
        self.class.iter_mut().for_each(|s| *s = 0.0);
        self.patch.iter_mut().for_each(|s| *s = 0.0);
        self.steps = 0;
        Ok(out)
    }
}

/// Divides by the mean magnitude; all-zero input stays zero.
pub fn normalize_by_mean(values: &[f64]) -> Vec<f64> {
    let mean = values.iter().map(|v| v.abs()).sum::<f64>() / values.len().max(1) as f64;
    if mean > 0.0 {
        values.iter().map(|v| v / mean).collect()
    } else {
        vec![0.0; values.len()]
    }
}

/// One probe CSV row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub checkpoint: String,
    pub block_index: usize,
    pub block_type: BlockKind,
    pub bp_class: f64,
    pub bp_patch: f64,
}

pub fn probe_rows(checkpoint: &str, bp: &BlockPerformance) -> Vec<ProbeRow> {
    bp.class
        .iter()
        .zip(&bp.patch)
        .enumerate()
        .map(|(i, (&c, &p))| ProbeRow {
            checkpoint: checkpoint.to_string(),
            block_index: i,
            block_type: BlockKind::of_block(i),
            bp_class: c,
            bp_patch: p,
        })
        .collect()
}

/// Rows with `bp_class` and `bp_patch` normalised within each checkpoint.
pub fn normalize_rows(rows: &[ProbeRow], norm: fn(&[f64]) -> Vec<f64>) -> Vec<ProbeRow> {
    let mut out = Vec::with_capacity(rows.len());
    let mut start = 0;
    while start < rows.len() {
        let name = &rows[start].checkpoint;
        let end = start + rows[start..].iter().take_while(|r| &r.checkpoint == name).count();
        let group = &rows[start..end];
        let c = norm(&group.iter().map(|r| r.bp_class).collect::<Vec<_>>());
        let p = norm(&group.iter().map(|r| r.bp_patch).collect::<Vec<_>>());
        for (j, r) in group.iter().enumerate() {
            out.push(ProbeRow {
                bp_class: c[j],
                bp_patch: p[j],
                ..r.clone()
            });
        }
        start = end;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> VitConfig {
        VitConfig {
            image_size: 8,
            patch_size: 2,
            channels: 1,
            embed_dim: 8,
            heads: 2,
            depth: 1,
            mlp_ratio: 2,
            num_classes: 3,
        }
    }

    fn trace(cfg: &VitConfig, same: bool) -> BlockTrace<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shape = [2, cfg.num_tokens(), cfg.embed_dim];
        let x0: Tensor<f64> = normal(&mut rng, &shape, 1.0);
        let x1 = if same {
            x0.clone()
        } else {
            normal(&mut rng, &shape, 1.0)
        };
        let x2 = normal(&mut rng, &shape, 1.0);
        BlockTrace {
            states: vec![x0, x1, x2],
        }
    }

    #[test]
    fn identity_block_has_zero_performance() {
        let cfg = tiny();
        for head in [PatchHead::Resnet, PatchHead::PooledLinear] {
            let conf = BpiConfig {
                patch_head: head,
                ..BpiConfig::default()
            };
            let mut heads = BpiHeads::<f64>::new(&cfg, &conf, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            let (bp, loss) = bpi_step(&mut heads, &trace(&cfg, true), &[0, 2]).unwrap();
            assert_eq!(bp.class[0], 0.0);
            assert_eq!(bp.patch[0], 0.0);
            assert!(loss > 0.0);
        }
    }

    #[test]
    fn heads_train_and_reject_bad_traces() {
        let cfg = tiny();
        let mut heads = BpiHeads::<f64>::new(&cfg, &BpiConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let before = heads.store.tensors().to_vec();
        bpi_step(&mut heads, &trace(&cfg, false), &[0, 1]).unwrap();
        assert_ne!(before, heads.store.tensors());
        let mut short = trace(&cfg, false);
        short.states.pop();
        assert!(bpi_step(&mut heads, &short, &[0, 1]).is_err());
        assert!(matches!(
            bpi_step(&mut heads, &trace(&cfg, false), &[0, 5]),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn accumulator_means() {
        let mut acc = BpAccumulator::new(1);
        assert!(acc.read_and_reset().is_err());
        acc.add(&BlockPerformance {
            class: vec![0.2],
            patch: vec![1.0],
        })
        .unwrap();
        acc.add(&BlockPerformance {
            class: vec![0.4],
            patch: vec![0.0],
        })
        .unwrap();
        let m = acc.read_and_reset().unwrap();
        assert!((m.class[0] - 0.3).abs() < 1e-15);
        assert_eq!(m.patch[0], 0.5);
        assert_eq!(acc.steps(), 0);
    }

    #[test]
    fn normalisations() {
        assert_eq!(normalize_by_mean(&[1.0, -3.0]), vec![0.5, -1.5]);
        let rows = probe_rows(
            "a",
            &BlockPerformance {
                class: vec![1.0, 2.0],
                patch: vec![0.0, 0.0],
            },
        );
        let n = normalize_rows(&rows, crate::budget::normalize_by_max);
        assert_eq!(n[0].bp_class, 0.5);
        assert_eq!(n[1].block_type, BlockKind::Mlp);
    }
}
