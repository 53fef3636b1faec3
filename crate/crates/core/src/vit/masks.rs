use serde::{Deserialize, Serialize};

use super::VitConfig;
use crate::error::{Error, Result};
use crate::tensor::{Gradients, Scalar, Tape, Tensor, Var};

/// Mask values at or above this threshold count as kept.
pub const KEEP_THRESHOLD: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Attn,
    Mlp,
}

impl BlockKind {
    /// Blocks alternate attention / MLP, attention first.
    pub fn of_block(index: usize) -> Self {
        if index.is_multiple_of(2) {
            BlockKind::Attn
        } else {
            BlockKind::Mlp
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            BlockKind::Attn => "attn",
            BlockKind::Mlp => "mlp",
        }
    }
}

/// The partial masks of one block, in concatenation order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartialKind {
    In,
    Out,
    /// Per-head channel mask of an attention block, shared by Q, K and V.
    Embed,
    /// Hidden-layer mask of an MLP block.
    Hidden,
}

impl PartialKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PartialKind::In => "in",
            PartialKind::Out => "out",
            PartialKind::Embed => "embed",
            PartialKind::Hidden => "hidden",
        }
    }
}

/// Per-kind rank scale factors `s_j` used when concatenating partial masks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskScales {
    pub s_in: f64,
    pub s_out: f64,
    pub s_e: f64,
    pub s_hid: f64,
}

impl Default for MaskScales {
    fn default() -> Self {
        MaskScales {
            s_in: 1.0,
            s_out: 1.0,
            s_e: 1.0,
            s_hid: 1.0,
        }
    }
}

impl MaskScales {
    pub fn of(&self, kind: PartialKind) -> f64 {
        match kind {
            PartialKind::In => self.s_in,
            PartialKind::Out => self.s_out,
            PartialKind::Embed => self.s_e,
            PartialKind::Hidden => self.s_hid,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockMasks {
    pub kind: BlockKind,
    pub m_in: Vec<f64>,
    pub m_out: Vec<f64>,
    /// `M_e` (length e/H) for attention, `M_hid` for MLP.
    pub m_inner: Vec<f64>,
}

impl BlockMasks {
    pub fn inner_kind(&self) -> PartialKind {
        match self.kind {
            BlockKind::Attn => PartialKind::Embed,
            BlockKind::Mlp => PartialKind::Hidden,
        }
    }

    /// Partial masks in concatenation order: in, out, inner.
    pub fn partials(&self) -> [(PartialKind, &[f64]); 3] {
        [
            (PartialKind::In, &self.m_in),
            (PartialKind::Out, &self.m_out),
            (self.inner_kind(), &self.m_inner),
        ]
    }

    pub fn partials_mut(&mut self) -> [&mut Vec<f64>; 3] {
        [&mut self.m_in, &mut self.m_out, &mut self.m_inner]
    }

    pub fn len(&self) -> usize {
        self.m_in.len() + self.m_out.len() + self.m_inner.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.m_in.iter().chain(&self.m_out).chain(&self.m_inner).copied()
    }

    /// Indices at or above the keep threshold for each partial mask.
    pub fn kept_indices(&self) -> [Vec<usize>; 3] {
        let kept = |m: &[f64]| {
            m.iter()
                .enumerate()
                .filter(|(_, &v)| v >= KEEP_THRESHOLD)
                .map(|(i, _)| i)
                .collect()
        };
        [kept(&self.m_in), kept(&self.m_out), kept(&self.m_inner)]
    }

    pub fn binarized(&self) -> Self {
        let bin = |m: &[f64]| m.iter().map(|&v| if v >= KEEP_THRESHOLD { 1.0 } else { 0.0 }).collect();
        BlockMasks {
            kind: self.kind,
            m_in: bin(&self.m_in),
            m_out: bin(&self.m_out),
            m_inner: bin(&self.m_inner),
        }
    }
}

/// The soft masks of every prunable block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSet {
    pub blocks: Vec<BlockMasks>,
}

impl MaskSet {
    /// All-ones masks matching `config`.
    pub fn ones(config: &VitConfig) -> Self {
        let e = config.embed_dim;
        let blocks = (0..config.num_blocks())
            .map(|i| {
                let kind = BlockKind::of_block(i);
                let inner = match kind {
                    BlockKind::Attn => config.head_dim(),
                    BlockKind::Mlp => config.hidden_dim(),
                };
                BlockMasks {
                    kind,
                    m_in: vec![1.0; e],
                    m_out: vec![1.0; e],
                    m_inner: vec![1.0; inner],
                }
            })
            .collect();
        MaskSet { blocks }
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn binarized(&self) -> Self {
        MaskSet {
            blocks: self.blocks.iter().map(BlockMasks::binarized).collect(),
        }
    }

    pub fn check_against(&self, config: &VitConfig) -> Result<()> {
        let expect = MaskSet::ones(config);
        if self.blocks.len() != expect.blocks.len() {
            return Err(Error::Config(format!(
                "mask set has {} blocks, model has {}",
                self.blocks.len(),
                expect.blocks.len()
            )));
        }
        for (i, (a, b)) in self.blocks.iter().zip(&expect.blocks).enumerate() {
            if a.kind != b.kind
                || a.m_in.len() != b.m_in.len()
                || a.m_out.len() != b.m_out.len()
                || a.m_inner.len() != b.m_inner.len()
            {
                return Err(Error::Config(format!("mask geometry mismatch in block {i}")));
            }
            if a.values().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "mask" });
            }
        }
        Ok(())
    }

    /// Registers every partial mask as a leaf. Mask leaves are differentiable
    /// so their gradients can be read, but they never enter an optimizer.
    pub fn bind<S: Scalar>(&self, tape: &mut Tape<S>, differentiable: bool) -> Result<MaskBinding> {
        let mut vars = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let mut leaf = |m: &[f64]| tape.leaf(Tensor::<S>::from_f64(&[m.len()], m)?, differentiable);
            vars.push([leaf(&b.m_in)?, leaf(&b.m_out)?, leaf(&b.m_inner)?]);
        }
        Ok(MaskBinding { vars })
    }
}

/// Tape handles for a bound [`MaskSet`]: `[in, out, inner]` per block.
#[derive(Clone, Debug)]
pub struct MaskBinding {
    pub vars: Vec<[Var; 3]>,
}

/// Raw `dL/dM` for every mask element, shaped like the mask set.
pub type MaskGradients = Vec<[Vec<f64>; 3]>;

impl MaskBinding {
    /// Mask gradients after a backward pass. `grads` is `None` if backward
    /// has not run this step.
    pub fn gradients<S: Scalar>(&self, tape: &Tape<S>, grads: Option<&Gradients<S>>) -> Result<MaskGradients> {
        let grads = grads.ok_or_else(|| Error::State("mask gradients requested before the backward pass".into()))?;
        Ok(self
            .vars
            .iter()
            .map(|block| block.map(|v| grads.get_or_zeros(v, tape.shape(v)).to_f64_vec()))
            .collect())
    }
}

/// Full and remaining (mask >= 0.5) parameter counts of one block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockParams {
    pub total: usize,
    pub remaining: usize,
}

/// Parameter count of an attention block with `a_in` input channels,
/// `a_e` channels per head and `a_out` output channels (weights + biases).
pub fn attn_params(heads: usize, a_in: usize, a_e: usize, a_out: usize) -> usize {
    a_in * (3 * heads * a_e) + 3 * heads * a_e + (heads * a_e) * a_out + a_out
}

/// Parameter count of an MLP block (weights + biases).
pub fn mlp_params(a_in: usize, a_hid: usize, a_out: usize) -> usize {
    a_in * a_hid + a_hid + a_hid * a_out + a_out
}

pub fn block_param_count(kind: BlockKind, heads: usize, a_in: usize, a_inner: usize, a_out: usize) -> usize {
    match kind {
        BlockKind::Attn => attn_params(heads, a_in, a_inner, a_out),
        BlockKind::Mlp => mlp_params(a_in, a_inner, a_out),
    }
}

/// `|w_i|` and `|w_i,r|` for block `block`.
pub fn count_params(config: &VitConfig, masks: &MaskSet, block: usize) -> Result<BlockParams> {
    let b = masks
        .blocks
        .get(block)
        .ok_or_else(|| Error::Config(format!("block index {block} out of range")))?;
    let full = |m: &[f64]| m.len();
    let kept = |m: &[f64]| m.iter().filter(|&&v| v >= KEEP_THRESHOLD).count();
    let h = config.heads;
    Ok(BlockParams {
        total: block_param_count(b.kind, h, full(&b.m_in), full(&b.m_inner), full(&b.m_out)),
        remaining: block_param_count(b.kind, h, kept(&b.m_in), kept(&b.m_inner), kept(&b.m_out)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> VitConfig {
        VitConfig::default()
    }

    #[test]
    fn full_attention_count() {
        let masks = MaskSet::ones(&cfg());
        let p = count_params(&cfg(), &masks, 0).unwrap();
        assert_eq!(p.total, 64 * 192 + 192 + 64 * 64 + 64);
        assert_eq!(p.total, 16640);
        assert_eq!(p.remaining, p.total);
    }

    #[test]
    fn half_head_dim_count() {
        let mut masks = MaskSet::ones(&cfg());
        for v in masks.blocks[0].m_inner.iter_mut().take(8) {
            *v = 0.1;
        }
        let p = count_params(&cfg(), &masks, 0).unwrap();
        assert_eq!(p.remaining, 64 * 96 + 96 + 32 * 64 + 64);
        assert_eq!(p.remaining, 8352);
    }

    #[test]
    fn boundary_value_counts_as_kept() {
        let mut masks = MaskSet::ones(&cfg());
        masks.blocks[1].m_inner[0] = 0.5;
        masks.blocks[1].m_inner[1] = 0.499_999;
        let p = count_params(&cfg(), &masks, 1).unwrap();
        assert_eq!(p.remaining, mlp_params(64, 255, 64));
    }

    #[test]
    fn block_kinds_alternate() {
        let masks = MaskSet::ones(&cfg());
        assert_eq!(masks.len(), 12);
        assert_eq!(masks.blocks[0].kind, BlockKind::Attn);
        assert_eq!(masks.blocks[0].m_inner.len(), 16);
        assert_eq!(masks.blocks[1].kind, BlockKind::Mlp);
        assert_eq!(masks.blocks[1].m_inner.len(), 256);
        assert!(count_params(&cfg(), &masks, 12).is_err());
    }
}
