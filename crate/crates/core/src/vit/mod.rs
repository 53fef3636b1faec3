//! A small Vision Transformer whose attention and MLP blocks accept soft
//! channel masks and report the residual stream before and after each block.

mod masks;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{normal, ParamStore};
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub use masks::{
    attn_params, block_param_count, count_params, mlp_params, BlockKind, BlockMasks, BlockParams, MaskBinding,
    MaskGradients, MaskScales, MaskSet, PartialKind, KEEP_THRESHOLD,
};

const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    /// Input image channels.
    pub channels: usize,
    pub embed_dim: usize,
    pub heads: usize,
    /// Transformer layers; there are `2 * depth` prunable blocks.
    pub depth: usize,
    pub mlp_ratio: usize,
    pub num_classes: usize,
}

impl Default for VitConfig {
    fn default() -> Self {
        VitConfig {
            image_size: 32,
            patch_size: 4,
            channels: 3,
            embed_dim: 64,
            heads: 4,
            depth: 6,
            mlp_ratio: 4,
            num_classes: 10,
        }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return fail("image_size must be a positive multiple of patch_size");
        }
        if self.heads == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return fail("embed_dim must be a positive multiple of heads");
        }
        if self.depth == 0 || self.mlp_ratio == 0 || self.channels == 0 {
            return fail("depth, mlp_ratio and channels must be positive");
        }
        if self.num_classes < 2 {
            return fail("num_classes must be at least 2");
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Class token plus patches.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    pub fn num_blocks(&self) -> usize {
        2 * self.depth
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

/// Which channels of a block physically exist. A dense model keeps every
/// index; compaction drops the ones whose mask fell below 0.5.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockGeometry {
    pub kind: BlockKind,
    /// Residual channels read by the block.
    pub in_idx: Vec<usize>,
    /// Residual channels written by the block.
    pub out_idx: Vec<usize>,
    /// Head-dim channels (attention) or hidden channels (MLP).
    pub inner_idx: Vec<usize>,
}

impl BlockGeometry {
    fn dense(kind: BlockKind, config: &VitConfig) -> Self {
        let inner = match kind {
            BlockKind::Attn => config.head_dim(),
            BlockKind::Mlp => config.hidden_dim(),
        };
        BlockGeometry {
            kind,
            in_idx: (0..config.embed_dim).collect(),
            out_idx: (0..config.embed_dim).collect(),
            inner_idx: (0..inner).collect(),
        }
    }

    pub fn param_count(&self, heads: usize) -> usize {
        block_param_count(
            self.kind,
            heads,
            self.in_idx.len(),
            self.inner_idx.len(),
            self.out_idx.len(),
        )
    }

    fn is_dense(&self, config: &VitConfig) -> bool {
        *self == BlockGeometry::dense(self.kind, config)
    }
}

/// Store indices of one block's tensors: `[ln_g, ln_b, w1, b1, w2, b2]`.
///
/// Attention: `w1` is the fused QKV projection `[a_in, 3 * H * a_e]` with
/// columns ordered (q/k/v, head, channel); `w2` is `[H * a_e, a_out]`.
/// MLP: `w1` is `[a_in, a_hid]`, `w2` is `[a_hid, a_out]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSlots {
    pub ln_g: usize,
    pub ln_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VitLayout {
    pub patch_w: usize,
    pub patch_b: usize,
    pub cls: usize,
    pub pos: usize,
    pub blocks: Vec<BlockSlots>,
    pub norm_g: usize,
    pub norm_b: usize,
    pub head_w: usize,
    pub head_b: usize,
}

#[derive(Clone, Debug)]
pub struct Vit<S> {
    pub config: VitConfig,
    pub store: ParamStore<S>,
    pub layout: VitLayout,
    pub geometry: Vec<BlockGeometry>,
}

/// Output of a forward pass recorded on a tape.
#[derive(Clone, Debug)]
pub struct VitOutput {
    pub logits: Var,
    /// Residual stream `x_0 .. x_B`; block `i` (0-based) maps `states[i]` to
    /// `states[i + 1]`.
    pub states: Vec<Var>,
}

/// Detached per-block feature maps.
#[derive(Clone, Debug)]
pub struct BlockTrace<S> {
    pub states: Vec<Tensor<S>>,
}

impl<S: Scalar> BlockTrace<S> {
    pub fn num_blocks(&self) -> usize {
        self.states.len().saturating_sub(1)
    }

    pub fn input(&self, block: usize) -> &Tensor<S> {
        &self.states[block]
    }

    pub fn output(&self, block: usize) -> &Tensor<S> {
        &self.states[block + 1]
    }
}

impl<S: Scalar> Vit<S> {
    pub fn new(config: VitConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let e = config.embed_dim;
        let mut store = ParamStore::new();
        let patch_w = store.push("patch.w", normal(rng, &[config.patch_dim(), e], INIT_STD));
        let patch_b = store.push("patch.b", Tensor::zeros(&[e]));
        let cls = store.push("cls", normal(rng, &[1, e], INIT_STD));
        let pos = store.push("pos", normal(rng, &[config.num_tokens(), e], INIT_STD));
        let mut blocks = Vec::new();
        let mut geometry = Vec::new();
        for i in 0..config.num_blocks() {
            let kind = BlockKind::of_block(i);
            let (w1, w2) = match kind {
                BlockKind::Attn => ([e, 3 * e], [e, e]),
                BlockKind::Mlp => ([e, config.hidden_dim()], [config.hidden_dim(), e]),
            };
            let name = |s: &str| format!("block{i}.{}.{s}", kind.as_str());
            blocks.push(BlockSlots {
                ln_g: store.push(name("ln.g"), Tensor::full(&[e], S::one())),
                ln_b: store.push(name("ln.b"), Tensor::zeros(&[e])),
                w1: store.push(name("w1"), normal(rng, &w1, INIT_STD)),
                b1: store.push(name("b1"), Tensor::zeros(&[w1[1]])),
                w2: store.push(name("w2"), normal(rng, &w2, INIT_STD)),
                b2: store.push(name("b2"), Tensor::zeros(&[w2[1]])),
            });
            geometry.push(BlockGeometry::dense(kind, &config));
        }
        let norm_g = store.push("norm.g", Tensor::full(&[e], S::one()));
        let norm_b = store.push("norm.b", Tensor::zeros(&[e]));
        let head_w = store.push("head.w", normal(rng, &[e, config.num_classes], INIT_STD));
        let head_b = store.push("head.b", Tensor::zeros(&[config.num_classes]));
        Ok(Vit {
            config,
            store,
            layout: VitLayout {
                patch_w,
                patch_b,
                cls,
                pos,
                blocks,
                norm_g,
                norm_b,
                head_w,
                head_b,
            },
            geometry,
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.layout.blocks.len()
    }

    pub fn is_dense(&self) -> bool {
        self.geometry.iter().all(|g| g.is_dense(&self.config))
    }

    /// Parameter count of the prunable blocks (the budget's `|w_..|`).
    pub fn block_params(&self) -> usize {
        self.geometry.iter().map(|g| g.param_count(self.config.heads)).sum()
    }

    /// True parameter count of block `i` read off the stored tensors.
    pub fn stored_block_params(&self, i: usize) -> usize {
        let s = &self.layout.blocks[i];
        [s.w1, s.b1, s.w2, s.b2]
            .iter()
            .map(|&idx| self.store.get(idx).numel())
            .sum()
    }

    /// Splits `n x h x w x c` images into `n x p x (P * P * c)` patch rows.
    pub fn patchify(&self, images: &Tensor<S>) -> Result<Tensor<S>> {
        let c = &self.config;
        let expect = [c.image_size, c.image_size, c.channels];
        let s = images.shape();
        if s.len() != 4 || s[1..] != expect {
            return Err(Error::shape("patchify", s, &expect));
        }
        let n = s[0];
        let (side, ps, ch, grid) = (c.image_size, c.patch_size, c.channels, c.grid());
        let src = images.data();
        let mut out = Vec::with_capacity(src.len());
        for b in 0..n {
            for gy in 0..grid {
                for gx in 0..grid {
                    for py in 0..ps {
                        let y = gy * ps + py;
                        let row = ((b * side + y) * side + gx * ps) * ch;
                        out.extend_from_slice(&src[row..row + ps * ch]);
                    }
                }
            }
        }
        Tensor::new(&[n, c.num_patches(), c.patch_dim()], out)
    }

    /// Records the forward pass on `tape`. With `masks`, each block applies
    /// its soft masks; without, the stored geometry is used as is.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<S>,
        params: &[Var],
        masks: Option<&MaskBinding>,
        images: &Tensor<S>,
    ) -> Result<VitOutput> {
        if params.len() != self.store.len() {
            return Err(Error::State("parameter binding does not match model".into()));
        }
        if let Some(m) = masks {
            if !self.is_dense() {
                return Err(Error::State("masks apply only to a dense model".into()));
            }
            if m.vars.len() != self.num_blocks() {
                return Err(Error::Config("mask binding block count mismatch".into()));
            }
        }
        let cfg = &self.config;
        let l = &self.layout;
        let p = |idx: usize| params[idx];
        let patches = self.patchify(images)?;
        let n = patches.shape()[0];
        let e = cfg.embed_dim;
        let patches = tape.constant(patches)?;
        let emb = tape.linear(patches, p(l.patch_w), Some(p(l.patch_b)))?;
        let zeros = tape.constant(Tensor::zeros(&[n, 1, e]))?;
        let cls = tape.add(zeros, p(l.cls))?;
        let tokens = tape.concat(&[cls, emb], 1)?;
        let mut x = tape.add(tokens, p(l.pos))?;

        let mut states = vec![x];
        for (i, (slots, geo)) in l.blocks.iter().zip(&self.geometry).enumerate() {
            let mask = masks.map(|m| m.vars[i]);
            let delta = match geo.kind {
                BlockKind::Attn => self.attention(tape, params, slots, geo, mask, x)?,
                BlockKind::Mlp => self.mlp(tape, params, slots, geo, mask, x)?,
            };
            x = tape.add(x, delta)?;
            states.push(x);
        }

        let normed = tape.layernorm(x, p(l.norm_g), p(l.norm_b))?;
        let cls_tok = tape.narrow(normed, 1, 0, 1)?;
        let cls_tok = tape.reshape(cls_tok, &[n, e])?;
        let logits = tape.linear(cls_tok, p(l.head_w), Some(p(l.head_b)))?;
        Ok(VitOutput { logits, states })
    }

    /// Reads the block input: layernorm, then `M_in` or the kept-channel gather.
    fn block_read(
        &self,
        tape: &mut Tape<S>,
        params: &[Var],
        slots: &BlockSlots,
        geo: &BlockGeometry,
        mask_in: Option<Var>,
        x: Var,
    ) -> Result<Var> {
        let h = tape.layernorm(x, params[slots.ln_g], params[slots.ln_b])?;
        match mask_in {
            Some(m) => tape.mul(h, m),
            None if geo.in_idx.len() == self.config.embed_dim => Ok(h),
            None => tape.gather(h, &geo.in_idx),
        }
    }

    /// Writes the block output back to full residual width.
    fn block_write(&self, tape: &mut Tape<S>, geo: &BlockGeometry, mask_out: Option<Var>, y: Var) -> Result<Var> {
        match mask_out {
            Some(m) => tape.mul(y, m),
            None if geo.out_idx.len() == self.config.embed_dim => Ok(y),
            None => tape.scatter(y, &geo.out_idx, self.config.embed_dim),
        }
    }

    fn attention(
        &self,
        tape: &mut Tape<S>,
        params: &[Var],
        slots: &BlockSlots,
        geo: &BlockGeometry,
        mask: Option<[Var; 3]>,
        x: Var,
    ) -> Result<Var> {
        let h = self.block_read(tape, params, slots, geo, mask.map(|m| m[0]), x)?;
        let shape = tape.shape(x).to_vec();
        let (n, t) = (shape[0], shape[1]);
        let heads = self.config.heads;
        let a = geo.inner_idx.len();
        let qkv = tape.linear(h, params[slots.w1], Some(params[slots.b1]))?;
        let qkv = tape.reshape(qkv, &[n, t, 3, heads, a])?;
        let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
        let qkv = tape.reshape(qkv, &[3, n * heads * t * a])?;
        let mut parts = [qkv; 3];
        for (j, part) in parts.iter_mut().enumerate() {
            let v = tape.narrow(qkv, 0, j, 1)?;
            let mut v = tape.reshape(v, &[n * heads, t, a])?;
            if let Some(m) = mask {
                // The same M_e instance scales Q, K and V.
                v = tape.mul(v, m[2])?;
            }
            *part = v;
        }
        let [q, k, v] = parts;
        // Temperature is fixed by the dense head width regardless of masks.
        let scale = S::of(1.0 / (self.config.head_dim() as f64).sqrt());
        let scores = tape.bmm(q, k, true, scale)?;
        let attn = tape.softmax(scores)?;
        let o = tape.bmm(attn, v, false, S::one())?;
        let o = tape.reshape(o, &[n, heads, t, a])?;
        let o = tape.permute(o, &[0, 2, 1, 3])?;
        let o = tape.reshape(o, &[n, t, heads * a])?;
        let y = tape.linear(o, params[slots.w2], Some(params[slots.b2]))?;
        self.block_write(tape, geo, mask.map(|m| m[1]), y)
    }

    fn mlp(
        &self,
        tape: &mut Tape<S>,
        params: &[Var],
        slots: &BlockSlots,
        geo: &BlockGeometry,
        mask: Option<[Var; 3]>,
        x: Var,
    ) -> Result<Var> {
        let h = self.block_read(tape, params, slots, geo, mask.map(|m| m[0]), x)?;
        let z = tape.linear(h, params[slots.w1], Some(params[slots.b1]))?;
        let mut z = tape.gelu(z)?;
        if let Some(m) = mask {
            z = tape.mul(z, m[2])?;
        }
        let y = tape.linear(z, params[slots.w2], Some(params[slots.b2]))?;
        self.block_write(tape, geo, mask.map(|m| m[1]), y)
    }

    /// Convenience forward on a private tape: logits and detached trace.
    pub fn forward_masked(&self, images: &Tensor<S>, masks: Option<&MaskSet>) -> Result<(Tensor<S>, BlockTrace<S>)> {
        let mut tape = Tape::new();
        let params = self.store.bind(&mut tape, false)?;
        let binding = match masks {
            Some(m) => {
                m.check_against(&self.config)?;
                Some(m.bind(&mut tape, false)?)
            }
            None => None,
        };
        let out = self.forward_on_tape(&mut tape, &params, binding.as_ref(), images)?;
        let trace = BlockTrace {
            states: out.states.iter().map(|&v| tape.value(v).clone()).collect(),
        };
        Ok((tape.value(out.logits).clone(), trace))
    }

    /// Removes every channel whose mask is below 0.5. The result carries no
    /// masks; its forward equals the masked forward with binarized masks.
    pub fn compact(&self, masks: &MaskSet) -> Result<Vit<S>> {
        if !self.is_dense() {
            return Err(Error::State("model is already compacted".into()));
        }
        masks.check_against(&self.config)?;
        let cfg = &self.config;
        let (e, heads, d) = (cfg.embed_dim, cfg.heads, cfg.head_dim());
        let mut out = self.clone();
        for (i, bm) in masks.blocks.iter().enumerate() {
            let [in_idx, out_idx, inner_idx] = bm.kept_indices();
            if in_idx.is_empty() || out_idx.is_empty() || inner_idx.is_empty() {
                return Err(Error::Infeasible(format!(
                    "block {i} would be compacted to zero channels"
                )));
            }
            let slots = self.layout.blocks[i];
            let w1 = self.store.get(slots.w1);
            let b1 = self.store.get(slots.b1);
            let w2 = self.store.get(slots.w2);
            let b2 = self.store.get(slots.b2);
            let (cols1, rows2): (Vec<usize>, Vec<usize>) = match bm.kind {
                BlockKind::Attn => {
                    let cols = (0..3)
                        .flat_map(|j| {
                            let inner = &inner_idx;
                            (0..heads).flat_map(move |hh| inner.iter().map(move |&c| (j * heads + hh) * d + c))
                        })
                        .collect();
                    let rows = (0..heads)
                        .flat_map(|hh| inner_idx.iter().map(move |&c| hh * d + c))
                        .collect();
                    (cols, rows)
                }
                BlockKind::Mlp => (inner_idx.clone(), inner_idx.clone()),
            };
            let w1_new = select(w1, &in_idx, &cols1);
            let b1_new = select_vec(b1, &cols1);
            let w2_new = select(w2, &rows2, &out_idx);
            let b2_new = select_vec(b2, &out_idx);
            let st = &mut out.store;
            *st.get_mut(slots.w1) = w1_new;
            *st.get_mut(slots.b1) = b1_new;
            *st.get_mut(slots.w2) = w2_new;
            *st.get_mut(slots.b2) = b2_new;
            out.geometry[i] = BlockGeometry {
                kind: bm.kind,
                in_idx,
                out_idx,
                inner_idx,
            };
        }
        debug_assert!(out.geometry.iter().all(|g| g.in_idx.len() <= e));
        Ok(out)
    }
}

fn select<S: Scalar>(m: &Tensor<S>, rows: &[usize], cols: &[usize]) -> Tensor<S> {
    let width = m.shape()[1];
    let src = m.data();
    let mut data = Vec::with_capacity(rows.len() * cols.len());
    for &r in rows {
        data.extend(cols.iter().map(|&c| src[r * width + c]));
    }
    Tensor::from_parts(vec![rows.len(), cols.len()], data)
}

fn select_vec<S: Scalar>(v: &Tensor<S>, idx: &[usize]) -> Tensor<S> {
    let src = v.data();
    Tensor::from_parts(vec![idx.len()], idx.iter().map(|&i| src[i]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> VitConfig {
        VitConfig {
            image_size: 8,
            patch_size: 4,
            channels: 1,
            embed_dim: 8,
            heads: 2,
            depth: 2,
            mlp_ratio: 2,
            num_classes: 3,
        }
    }

    fn images(n: usize, cfg: &VitConfig, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let numel = n * cfg.image_size * cfg.image_size * cfg.channels;
        let data = (0..numel).map(|_| rng.random::<f64>()).collect();
        Tensor::new(&[n, cfg.image_size, cfg.image_size, cfg.channels], data).unwrap()
    }

    fn model(seed: u64) -> Vit<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut vit = Vit::new(tiny(), &mut rng).unwrap();
        // Larger weights so masks have a visible effect.
        for t in vit.store.tensors_mut() {
            let noise: Vec<f64> = (0..t.numel()).map(|_| rng.random::<f64>() - 0.5).collect();
            for (v, n) in t.data_mut().iter_mut().zip(noise) {
                *v += n * 0.5;
            }
        }
        vit
    }

    #[test]
    fn config_validation() {
        assert!(VitConfig::default().validate().is_ok());
        let bad = VitConfig {
            image_size: 30,
            ..VitConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = VitConfig {
            heads: 5,
            ..VitConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn patchify_orders_patches_row_major() {
        let cfg = tiny();
        let vit = model(1);
        let data: Vec<f64> = (0..64).map(f64::from).collect();
        let img = Tensor::new(&[1, 8, 8, 1], data).unwrap();
        let p = vit.patchify(&img).unwrap();
        assert_eq!(p.shape(), &[1, 4, 16]);
        // second patch starts at column 4 of row 0
        assert_eq!(p.data()[16], 4.0);
        assert_eq!(p.data()[20], 12.0);
        assert_eq!(cfg.num_tokens(), 5);
    }

    #[test]
    fn all_ones_masks_match_unmasked() {
        let vit = model(2);
        let x = images(3, &vit.config, 7);
        let (a, _) = vit.forward_masked(&x, None).unwrap();
        let (b, _) = vit.forward_masked(&x, Some(&MaskSet::ones(&vit.config))).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn residual_identity_per_block() {
        let vit = model(3);
        let x = images(2, &vit.config, 8);
        let (_, trace) = vit.forward_masked(&x, None).unwrap();
        assert_eq!(trace.num_blocks(), 4);
        let (_, zeroed) = {
            let mut m = MaskSet::ones(&vit.config);
            m.blocks[1].m_out.iter_mut().for_each(|v| *v = 0.0);
            vit.forward_masked(&x, Some(&m)).unwrap()
        };
        // A zero output mask makes the block an identity.
        assert_eq!(zeroed.input(1).data(), zeroed.output(1).data());
    }

    #[test]
    fn halving_output_masks_halves_residual_updates() {
        let vit = model(4);
        let x = images(2, &vit.config, 9);
        let mut half = MaskSet::ones(&vit.config);
        for b in &mut half.blocks {
            b.m_out.iter_mut().for_each(|v| *v = 0.5);
        }
        let (_, full_trace) = vit.forward_masked(&x, None).unwrap();
        let (_, half_trace) = vit.forward_masked(&x, Some(&half)).unwrap();
        // The first block sees the same input in both runs.
        let d_full: Vec<f64> = full_trace
            .output(0)
            .data()
            .iter()
            .zip(full_trace.input(0).data())
            .map(|(a, b)| a - b)
            .collect();
        let d_half: Vec<f64> = half_trace
            .output(0)
            .data()
            .iter()
            .zip(half_trace.input(0).data())
            .map(|(a, b)| a - b)
            .collect();
        for (f, h) in d_full.iter().zip(&d_half) {
            assert!((0.5 * f - h).abs() < 1e-12);
        }
    }

    #[test]
    fn hidden_mask_folds_into_second_linear() {
        let vit = model(5);
        let x = images(2, &vit.config, 10);
        let mut masks = MaskSet::ones(&vit.config);
        let m_hid: Vec<f64> = (0..16).map(|i| 0.1 + 0.05 * i as f64).collect();
        masks.blocks[1].m_inner = m_hid.clone();
        let (masked, _) = vit.forward_masked(&x, Some(&masks)).unwrap();

        let mut folded = vit.clone();
        let w2 = folded.layout.blocks[1].w2;
        let t = folded.store.get_mut(w2);
        let width = t.shape()[1];
        for (r, row) in t.data_mut().chunks_exact_mut(width).enumerate() {
            row.iter_mut().for_each(|v| *v *= m_hid[r]);
        }
        let (plain, _) = folded.forward_masked(&x, None).unwrap();
        for (a, b) in masked.data().iter().zip(plain.data()) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1e-12) + 1e-14);
        }
    }

    #[test]
    fn tiny_hidden_mask_equals_scaled_column() {
        let vit = model(6);
        let x = images(2, &vit.config, 11);
        let delta = 1e-9;
        let mut masks = MaskSet::ones(&vit.config);
        masks.blocks[3].m_inner[5] = delta;
        let (masked, _) = vit.forward_masked(&x, Some(&masks)).unwrap();
        let mut scaled = vit.clone();
        let w2 = scaled.layout.blocks[3].w2;
        let t = scaled.store.get_mut(w2);
        let width = t.shape()[1];
        t.data_mut()[5 * width..6 * width].iter_mut().for_each(|v| *v *= delta);
        let (plain, _) = scaled.forward_masked(&x, None).unwrap();
        for (a, b) in masked.data().iter().zip(plain.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn compact_matches_binarized_forward() {
        let vit = model(7);
        let x = images(3, &vit.config, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut masks = MaskSet::ones(&vit.config);
        for b in &mut masks.blocks {
            for part in b.partials_mut() {
                for v in part.iter_mut() {
                    *v = rng.random::<f64>();
                }
                part[0] = 0.9;
            }
        }
        let compact = vit.compact(&masks).unwrap();
        let (a, _) = vit.forward_masked(&x, Some(&masks.binarized())).unwrap();
        let (b, _) = compact.forward_masked(&x, None).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() <= 1e-10 * v.abs().max(1.0));
        }
        for i in 0..vit.num_blocks() {
            let counted = count_params(&vit.config, &masks, i).unwrap().remaining;
            assert_eq!(compact.stored_block_params(i), counted);
        }
        assert!(compact.forward_masked(&x, Some(&masks)).is_err());
    }

    #[test]
    fn full_masks_compact_to_identical_parameters() {
        let vit = model(8);
        let compact = vit.compact(&MaskSet::ones(&vit.config)).unwrap();
        for (a, b) in vit.store.tensors().iter().zip(compact.store.tensors()) {
            assert_eq!(a, b);
        }
        assert!(compact.is_dense());
    }
}
