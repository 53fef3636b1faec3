//! Element-wise soft-mask construction from Taylor importance ranks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vit::{block_param_count, BlockKind, MaskGradients, MaskScales, MaskSet, KEEP_THRESHOLD};

/// Minimum kept fraction of every partial mask.
pub const GUARD_FRACTION: f64 = 0.05;

/// Default mask value assigned `τN` ranks above the pruning boundary.
pub const DEFAULT_M_REF: f64 = 0.9;

/// Kept elements required in a partial mask of length `n`.
pub fn guard_min(n: usize) -> usize {
    ((GUARD_FRACTION * n as f64).ceil() as usize).max(1).min(n)
}

/// `(M · dL/dM)²`.
pub fn taylor_importance(mask: f64, grad: f64) -> Result<f64> {
    let v = (mask * grad).powi(2);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite {
            op: "taylor importance",
        })
    }
}

/// Running mean of Taylor importance between mask updates.
#[derive(Clone, Debug)]
pub struct TaylorAccumulator {
    sums: Vec<[Vec<f64>; 3]>,
    steps: usize,
}

impl TaylorAccumulator {
    pub fn new(masks: &MaskSet) -> Self {
        TaylorAccumulator {
            sums: masks
                .blocks
                .iter()
                .map(|b| {
                    [
                        vec![0.0; b.m_in.len()],
                        vec![0.0; b.m_out.len()],
                        vec![0.0; b.m_inner.len()],
                    ]
                })
                .collect(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn accumulate(&mut self, masks: &MaskSet, grads: &MaskGradients) -> Result<()> {
        if grads.len() != self.sums.len() {
            return Err(Error::Config("mask gradients do not match the accumulator".into()));
        }
        for ((sum, block), g) in self.sums.iter_mut().zip(&masks.blocks).zip(grads) {
            let values = [&block.m_in, &block.m_out, &block.m_inner];
            for j in 0..3 {
                if g[j].len() != sum[j].len() || values[j].len() != sum[j].len() {
                    return Err(Error::Config("mask gradient length mismatch".into()));
                }
                for ((s, &m), &d) in sum[j].iter_mut().zip(values[j]).zip(&g[j]) {
                    *s += taylor_importance(m, d)?;
                }
            }
        }
        self.steps += 1;
        Ok(())
    }

    /// Mean importance since the last reset.
    pub fn read_and_reset(&mut self) -> Result<Vec<[Vec<f64>; 3]>> {
        if self.steps == 0 {
            return Err(Error::State(
                "no Taylor importance accumulated since the last update".into(),
            ));
        }
        let n = self.steps as f64;
        let out = self
            .sums
            .iter_mut()
            .map(|block| block.clone().map(|v| v.into_iter().map(|s| s / n).collect()))
            .collect();
        for block in &mut self.sums {
            for part in block.iter_mut() {
                part.iter_mut().for_each(|s| *s = 0.0);
            }
        }
        self.steps = 0;
        Ok(out)
    }
}

/// Stable ascending ranks: the smallest value gets rank 0, ties keep index
/// order.
pub fn ascending_ranks(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0; values.len()];
    for (r, &i) in order.iter().enumerate() {
        ranks[i] = r;
    }
    ranks
}

/// One block's partial scores after per-partial rank normalisation,
/// concatenated in `[in, out, inner]` order.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedBlockScore {
    /// `s_j · rank / N_j` for every element.
    pub scores: Vec<f64>,
    /// Length of each partial mask.
    pub lens: [usize; 3],
}

impl RankedBlockScore {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Partial mask index of concatenated position `pos`.
    pub fn partial_of(&self, pos: usize) -> usize {
        if pos < self.lens[0] {
            0
        } else if pos < self.lens[0] + self.lens[1] {
            1
        } else {
            2
        }
    }

    /// Concatenated positions ordered by ascending normalised score.
    pub fn order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.scores.len()).collect();
        order.sort_by(|&a, &b| self.scores[a].total_cmp(&self.scores[b]));
        order
    }
}

/// Replaces each partial importance with its scaled normalised rank so that
/// partial masks of different lengths and magnitudes are comparable.
pub fn normalize_and_concat(partials: [&[f64]; 3], scales: [f64; 3]) -> Result<RankedBlockScore> {
    let mut scores = Vec::with_capacity(partials.iter().map(|p| p.len()).sum());
    for (part, s) in partials.iter().zip(scales) {
        if part.is_empty() {
            return Err(Error::Config("partial masks must be non-empty".into()));
        }
        if part.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "mask importance" });
        }
        let n = part.len() as f64;
        scores.extend(ascending_ranks(part).into_iter().map(|r| s * r as f64 / n));
    }
    Ok(RankedBlockScore {
        scores,
        lens: [partials[0].len(), partials[1].len(), partials[2].len()],
    })
}

pub fn block_scales(kind: BlockKind, scales: &MaskScales) -> [f64; 3] {
    let inner = match kind {
        BlockKind::Attn => scales.s_e,
        BlockKind::Mlp => scales.s_hid,
    };
    [scales.s_in, scales.s_out, inner]
}

/// Final ordering of a block after selecting `k` kept elements: the
/// returned vector lists concatenated positions from least to most
/// important, with the kept set occupying the last `k` slots.
///
/// `k` is clamped to `[Σ guard_min, N]`. If a partial mask would keep fewer
/// than its guard, its best pruned elements are promoted and the weakest
/// kept elements of partials with a surplus are demoted.
pub fn select_order(ranked: &RankedBlockScore, k: usize) -> (Vec<usize>, usize) {
    let order = ranked.order();
    let n = order.len();
    let guards = ranked.lens.map(guard_min);
    let k = k.clamp(guards.iter().sum(), n);
    let mut kept = vec![false; n];
    for &p in &order[n - k..] {
        kept[p] = true;
    }
    let mut counts = [0usize; 3];
    for &p in &order[n - k..] {
        counts[ranked.partial_of(p)] += 1;
    }
    for j in 0..3 {
        while counts[j] < guards[j] {
            let promote = order
                .iter()
                .rev()
                .copied()
                .find(|&p| !kept[p] && ranked.partial_of(p) == j)
                .expect("partial has unkept elements below its guard");
            let demote = order
                .iter()
                .copied()
                .find(|&p| {
                    let q = ranked.partial_of(p);
                    kept[p] && q != j && counts[q] > guards[q]
                })
                .expect("some partial has a surplus when k covers every guard");
            kept[promote] = true;
            kept[demote] = false;
            counts[j] += 1;
            counts[ranked.partial_of(demote)] -= 1;
        }
    }
    let mut out: Vec<usize> = order.iter().copied().filter(|&p| !kept[p]).collect();
    out.extend(order.iter().copied().filter(|&p| kept[p]));
    (out, k)
}

/// Result of a mask update for one block.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskUpdate {
    /// New values in `[in, out, inner]` order.
    pub values: [Vec<f64>; 3],
    /// Number of elements intended to be kept (the clamped `k`).
    pub kept: usize,
    /// Final rank of every concatenated element.
    pub ranks: Vec<usize>,
}

/// Pre-sigmoid mask logit for final rank `r` with `k` of `n` kept.
pub fn mask_logit(r: usize, n: usize, k: usize, tau: f64, m_ref: f64) -> f64 {
    let scale = (m_ref / (1.0 - m_ref)).ln();
    let shift = (n - k) as f64;
    scale * (r as f64 - shift) / (tau * n as f64)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_mask_params(tau: f64, m_ref: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("temperature {tau} must be positive")));
    }
    if !(m_ref > 0.5 && m_ref < 1.0) {
        return Err(Error::Config(format!("reference mask value {m_ref} outside (0.5, 1)")));
    }
    Ok(())
}

/// Mask values for final ranks `ranks` (a permutation of `0..N`) with the
/// top `k` kept, split into partials of `lens`.
pub fn values_from_ranks(ranks: &[usize], lens: [usize; 3], k: usize, tau: f64, m_ref: f64) -> Result<[Vec<f64>; 3]> {
    check_mask_params(tau, m_ref)?;
    let n = ranks.len();
    if lens.iter().sum::<usize>() != n || k > n {
        return Err(Error::Config(format!("{k} kept of {n} ranks split as {lens:?}")));
    }
    let mut flat: Vec<f64> = ranks
        .iter()
        .map(|&r| sigmoid(mask_logit(r, n, k, tau, m_ref)))
        .collect();
    let inner = flat.split_off(lens[0] + lens[1]);
    let out = flat.split_off(lens[0]);
    Ok([flat, out, inner])
}

/// Mask values that keep exactly `k` elements (after the guard clamp).
pub fn mask_update_count(ranked: &RankedBlockScore, k: usize, tau: f64, m_ref: f64) -> Result<MaskUpdate> {
    check_mask_params(tau, m_ref)?;
    let (order, k) = select_order(ranked, k);
    let mut ranks = vec![0; ranked.len()];
    for (r, &p) in order.iter().enumerate() {
        ranks[p] = r;
    }
    let values = values_from_ranks(&ranks, ranked.lens, k, tau, m_ref)?;
    Ok(MaskUpdate { values, kept: k, ranks })
}

/// Mask values keeping `round_half_up(κ · N)` elements.
pub fn mask_update(ranked: &RankedBlockScore, keep_ratio: f64, tau: f64, m_ref: f64) -> Result<MaskUpdate> {
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(Error::Config(format!("keep ratio {keep_ratio} outside (0, 1]")));
    }
    let k = (keep_ratio * ranked.len() as f64 + 0.5).floor() as usize;
    mask_update_count(ranked, k, tau, m_ref)
}

/// Elements that were pruned (`< 0.5`) before an update and are kept after it.
#[derive(Clone, Debug, PartialEq)]
pub struct Reactivation {
    pub update: MaskUpdate,
    /// `(partial, index)` pairs.
    pub reactivated: Vec<(usize, usize)>,
}

/// Runs a count-based update and reports which elements came back. Nothing
/// here is special-cased: reactivation follows from rebuilding every value
/// from ranks while pruned values stay strictly positive.
pub fn reactivation_check(
    old: [&[f64]; 3],
    ranked: &RankedBlockScore,
    k: usize,
    tau: f64,
    m_ref: f64,
) -> Result<Reactivation> {
    if old.map(<[f64]>::len) != ranked.lens {
        return Err(Error::Config("old masks do not match the ranked block".into()));
    }
    let update = mask_update_count(ranked, k, tau, m_ref)?;
    let mut reactivated = Vec::new();
    for (j, (old, new)) in old.iter().zip(&update.values).enumerate() {
        for (i, (&before, &after)) in old.iter().zip(new).enumerate() {
            if before < KEEP_THRESHOLD && after >= KEEP_THRESHOLD {
                reactivated.push((j, i));
            }
        }
    }
    Ok(Reactivation { update, reactivated })
}

/// Kept channel counts `[in, out, inner]` after `select_order` with `k`.
fn kept_counts(ranked: &RankedBlockScore, order: &[usize], k: usize) -> [usize; 3] {
    let mut counts = [0; 3];
    for &p in &order[order.len() - k..] {
        counts[ranked.partial_of(p)] += 1;
    }
    counts
}

/// One block's keep-count planning input.
#[derive(Clone, Debug)]
pub struct BlockPlan<'a> {
    pub kind: BlockKind,
    pub ranked: &'a RankedBlockScore,
    /// Parameter keep ratio `κ_i` from the allocator.
    pub keep_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeepPlan {
    /// Kept element count per block.
    pub counts: Vec<usize>,
    /// Remaining parameters per block at those counts.
    pub params: Vec<usize>,
    /// Full parameter count per block.
    pub totals: Vec<usize>,
}

impl KeepPlan {
    pub fn kept_fraction(&self) -> f64 {
        self.params.iter().sum::<usize>() as f64 / self.totals.iter().sum::<usize>() as f64
    }
}

/// Converts parameter keep ratios into element counts. Each block takes the
/// count whose remaining parameters are closest to `κ_i |w_i|`; single-step
/// changes are then applied while they move the model total closer to the
/// global target.
pub fn plan_keep_counts(blocks: &[BlockPlan<'_>], heads: usize, target: f64) -> Result<KeepPlan> {
    let mut tables = Vec::with_capacity(blocks.len());
    let mut totals = Vec::with_capacity(blocks.len());
    for b in blocks {
        let n = b.ranked.len();
        let lens = b.ranked.lens;
        totals.push(block_param_count(b.kind, heads, lens[0], lens[2], lens[1]));
        let lo: usize = lens.map(guard_min).iter().sum();
        let table: Vec<usize> = (lo..=n)
            .map(|k| {
                let (order, k) = select_order(b.ranked, k);
                let c = kept_counts(b.ranked, &order, k);
                block_param_count(b.kind, heads, c[0], c[2], c[1])
            })
            .collect();
        tables.push((lo, table));
    }
    let mut idx: Vec<usize> = blocks
        .iter()
        .zip(&tables)
        .zip(&totals)
        .map(|((b, (_, table)), &total)| {
            let goal = b.keep_ratio * total as f64;
            let mut best = 0;
            for (i, &p) in table.iter().enumerate() {
                if (p as f64 - goal).abs() <= (table[best] as f64 - goal).abs() {
                    best = i;
                }
            }
            best
        })
        .collect();

    let goal = target * totals.iter().sum::<usize>() as f64;
    let current = |idx: &[usize]| -> f64 { idx.iter().zip(&tables).map(|(&i, (_, t))| t[i] as f64).sum() };
    for _ in 0..4 * blocks.len().max(1) {
        let gap = (current(&idx) - goal).abs();
        let mut best: Option<(f64, usize, usize)> = None;
        for (bi, (_, table)) in tables.iter().enumerate() {
            let i = idx[bi];
            let moves = [i.checked_sub(1), (i + 1 < table.len()).then_some(i + 1)];
            for ni in moves.into_iter().flatten() {
                let d = (current(&idx) - table[i] as f64 + table[ni] as f64 - goal).abs();
                if d < gap && best.is_none_or(|(bd, _, _)| d < bd) {
                    best = Some((d, bi, ni));
                }
            }
        }
        match best {
            Some((_, bi, ni)) => idx[bi] = ni,
            None => break,
        }
    }
    Ok(KeepPlan {
        counts: idx.iter().zip(&tables).map(|(&i, (lo, _))| lo + i).collect(),
        params: idx.iter().zip(&tables).map(|(&i, (_, t))| t[i]).collect(),
        totals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ranked(parts: [&[f64]; 3]) -> RankedBlockScore {
        normalize_and_concat(parts, [1.0; 3]).unwrap()
    }

    #[test]
    fn ranks_are_stable() {
        assert_eq!(ascending_ranks(&[3.0, 1.0, 1.0, 2.0]), vec![3, 0, 1, 2]);
    }

    #[test]
    fn normalised_ranks_ignore_magnitude() {
        let a = ranked([&[1.0, 2.0], &[1e6, 1e-6, 5.0], &[7.0]]);
        assert_eq!(a.scores, vec![0.0, 0.5, 2.0 / 3.0, 0.0, 1.0 / 3.0, 0.0]);
        assert_eq!(a.lens, [2, 3, 1]);
        assert_eq!(a.partial_of(4), 1);
    }

    #[test]
    fn empty_partial_is_rejected() {
        assert!(normalize_and_concat([&[], &[1.0], &[1.0]], [1.0; 3]).is_err());
    }

    #[test]
    fn boundary_values() {
        let imp: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let r = ranked([&imp[..40], &imp[40..80], &imp[80..]]);
        let up = mask_update_count(&r, 50, 0.1, 0.9).unwrap();
        let n = 100;
        let flat: Vec<f64> = up.values.concat();
        let at = |rank: usize| flat[up.ranks.iter().position(|&x| x == rank).unwrap()];
        assert!((at(n - 50) - 0.5).abs() < 1e-12);
        assert!((at(n - 50 + 10) - 0.9).abs() < 1e-9);
        assert!((at(n - 50 - 10) - 0.1).abs() < 1e-9);
        assert_eq!(flat.iter().filter(|&&v| v >= 0.5).count(), 50);
        assert!(flat.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn guard_promotes_best_pruned_element() {
        // The inner partial has the lowest scores everywhere, so a small k
        // would keep none of it without the guard.
        let r = normalize_and_concat([&[5.0; 20], &[5.0; 20], &[1.0, 2.0, 3.0, 4.0]], [1.0, 1.0, 0.01]).unwrap();
        let up = mask_update_count(&r, 6, 0.1, 0.9).unwrap();
        let kept = |v: &[f64]| v.iter().filter(|&&x| x >= 0.5).count();
        assert_eq!(kept(&up.values[2]), 1);
        assert!(up.values[2][3] >= 0.5);
        assert_eq!(kept(&up.values[0]) + kept(&up.values[1]) + 1, 6);
    }

    #[test]
    fn keep_ratio_rounds_half_up() {
        let r = ranked([&[1.0, 2.0], &[1.0, 2.0], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]]);
        let up = mask_update(&r, 0.25, 0.1, 0.9).unwrap();
        // 0.25 * 10 = 2.5 -> 3 kept.
        assert_eq!(up.kept, 3);
        assert!(mask_update(&r, 0.0, 0.1, 0.9).is_err());
        assert!(mask_update(&r, 0.5, 0.0, 0.9).is_err());
    }

    #[test]
    fn accumulator_means_and_resets() {
        let cfg = crate::vit::VitConfig::default();
        let masks = MaskSet::ones(&cfg);
        let mut acc = TaylorAccumulator::new(&masks);
        assert!(acc.read_and_reset().is_err());
        let grads: MaskGradients = masks
            .blocks
            .iter()
            .map(|b| {
                [
                    vec![1.0; b.m_in.len()],
                    vec![2.0; b.m_out.len()],
                    vec![3.0; b.m_inner.len()],
                ]
            })
            .collect();
        acc.accumulate(&masks, &grads).unwrap();
        let zero: MaskGradients = grads.iter().map(|b| b.clone().map(|v| vec![0.0; v.len()])).collect();
        acc.accumulate(&masks, &zero).unwrap();
        let mean = acc.read_and_reset().unwrap();
        assert_eq!(mean[0][1][0], 2.0);
        assert_eq!(mean[3][2][5], 4.5);
        assert_eq!(acc.steps(), 0);
    }

    #[test]
    fn plan_hits_uniform_target() {
        let imp: Vec<f64> = (0..64).map(|i| i as f64).collect();
        let hid: Vec<f64> = (0..256).map(|i| i as f64).collect();
        let r = ranked([&imp, &imp, &hid]);
        let blocks = vec![
            BlockPlan {
                kind: BlockKind::Mlp,
                ranked: &r,
                keep_ratio: 0.5,
            },
            BlockPlan {
                kind: BlockKind::Mlp,
                ranked: &r,
                keep_ratio: 0.5,
            },
        ];
        let plan = plan_keep_counts(&blocks, 4, 0.5).unwrap();
        let total = plan.totals[0] as f64;
        assert!((plan.kept_fraction() - 0.5).abs() * 2.0 * total <= 2.0 * (64 + 64 + 1) as f64);
    }
}
