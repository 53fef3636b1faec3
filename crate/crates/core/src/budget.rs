//! Global resource balancing: per-block performance scores become per-block
//! keep ratios whose parameter-weighted sum meets the model-wide target.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Input scale `s` of the smoothing function.
pub const GAMMA_SCALE: f64 = 10.0;
const GAMMA_SLOPE: f64 = 1.4;

/// Default `ε` in the per-parameter importance denominator.
pub const IMPORTANCE_EPS: f64 = 1e-8;

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `γ(x) = SP(1.4 s x) − SP(1.4 s x − s)`: near zero for `x <= 0`,
/// saturating at `s` for `x >= 1`.
pub fn gamma(x: f64) -> f64 {
    let z = GAMMA_SLOPE * GAMMA_SCALE * x;
    softplus(z) - softplus(z - GAMMA_SCALE)
}

/// Divides by the largest value. If nothing is positive, the largest
/// magnitude is used so signs are preserved; all-zero input stays zero.
pub fn normalize_by_max(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let denom = if max > 0.0 {
        max
    } else {
        values.iter().map(|v| v.abs()).fold(0.0, f64::max)
    };
    if denom > 0.0 {
        values.iter().map(|v| v / denom).collect()
    } else {
        vec![0.0; values.len()]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockImportance {
    /// `I^{b,c}` normalised to sum to one.
    pub class: Vec<f64>,
    /// `I^{b,p}` normalised to sum to one.
    pub patch: Vec<f64>,
    /// `α · patch + (1 − α) · class`.
    pub merged: Vec<f64>,
    /// Set when a term had no mass and fell back to uniform.
    pub degenerate: bool,
}

/// Merges class- and patch-token block performance into one importance per
/// block, per parameter.
pub fn block_importance(
    bp_class: &[f64],
    bp_patch: &[f64],
    param_counts: &[usize],
    alpha: f64,
    eps: f64,
) -> Result<BlockImportance> {
    let b = param_counts.len();
    if b == 0 || bp_class.len() != b || bp_patch.len() != b {
        return Err(Error::Config(format!(
            "block importance needs matching non-empty inputs ({} / {} / {})",
            bp_class.len(),
            bp_patch.len(),
            b
        )));
    }
    if param_counts.contains(&0) {
        return Err(Error::Config("block parameter counts must be positive".into()));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha {alpha} outside [0, 1]")));
    }
    if bp_class.iter().chain(bp_patch).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "block importance" });
    }
    let mut degenerate = false;
    let mut term = |bp: &[f64]| {
        let raw: Vec<f64> = normalize_by_max(bp)
            .iter()
            .zip(param_counts)
            .map(|(&x, &w)| gamma(x) / (w as f64 + eps))
            .collect();
        let total: f64 = raw.iter().sum();
        if total > 0.0 && total.is_finite() {
            raw.iter().map(|v| v / total).collect()
        } else {
            degenerate = true;
            vec![1.0 / b as f64; b]
        }
    };
    let class = term(bp_class);
    let patch = term(bp_patch);
    if degenerate {
        log::warn!("block importance degenerate; falling back to uniform");
    }
    let merged = class
        .iter()
        .zip(&patch)
        .map(|(c, p)| alpha * p + (1.0 - alpha) * c)
        .collect();
    Ok(BlockImportance {
        class,
        patch,
        merged,
        degenerate,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetSolution {
    /// Per-block keep ratio `κ^b_i`.
    pub keep: Vec<f64>,
    /// `Σ |w_i| κ_i / Σ |w_i|`.
    pub achieved: f64,
    /// Number of rescale rounds.
    pub iterations: usize,
}

/// Scales keep ratios proportionally to `importance` until the weighted
/// keep ratio equals `target`, clipping to `[floor, 1]` and rescaling the
/// unclipped blocks.
///
/// Each round solves the scale `c` over the unclipped blocks and clips the
/// violators on the side with the larger excess: that side's violators are
/// clipped at the solution too, so at most one round per block is needed.
pub fn allocate(importance: &[f64], param_counts: &[usize], target: f64, floor: f64) -> Result<BudgetSolution> {
    let b = importance.len();
    if b == 0 || param_counts.len() != b {
        return Err(Error::Config("allocation needs one importance per block".into()));
    }
    if importance.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Config("importances must be finite and non-negative".into()));
    }
    if param_counts.contains(&0) {
        return Err(Error::Config("block parameter counts must be positive".into()));
    }
    if !(0.0..=1.0).contains(&floor) || !(target > 0.0 && target <= 1.0) {
        return Err(Error::Infeasible(format!("target {target} / floor {floor}")));
    }
    let w: Vec<f64> = param_counts.iter().map(|&c| c as f64).collect();
    let total: f64 = w.iter().sum();
    let goal = target * total;
    let tol = 1e-12 * total;
    if floor * total > goal + tol {
        return Err(Error::Infeasible(format!(
            "target {target} below the per-block floor {floor}"
        )));
    }

    let mut keep: Vec<Option<f64>> = vec![None; b];
    let mut iterations = 0;
    loop {
        let free: Vec<usize> = (0..b).filter(|&i| keep[i].is_none()).collect();
        if free.is_empty() {
            break;
        }
        iterations += 1;
        let fixed: f64 = (0..b).filter_map(|i| keep[i].map(|k| k * w[i])).sum();
        let rem = goal - fixed;
        let mass: f64 = free.iter().map(|&i| w[i] * importance[i]).sum();
        if mass <= 0.0 {
            // No importance left to scale: share the remainder evenly.
            let free_w: f64 = free.iter().map(|&i| w[i]).sum();
            let k = (rem / free_w).clamp(floor, 1.0);
            for &i in &free {
                keep[i] = Some(k);
            }
            break;
        }
        let c = rem / mass;
        let (mut up, mut low) = (0.0, 0.0);
        for &i in &free {
            let k = c * importance[i];
            if k > 1.0 {
                up += w[i] * (k - 1.0);
            } else if k < floor {
                low += w[i] * (floor - k);
            }
        }
        if up == 0.0 && low == 0.0 || (up - low).abs() <= tol {
            for &i in &free {
                keep[i] = Some((c * importance[i]).clamp(floor, 1.0));
            }
            break;
        }
        for &i in &free {
            let k = c * importance[i];
            if up > low && k > 1.0 {
                keep[i] = Some(1.0);
            } else if low > up && k < floor {
                keep[i] = Some(floor);
            }
        }
    }
    let keep: Vec<f64> = keep.into_iter().map(|k| k.unwrap_or(floor)).collect();
    let achieved = keep.iter().zip(&w).map(|(k, w)| k * w).sum::<f64>() / total;
    if (achieved - target).abs() > 1e-9 {
        return Err(Error::Infeasible(format!(
            "every block is clipped but the target {target} is unmet (reached {achieved})"
        )));
    }
    Ok(BudgetSolution {
        keep,
        achieved,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gamma_reference_values() {
        let direct = |x: f64| {
            let sp = |z: f64| (1.0 + z.exp()).ln();
            sp(14.0 * x) - sp(14.0 * x - 10.0)
        };
        assert!((gamma(0.0) - direct(0.0)).abs() < 1e-12);
        assert!((gamma(0.0) - 0.693_102).abs() < 1e-6);
        assert!((gamma(1.0) - 9.981_85).abs() < 1e-5);
        assert!(gamma(-1.0) < 1e-5 && gamma(-1.0) > 0.0);
        assert!((gamma(-1.0) - 8.3e-7).abs() < 1e-8);
    }

    #[test]
    fn gamma_is_monotone() {
        let xs: Vec<f64> = (-200..=200).map(|i| i as f64 / 100.0).collect();
        for pair in xs.windows(2) {
            assert!(gamma(pair[1]) >= gamma(pair[0]));
        }
    }

    #[test]
    fn equal_inputs_give_uniform_importance() {
        let imp = block_importance(&[0.3; 4], &[0.1; 4], &[100; 4], 0.5, IMPORTANCE_EPS).unwrap();
        for v in &imp.merged {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn alpha_zero_is_class_only() {
        let imp = block_importance(&[0.2, 0.9, 0.4], &[1.0, 0.0, 0.3], &[10, 20, 30], 0.0, IMPORTANCE_EPS).unwrap();
        assert_eq!(imp.merged, imp.class);
        let sum: f64 = imp.merged.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn merge_weights_patch_by_alpha() {
        // Choose bp so the normalised class terms are (0.5, 0.5) and patch
        // terms are (0.75, 0.25): solve gamma(x) = 3 gamma(1) numerically.
        let target = gamma(1.0) / 3.0;
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if gamma(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let imp = block_importance(&[1.0, 1.0], &[1.0, lo], &[50, 50], 0.5, IMPORTANCE_EPS).unwrap();
        assert!((imp.patch[0] - 0.75).abs() < 1e-9);
        assert!((imp.merged[0] - 0.625).abs() < 1e-9);
        assert!((imp.merged[1] - 0.375).abs() < 1e-9);
    }

    #[test]
    fn all_zero_bp_is_uniform() {
        let imp = block_importance(&[0.0; 3], &[0.0; 3], &[5, 5, 5], 0.5, IMPORTANCE_EPS).unwrap();
        for v in imp.merged {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn worked_clip_example() {
        let sol = allocate(&[0.9, 0.1], &[100, 100], 0.6, 0.0).unwrap();
        assert!((sol.keep[0] - 1.0).abs() < 1e-15);
        assert!((sol.keep[1] - 0.2).abs() < 1e-12);
        assert!(sol.iterations <= 2);
    }

    #[test]
    fn uniform_and_endpoint_allocations() {
        let sol = allocate(&[0.25; 4], &[10, 20, 30, 40], 0.4, 0.05).unwrap();
        for k in &sol.keep {
            assert!((k - 0.4).abs() < 1e-12);
        }
        let all = allocate(&[0.7, 0.2, 0.1], &[10, 20, 30], 1.0, 0.05).unwrap();
        assert!(all.keep.iter().all(|&k| (k - 1.0).abs() < 1e-12));
    }

    #[test]
    fn floor_is_respected() {
        let sol = allocate(&[0.98, 0.01, 0.01], &[100, 100, 100], 0.3, 0.05).unwrap();
        assert!(sol.keep.iter().all(|&k| k >= 0.05 - 1e-15));
        assert!((sol.achieved - 0.3).abs() < 1e-12);
    }

    #[test]
    fn infeasible_targets() {
        assert!(matches!(
            allocate(&[0.5, 0.5], &[10, 10], 0.01, 0.05),
            Err(Error::Infeasible(_))
        ));
        assert!(allocate(&[0.5, 0.5], &[10, 10], 1.5, 0.0).is_err());
    }
}
