use blockprune::bpi::normalize_by_mean;
use blockprune::budget::{allocate, block_importance, gamma, normalize_by_max};
use blockprune::masking::{
    ascending_ranks, guard_min, mask_update, normalize_and_concat, plan_keep_counts, BlockPlan, RankedBlockScore,
};
use blockprune::vit::block_param_count;
use blockprune::BlockKind;
use proptest::prelude::*;

fn importances(max_blocks: usize) -> impl Strategy<Value = (Vec<f64>, Vec<usize>)> {
    (1..=max_blocks).prop_flat_map(|b| {
        (
            prop::collection::vec(0.01f64..1.0, b),
            prop::collection::vec(10usize..5000, b),
        )
    })
}

fn block(max: usize) -> impl Strategy<Value = [Vec<f64>; 3]> {
    (1..max, 1..max, 1..2 * max).prop_flat_map(|(a, b, c)| {
        (
            prop::collection::vec(-5.0f64..5.0, a),
            prop::collection::vec(-5.0f64..5.0, b),
            prop::collection::vec(-5.0f64..5.0, c),
        )
            .prop_map(|(x, y, z)| [x, y, z])
    })
}

fn ranked(parts: &[Vec<f64>; 3]) -> RankedBlockScore {
    normalize_and_concat([&parts[0], &parts[1], &parts[2]], [1.0; 3]).unwrap()
}

proptest! {
    #[test]
    fn allocation_meets_the_target_within_bounds(
        (imp, counts) in importances(12),
        target in 0.05f64..=1.0,
        floor in 0.0f64..0.05,
    ) {
        let sol = allocate(&imp, &counts, target, floor).unwrap();
        let total: f64 = counts.iter().map(|&c| c as f64).sum();
        let kept: f64 = sol.keep.iter().zip(&counts).map(|(k, &c)| k * c as f64).sum();
        prop_assert!((kept / total - target).abs() < 1e-9);
        prop_assert!((sol.achieved - target).abs() < 1e-9);
        for &k in &sol.keep {
            prop_assert!(k >= floor - 1e-12 && k <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn allocation_ignores_importance_scale(
        (imp, counts) in importances(8),
        target in 0.05f64..=1.0,
        scale in 1e-3f64..1e3,
    ) {
        let a = allocate(&imp, &counts, target, 0.02).unwrap();
        let scaled: Vec<f64> = imp.iter().map(|v| v * scale).collect();
        let b = allocate(&scaled, &counts, target, 0.02).unwrap();
        for (x, y) in a.keep.iter().zip(&b.keep) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn allocation_is_monotone(
        (imp, counts) in importances(8),
        t in 0.05f64..0.9,
        dt in 0.0f64..0.1,
        boost in 1.0f64..3.0,
        which in 0usize..8,
    ) {
        let lo = allocate(&imp, &counts, t, 0.02).unwrap();
        let hi = allocate(&imp, &counts, t + dt, 0.02).unwrap();
        for (a, b) in lo.keep.iter().zip(&hi.keep) {
            prop_assert!(b + 1e-12 >= *a, "raising the target lowered a block");
        }
        let i = which % imp.len();
        let mut more = imp.clone();
        more[i] *= boost;
        let up = allocate(&more, &counts, t, 0.02).unwrap();
        prop_assert!(up.keep[i] + 1e-12 >= lo.keep[i], "more importance, less budget");
    }

    #[test]
    fn merged_importance_is_a_distribution(
        bp in prop::collection::vec((-1.0f64..2.0, -1.0f64..2.0), 1..12),
        alpha in 0.0f64..=1.0,
    ) {
        let class: Vec<f64> = bp.iter().map(|p| p.0).collect();
        let patch: Vec<f64> = bp.iter().map(|p| p.1).collect();
        let counts = vec![1000; bp.len()];
        let imp = block_importance(&class, &patch, &counts, alpha, 1e-8).unwrap();
        let sum: f64 = imp.merged.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-9);
        prop_assert!(imp.merged.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn gamma_is_positive_and_increasing(a in -3.0f64..3.0, d in 1e-3f64..1.0) {
        prop_assert!(gamma(a) > 0.0);
        prop_assert!(gamma(a + d) > gamma(a));
        prop_assert!(gamma(a) < 10.0 + 1e-9);
    }

    #[test]
    fn normalisations_fix_their_reference(v in prop::collection::vec(-3.0f64..3.0, 1..20)) {
        let top = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let m = normalize_by_max(&v);
        if top > 0.0 {
            prop_assert!((m.iter().copied().fold(f64::NEG_INFINITY, f64::max) - 1.0).abs() < 1e-12);
        } else if v.iter().any(|&x| x != 0.0) {
            prop_assert!((m.iter().map(|x| x.abs()).fold(0.0, f64::max) - 1.0).abs() < 1e-12);
        }
        if v.iter().any(|&x| x != 0.0) {
            let mean = normalize_by_mean(&v);
            let avg = mean.iter().map(|x| x.abs()).sum::<f64>() / v.len() as f64;
            prop_assert!((avg - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ranks_are_a_stable_permutation(v in prop::collection::vec(-2i32..3, 1..40)) {
        let v: Vec<f64> = v.into_iter().map(f64::from).collect();
        let r = ascending_ranks(&v);
        let mut seen = r.clone();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..v.len()).collect::<Vec<_>>());
        for i in 0..v.len() {
            for j in 0..v.len() {
                if v[i] < v[j] || (v[i] == v[j] && i < j) {
                    prop_assert!(r[i] < r[j]);
                }
            }
        }
    }

    #[test]
    fn mask_updates_keep_the_planned_count(
        parts in block(60),
        kappa in 0.01f64..=1.0,
        tau in 0.005f64..0.2,
    ) {
        let r = ranked(&parts);
        let n = r.len();
        let up = mask_update(&r, kappa, tau, 0.9).unwrap();
        let want = ((kappa * n as f64 + 0.5).floor() as usize).clamp(r.lens.map(guard_min).iter().sum(), n);
        prop_assert_eq!(up.kept, want);
        let flat = up.values.concat();
        prop_assert_eq!(flat.iter().filter(|&&v| v >= 0.5).count(), want);
        // Sharp temperatures saturate the sigmoid, so order is only weak.
        prop_assert!(flat.iter().all(|&v| (0.0..=1.0).contains(&v)));
        for i in 0..n {
            for j in 0..n {
                if up.ranks[i] < up.ranks[j] {
                    prop_assert!(flat[i] <= flat[j]);
                }
            }
        }
        for (j, part) in up.values.iter().enumerate() {
            prop_assert!(part.iter().filter(|&&v| v >= 0.5).count() >= guard_min(r.lens[j]));
        }
    }

    #[test]
    fn masks_depend_only_on_order(
        parts in block(40),
        kappa in 0.05f64..=1.0,
        shift in -10.0f64..10.0,
        stretch in 0.1f64..10.0,
    ) {
        // A strictly increasing transform of the importances changes no rank.
        let moved: [Vec<f64>; 3] = parts.clone().map(|p| p.iter().map(|v| stretch * v + shift).collect());
        let a = mask_update(&ranked(&parts), kappa, 0.05, 0.9).unwrap();
        let b = mask_update(&ranked(&moved), kappa, 0.05, 0.9).unwrap();
        prop_assert_eq!(a.values, b.values);
    }

    #[test]
    fn planned_counts_respect_guards(
        blocks in prop::collection::vec((block(20), 0.05f64..=1.0), 1..6),
        target in 0.1f64..=1.0,
    ) {
        let ranked: Vec<RankedBlockScore> = blocks.iter().map(|(p, _)| ranked(p)).collect();
        let plans: Vec<BlockPlan<'_>> = ranked
            .iter()
            .zip(&blocks)
            .enumerate()
            .map(|(i, (r, (_, k)))| BlockPlan { kind: BlockKind::of_block(i), ranked: r, keep_ratio: *k })
            .collect();
        let plan = plan_keep_counts(&plans, 1, target).unwrap();
        for ((r, &k), (&p, &t)) in ranked.iter().zip(&plan.counts).zip(plan.params.iter().zip(&plan.totals)) {
            prop_assert!(k >= r.lens.map(guard_min).iter().sum::<usize>() && k <= r.len());
            prop_assert!(p <= t);
        }
    }

    #[test]
    fn parameter_counts_grow_with_every_partial(
        heads in 1usize..5, a in 1usize..40, e in 1usize..20, o in 1usize..40,
    ) {
        for kind in [BlockKind::Attn, BlockKind::Mlp] {
            let base = block_param_count(kind, heads, a, e, o);
            prop_assert!(block_param_count(kind, heads, a + 1, e, o) > base);
            prop_assert!(block_param_count(kind, heads, a, e + 1, o) > base);
            prop_assert!(block_param_count(kind, heads, a, e, o + 1) > base);
        }
    }
}
