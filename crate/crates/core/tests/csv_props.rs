use proptest::prelude::*;
use smoothidx::csv::{
    default_start_level_offset, optimize, optimize_observed, CostModelParams, MergeEvent,
    DEFAULT_STOP_LEVEL,
};
use smoothidx::index::{Index, IndexConfig, IndexMode};
use smoothidx::workloads::{gen_synthetic, DatasetSpec, Distribution};
use smoothidx::SmoothingConfig;

fn dist() -> impl Strategy<Value = Distribution> {
    prop::sample::select(Distribution::ALL.to_vec())
}

fn mode() -> impl Strategy<Value = IndexMode> {
    prop_oneof![Just(IndexMode::Exact), Just(IndexMode::Gapped)]
}

fn setup(d: Distribution, n: usize, seed: u64, mode: IndexMode) -> (Vec<u64>, Index) {
    let keys = gen_synthetic(&DatasetSpec::synthetic(d, n, seed)).unwrap();
    let cfg = IndexConfig {
        max_leaf_size: 32,
        ..IndexConfig::new(mode)
    };
    let index = Index::bulk_build(&keys, cfg).unwrap();
    (keys.into_vec(), index)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn optimize_keeps_keys_and_only_promotes(
        d in dist(),
        n in 50usize..3000,
        seed in any::<u64>(),
        mode in mode(),
        alpha in 0.0f64..0.5,
        c in prop_oneof![Just(-0.001), Just(-1.0), Just(-10.0)],
    ) {
        let (keys, mut index) = setup(d, n, seed, mode);
        let before = index.key_locations();
        let stats_before = index.stats();
        let smoothing = SmoothingConfig::alpha(alpha).unwrap();
        let params = CostModelParams { threshold_c: c, ..CostModelParams::default() };
        let offset = default_start_level_offset(mode);
        let mut recomputed_ok = true;
        let mut observer = |e: &MergeEvent<'_>| {
            if e.decision.accepted {
                let (ks, _) = e.after.keys_and_payloads();
                let (kb, _) = e.before.keys_and_payloads();
                recomputed_ok &= ks == kb && e.after.height() < e.before.height();
            }
        };
        let r = optimize_observed(&mut index, &smoothing, &params, offset, DEFAULT_STOP_LEVEL, &mut observer).unwrap();
        prop_assert!(recomputed_ok);

        for &k in &keys {
            prop_assert_eq!(index.lookup(k).payload, Some(k));
        }
        let after = index.key_locations();
        prop_assert_eq!(before.len(), after.len());
        let mut promoted = 0;
        for (b, a) in before.iter().zip(&after) {
            prop_assert_eq!(a.key, b.key);
            prop_assert!(a.level <= b.level, "key {} went from {} to {}", a.key, b.level, a.level);
            promoted += usize::from(a.level < b.level);
        }
        prop_assert_eq!(promoted, r.promoted_keys);
        prop_assert_eq!(r.demoted_keys, 0);
        prop_assert!(r.promoted.iter().all(|p| p.old_level >= 3));
        prop_assert!(r.promoted_keys <= r.promotable_keys);

        let stats_after = index.stats();
        prop_assert_eq!(r.slots_added, stats_after.total_slots as i64 - stats_before.total_slots as i64);
        prop_assert!(r.virtual_slots_added <= r.budget_accepted as i64);
        prop_assert!(r.slots_added <= (r.budget_accepted + r.reallocation_slots) as i64);
        for dcs in r.decisions.iter().filter(|d| d.accepted) {
            prop_assert!(dcs.height_after < dcs.height_before);
            prop_assert!(dcs.virtual_slots_after <= dcs.subtree_budget);
            match mode {
                IndexMode::Exact => prop_assert!(dcs.sse_after < dcs.sse_before && dcs.demoted == 0),
                IndexMode::Gapped => prop_assert!(dcs.cost_delta < c),
            }
        }
        if alpha * (n as f64) < 1.0 {
            prop_assert_eq!(r.promoted_keys, 0);
        }

        let again = optimize(&mut index, &smoothing, &params, offset, DEFAULT_STOP_LEVEL).unwrap();
        prop_assert_eq!(again.promoted_keys, 0);
        prop_assert_eq!(again.merges_accepted, 0);
    }

    #[test]
    fn stricter_threshold_never_accepts_more_at_one_level(
        d in dist(),
        n in 200usize..3000,
        seed in any::<u64>(),
    ) {
        // with a single level evaluated there is no interaction between merges
        let (_, base) = setup(d, n, seed, IndexMode::Gapped);
        let smoothing = SmoothingConfig::alpha(0.1).unwrap();
        let mut last = usize::MAX;
        for c in [-0.001, -1.0, -5.0, -20.0, -1000.0] {
            let mut index = base.clone();
            let params = CostModelParams { threshold_c: c, ..CostModelParams::default() };
            let deepest = index.stats().height.saturating_sub(1);
            let r = optimize(&mut index, &smoothing, &params, 0, deepest.max(DEFAULT_STOP_LEVEL)).unwrap();
            prop_assert!(r.merges_accepted <= last);
            last = r.merges_accepted;
        }
        prop_assert_eq!(last, 0);
    }
}
