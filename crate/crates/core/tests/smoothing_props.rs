use proptest::prelude::*;
use smoothidx::model::{loss_derivative_expanded, loss_expanded};
use smoothidx::oracle::{brute_force_best_candidate, direct_sse, exhaustive_smooth, naive_fit};
use smoothidx::smoothing::{enumerate_subsequences, Smoother};
use smoothidx::{smooth, CandidatePoint, FitAggregates, SmoothingConfig, SortedKeySet};

fn small_keys(max_len: usize, spread: u64) -> impl Strategy<Value = Vec<u64>> {
    prop::collection::btree_set(0..spread, 2..max_len).prop_map(|s| s.into_iter().collect())
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn filtered_search_matches_brute_force(keys in small_keys(40, 2_000)) {
        let mut s = Smoother::new(&keys).unwrap();
        let got = s.best_candidate();
        let want = brute_force_best_candidate(&keys).unwrap();
        match (got, want) {
            (None, None) => {}
            (Some(g), Some(w)) => {
                prop_assert!(close(g.sse, w.candidate.sse, 1e-9), "{g:?} vs {w:?}");
            }
            (g, w) => prop_assert!(false, "{g:?} vs {w:?}"),
        }
    }

    #[test]
    fn refit_matches_fresh_fit(keys in small_keys(60, 1_000_000), pick in any::<prop::sample::Index>()) {
        let subs = enumerate_subsequences(&keys);
        prop_assume!(!subs.is_empty());
        let sub = subs[pick.index(subs.len())];
        let v = sub.lo_key + (pick.index(1000) as u64 % sub.len());
        let set = SortedKeySet::new(keys.clone()).unwrap();
        let agg = FitAggregates::build(&set).unwrap();
        let cand = CandidatePoint::new(v, sub.rank);
        let mut all = keys.clone();
        all.insert(sub.rank, v);
        let (m, sse) = naive_fit(&all);
        let refit = agg.refit_with(&cand).unwrap();
        prop_assert!(close(refit.slope, m.slope, 1e-9));
        prop_assert!(close(agg.loss_with(&cand).unwrap(), sse, 1e-9));
        prop_assert!(close(loss_expanded(&agg, &cand).unwrap(), sse, 1e-6));
        let d = agg.loss_derivative(&cand).unwrap();
        let de = loss_derivative_expanded(&agg, &cand).unwrap();
        prop_assert!((d - de).abs() <= 1e-6 * d.abs().max(1e-3), "{d} vs {de}");
    }

    #[test]
    fn sse_trace_never_increases(keys in small_keys(80, 100_000), alpha in 0.0f64..1.0) {
        let set = SortedKeySet::new(keys.clone()).unwrap();
        let out = smooth(&set, &SmoothingConfig::alpha(alpha).unwrap()).unwrap();
        prop_assert!(out.len() <= out.budget);
        prop_assert_eq!(out.sse_trace.len(), out.len() + 1);
        for w in out.sse_trace.windows(2) {
            prop_assert!(w[1] < w[0]);
        }
        let mut merged = keys.clone();
        merged.extend(out.sorted_keys());
        merged.sort_unstable();
        prop_assert!(merged.windows(2).all(|w| w[0] < w[1]));
        for p in &out.points {
            prop_assert!(p.key > keys[0] && p.key < keys[keys.len() - 1]);
            prop_assert!(keys.binary_search(&p.key).is_err());
        }
        let (_, sse) = naive_fit(&merged);
        prop_assert!(close(out.final_sse(), sse, 1e-9));
        prop_assert!(close(direct_sse(&merged, &out.final_model), sse, 1e-6));
    }

    #[test]
    fn greedy_never_beats_exhaustive(keys in small_keys(10, 40), lambda in 1usize..4) {
        let Ok(ex) = exhaustive_smooth(&keys, lambda) else { return Ok(()); };
        let set = SortedKeySet::new(keys.clone()).unwrap();
        let g = smooth(&set, &SmoothingConfig::lambda(lambda)).unwrap();
        prop_assert!(g.final_sse() >= ex.best_sse - 1e-9 * ex.best_sse.max(1.0));
    }
}
