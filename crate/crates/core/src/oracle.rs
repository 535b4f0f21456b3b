//! Brute-force reference implementations. Slow on purpose and independent of the
//! incremental sums in [`crate::model`]: every fit here is a fresh two-pass `f64`
//! regression over a materialised key vector.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::csv::{
    calibrate_with_clock, default_start_level_offset, optimize, CostModelParams, LookupClock,
    DEFAULT_STOP_LEVEL,
};
use crate::error::{Error, Result};
use crate::index::{Index, IndexConfig, IndexMode, LookupTrace};
use crate::model::{
    loss_derivative_expanded, CandidatePoint, FitAggregates, LinearModel, SortedKeySet,
};
use crate::smoothing::{smooth, Smoother, SmoothingConfig};
use crate::workloads::{decode_dataset, encode_dataset, gen_synthetic, DatasetSpec, Distribution};

/// Largest `max − min` key spread [`brute_force_best_candidate`] will scan.
pub const MAX_SCAN_SPREAD: u64 = 100_000;
/// Largest candidate count [`exhaustive_smooth`] will enumerate subsets of.
pub const MAX_EXHAUSTIVE_CANDIDATES: usize = 30;
/// Largest subset size [`exhaustive_smooth`] will enumerate.
pub const MAX_EXHAUSTIVE_LAMBDA: usize = 6;

/// `Σ (model(k_i) − i)²`, summed naively.
pub fn direct_sse(keys: &[u64], model: &LinearModel) -> f64 {
    keys.iter()
        .enumerate()
        .map(|(i, &k)| {
            let r = model.predict(k) - i as f64;
            r * r
        })
        .sum()
}

/// Two-pass least squares over `(keys[i], i)`; returns the model and the SSE summed
/// residual by residual.
pub fn naive_fit(keys: &[u64]) -> (LinearModel, f64) {
    if keys.is_empty() {
        return (LinearModel::default(), 0.0);
    }
    let n = keys.len() as f64;
    let xs: Vec<f64> = keys.iter().map(|&k| (k - keys[0]) as f64).collect();
    let mean_x = xs.iter().sum::<f64>() / n;
    let mean_y = (0..keys.len()).map(|i| i as f64).sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (i, x) in xs.iter().enumerate() {
        sxx += (x - mean_x) * (x - mean_x);
        sxy += (x - mean_x) * (i as f64 - mean_y);
    }
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let icpt = mean_y - slope * mean_x;
    let sse = xs
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let r = slope * x + icpt - i as f64;
            r * r
        })
        .sum();
    (LinearModel::with_origin(slope, icpt, keys[0]), sse)
}

/// Legal virtual-key values: integers strictly inside `(min, max)` not already present.
pub fn legal_candidates(keys: &[u64]) -> Vec<u64> {
    keys.windows(2).flat_map(|w| w[0] + 1..w[1]).collect()
}

fn with_inserted(keys: &[u64], extra: &[u64]) -> Vec<u64> {
    let mut all = Vec::with_capacity(keys.len() + extra.len());
    all.extend_from_slice(keys);
    all.extend_from_slice(extra);
    all.sort_unstable();
    all
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BruteForceBest {
    pub candidate: CandidatePoint,
    /// Number of candidate values refitted from scratch.
    pub evaluations: usize,
}

/// Refits from scratch for every legal candidate and returns the one with the smallest
/// total SSE (smallest key on ties). `None` when there are no legal candidates.
pub fn brute_force_best_candidate(keys: &[u64]) -> Result<Option<BruteForceBest>> {
    check_sorted(keys)?;
    let spread = keys[keys.len() - 1] - keys[0];
    if spread > MAX_SCAN_SPREAD {
        return Err(Error::OracleLimit(format!(
            "key spread {spread} exceeds {MAX_SCAN_SPREAD}"
        )));
    }
    let mut best: Option<CandidatePoint> = None;
    let mut evaluations = 0;
    for v in legal_candidates(keys) {
        let (_, sse) = naive_fit(&with_inserted(keys, &[v]));
        evaluations += 1;
        if best.is_none_or(|b| sse < b.sse) {
            best = Some(CandidatePoint {
                key: v,
                rank: keys.partition_point(|&k| k < v),
                sse,
            });
        }
    }
    Ok(best.map(|candidate| BruteForceBest {
        candidate,
        evaluations,
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub best_subset: Vec<u64>,
    pub best_sse: f64,
    pub evaluations: usize,
    pub wall_time_ns: u128,
}

/// Optimal set of at most `lambda` virtual keys, by enumerating every subset of the
/// legal candidates in lexicographic order and refitting each from scratch.
pub fn exhaustive_smooth(keys: &[u64], lambda: usize) -> Result<OracleReport> {
    check_sorted(keys)?;
    let candidates = legal_candidates(keys);
    if candidates.len() > MAX_EXHAUSTIVE_CANDIDATES || lambda > MAX_EXHAUSTIVE_LAMBDA {
        return Err(Error::OracleLimit(format!(
            "{} candidates with λ = {lambda} exceeds {MAX_EXHAUSTIVE_CANDIDATES} / {MAX_EXHAUSTIVE_LAMBDA}",
            candidates.len()
        )));
    }
    let start = Instant::now();
    let (_, base_sse) = naive_fit(keys);
    let mut best_subset = Vec::new();
    let mut best_sse = base_sse;
    let mut evaluations = 1;
    let mut subset = Vec::with_capacity(lambda);
    for size in 1..=lambda.min(candidates.len()) {
        let mut idx: Vec<usize> = (0..size).collect();
        loop {
            subset.clear();
            subset.extend(idx.iter().map(|&i| candidates[i]));
            let (_, sse) = naive_fit(&with_inserted(keys, &subset));
            evaluations += 1;
            if sse < best_sse {
                best_sse = sse;
                best_subset.clone_from(&subset);
            }
            if !next_combination(&mut idx, candidates.len()) {
                break;
            }
        }
    }
    Ok(OracleReport {
        best_subset,
        best_sse,
        evaluations,
        wall_time_ns: start.elapsed().as_nanos(),
    })
}

/// Advances `idx` to the next k-combination of `0..n` in lexicographic order.
fn next_combination(idx: &mut [usize], n: usize) -> bool {
    let k = idx.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if idx[i] < n - k + i {
            idx[i] += 1;
            for j in i + 1..k {
                idx[j] = idx[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

fn check_sorted(keys: &[u64]) -> Result<()> {
    if keys.len() < 2 {
        return Err(Error::InvalidInput("oracle needs at least 2 keys".into()));
    }
    if keys.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidInput(
            "keys must be strictly ascending".into(),
        ));
    }
    Ok(())
}

/// One check of [`verify_suite`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

fn small_set(rng: &mut ChaCha8Rng, max_len: usize, max_spread: u64) -> Vec<u64> {
    let n = rng.random_range(4..=max_len);
    let spread = rng.random_range(n as u64..=max_spread);
    let mut keys: Vec<u64> = sample(rng, spread as usize + 1, n)
        .into_iter()
        .map(|i| i as u64)
        .collect();
    keys.sort_unstable();
    keys
}

/// A quick pass over the oracle properties: incremental fits against fresh fits, the
/// greedy pick against a full scan, greedy against exhaustive search, optimizer safety in
/// both index modes, calibration on a synthetic clock and the dataset round trip.
pub fn verify_suite(seed: u64) -> Vec<SuiteCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut check = |name: &str, passed: bool, detail: String| {
        out.push(SuiteCheck {
            name: name.to_string(),
            passed,
            detail,
        })
    };

    let (mut n, mut bad) = (0, 0);
    for _ in 0..100 {
        let keys = small_set(&mut rng, 64, 1_000_000);
        let agg = FitAggregates::from_slice(&keys).expect("≥ 4 keys");
        for sub in crate::smoothing::enumerate_subsequences(&keys)
            .iter()
            .take(50)
        {
            let c = CandidatePoint::new(rng.random_range(sub.lo_key..=sub.hi_key), sub.rank);
            let (_, sse) = naive_fit(&with_inserted(&keys, &[c.key]));
            let ok = agg.loss_with(&c).is_ok_and(|l| rel_close(l, sse, 1e-9))
                && match (agg.loss_derivative(&c), loss_derivative_expanded(&agg, &c)) {
                    (Ok(d), Ok(e)) => (d - e).abs() <= 1e-6 * d.abs().max(1e-3),
                    _ => false,
                };
            bad += usize::from(!ok);
            n += 1;
        }
    }
    check(
        "incremental_loss",
        bad == 0,
        format!("{n} candidates, {bad} off"),
    );

    let (mut rounds, mut bad) = (0, 0);
    for _ in 0..100 {
        let keys = small_set(&mut rng, 64, 10_000);
        let mut s = Smoother::new(&keys).expect("≥ 4 keys");
        for _ in 0..3 {
            let got = s.best_candidate();
            let want = brute_force_best_candidate(s.aggregates().keys())
                .ok()
                .flatten();
            bad += usize::from(match (got, want) {
                (None, None) => false,
                (Some(g), Some(w)) => !rel_close(g.sse, w.candidate.sse, 1e-9),
                _ => true,
            });
            rounds += 1;
            if s.step().is_none() {
                break;
            }
        }
    }
    check(
        "greedy_pick_vs_full_scan",
        bad == 0,
        format!("{rounds} rounds, {bad} mismatches"),
    );

    let mut bad = 0;
    for _ in 0..10 {
        let mut keys: Vec<u64> = sample(&mut rng, 40, 10)
            .into_iter()
            .map(|i| i as u64)
            .collect();
        keys.sort_unstable();
        let set = SortedKeySet::new(keys.clone()).expect("distinct");
        let g = smooth(&set, &SmoothingConfig::lambda(5)).map(|v| v.final_sse());
        let ex = exhaustive_smooth(&keys, 5).map(|r| r.best_sse);
        bad += usize::from(match (g, ex) {
            (Ok(g), Ok(e)) => g < e - 1e-9 * e.max(1.0) || g > naive_fit(&keys).1 + 1e-9,
            _ => true,
        });
    }
    check(
        "greedy_vs_exhaustive",
        bad == 0,
        format!("10 sets, {bad} out of order"),
    );

    for mode in [IndexMode::Exact, IndexMode::Gapped] {
        let detail = (|| -> Result<(bool, String)> {
            let keys = gen_synthetic(&DatasetSpec::synthetic(
                Distribution::Lognormal,
                20_000,
                seed,
            ))?;
            let mut index = Index::bulk_build(&keys, IndexConfig::new(mode))?;
            let smoothing = SmoothingConfig::alpha(0.1)?;
            let params = CostModelParams::default();
            let offset = default_start_level_offset(mode);
            let r = optimize(&mut index, &smoothing, &params, offset, DEFAULT_STOP_LEVEL)?;
            let missing = keys
                .as_slice()
                .iter()
                .filter(|&&k| index.lookup(k).payload != Some(k))
                .count();
            let again = optimize(&mut index, &smoothing, &params, offset, DEFAULT_STOP_LEVEL)?;
            Ok((
                missing == 0 && r.demoted_keys == 0 && again.promoted_keys == 0,
                format!(
                    "{} promoted, {missing} missing, {} demoted, second run promoted {}",
                    r.promoted_keys, r.demoted_keys, again.promoted_keys
                ),
            ))
        })();
        let name = format!("optimize_safety_{}", mode.name());
        match detail {
            Ok((passed, d)) => check(&name, passed, d),
            Err(e) => check(&name, false, e.to_string()),
        }
    }

    struct Linear;
    impl LookupClock for Linear {
        fn time_lookup(&mut self, _: &Index, _: u64, t: &LookupTrace, _: usize) -> f64 {
            7.0 * t.depth as f64 + 3.0 * t.search_steps as f64
        }
    }
    let cal = (|| -> Result<CostModelParams> {
        let keys = gen_synthetic(&DatasetSpec::synthetic(
            Distribution::Lognormal,
            20_000,
            seed,
        ))?;
        let index = Index::bulk_build(&keys, IndexConfig::new(IndexMode::Gapped))?;
        let sample_keys: Vec<u64> = keys.as_slice().iter().step_by(20).copied().collect();
        let c = calibrate_with_clock(
            &index,
            &sample_keys,
            1,
            &CostModelParams::default(),
            &mut Linear,
        )?;
        Ok(c.params)
    })();
    match cal {
        Ok(p) => check(
            "calibration_recovery",
            (p.traversal_constant - 7.0).abs() <= 0.07 && (p.search_constant - 3.0).abs() <= 0.03,
            format!(
                "({:.4}, {:.4}) for (7, 3)",
                p.traversal_constant, p.search_constant
            ),
        ),
        Err(e) => check("calibration_recovery", false, e.to_string()),
    }

    let keys = small_set(&mut rng, 200, u64::MAX / 2);
    let round_trip = decode_dataset(&encode_dataset(&keys)).map(SortedKeySet::into_vec);
    check(
        "dataset_round_trip",
        round_trip.as_ref().is_ok_and(|k| *k == keys),
        format!("{} keys", keys.len()),
    );
    out
}
