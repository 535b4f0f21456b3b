//! Greedy CDF smoothing: insert up to `λ` virtual keys into a sorted key set, one at a
//! time, each time choosing the integer key whose insertion minimises the total squared
//! error of the refitted linear model.
//!
//! Candidates are never materialised per value. The integers strictly between two
//! adjacent keys form a [`Subsequence`] sharing one insertion rank; within it the loss is
//! convex in the key, so the derivative signs at its two endpoints decide whether the
//! minimum is interior (found by bisection on the sign change) or at an endpoint.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CandidatePoint, FitAggregates, LinearModel, SortedKeySet};

/// Integer candidate values `lo_key..=hi_key` strictly between two adjacent base keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subsequence {
    pub lo_key: u64,
    pub hi_key: u64,
    /// Index of the upper neighbouring key, i.e. the insertion rank of every value.
    pub rank: usize,
}

impl Subsequence {
    pub fn len(&self) -> u64 {
        self.hi_key - self.lo_key + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, key: u64) -> bool {
        (self.lo_key..=self.hi_key).contains(&key)
    }
}

/// One subsequence per gap of at least one free integer between adjacent keys.
pub fn enumerate_subsequences(keys: &[u64]) -> Vec<Subsequence> {
    keys.windows(2)
        .enumerate()
        .filter(|(_, w)| w[1] - w[0] >= 2)
        .map(|(i, w)| Subsequence {
            lo_key: w[0] + 1,
            hi_key: w[1] - 1,
            rank: i + 1,
        })
        .collect()
}

/// The loss-minimising value inside one subsequence.
pub fn best_in_subsequence(sub: &Subsequence, agg: &FitAggregates) -> CandidatePoint {
    best_with_hint(sub, agg, &mut None)
}

/// `hint` carries the sign-change position found in a previous round; when it still
/// brackets the sign change the bisection is skipped.
fn best_with_hint(
    sub: &Subsequence,
    agg: &FitAggregates,
    hint: &mut Option<u64>,
) -> CandidatePoint {
    let rank = sub.rank;
    let eval = |key: u64| CandidatePoint {
        key,
        rank,
        sse: agg.loss_unchecked(key, rank),
    };
    let (lo, hi) = (sub.lo_key, sub.hi_key);
    if hi - lo <= 1 {
        *hint = None;
        return min_of(eval(lo), eval(hi));
    }
    let deriv = |key: u64| agg.derivative_unchecked(key, rank);
    if !(deriv(lo) < 0.0 && deriv(hi) > 0.0) {
        *hint = None;
        return min_of(eval(lo), eval(hi));
    }

    // Invariant: deriv(below) < 0 <= deriv(above).
    let (mut below, mut above) = (lo, hi);
    match *hint {
        Some(x) if x > lo && x <= hi && deriv(x - 1) < 0.0 && deriv(x) >= 0.0 => {
            below = x - 1;
            above = x;
        }
        _ => {
            for _ in 0..64 {
                if above - below <= 1 {
                    break;
                }
                let mid = below + (above - below) / 2;
                if deriv(mid) < 0.0 {
                    below = mid;
                } else {
                    above = mid;
                }
            }
        }
    }
    *hint = Some(above);
    min_of(eval(below), eval(above))
}

/// Smaller SSE wins; ties go to the smaller key.
#[inline]
fn min_of(a: CandidatePoint, b: CandidatePoint) -> CandidatePoint {
    if b.sse < a.sse || (b.sse == a.sse && b.key < a.key) {
        b
    } else {
        a
    }
}

/// Smoothing budget: a fraction of the key count or an explicit point count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    Alpha(f64),
    Lambda(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothingConfig {
    pub budget: Budget,
}

impl SmoothingConfig {
    pub fn alpha(alpha: f64) -> Result<Self> {
        if !alpha.is_finite() || alpha < 0.0 {
            return Err(Error::InvalidInput(format!(
                "smoothing threshold must be a non-negative real, got {alpha}"
            )));
        }
        Ok(Self {
            budget: Budget::Alpha(alpha),
        })
    }

    pub fn lambda(lambda: usize) -> Self {
        Self {
            budget: Budget::Lambda(lambda),
        }
    }

    /// `λ = ⌊α·n⌋`, or the explicit count.
    pub fn budget_for(&self, n: usize) -> usize {
        match self.budget {
            Budget::Alpha(a) => (a * n as f64).floor() as usize,
            Budget::Lambda(l) => l,
        }
    }
}

/// Accepted virtual points in insertion order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VirtualPointSet {
    /// `rank` is the insertion rank at the time the point was accepted; `sse` the total
    /// error right after accepting it.
    pub points: Vec<CandidatePoint>,
    /// Base SSE followed by the SSE after each accepted point; strictly decreasing.
    pub sse_trace: Vec<f64>,
    pub final_model: LinearModel,
    pub budget: usize,
}

impl VirtualPointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Virtual keys in ascending order.
    pub fn sorted_keys(&self) -> Vec<u64> {
        let mut keys: Vec<u64> = self.points.iter().map(|p| p.key).collect();
        keys.sort_unstable();
        keys
    }

    pub fn base_sse(&self) -> f64 {
        self.sse_trace[0]
    }

    pub fn final_sse(&self) -> f64 {
        *self.sse_trace.last().unwrap()
    }
}

/// Round-by-round greedy state. [`smooth`] drives it to completion; tests drive it one
/// round at a time to compare each pick against a full scan.
#[derive(Debug, Clone)]
pub struct Smoother {
    agg: FitAggregates,
    subs: Vec<Subsequence>,
    hints: Vec<Option<u64>>,
    current_sse: f64,
}

impl Smoother {
    pub fn new(keys: &[u64]) -> Result<Self> {
        let agg = FitAggregates::from_slice(keys)?;
        let subs = enumerate_subsequences(keys);
        let current_sse = agg.base_fit().1;
        Ok(Self {
            hints: vec![None; subs.len()],
            agg,
            subs,
            current_sse,
        })
    }

    pub fn aggregates(&self) -> &FitAggregates {
        &self.agg
    }

    pub fn subsequences(&self) -> &[Subsequence] {
        &self.subs
    }

    /// SSE over the base keys plus every accepted point.
    pub fn current_sse(&self) -> f64 {
        self.current_sse
    }

    /// Global minimum over the per-subsequence winners, or `None` if no free integer
    /// remains between adjacent keys.
    pub fn best_candidate(&mut self) -> Option<CandidatePoint> {
        let mut best: Option<CandidatePoint> = None;
        for (sub, hint) in self.subs.iter().zip(self.hints.iter_mut()) {
            let cand = best_with_hint(sub, &self.agg, hint);
            best = Some(match best {
                // subsequences are scanned in key order, so `<` keeps the smaller key on ties
                Some(b) if b.sse <= cand.sse => b,
                _ => cand,
            });
        }
        best
    }

    /// Commits `cand` and splits its subsequence around it.
    pub fn accept(&mut self, cand: &CandidatePoint) -> Result<()> {
        self.agg.validate(cand)?;
        let idx = self.subs.partition_point(|s| s.hi_key < cand.key);
        let sub = self.subs[idx];
        debug_assert!(sub.contains(cand.key));
        self.agg.commit_unchecked(cand.key, cand.rank);
        self.current_sse = self.agg.base_fit().1;

        let mut pieces = Vec::with_capacity(2);
        if cand.key > sub.lo_key {
            pieces.push(Subsequence {
                lo_key: sub.lo_key,
                hi_key: cand.key - 1,
                rank: sub.rank,
            });
        }
        if cand.key < sub.hi_key {
            pieces.push(Subsequence {
                lo_key: cand.key + 1,
                hi_key: sub.hi_key,
                rank: sub.rank + 1,
            });
        }
        let added = pieces.len();
        self.subs.splice(idx..=idx, pieces);
        self.hints
            .splice(idx..=idx, std::iter::repeat_n(None, added));
        for s in &mut self.subs[idx + added..] {
            s.rank += 1;
        }
        Ok(())
    }

    /// One greedy round: accept the best candidate if it strictly lowers the SSE.
    pub fn step(&mut self) -> Option<CandidatePoint> {
        let best = self.best_candidate()?;
        if best.sse >= self.current_sse {
            return None;
        }
        self.accept(&best)
            .expect("greedy candidate is valid by construction");
        Some(CandidatePoint {
            sse: self.current_sse,
            ..best
        })
    }
}

/// Greedily inserts up to `λ` virtual points, stopping early once no candidate strictly
/// reduces the total SSE.
pub fn smooth(keys: &SortedKeySet, cfg: &SmoothingConfig) -> Result<VirtualPointSet> {
    smooth_slice(keys.as_slice(), cfg.budget_for(keys.len()))
}

pub(crate) fn smooth_slice(keys: &[u64], budget: usize) -> Result<VirtualPointSet> {
    let mut smoother = Smoother::new(keys)?;
    let mut points = Vec::new();
    let mut sse_trace = vec![smoother.current_sse()];
    while points.len() < budget {
        match smoother.step() {
            Some(p) => {
                sse_trace.push(p.sse);
                points.push(p);
            }
            None => break,
        }
    }
    Ok(VirtualPointSet {
        points,
        sse_trace,
        final_model: smoother.agg.base_fit().0,
        budget,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn keys(k: &[u64]) -> SortedKeySet {
        SortedKeySet::new(k.to_vec()).unwrap()
    }

    #[test]
    fn no_subsequences_for_consecutive_keys() {
        assert!(enumerate_subsequences(&[0, 1, 2, 3]).is_empty());
    }

    #[test]
    fn single_gap() {
        assert_eq!(
            enumerate_subsequences(&[0, 10]),
            vec![Subsequence {
                lo_key: 1,
                hi_key: 9,
                rank: 1
            }]
        );
        let subs = enumerate_subsequences(&[3, 20, 26, 27]);
        assert_eq!(subs[1].lo_key, 21);
        assert_eq!(subs[1].hi_key, 25);
        assert_eq!(subs[1].rank, 2);
    }

    #[test]
    fn width_one_subsequence() {
        let k = keys(&[0, 6, 8, 20]);
        let agg = FitAggregates::build(&k).unwrap();
        let sub = enumerate_subsequences(k.as_slice())[1];
        assert_eq!((sub.lo_key, sub.hi_key), (7, 7));
        let c = best_in_subsequence(&sub, &agg);
        assert_eq!(c.key, 7);
        assert_eq!(c.sse, agg.loss_with(&CandidatePoint::new(7, 2)).unwrap());
    }

    #[test]
    fn linear_keys_need_no_points() {
        let k = keys(&(0..10).collect::<Vec<_>>());
        let v = smooth(&k, &SmoothingConfig::alpha(0.5).unwrap()).unwrap();
        assert!(v.is_empty());
        assert_eq!(v.sse_trace, vec![0.0]);
    }

    #[test]
    fn zero_budget_returns_base() {
        let k = keys(&[0, 1, 4, 9, 30]);
        let v = smooth(&k, &SmoothingConfig::lambda(0)).unwrap();
        assert!(v.is_empty());
        assert_eq!(v.sse_trace.len(), 1);
        assert!((v.base_sse() - crate::model::fit_direct(k.as_slice()).unwrap().1).abs() < 1e-12);
    }

    #[test]
    fn trace_strictly_decreases_and_budget_holds() {
        let k = keys(&[1, 2, 3, 10, 11, 12, 40, 41, 42, 90, 200]);
        let v = smooth(&k, &SmoothingConfig::alpha(0.5).unwrap()).unwrap();
        assert_eq!(v.budget, 5);
        assert!(v.len() <= 5 && !v.is_empty());
        assert!(v.sse_trace.windows(2).all(|w| w[1] < w[0]));
        for p in &v.points {
            assert!(p.key > 1 && p.key < 200 && !k.contains(p.key));
        }
        let vk = v.sorted_keys();
        assert!(vk.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn negative_alpha_rejected() {
        assert!(SmoothingConfig::alpha(-0.1).is_err());
        assert!(SmoothingConfig::alpha(f64::NAN).is_err());
    }

    #[test]
    fn deterministic() {
        let k = keys(&[5, 9, 13, 100, 101, 180, 181, 182, 400, 1000, 1001, 1500]);
        let cfg = SmoothingConfig::alpha(0.4).unwrap();
        assert_eq!(smooth(&k, &cfg).unwrap(), smooth(&k, &cfg).unwrap());
    }
}
