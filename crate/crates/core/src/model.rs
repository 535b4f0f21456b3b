//! Least-squares fitting of a linear indexing function `rank ≈ slope·key + intercept`
//! over a sorted key set, plus the O(1) machinery for evaluating what the fit and its
//! squared error become when one extra (virtual) key is inserted.
//!
//! All sums are taken over keys shifted by the smallest key of the set (the *origin*)
//! and accumulated in `i128`. Derived quantities are computed exactly in integers as
//! long as they fit and converted to `f64` only at the final division; when a product
//! would overflow, the same formulas are evaluated on `f64` copies of the sums.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Deduplicated ascending keys. The rank of `keys[i]` is `i`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SortedKeySet {
    keys: Vec<u64>,
}

impl SortedKeySet {
    /// Wraps keys that are already strictly ascending.
    pub fn new(keys: Vec<u64>) -> Result<Self> {
        if let Some(w) = keys.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput(format!(
                "keys must be strictly ascending ({} then {})",
                w[0], w[1]
            )));
        }
        Ok(Self { keys })
    }

    /// Sorts and deduplicates arbitrary keys.
    pub fn from_unsorted(mut keys: Vec<u64>) -> Self {
        keys.sort_unstable();
        keys.dedup();
        Self { keys }
    }

    pub fn as_slice(&self) -> &[u64] {
        &self.keys
    }

    pub fn into_vec(self) -> Vec<u64> {
        self.keys
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn contains(&self, key: u64) -> bool {
        self.keys.binary_search(&key).is_ok()
    }

    /// Number of keys strictly less than `key`.
    pub fn rank_of(&self, key: u64) -> usize {
        self.keys.partition_point(|&k| k < key)
    }

    pub fn min(&self) -> Option<u64> {
        self.keys.first().copied()
    }

    pub fn max(&self) -> Option<u64> {
        self.keys.last().copied()
    }
}

impl AsRef<[u64]> for SortedKeySet {
    fn as_ref(&self) -> &[u64] {
        &self.keys
    }
}

/// `f(k) = slope·(k − origin) + intercept`, in rank (or slot) units.
///
/// Keeping an origin near the fitted keys avoids the cancellation an absolute intercept
/// suffers when keys are large and close together.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LinearModel {
    pub slope: f64,
    pub intercept: f64,
    #[serde(default)]
    pub origin: u64,
}

impl LinearModel {
    pub fn new(slope: f64, intercept: f64) -> Self {
        Self::with_origin(slope, intercept, 0)
    }

    pub fn with_origin(slope: f64, intercept: f64, origin: u64) -> Self {
        Self {
            slope,
            intercept,
            origin,
        }
    }

    #[inline]
    fn offset(&self, key: u64) -> f64 {
        if key >= self.origin {
            (key - self.origin) as f64
        } else {
            -((self.origin - key) as f64)
        }
    }

    #[inline]
    pub fn predict(&self, key: u64) -> f64 {
        self.slope * self.offset(key) + self.intercept
    }

    #[inline]
    pub fn predict_f64(&self, key: f64) -> f64 {
        self.slope * (key - self.origin as f64) + self.intercept
    }

    /// Value of the line at key 0.
    pub fn absolute_intercept(&self) -> f64 {
        self.intercept - self.slope * self.origin as f64
    }

    /// Multiplies both coefficients, e.g. to map ranks onto a slot array.
    pub fn scaled(&self, factor: f64) -> Self {
        Self::with_origin(self.slope * factor, self.intercept * factor, self.origin)
    }

    pub fn is_finite(&self) -> bool {
        self.slope.is_finite() && self.intercept.is_finite()
    }
}

/// A candidate (or committed) virtual point: key `k_v`, insertion rank `y_v` and the
/// total squared error of the refitted model when it is inserted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidatePoint {
    pub key: u64,
    pub rank: usize,
    pub sse: f64,
}

impl CandidatePoint {
    pub fn new(key: u64, rank: usize) -> Self {
        Self {
            key,
            rank,
            sse: f64::NAN,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ExactSums {
    n: i128,
    k: i128,
    y: i128,
    kk: i128,
    ky: i128,
    yy: i128,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct FloatSums {
    n: f64,
    k: f64,
    y: f64,
    kk: f64,
    ky: f64,
    yy: f64,
}

impl ExactSums {
    fn to_float(self) -> FloatSums {
        FloatSums {
            n: self.n as f64,
            k: self.k as f64,
            y: self.y as f64,
            kk: self.kk as f64,
            ky: self.ky as f64,
            yy: self.yy as f64,
        }
    }

    fn moments(&self) -> Option<ExactMoments> {
        let a = self
            .n
            .checked_mul(self.kk)?
            .checked_sub(self.k.checked_mul(self.k)?)?;
        let b = self
            .n
            .checked_mul(self.ky)?
            .checked_sub(self.k.checked_mul(self.y)?)?;
        let c = self
            .n
            .checked_mul(self.yy)?
            .checked_sub(self.y.checked_mul(self.y)?)?;
        Some(ExactMoments {
            n: self.n,
            sum_k: self.k,
            sum_y: self.y,
            a,
            b,
            c,
        })
    }
}

/// `a = N·Σk² − (Σk)²`, `b = N·Σky − Σk·Σy`, `c = N·Σy² − (Σy)²`.
#[derive(Debug, Clone, Copy)]
struct ExactMoments {
    n: i128,
    sum_k: i128,
    sum_y: i128,
    a: i128,
    b: i128,
    c: i128,
}

#[derive(Debug, Clone, Copy)]
struct Moments {
    n: f64,
    sum_k: f64,
    sum_y: f64,
    a: f64,
    b: f64,
    c: f64,
    exact: Option<ExactMoments>,
}

impl Moments {
    fn from_sums(exact: Option<ExactSums>, float: FloatSums) -> Self {
        if let Some(m) = exact.and_then(|s| s.moments()) {
            return Self {
                n: m.n as f64,
                sum_k: m.sum_k as f64,
                sum_y: m.sum_y as f64,
                a: m.a as f64,
                b: m.b as f64,
                c: m.c as f64,
                exact: Some(m),
            };
        }
        let f = float;
        Self {
            n: f.n,
            sum_k: f.k,
            sum_y: f.y,
            a: (f.n * f.kk - f.k * f.k).max(0.0),
            b: f.n * f.ky - f.k * f.y,
            c: (f.n * f.yy - f.y * f.y).max(0.0),
            exact: None,
        }
    }

    #[inline]
    fn degenerate(&self) -> bool {
        self.a <= 0.0
    }

    #[inline]
    fn slope(&self) -> f64 {
        if self.degenerate() {
            0.0
        } else {
            self.b / self.a
        }
    }

    /// Intercept in shifted-key coordinates.
    fn intercept(&self) -> f64 {
        if self.degenerate() {
            return self.sum_y / self.n;
        }
        if let Some(m) = &self.exact {
            let num =
                m.a.checked_mul(m.sum_y)
                    .zip(m.b.checked_mul(m.sum_k))
                    .and_then(|(p, q)| p.checked_sub(q));
            if let Some(num) = num {
                return num as f64 / (self.n * self.a);
            }
        }
        (self.sum_y - self.slope() * self.sum_k) / self.n
    }

    fn sse(&self) -> f64 {
        if self.degenerate() {
            return self.c / self.n;
        }
        if let Some(m) = &self.exact {
            let num =
                m.a.checked_mul(m.c)
                    .zip(m.b.checked_mul(m.b))
                    .and_then(|(p, q)| p.checked_sub(q));
            if let Some(num) = num {
                return num as f64 / (self.n * self.a);
            }
        }
        ((self.c - self.b * self.slope()) / self.n).max(0.0)
    }

    /// `(slope·d + intercept − y)` for a point in shifted coordinates.
    fn residual(&self, d: i128, y: i128) -> f64 {
        if !self.degenerate() {
            if let Some(m) = &self.exact {
                // N·a·r = N·b·d + (a·Σy − b·Σk) − N·a·y
                let num = (|| {
                    let na = m.n.checked_mul(m.a)?;
                    let t1 = m.n.checked_mul(m.b)?.checked_mul(d)?;
                    let t2 =
                        m.a.checked_mul(m.sum_y)?
                            .checked_sub(m.b.checked_mul(m.sum_k)?)?;
                    let t3 = na.checked_mul(y)?;
                    t1.checked_add(t2)?.checked_sub(t3)
                })();
                if let Some(num) = num {
                    return num as f64 / (self.n * self.a);
                }
            }
        }
        self.slope() * d as f64 + self.intercept() - y as f64
    }
}

/// Least-squares line through `(key_i, i)` and its sum of squared errors.
///
/// Computed from exact integer moments where they fit in 128 bits, otherwise from a
/// centered two-pass `f64` evaluation.
pub fn fit_direct(keys: &[u64]) -> Result<(LinearModel, f64)> {
    if keys.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "fitting needs at least 2 keys, got {}",
            keys.len()
        )));
    }
    Ok(fit_points(keys))
}

/// Like [`fit_direct`] but also accepts 0 or 1 keys (slope 0 through the single rank).
pub(crate) fn fit_points(keys: &[u64]) -> (LinearModel, f64) {
    match keys.len() {
        0 => return (LinearModel::default(), 0.0),
        1 => return (LinearModel::new(0.0, 0.0), 0.0),
        _ => {}
    }
    let origin = keys[0];
    if let Some(sums) = exact_sums(keys, origin) {
        let m = Moments::from_sums(Some(sums), sums.to_float());
        if m.exact.is_some() {
            let slope = m.slope();
            let model = LinearModel::with_origin(slope, m.intercept(), origin);
            return (model, m.sse());
        }
    }
    fit_two_pass(keys, origin)
}

fn exact_sums(keys: &[u64], origin: u64) -> Option<ExactSums> {
    let mut s = ExactSums {
        n: keys.len() as i128,
        k: 0,
        y: 0,
        kk: 0,
        ky: 0,
        yy: 0,
    };
    for (i, &key) in keys.iter().enumerate() {
        let d = (key - origin) as i128;
        let y = i as i128;
        s.k += d;
        s.y += y;
        s.kk = s.kk.checked_add(d.checked_mul(d)?)?;
        s.ky = s.ky.checked_add(d.checked_mul(y)?)?;
        s.yy += y * y;
    }
    Some(s)
}

fn fit_two_pass(keys: &[u64], origin: u64) -> (LinearModel, f64) {
    let n = keys.len() as f64;
    let mean_k = keys.iter().map(|&k| (k - origin) as f64).sum::<f64>() / n;
    let mean_y = (n - 1.0) / 2.0;
    let (mut skk, mut sky) = (0.0, 0.0);
    for (i, &k) in keys.iter().enumerate() {
        let dk = (k - origin) as f64 - mean_k;
        skk += dk * dk;
        sky += dk * (i as f64 - mean_y);
    }
    let slope = if skk > 0.0 { sky / skk } else { 0.0 };
    let icpt = mean_y - slope * mean_k;
    let sse = keys
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let r = slope * (k - origin) as f64 + icpt - i as f64;
            r * r
        })
        .sum();
    (LinearModel::with_origin(slope, icpt, origin), sse)
}

/// Running sums over a base key set that make refitting with one extra key O(1).
///
/// Keys are stored relative to `origin` (the smallest base key). Ranks of the base set
/// are always `0..n`, which is what the closed-form rank sums below rely on.
#[derive(Debug, Clone)]
pub struct FitAggregates {
    origin: u64,
    keys: Vec<u64>,
    /// `prefix[i] = Σ_{j<i} (keys[j] − origin)`, length `n + 1`.
    prefix: Vec<i128>,
    exact: Option<ExactSums>,
    float: FloatSums,
}

impl FitAggregates {
    pub fn build(keys: &SortedKeySet) -> Result<Self> {
        Self::from_slice(keys.as_slice())
    }

    pub(crate) fn from_slice(keys: &[u64]) -> Result<Self> {
        if keys.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "aggregates need at least 2 keys, got {}",
                keys.len()
            )));
        }
        let origin = keys[0];
        let mut prefix = Vec::with_capacity(keys.len() + 1);
        prefix.push(0i128);
        let mut acc = 0i128;
        for &k in keys {
            acc += (k - origin) as i128;
            prefix.push(acc);
        }
        let exact = exact_sums(keys, origin);
        let float = match exact {
            Some(s) => s.to_float(),
            None => {
                let mut f = FloatSums {
                    n: keys.len() as f64,
                    k: 0.0,
                    y: 0.0,
                    kk: 0.0,
                    ky: 0.0,
                    yy: 0.0,
                };
                for (i, &k) in keys.iter().enumerate() {
                    let d = (k - origin) as f64;
                    let y = i as f64;
                    f.k += d;
                    f.y += y;
                    f.kk += d * d;
                    f.ky += d * y;
                    f.yy += y * y;
                }
                f
            }
        };
        Ok(Self {
            origin,
            keys: keys.to_vec(),
            prefix,
            exact,
            float,
        })
    }

    pub fn n(&self) -> usize {
        self.keys.len()
    }

    pub fn origin(&self) -> u64 {
        self.origin
    }

    /// Current base keys (original keys plus every committed virtual key).
    pub fn keys(&self) -> &[u64] {
        &self.keys
    }

    /// Inclusive cumulative sums of `key − origin`.
    pub fn key_prefix_sums(&self) -> &[i128] {
        &self.prefix[1..]
    }

    /// Whether every sum is held exactly in 128-bit integers.
    pub fn is_exact(&self) -> bool {
        self.exact.is_some()
    }

    pub fn sum_k(&self) -> f64 {
        self.exact.map_or(self.float.k, |s| s.k as f64)
    }

    pub fn sum_y(&self) -> f64 {
        self.exact.map_or(self.float.y, |s| s.y as f64)
    }

    pub fn sum_kk(&self) -> f64 {
        self.exact.map_or(self.float.kk, |s| s.kk as f64)
    }

    pub fn sum_ky(&self) -> f64 {
        self.exact.map_or(self.float.ky, |s| s.ky as f64)
    }

    pub fn sum_yy(&self) -> f64 {
        self.exact.map_or(self.float.yy, |s| s.yy as f64)
    }

    /// Fit and SSE of the base set itself.
    pub fn base_fit(&self) -> (LinearModel, f64) {
        let m = Moments::from_sums(self.exact, self.float);
        let slope = m.slope();
        (
            LinearModel::with_origin(slope, m.intercept(), self.origin),
            m.sse(),
        )
    }

    /// `Σ_{i ≥ rank} (keys[i] − origin)`: the keys whose rank shifts when a point is
    /// inserted at `rank`.
    #[inline]
    fn tail_sum(&self, rank: usize) -> i128 {
        self.prefix[self.keys.len()] - self.prefix[rank]
    }

    /// Checks the open-range, non-collision and rank invariants of a candidate.
    pub fn validate(&self, cand: &CandidatePoint) -> Result<()> {
        let bad = |reason| {
            Err(Error::InvalidCandidate {
                key: cand.key,
                rank: cand.rank,
                reason,
            })
        };
        let (lo, hi) = (self.keys[0], self.keys[self.keys.len() - 1]);
        if cand.key <= lo || cand.key >= hi {
            return bad("outside the open key range");
        }
        match self.keys.binary_search(&cand.key) {
            Ok(_) => bad("collides with a base key"),
            Err(pos) if pos != cand.rank => bad("rank is not the number of smaller keys"),
            Err(_) => Ok(()),
        }
    }

    /// Sums over the enlarged set `K ∪ {(key, rank)}` with ranks at or after `rank`
    /// shifted by one.
    fn enlarged(&self, key: u64, rank: usize) -> (Option<ExactSums>, FloatSums) {
        let n = self.keys.len() as i128;
        let d = (key - self.origin) as i128;
        let r = rank as i128;
        let tail = self.tail_sum(rank);
        // Σy gains one for every shifted rank plus the new rank itself: (n − r) + r.
        // Σy² gains Σ_{i=r}^{n−1} (2i + 1) = n² − r², plus r².
        let exact = self.exact.and_then(|s| {
            Some(ExactSums {
                n: s.n + 1,
                k: s.k + d,
                y: s.y + n,
                kk: s.kk.checked_add(d.checked_mul(d)?)?,
                ky: s.ky.checked_add(tail)?.checked_add(d.checked_mul(r)?)?,
                yy: s.yy + n * n,
            })
        });
        let float = match exact {
            Some(e) => e.to_float(),
            None => {
                let (nf, df, rf) = (n as f64, d as f64, r as f64);
                let f = self.float;
                FloatSums {
                    n: f.n + 1.0,
                    k: f.k + df,
                    y: f.y + nf,
                    kk: f.kk + df * df,
                    ky: f.ky + tail as f64 + df * rf,
                    yy: f.yy + nf * nf,
                }
            }
        };
        (exact, float)
    }

    #[inline]
    fn enlarged_moments(&self, key: u64, rank: usize) -> Moments {
        let (e, f) = self.enlarged(key, rank);
        Moments::from_sums(e, f)
    }

    /// Refitted model over `K ∪ {cand}`, O(1).
    pub fn refit_with(&self, cand: &CandidatePoint) -> Result<LinearModel> {
        self.validate(cand)?;
        Ok(self.refit_unchecked(cand.key, cand.rank))
    }

    pub(crate) fn refit_unchecked(&self, key: u64, rank: usize) -> LinearModel {
        let m = self.enlarged_moments(key, rank);
        let slope = m.slope();
        LinearModel::with_origin(slope, m.intercept(), self.origin)
    }

    /// Total SSE of the refitted model over `K ∪ {cand}`, including the virtual point's
    /// own residual. O(1).
    pub fn loss_with(&self, cand: &CandidatePoint) -> Result<f64> {
        self.validate(cand)?;
        Ok(self.loss_unchecked(cand.key, cand.rank))
    }

    #[inline]
    pub(crate) fn loss_unchecked(&self, key: u64, rank: usize) -> f64 {
        self.enlarged_moments(key, rank).sse()
    }

    /// `∂L/∂k_v` with the insertion rank held fixed.
    ///
    /// Expanding the chain rule through the refitted slope and intercept, the terms that
    /// multiply `w'` and `b'` are the normal equations of the enlarged fit and vanish,
    /// leaving `2·w·(w·k_v + b − y_v)`. [`loss_derivative_expanded`] keeps every term.
    pub fn loss_derivative(&self, cand: &CandidatePoint) -> Result<f64> {
        self.validate(cand)?;
        Ok(self.derivative_unchecked(cand.key, cand.rank))
    }

    #[inline]
    pub(crate) fn derivative_unchecked(&self, key: u64, rank: usize) -> f64 {
        let m = self.enlarged_moments(key, rank);
        let d = (key - self.origin) as i128;
        2.0 * m.slope() * m.residual(d, rank as i128)
    }

    /// Makes the enlarged set the new base. O(n) for the prefix sums, O(1) otherwise.
    pub fn commit(&mut self, cand: &CandidatePoint) -> Result<()> {
        self.validate(cand)?;
        self.commit_unchecked(cand.key, cand.rank);
        Ok(())
    }

    pub(crate) fn commit_unchecked(&mut self, key: u64, rank: usize) {
        let (exact, float) = self.enlarged(key, rank);
        self.exact = exact;
        self.float = float;
        self.keys.insert(rank, key);
        self.prefix.insert(rank + 1, 0);
        for i in rank..self.keys.len() {
            self.prefix[i + 1] = self.prefix[i] + (self.keys[i] - self.origin) as i128;
        }
    }
}

/// Term-by-term evaluation of the enlarged-set SSE, with the base set's contribution
/// written over its rank-shifted sums and the virtual point's residual added separately:
///
/// `w²Σk² + 2wbΣk − 2wΣky + nb² − 2bΣy + Σy_orig² + n² − y_v² + (w·k_v + b − y_v)²`
///
/// Evaluated in `f64` on origin-shifted keys; it cancels badly for wide key ranges, so
/// [`FitAggregates::loss_with`] is the one to use outside of tests.
pub fn loss_expanded(agg: &FitAggregates, cand: &CandidatePoint) -> Result<f64> {
    agg.validate(cand)?;
    let t = ExpandedTerms::new(agg, cand);
    let (w, b) = (t.w, t.b);
    let n = t.n;
    let r = t.rank;
    let resid = w * t.d + b - r;
    Ok(
        w * w * t.skk + 2.0 * w * b * t.sk - 2.0 * w * t.sky + n * b * b - 2.0 * b * t.sy
            + t.syy_orig
            + n * n
            - r * r
            + resid * resid,
    )
}

/// Chain-rule form of `∂L/∂k_v` through the intermediaries
/// `A = (n+1)(Σk² + k_v²) − ((n+1)k̄_v)²` and `B = (n+1)(Σky + k_v y_v) − (n+1)²k̄_v ȳ_v`:
///
/// `w' = (A·n(y_v − ȳ) − B·2n(k_v − k̄)) / A²`, `b' = −(w + (n+1)k̄_v w') / (n+1)`,
/// `L' = 2(w'(wΣk² + nbk̄ − Σky) + nb'(wk̄ + b − ȳ) + (wk_v + b − y_v)(w'k_v + w + b'))`.
///
/// Sums are over the base keys with ranks shifted for the insertion; `f64` throughout.
pub fn loss_derivative_expanded(agg: &FitAggregates, cand: &CandidatePoint) -> Result<f64> {
    agg.validate(cand)?;
    let t = ExpandedTerms::new(agg, cand);
    let (w, b, n, d, r) = (t.w, t.b, t.n, t.d, t.rank);
    let k_bar = t.sk / n;
    let y_bar = t.sy / n;
    let k_bar_v = (t.sk + d) / (n + 1.0);
    let y_bar_v = (t.sy + r) / (n + 1.0);
    let a = (n + 1.0) * (t.skk + d * d) - ((n + 1.0) * k_bar_v).powi(2);
    let bb = (n + 1.0) * (t.sky + d * r) - (n + 1.0).powi(2) * k_bar_v * y_bar_v;
    let w_prime = (a * (n * (r - y_bar)) - bb * (2.0 * n * (d - k_bar))) / (a * a);
    let b_prime = -(w + (n + 1.0) * k_bar_v * w_prime) / (n + 1.0);
    Ok(2.0
        * (w_prime * (w * t.skk + n * b * k_bar - t.sky)
            + n * b_prime * (w * k_bar + b - y_bar)
            + (w * d + b - r) * (w_prime * d + w + b_prime)))
}

/// Base-set sums with ranks shifted for an insertion at `cand.rank`, plus the refit.
struct ExpandedTerms {
    n: f64,
    d: f64,
    rank: f64,
    sk: f64,
    skk: f64,
    sy: f64,
    sky: f64,
    syy_orig: f64,
    w: f64,
    b: f64,
}

impl ExpandedTerms {
    fn new(agg: &FitAggregates, cand: &CandidatePoint) -> Self {
        let n = agg.n() as f64;
        let r = cand.rank as f64;
        let tail = agg.tail_sum(cand.rank) as f64;
        let m = agg.enlarged_moments(cand.key, cand.rank);
        Self {
            n,
            d: (cand.key - agg.origin) as f64,
            rank: r,
            sk: agg.sum_k(),
            skk: agg.sum_kk(),
            // Σy over shifted base ranks: Σy_orig + n − y_v
            sy: agg.sum_y() + n - r,
            // Σky over shifted base ranks: Σk·y_orig plus the keys whose rank moved
            sky: agg.sum_ky() + tail,
            syy_orig: agg.sum_yy(),
            w: m.slope(),
            b: m.intercept(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(keys: &[u64]) -> SortedKeySet {
        SortedKeySet::new(keys.to_vec()).unwrap()
    }

    #[test]
    fn sorted_key_set_rejects_unsorted() {
        assert!(SortedKeySet::new(vec![1, 1]).is_err());
        assert!(SortedKeySet::new(vec![2, 1]).is_err());
        assert_eq!(
            SortedKeySet::from_unsorted(vec![5, 1, 5]).as_slice(),
            &[1, 5]
        );
    }

    #[test]
    fn fit_direct_linear_keys() {
        let (m, sse) = fit_direct(&[0, 1, 2, 3]).unwrap();
        assert_eq!((m.slope, m.intercept, sse), (1.0, 0.0, 0.0));
    }

    #[test]
    fn fit_direct_three_keys() {
        // slope 6/13, intercept 3/13, sse 2/13 by hand
        let (m, sse) = fit_direct(&[0, 1, 4]).unwrap();
        assert!((m.slope - 6.0 / 13.0).abs() < 1e-15);
        assert!((m.intercept - 3.0 / 13.0).abs() < 1e-15);
        assert!((sse - 2.0 / 13.0).abs() < 1e-15);
    }

    #[test]
    fn fit_direct_two_points_exact() {
        let (m, sse) = fit_direct(&[0, 1000]).unwrap();
        assert_eq!(m.slope, 0.001);
        assert_eq!(m.intercept, 0.0);
        assert_eq!(sse, 0.0);
    }

    #[test]
    fn fit_direct_needs_two_keys() {
        assert!(matches!(fit_direct(&[7]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn fit_direct_wide_keys_falls_back() {
        let keys = [0, u64::MAX / 3, u64::MAX / 2, u64::MAX];
        let (m, sse) = fit_direct(&keys).unwrap();
        assert!(m.is_finite() && m.slope > 0.0);
        assert!(sse.is_finite() && sse >= 0.0);
    }

    #[test]
    fn aggregates_direct_sums() {
        let agg = FitAggregates::build(&set(&[0, 1, 2])).unwrap();
        assert_eq!(
            (agg.sum_k(), agg.sum_y(), agg.sum_kk(), agg.sum_ky()),
            (3.0, 3.0, 5.0, 5.0)
        );
        let agg = FitAggregates::build(&set(&[0, 1, 4])).unwrap();
        assert_eq!(agg.sum_k(), 5.0);
        assert_eq!(agg.sum_ky(), 9.0);
        assert_eq!(agg.key_prefix_sums(), &[0, 1, 5]);
    }

    #[test]
    fn refit_collinear() {
        let agg = FitAggregates::build(&set(&[0, 2])).unwrap();
        let c = CandidatePoint::new(1, 1);
        let m = agg.refit_with(&c).unwrap();
        assert!((m.slope - 1.0).abs() < 1e-15 && m.intercept.abs() < 1e-15);
        assert_eq!(agg.loss_with(&c).unwrap(), 0.0);
    }

    #[test]
    fn refit_matches_direct_on_enlarged() {
        let agg = FitAggregates::build(&set(&[0, 1, 4])).unwrap();
        let c = CandidatePoint::new(2, 2);
        let m = agg.refit_with(&c).unwrap();
        let (direct, sse) = fit_direct(&[0, 1, 2, 4]).unwrap();
        assert!((m.slope - direct.slope).abs() < 1e-12);
        assert!((m.intercept - direct.intercept).abs() < 1e-12);
        assert!((agg.loss_with(&c).unwrap() - sse).abs() < 1e-12);
        let c3 = CandidatePoint::new(3, 2);
        let (_, sse3) = fit_direct(&[0, 1, 3, 4]).unwrap();
        assert!((agg.loss_with(&c3).unwrap() - sse3).abs() < 1e-12);
    }

    #[test]
    fn candidate_validation() {
        let agg = FitAggregates::build(&set(&[10, 20, 30])).unwrap();
        for c in [
            CandidatePoint::new(10, 0),
            CandidatePoint::new(30, 3),
            CandidatePoint::new(20, 1),
            CandidatePoint::new(25, 1),
            CandidatePoint::new(5, 0),
        ] {
            assert!(matches!(
                agg.loss_with(&c),
                Err(Error::InvalidCandidate { .. })
            ));
        }
        assert!(agg.loss_with(&CandidatePoint::new(25, 2)).is_ok());
    }

    #[test]
    fn derivative_zero_at_symmetric_midpoint() {
        let agg = FitAggregates::build(&set(&[0, 10])).unwrap();
        let d = agg.loss_derivative(&CandidatePoint::new(5, 1)).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn commit_matches_fresh_build() {
        let mut agg = FitAggregates::build(&set(&[3, 9, 40, 41, 90])).unwrap();
        agg.commit(&CandidatePoint::new(20, 2)).unwrap();
        agg.commit(&CandidatePoint::new(60, 5)).unwrap();
        let fresh = FitAggregates::build(&set(&[3, 9, 20, 40, 41, 60, 90])).unwrap();
        assert_eq!(agg.keys(), fresh.keys());
        assert_eq!(agg.key_prefix_sums(), fresh.key_prefix_sums());
        assert_eq!(agg.exact, fresh.exact);
        assert_eq!(agg.base_fit(), fresh.base_fit());
    }

    #[test]
    fn commit_of_collinear_point_keeps_perfect_fit() {
        let mut agg = FitAggregates::build(&set(&[0, 2])).unwrap();
        agg.commit(&CandidatePoint::new(1, 1)).unwrap();
        let (m, sse) = agg.base_fit();
        assert_eq!(sse, 0.0);
        assert!((m.slope - 1.0).abs() < 1e-15 && m.intercept.abs() < 1e-15);
        // the fit stays perfect when the same gap-filling is repeated at a wider scale
        let mut agg = FitAggregates::build(&set(&[0, 1, 3, 4])).unwrap();
        agg.commit(&CandidatePoint::new(2, 2)).unwrap();
        assert_eq!(agg.base_fit().1, 0.0);
    }

    #[test]
    fn expanded_forms_agree_on_small_keys() {
        let agg = FitAggregates::build(&set(&[0, 3, 4, 9, 15, 16, 30])).unwrap();
        for key in [1u64, 2, 5, 7, 8, 10, 14, 20, 29] {
            let c = CandidatePoint::new(key, agg.keys().partition_point(|&k| k < key));
            let l = agg.loss_with(&c).unwrap();
            let le = loss_expanded(&agg, &c).unwrap();
            assert!((l - le).abs() < 1e-9 * l.max(1.0), "{key}: {l} vs {le}");
            let g = agg.loss_derivative(&c).unwrap();
            let ge = loss_derivative_expanded(&agg, &c).unwrap();
            assert!(
                (g - ge).abs() < 1e-8 * g.abs().max(1e-3),
                "{key}: {g} vs {ge}"
            );
        }
    }
}
