//! Datasets, query samplers and read-write batches.
//!
//! Dataset files use the SOSD layout: a little-endian `u64` count followed by that many
//! little-endian `u64` keys.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Exp, LogNormal, Zipf};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SortedKeySet;

pub fn load_dataset(path: impl AsRef<Path>) -> Result<SortedKeySet> {
    let bytes = fs::read(path.as_ref())?;
    decode_dataset(&bytes)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<SortedKeySet> {
    if bytes.len() < 8 {
        return Err(Error::Format(format!(
            "{} bytes is too short for a count header",
            bytes.len()
        )));
    }
    let (head, body) = bytes.split_at(8);
    let count = u64::from_le_bytes(head.try_into().unwrap());
    if body.len() % 8 != 0 || (body.len() / 8) as u64 != count {
        return Err(Error::Format(format!(
            "header says {count} keys but body holds {} bytes",
            body.len()
        )));
    }
    let keys = body
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(SortedKeySet::from_unsorted(keys))
}

pub fn encode_dataset(keys: &[u64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 * (keys.len() + 1));
    out.extend_from_slice(&(keys.len() as u64).to_le_bytes());
    for k in keys {
        out.extend_from_slice(&k.to_le_bytes());
    }
    out
}

pub fn write_dataset(path: impl AsRef<Path>, keys: &[u64]) -> Result<()> {
    fs::write(path.as_ref(), encode_dataset(keys))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Distribution {
    /// One key per equal-width stratum of the 64-bit range, jittered inside the lower
    /// half of the stratum. Near-linear CDF.
    Uniform,
    /// `floor(exp(N(0, 2)) · 10^9)`.
    Lognormal,
    /// Dense runs with exponential gaps, separated by very large jumps.
    Clustered,
    /// Linear segments of different slopes plus about 1% far-off outliers.
    PiecewiseOutlier,
}

impl Distribution {
    pub const ALL: [Distribution; 4] = [
        Self::Uniform,
        Self::Lognormal,
        Self::Clustered,
        Self::PiecewiseOutlier,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Uniform => "uniform",
            Self::Lognormal => "lognormal",
            Self::Clustered => "clustered",
            Self::PiecewiseOutlier => "piecewise-outlier",
        }
    }
}

impl std::str::FromStr for Distribution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown distribution {s:?}")))
    }
}

impl std::fmt::Display for Distribution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetSource {
    File(PathBuf),
    Synthetic(Distribution),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub source: DatasetSource,
    pub n: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn synthetic(dist: Distribution, n: usize, seed: u64) -> Self {
        Self {
            source: DatasetSource::Synthetic(dist),
            n,
            seed,
        }
    }

    /// Generates or loads the keys. For files `n` is ignored.
    pub fn materialize(&self) -> Result<SortedKeySet> {
        match &self.source {
            DatasetSource::File(p) => load_dataset(p),
            DatasetSource::Synthetic(_) => gen_synthetic(self),
        }
    }
}

pub fn gen_synthetic(spec: &DatasetSpec) -> Result<SortedKeySet> {
    let DatasetSource::Synthetic(dist) = spec.source else {
        return Err(Error::InvalidInput("not a synthetic dataset spec".into()));
    };
    if spec.n < 2 {
        return Err(Error::InvalidInput(format!(
            "synthetic datasets need n ≥ 2, got {}",
            spec.n
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let keys = match dist {
        Distribution::Uniform => uniform(spec.n, &mut rng),
        Distribution::Lognormal => lognormal(spec.n, &mut rng),
        Distribution::Clustered => clustered(spec.n, &mut rng),
        Distribution::PiecewiseOutlier => piecewise_outlier(spec.n, &mut rng),
    };
    debug_assert_eq!(keys.len(), spec.n);
    SortedKeySet::new(keys)
}

fn uniform(n: usize, rng: &mut ChaCha8Rng) -> Vec<u64> {
    let stride = u64::MAX / n as u64;
    let jitter = (stride / 2).max(1);
    (0..n as u64)
        .map(|i| i * stride + rng.random_range(0..jitter))
        .collect()
}

/// Draws from `sample` until `n` distinct values are collected.
fn distinct(n: usize, mut sample: impl FnMut() -> u64) -> Vec<u64> {
    let mut seen = HashSet::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let k = sample();
        if seen.insert(k) {
            out.push(k);
        }
    }
    out.sort_unstable();
    out
}

fn lognormal(n: usize, rng: &mut ChaCha8Rng) -> Vec<u64> {
    let d = LogNormal::<f64>::new(0.0, 2.0).unwrap();
    // `as` saturates, so extreme draws land on u64::MAX
    distinct(n, || (d.sample(rng) * 1e9).floor() as u64)
}

fn clustered(n: usize, rng: &mut ChaCha8Rng) -> Vec<u64> {
    let clusters = (n / 4).clamp(1, 16);
    let gap = Exp::new(1.0 / 100.0).unwrap();
    let mut out = Vec::with_capacity(n);
    for c in 0..clusters {
        let size = n / clusters + usize::from(c < n % clusters);
        let mut k = ((c as u64) << 58) + rng.random_range(0..1u64 << 50);
        for _ in 0..size {
            k += 1 + gap.sample(rng) as u64;
            out.push(k);
        }
    }
    out
}

fn piecewise_outlier(n: usize, rng: &mut ChaCha8Rng) -> Vec<u64> {
    let outliers = n / 100;
    let regular = n - outliers;
    let segments = (regular / 1000).clamp(1, 8);
    let mut out = Vec::with_capacity(n);
    let mut k = 0u64;
    for s in 0..segments {
        let size = regular / segments + usize::from(s < regular % segments);
        let stride: u64 = rng.random_range(1..1000);
        for _ in 0..size {
            k += stride + rng.random_range(0..=stride / 4);
            out.push(k);
        }
        k += stride * 1000;
    }
    let top = k.saturating_mul(2);
    let mut seen: HashSet<u64> = out.iter().copied().collect();
    while out.len() < n {
        let o = rng.random_range(0..top);
        if seen.insert(o) {
            out.push(o);
        }
    }
    out.sort_unstable();
    out
}

/// Drops every `j`-th key (1-based positions `j, 2j, …`).
pub fn downsample(keys: &[u64], j: usize) -> Vec<u64> {
    if j == 0 {
        return keys.to_vec();
    }
    keys.iter()
        .enumerate()
        .filter(|(i, _)| (i + 1) % j != 0)
        .map(|(_, &k)| k)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QueryKind {
    Random,
    /// `P(rank r) ∝ r^(−s)` over the sorted keys, rank 1 being the smallest key.
    Zipfian {
        s: f64,
    },
    /// Exactly the given keys, e.g. the keys an optimization promoted.
    Promoted(Vec<u64>),
}

impl QueryKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Random => "random",
            Self::Zipfian { .. } => "zipfian",
            Self::Promoted(_) => "promoted",
        }
    }
}

pub const DEFAULT_REPETITIONS: usize = 100;
pub const DEFAULT_ZIPF_S: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryWorkload {
    pub kind: String,
    pub queries: Vec<u64>,
    pub repetitions: usize,
}

/// Samples `count` resident keys with replacement. `Promoted` ignores `count`.
pub fn sample_queries(
    keys: &[u64],
    count: usize,
    kind: &QueryKind,
    seed: u64,
) -> Result<QueryWorkload> {
    if keys.is_empty() {
        return Err(Error::InvalidInput(
            "cannot sample queries from no keys".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let queries = match kind {
        QueryKind::Random => (0..count)
            .map(|_| keys[rng.random_range(0..keys.len())])
            .collect(),
        QueryKind::Zipfian { s } => {
            let z = Zipf::new(keys.len() as f64, *s)
                .map_err(|e| Error::InvalidInput(format!("zipf exponent {s}: {e}")))?;
            (0..count)
                .map(|_| keys[z.sample(&mut rng) as usize - 1])
                .collect()
        }
        QueryKind::Promoted(list) => list.clone(),
    };
    Ok(QueryWorkload {
        kind: kind.name().to_string(),
        queries,
        repetitions: DEFAULT_REPETITIONS,
    })
}

/// Splits into a random build half and five insert batches of `floor(n/10)` keys; the
/// last batch takes whatever is left. Batches are in random order; the build half is
/// sorted.
pub fn split_read_write(keys: &[u64], seed: u64) -> Result<(Vec<u64>, Vec<Vec<u64>>)> {
    let n = keys.len();
    if n < 20 {
        return Err(Error::InvalidInput(format!(
            "read-write split needs at least 20 keys, got {n}"
        )));
    }
    let mut shuffled = keys.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let rest = shuffled.split_off(n / 2);
    let mut build = shuffled;
    build.sort_unstable();
    let batch = n / 10;
    let mut batches: Vec<Vec<u64>> = rest.chunks(batch).map(<[u64]>::to_vec).collect();
    while batches.len() > 5 {
        let tail = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(tail);
    }
    Ok((build, batches))
}
