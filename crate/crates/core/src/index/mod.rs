//! Reference hierarchical learned index with two node policies.
//!
//! - [`IndexMode::Exact`]: every key sits in the slot its node model predicts; keys that
//!   collide move into a child node. Lookups never search inside a node.
//! - [`IndexMode::Gapped`]: inner nodes route by model, leaves are gapped arrays searched
//!   exponentially from the predicted slot.
//!
//! Virtual keys passed to a build reserve the slots they would occupy; those slots stay
//! empty and are flagged so inserts that land there can be counted.

pub(crate) mod exact;
pub(crate) mod gapped;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LinearModel, SortedKeySet};

pub use exact::{ExactNode, Slot};
pub use gapped::{GappedLeaf, GappedNode, InnerNode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IndexMode {
    Exact,
    Gapped,
}

impl IndexMode {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Exact => "exact",
            Self::Gapped => "gapped",
        }
    }
}

impl std::fmt::Display for IndexMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for IndexMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Self::Exact),
            "gapped" => Ok(Self::Gapped),
            other => Err(Error::InvalidInput(format!("unknown index mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndexConfig {
    pub mode: IndexMode,
    /// Slots allocated per key when a node is built.
    pub slots_per_key: f64,
    /// Gapped mode: largest key count bulk-loaded into one leaf.
    pub max_leaf_size: usize,
    pub seed: u64,
}

impl IndexConfig {
    pub fn new(mode: IndexMode) -> Self {
        Self {
            mode,
            slots_per_key: 2.0,
            max_leaf_size: 256,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.slots_per_key >= 1.0) || !self.slots_per_key.is_finite() {
            return Err(Error::InvalidInput(format!(
                "slots_per_key must be ≥ 1, got {}",
                self.slots_per_key
            )));
        }
        if self.max_leaf_size < 16 {
            return Err(Error::InvalidInput(format!(
                "max_leaf_size must be ≥ 16, got {}",
                self.max_leaf_size
            )));
        }
        Ok(())
    }
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self::new(IndexMode::Exact)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LookupTrace {
    pub found: bool,
    /// Level of the node the lookup ended in (root = 1).
    pub depth: u32,
    /// Key comparisons made inside the leaf; always 0 in exact mode.
    pub search_steps: u32,
    /// `|predicted slot − final slot|` inside the leaf; always 0 in exact mode.
    pub position_error: u64,
    pub payload: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InsertOutcome {
    /// The key took a slot reserved by a virtual key.
    pub gap_consumed: bool,
    /// A child was created or a leaf was expanded or split.
    pub structural_change: bool,
    /// Level the key ended up at.
    pub depth: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IndexStats {
    pub key_count: usize,
    pub height: u32,
    pub node_count: usize,
    pub total_slots: usize,
    /// Empty slots still reserved by virtual keys.
    pub virtual_slots: usize,
    /// Entry `i` is the number of keys stored at level `i + 1`.
    pub keys_per_level: Vec<usize>,
    pub nodes_per_level: Vec<usize>,
    /// Sum over nodes of the least-squares error of each node model on the points it
    /// was built from.
    pub total_sse: f64,
}

impl IndexStats {
    pub fn mean_key_depth(&self) -> f64 {
        if self.key_count == 0 {
            return 0.0;
        }
        let total: usize = self
            .keys_per_level
            .iter()
            .enumerate()
            .map(|(i, c)| (i + 1) * c)
            .sum();
        total as f64 / self.key_count as f64
    }

    /// Keys stored at `level` or deeper.
    pub fn keys_at_or_below(&self, level: u32) -> usize {
        self.keys_per_level
            .iter()
            .skip(level.saturating_sub(1) as usize)
            .sum()
    }

    pub(crate) fn record_node(&mut self, level: u32, slots: usize, sse: f64) {
        let l = level as usize;
        if self.nodes_per_level.len() < l {
            self.nodes_per_level.resize(l, 0);
        }
        self.nodes_per_level[l - 1] += 1;
        self.node_count += 1;
        self.total_slots += slots;
        self.total_sse += sse;
        self.height = self.height.max(level);
    }

    pub(crate) fn record_keys(&mut self, level: u32, count: usize) {
        if count == 0 {
            return;
        }
        let l = level as usize;
        if self.keys_per_level.len() < l {
            self.keys_per_level.resize(l, 0);
        }
        self.keys_per_level[l - 1] += count;
        self.key_count += count;
    }
}

/// `(key, level, payload)` in key order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyLocation {
    pub key: u64,
    pub level: u32,
    pub payload: u64,
}

/// Round-half-up of `model(key)` clamped into `0..slots`.
#[inline]
pub(crate) fn predict_slot(model: &LinearModel, key: u64, slots: usize) -> usize {
    let x = model.predict(key);
    // also catches NaN
    if !(x > 0.0) {
        return 0;
    }
    let r = (x + 0.5).floor();
    if r >= (slots - 1) as f64 {
        slots - 1
    } else {
        r as usize
    }
}

/// Model sending `lo` to 0 and `hi` to `slots − 1`.
pub(crate) fn min_max_model(lo: u64, hi: u64, slots: usize) -> LinearModel {
    if hi == lo {
        return LinearModel::default();
    }
    LinearModel::with_origin((slots - 1) as f64 / (hi - lo) as f64, 0.0, lo)
}

/// Merges two disjoint ascending key lists; the flag marks entries from `virtuals`.
pub(crate) fn merge_points(keys: &[u64], virtuals: &[u64]) -> (Vec<u64>, Vec<bool>) {
    let mut merged = Vec::with_capacity(keys.len() + virtuals.len());
    let mut is_virtual = Vec::with_capacity(keys.len() + virtuals.len());
    let (mut i, mut j) = (0, 0);
    while i < keys.len() || j < virtuals.len() {
        if j == virtuals.len() || (i < keys.len() && keys[i] < virtuals[j]) {
            merged.push(keys[i]);
            is_virtual.push(false);
            i += 1;
        } else {
            merged.push(virtuals[j]);
            is_virtual.push(true);
            j += 1;
        }
    }
    (merged, is_virtual)
}

pub(crate) fn sse_of(points: &[u64], rank_model: &LinearModel) -> f64 {
    points
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            let r = rank_model.predict(k) - i as f64;
            r * r
        })
        .sum()
}

#[derive(Debug, Clone)]
pub(crate) enum Root {
    Empty,
    Exact(Box<ExactNode>),
    Gapped(Box<GappedNode>),
}

#[derive(Debug, Clone)]
pub struct Index {
    cfg: IndexConfig,
    pub(crate) root: Root,
    len: usize,
}

impl Index {
    /// Builds over `keys` with each key as its own payload.
    pub fn bulk_build(keys: &SortedKeySet, cfg: IndexConfig) -> Result<Self> {
        Self::bulk_build_with_payloads(keys, keys.as_slice(), cfg)
    }

    pub fn bulk_build_with_payloads(
        keys: &SortedKeySet,
        payloads: &[u64],
        cfg: IndexConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if payloads.len() != keys.len() {
            return Err(Error::InvalidInput(format!(
                "{} payloads for {} keys",
                payloads.len(),
                keys.len()
            )));
        }
        let keys = keys.as_slice();
        let root = if keys.is_empty() {
            Root::Empty
        } else {
            match cfg.mode {
                IndexMode::Exact => Root::Exact(Box::new(exact::build_plain(
                    keys,
                    payloads,
                    1,
                    cfg.slots_per_key,
                ))),
                IndexMode::Gapped => {
                    Root::Gapped(Box::new(gapped::build_node(keys, payloads, 1, &cfg)))
                }
            }
        };
        Ok(Self {
            cfg,
            root,
            len: keys.len(),
        })
    }

    pub fn config(&self) -> &IndexConfig {
        &self.cfg
    }

    pub fn mode(&self) -> IndexMode {
        self.cfg.mode
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn lookup(&self, key: u64) -> LookupTrace {
        match &self.root {
            Root::Empty => LookupTrace {
                found: false,
                depth: 1,
                search_steps: 0,
                position_error: 0,
                payload: None,
            },
            Root::Exact(n) => n.lookup(key),
            Root::Gapped(n) => n.lookup(key),
        }
    }

    pub fn contains(&self, key: u64) -> bool {
        self.lookup(key).found
    }

    /// Inserts `key` with itself as payload.
    pub fn insert(&mut self, key: u64) -> Result<InsertOutcome> {
        self.insert_with_payload(key, key)
    }

    pub fn insert_with_payload(&mut self, key: u64, payload: u64) -> Result<InsertOutcome> {
        let out = match &mut self.root {
            Root::Empty => {
                let set = SortedKeySet::new(vec![key])?;
                *self = Self::bulk_build_with_payloads(&set, &[payload], self.cfg)?;
                return Ok(InsertOutcome {
                    gap_consumed: false,
                    structural_change: true,
                    depth: 1,
                });
            }
            Root::Exact(n) => n.insert(key, payload, self.cfg.slots_per_key)?,
            Root::Gapped(n) => n.insert(key, payload, &self.cfg)?,
        };
        self.len += 1;
        Ok(out)
    }

    pub fn stats(&self) -> IndexStats {
        let mut s = IndexStats::default();
        match &self.root {
            Root::Empty => {}
            Root::Exact(n) => n.collect_stats(&mut s),
            Root::Gapped(n) => n.collect_stats(&mut s),
        }
        s
    }

    /// Every key with its level, in ascending key order.
    pub fn key_locations(&self) -> Vec<KeyLocation> {
        let mut out = Vec::with_capacity(self.len);
        match &self.root {
            Root::Empty => {}
            Root::Exact(n) => n.collect_locations(&mut out),
            Root::Gapped(n) => n.collect_locations(&mut out),
        }
        out
    }

    pub fn keys(&self) -> Vec<u64> {
        self.key_locations().into_iter().map(|l| l.key).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slot_rounding_is_half_up_and_clamped() {
        let m = LinearModel::new(0.5, 0.0);
        assert_eq!(predict_slot(&m, 1, 10), 1);
        assert_eq!(predict_slot(&m, 3, 10), 2);
        assert_eq!(predict_slot(&m, 100, 10), 9);
        let neg = LinearModel::new(1.0, -50.0);
        assert_eq!(predict_slot(&neg, 3, 10), 0);
        let nan = LinearModel::new(f64::NAN, 0.0);
        assert_eq!(predict_slot(&nan, 3, 10), 0);
    }

    #[test]
    fn min_max_model_hits_both_ends() {
        let m = min_max_model(1_000, 1_000_000_007, 37);
        assert_eq!(predict_slot(&m, 1_000, 37), 0);
        assert_eq!(predict_slot(&m, 1_000_000_007, 37), 36);
    }

    #[test]
    fn merge_points_interleaves() {
        let (m, v) = merge_points(&[1, 5, 9], &[3, 10]);
        assert_eq!(m, vec![1, 3, 5, 9, 10]);
        assert_eq!(v, vec![false, true, false, false, true]);
    }

    #[test]
    fn config_validation() {
        let mut c = IndexConfig::default();
        assert!(c.validate().is_ok());
        c.slots_per_key = 0.5;
        assert!(c.validate().is_err());
        c.slots_per_key = 2.0;
        c.max_leaf_size = 8;
        assert!(c.validate().is_err());
    }

    #[test]
    fn empty_index() {
        let idx = Index::bulk_build(&SortedKeySet::default(), IndexConfig::default()).unwrap();
        assert!(idx.is_empty());
        let t = idx.lookup(5);
        assert!(!t.found);
        assert_eq!(t.depth, 1);
        assert_eq!(idx.stats().node_count, 0);
    }

    #[test]
    fn insert_into_empty_index() {
        for mode in [IndexMode::Exact, IndexMode::Gapped] {
            let mut idx =
                Index::bulk_build(&SortedKeySet::default(), IndexConfig::new(mode)).unwrap();
            idx.insert(42).unwrap();
            idx.insert(7).unwrap();
            assert!(idx.contains(42) && idx.contains(7));
            assert_eq!(idx.keys(), vec![7, 42]);
        }
    }
}
