use serde::{Deserialize, Serialize};

use super::{
    merge_points, min_max_model, predict_slot, sse_of, IndexConfig, IndexStats, InsertOutcome,
    KeyLocation, LookupTrace,
};
use crate::error::{Error, Result};
use crate::model::{fit_points, LinearModel};

const MAX_FANOUT: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum GappedNode {
    Inner(InnerNode),
    Leaf(GappedLeaf),
}

/// Routes a key to `children[clamp(round(model(key)))]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerNode {
    pub(crate) model: LinearModel,
    pub(crate) children: Vec<GappedNode>,
    pub(crate) level: u32,
    pub(crate) fit_sse: f64,
}

/// Gapped array. Every empty slot holds a copy of the next occupied key to its right
/// (`u64::MAX` past the last one) so the key array stays sorted for searching.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GappedLeaf {
    pub(crate) model: LinearModel,
    pub(crate) keys: Vec<u64>,
    pub(crate) payloads: Vec<u64>,
    pub(crate) occupied: Vec<bool>,
    pub(crate) virtual_gap: Vec<bool>,
    pub(crate) len: usize,
    pub(crate) level: u32,
    pub(crate) fit_sse: f64,
    /// Key count past which an insert splits the leaf instead of expanding it.
    pub(crate) split_limit: usize,
    pub(crate) virtual_keys: usize,
    pub(crate) smoothing_budget: usize,
}

pub(crate) fn build_node(
    keys: &[u64],
    payloads: &[u64],
    level: u32,
    cfg: &IndexConfig,
) -> GappedNode {
    if keys.len() <= cfg.max_leaf_size {
        GappedNode::Leaf(build_leaf(
            keys,
            payloads,
            &[],
            level,
            cfg.slots_per_key,
            cfg.max_leaf_size,
        ))
    } else {
        GappedNode::Inner(build_inner(keys, payloads, level, cfg))
    }
}

fn build_inner(keys: &[u64], payloads: &[u64], level: u32, cfg: &IndexConfig) -> InnerNode {
    let n = keys.len();
    let fanout = n.div_ceil(cfg.max_leaf_size / 2).clamp(2, MAX_FANOUT);
    let scale = fanout as f64 / n as f64;
    let (rank_model, mut fit_sse) = fit_points(keys);
    let mut model = rank_model.scaled(scale);
    let mut route: Vec<usize> = keys
        .iter()
        .map(|&k| predict_slot(&model, k, fanout))
        .collect();
    if route[0] == route[n - 1] || !(model.slope >= 0.0) {
        model = min_max_model(keys[0], keys[n - 1], fanout);
        fit_sse = sse_of(keys, &model.scaled(1.0 / scale));
        for (r, &k) in route.iter_mut().zip(keys) {
            *r = predict_slot(&model, k, fanout);
        }
    }
    let mut children = Vec::with_capacity(fanout);
    let mut start = 0;
    for c in 0..fanout {
        let end = start + route[start..].partition_point(|&r| r == c);
        children.push(build_node(
            &keys[start..end],
            &payloads[start..end],
            level + 1,
            cfg,
        ));
        start = end;
    }
    InnerNode {
        model,
        children,
        level,
        fit_sse,
    }
}

/// Places `keys ∪ virtuals` in model order, each at its predicted slot unless that is
/// taken or would leave too little room for the rest; virtual keys leave their slot empty.
pub(crate) fn build_leaf(
    keys: &[u64],
    payloads: &[u64],
    virtuals: &[u64],
    level: u32,
    spk: f64,
    split_limit: usize,
) -> GappedLeaf {
    let n = keys.len();
    let m = virtuals.len();
    let mut leaf = GappedLeaf {
        model: LinearModel::default(),
        keys: Vec::new(),
        payloads: Vec::new(),
        occupied: Vec::new(),
        virtual_gap: Vec::new(),
        len: n,
        level,
        fit_sse: 0.0,
        split_limit,
        virtual_keys: m,
        smoothing_budget: 0,
    };
    if n + m == 0 {
        return leaf;
    }
    let cap = ((spk * n as f64).ceil() as usize + m).max(n + m);
    let (points, is_virtual) = merge_points(keys, virtuals);
    let (rank_model, fit_sse) = fit_points(&points);
    let model = rank_model.scaled(cap as f64 / points.len() as f64);
    leaf.model = model;
    leaf.fit_sse = fit_sse;
    leaf.keys = vec![0; cap];
    leaf.payloads = vec![0; cap];
    leaf.occupied = vec![false; cap];
    leaf.virtual_gap = vec![false; cap];

    let mut next_free = 0;
    let mut ki = 0;
    for (i, (&k, &v)) in points.iter().zip(&is_virtual).enumerate() {
        let p = predict_slot(&model, k, cap)
            .max(next_free)
            .min(cap - (points.len() - i));
        if v {
            leaf.virtual_gap[p] = true;
        } else {
            leaf.occupied[p] = true;
            leaf.keys[p] = k;
            leaf.payloads[p] = payloads[ki];
            ki += 1;
        }
        next_free = p + 1;
    }
    leaf.refill(0, cap);
    leaf
}

struct Probe {
    predicted: usize,
    /// First slot whose key is greater than the probe key.
    upper: usize,
    steps: u32,
}

impl GappedLeaf {
    pub fn model(&self) -> &LinearModel {
        &self.model
    }

    pub fn capacity(&self) -> usize {
        self.keys.len()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    pub fn fit_sse(&self) -> f64 {
        self.fit_sse
    }

    pub fn virtual_keys(&self) -> usize {
        self.virtual_keys
    }

    pub fn virtual_slots(&self) -> usize {
        self.virtual_gap.iter().filter(|&&v| v).count()
    }

    /// Rewrites the fill keys of empty slots in `lo..hi` from the right.
    fn refill(&mut self, lo: usize, hi: usize) {
        let mut next = self.keys_after(hi);
        for i in (lo..hi).rev() {
            if self.occupied[i] {
                next = self.keys[i];
            } else {
                self.keys[i] = next;
            }
        }
    }

    fn keys_after(&self, i: usize) -> u64 {
        if i < self.keys.len() {
            self.keys[i]
        } else {
            u64::MAX
        }
    }

    /// Exponential search for the upper bound of `key`, starting at the predicted slot.
    fn probe(&self, key: u64) -> Probe {
        let cap = self.keys.len();
        let p = predict_slot(&self.model, key, cap);
        let mut steps = 1;
        if self.keys[p] == key && self.occupied[p] {
            return Probe {
                predicted: p,
                upper: p + 1,
                steps,
            };
        }
        let (mut lo, mut hi);
        if self.keys[p] <= key {
            lo = p + 1;
            hi = cap;
            let mut bound = 1;
            while p + bound < cap {
                steps += 1;
                if self.keys[p + bound] > key {
                    hi = p + bound;
                    break;
                }
                lo = p + bound + 1;
                bound *= 2;
            }
        } else {
            lo = 0;
            hi = p;
            let mut bound = 1;
            while bound <= p {
                steps += 1;
                if self.keys[p - bound] <= key {
                    lo = p - bound + 1;
                    break;
                }
                hi = p - bound;
                bound *= 2;
            }
        }
        while lo < hi {
            let mid = lo + (hi - lo) / 2;
            steps += 1;
            if self.keys[mid] > key {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        Probe {
            predicted: p,
            upper: lo,
            steps,
        }
    }

    /// Slot holding `key`, if present, with the probe that found it.
    fn find(&self, key: u64) -> (Option<usize>, Probe) {
        if self.keys.is_empty() {
            let probe = Probe {
                predicted: 0,
                upper: 0,
                steps: 0,
            };
            return (None, probe);
        }
        let probe = self.probe(key);
        let mut t = probe.upper;
        // trailing empty slots carry u64::MAX as fill
        while t > 0 && !self.occupied[t - 1] && self.keys[t - 1] == key {
            t -= 1;
        }
        let hit = (t > 0 && self.occupied[t - 1] && self.keys[t - 1] == key).then(|| t - 1);
        (hit, probe)
    }

    pub fn lookup(&self, key: u64) -> LookupTrace {
        let (hit, probe) = self.find(key);
        let at = hit.unwrap_or(probe.upper);
        LookupTrace {
            found: hit.is_some(),
            depth: self.level,
            search_steps: probe.steps,
            position_error: probe.predicted.abs_diff(at) as u64,
            payload: hit.map(|i| self.payloads[i]),
        }
    }

    /// Slot position of every key, in key order.
    pub fn positions(&self) -> impl Iterator<Item = (u64, usize)> + '_ {
        (0..self.keys.len())
            .filter(|&i| self.occupied[i])
            .map(|i| (self.keys[i], i))
    }

    /// Inserts without restructuring; `Ok(None)` means the leaf is full.
    fn try_insert(&mut self, key: u64, payload: u64) -> Result<Option<bool>> {
        let (hit, probe) = self.find(key);
        if hit.is_some() {
            return Err(Error::DuplicateKey(key));
        }
        if self.len == self.keys.len() {
            return Ok(None);
        }
        let cap = self.keys.len();
        let ub = probe.upper;
        let gap_consumed;
        if ub < cap && !self.occupied[ub] {
            // free run ub..b between the neighbours
            let mut b = ub;
            while b < cap && !self.occupied[b] {
                b += 1;
            }
            let at = probe.predicted.clamp(ub, b - 1);
            gap_consumed = self.virtual_gap[at];
            self.place(at, key, payload);
            for i in ub..at {
                self.keys[i] = key;
            }
        } else {
            let right = (ub..cap).find(|&i| !self.occupied[i]);
            let left = (0..ub).rev().find(|&i| !self.occupied[i]);
            let go_right = match (left, right) {
                (Some(l), Some(r)) => r - ub <= ub - 1 - l,
                (None, Some(_)) => true,
                (Some(_), None) => false,
                (None, None) => unreachable!("leaf has a free slot"),
            };
            if go_right {
                let g = right.unwrap();
                gap_consumed = self.virtual_gap[g];
                for i in (ub..g).rev() {
                    self.move_slot(i, i + 1);
                }
                self.place(ub, key, payload);
            } else {
                let g = left.unwrap();
                gap_consumed = self.virtual_gap[g];
                for i in g + 1..ub {
                    self.move_slot(i, i - 1);
                }
                self.place(ub - 1, key, payload);
            }
        }
        self.len += 1;
        Ok(Some(gap_consumed))
    }

    fn place(&mut self, at: usize, key: u64, payload: u64) {
        self.keys[at] = key;
        self.payloads[at] = payload;
        self.occupied[at] = true;
        self.virtual_gap[at] = false;
    }

    fn move_slot(&mut self, from: usize, to: usize) {
        self.keys[to] = self.keys[from];
        self.payloads[to] = self.payloads[from];
        self.occupied[to] = true;
        self.virtual_gap[to] = false;
    }

    fn collect_into(&self, keys: &mut Vec<u64>, payloads: &mut Vec<u64>) {
        for (k, i) in self.positions() {
            keys.push(k);
            payloads.push(self.payloads[i]);
        }
    }
}

impl GappedNode {
    pub fn level(&self) -> u32 {
        match self {
            Self::Inner(n) => n.level,
            Self::Leaf(l) => l.level,
        }
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self, Self::Leaf(_))
    }

    pub fn lookup(&self, key: u64) -> LookupTrace {
        let mut node = self;
        loop {
            match node {
                Self::Inner(inner) => {
                    node = &inner.children[predict_slot(&inner.model, key, inner.children.len())]
                }
                Self::Leaf(leaf) => return leaf.lookup(key),
            }
        }
    }

    pub(crate) fn insert(
        &mut self,
        key: u64,
        payload: u64,
        cfg: &IndexConfig,
    ) -> Result<InsertOutcome> {
        let mut node = self;
        while let Self::Inner(inner) = node {
            let c = predict_slot(&inner.model, key, inner.children.len());
            node = &mut inner.children[c];
        }
        let Self::Leaf(leaf) = node else {
            unreachable!()
        };
        if let Some(gap_consumed) = leaf.try_insert(key, payload)? {
            return Ok(InsertOutcome {
                gap_consumed,
                structural_change: false,
                depth: leaf.level,
            });
        }
        // full: expand, or split once past the limit
        let (mut keys, mut payloads) = (
            Vec::with_capacity(leaf.len + 1),
            Vec::with_capacity(leaf.len + 1),
        );
        leaf.collect_into(&mut keys, &mut payloads);
        let at = keys.partition_point(|&k| k < key);
        keys.insert(at, key);
        payloads.insert(at, payload);
        let level = leaf.level;
        if keys.len() > leaf.split_limit {
            *node = build_node(&keys, &payloads, level, cfg);
        } else {
            let limit = leaf.split_limit;
            *leaf = build_leaf(&keys, &payloads, &[], level, cfg.slots_per_key, limit);
        }
        Ok(InsertOutcome {
            gap_consumed: false,
            structural_change: true,
            depth: node.lookup(key).depth,
        })
    }

    pub(crate) fn collect_stats(&self, s: &mut IndexStats) {
        match self {
            Self::Inner(n) => {
                s.record_node(n.level, n.children.len(), n.fit_sse);
                for c in &n.children {
                    c.collect_stats(s);
                }
            }
            Self::Leaf(l) => {
                s.record_node(l.level, l.capacity(), l.fit_sse);
                s.record_keys(l.level, l.len);
                s.virtual_slots += l.virtual_slots();
            }
        }
    }

    pub(crate) fn collect_locations(&self, out: &mut Vec<KeyLocation>) {
        match self {
            Self::Inner(n) => n.children.iter().for_each(|c| c.collect_locations(out)),
            Self::Leaf(l) => out.extend(l.positions().map(|(key, i)| KeyLocation {
                key,
                level: l.level,
                payload: l.payloads[i],
            })),
        }
    }

    pub fn collect_keys(&self) -> (Vec<u64>, Vec<u64>) {
        let (mut k, mut p) = (Vec::new(), Vec::new());
        self.collect_keys_into(&mut k, &mut p);
        (k, p)
    }

    fn collect_keys_into(&self, keys: &mut Vec<u64>, payloads: &mut Vec<u64>) {
        match self {
            Self::Inner(n) => n
                .children
                .iter()
                .for_each(|c| c.collect_keys_into(keys, payloads)),
            Self::Leaf(l) => l.collect_into(keys, payloads),
        }
    }

    pub fn subtree_height(&self) -> u32 {
        match self {
            Self::Inner(n) => {
                1 + n
                    .children
                    .iter()
                    .map(|c| c.subtree_height())
                    .max()
                    .unwrap_or(0)
            }
            Self::Leaf(_) => 1,
        }
    }

    pub fn subtree_sse(&self) -> f64 {
        match self {
            Self::Inner(n) => n.fit_sse + n.children.iter().map(|c| c.subtree_sse()).sum::<f64>(),
            Self::Leaf(l) => l.fit_sse,
        }
    }

    pub fn subtree_slots(&self) -> usize {
        match self {
            Self::Inner(n) => {
                n.children.len() + n.children.iter().map(|c| c.subtree_slots()).sum::<usize>()
            }
            Self::Leaf(l) => l.capacity(),
        }
    }

    pub fn subtree_nodes(&self) -> usize {
        match self {
            Self::Inner(n) => 1 + n.children.iter().map(|c| c.subtree_nodes()).sum::<usize>(),
            Self::Leaf(_) => 1,
        }
    }

    pub fn subtree_virtual_slots(&self) -> usize {
        match self {
            Self::Inner(n) => n.children.iter().map(|c| c.subtree_virtual_slots()).sum(),
            Self::Leaf(l) => l.virtual_slots(),
        }
    }

    pub(crate) fn deepest_inner_level(&self) -> Option<u32> {
        match self {
            Self::Inner(n) => Some(
                n.children
                    .iter()
                    .filter_map(|c| c.deepest_inner_level())
                    .max()
                    .unwrap_or(n.level),
            ),
            Self::Leaf(_) => None,
        }
    }

    pub(crate) fn for_each_inner_at_level_mut(
        &mut self,
        level: u32,
        f: &mut dyn FnMut(&mut GappedNode),
    ) {
        if let Self::Inner(n) = self {
            if n.level == level {
                f(self);
            } else if n.level < level {
                for c in &mut n.children {
                    c.for_each_inner_at_level_mut(level, f);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::IndexMode;

    fn cfg() -> IndexConfig {
        let mut c = IndexConfig::new(IndexMode::Gapped);
        c.max_leaf_size = 32;
        c
    }

    fn leaf(keys: &[u64]) -> GappedLeaf {
        build_leaf(keys, keys, &[], 1, 2.0, 32)
    }

    fn fill_is_consistent(l: &GappedLeaf) -> bool {
        let mut next = u64::MAX;
        for i in (0..l.capacity()).rev() {
            if l.occupied[i] {
                next = l.keys[i];
            } else if l.keys[i] != next {
                return false;
            }
        }
        l.keys.windows(2).all(|w| w[0] <= w[1])
            && l.occupied.iter().filter(|&&o| o).count() == l.len
    }

    #[test]
    fn build_keeps_order_and_fill() {
        let keys: Vec<u64> = (0..20).map(|i| i * i * 7 + 3).collect();
        let l = leaf(&keys);
        assert_eq!(l.capacity(), 40);
        assert!(fill_is_consistent(&l));
        assert_eq!(l.positions().map(|p| p.0).collect::<Vec<_>>(), keys);
        for &k in &keys {
            let t = l.lookup(k);
            assert!(t.found);
            assert_eq!(t.payload, Some(k));
        }
        assert!(!l.lookup(4).found);
        assert!(!l.lookup(0).found);
        assert!(!l.lookup(u64::MAX).found);
    }

    #[test]
    fn probe_count_is_logarithmic_in_error() {
        let keys: Vec<u64> = (0..200).map(|i| i * i * i).collect();
        let l = build_leaf(&keys, &keys, &[], 1, 1.5, 1000);
        for (k, pos) in l.positions() {
            let t = l.lookup(k);
            let pred = predict_slot(&l.model, k, l.capacity());
            let err = pred.abs_diff(pos) as f64;
            let bound = 1 + 2 * (1.0 + err).log2().ceil() as u32;
            assert!(t.search_steps <= bound, "{k}: {} > {bound}", t.search_steps);
            assert_eq!(t.position_error, err as u64);
        }
    }

    #[test]
    fn max_key_is_found() {
        let keys = [1u64, 5, u64::MAX];
        let l = leaf(&keys);
        assert!(l.lookup(u64::MAX).found);
        assert!(!l.lookup(u64::MAX - 1).found);
    }

    #[test]
    fn inserts_shift_and_expand() {
        let keys: Vec<u64> = (0..10).map(|i| i * 100).collect();
        let mut node = GappedNode::Leaf(leaf(&keys));
        let mut all = keys.clone();
        for k in (1..60).map(|i| i * 13 + 1) {
            if all.contains(&k) {
                continue;
            }
            node.insert(k, k, &cfg()).unwrap();
            all.push(k);
            all.sort_unstable();
            assert_eq!(node.collect_keys().0, all);
            if let GappedNode::Leaf(l) = &node {
                assert!(fill_is_consistent(l));
            }
            assert!(all.iter().all(|&x| node.lookup(x).found));
        }
        // 69 keys with a split limit of 32
        assert!(!node.is_leaf());
        assert!(matches!(
            node.insert(100, 0, &cfg()),
            Err(Error::DuplicateKey(100))
        ));
    }

    #[test]
    fn virtual_gap_is_consumed_by_insert() {
        let keys = [0u64, 1, 2, 3, 20, 21, 22];
        let mut l = build_leaf(&keys, &keys, &[10], 1, 1.0, 32);
        assert_eq!(l.capacity(), 8);
        assert_eq!(l.virtual_slots(), 1);
        assert!(fill_is_consistent(&l));
        assert!(!l.lookup(10).found);
        assert_eq!(l.try_insert(11, 11).unwrap(), Some(true));
        assert_eq!(l.virtual_slots(), 0);
        assert!(fill_is_consistent(&l));
        assert_eq!(l.try_insert(12, 12).unwrap(), None);
    }

    #[test]
    fn inner_nodes_route_every_key() {
        let keys: Vec<u64> = (0..5000u64).map(|i| 3 * i * i + i % 7).collect();
        let node = build_node(&keys, &keys, 1, &cfg());
        assert!(!node.is_leaf());
        assert_eq!(node.collect_keys().0, keys);
        for &k in &keys {
            let t = node.lookup(k);
            assert!(t.found && t.depth >= 2, "{k} {t:?}");
        }
        let mut s = IndexStats::default();
        node.collect_stats(&mut s);
        assert_eq!(s.key_count, keys.len());
        assert_eq!(s.total_slots, node.subtree_slots());
    }
}
