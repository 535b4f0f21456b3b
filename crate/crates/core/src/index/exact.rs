use serde::{Deserialize, Serialize};

use super::{
    merge_points, min_max_model, predict_slot, sse_of, IndexStats, InsertOutcome, KeyLocation,
    LookupTrace,
};
use crate::error::{Error, Result};
use crate::model::{fit_points, LinearModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Slot {
    /// `virtual_gap` marks a slot reserved by a virtual key at build time.
    Empty {
        virtual_gap: bool,
    },
    Key {
        key: u64,
        payload: u64,
    },
    Child(Box<ExactNode>),
}

/// Exact-placement node: a key lives in slot `clamp(round(model(key)), 0, slots − 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactNode {
    pub(crate) model: LinearModel,
    pub(crate) slots: Vec<Slot>,
    pub(crate) level: u32,
    pub(crate) fit_sse: f64,
    pub(crate) virtual_keys: usize,
    pub(crate) smoothing_budget: usize,
}

/// Builds a node with no virtual keys anywhere in its subtree.
pub(crate) fn build_plain(keys: &[u64], payloads: &[u64], level: u32, spk: f64) -> ExactNode {
    build_with(keys, payloads, &[], level, spk, &mut |k, p, l| {
        build_plain(k, p, l, spk)
    })
}

/// Builds one node over `keys ∪ virtuals`; each group of colliding real keys is handed
/// to `child` one level down.
pub(crate) fn build_with<F>(
    keys: &[u64],
    payloads: &[u64],
    virtuals: &[u64],
    level: u32,
    spk: f64,
    child: &mut F,
) -> ExactNode
where
    F: FnMut(&[u64], &[u64], u32) -> ExactNode,
{
    let n = keys.len();
    let slot_count = ((spk * n as f64).ceil() as usize + virtuals.len()).max(2);
    let (points, _) = merge_points(keys, virtuals);
    let scale = slot_count as f64 / points.len() as f64;

    let (rank_model, mut fit_sse) = fit_points(&points);
    let mut model = rank_model.scaled(scale);
    let mut pos: Vec<usize> = keys
        .iter()
        .map(|&k| predict_slot(&model, k, slot_count))
        .collect();
    // no progress (or a degenerate fit): spread min and max over the whole array
    if n >= 2 && (pos[0] == pos[n - 1] || !(model.slope >= 0.0)) {
        model = min_max_model(keys[0], keys[n - 1], slot_count);
        fit_sse = sse_of(&points, &model.scaled(1.0 / scale));
        for (p, &k) in pos.iter_mut().zip(keys) {
            *p = predict_slot(&model, k, slot_count);
        }
    }

    let mut slots: Vec<Slot> = (0..slot_count)
        .map(|_| Slot::Empty { virtual_gap: false })
        .collect();
    let mut i = 0;
    while i < n {
        let s = pos[i];
        let mut j = i + 1;
        while j < n && pos[j] == s {
            j += 1;
        }
        slots[s] = if j - i == 1 {
            Slot::Key {
                key: keys[i],
                payload: payloads[i],
            }
        } else {
            Slot::Child(Box::new(child(&keys[i..j], &payloads[i..j], level + 1)))
        };
        i = j;
    }
    for &v in virtuals {
        let s = predict_slot(&model, v, slot_count);
        if let Slot::Empty { virtual_gap } = &mut slots[s] {
            *virtual_gap = true;
        }
    }

    ExactNode {
        model,
        slots,
        level,
        fit_sse,
        virtual_keys: virtuals.len(),
        smoothing_budget: 0,
    }
}

impl ExactNode {
    pub fn model(&self) -> &LinearModel {
        &self.model
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn level(&self) -> u32 {
        self.level
    }

    /// Least-squares error of this node's model on the points it was built from.
    pub fn fit_sse(&self) -> f64 {
        self.fit_sse
    }

    /// Virtual keys this node was built with.
    pub fn virtual_keys(&self) -> usize {
        self.virtual_keys
    }

    pub fn has_children(&self) -> bool {
        self.slots.iter().any(|s| matches!(s, Slot::Child(_)))
    }

    fn children(&self) -> impl Iterator<Item = &ExactNode> {
        self.slots.iter().filter_map(|s| match s {
            Slot::Child(c) => Some(c.as_ref()),
            _ => None,
        })
    }

    /// Levels in this subtree, counting this node as 1.
    pub fn subtree_height(&self) -> u32 {
        1 + self
            .children()
            .map(|c| c.subtree_height())
            .max()
            .unwrap_or(0)
    }

    pub fn subtree_sse(&self) -> f64 {
        self.fit_sse + self.children().map(|c| c.subtree_sse()).sum::<f64>()
    }

    pub fn subtree_slots(&self) -> usize {
        self.slots.len() + self.children().map(|c| c.subtree_slots()).sum::<usize>()
    }

    pub fn subtree_nodes(&self) -> usize {
        1 + self.children().map(|c| c.subtree_nodes()).sum::<usize>()
    }

    pub fn subtree_virtual_slots(&self) -> usize {
        self.slots
            .iter()
            .map(|s| match s {
                Slot::Empty { virtual_gap: true } => 1,
                Slot::Child(c) => c.subtree_virtual_slots(),
                _ => 0,
            })
            .sum()
    }

    /// Sum of the smoothing budgets used to build nodes of this subtree.
    pub(crate) fn subtree_budget(&self) -> usize {
        self.smoothing_budget + self.children().map(|c| c.subtree_budget()).sum::<usize>()
    }

    pub fn lookup(&self, key: u64) -> LookupTrace {
        let mut node = self;
        loop {
            let s = predict_slot(&node.model, key, node.slots.len());
            match &node.slots[s] {
                Slot::Child(c) => node = c,
                Slot::Key { key: k, payload } if *k == key => {
                    return LookupTrace {
                        found: true,
                        depth: node.level,
                        search_steps: 0,
                        position_error: 0,
                        payload: Some(*payload),
                    }
                }
                _ => {
                    return LookupTrace {
                        found: false,
                        depth: node.level,
                        search_steps: 0,
                        position_error: 0,
                        payload: None,
                    }
                }
            }
        }
    }

    pub(crate) fn insert(&mut self, key: u64, payload: u64, spk: f64) -> Result<InsertOutcome> {
        let s = predict_slot(&self.model, key, self.slots.len());
        match &mut self.slots[s] {
            Slot::Child(c) => c.insert(key, payload, spk),
            Slot::Empty { virtual_gap } => {
                let gap_consumed = *virtual_gap;
                self.slots[s] = Slot::Key { key, payload };
                Ok(InsertOutcome {
                    gap_consumed,
                    structural_change: false,
                    depth: self.level,
                })
            }
            Slot::Key { key: k, payload: p } => {
                if *k == key {
                    return Err(Error::DuplicateKey(key));
                }
                let (keys, payloads) = if *k < key {
                    ([*k, key], [*p, payload])
                } else {
                    ([key, *k], [payload, *p])
                };
                let child = build_plain(&keys, &payloads, self.level + 1, spk);
                self.slots[s] = Slot::Child(Box::new(child));
                Ok(InsertOutcome {
                    gap_consumed: false,
                    structural_change: true,
                    depth: self.level + 1,
                })
            }
        }
    }

    pub(crate) fn collect_stats(&self, s: &mut IndexStats) {
        s.record_node(self.level, self.slots.len(), self.fit_sse);
        let mut here = 0;
        for slot in &self.slots {
            match slot {
                Slot::Key { .. } => here += 1,
                Slot::Empty { virtual_gap: true } => s.virtual_slots += 1,
                Slot::Child(c) => c.collect_stats(s),
                Slot::Empty { .. } => {}
            }
        }
        s.record_keys(self.level, here);
    }

    pub(crate) fn collect_locations(&self, out: &mut Vec<KeyLocation>) {
        for slot in &self.slots {
            match slot {
                Slot::Key { key, payload } => out.push(KeyLocation {
                    key: *key,
                    level: self.level,
                    payload: *payload,
                }),
                Slot::Child(c) => c.collect_locations(out),
                Slot::Empty { .. } => {}
            }
        }
    }

    /// Keys and payloads of the subtree in ascending order.
    pub fn collect_keys(&self) -> (Vec<u64>, Vec<u64>) {
        let mut locs = Vec::new();
        self.collect_locations(&mut locs);
        locs.into_iter().map(|l| (l.key, l.payload)).unzip()
    }

    /// Deepest level holding a node with at least one child; `None` for a leaf.
    pub(crate) fn deepest_parent_level(&self) -> Option<u32> {
        if !self.has_children() {
            return None;
        }
        Some(
            self.children()
                .filter_map(|c| c.deepest_parent_level())
                .max()
                .unwrap_or(self.level),
        )
    }

    pub(crate) fn for_each_at_level_mut(&mut self, level: u32, f: &mut dyn FnMut(&mut ExactNode)) {
        if self.level == level {
            f(self);
            return;
        }
        for slot in &mut self.slots {
            if let Slot::Child(c) = slot {
                c.for_each_at_level_mut(level, f);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn build(keys: &[u64]) -> ExactNode {
        build_plain(keys, keys, 1, 2.0)
    }

    fn placement_holds(node: &ExactNode) -> bool {
        node.slots.iter().enumerate().all(|(i, s)| match s {
            Slot::Key { key, .. } => predict_slot(&node.model, *key, node.slots.len()) == i,
            Slot::Child(c) => {
                let (keys, _) = c.collect_keys();
                c.level == node.level + 1
                    && keys
                        .iter()
                        .all(|&k| predict_slot(&node.model, k, node.slots.len()) == i)
                    && placement_holds(c)
            }
            Slot::Empty { .. } => true,
        })
    }

    #[test]
    fn linear_keys_fit_in_one_node() {
        let keys: Vec<u64> = (0..1000).collect();
        let n = build(&keys);
        assert_eq!(n.subtree_height(), 1);
        assert_eq!(n.slots.len(), 2000);
        assert!(n.fit_sse < 1e-12);
        for &k in &keys {
            let t = n.lookup(k);
            assert!(t.found && t.depth == 1 && t.search_steps == 0);
            assert_eq!(t.payload, Some(k));
        }
        assert!(!n.lookup(5000).found);
    }

    #[test]
    fn two_dense_runs_need_children() {
        let mut keys: Vec<u64> = (0..100).collect();
        keys.extend((0..100).map(|i| 1_000_000_000 + i));
        let n = build(&keys);
        assert!(n.subtree_height() >= 2);
        assert!(placement_holds(&n));
        assert!(keys.iter().all(|&k| n.lookup(k).found));
        assert_eq!(n.collect_keys().0, keys);
    }

    #[test]
    fn collision_insert_adds_one_level() {
        let keys: Vec<u64> = (0..10).map(|i| i * 10).collect();
        let mut n = build(&keys);
        let s = predict_slot(&n.model, 40, n.slots.len());
        // smallest key not in the set that lands on 40's slot
        let k = (31..50)
            .find(|&k| k != 40 && predict_slot(&n.model, k, n.slots.len()) == s)
            .unwrap();
        let before = n.lookup(40).depth;
        let out = n.insert(k, 0, 2.0).unwrap();
        assert!(out.structural_change && !out.gap_consumed);
        assert_eq!(out.depth, before + 1);
        assert_eq!(n.lookup(40).depth, before + 1);
        assert_eq!(n.lookup(k).payload, Some(0));
        assert!(matches!(n.insert(k, 0, 2.0), Err(Error::DuplicateKey(_))));
    }

    #[test]
    fn virtual_keys_reserve_empty_slots() {
        let keys = [0u64, 1, 2, 3, 10, 11];
        let n = build_with(&keys, &keys, &[5, 7], 1, 2.0, &mut |k, p, l| {
            build_plain(k, p, l, 2.0)
        });
        assert_eq!(n.slots.len(), 14);
        assert_eq!(n.virtual_keys(), 2);
        assert!(n.subtree_virtual_slots() >= 1);
        assert!(keys.iter().all(|&k| n.lookup(k).found));
        assert!(!n.lookup(5).found && !n.lookup(7).found);
        let mut n = n;
        let s = n
            .slots
            .iter()
            .position(|s| matches!(s, Slot::Empty { virtual_gap: true }))
            .unwrap();
        let k = (4..10)
            .find(|&k| predict_slot(&n.model, k, n.slots.len()) == s)
            .unwrap();
        let out = n.insert(k, k, 2.0).unwrap();
        assert!(out.gap_consumed && !out.structural_change);
    }

    #[test]
    fn stats_partition_keys() {
        let mut keys: Vec<u64> = (0..50).map(|i| i * i * i).collect();
        keys.extend(10_000_000..10_000_050);
        let n = build(&keys);
        let mut s = IndexStats::default();
        n.collect_stats(&mut s);
        assert_eq!(s.keys_per_level.iter().sum::<usize>(), keys.len());
        assert_eq!(s.key_count, keys.len());
        assert_eq!(s.height, n.subtree_height());
        assert_eq!(s.node_count, n.subtree_nodes());
        assert_eq!(s.total_slots, n.subtree_slots());
        assert!((s.total_sse - n.subtree_sse()).abs() < 1e-9 * s.total_sse.max(1.0));
    }
}
