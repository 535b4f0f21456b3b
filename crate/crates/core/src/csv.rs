//! Bottom-up subtree merging over smoothed key sets.
//!
//! For every node with a subtree, level by level from the bottom, the subtree's keys are
//! collected and smoothed, and a replacement node is built over keys plus virtual keys.
//! Subtrees too small to get a virtual key (`floor(α · n) = 0`) are left alone. The
//! replacement is installed only if it passes the gate:
//!
//! - exact mode: strictly lower subtree height, strictly lower total fit error, and no
//!   key ends up deeper than before;
//! - gapped mode: the per-key change in expected query cost is below `threshold_c`.
//!
//! In exact mode colliding keys of the replacement still go to children. Those children
//! are built the same way (smoothed where that passes the gate), so a second pass with
//! the same parameters finds nothing left to merge.

use std::collections::HashMap;
use std::hint::black_box;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::index::exact::{build_with, ExactNode};
use crate::index::gapped::{build_leaf, GappedNode};
use crate::index::{Index, IndexConfig, IndexMode, LookupTrace, Root};
use crate::model::SortedKeySet;
use crate::smoothing::{smooth_slice, SmoothingConfig};

pub const DEFAULT_STOP_LEVEL: u32 = 2;
/// Gapped mode: subtrees with more keys than this many leaves' worth are not merged.
pub const GAPPED_MERGE_LIMIT_LEAVES: usize = 8;

/// Levels above the deepest parent level at which merging starts.
pub fn default_start_level_offset(mode: IndexMode) -> u32 {
    match mode {
        IndexMode::Exact => 1,
        IndexMode::Gapped => 0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModelParams {
    /// Nanoseconds per in-leaf probe.
    pub search_constant: f64,
    /// Nanoseconds per level traversed.
    pub traversal_constant: f64,
    /// A merge must change the expected per-key cost by less than this (negative).
    pub threshold_c: f64,
}

impl Default for CostModelParams {
    fn default() -> Self {
        Self {
            search_constant: 4.0,
            traversal_constant: 25.0,
            threshold_c: -1.0,
        }
    }
}

impl CostModelParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.search_constant > 0.0) || !(self.traversal_constant > 0.0) {
            return Err(Error::InvalidInput(format!(
                "cost constants must be positive, got search {} traversal {}",
                self.search_constant, self.traversal_constant
            )));
        }
        if !(self.threshold_c < 0.0) {
            return Err(Error::InvalidInput(format!(
                "threshold_c must be below 0, got {}",
                self.threshold_c
            )));
        }
        Ok(())
    }

    /// `search_constant · (1 + log2(1 + error)) + traversal_constant · level`.
    pub fn key_cost(&self, trace: &LookupTrace) -> f64 {
        self.search_constant * expected_searches(trace.position_error)
            + self.traversal_constant * trace.depth as f64
    }
}

pub fn expected_searches(position_error: u64) -> f64 {
    1.0 + (1.0 + position_error as f64).log2()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeDecision {
    pub level: u32,
    pub first_key: u64,
    pub key_count: usize,
    pub accepted: bool,
    /// Mean per-key change in expected query cost (ns).
    pub cost_delta: f64,
    pub sse_before: f64,
    pub sse_after: f64,
    pub height_before: u32,
    pub height_after: u32,
    /// Keys that would end up deeper than before.
    pub demoted: usize,
    /// Virtual keys found for this subtree.
    pub virtual_points: usize,
    /// `floor(α · key_count)`.
    pub smoothing_budget: usize,
    /// Smoothing budgets of every node in the replacement, this one included.
    pub subtree_budget: usize,
    pub slots_before: usize,
    pub slots_after: usize,
    pub virtual_slots_before: usize,
    pub virtual_slots_after: usize,
    pub nodes_before: usize,
    pub nodes_after: usize,
}

impl MergeDecision {
    /// Growth in slots not reserved by virtual keys, or 0.
    pub fn reallocation_slots(&self) -> usize {
        (self.slots_after - self.virtual_slots_after)
            .saturating_sub(self.slots_before - self.virtual_slots_before)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromotedKey {
    pub key: u64,
    pub old_level: u32,
    pub new_level: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizationReport {
    pub mode: IndexMode,
    pub start_level: u32,
    pub stop_level: u32,
    pub decisions: Vec<MergeDecision>,
    pub merges_accepted: usize,
    /// Gapped-mode subtrees too large to merge.
    pub skipped_oversized: usize,
    pub promoted: Vec<PromotedKey>,
    pub promoted_keys: usize,
    pub demoted_keys: usize,
    /// Keys at level 3 or deeper before optimizing.
    pub promotable_keys: usize,
    pub nodes_before: usize,
    pub nodes_after: usize,
    pub nodes_removed: i64,
    pub slots_before: usize,
    pub slots_after: usize,
    pub slots_added: i64,
    pub virtual_slots_added: i64,
    /// Sum of `subtree_budget` over accepted merges.
    pub budget_accepted: usize,
    /// Sum of `reallocation_slots` over accepted merges.
    pub reallocation_slots: usize,
    pub wall_time_ns: u128,
}

impl OptimizationReport {
    pub fn promoted_key_list(&self) -> Vec<u64> {
        self.promoted.iter().map(|p| p.key).collect()
    }

    /// Promoted keys as a percentage of promotable keys.
    pub fn promoted_percent(&self) -> f64 {
        percent(self.promoted_keys as f64, self.promotable_keys as f64)
    }

    pub fn storage_increase_percent(&self) -> f64 {
        percent(self.slots_added as f64, self.slots_before as f64)
    }

    pub fn node_reduction_percent(&self) -> f64 {
        percent(self.nodes_removed as f64, self.nodes_before as f64)
    }
}

fn percent(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        100.0 * a / b
    }
}

#[derive(Debug, Clone, Copy)]
pub enum NodeRef<'a> {
    Exact(&'a ExactNode),
    Gapped(&'a GappedNode),
}

impl NodeRef<'_> {
    pub fn level(&self) -> u32 {
        match self {
            Self::Exact(n) => n.level(),
            Self::Gapped(n) => n.level(),
        }
    }

    pub fn has_subtree(&self) -> bool {
        match self {
            Self::Exact(n) => n.has_children(),
            Self::Gapped(n) => !n.is_leaf(),
        }
    }

    pub fn keys_and_payloads(&self) -> (Vec<u64>, Vec<u64>) {
        match self {
            Self::Exact(n) => n.collect_keys(),
            Self::Gapped(n) => n.collect_keys(),
        }
    }

    pub fn lookup(&self, key: u64) -> LookupTrace {
        match self {
            Self::Exact(n) => n.lookup(key),
            Self::Gapped(n) => n.lookup(key),
        }
    }

    pub fn height(&self) -> u32 {
        match self {
            Self::Exact(n) => n.subtree_height(),
            Self::Gapped(n) => n.subtree_height(),
        }
    }

    pub fn sse(&self) -> f64 {
        match self {
            Self::Exact(n) => n.subtree_sse(),
            Self::Gapped(n) => n.subtree_sse(),
        }
    }

    pub fn slots(&self) -> usize {
        match self {
            Self::Exact(n) => n.subtree_slots(),
            Self::Gapped(n) => n.subtree_slots(),
        }
    }

    pub fn virtual_slots(&self) -> usize {
        match self {
            Self::Exact(n) => n.subtree_virtual_slots(),
            Self::Gapped(n) => n.subtree_virtual_slots(),
        }
    }

    pub fn nodes(&self) -> usize {
        match self {
            Self::Exact(n) => n.subtree_nodes(),
            Self::Gapped(n) => n.subtree_nodes(),
        }
    }

    fn budget(&self) -> usize {
        match self {
            Self::Exact(n) => n.subtree_budget(),
            Self::Gapped(GappedNode::Leaf(l)) => l.smoothing_budget,
            Self::Gapped(_) => 0,
        }
    }
}

/// Keys of a node and everything below it, ascending.
pub fn collect_subtree_keys(node: NodeRef<'_>) -> Result<SortedKeySet> {
    if !node.has_subtree() {
        return Err(Error::InvalidInput("node has no subtree".into()));
    }
    SortedKeySet::new(node.keys_and_payloads().0)
}

/// Compares a subtree with a replacement built over the same keys.
pub fn evaluate_merge(
    before: NodeRef<'_>,
    after: NodeRef<'_>,
    params: &CostModelParams,
) -> MergeDecision {
    let (keys, _) = before.keys_and_payloads();
    let mut cost = 0.0;
    let mut demoted = 0;
    for &k in &keys {
        let (tb, ta) = (before.lookup(k), after.lookup(k));
        cost += params.key_cost(&ta) - params.key_cost(&tb);
        demoted += usize::from(ta.depth > tb.depth);
    }
    let cost_delta = if keys.is_empty() {
        0.0
    } else {
        cost / keys.len() as f64
    };
    let (height_before, height_after) = (before.height(), after.height());
    let (sse_before, sse_after) = (before.sse(), after.sse());
    let accepted = match after {
        NodeRef::Exact(_) => height_after < height_before && sse_after < sse_before && demoted == 0,
        NodeRef::Gapped(_) => cost_delta < params.threshold_c,
    };
    MergeDecision {
        level: before.level(),
        first_key: keys.first().copied().unwrap_or(0),
        key_count: keys.len(),
        accepted,
        cost_delta,
        sse_before,
        sse_after,
        height_before,
        height_after,
        demoted,
        virtual_points: 0,
        smoothing_budget: 0,
        subtree_budget: after.budget(),
        slots_before: before.slots(),
        slots_after: after.slots(),
        virtual_slots_before: before.virtual_slots(),
        virtual_slots_after: after.virtual_slots(),
        nodes_before: before.nodes(),
        nodes_after: after.nodes(),
    }
}

/// What an observer sees for each evaluated subtree. For accepted merges `after` is the
/// node now installed in the index.
pub struct MergeEvent<'a> {
    pub decision: &'a MergeDecision,
    pub before: NodeRef<'a>,
    pub after: NodeRef<'a>,
}

pub fn optimize(
    index: &mut Index,
    cfg: &SmoothingConfig,
    params: &CostModelParams,
    start_level_offset: u32,
    stop_level: u32,
) -> Result<OptimizationReport> {
    optimize_observed(
        index,
        cfg,
        params,
        start_level_offset,
        stop_level,
        &mut |_| {},
    )
}

pub fn optimize_observed(
    index: &mut Index,
    cfg: &SmoothingConfig,
    params: &CostModelParams,
    start_level_offset: u32,
    stop_level: u32,
    observer: &mut dyn FnMut(&MergeEvent<'_>),
) -> Result<OptimizationReport> {
    params.validate()?;
    if stop_level < 2 {
        return Err(Error::InvalidInput(format!(
            "stop_level must be ≥ 2, got {stop_level}"
        )));
    }
    let started = Instant::now();
    let before_stats = index.stats();
    let before_locs = index.key_locations();
    let icfg = *index.config();

    let deepest = match &index.root {
        Root::Empty => None,
        Root::Exact(n) => n.deepest_parent_level(),
        Root::Gapped(n) => n.deepest_inner_level(),
    };
    let start_level = deepest
        .map(|d| d.saturating_sub(start_level_offset))
        .unwrap_or(0);

    let mut decisions = Vec::new();
    let mut skipped_oversized = 0;
    let mut failure = None;
    match &mut index.root {
        Root::Empty => {}
        Root::Exact(root) => {
            let mut opt = ExactOptimizer::new(cfg, icfg.slots_per_key, start_level, stop_level);
            for level in (stop_level..=start_level).rev() {
                root.for_each_at_level_mut(level, &mut |node| {
                    if failure.is_some() || !node.has_children() {
                        return;
                    }
                    match opt.merge(node, params, observer) {
                        Ok(Some(d)) => decisions.push(d),
                        Ok(None) => {}
                        Err(e) => failure = Some(e),
                    }
                });
            }
        }
        Root::Gapped(root) => {
            for level in (stop_level..=start_level).rev() {
                root.for_each_inner_at_level_mut(level, &mut |node| {
                    if failure.is_some() {
                        return;
                    }
                    match merge_gapped(node, cfg, params, &icfg, observer) {
                        Ok(GappedMerge::Evaluated(d)) => decisions.push(d),
                        Ok(GappedMerge::Oversized) => skipped_oversized += 1,
                        Ok(GappedMerge::NoBudget) => {}
                        Err(e) => failure = Some(e),
                    }
                });
            }
        }
    }
    if let Some(e) = failure {
        return Err(e);
    }

    let after_stats = index.stats();
    let after_locs = index.key_locations();
    debug_assert_eq!(before_locs.len(), after_locs.len());
    let mut promoted = Vec::new();
    let mut demoted_keys = 0;
    for (b, a) in before_locs.iter().zip(&after_locs) {
        debug_assert_eq!(a.key, b.key);
        if a.level < b.level {
            promoted.push(PromotedKey {
                key: a.key,
                old_level: b.level,
                new_level: a.level,
            });
        } else if a.level > b.level {
            demoted_keys += 1;
        }
    }
    let accepted: Vec<&MergeDecision> = decisions.iter().filter(|d| d.accepted).collect();
    Ok(OptimizationReport {
        mode: icfg.mode,
        start_level,
        stop_level,
        merges_accepted: accepted.len(),
        budget_accepted: accepted.iter().map(|d| d.subtree_budget).sum(),
        reallocation_slots: accepted.iter().map(|d| d.reallocation_slots()).sum(),
        skipped_oversized,
        promoted_keys: promoted.len(),
        promoted,
        demoted_keys,
        promotable_keys: before_stats.keys_at_or_below(3),
        nodes_before: before_stats.node_count,
        nodes_after: after_stats.node_count,
        nodes_removed: before_stats.node_count as i64 - after_stats.node_count as i64,
        slots_before: before_stats.total_slots,
        slots_after: after_stats.total_slots,
        slots_added: after_stats.total_slots as i64 - before_stats.total_slots as i64,
        virtual_slots_added: after_stats.virtual_slots as i64 - before_stats.virtual_slots as i64,
        decisions,
        wall_time_ns: started.elapsed().as_nanos(),
    })
}

fn smoothed_keys(keys: &[u64], cfg: &SmoothingConfig) -> Result<(Vec<u64>, usize)> {
    let budget = cfg.budget_for(keys.len());
    if keys.len() < 2 || budget == 0 {
        return Ok((Vec::new(), budget));
    }
    Ok((smooth_slice(keys, budget)?.sorted_keys(), budget))
}

/// Exact-mode builder that decides, for every group of keys it builds a node over,
/// whether the smoothed variant passes the gate.
struct ExactOptimizer<'a> {
    cfg: &'a SmoothingConfig,
    spk: f64,
    start_level: u32,
    stop_level: u32,
    /// `(first key, key count)` → virtual keys and budget.
    smoothed: HashMap<(u64, usize), (Vec<u64>, usize)>,
    /// `(first key, key count, level)` → whether the smoothed node won.
    choice: HashMap<(u64, usize, u32), bool>,
    params: CostModelParams,
}

impl<'a> ExactOptimizer<'a> {
    fn new(cfg: &'a SmoothingConfig, spk: f64, start_level: u32, stop_level: u32) -> Self {
        Self {
            cfg,
            spk,
            start_level,
            stop_level,
            smoothed: HashMap::new(),
            choice: HashMap::new(),
            params: CostModelParams::default(),
        }
    }

    fn smooth(&mut self, keys: &[u64]) -> Result<(Vec<u64>, usize)> {
        let id = (keys[0], keys.len());
        if let Some(v) = self.smoothed.get(&id) {
            return Ok(v.clone());
        }
        let v = smoothed_keys(keys, self.cfg)?;
        self.smoothed.insert(id, v.clone());
        Ok(v)
    }

    fn node(
        &mut self,
        keys: &[u64],
        payloads: &[u64],
        virtuals: &[u64],
        budget: usize,
        level: u32,
    ) -> Result<ExactNode> {
        let mut failure = None;
        let spk = self.spk;
        let mut node = build_with(
            keys,
            payloads,
            virtuals,
            level,
            spk,
            &mut |k, p, l| match self.build(k, p, l) {
                Ok(n) => n,
                Err(e) => {
                    failure.get_or_insert(e);
                    crate::index::exact::build_plain(k, p, l, spk)
                }
            },
        );
        if let Some(e) = failure {
            return Err(e);
        }
        if !virtuals.is_empty() {
            node.smoothing_budget = budget;
        }
        Ok(node)
    }

    /// Node over `keys` at `level`, smoothed if that passes the gate.
    fn build(&mut self, keys: &[u64], payloads: &[u64], level: u32) -> Result<ExactNode> {
        let id = (keys[0], keys.len(), level);
        if let Some(&use_smoothed) = self.choice.get(&id) {
            if use_smoothed {
                let (v, budget) = self.smooth(keys)?;
                return self.node(keys, payloads, &v, budget, level);
            }
            return self.node(keys, payloads, &[], 0, level);
        }
        let plain = self.node(keys, payloads, &[], 0, level)?;
        if level > self.start_level || level < self.stop_level || !plain.has_children() {
            self.choice.insert(id, false);
            return Ok(plain);
        }
        let (v, budget) = self.smooth(keys)?;
        if v.is_empty() {
            self.choice.insert(id, false);
            return Ok(plain);
        }
        let cand = self.node(keys, payloads, &v, budget, level)?;
        let d = evaluate_merge(NodeRef::Exact(&plain), NodeRef::Exact(&cand), &self.params);
        self.choice.insert(id, d.accepted);
        Ok(if d.accepted { cand } else { plain })
    }

    fn merge(
        &mut self,
        node: &mut ExactNode,
        params: &CostModelParams,
        observer: &mut dyn FnMut(&MergeEvent<'_>),
    ) -> Result<Option<MergeDecision>> {
        let (keys, payloads) = node.collect_keys();
        if self.cfg.budget_for(keys.len()) == 0 {
            return Ok(None);
        }
        let (v, budget) = self.smooth(&keys)?;
        let cand = self.node(&keys, &payloads, &v, budget, node.level())?;
        let mut d = evaluate_merge(NodeRef::Exact(node), NodeRef::Exact(&cand), params);
        d.virtual_points = v.len();
        d.smoothing_budget = budget;
        if d.accepted {
            let old = std::mem::replace(node, cand);
            observer(&MergeEvent {
                decision: &d,
                before: NodeRef::Exact(&old),
                after: NodeRef::Exact(node),
            });
        } else {
            observer(&MergeEvent {
                decision: &d,
                before: NodeRef::Exact(node),
                after: NodeRef::Exact(&cand),
            });
        }
        Ok(Some(d))
    }
}

fn merge_gapped(
    node: &mut GappedNode,
    cfg: &SmoothingConfig,
    params: &CostModelParams,
    icfg: &IndexConfig,
    observer: &mut dyn FnMut(&MergeEvent<'_>),
) -> Result<GappedMerge> {
    let (keys, payloads) = node.collect_keys();
    if keys.len() > GAPPED_MERGE_LIMIT_LEAVES * icfg.max_leaf_size {
        return Ok(GappedMerge::Oversized);
    }
    if cfg.budget_for(keys.len()) == 0 {
        return Ok(GappedMerge::NoBudget);
    }
    let (v, budget) = smoothed_keys(&keys, cfg)?;
    let split_limit = icfg.max_leaf_size.max(2 * keys.len());
    let mut leaf = build_leaf(
        &keys,
        &payloads,
        &v,
        node.level(),
        icfg.slots_per_key,
        split_limit,
    );
    leaf.smoothing_budget = if v.is_empty() { 0 } else { budget };
    let cand = GappedNode::Leaf(leaf);
    let mut d = evaluate_merge(NodeRef::Gapped(node), NodeRef::Gapped(&cand), params);
    d.virtual_points = v.len();
    d.smoothing_budget = budget;
    if d.accepted {
        let old = std::mem::replace(node, cand);
        observer(&MergeEvent {
            decision: &d,
            before: NodeRef::Gapped(&old),
            after: NodeRef::Gapped(node),
        });
    } else {
        observer(&MergeEvent {
            decision: &d,
            before: NodeRef::Gapped(node),
            after: NodeRef::Gapped(&cand),
        });
    }
    Ok(GappedMerge::Evaluated(d))
}

enum GappedMerge {
    Evaluated(MergeDecision),
    Oversized,
    NoBudget,
}

/// Source of per-lookup timings for calibration.
pub trait LookupClock {
    /// Mean nanoseconds for one lookup of `key`, over `repetitions` runs.
    fn time_lookup(
        &mut self,
        index: &Index,
        key: u64,
        trace: &LookupTrace,
        repetitions: usize,
    ) -> f64;
}

/// Monotonic wall clock.
#[derive(Debug, Default, Clone, Copy)]
pub struct WallClock;

impl LookupClock for WallClock {
    fn time_lookup(&mut self, index: &Index, key: u64, _: &LookupTrace, repetitions: usize) -> f64 {
        let t = Instant::now();
        for _ in 0..repetitions {
            black_box(index.lookup(black_box(key)));
        }
        t.elapsed().as_nanos() as f64 / repetitions as f64
    }
}

pub const MIN_CALIBRATION_SAMPLES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub params: CostModelParams,
    /// False when the regression was degenerate or gave a non-positive constant and the
    /// defaults were kept.
    pub fitted: bool,
    pub samples: usize,
}

pub fn calibrate_cost_constants(
    index: &Index,
    sample_keys: &[u64],
    repetitions: usize,
) -> Result<Calibration> {
    calibrate_with_clock(
        index,
        sample_keys,
        repetitions,
        &CostModelParams::default(),
        &mut WallClock,
    )
}

/// Least squares without intercept of lookup time on `(depth, search_steps)`; the two
/// coefficients become the traversal and search constants.
pub fn calibrate_with_clock(
    index: &Index,
    sample_keys: &[u64],
    repetitions: usize,
    defaults: &CostModelParams,
    clock: &mut dyn LookupClock,
) -> Result<Calibration> {
    if repetitions == 0 {
        return Err(Error::InvalidInput("repetitions must be ≥ 1".into()));
    }
    if sample_keys.len() < MIN_CALIBRATION_SAMPLES {
        return Err(Error::Calibration(format!(
            "{} samples, need at least {MIN_CALIBRATION_SAMPLES}",
            sample_keys.len()
        )));
    }
    let (mut dd, mut ds, mut ss, mut dt, mut st) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &k in sample_keys {
        let trace = index.lookup(k);
        if !trace.found {
            return Err(Error::InvalidInput(format!(
                "sample key {k} is not in the index"
            )));
        }
        let t = clock.time_lookup(index, k, &trace, repetitions);
        let (d, s) = (trace.depth as f64, trace.search_steps as f64);
        dd += d * d;
        ds += d * s;
        ss += s * s;
        dt += d * t;
        st += s * t;
    }
    let det = dd * ss - ds * ds;
    let fallback = Calibration {
        params: *defaults,
        fitted: false,
        samples: sample_keys.len(),
    };
    if !(det > 1e-9 * dd * ss) {
        return Ok(fallback);
    }
    let traversal = (dt * ss - st * ds) / det;
    let search = (st * dd - dt * ds) / det;
    if !(traversal > 0.0 && search > 0.0 && traversal.is_finite() && search.is_finite()) {
        return Ok(fallback);
    }
    Ok(Calibration {
        params: CostModelParams {
            search_constant: search,
            traversal_constant: traversal,
            threshold_c: defaults.threshold_c,
        },
        fitted: true,
        samples: sample_keys.len(),
    })
}
