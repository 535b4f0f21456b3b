//! Pipelines behind the subcommands and the report records they produce.

use std::hint::black_box;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use smoothidx::csv::{
    calibrate_cost_constants, default_start_level_offset, optimize, Calibration, CostModelParams,
    OptimizationReport, DEFAULT_STOP_LEVEL,
};
use smoothidx::index::{Index, IndexConfig, IndexMode, IndexStats};
use smoothidx::workloads::{
    gen_synthetic, load_dataset, sample_queries, split_read_write, DatasetSpec, Distribution,
    QueryKind, QueryWorkload,
};
use smoothidx::{Error, SmoothingConfig, SortedKeySet};

use crate::output::Table;

/// Keys sampled for cost calibration.
const CALIBRATION_SAMPLES: usize = 1000;

#[derive(Debug, Clone, Serialize)]
pub struct Settings {
    pub mode: IndexMode,
    pub alpha: f64,
    pub cost_threshold: f64,
    pub slots_per_key: f64,
    pub max_leaf_size: usize,
    pub seed: u64,
    pub n: usize,
    pub dist: Distribution,
    pub input: Option<PathBuf>,
    pub queries: usize,
    pub zipf_s: f64,
    pub repetitions: usize,
    pub calibrate: bool,
}

impl Settings {
    pub fn keys(&self) -> Result<SortedKeySet> {
        match &self.input {
            Some(p) => load_dataset(p).with_context(|| format!("loading {}", p.display())),
            None => Ok(gen_synthetic(&DatasetSpec::synthetic(
                self.dist, self.n, self.seed,
            ))?),
        }
    }

    pub fn index_config(&self) -> IndexConfig {
        IndexConfig {
            mode: self.mode,
            slots_per_key: self.slots_per_key,
            max_leaf_size: self.max_leaf_size,
            seed: self.seed,
        }
    }

    pub fn smoothing(&self) -> Result<SmoothingConfig> {
        Ok(SmoothingConfig::alpha(self.alpha)?)
    }

    pub fn query_kind(&self, name: &str, promoted: &[u64]) -> Result<QueryKind> {
        Ok(match name {
            "random" => QueryKind::Random,
            "zipfian" => QueryKind::Zipfian { s: self.zipf_s },
            "promoted" => QueryKind::Promoted(promoted.to_vec()),
            other => bail!("unknown query kind {other:?}"),
        })
    }
}

pub fn build(keys: &SortedKeySet, s: &Settings) -> Result<(Index, u128)> {
    let t = Instant::now();
    let index = Index::bulk_build(keys, s.index_config())?;
    Ok((index, t.elapsed().as_nanos()))
}

#[derive(Debug, Clone, Serialize)]
pub struct OptimizeSummary {
    pub params: CostModelParams,
    pub calibration: Option<Calibration>,
    pub calibration_note: Option<String>,
    pub start_level: u32,
    pub stop_level: u32,
    pub merges_evaluated: usize,
    pub merges_accepted: usize,
    pub skipped_oversized: usize,
    pub promotable_keys: usize,
    pub promoted_keys: usize,
    pub unpromoted_keys: usize,
    pub demoted_keys: usize,
    pub promoted_percent: f64,
    pub storage_increase_percent: f64,
    pub node_reduction_percent: f64,
    pub nodes_before: usize,
    pub nodes_after: usize,
    pub slots_before: usize,
    pub slots_after: usize,
    pub slots_added: i64,
    pub virtual_slots_added: i64,
    pub budget_accepted: usize,
    pub reallocation_slots: usize,
    pub mean_depth_before: f64,
    pub mean_depth_after: f64,
    /// Calibration plus optimization.
    pub preprocessing_ns: u128,
}

pub struct Optimized {
    pub report: OptimizationReport,
    pub summary: OptimizeSummary,
    pub before: IndexStats,
    pub after: IndexStats,
}

pub fn run_optimize(index: &mut Index, keys: &SortedKeySet, s: &Settings) -> Result<Optimized> {
    let t = Instant::now();
    let mut params = CostModelParams {
        threshold_c: s.cost_threshold,
        ..CostModelParams::default()
    };
    let (mut calibration, mut calibration_note) = (None, None);
    if s.calibrate {
        let sample = sample_queries(
            keys.as_slice(),
            CALIBRATION_SAMPLES,
            &QueryKind::Random,
            s.seed,
        )?;
        match calibrate_cost_constants(index, &sample.queries, s.repetitions.max(1)) {
            Ok(c) => {
                params.search_constant = c.params.search_constant;
                params.traversal_constant = c.params.traversal_constant;
                if !c.fitted {
                    calibration_note = Some("regression degenerate, defaults kept".into());
                }
                calibration = Some(c);
            }
            Err(Error::Calibration(msg)) => {
                calibration_note = Some(format!("{msg}, defaults kept"))
            }
            Err(e) => return Err(e.into()),
        }
    }
    let before = index.stats();
    let report = optimize(
        index,
        &s.smoothing()?,
        &params,
        default_start_level_offset(s.mode),
        DEFAULT_STOP_LEVEL,
    )?;
    let preprocessing_ns = t.elapsed().as_nanos();
    let after = index.stats();
    let summary = OptimizeSummary {
        params,
        calibration,
        calibration_note,
        start_level: report.start_level,
        stop_level: report.stop_level,
        merges_evaluated: report.decisions.len(),
        merges_accepted: report.merges_accepted,
        skipped_oversized: report.skipped_oversized,
        promotable_keys: report.promotable_keys,
        promoted_keys: report.promoted_keys,
        unpromoted_keys: report.promotable_keys - report.promoted_keys,
        demoted_keys: report.demoted_keys,
        promoted_percent: report.promoted_percent(),
        storage_increase_percent: report.storage_increase_percent(),
        node_reduction_percent: report.node_reduction_percent(),
        nodes_before: report.nodes_before,
        nodes_after: report.nodes_after,
        slots_before: report.slots_before,
        slots_after: report.slots_after,
        slots_added: report.slots_added,
        virtual_slots_added: report.virtual_slots_added,
        budget_accepted: report.budget_accepted,
        reallocation_slots: report.reallocation_slots,
        mean_depth_before: before.mean_key_depth(),
        mean_depth_after: after.mean_key_depth(),
        preprocessing_ns,
    };
    Ok(Optimized {
        report,
        summary,
        before,
        after,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct LevelTiming {
    pub level: u32,
    pub queries: usize,
    pub mean_ns: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct QuerySide {
    pub queries: usize,
    pub mean_depth: f64,
    pub mean_search_steps: f64,
    pub mean_ns: f64,
    pub total_ns: f64,
    pub per_level: Vec<LevelTiming>,
}

/// Times every query, averaged over `repetitions` back-to-back lookups.
pub fn time_queries(index: &Index, queries: &[u64], repetitions: usize) -> Result<QuerySide> {
    let reps = repetitions.max(1);
    let mut per_level: Vec<(usize, f64)> = Vec::new();
    let (mut depth, mut steps, mut total) = (0u64, 0u64, 0.0);
    for &k in queries {
        let trace = index.lookup(k);
        if !trace.found {
            bail!("query key {k} not found");
        }
        let t = Instant::now();
        for _ in 0..reps {
            black_box(index.lookup(black_box(k)));
        }
        let ns = t.elapsed().as_nanos() as f64 / reps as f64;
        let l = trace.depth as usize;
        if per_level.len() < l {
            per_level.resize(l, (0, 0.0));
        }
        per_level[l - 1].0 += 1;
        per_level[l - 1].1 += ns;
        depth += u64::from(trace.depth);
        steps += u64::from(trace.search_steps);
        total += ns;
    }
    let q = queries.len().max(1) as f64;
    Ok(QuerySide {
        queries: queries.len(),
        mean_depth: depth as f64 / q,
        mean_search_steps: steps as f64 / q,
        mean_ns: total / q,
        total_ns: total,
        per_level: per_level
            .into_iter()
            .enumerate()
            .filter(|(_, (c, _))| *c > 0)
            .map(|(i, (c, ns))| LevelTiming {
                level: i as u32 + 1,
                queries: c,
                mean_ns: ns / c as f64,
            })
            .collect(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct QueryComparison {
    pub kind: String,
    pub repetitions: usize,
    pub baseline: QuerySide,
    pub optimized: QuerySide,
    pub total_time_saved_ns: f64,
    /// Optimized total time over baseline total time.
    pub relative_query_time: Option<f64>,
}

pub fn compare_queries(
    baseline: &Index,
    optimized: &Index,
    w: &QueryWorkload,
) -> Result<QueryComparison> {
    let b = time_queries(baseline, &w.queries, w.repetitions)?;
    let o = time_queries(optimized, &w.queries, w.repetitions)?;
    Ok(QueryComparison {
        kind: w.kind.clone(),
        repetitions: w.repetitions,
        total_time_saved_ns: b.total_ns - o.total_ns,
        relative_query_time: (b.total_ns > 0.0).then(|| o.total_ns / b.total_ns),
        baseline: b,
        optimized: o,
    })
}

pub fn workload(keys: &SortedKeySet, s: &Settings, kind: &QueryKind) -> Result<QueryWorkload> {
    let mut w = sample_queries(keys.as_slice(), s.queries, kind, s.seed)?;
    w.repetitions = s.repetitions;
    Ok(w)
}

#[derive(Debug, Clone, Serialize)]
pub struct BatchRow {
    pub batch: usize,
    pub index: &'static str,
    pub inserted: usize,
    pub insert_ns: u128,
    /// Insertions that landed in a slot reserved by a virtual key.
    pub gap_reused: usize,
    pub structural_changes: usize,
    pub resident: usize,
    pub lookup_failures: usize,
    pub height: u32,
    pub mean_depth: f64,
    pub keys_at_level3_or_deeper: usize,
    pub keys_per_level: Vec<usize>,
    pub total_slots: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct InsertBench {
    pub build_keys: usize,
    pub optimize: OptimizeSummary,
    pub batches: Vec<BatchRow>,
}

/// Builds over a random half, optimizes a copy, then inserts the other half into both in
/// batches of 10% of the keys.
pub fn insert_bench(keys: &SortedKeySet, s: &Settings) -> Result<InsertBench> {
    let (build_half, batches) = split_read_write(keys.as_slice(), s.seed)?;
    let build_set = SortedKeySet::new(build_half)?;
    let (mut baseline, _) = build(&build_set, s)?;
    let mut optimized = baseline.clone();
    let opt = run_optimize(&mut optimized, &build_set, s)?;
    let mut resident = build_set.into_vec();
    let build_keys = resident.len();
    let mut rows = Vec::new();
    for (i, batch) in batches.iter().enumerate() {
        resident.extend_from_slice(batch);
        for (name, index) in [("baseline", &mut baseline), ("optimized", &mut optimized)] {
            let (mut gap_reused, mut structural) = (0, 0);
            let t = Instant::now();
            for &k in batch {
                let out = index.insert(k)?;
                gap_reused += usize::from(out.gap_consumed);
                structural += usize::from(out.structural_change);
            }
            let insert_ns = t.elapsed().as_nanos();
            let lookup_failures = resident
                .iter()
                .filter(|&&k| index.lookup(k).payload != Some(k))
                .count();
            let st = index.stats();
            rows.push(BatchRow {
                batch: i + 1,
                index: name,
                inserted: batch.len(),
                insert_ns,
                gap_reused,
                structural_changes: structural,
                resident: resident.len(),
                lookup_failures,
                height: st.height,
                mean_depth: st.mean_key_depth(),
                keys_at_level3_or_deeper: st.keys_at_or_below(3),
                keys_per_level: st.keys_per_level.clone(),
                total_slots: st.total_slots,
            });
        }
    }
    Ok(InsertBench {
        build_keys,
        optimize: opt.summary,
        batches: rows,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct LevelRow {
    pub level: u32,
    pub keys_before: usize,
    pub keys_after: usize,
    pub nodes_before: usize,
    pub nodes_after: usize,
}

pub fn level_rows(before: &IndexStats, after: &IndexStats) -> Vec<LevelRow> {
    let levels = before.keys_per_level.len().max(after.keys_per_level.len());
    let get = |v: &[usize], i: usize| v.get(i).copied().unwrap_or(0);
    (0..levels)
        .map(|i| LevelRow {
            level: i as u32 + 1,
            keys_before: get(&before.keys_per_level, i),
            keys_after: get(&after.keys_per_level, i),
            nodes_before: get(&before.nodes_per_level, i),
            nodes_after: get(&after.nodes_per_level, i),
        })
        .collect()
}

pub fn levels_table(rows: &[LevelRow]) -> Table {
    let mut t = Table::new(&[
        "level",
        "keys_before",
        "keys_after",
        "nodes_before",
        "nodes_after",
    ]);
    for r in rows {
        t.row(&[
            &r.level,
            &r.keys_before,
            &r.keys_after,
            &r.nodes_before,
            &r.nodes_after,
        ]);
    }
    t
}

pub fn merges_table(r: &OptimizationReport) -> Table {
    let mut t = Table::new(&[
        "level",
        "first_key",
        "key_count",
        "accepted",
        "cost_delta",
        "sse_before",
        "sse_after",
        "height_before",
        "height_after",
        "virtual_points",
        "smoothing_budget",
        "slots_before",
        "slots_after",
    ]);
    for d in &r.decisions {
        t.row(&[
            &d.level,
            &d.first_key,
            &d.key_count,
            &d.accepted,
            &d.cost_delta,
            &d.sse_before,
            &d.sse_after,
            &d.height_before,
            &d.height_after,
            &d.virtual_points,
            &d.smoothing_budget,
            &d.slots_before,
            &d.slots_after,
        ]);
    }
    t
}

pub fn queries_table(cmps: &[QueryComparison]) -> Table {
    let mut t = Table::new(&["kind", "index", "level", "queries", "mean_ns"]);
    for c in cmps {
        for (name, side) in [("baseline", &c.baseline), ("optimized", &c.optimized)] {
            for l in &side.per_level {
                t.row(&[&c.kind, &name, &l.level, &l.queries, &l.mean_ns]);
            }
        }
    }
    t
}

pub fn batches_table(rows: &[BatchRow]) -> Table {
    let mut t = Table::new(&[
        "batch",
        "index",
        "inserted",
        "insert_ns",
        "gap_reused",
        "structural_changes",
        "resident",
        "lookup_failures",
        "height",
        "mean_depth",
        "keys_at_level3_or_deeper",
        "total_slots",
    ]);
    for r in rows {
        t.row(&[
            &r.batch,
            &r.index,
            &r.inserted,
            &r.insert_ns,
            &r.gap_reused,
            &r.structural_changes,
            &r.resident,
            &r.lookup_failures,
            &r.height,
            &r.mean_depth,
            &r.keys_at_level3_or_deeper,
            &r.total_slots,
        ]);
    }
    t
}

/// Everything `report` measures in one record.
#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub config: Settings,
    pub keys: usize,
    pub build_ns: u128,
    pub stats_before: IndexStats,
    pub stats_after: IndexStats,
    pub depth_histogram: Vec<LevelRow>,
    pub optimize: OptimizeSummary,
    pub queries: Vec<QueryComparison>,
    pub insertion: InsertBench,
}
