mod bench;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use smoothidx::index::IndexMode;
use smoothidx::oracle::verify_suite;
use smoothidx::smooth;
use smoothidx::workloads::{write_dataset, Distribution};

use bench::{QueryComparison, Settings};
use output::{OutDir, Table};

#[derive(Parser)]
#[command(
    name = "smoothidx",
    version,
    about = "CDF smoothing benchmarks for learned indexes"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Index variant: exact (every key in its predicted slot) or gapped (leaf search).
    #[arg(long, global = true, default_value = "exact")]
    mode: IndexMode,
    /// Virtual-key budget as a fraction of each smoothed key set.
    #[arg(long, global = true, default_value_t = 0.1)]
    alpha: f64,
    /// Gapped mode: a merge must lower the per-key query cost by more than this (ns, < 0).
    #[arg(long, global = true, default_value_t = -1.0, allow_negative_numbers = true)]
    cost_threshold: f64,
    #[arg(long, global = true, default_value_t = 2.0)]
    slots_per_key: f64,
    #[arg(long, global = true, default_value_t = 256)]
    max_leaf_size: usize,
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// Synthetic key count.
    #[arg(long, global = true, default_value_t = 1_000_000)]
    n: usize,
    #[arg(long, global = true, default_value = "lognormal")]
    dist: Distribution,
    /// Dataset file to use instead of a synthetic set.
    #[arg(long, global = true)]
    input: Option<PathBuf>,
    /// Sampled queries per workload.
    #[arg(long, global = true, default_value_t = 10_000)]
    queries: usize,
    #[arg(long, global = true, default_value_t = 1.0)]
    zipf_s: f64,
    /// Back-to-back runs averaged per timed query.
    #[arg(long, global = true, default_value_t = 100)]
    repetitions: usize,
    /// Output directory for reports and tables.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Fit the cost constants to measured lookup times before optimizing.
    #[arg(long, global = true)]
    calibrate: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write a dataset file (8-byte count, then little-endian u64 keys).
    Generate {
        /// Destination; defaults to `<out>/<dist>_<n>_<seed>.bin`.
        #[arg(long)]
        file: Option<PathBuf>,
    },
    /// Bulk-load an index and report its shape.
    Build,
    /// Smooth the whole key set once and report the fit error.
    Smooth,
    /// Build, merge subtrees over smoothed keys, and report what moved.
    Optimize,
    /// Time lookups on the plain and the optimized index.
    Query {
        /// random, zipfian or promoted
        #[arg(long, default_value = "random")]
        kind: String,
    },
    /// Build over half the keys and insert the rest in batches.
    InsertBench,
    /// Run the built-in oracle checks.
    Verify,
    /// Run build, optimize, all query kinds and the insert benchmark.
    Report,
}

impl Common {
    fn settings(&self) -> Settings {
        Settings {
            mode: self.mode,
            alpha: self.alpha,
            cost_threshold: self.cost_threshold,
            slots_per_key: self.slots_per_key,
            max_leaf_size: self.max_leaf_size,
            seed: self.seed,
            n: self.n,
            dist: self.dist,
            input: self.input.clone(),
            queries: self.queries,
            zipf_s: self.zipf_s,
            repetitions: self.repetitions,
            calibrate: self.calibrate,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<bool> {
    let s = cli.common.settings();
    let out = OutDir::create(&cli.common.out)?;
    match cli.command {
        Command::Generate { file } => {
            let keys = s.keys()?;
            let path =
                file.unwrap_or_else(|| out.path(&format!("{}_{}_{}.bin", s.dist, s.n, s.seed)));
            write_dataset(&path, keys.as_slice())?;
            println!("wrote {} keys to {}", keys.len(), path.display());
            out.json(
                "generate.json",
                &json!({ "config": s, "keys": keys.len(), "path": path }),
            )?;
        }
        Command::Build => {
            let keys = s.keys()?;
            let (index, build_ns) = bench::build(&keys, &s)?;
            let stats = index.stats();
            println!(
                "{} keys, height {}, {} nodes, {} slots, mean depth {:.3}, {:.1} ms",
                stats.key_count,
                stats.height,
                stats.node_count,
                stats.total_slots,
                stats.mean_key_depth(),
                build_ns as f64 / 1e6
            );
            let mut t = Table::new(&["level", "keys", "nodes"]);
            for (i, (k, n)) in stats
                .keys_per_level
                .iter()
                .zip(&stats.nodes_per_level)
                .enumerate()
            {
                t.row(&[&(i + 1), k, n]);
            }
            out.table("levels.csv", &t)?;
            out.json(
                "build.json",
                &json!({ "config": s, "build_ns": build_ns, "stats": stats }),
            )?;
        }
        Command::Smooth => {
            let keys = s.keys()?;
            let t = Instant::now();
            let v = smooth(&keys, &s.smoothing()?)?;
            let ns = t.elapsed().as_nanos();
            let improvement = if v.base_sse() > 0.0 {
                100.0 * (v.base_sse() - v.final_sse()) / v.base_sse()
            } else {
                0.0
            };
            println!(
                "{} virtual keys of {} allowed, SSE {:.6e} -> {:.6e} ({improvement:.2}% lower), {:.1} ms",
                v.len(),
                v.budget,
                v.base_sse(),
                v.final_sse(),
                ns as f64 / 1e6
            );
            let mut tr = Table::new(&["round", "sse"]);
            for (i, sse) in v.sse_trace.iter().enumerate() {
                tr.row(&[&i, sse]);
            }
            out.table("smooth_trace.csv", &tr)?;
            out.json(
                "smooth.json",
                &json!({
                    "config": s,
                    "keys": keys.len(),
                    "budget": v.budget,
                    "virtual_keys": v.sorted_keys(),
                    "base_sse": v.base_sse(),
                    "final_sse": v.final_sse(),
                    "improvement_percent": improvement,
                    "time_ns": ns,
                }),
            )?;
        }
        Command::Optimize => {
            let keys = s.keys()?;
            let (mut index, build_ns) = bench::build(&keys, &s)?;
            let o = bench::run_optimize(&mut index, &keys, &s)?;
            print_optimize(&o.summary);
            let rows = bench::level_rows(&o.before, &o.after);
            out.table("levels.csv", &bench::levels_table(&rows))?;
            out.table("merges.csv", &bench::merges_table(&o.report))?;
            out.json(
                "optimize.json",
                &json!({
                    "config": s,
                    "build_ns": build_ns,
                    "summary": o.summary,
                    "stats_before": o.before,
                    "stats_after": o.after,
                    "promoted": o.report.promoted,
                }),
            )?;
        }
        Command::Query { kind } => {
            let keys = s.keys()?;
            let (baseline, _) = bench::build(&keys, &s)?;
            let mut optimized = baseline.clone();
            let o = bench::run_optimize(&mut optimized, &keys, &s)?;
            let qk = s.query_kind(&kind, &o.report.promoted_key_list())?;
            let w = bench::workload(&keys, &s, &qk)?;
            let c = bench::compare_queries(&baseline, &optimized, &w)?;
            print_queries(&c);
            out.table(
                "queries.csv",
                &bench::queries_table(std::slice::from_ref(&c)),
            )?;
            out.json(
                "query.json",
                &json!({ "config": s, "optimize": o.summary, "comparison": c }),
            )?;
        }
        Command::InsertBench => {
            let keys = s.keys()?;
            let ib = bench::insert_bench(&keys, &s)?;
            print_batches(&ib);
            out.table("insert_batches.csv", &bench::batches_table(&ib.batches))?;
            out.json("insert_bench.json", &json!({ "config": s, "result": ib }))?;
        }
        Command::Verify => {
            let checks = verify_suite(s.seed);
            for c in &checks {
                println!(
                    "{} {}: {}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.detail
                );
            }
            out.json("verify.json", &checks)?;
            return Ok(checks.iter().all(|c| c.passed));
        }
        Command::Report => {
            let keys = s.keys()?;
            let (baseline, build_ns) = bench::build(&keys, &s)?;
            let mut optimized = baseline.clone();
            let o = bench::run_optimize(&mut optimized, &keys, &s)?;
            print_optimize(&o.summary);
            let mut queries = Vec::new();
            for kind in ["random", "zipfian", "promoted"] {
                let qk = s.query_kind(kind, &o.report.promoted_key_list())?;
                let c = bench::compare_queries(
                    &baseline,
                    &optimized,
                    &bench::workload(&keys, &s, &qk)?,
                )?;
                print_queries(&c);
                queries.push(c);
            }
            let insertion = bench::insert_bench(&keys, &s)?;
            print_batches(&insertion);
            let depth_histogram = bench::level_rows(&o.before, &o.after);
            out.table("levels.csv", &bench::levels_table(&depth_histogram))?;
            out.table("merges.csv", &bench::merges_table(&o.report))?;
            out.table("queries.csv", &bench::queries_table(&queries))?;
            out.table(
                "insert_batches.csv",
                &bench::batches_table(&insertion.batches),
            )?;
            let report = bench::BenchReport {
                config: s,
                keys: keys.len(),
                build_ns,
                stats_before: o.before,
                stats_after: o.after,
                depth_histogram,
                optimize: o.summary,
                queries,
                insertion,
            };
            let path = out.json("report.json", &report)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(true)
}

fn print_optimize(s: &bench::OptimizeSummary) {
    println!(
        "{} of {} merges accepted; promoted {} of {} keys ({:.2}%); storage {:+.2}%; nodes {:+.2}%; mean depth {:.3} -> {:.3}; {:.1} ms",
        s.merges_accepted,
        s.merges_evaluated,
        s.promoted_keys,
        s.promotable_keys,
        s.promoted_percent,
        s.storage_increase_percent,
        0.0 - s.node_reduction_percent,
        s.mean_depth_before,
        s.mean_depth_after,
        s.preprocessing_ns as f64 / 1e6
    );
    if let Some(note) = &s.calibration_note {
        println!("calibration: {note}");
    }
}

fn print_queries(c: &QueryComparison) {
    println!(
        "{} queries ({}): mean depth {:.3} -> {:.3}, mean {:.1} ns -> {:.1} ns",
        c.baseline.queries,
        c.kind,
        c.baseline.mean_depth,
        c.optimized.mean_depth,
        c.baseline.mean_ns,
        c.optimized.mean_ns
    );
}

fn print_batches(ib: &bench::InsertBench) {
    for r in &ib.batches {
        println!(
            "batch {} {:9}: {} inserted, {} into virtual gaps, {} lookup failures, {} keys at level 3+",
            r.batch, r.index, r.inserted, r.gap_reused, r.lookup_failures, r.keys_at_level3_or_deeper
        );
    }
}
