//! Command-line front end: run a workload file, verify the tree against
//! the oracle over seeded random workloads, or measure I/O scaling over a
//! doubling grid of insert-only runs.
//!
//! Exit codes: 0 success, 1 verification/envelope failure, 2 parse error,
//! 3 structural error or invariant violation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pbtree::harness::{
    self, execute_ops, normalized_ratio, run_equivalence, Mix, RunReport, WorkloadSpec,
};
use pbtree::store::{Backing, StoreConfig};
use pbtree::tree::{PersistentBufferTree, TreeConfig};
use pbtree::workload;

#[derive(Parser)]
#[command(name = "pbtree", about = "Persistent buffer tree workload runner and verifier")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Elements per block (B), >= 2
    #[arg(long = "block-size", default_value_t = 16)]
    block_size: usize,
    /// Tree fanout / buffer size in blocks (m), even and >= 4
    #[arg(long, default_value_t = 8)]
    fanout: usize,
    /// Deterministic seed; defaults to $PBT_SEED or 42
    #[arg(long)]
    seed: Option<u64>,
}

impl ModelArgs {
    fn seed(&self) -> u64 {
        self.seed
            .or_else(|| std::env::var("PBT_SEED").ok().and_then(|s| s.parse().ok()))
            .unwrap_or(42)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Execute a workload file, flush, and print the run report
    Run {
        /// Workload file (I/U/D/Q lines, # comments)
        workload: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        /// Block store backing: "mem" or a file path
        #[arg(long, default_value = "mem")]
        store: String,
        /// Report format
        #[arg(long, default_value = "json", value_parser = ["json", "csv"])]
        out: String,
    },
    /// Run seeded random workloads and compare every query to the oracle
    Verify {
        /// Operations per seed
        #[arg(long, default_value_t = 10_000)]
        ops: usize,
        /// Number of seeds
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[command(flatten)]
        model: ModelArgs,
        /// insert,update,delete,query fractions
        #[arg(long, default_value = "0.5,0.2,0.1,0.2")]
        mix: String,
        /// Parallel verification jobs
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Corrupt one result before comparing (exercises the failure path)
        #[arg(long, hide = true, default_value_t = false)]
        inject_fault: bool,
    },
    /// Insert-only scaling grid; checks the normalized-cost envelopes
    Scale {
        /// Comma-separated op counts, or "2^a..2^b" for a doubling grid
        #[arg(long = "n-grid", default_value = "2^14..2^18")]
        n_grid: String,
        #[command(flatten)]
        model: ModelArgs,
        /// Parallel jobs
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { workload, model, store, out } => cmd_run(workload, model, store, out),
        Command::Verify { ops, seeds, model, mix, jobs, inject_fault } => {
            cmd_verify(ops, seeds, model, mix, jobs, inject_fault)
        }
        Command::Scale { n_grid, model, jobs } => cmd_scale(n_grid, model, jobs),
    }
}

fn store_config(model: &ModelArgs, store: &str) -> StoreConfig {
    let backing = if store == "mem" {
        Backing::Memory
    } else {
        Backing::File(PathBuf::from(store))
    };
    StoreConfig { block_elems: model.block_size, fanout: model.fanout, backing, max_blocks: None }
}

fn cmd_run(path: PathBuf, model: ModelArgs, store: String, out: String) -> ExitCode {
    let text = match std::fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("cannot read {}: {e}", path.display());
            return ExitCode::from(2);
        }
    };
    let ops = match workload::parse(&text) {
        Ok(ops) => ops,
        Err(e) => {
            eprintln!("parse error in {}: {e}", path.display());
            return ExitCode::from(2);
        }
    };

    let cfg = store_config(&model, &store);
    if let Err(e) = cfg.validate() {
        eprintln!("{e}");
        return ExitCode::from(2);
    }
    let mut tree = match PersistentBufferTree::create(TreeConfig::new(cfg, model.seed())) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(3);
        }
    };

    let run = (|| -> Result<_, pbtree::tree::TreeError> {
        let outcome = execute_ops(&mut tree, &ops)?;
        let results = tree.flush()?;
        let violations = tree.audit()?;
        Ok((outcome, results, violations))
    })();
    let (outcome, results, violations) = match run {
        Ok(v) => v,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(3);
        }
    };

    let stats = tree.stats();
    let r_total: u64 = results.values().map(|r| r.report_blocks(tree.block_elems())).sum();
    let report = RunReport {
        config: harness::ReportConfig {
            block_elems: tree.block_elems(),
            fanout: tree.fanout(),
            ops: ops.len(),
            seed: model.seed(),
        },
        counts: outcome.counts,
        io: stats.io,
        height: tree.height(),
        node_count: stats.node_count,
        live_elements: stats.live_elements,
        current_version: stats.current_version,
        empty_buffer: tree.metrics(),
        r_total,
        structural_errors: tree
            .structural_errors()
            .iter()
            .map(|e| (e.version.0, e.kind.to_string(), e.key.0))
            .collect(),
        mismatches: 0,
        artifact: None,
    };

    if out == "csv" {
        println!("{}", RunReport::csv_header());
        println!("{}", report.csv_row());
    } else {
        let mut doc = serde_json::to_value(&report).expect("report serializes");
        let query_results: Vec<serde_json::Value> = outcome
            .submitted
            .iter()
            .map(|(id, lo, hi, v)| {
                let rs = &results[id];
                serde_json::json!({
                    "query_id": id.0,
                    "lowkey": lo.0,
                    "highkey": hi.0,
                    "version": v.0,
                    "complete": rs.is_complete(),
                    "count": rs.len(),
                    "results": rs.iter()
                        .map(|(k, i, _)| serde_json::json!({"key": k.0, "info": i.as_u64()}))
                        .collect::<Vec<_>>(),
                })
            })
            .collect();
        doc["query_results"] = serde_json::Value::Array(query_results);
        doc["audit_violations"] = serde_json::Value::Array(
            violations.iter().map(|v| serde_json::Value::String(v.to_string())).collect(),
        );
        println!("{}", serde_json::to_string_pretty(&doc).unwrap());
    }

    if !violations.is_empty() || !report.structural_errors.is_empty() {
        return ExitCode::from(3);
    }
    ExitCode::SUCCESS
}

fn parse_mix(text: &str) -> Result<Mix, String> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("bad mix component {p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    if parts.len() != 4 {
        return Err(format!("mix needs 4 comma-separated fractions, got {}", parts.len()));
    }
    let mix = Mix { insert: parts[0], update: parts[1], delete: parts[2], query: parts[3] };
    mix.validate()?;
    Ok(mix)
}

fn cmd_verify(
    ops: usize,
    seeds: u64,
    model: ModelArgs,
    mix: String,
    jobs: usize,
    inject_fault: bool,
) -> ExitCode {
    let mix = match parse_mix(&mix) {
        Ok(m) => m,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(2);
        }
    };
    let base = model.seed();
    let seed_list: Vec<u64> = (0..seeds).map(|i| base.wrapping_add(i)).collect();
    let block_size = model.block_size;
    let fanout = model.fanout;

    let reports = harness::run_many(&seed_list, jobs, |seed| {
        let mut spec = WorkloadSpec::new(ops, mix, seed);
        spec.query_span = 0.05;
        let mut report = run_equivalence(&spec, StoreConfig::memory(block_size, fanout))?;
        if inject_fault {
            // deliberate mismatch to exercise the failure artifact path
            report.mismatches += 1;
            let path = std::env::temp_dir().join(format!("pbtree-failure-{seed}.workload"));
            let (ops, _, _) = harness::generate(&spec);
            let _ = std::fs::write(&path, workload::emit(&ops));
            report.artifact = Some(path.display().to_string());
        }
        Ok(report)
    });

    let mut failed = false;
    for (seed, report) in seed_list.iter().zip(&reports) {
        match report {
            Ok(r) => {
                let ok = r.mismatches == 0 && r.structural_errors.is_empty();
                println!(
                    "seed {seed}: {} ({} queries, {} I/Os, height {}){}",
                    if ok { "ok" } else { "MISMATCH" },
                    r.counts.queries,
                    r.io.transfers(),
                    r.height,
                    r.artifact.as_deref().map(|a| format!(" artifact: {a}")).unwrap_or_default(),
                );
                failed |= !ok;
            }
            Err(e) => {
                println!("seed {seed}: ERROR {e}");
                failed = true;
            }
        }
    }
    if failed {
        ExitCode::from(1)
    } else {
        ExitCode::SUCCESS
    }
}

fn parse_grid(text: &str) -> Result<Vec<usize>, String> {
    if let Some((a, b)) = text.split_once("..") {
        let exp = |s: &str| -> Result<u32, String> {
            s.trim()
                .strip_prefix("2^")
                .ok_or_else(|| format!("expected 2^k, got {s:?}"))?
                .parse()
                .map_err(|e| format!("bad exponent in {s:?}: {e}"))
        };
        let (lo, hi) = (exp(a)?, exp(b)?);
        if lo > hi {
            return Err("empty grid".into());
        }
        Ok((lo..=hi).map(|e| 1usize << e).collect())
    } else {
        text.split(',')
            .map(|p| p.trim().parse::<usize>().map_err(|e| format!("bad grid point {p:?}: {e}")))
            .collect()
    }
}

fn cmd_scale(n_grid: String, model: ModelArgs, jobs: usize) -> ExitCode {
    let grid = match parse_grid(&n_grid) {
        Ok(g) if !g.is_empty() => g,
        Ok(_) => {
            eprintln!("empty grid");
            return ExitCode::from(2);
        }
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(2);
        }
    };
    let seed = model.seed();
    let block_size = model.block_size;
    let fanout = model.fanout;

    let cells: Vec<u64> = grid.iter().map(|n| *n as u64).collect();
    let reports = harness::run_many(&cells, jobs, |n| {
        harness::run_insert_scaling(n as usize, block_size, fanout, seed)
    });

    println!(
        "{:>10} {:>12} {:>10} {:>10} {:>12} {:>10}",
        "N", "totalIO", "ratio", "per-op", "high-water", "height"
    );
    let mut ratios = Vec::new();
    let mut per_op_ok = true;
    for (n, report) in grid.iter().zip(&reports) {
        match report {
            Ok(r) => {
                let ratio = normalized_ratio(r);
                let per_op = r.amortized_io_per_op();
                let n_blocks = *n as f64 / r.config.block_elems as f64;
                let budget = 8.0 * (n_blocks.ln() / (r.config.fanout as f64).ln())
                    / r.config.block_elems as f64;
                per_op_ok &= per_op <= budget;
                ratios.push(ratio);
                println!(
                    "{:>10} {:>12} {:>10.3} {:>10.4} {:>12} {:>10}",
                    n,
                    r.io.transfers(),
                    ratio,
                    per_op,
                    r.io.high_water_blocks,
                    r.height
                );
            }
            Err(e) => {
                println!("N={n}: ERROR {e}");
                return ExitCode::from(1);
            }
        }
    }
    let stable = if ratios.len() < 2 {
        true
    } else {
        let max = ratios.iter().cloned().fold(f64::MIN, f64::max);
        let min = ratios.iter().cloned().fold(f64::MAX, f64::min);
        max / min <= 2.0
    };
    println!(
        "ratio stability: {} | per-op envelope: {}",
        if stable { "ok (max/min <= 2)" } else { "VIOLATED" },
        if per_op_ok { "ok (<= 8·log_m(n)/B)" } else { "VIOLATED" },
    );
    if stable && per_op_ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}
