//! Workload generation, tree-vs-oracle equivalence sweeps, and measurement
//! of the quantitative claims: amortized I/O scaling, expected height, the
//! per-emptying budget, and the linear-space envelope. Measurement is
//! black-box — the harness sees the tree only through its public
//! operations, `stats()`, `height()`, `metrics()` and `audit()`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::{Info, Key, QueryId, VersionId};
use crate::oracle::{OpKind, OpLog};
use crate::store::{IoStats, StoreConfig};
use crate::tree::{EmptyMetrics, PersistentBufferTree, StructuralError, TreeConfig, TreeError};
use crate::workload::WorkloadOp;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mix {
    pub insert: f64,
    pub update: f64,
    pub delete: f64,
    pub query: f64,
}

impl Mix {
    pub const INSERT_ONLY: Mix = Mix { insert: 1.0, update: 0.0, delete: 0.0, query: 0.0 };

    pub fn validate(&self) -> Result<(), String> {
        let parts = [self.insert, self.update, self.delete, self.query];
        if parts.iter().any(|p| *p < 0.0) {
            return Err("mix fractions must be non-negative".into());
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(format!("mix fractions must sum to 1, got {sum}"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KeyDist {
    Uniform,
    Clustered,
    Sequential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VersionSel {
    Present,
    UniformPast,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub ops: usize,
    pub mix: Mix,
    pub key_dist: KeyDist,
    /// Query interval width as a fraction of the observed key span.
    pub query_span: f64,
    pub version_sel: VersionSel,
    pub seed: u64,
}

impl WorkloadSpec {
    pub fn new(ops: usize, mix: Mix, seed: u64) -> Self {
        WorkloadSpec {
            ops,
            mix,
            key_dist: KeyDist::Uniform,
            query_span: 0.05,
            version_sel: VersionSel::UniformPast,
            seed,
        }
    }
}

/// Deterministically expands a spec into an oracle-legal operation list
/// and the oracle log of its update-class prefix-effects. Updates and
/// deletes target live keys by construction; a draw that cannot be
/// honoured (nothing live yet, no version to query) degrades to an insert
/// and is counted as deferred.
pub fn generate(spec: &WorkloadSpec) -> (Vec<WorkloadOp>, OpLog, u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut log = OpLog::new();
    let mut ops = Vec::with_capacity(spec.ops);
    let mut live: Vec<Key> = Vec::new();
    let mut live_pos: std::collections::HashMap<Key, usize> = Default::default();
    let mut used: std::collections::HashSet<Key> = Default::default();
    let mut deferred = 0u64;
    let mut next_seq = 1u64;
    let mut key_min = u64::MAX;
    let mut key_max = 0u64;
    let clusters: Vec<u64> = (0..16).map(|_| rng.gen::<u64>() >> 20).collect();

    let mut fresh_key = |rng: &mut ChaCha8Rng, used: &mut std::collections::HashSet<Key>| -> Key {
        loop {
            let k = match spec.key_dist {
                KeyDist::Uniform => Key(rng.gen::<u64>() >> 16),
                KeyDist::Clustered => {
                    let c = clusters[rng.gen_range(0..clusters.len())];
                    Key(c + rng.gen_range(0..1u64 << 16))
                }
                KeyDist::Sequential => {
                    let k = Key(next_seq);
                    next_seq += 1;
                    k
                }
            };
            if used.insert(k) {
                return k;
            }
        }
    };

    for i in 0..spec.ops {
        let roll: f64 = rng.gen();
        let mut choice = if roll < spec.mix.insert {
            0
        } else if roll < spec.mix.insert + spec.mix.update {
            1
        } else if roll < spec.mix.insert + spec.mix.update + spec.mix.delete {
            2
        } else {
            3
        };
        if (choice == 1 || choice == 2) && live.is_empty() {
            deferred += 1;
            choice = 0;
        }
        let info = Info::from_u64(i as u64 + 1);
        match choice {
            0 => {
                let key = fresh_key(&mut rng, &mut used);
                key_min = key_min.min(key.0);
                key_max = key_max.max(key.0);
                live_pos.insert(key, live.len());
                live.push(key);
                log.apply(OpKind::Insert, key, info).expect("generated insert must be legal");
                ops.push(WorkloadOp::Insert { key, info });
            }
            1 => {
                let key = live[rng.gen_range(0..live.len())];
                log.apply(OpKind::Update, key, info).expect("generated update must be legal");
                ops.push(WorkloadOp::Update { key, info });
            }
            2 => {
                let idx = rng.gen_range(0..live.len());
                let key = live.swap_remove(idx);
                live_pos.remove(&key);
                if let Some(moved) = live.get(idx) {
                    live_pos.insert(*moved, idx);
                }
                log.apply(OpKind::Delete, key, info).expect("generated delete must be legal");
                ops.push(WorkloadOp::Delete { key });
            }
            _ => {
                if log.is_empty() {
                    // no versions yet: query the vacuous pre-update state
                    ops.push(WorkloadOp::Query {
                        lowkey: Key(0),
                        highkey: Key(u64::MAX >> 16),
                        version: VersionId(0),
                    });
                    continue;
                }
                let span = key_max.saturating_sub(key_min);
                let width = ((span as f64) * spec.query_span) as u64;
                let lo = key_min + rng.gen_range(0..=span.max(1));
                let hi = lo.saturating_add(width.max(1));
                let version = match spec.version_sel {
                    VersionSel::Present => log.current_version(),
                    VersionSel::UniformPast => VersionId(rng.gen_range(1..=log.len() as u64)),
                };
                ops.push(WorkloadOp::Query { lowkey: Key(lo), highkey: Key(hi), version });
            }
        }
    }
    (ops, log, deferred)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OpCounts {
    pub inserts: u64,
    pub updates: u64,
    pub deletes: u64,
    pub queries: u64,
    pub deferred: u64,
}

impl OpCounts {
    pub fn update_class(&self) -> u64 {
        self.inserts + self.updates + self.deletes
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportConfig {
    pub block_elems: usize,
    pub fanout: usize,
    pub ops: usize,
    pub seed: u64,
}

/// Everything one measured run produces. Amortized figures are recomputed
/// from totals on demand, never stored.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ReportConfig,
    pub counts: OpCounts,
    pub io: IoStats,
    pub height: u32,
    pub node_count: u64,
    pub live_elements: u64,
    pub current_version: u64,
    pub empty_buffer: EmptyMetrics,
    /// Blocks of reported elements, summed per query.
    pub r_total: u64,
    pub structural_errors: Vec<(u64, String, u64)>,
    pub mismatches: u64,
    pub artifact: Option<String>,
}

impl RunReport {
    pub fn amortized_io_per_op(&self) -> f64 {
        let n = self.counts.update_class() + self.counts.queries;
        if n == 0 {
            0.0
        } else {
            self.io.transfers() as f64 / n as f64
        }
    }

    /// Structural (non-reporting) I/O per update-class operation.
    pub fn update_class_io_per_op(&self) -> f64 {
        let n = self.counts.update_class();
        if n == 0 {
            0.0
        } else {
            (self.io.transfers() - self.empty_buffer.report_reads) as f64 / n as f64
        }
    }

    pub fn csv_header() -> &'static str {
        "seed,ops,block_elems,fanout,reads,writes,allocs,frees,high_water_blocks,height,\
         node_count,live_elements,empties,max_empty_io,r_total,report_reads,mismatches,errors"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.config.seed,
            self.config.ops,
            self.config.block_elems,
            self.config.fanout,
            self.io.reads,
            self.io.writes,
            self.io.allocs,
            self.io.frees,
            self.io.high_water_blocks,
            self.height,
            self.node_count,
            self.live_elements,
            self.empty_buffer.invocations,
            self.empty_buffer.max_io_excl,
            self.r_total,
            self.empty_buffer.report_reads,
            self.mismatches,
            self.structural_errors.len(),
        )
    }
}

pub struct ExecOutcome {
    pub submitted: Vec<(QueryId, Key, Key, VersionId)>,
    pub counts: OpCounts,
}

/// Feeds a parsed workload through the tree. Query tickets are collected
/// for the post-flush comparison.
pub fn execute_ops(
    tree: &mut PersistentBufferTree,
    ops: &[WorkloadOp],
) -> Result<ExecOutcome, TreeError> {
    let mut counts = OpCounts { inserts: 0, updates: 0, deletes: 0, queries: 0, deferred: 0 };
    let mut submitted = Vec::new();
    for op in ops {
        match op {
            WorkloadOp::Insert { key, info } => {
                tree.insert(*key, *info)?;
                counts.inserts += 1;
            }
            WorkloadOp::Update { key, info } => {
                tree.update(*key, *info)?;
                counts.updates += 1;
            }
            WorkloadOp::Delete { key } => {
                tree.delete(*key)?;
                counts.deletes += 1;
            }
            WorkloadOp::Query { lowkey, highkey, version } => {
                let id = tree.range_search(*lowkey, *highkey, *version)?;
                submitted.push((id, *lowkey, *highkey, *version));
                counts.queries += 1;
            }
        }
    }
    Ok(ExecOutcome { submitted, counts })
}

fn error_rows(errors: &[StructuralError]) -> Vec<(u64, String, u64)> {
    errors.iter().map(|e| (e.version.0, e.kind.to_string(), e.key.0)).collect()
}

/// Runs one seeded workload on a fresh tree, flushes, and compares every
/// query's result set against the oracle. Any mismatch is dumped as a
/// replayable workload file.
pub fn run_equivalence(spec: &WorkloadSpec, store: StoreConfig) -> Result<RunReport, TreeError> {
    let (ops, log, deferred) = generate(spec);
    let tree_cfg = TreeConfig::new(store, spec.seed ^ 0x9e3779b97f4a7c15);
    let mut tree = PersistentBufferTree::create(tree_cfg)?;
    let outcome = execute_ops(&mut tree, &ops)?;
    let results = tree.flush()?;

    let queries: Vec<(Key, Key, VersionId)> =
        outcome.submitted.iter().map(|(_, lo, hi, v)| (*lo, *hi, *v)).collect();
    let expected = log.range_batch(&queries);

    let mut mismatches = 0u64;
    for (i, (id, ..)) in outcome.submitted.iter().enumerate() {
        let got = results.get(id).expect("flush returns every submitted query");
        assert!(got.is_complete());
        let got_pairs: std::collections::BTreeMap<Key, Info> = got.key_info();
        if got_pairs != expected[i] {
            mismatches += 1;
        }
    }

    let mut artifact = None;
    if mismatches > 0 {
        let path = std::env::temp_dir().join(format!("pbtree-failure-{}.workload", spec.seed));
        let _ = std::fs::write(&path, crate::workload::emit(&ops));
        artifact = Some(path.display().to_string());
    }

    let stats = tree.stats();
    let r_total = results.values().map(|r| r.report_blocks(tree.block_elems())).sum();
    let mut counts = outcome.counts;
    counts.deferred = deferred;
    Ok(RunReport {
        config: ReportConfig {
            block_elems: tree.block_elems(),
            fanout: tree.fanout(),
            ops: spec.ops,
            seed: spec.seed,
        },
        counts,
        io: stats.io,
        height: tree.height(),
        node_count: stats.node_count,
        live_elements: stats.live_elements,
        current_version: stats.current_version,
        empty_buffer: tree.metrics(),
        r_total,
        structural_errors: error_rows(&tree.structural_errors()),
        mismatches,
        artifact,
    })
}

/// One cell of a scaling run: insert-only workload of `n_ops` operations.
pub fn run_insert_scaling(
    n_ops: usize,
    block_elems: usize,
    fanout: usize,
    seed: u64,
) -> Result<RunReport, TreeError> {
    let spec = WorkloadSpec::new(n_ops, Mix::INSERT_ONLY, seed);
    run_equivalence(&spec, StoreConfig::memory(block_elems, fanout))
}

/// Normalized cost `totalIO / (n · log_m n)` with `n = N/B`.
pub fn normalized_ratio(report: &RunReport) -> f64 {
    let n = report.counts.update_class() as f64 / report.config.block_elems as f64;
    let m = report.config.fanout as f64;
    let log_m_n = if n > 1.0 { n.ln() / m.ln() } else { 1.0 };
    report.io.transfers() as f64 / (n * log_m_n)
}

/// Runs every seed cell, optionally across threads. Results keep seed
/// order.
pub fn run_many<F>(seeds: &[u64], jobs: usize, cell: F) -> Vec<Result<RunReport, String>>
where
    F: Fn(u64) -> Result<RunReport, TreeError> + Sync,
{
    if jobs <= 1 || seeds.len() <= 1 {
        return seeds.iter().map(|s| cell(*s).map_err(|e| e.to_string())).collect();
    }
    let mut out: Vec<Option<Result<RunReport, String>>> = (0..seeds.len()).map(|_| None).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let cell_ref = &cell;
    std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for _ in 0..jobs.min(seeds.len()) {
            handles.push(scope.spawn(|| {
                let mut mine = Vec::new();
                loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if i >= seeds.len() {
                        return mine;
                    }
                    mine.push((i, cell_ref(seeds[i]).map_err(|e| e.to_string())));
                }
            }));
        }
        for handle in handles {
            for (i, res) in handle.join().expect("harness worker panicked") {
                out[i] = Some(res);
            }
        }
    });
    out.into_iter().map(|r| r.expect("every cell ran")).collect()
}

/// Builds a workload carrying deliberately illegal operations, plus the
/// set of (version, kind, key) tuples the oracle rejects. Tree versions
/// count every submitted update-class op, so the tuple identifies the
/// offending op in both worlds.
pub fn generate_with_faults(
    spec: &WorkloadSpec,
    faults: usize,
) -> (Vec<WorkloadOp>, Vec<StructuralError>) {
    let (mut ops, _log, _) = generate(spec);
    ops.retain(|op| !matches!(op, WorkloadOp::Query { .. }));
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0xabcdef);

    for _ in 0..faults {
        let pos = rng.gen_range(0..=ops.len());
        let kind = rng.gen_range(0..4u8);
        let op = match kind {
            // keys far outside the generated keyspace are never live
            0 => WorkloadOp::Update { key: Key(u64::MAX - rng.gen_range(0..1000)), info: Info::from_u64(0) },
            1 => WorkloadOp::Delete { key: Key(u64::MAX - rng.gen_range(0..1000)) },
            2 => {
                // duplicate insert of a key inserted earlier (and, with
                // luck, still live); fall back to a missing-key update
                match ops[..pos].iter().rev().find_map(|op| match op {
                    WorkloadOp::Insert { key, .. } => Some(*key),
                    _ => None,
                }) {
                    Some(key) => WorkloadOp::Insert { key, info: Info::from_u64(1) },
                    None => WorkloadOp::Update { key: Key(u64::MAX - 1), info: Info::from_u64(0) },
                }
            }
            _ => {
                // re-insert after an explicit delete
                match ops[..pos].iter().find_map(|op| match op {
                    WorkloadOp::Delete { key } => Some(*key),
                    _ => None,
                }) {
                    Some(key) => WorkloadOp::Insert { key, info: Info::from_u64(2) },
                    None => WorkloadOp::Delete { key: Key(u64::MAX - 2) },
                }
            }
        };
        ops.insert(pos, op);
    }

    // The oracle decides which ops are illegal; version numbers count all
    // submitted update-class ops exactly as the tree will.
    let mut log = OpLog::new();
    let mut expected = Vec::new();
    let mut version = 0u64;
    for op in &ops {
        version += 1;
        let result = match op {
            WorkloadOp::Insert { key, info } => log.apply(OpKind::Insert, *key, *info),
            WorkloadOp::Update { key, info } => log.apply(OpKind::Update, *key, *info),
            WorkloadOp::Delete { key } => log.apply(OpKind::Delete, *key, Info::from_u64(0)),
            WorkloadOp::Query { .. } => unreachable!(),
        };
        if let Err(rej) = result {
            expected.push(StructuralError {
                version: VersionId(version),
                kind: rej.kind,
                key: rej.key,
            });
        }
    }
    (ops, expected)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_spec_generates_nothing() {
        let spec = WorkloadSpec::new(0, Mix::INSERT_ONLY, 1);
        let (ops, log, deferred) = generate(&spec);
        assert!(ops.is_empty());
        assert!(log.is_empty());
        assert_eq!(deferred, 0);
    }

    #[test]
    fn same_seed_same_workload() {
        let mix = Mix { insert: 0.5, update: 0.2, delete: 0.1, query: 0.2 };
        let spec = WorkloadSpec::new(500, mix, 77);
        let (a, _, _) = generate(&spec);
        let (b, _, _) = generate(&spec);
        assert_eq!(a, b);
    }

    #[test]
    fn insert_only_mix_yields_distinct_keys() {
        let spec = WorkloadSpec::new(100, Mix::INSERT_ONLY, 3);
        let (ops, log, _) = generate(&spec);
        assert_eq!(ops.len(), 100);
        let mut keys = std::collections::HashSet::new();
        for op in &ops {
            match op {
                WorkloadOp::Insert { key, .. } => assert!(keys.insert(*key)),
                other => panic!("unexpected op {other:?}"),
            }
        }
        assert_eq!(log.len(), 100);
    }

    #[test]
    fn generated_workloads_are_oracle_legal() {
        for seed in 0..5 {
            let mix = Mix { insert: 0.4, update: 0.3, delete: 0.2, query: 0.1 };
            let spec = WorkloadSpec::new(400, mix, seed);
            // generate() panics internally if it ever produces an illegal op
            let (ops, log, _) = generate(&spec);
            assert_eq!(
                log.len() as u64,
                ops.iter().filter(|o| !matches!(o, WorkloadOp::Query { .. })).count() as u64
            );
        }
    }

    #[test]
    fn mix_validation() {
        assert!(Mix { insert: 0.5, update: 0.5, delete: 0.0, query: 0.0 }.validate().is_ok());
        assert!(Mix { insert: 0.5, update: 0.2, delete: 0.0, query: 0.0 }.validate().is_err());
        assert!(Mix { insert: 1.5, update: -0.5, delete: 0.0, query: 0.0 }.validate().is_err());
    }

    #[test]
    fn fault_generator_produces_rejections() {
        let mix = Mix { insert: 0.6, update: 0.2, delete: 0.2, query: 0.0 };
        let spec = WorkloadSpec::new(120, mix, 9);
        let (ops, expected) = generate_with_faults(&spec, 6);
        assert!(ops.len() >= 120);
        assert!(!expected.is_empty());
        assert!(expected.len() <= 6 + 1);
    }
}
