//! The persistent buffer tree engine.
//!
//! Update-class operations (insert, update, delete) each create a new
//! version and enter an in-memory staging block; every B of them are
//! appended as one block to the root buffer. Range queries travel the same
//! way. When a buffer overflows, the buffer-emptying process (see
//! [`empty`]) resolves same-key chains, answers co-resident queries,
//! retains the smallest-priority half of the buffer and pushes the rest
//! one level down by key. Because everything is lazy, query results are
//! only guaranteed complete after [`PersistentBufferTree::flush`], which
//! forces every unresolved element and pending query to its destination
//! and surfaces precondition violations (updates of missing keys,
//! re-inserted deleted keys, ...) as structural errors instead of silently
//! merging them.
//!
//! Key invariants between public operations:
//! - heap order: resolved elements in a node have strictly smaller
//!   priorities than resolved elements in its descendants (post-flush);
//! - search order: an element's key lies in its node's inherited splitter
//!   range;
//! - lifespans: per key, chained half-open intervals that tile the key's
//!   history, verified against the oracle by the test suites.

mod audit;
mod empty;
mod node;

pub use audit::Violation;
pub use node::{BlockSeg, Node, NodeId};

use std::collections::BTreeMap;

use crate::model::{
    element_order_key, encode_block, Element, ElementKind, Entry, Info, Key, Lifespan,
    PriorityGen, QueryElement, QueryId, QueryScope, RejectKind, VersionId,
};
use crate::store::{BlockId, BlockStore, HeaderMeta, IoStats, StoreConfig, StoreError, NULL_BLOCK};

pub use empty::resolve_chains;
use empty::EmptyMode;

#[derive(Debug)]
pub enum TreeError {
    Store(StoreError),
    VersionOutOfRange { version: VersionId, current: VersionId },
    QueriesPending,
    NotFileBacked,
    MemoryBudget { decoded: u64, budget: u64 },
    Structural(StructuralError),
    Corrupt(String),
}

impl std::fmt::Display for TreeError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TreeError::Store(e) => write!(f, "{e}"),
            TreeError::VersionOutOfRange { version, current } => {
                write!(f, "query version {} out of range 1..={}", version.0, current.0)
            }
            TreeError::QueriesPending => write!(f, "cannot save with unfinished queries; flush first"),
            TreeError::NotFileBacked => write!(f, "save requires a file-backed store"),
            TreeError::MemoryBudget { decoded, budget } => {
                write!(f, "emptying decoded {decoded} elements, over the {budget} budget")
            }
            TreeError::Structural(e) => write!(f, "structural error: {e}"),
            TreeError::Corrupt(msg) => write!(f, "corrupt tree state: {msg}"),
        }
    }
}

impl std::error::Error for TreeError {}

impl From<StoreError> for TreeError {
    fn from(e: StoreError) -> Self {
        TreeError::Store(e)
    }
}

pub type TreeResult<T> = Result<T, TreeError>;

/// A lazily detected workload-legality violation, e.g. a delete of a key
/// that never existed. `version` identifies the offending operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct StructuralError {
    pub version: VersionId,
    pub kind: RejectKind,
    pub key: Key,
}

impl std::fmt::Display for StructuralError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "op {} on key {}: {}", self.version.0, self.key, self.kind)
    }
}

/// Accumulated answer of one range query.
#[derive(Debug, Clone)]
pub struct ResultSet {
    pub query: QueryElement,
    entries: BTreeMap<Key, (Info, Lifespan)>,
    complete: bool,
    pending_copies: u32,
}

impl ResultSet {
    fn new(query: QueryElement) -> Self {
        ResultSet { query, entries: BTreeMap::new(), complete: false, pending_copies: 1 }
    }

    pub fn is_complete(&self) -> bool {
        self.complete
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Key, Info, Lifespan)> + '_ {
        self.entries.iter().map(|(k, (i, l))| (*k, *i, *l))
    }

    /// The reported set as `(key, info)` pairs, the form all oracle
    /// comparisons use.
    pub fn key_info(&self) -> BTreeMap<Key, Info> {
        self.entries.iter().map(|(k, (i, _))| (*k, *i)).collect()
    }

    /// Blocks of reported elements, the query's share of the output term.
    pub fn report_blocks(&self, block_elems: usize) -> u64 {
        (self.entries.len() as u64).div_ceil(block_elems as u64)
    }
}

/// Instrumentation of the buffer-emptying process.
#[derive(Debug, Clone, Copy, Default, serde::Serialize, serde::Deserialize)]
pub struct EmptyMetrics {
    pub invocations: u64,
    pub flush_invocations: u64,
    /// Largest block-transfer count of a single emptying, excluding
    /// recursive child emptyings and subtree reporting.
    pub max_io_excl: u64,
    /// Smallest number of blocks that arrived at a node between two of its
    /// consecutive non-flush emptyings.
    pub min_arrivals: Option<u64>,
    /// Non-flush emptyings of an internal node whose retained element
    /// count was not exactly min(available, ceil(m/2)·B).
    pub occupancy_violations: u64,
    /// Peak number of elements decoded at once by a single emptying.
    pub max_decoded: u64,
    /// Block reads spent reporting fully covered subtrees (the output
    /// term, tracked apart from the structural emptying cost).
    pub report_reads: u64,
}

#[derive(Debug, Clone)]
pub struct TreeConfig {
    pub store: StoreConfig,
    pub seed: u64,
    /// Enables in-memory budget assertions and abort-on-structural-error.
    pub strict_audit: bool,
}

impl TreeConfig {
    pub fn new(store: StoreConfig, seed: u64) -> Self {
        TreeConfig { store, seed, strict_audit: false }
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct TreeStats {
    pub io: IoStats,
    pub node_count: u64,
    pub live_elements: u64,
    pub current_version: u64,
}

pub struct PersistentBufferTree {
    pub(crate) store: BlockStore,
    pub(crate) nodes: Vec<Node>,
    pub(crate) root: NodeId,
    current_version: u64,
    staging: Vec<Entry>,
    prio: PriorityGen,
    seed: u64,
    pub(crate) results: BTreeMap<QueryId, ResultSet>,
    next_query_id: u64,
    errors: std::collections::BTreeSet<StructuralError>,
    live_elements: i64,
    pub(crate) metrics: EmptyMetrics,
    pub(crate) strict: bool,
    /// False once any operation ran after the last flush; lets a repeat
    /// flush be a complete no-op.
    flushed_clean: bool,
    /// Update-class operations since the last chain verification pass.
    updates_since_repair: u64,
}

impl PersistentBufferTree {
    pub fn create(cfg: TreeConfig) -> TreeResult<Self> {
        let store = BlockStore::create(cfg.store)?;
        Ok(PersistentBufferTree {
            store,
            nodes: vec![Node::new()],
            root: NodeId(0),
            current_version: 0,
            staging: Vec::new(),
            prio: PriorityGen::new(cfg.seed),
            seed: cfg.seed,
            results: BTreeMap::new(),
            next_query_id: 0,
            errors: Default::default(),
            live_elements: 0,
            metrics: EmptyMetrics::default(),
            strict: cfg.strict_audit,
            flushed_clean: true,
            updates_since_repair: 0,
        })
    }

    pub fn block_elems(&self) -> usize {
        self.store.block_elems()
    }

    pub fn fanout(&self) -> usize {
        self.store.fanout()
    }

    pub fn current_version(&self) -> VersionId {
        VersionId(self.current_version)
    }

    pub fn store(&self) -> &BlockStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut BlockStore {
        &mut self.store
    }

    pub fn metrics(&self) -> EmptyMetrics {
        self.metrics
    }

    pub fn structural_errors(&self) -> Vec<StructuralError> {
        self.errors.iter().copied().collect()
    }

    pub fn stats(&self) -> TreeStats {
        TreeStats {
            io: self.store.snapshot_stats(),
            node_count: self.nodes.len() as u64,
            live_elements: self.live_elements.max(0) as u64,
            current_version: self.current_version,
        }
    }

    /// Longest root-to-node path, in edges.
    pub fn height(&self) -> u32 {
        fn depth(nodes: &[Node], u: NodeId) -> u32 {
            nodes[u.0 as usize]
                .children
                .iter()
                .map(|c| 1 + depth(nodes, *c))
                .max()
                .unwrap_or(0)
        }
        depth(&self.nodes, self.root)
    }

    /// Inserts a new element, creating a new version. The key must not be
    /// live; a violation is detected lazily during resolution.
    pub fn insert(&mut self, key: Key, info: Info) -> TreeResult<VersionId> {
        self.current_version += 1;
        let v = VersionId(self.current_version);
        let element = Element {
            key,
            lifespan: Lifespan::open_from(v),
            priority: self.prio.next_priority(),
            info,
            kind: ElementKind::Insert,
            resolved: true,
        };
        self.live_elements += 1;
        self.note_update_class();
        self.stage(Entry::Element(element))?;
        Ok(v)
    }

    /// Replaces the info of the live element with this key, creating a new
    /// version. The element travels unresolved until buffer emptying links
    /// it into the key's chain.
    pub fn update(&mut self, key: Key, info: Info) -> TreeResult<VersionId> {
        self.current_version += 1;
        let v = VersionId(self.current_version);
        let element = Element {
            key,
            lifespan: Lifespan::open_from(v),
            priority: self.prio.next_priority(),
            info,
            kind: ElementKind::Update,
            resolved: false,
        };
        self.note_update_class();
        self.stage(Entry::Element(element))?;
        Ok(v)
    }

    /// Deletes the live element with this key, creating a new version. A
    /// deleted key is never reused. The delete travels as a marker with
    /// `in_version == 0` carrying the deletion version.
    pub fn delete(&mut self, key: Key) -> TreeResult<VersionId> {
        self.current_version += 1;
        let v = VersionId(self.current_version);
        let element = Element {
            key,
            lifespan: Lifespan { in_version: VersionId(0), del_version: v },
            priority: self.prio.next_priority(),
            info: Info([0u8; crate::model::INFO_BYTES]),
            kind: ElementKind::Delete,
            resolved: false,
        };
        self.live_elements -= 1;
        self.note_update_class();
        self.stage(Entry::Element(element))?;
        Ok(v)
    }

    /// Submits a batched range query against `version`. Results accumulate
    /// lazily; completeness is guaranteed only after [`Self::flush`]. Does
    /// not create a version. Version 0 (before any update) is accepted and
    /// vacuously answers empty; anything above the present version is
    /// rejected outright.
    pub fn range_search(
        &mut self,
        lowkey: Key,
        highkey: Key,
        version: VersionId,
    ) -> TreeResult<QueryId> {
        if version.0 > self.current_version {
            return Err(TreeError::VersionOutOfRange {
                version,
                current: VersionId(self.current_version),
            });
        }
        assert!(lowkey <= highkey, "inverted query range");
        let id = QueryId(self.next_query_id);
        self.next_query_id += 1;
        let q = QueryElement { id, lowkey, highkey, version };
        self.results.insert(id, ResultSet::new(q));
        self.flushed_clean = false;
        self.stage(Entry::Query(q, QueryScope::Full))?;
        Ok(id)
    }

    pub fn result(&self, id: QueryId) -> Option<&ResultSet> {
        self.results.get(&id)
    }

    /// Forces every buffer with unresolved elements, pending queries, an
    /// overflow, or a heap-order debt to empty, top-down, then verifies
    /// per-key chains against update legality. Afterwards all result sets
    /// are complete and no unresolved element remains; illegal operations
    /// have been surfaced as structural errors and excised.
    pub fn flush(&mut self) -> TreeResult<BTreeMap<QueryId, ResultSet>> {
        if self.flushed_clean {
            return Ok(self.results.clone());
        }
        self.push_staging()?;

        // Heap-order thresholds: for each node, the smallest resolved
        // priority anywhere strictly below it. Appends performed during
        // the sweep only ever add priorities at or above the threshold of
        // every node they pass, so the memo stays valid.
        let min_below = self.compute_min_below();
        self.flush_walk(self.root, &min_below)?;

        if self.updates_since_repair > 0 {
            self.verify_chains()?;
            self.updates_since_repair = 0;
        }

        let dangling: u64 = self.nodes.iter().map(|n| n.unresolved).sum();
        assert_eq!(dangling, 0, "flush left unresolved elements behind");
        for rs in self.results.values_mut() {
            assert_eq!(rs.pending_copies, 0, "flush left a travelling query behind");
            rs.complete = true;
        }
        self.flushed_clean = true;
        Ok(self.results.clone())
    }

    fn flush_walk(&mut self, u: NodeId, min_below: &[u64]) -> TreeResult<()> {
        let node = &self.nodes[u.0 as usize];
        let over_full = self.is_over_full(u);
        let trigger_active = over_full && node.arrivals > 0;
        let heap_debt = !node.is_childless()
            && node.resolved_max_pri >= min_below[u.0 as usize]
            && node.entry_count > 0;
        let need = node.unresolved > 0 || node.queries > 0 || trigger_active || heap_debt;
        if need {
            self.empty_buffer(
                u,
                EmptyMode::Flush { min_below: min_below[u.0 as usize], trigger_active },
            )?;
        }
        let children = self.nodes[u.0 as usize].children.clone();
        for child in children {
            self.flush_walk(child, min_below)?;
        }
        Ok(())
    }

    /// For every node, the minimum resolved priority over all buffers
    /// strictly below it (`u64::MAX` if the subtree below is empty).
    fn compute_min_below(&self) -> Vec<u64> {
        fn subtree_min(nodes: &[Node], u: NodeId, out: &mut [u64]) -> u64 {
            let node = &nodes[u.0 as usize];
            let mut below = u64::MAX;
            for child in &node.children {
                below = below.min(subtree_min(nodes, *child, out));
            }
            out[u.0 as usize] = below;
            below.min(node.resolved_min_pri)
        }
        let mut out = vec![u64::MAX; self.nodes.len()];
        subtree_min(&self.nodes, self.root, &mut out);
        out
    }

    fn note_update_class(&mut self) {
        self.flushed_clean = false;
        self.updates_since_repair += 1;
    }

    fn stage(&mut self, entry: Entry) -> TreeResult<()> {
        self.staging.push(entry);
        if self.staging.len() == self.block_elems() {
            self.push_staging()?;
        }
        Ok(())
    }

    /// Moves the staging buffer (possibly a short block) into the root and
    /// runs the root's emptying if it overflowed.
    fn push_staging(&mut self) -> TreeResult<()> {
        if self.staging.is_empty() {
            return Ok(());
        }
        let entries = std::mem::take(&mut self.staging);
        self.append_entries(self.root, &entries)?;
        if self.trigger(self.root) {
            self.empty_buffer(self.root, EmptyMode::Normal)?;
        }
        Ok(())
    }

    fn is_over_full(&self, u: NodeId) -> bool {
        let node = &self.nodes[u.0 as usize];
        let m = self.fanout();
        node.logical_blocks(self.block_elems()) > m || node.physical_blocks() >= 2 * m
    }

    /// Emptying trigger: the buffer is over-full and at least ceil(m/2)
    /// blocks arrived since the node's last emptying. The arrival gate
    /// guarantees the spacing that the amortization argument charges
    /// against, and keeps a degenerate buffer (one that cannot split) from
    /// re-compacting on every append.
    pub(crate) fn trigger(&self, u: NodeId) -> bool {
        let node = &self.nodes[u.0 as usize];
        self.is_over_full(u) && node.arrivals >= (self.fanout() as u64).div_ceil(2)
    }

    pub(crate) fn append_entries(&mut self, u: NodeId, entries: &[Entry]) -> TreeResult<usize> {
        if entries.is_empty() {
            return Ok(0);
        }
        let b = self.block_elems();
        let mut blocks = 0;
        for chunk in entries.chunks(b) {
            let id = self.store.alloc()?;
            let payload = encode_block(chunk, b);
            self.store.write_block(id, &payload)?;
            self.nodes[u.0 as usize].blocks.push(BlockSeg { block: id, len: chunk.len() as u32 });
            blocks += 1;
        }
        self.nodes[u.0 as usize].note_arrival(entries, blocks);
        Ok(blocks)
    }

    pub(crate) fn record_error(&mut self, err: StructuralError) -> TreeResult<()> {
        self.errors.insert(err);
        if self.strict {
            return Err(TreeError::Structural(err));
        }
        Ok(())
    }

    pub(crate) fn record_result(&mut self, id: QueryId, key: Key, info: Info, span: Lifespan) {
        if let Some(rs) = self.results.get_mut(&id) {
            rs.entries.insert(key, (info, span));
        }
    }

    pub(crate) fn query_copy_split(&mut self, id: QueryId) {
        if let Some(rs) = self.results.get_mut(&id) {
            rs.pending_copies += 1;
        }
    }

    pub(crate) fn query_copy_done(&mut self, id: QueryId) {
        if let Some(rs) = self.results.get_mut(&id) {
            rs.pending_copies -= 1;
        }
    }

    pub(crate) fn adjust_live(&mut self, delta: i64) {
        self.live_elements += delta;
    }

    // ── Chain verification ───────────────────────────────────────────────

    /// Reads every element in the tree, replays each key's operation
    /// history under update legality, records a structural error for every
    /// operation the replay rejects, removes the rejected elements, and
    /// repairs any lifespan links distorted by them. On a legal history
    /// this is a read-only pass that changes nothing.
    fn verify_chains(&mut self) -> TreeResult<()> {
        // (node, slot order, element)
        let mut per_node: Vec<Vec<Element>> = Vec::with_capacity(self.nodes.len());
        let mut per_key: BTreeMap<Key, Vec<(u32, u32)>> = BTreeMap::new();
        for idx in 0..self.nodes.len() {
            let segs = self.nodes[idx].blocks.clone();
            let mut elems = Vec::with_capacity(self.nodes[idx].entry_count as usize);
            for seg in &segs {
                let payload = self.store.read_block(seg.block)?;
                for entry in crate::model::decode_block(&payload, seg.len as usize) {
                    match entry {
                        Entry::Element(e) => {
                            debug_assert!(!e.is_delete_marker(), "marker survived flush");
                            elems.push(e);
                        }
                        Entry::Query(..) => unreachable!("query survived flush"),
                    }
                }
            }
            for (slot, e) in elems.iter().enumerate() {
                per_key.entry(e.key).or_default().push((idx as u32, slot as u32));
            }
            per_node.push(elems);
        }

        #[derive(Clone, Copy)]
        enum ReplayOp {
            Element(u32, u32),
            InferredDelete,
        }

        let mut dirty: Vec<bool> = vec![false; self.nodes.len()];
        let mut removed: Vec<Vec<bool>> =
            per_node.iter().map(|v| vec![false; v.len()]).collect();
        let mut live_total: i64 = 0;
        let mut new_errors: Vec<StructuralError> = Vec::new();

        for (_key, locs) in per_key.iter() {
            let mut ops: Vec<(u64, ReplayOp)> = Vec::with_capacity(locs.len() + 1);
            let ins: std::collections::HashSet<u64> =
                locs.iter().map(|(n, s)| per_node[*n as usize][*s as usize].lifespan.in_version.0).collect();
            for (n, s) in locs {
                let e = &per_node[*n as usize][*s as usize];
                ops.push((e.lifespan.in_version.0, ReplayOp::Element(*n, *s)));
                let dv = e.lifespan.del_version.0;
                if dv != u64::MAX && !ins.contains(&dv) {
                    ops.push((dv, ReplayOp::InferredDelete));
                }
            }
            ops.sort_by_key(|(v, _)| *v);
            ops.dedup_by_key(|(v, _)| *v);

            let mut live = false;
            let mut deleted = false;
            let mut accepted: Vec<(u64, Option<(u32, u32)>)> = Vec::new();
            for (version, op) in ops {
                match op {
                    ReplayOp::Element(n, s) => {
                        let e = per_node[n as usize][s as usize];
                        let reject = match e.kind {
                            ElementKind::Insert if live => Some(RejectKind::InsertDuplicate),
                            ElementKind::Insert if deleted => Some(RejectKind::InsertAfterDelete),
                            ElementKind::Update if !live => Some(RejectKind::UpdateNonLive),
                            _ => None,
                        };
                        if let Some(kind) = reject {
                            new_errors.push(StructuralError {
                                version: VersionId(version),
                                kind,
                                key: e.key,
                            });
                            removed[n as usize][s as usize] = true;
                            dirty[n as usize] = true;
                        } else {
                            live = true;
                            accepted.push((version, Some((n, s))));
                        }
                    }
                    ReplayOp::InferredDelete => {
                        if live {
                            live = false;
                            deleted = true;
                            accepted.push((version, None));
                        } else {
                            new_errors.push(StructuralError {
                                version: VersionId(version),
                                kind: RejectKind::DeleteNonLive,
                                key: *_key,
                            });
                        }
                    }
                }
            }
            if live {
                live_total += 1;
            }
            // Correct lifespans: each accepted element runs until the next
            // accepted operation on the key.
            for i in 0..accepted.len() {
                let (_, loc) = accepted[i];
                let Some((n, s)) = loc else { continue };
                let want_del = accepted.get(i + 1).map(|(v, _)| *v).unwrap_or(u64::MAX);
                let e = &mut per_node[n as usize][s as usize];
                if e.lifespan.del_version.0 != want_del {
                    e.lifespan.del_version = VersionId(want_del);
                    dirty[n as usize] = true;
                }
            }
        }

        for err in new_errors {
            // A violation may already have been recorded when resolution
            // first met it; the set makes re-detection idempotent.
            self.record_error(err)?;
        }
        self.live_elements = live_total;

        for idx in 0..self.nodes.len() {
            if !dirty[idx] {
                continue;
            }
            let survivors: Vec<Entry> = per_node[idx]
                .iter()
                .zip(&removed[idx])
                .filter(|(_, gone)| !**gone)
                .map(|(e, _)| Entry::Element(*e))
                .collect();
            self.rewrite_node(NodeId(idx as u32), &survivors)?;
        }
        Ok(())
    }

    /// Replaces a node's buffer contents wholesale (frees the old blocks,
    /// writes the new packing, refreshes the cached summaries).
    pub(crate) fn rewrite_node(&mut self, u: NodeId, entries: &[Entry]) -> TreeResult<()> {
        let old = std::mem::take(&mut self.nodes[u.0 as usize].blocks);
        for seg in old {
            self.store.free(seg.block)?;
        }
        let node = &mut self.nodes[u.0 as usize];
        node.entry_count = 0;
        node.unresolved = 0;
        node.queries = 0;
        node.reset_resolved_bounds();
        let arrivals = node.arrivals;
        self.append_entries(u, entries)?;
        // wholesale rewrites are not arrivals
        self.nodes[u.0 as usize].arrivals = arrivals;
        Ok(())
    }

    // ── Persistence ──────────────────────────────────────────────────────

    /// Persists the tree into its file-backed store: staging is pushed as
    /// a (possibly short) block, the node table and freelist are
    /// serialized into chained dedicated blocks, and the header is
    /// rewritten. Pending queries cannot be persisted; flush first.
    pub fn save(&mut self) -> TreeResult<()> {
        if !self.store.is_file_backed() {
            return Err(TreeError::NotFileBacked);
        }
        if self.results.values().any(|r| r.pending_copies > 0) {
            return Err(TreeError::QueriesPending);
        }
        self.push_staging()?;

        let mut stream = Vec::new();
        write_u64(&mut stream, self.nodes.len() as u64);
        for node in &self.nodes {
            write_u64(&mut stream, node.splitters.len() as u64);
            for s in &node.splitters {
                write_u64(&mut stream, s.0);
            }
            write_u64(&mut stream, node.children.len() as u64);
            for c in &node.children {
                write_u64(&mut stream, c.0 as u64);
            }
            write_u64(&mut stream, node.blocks.len() as u64);
            for seg in &node.blocks {
                write_u64(&mut stream, seg.block.0);
                write_u64(&mut stream, seg.len as u64);
            }
            write_u64(&mut stream, node.entry_count);
            write_u64(&mut stream, node.unresolved);
            write_u64(&mut stream, node.queries);
            write_u64(&mut stream, node.arrivals);
            write_u64(&mut stream, node.resolved_min_pri);
            write_u64(&mut stream, node.resolved_max_pri);
        }
        let free = self.store.free_blocks();
        write_u64(&mut stream, free.len() as u64);
        for b in &free {
            write_u64(&mut stream, b.0);
        }

        // Chain the stream through dedicated blocks, each reserving its
        // last 8 bytes for the next-block pointer.
        let payload = self.store.config().payload_bytes();
        assert!(payload > 8, "block too small for a table chain");
        let cap = payload - 8;
        let chunks: Vec<&[u8]> = if stream.is_empty() { vec![&[]] } else { stream.chunks(cap).collect() };
        let ids: Vec<BlockId> =
            (0..chunks.len()).map(|_| self.store.alloc()).collect::<Result<_, _>>()?;
        for (i, chunk) in chunks.iter().enumerate() {
            let mut buf = vec![0u8; payload];
            buf[..chunk.len()].copy_from_slice(chunk);
            let next = ids.get(i + 1).map(|b| b.0).unwrap_or(NULL_BLOCK);
            buf[payload - 8..].copy_from_slice(&next.to_le_bytes());
            self.store.write_block(ids[i], &buf)?;
        }

        self.store.write_meta(&HeaderMeta {
            current_version: self.current_version,
            root_node: self.root.0 as u64,
            node_table_block: ids[0].0,
            node_table_bytes: stream.len() as u64,
            next_query_id: self.next_query_id,
            live_elements: self.live_elements.max(0) as u64,
            rng_seed: self.seed,
            rng_word_pos: self.prio.word_pos(),
        })?;
        Ok(())
    }

    /// Reopens a saved tree from its single-file store.
    pub fn open(path: impl AsRef<std::path::Path>, strict_audit: bool) -> TreeResult<Self> {
        let (mut store, meta) = BlockStore::open(path)?;

        let mut stream = Vec::with_capacity(meta.node_table_bytes as usize);
        let payload = store.config().payload_bytes();
        let cap = payload - 8;
        let mut next = meta.node_table_block;
        let mut table_blocks = Vec::new();
        while next != NULL_BLOCK && stream.len() < meta.node_table_bytes as usize {
            let buf = store.read_block(BlockId(next))?;
            let take = cap.min(meta.node_table_bytes as usize - stream.len());
            stream.extend_from_slice(&buf[..take]);
            table_blocks.push(BlockId(next));
            next = u64::from_le_bytes(buf[payload - 8..].try_into().unwrap());
        }
        if stream.len() != meta.node_table_bytes as usize {
            return Err(TreeError::Corrupt("node table chain truncated".into()));
        }

        let mut cur = Cursor { buf: &stream, pos: 0 };
        let node_count = cur.u64()? as usize;
        let mut nodes = Vec::with_capacity(node_count);
        for _ in 0..node_count {
            let mut node = Node::new();
            for _ in 0..cur.u64()? {
                node.splitters.push(Key(cur.u64()?));
            }
            for _ in 0..cur.u64()? {
                node.children.push(NodeId(cur.u64()? as u32));
            }
            for _ in 0..cur.u64()? {
                let block = BlockId(cur.u64()?);
                let len = cur.u64()? as u32;
                node.blocks.push(BlockSeg { block, len });
            }
            node.entry_count = cur.u64()?;
            node.unresolved = cur.u64()?;
            node.queries = cur.u64()?;
            node.arrivals = cur.u64()?;
            node.resolved_min_pri = cur.u64()?;
            node.resolved_max_pri = cur.u64()?;
            nodes.push(node);
        }
        let mut free = Vec::new();
        for _ in 0..cur.u64()? {
            free.push(BlockId(cur.u64()?));
        }
        // The table chain itself is rewritten on the next save.
        free.extend(table_blocks);
        store.restore_freelist(&free);

        let mut prio = PriorityGen::new(meta.rng_seed);
        prio.set_word_pos(meta.rng_word_pos);
        Ok(PersistentBufferTree {
            store,
            nodes,
            root: NodeId(meta.root_node as u32),
            current_version: meta.current_version,
            staging: Vec::new(),
            prio,
            seed: meta.rng_seed,
            results: BTreeMap::new(),
            next_query_id: meta.next_query_id,
            errors: Default::default(),
            live_elements: meta.live_elements as i64,
            metrics: EmptyMetrics::default(),
            strict: strict_audit,
            flushed_clean: true,
            updates_since_repair: 0,
        })
    }

    /// Per-node content listing for debugging.
    #[doc(hidden)]
    pub fn dump_structure(&mut self) -> TreeResult<String> {
        use std::fmt::Write;
        let mut out = String::new();
        let mut stack = vec![(self.root, 0usize)];
        while let Some((u, depth)) = stack.pop() {
            let node = self.nodes[u.0 as usize].clone();
            writeln!(
                out,
                "{:indent$}node {} splitters {:?} count {} unresolved {} queries {} arrivals {} minmax ({}, {})",
                "",
                u.0,
                node.splitters.iter().map(|k| k.0).collect::<Vec<_>>(),
                node.entry_count,
                node.unresolved,
                node.queries,
                node.arrivals,
                node.resolved_min_pri,
                node.resolved_max_pri,
                indent = depth * 2
            )
            .unwrap();
            for seg in &node.blocks {
                let payload = self.store.read_block(seg.block)?;
                for entry in crate::model::decode_block(&payload, seg.len as usize) {
                    match entry {
                        Entry::Element(e) => writeln!(
                            out,
                            "{:indent$}  {:?} k={} [{}, {}) pri={} resolved={}",
                            "",
                            e.kind,
                            e.key,
                            e.lifespan.in_version,
                            e.lifespan.del_version,
                            e.priority.0,
                            e.resolved,
                            indent = depth * 2
                        )
                        .unwrap(),
                        Entry::Query(q, scope) => writeln!(
                            out,
                            "{:indent$}  query {} [{}, {}] @{} {:?}",
                            "",
                            q.id.0,
                            q.lowkey,
                            q.highkey,
                            q.version,
                            scope,
                            indent = depth * 2
                        )
                        .unwrap(),
                    }
                }
            }
            for child in node.children.iter().rev() {
                stack.push((*child, depth + 1));
            }
        }
        Ok(out)
    }

    /// Sorted view of every element in the tree, for tests and audits.
    #[doc(hidden)]
    pub fn dump_elements(&mut self) -> TreeResult<Vec<Element>> {
        let mut out = Vec::new();
        for idx in 0..self.nodes.len() {
            for seg in self.nodes[idx].blocks.clone() {
                let payload = self.store.read_block(seg.block)?;
                for entry in crate::model::decode_block(&payload, seg.len as usize) {
                    if let Entry::Element(e) = entry {
                        out.push(e);
                    }
                }
            }
        }
        out.sort_unstable_by_key(element_order_key);
        Ok(out)
    }
}

fn write_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn u64(&mut self) -> TreeResult<u64> {
        if self.pos + 8 > self.buf.len() {
            return Err(TreeError::Corrupt("node table truncated".into()));
        }
        let v = u64::from_le_bytes(self.buf[self.pos..self.pos + 8].try_into().unwrap());
        self.pos += 8;
        Ok(v)
    }
}
