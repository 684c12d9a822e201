//! The buffer-emptying process and its satellites: chain resolution,
//! query matching, query routing/splitting, distribution to children, and
//! whole-subtree reporting.
//!
//! One emptying, in order:
//! 1. load every buffer block and sort elements by (key, in_version),
//!    delete markers last within their key group;
//! 2. resolve same-key chains in memory: each live item's deletion version
//!    becomes the next item's in_version, a delete marker closes the last
//!    item and is discarded;
//! 3. match every co-resident query against the (now resolved) elements;
//! 4. retain the smallest-priority ceil(m/2) blocks' worth of resolved
//!    elements (a childless node that cannot split retains everything) and
//!    distribute the rest — plus all unresolved elements and queries — to
//!    the children by key, creating children with quantile splitters on a
//!    node's first distribution;
//! 5. report fully covered subtrees for queries that split here;
//! 6. recurse into children that overflowed.
//!
//! Unresolved elements are never retained: an update or delete must keep
//! descending until it meets the chain it belongs to, which — because
//! per-key traffic is funnelled down a single root path in submission
//! order — is guaranteed to be at or below it. An unresolved element still
//! left over at a childless node therefore proves its target never
//! existed, and is surfaced as a structural error.

use std::collections::HashMap;

use crate::model::{
    decode_block, element_order_key, priority_order_key, Element, ElementKind, Entry, Key,
    Lifespan, QueryElement, QueryScope, RejectKind, VersionId,
};

use super::node::NodeId;
use super::{PersistentBufferTree, StructuralError, TreeError, TreeResult};

#[derive(Debug, Clone, Copy)]
pub(crate) enum EmptyMode {
    Normal,
    /// Forced emptying during a flush: `min_below` is the smallest
    /// resolved priority strictly below this node (heap-order bound on
    /// what may be retained); `trigger_active` applies the normal
    /// retention cap when the buffer is also over-full.
    Flush { min_below: u64, trigger_active: bool },
}

/// What chain resolution did to a key group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolveOutcome {
    pub changed: bool,
    /// Elements dropped as precondition violations, with the reason.
    pub rejected: Vec<(Element, RejectKind)>,
    /// Delete markers consumed by closing a chain.
    pub markers_applied: usize,
}

/// In-memory chain resolution over a buffer's elements, which must be
/// sorted by [`element_order_key`]. Within each key group, every live
/// item is closed by the in_version of the item after it; a delete marker
/// closes the final live item and disappears. Survivors keep their order.
pub fn resolve_chains(elements: &mut Vec<Element>) -> ResolveOutcome {
    let mut out = ResolveOutcome { changed: false, rejected: Vec::new(), markers_applied: 0 };
    let mut result: Vec<Element> = Vec::with_capacity(elements.len());
    let mut group_start = 0;

    let elems = std::mem::take(elements);
    let mut i = 0;
    while i < elems.len() {
        let key = elems[i].key;
        let mut j = i;
        while j < elems.len() && elems[j].key == key {
            j += 1;
        }
        // Real items first, markers last (comparator guarantees it).
        for e in &elems[i..j] {
            if e.is_delete_marker() {
                let tail = result[group_start..].last_mut();
                match tail {
                    Some(t)
                        if t.lifespan.del_version.is_open()
                            && t.lifespan.in_version < e.lifespan.del_version =>
                    {
                        t.lifespan.del_version = e.lifespan.del_version;
                        out.markers_applied += 1;
                        out.changed = true;
                    }
                    // No chain to close here; the marker keeps travelling.
                    _ => result.push(*e),
                }
                continue;
            }
            let prev = result[group_start..]
                .iter_mut()
                .rev()
                .find(|p| !p.is_delete_marker());
            if let Some(prev) = prev {
                if prev.lifespan.del_version.is_open() {
                    if e.kind == ElementKind::Insert {
                        // Insert while the key is live: rejected, never
                        // silently merged into the chain.
                        out.rejected.push((*e, RejectKind::InsertDuplicate));
                        out.changed = true;
                        continue;
                    }
                    prev.lifespan.del_version = e.lifespan.in_version;
                    let mut e = *e;
                    e.resolved = true;
                    result.push(e);
                    out.changed = true;
                    continue;
                }
            }
            // No open predecessor in this buffer: either the chain's
            // earlier links live deeper (the element keeps descending
            // unresolved) or the element is already linked.
            result.push(*e);
        }
        group_start = result.len();
        i = j;
    }
    *elements = result;
    out
}

impl PersistentBufferTree {
    pub(crate) fn empty_buffer(&mut self, u: NodeId, mode: EmptyMode) -> TreeResult<()> {
        let m = self.fanout();
        let b = self.block_elems();
        let arrivals_before = self.nodes[u.0 as usize].arrivals;
        let io_before = self.store.snapshot_stats().transfers();

        // Step 1: load.
        let segs = std::mem::take(&mut self.nodes[u.0 as usize].blocks);
        let mut elements: Vec<Element> = Vec::new();
        let mut queries: Vec<(QueryElement, QueryScope)> = Vec::new();
        for seg in &segs {
            let payload = self.store.read_block(seg.block)?;
            for entry in decode_block(&payload, seg.len as usize) {
                match entry {
                    Entry::Element(e) => elements.push(e),
                    Entry::Query(q, scope) => queries.push((q, scope)),
                }
            }
        }
        let decoded = (elements.len() + queries.len()) as u64;
        self.metrics.max_decoded = self.metrics.max_decoded.max(decoded);
        if self.strict {
            let budget = ((m + 2) * b) as u64;
            if decoded > budget {
                return Err(TreeError::MemoryBudget { decoded, budget });
            }
        }

        // Step 2: sort and resolve chains.
        elements.sort_unstable_by_key(element_order_key);
        let outcome = resolve_chains(&mut elements);
        for (e, kind) in &outcome.rejected {
            if *kind == RejectKind::InsertDuplicate {
                self.adjust_live(-1);
            }
            self.record_error(StructuralError {
                version: e.lifespan.in_version,
                kind: *kind,
                key: e.key,
            })?;
        }
        let mut changed = outcome.changed;

        // Step 3: queries observe the resolved buffer.
        for (q, _) in &queries {
            for e in &elements {
                if !e.is_delete_marker()
                    && e.key >= q.lowkey
                    && e.key <= q.highkey
                    && e.lifespan.contains(q.version)
                {
                    self.record_result(q.id, e.key, e.info, e.lifespan);
                }
            }
        }

        let mut resolved: Vec<Element> = Vec::with_capacity(elements.len());
        let mut unresolved: Vec<Element> = Vec::new();
        for e in elements {
            if e.resolved {
                resolved.push(e);
            } else {
                unresolved.push(e);
            }
        }
        resolved.sort_unstable_by_key(priority_order_key);

        let half_cap = m.div_ceil(2) * b;
        let over_full = {
            let logical = (decoded as usize).div_ceil(b);
            logical > m || segs.len() >= 2 * m
        };

        let childless = self.nodes[u.0 as usize].is_childless();
        let mut created_children = false;
        if childless {
            // An unresolved element here has no deeper buffer left to meet
            // its chain in: the operation's precondition was violated.
            for e in unresolved.drain(..) {
                let (version, kind) = if e.is_delete_marker() {
                    self.adjust_live(1);
                    (e.lifespan.del_version, RejectKind::DeleteNonLive)
                } else {
                    (e.lifespan.in_version, RejectKind::UpdateNonLive)
                };
                self.record_error(StructuralError { version, kind, key: e.key })?;
                changed = true;
            }
            // Queries die here: there is nothing below to see.
            for (q, _) in queries.drain(..) {
                self.query_copy_done(q.id);
                changed = true;
            }
            // Splitters come from the prospective push set (everything
            // past the retention cap, by priority), so the split needs at
            // least two distinct keys there.
            let splittable = over_full
                && resolved.len() > half_cap
                && distinct_keys_at_least(&resolved[half_cap.min(resolved.len())..], 2);
            if !splittable {
                // Retain everything (possibly repacking fragmented
                // blocks) and stay childless.
                let repacked = segs.len() != resolved.len().div_ceil(b);
                if changed || repacked {
                    self.write_retained(u, &segs, &resolved, true)?;
                } else {
                    self.nodes[u.0 as usize].blocks = segs;
                    self.refresh_bounds(u, &resolved);
                }
                self.nodes[u.0 as usize].arrivals = 0;
                self.finish_invocation(mode, arrivals_before, io_before);
                return Ok(());
            }
            created_children = true;
        }

        // Step 4: partition. Retention considers resolved elements only,
        // smallest priorities first; flush mode additionally refuses to
        // retain anything at or above the smallest priority below. A node
        // splitting right now always distributes like a normal emptying.
        let cap = if created_children {
            half_cap
        } else {
            match mode {
                EmptyMode::Normal => half_cap,
                EmptyMode::Flush { trigger_active: true, .. } => half_cap,
                EmptyMode::Flush { trigger_active: false, .. } => usize::MAX,
            }
        };
        let bound = match mode {
            EmptyMode::Normal => u64::MAX,
            EmptyMode::Flush { min_below, .. } => min_below,
        };
        let mut keep = 0;
        while keep < resolved.len() && keep < cap && resolved[keep].priority.0 < bound {
            keep += 1;
        }
        let push_elements: Vec<Element> = resolved.split_off(keep);
        let retained = resolved;

        if matches!(mode, EmptyMode::Normal) {
            // Internal-node occupancy: exactly ceil(m/2) blocks' worth
            // stays, or everything if less was available.
            let expect = (retained.len() + push_elements.len()).min(half_cap);
            if retained.len() != expect {
                self.metrics.occupancy_violations += 1;
            }
        }

        if created_children {
            self.split_node(u, &push_elements, &unresolved)?;
        }

        changed = changed || !push_elements.is_empty() || !unresolved.is_empty() || !queries.is_empty();
        let repacked = segs.len() != retained.len().div_ceil(b);
        if changed || repacked {
            self.write_retained(u, &segs, &retained, true)?;
        } else {
            self.nodes[u.0 as usize].blocks = segs;
            self.refresh_bounds(u, &retained);
        }
        self.nodes[u.0 as usize].arrivals = 0;

        // Step 5: distribute by key; route, split and report queries.
        let children = self.nodes[u.0 as usize].children.clone();
        let splitters = self.nodes[u.0 as usize].splitters.clone();
        let mut outgoing: Vec<Vec<Entry>> = vec![Vec::new(); children.len()];
        for e in push_elements.into_iter().chain(unresolved.into_iter()) {
            let idx = splitters.partition_point(|s| *s < e.key);
            outgoing[idx].push(Entry::Element(e));
        }
        let mut reports: Vec<(NodeId, QueryElement)> = Vec::new();
        for (q, scope) in queries {
            let il = splitters.partition_point(|s| *s < q.lowkey);
            let ih = splitters.partition_point(|s| *s < q.highkey);
            match scope {
                QueryScope::Full if il == ih => {
                    outgoing[il].push(Entry::Query(q, QueryScope::Full));
                }
                QueryScope::Full => {
                    // The endpoints separate: split once, report whatever
                    // lies strictly between.
                    self.query_copy_split(q.id);
                    outgoing[il].push(Entry::Query(q, QueryScope::LowEdge));
                    outgoing[ih].push(Entry::Query(q, QueryScope::HighEdge));
                    for covered in il + 1..ih {
                        reports.push((children[covered], q));
                    }
                }
                QueryScope::LowEdge => {
                    outgoing[il].push(Entry::Query(q, QueryScope::LowEdge));
                    for covered in il + 1..children.len() {
                        reports.push((children[covered], q));
                    }
                }
                QueryScope::HighEdge => {
                    outgoing[ih].push(Entry::Query(q, QueryScope::HighEdge));
                    for covered in 0..ih {
                        reports.push((children[covered], q));
                    }
                }
            }
        }
        for (idx, batch) in outgoing.iter().enumerate() {
            self.append_entries(children[idx], batch)?;
        }

        self.finish_invocation(mode, arrivals_before, io_before);

        // Step 6: subtree reporting reads the children only after the
        // distribution landed, so in-transit elements are visible.
        for (child, q) in reports {
            self.report_subtree(child, &q)?;
        }

        // Step 7: recurse. During a flush the sweep itself visits the
        // children next.
        if matches!(mode, EmptyMode::Normal) {
            for child in children {
                if self.trigger(child) {
                    self.empty_buffer(child, EmptyMode::Normal)?;
                }
            }
        }
        Ok(())
    }

    fn finish_invocation(&mut self, mode: EmptyMode, arrivals_before: u64, io_before: u64) {
        let excl = self.store.snapshot_stats().transfers() - io_before;
        self.metrics.max_io_excl = self.metrics.max_io_excl.max(excl);
        self.metrics.invocations += 1;
        match mode {
            EmptyMode::Normal => {
                self.metrics.min_arrivals = Some(match self.metrics.min_arrivals {
                    Some(cur) => cur.min(arrivals_before),
                    None => arrivals_before,
                });
            }
            EmptyMode::Flush { .. } => {
                self.metrics.flush_invocations += 1;
            }
        }
    }

    /// Writes the retained elements back as freshly packed blocks (frees
    /// the originals) and refreshes the cached summaries.
    fn write_retained(
        &mut self,
        u: NodeId,
        old: &[super::node::BlockSeg],
        retained: &[Element],
        free_old: bool,
    ) -> TreeResult<()> {
        if free_old {
            for seg in old {
                self.store.free(seg.block)?;
            }
        }
        let b = self.block_elems();
        for chunk in retained.chunks(b) {
            let id = self.store.alloc()?;
            let entries: Vec<Entry> = chunk.iter().map(|e| Entry::Element(*e)).collect();
            let payload = crate::model::encode_block(&entries, b);
            self.store.write_block(id, &payload)?;
            self.nodes[u.0 as usize]
                .blocks
                .push(super::node::BlockSeg { block: id, len: chunk.len() as u32 });
        }
        self.refresh_bounds(u, retained);
        Ok(())
    }

    fn refresh_bounds(&mut self, u: NodeId, retained: &[Element]) {
        let node = &mut self.nodes[u.0 as usize];
        node.entry_count = retained.len() as u64;
        node.unresolved = 0;
        node.queries = 0;
        node.reset_resolved_bounds();
        for e in retained {
            debug_assert!(e.resolved);
            node.observe_resolved(e);
        }
    }

    /// First distribution of a childless node: children appear with
    /// splitters at evenly spaced distinct-key quantiles of the elements
    /// being pushed. Splitters are immutable afterwards.
    fn split_node(&mut self, u: NodeId, pushed: &[Element], unresolved: &[Element]) -> TreeResult<()> {
        let m = self.fanout();
        let mut keys: Vec<Key> = pushed.iter().chain(unresolved.iter()).map(|e| e.key).collect();
        keys.sort_unstable();
        keys.dedup();
        let d = keys.len();
        assert!(d >= 2, "split of a single-key buffer");
        let k = m.min(d);
        let mut splitters = Vec::with_capacity(k - 1);
        for j in 1..k {
            splitters.push(keys[j * d / k - 1]);
        }
        let mut children = Vec::with_capacity(k);
        for _ in 0..k {
            let id = NodeId(self.nodes.len() as u32);
            self.nodes.push(super::node::Node::new());
            children.push(id);
        }
        let node = &mut self.nodes[u.0 as usize];
        node.splitters = splitters;
        node.children = children;
        Ok(())
    }

    /// Depth-first, read-only report of every element in `root`'s subtree
    /// that belongs to the query's version, with key inside its interval.
    /// Chain links still in transit inside the subtree are reconstructed
    /// in memory so the version filter sees eventual lifespans.
    pub(crate) fn report_subtree(&mut self, root: NodeId, q: &QueryElement) -> TreeResult<()> {
        let mut candidates: HashMap<Key, Element> = HashMap::new();
        let mut kills: HashMap<Key, u64> = HashMap::new();
        let mut stack = vec![root];
        while let Some(u) = stack.pop() {
            for seg in self.nodes[u.0 as usize].blocks.clone() {
                let payload = self.store.read_block(seg.block)?;
                self.metrics.report_reads += 1;
                for entry in decode_block(&payload, seg.len as usize) {
                    let Entry::Element(e) = entry else { continue };
                    if e.key < q.lowkey || e.key > q.highkey {
                        continue;
                    }
                    if e.is_delete_marker() {
                        if e.lifespan.del_version <= q.version {
                            let dv = kills.entry(e.key).or_insert(u64::MAX);
                            *dv = (*dv).min(e.lifespan.del_version.0);
                        }
                        continue;
                    }
                    let iv = e.lifespan.in_version;
                    if iv.0 >= 1 && iv <= q.version {
                        match candidates.entry(e.key) {
                            std::collections::hash_map::Entry::Occupied(mut slot) => {
                                if iv > slot.get().lifespan.in_version {
                                    slot.insert(e);
                                }
                            }
                            std::collections::hash_map::Entry::Vacant(slot) => {
                                slot.insert(e);
                            }
                        }
                    }
                }
            }
            stack.extend(self.nodes[u.0 as usize].children.iter().copied());
        }
        for (key, e) in candidates {
            let mut del = e.lifespan.del_version;
            if del.is_open() {
                if let Some(dv) = kills.get(&key) {
                    if *dv > e.lifespan.in_version.0 {
                        del = VersionId(*dv);
                    }
                }
            }
            if q.version < del {
                self.record_result(
                    q.id,
                    key,
                    e.info,
                    Lifespan { in_version: e.lifespan.in_version, del_version: del },
                );
            }
        }
        Ok(())
    }
}

fn distinct_keys_at_least(sorted_any: &[Element], n: usize) -> bool {
    let mut keys: Vec<Key> = sorted_any.iter().map(|e| e.key).collect();
    keys.sort_unstable();
    keys.dedup();
    keys.len() >= n
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Info, Priority};

    fn el(key: u64, iv: u64, dv: u64, kind: ElementKind, resolved: bool, info: u64) -> Element {
        Element {
            key: Key(key),
            lifespan: Lifespan { in_version: VersionId(iv), del_version: VersionId(dv) },
            priority: Priority(iv.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ key),
            info: Info::from_u64(info),
            kind,
            resolved,
        }
    }

    const OPEN: u64 = u64::MAX;

    #[test]
    fn resolve_links_update_chain() {
        // <k, in=5, del=$> plus update <k, in=9, del=$> resolves to
        // <k,5,9> and <k,9,$>.
        let mut elems = vec![
            el(1, 5, OPEN, ElementKind::Insert, true, 50),
            el(1, 9, OPEN, ElementKind::Update, false, 90),
        ];
        elems.sort_unstable_by_key(element_order_key);
        let out = resolve_chains(&mut elems);
        assert!(out.changed);
        assert!(out.rejected.is_empty());
        assert_eq!(elems[0].lifespan.del_version, VersionId(9));
        assert_eq!(elems[1].lifespan.del_version, VersionId(OPEN));
        assert!(elems[1].resolved);
    }

    #[test]
    fn resolve_applies_delete_marker() {
        // <k, in=5, del=$> plus delete marker <k, in=0, del=12> becomes
        // <k,5,12>; the marker disappears.
        let mut elems = vec![
            el(1, 5, OPEN, ElementKind::Insert, true, 50),
            el(1, 0, 12, ElementKind::Delete, false, 0),
        ];
        elems.sort_unstable_by_key(element_order_key);
        let out = resolve_chains(&mut elems);
        assert_eq!(out.markers_applied, 1);
        assert_eq!(elems.len(), 1);
        assert_eq!(elems[0].lifespan.del_version, VersionId(12));
    }

    #[test]
    fn resolve_rejects_duplicate_live_insert() {
        let mut elems = vec![
            el(1, 2, OPEN, ElementKind::Insert, true, 20),
            el(1, 6, OPEN, ElementKind::Insert, true, 60),
        ];
        elems.sort_unstable_by_key(element_order_key);
        let out = resolve_chains(&mut elems);
        assert_eq!(out.rejected.len(), 1);
        assert_eq!(out.rejected[0].1, RejectKind::InsertDuplicate);
        assert_eq!(elems.len(), 1);
        // the surviving chain is untouched
        assert_eq!(elems[0].lifespan.del_version, VersionId(OPEN));
    }

    #[test]
    fn resolve_leaves_gap_chains_for_deeper_links() {
        // [1,5) here with an unresolved update @9: the update's true
        // predecessor [5,...) lives deeper, so it must keep travelling.
        let mut elems = vec![
            el(1, 1, 5, ElementKind::Insert, true, 10),
            el(1, 9, OPEN, ElementKind::Update, false, 90),
        ];
        elems.sort_unstable_by_key(element_order_key);
        let out = resolve_chains(&mut elems);
        assert!(out.rejected.is_empty());
        assert!(!elems[1].resolved);
        assert_eq!(elems[0].lifespan.del_version, VersionId(5));
    }

    #[test]
    fn resolve_marker_skips_dead_tail() {
        // marker must not close [1,5): its real target is deeper.
        let mut elems = vec![
            el(1, 1, 5, ElementKind::Insert, true, 10),
            el(1, 0, 9, ElementKind::Delete, false, 0),
        ];
        elems.sort_unstable_by_key(element_order_key);
        let out = resolve_chains(&mut elems);
        assert_eq!(out.markers_applied, 0);
        assert_eq!(elems.len(), 2);
        assert!(elems.iter().any(|e| e.is_delete_marker()));
    }

    /// The order elements arrive in a buffer must not matter: chaining a
    /// full per-key history equals the oracle's lifespans for every
    /// permutation of {insert@1, update@3, delete@4}.
    #[test]
    fn resolve_matches_oracle_on_all_permutations() {
        let base = vec![
            el(7, 1, OPEN, ElementKind::Insert, true, 100),
            el(7, 3, OPEN, ElementKind::Update, false, 300),
            el(7, 0, 4, ElementKind::Delete, false, 0),
        ];
        let perms: Vec<Vec<usize>> = vec![
            vec![0, 1, 2], vec![0, 2, 1], vec![1, 0, 2],
            vec![1, 2, 0], vec![2, 0, 1], vec![2, 1, 0],
        ];
        for perm in perms {
            let mut elems: Vec<Element> = perm.iter().map(|&i| base[i]).collect();
            elems.sort_unstable_by_key(element_order_key);
            let out = resolve_chains(&mut elems);
            assert!(out.rejected.is_empty(), "perm {perm:?}");
            assert_eq!(elems.len(), 2, "perm {perm:?}");
            // oracle lifespans: [1,3) then [3,4)
            assert_eq!(elems[0].lifespan, Lifespan { in_version: VersionId(1), del_version: VersionId(3) });
            assert_eq!(elems[1].lifespan, Lifespan { in_version: VersionId(3), del_version: VersionId(4) });
            assert!(elems.iter().all(|e| e.resolved));
        }
    }
}
