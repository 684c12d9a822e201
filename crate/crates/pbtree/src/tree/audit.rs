//! Full-tree invariant verification. Meaningful after a flush, when no
//! query or unresolved element is in transit. Violations are returned as
//! data, never panics — fault-injection tests corrupt blocks on purpose
//! and expect the audit to notice.

use std::collections::BTreeMap;

use crate::model::{decode_block, Element, Entry, Key};

use super::node::NodeId;
use super::{PersistentBufferTree, TreeResult};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    /// An element in `node` has priority >= some element in a descendant.
    HeapOrder { node: u32, key: Key },
    /// An element's key escapes its node's inherited splitter range.
    SearchOrder { node: u32, key: Key },
    /// Splitters not strictly increasing, or child count mismatch.
    SplitterTable { node: u32 },
    /// Internal node buffer above m blocks after a flush.
    Occupancy { node: u32, logical_blocks: usize },
    /// Unresolved element or travelling query found after a flush.
    InTransitLeftover { node: u32 },
    /// More than one element with an open deletion version for one key.
    DuplicateLiveKey { key: Key },
    /// A key's lifespans do not chain contiguously.
    BrokenChain { key: Key, at_version: u64 },
    /// Live blocks exceed the linear-space envelope.
    Space { live_blocks: u64, budget: u64 },
    /// Cached live-element count disagrees with the actual tree contents.
    LiveCount { cached: u64, counted: u64 },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::HeapOrder { node, key } => {
                write!(f, "heap order violated at node {node} (key {key})")
            }
            Violation::SearchOrder { node, key } => {
                write!(f, "search order violated at node {node}: key {key} out of range")
            }
            Violation::SplitterTable { node } => write!(f, "splitter table corrupt at node {node}"),
            Violation::Occupancy { node, logical_blocks } => {
                write!(f, "node {node} holds {logical_blocks} blocks after flush")
            }
            Violation::InTransitLeftover { node } => {
                write!(f, "unresolved element or query left at node {node}")
            }
            Violation::DuplicateLiveKey { key } => write!(f, "key {key} live more than once"),
            Violation::BrokenChain { key, at_version } => {
                write!(f, "lifespan chain of key {key} broken at version {at_version}")
            }
            Violation::Space { live_blocks, budget } => {
                write!(f, "{live_blocks} live blocks exceed budget {budget}")
            }
            Violation::LiveCount { cached, counted } => {
                write!(f, "live count drifted: cached {cached}, counted {counted}")
            }
        }
    }
}

struct AuditState {
    violations: Vec<Violation>,
    /// key -> (in_version, del_version) pairs seen anywhere in the tree.
    chains: BTreeMap<Key, Vec<(u64, u64)>>,
    total_elements: u64,
}

impl PersistentBufferTree {
    /// Verifies heap order, search order, splitter consistency, occupancy,
    /// lifespan chaining, key uniqueness and the linear-space bound.
    /// Returns an empty list iff the tree is healthy.
    pub fn audit(&mut self) -> TreeResult<Vec<Violation>> {
        let mut state = AuditState {
            violations: Vec::new(),
            chains: BTreeMap::new(),
            total_elements: 0,
        };
        self.audit_node(self.root, None, None, &mut state)?;

        for (key, chain) in &mut state.chains {
            chain.sort_unstable();
            let mut open = 0usize;
            for i in 0..chain.len() {
                let (iv, dv) = chain[i];
                if dv == u64::MAX {
                    open += 1;
                }
                if let Some((next_iv, _)) = chain.get(i + 1) {
                    if dv != *next_iv {
                        state.violations.push(Violation::BrokenChain { key: *key, at_version: iv });
                    }
                } else if dv != u64::MAX && dv <= iv {
                    state.violations.push(Violation::BrokenChain { key: *key, at_version: iv });
                }
            }
            if open > 1 {
                state.violations.push(Violation::DuplicateLiveKey { key: *key });
            }
        }

        let live_keys = state
            .chains
            .values()
            .flat_map(|c| c.iter())
            .filter(|(_, dv)| *dv == u64::MAX)
            .count() as u64;
        let cached = self.stats().live_elements;
        if cached != live_keys {
            state.violations.push(Violation::LiveCount { cached, counted: live_keys });
        }

        let n_blocks = state.total_elements.div_ceil(self.block_elems() as u64).max(1);
        let budget = 4 * n_blocks + self.nodes.len() as u64;
        let live_blocks = self.store.live_blocks();
        if live_blocks > budget {
            state.violations.push(Violation::Space { live_blocks, budget });
        }

        Ok(state.violations)
    }

    /// Returns the minimum priority tuple in the subtree, for the heap
    /// check one level up.
    fn audit_node(
        &mut self,
        u: NodeId,
        lo: Option<Key>,
        hi: Option<Key>,
        state: &mut AuditState,
    ) -> TreeResult<Option<(u64, Key, u64)>> {
        let node = &self.nodes[u.0 as usize];
        let segs = node.blocks.clone();
        let children = node.children.clone();
        let splitters = node.splitters.clone();
        let m = self.fanout();

        if !children.is_empty() {
            let ok = children.len() == splitters.len() + 1
                && splitters.windows(2).all(|w| w[0] < w[1]);
            if !ok {
                state.violations.push(Violation::SplitterTable { node: u.0 });
            }
            let logical = self.nodes[u.0 as usize].logical_blocks(self.block_elems());
            if logical > m {
                state.violations.push(Violation::Occupancy { node: u.0, logical_blocks: logical });
            }
        }

        let mut elements: Vec<Element> = Vec::new();
        for seg in &segs {
            let payload = self.store.read_block(seg.block)?;
            for entry in decode_block(&payload, seg.len as usize) {
                match entry {
                    Entry::Element(e) => {
                        if !e.resolved || e.is_delete_marker() {
                            state.violations.push(Violation::InTransitLeftover { node: u.0 });
                            continue;
                        }
                        elements.push(e);
                    }
                    Entry::Query(..) => {
                        state.violations.push(Violation::InTransitLeftover { node: u.0 });
                    }
                }
            }
        }

        let mut buffer_max: Option<(u64, Key, u64)> = None;
        let mut buffer_min: Option<(u64, Key, u64)> = None;
        for e in &elements {
            if lo.map(|l| e.key <= l).unwrap_or(false) || hi.map(|h| e.key > h).unwrap_or(false) {
                state.violations.push(Violation::SearchOrder { node: u.0, key: e.key });
            }
            let t = (e.priority.0, e.key, e.lifespan.in_version.0);
            if buffer_max.map(|mx| t > mx).unwrap_or(true) {
                buffer_max = Some(t);
            }
            if buffer_min.map(|mn| t < mn).unwrap_or(true) {
                buffer_min = Some(t);
            }
            state
                .chains
                .entry(e.key)
                .or_default()
                .push((e.lifespan.in_version.0, e.lifespan.del_version.0));
            state.total_elements += 1;
        }

        let mut subtree_min = buffer_min;
        for (i, child) in children.iter().enumerate() {
            let child_lo = if i == 0 { lo } else { Some(splitters[i - 1]) };
            let child_hi = if i == children.len() - 1 { hi } else { Some(splitters[i]) };
            let child_min = self.audit_node(*child, child_lo, child_hi, state)?;
            if let (Some(mx), Some(mn)) = (buffer_max, child_min) {
                if mx >= mn {
                    state.violations.push(Violation::HeapOrder { node: u.0, key: mx.1 });
                }
            }
            if let Some(mn) = child_min {
                if subtree_min.map(|cur| mn < cur).unwrap_or(true) {
                    subtree_min = Some(mn);
                }
            }
        }
        Ok(subtree_min)
    }
}
