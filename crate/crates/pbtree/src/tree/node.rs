//! In-memory node table. A node is an ordered child table with splitter
//! keys plus a buffer of blocks holding elements and travelling queries.
//! Child `i` owns the key range `(splitters[i-1], splitters[i]]` with
//! open sentinels at both ends. Only block payloads live in external
//! memory; the table itself is tree structure, serialized to dedicated
//! blocks when the tree is saved.

use crate::model::{Element, Entry, Key};
use crate::store::BlockId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub u32);

/// One buffer block and how many of its record slots are occupied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSeg {
    pub block: BlockId,
    pub len: u32,
}

#[derive(Debug, Clone, Default)]
pub struct Node {
    pub splitters: Vec<Key>,
    pub children: Vec<NodeId>,
    pub blocks: Vec<BlockSeg>,
    /// Entries across all blocks (elements plus queries).
    pub entry_count: u64,
    /// Elements not yet linked into their key's chain (updates and delete
    /// markers in transit). These are never retained by an emptying.
    pub unresolved: u64,
    /// Travelling queries currently parked in this buffer.
    pub queries: u64,
    /// Blocks appended since this node's last buffer emptying.
    pub arrivals: u64,
    /// Min/max priority over resolved elements in the buffer; `u64::MAX`/0
    /// when there are none. Exact right after an emptying, conservative in
    /// between (removals are only discovered at the next emptying).
    pub resolved_min_pri: u64,
    pub resolved_max_pri: u64,
    /// Min priority over unresolved elements in the buffer. An unresolved
    /// element only ever moves down, so its priority is a lower bound on
    /// what the subtree below will eventually hold — flush retention must
    /// respect it.
    pub unresolved_min_pri: u64,
}

impl Node {
    pub fn new() -> Self {
        Node { resolved_min_pri: u64::MAX, resolved_max_pri: 0, ..Default::default() }
    }

    pub fn is_childless(&self) -> bool {
        self.children.is_empty()
    }

    pub fn physical_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn logical_blocks(&self, block_elems: usize) -> usize {
        (self.entry_count as usize).div_ceil(block_elems)
    }

    /// Index of the child whose key range contains `key`.
    pub fn child_index(&self, key: Key) -> usize {
        self.splitters.partition_point(|s| *s < key)
    }

    pub fn note_arrival(&mut self, entries: &[Entry], blocks_appended: usize) {
        self.entry_count += entries.len() as u64;
        self.arrivals += blocks_appended as u64;
        for entry in entries {
            match entry {
                Entry::Element(e) => {
                    if e.resolved {
                        self.observe_resolved(e);
                    } else {
                        self.unresolved += 1;
                    }
                }
                Entry::Query(..) => self.queries += 1,
            }
        }
    }

    pub fn observe_resolved(&mut self, e: &Element) {
        self.resolved_min_pri = self.resolved_min_pri.min(e.priority.0);
        self.resolved_max_pri = self.resolved_max_pri.max(e.priority.0);
    }

    pub fn reset_resolved_bounds(&mut self) {
        self.resolved_min_pri = u64::MAX;
        self.resolved_max_pri = 0;
    }
}
