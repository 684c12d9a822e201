//! Persistent buffer tree: a randomized, batched, I/O-efficient
//! multiversion index over a simulated block device.
//!
//! The structure is an m-ary search tree on keys and a min-heap on random
//! element priorities, where every node carries a buffer of up to m blocks
//! of elements. Updates and range queries are appended in blocks to the
//! root buffer and migrate down lazily through buffer-emptying, which
//! resolves same-key update/delete chains into half-open lifespans,
//! answers co-resident queries, retains the smallest-priority half of the
//! buffer, and distributes the rest to the children by key. All past
//! versions stay queryable; only the present version is updatable.
//!
//! Crate layout:
//! - [`model`] — keys, versions, lifespans, priorities, record encoding
//! - [`store`] — the block device simulation with exact I/O counters
//! - [`tree`] — the buffer tree engine itself
//! - [`oracle`] — replay-based ground truth for every correctness check
//! - [`workload`] — the text workload-file format
//! - [`harness`] — workload generation, tree-vs-oracle sweeps, and
//!   measurement of amortized I/O, height, and space envelopes

pub mod harness;
pub mod model;
pub mod oracle;
pub mod store;
pub mod tree;
pub mod workload;

pub use model::{Element, ElementKind, Info, Key, Lifespan, Priority, QueryElement, QueryId, VersionId};
pub use store::{Backing, BlockId, BlockStore, IoStats, StoreConfig, StoreError};
pub use tree::{PersistentBufferTree, ResultSet, StructuralError, TreeConfig, TreeError, Violation};
