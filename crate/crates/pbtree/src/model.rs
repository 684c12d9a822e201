//! Core vocabulary shared by the tree, the oracle and the harness: keys,
//! versions, lifespans, random priorities, and the fixed-width record
//! encoding used for block payloads.
//!
//! Versioning convention: version 0 is the state before any update; the
//! i-th update-class operation (insert, update, delete) creates version i.
//! An element's lifespan is the half-open interval `[in_version,
//! del_version)`; the sentinel [`VersionId::OPEN`] stands for "still live
//! at the present version". A delete travels through the tree as an
//! element with `in_version == 0` carrying the deletion version in
//! `del_version` until it meets the chain it terminates.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Payload bytes carried by every element. Fixed at build time so that
/// exactly `B` records fit one block.
pub const INFO_BYTES: usize = 8;

/// Serialized size of one buffer record: four u64 fields, one packed
/// kind/flag byte, and the payload.
pub const RECORD_BYTES: usize = 4 * 8 + 1 + INFO_BYTES;

/// Totally ordered element key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Key(pub u64);

impl std::fmt::Display for Key {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

/// Update-sequence version number. 0 is reserved (delete marker
/// `in_version`), real versions start at 1, and `OPEN` is greater than
/// every real version.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VersionId(pub u64);

impl VersionId {
    /// The "present version" sentinel used as the deletion version of a
    /// live element.
    pub const OPEN: VersionId = VersionId(u64::MAX);

    pub fn is_open(self) -> bool {
        self == Self::OPEN
    }
}

impl std::fmt::Display for VersionId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.is_open() {
            write!(f, "$")
        } else {
            self.0.fmt(f)
        }
    }
}

/// Half-open version interval `[in_version, del_version)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Lifespan {
    pub in_version: VersionId,
    pub del_version: VersionId,
}

impl Lifespan {
    pub fn open_from(v: VersionId) -> Self {
        Lifespan { in_version: v, del_version: VersionId::OPEN }
    }

    /// True iff version `v` falls inside the interval. `OPEN` compares
    /// greater than every real version, so `[a, OPEN)` contains all
    /// `v >= a`.
    pub fn contains(self, v: VersionId) -> bool {
        self.in_version <= v && v < self.del_version
    }
}

/// 64-bit uniform random priority. Ties are broken deterministically by
/// `(key, in_version)` wherever a strict total order is needed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Priority(pub u64);

/// Fixed-size opaque payload.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Info(pub [u8; INFO_BYTES]);

impl Info {
    pub fn from_u64(v: u64) -> Self {
        Info(v.to_le_bytes())
    }

    pub fn as_u64(self) -> u64 {
        u64::from_le_bytes(self.0)
    }
}

impl std::fmt::Display for Info {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.as_u64().fmt(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ElementKind {
    Insert,
    Update,
    Delete,
}

/// Why an update-class operation is illegal. Shared vocabulary between the
/// oracle's eager validation and the tree's lazily surfaced structural
/// errors — the two must flag exactly the same operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum RejectKind {
    /// Insert of a key that is live at the present version.
    InsertDuplicate,
    /// Insert of a key that was deleted; deleted keys are never reused.
    InsertAfterDelete,
    /// Update of a key that is not live (missing or deleted).
    UpdateNonLive,
    /// Delete of a key that is not live.
    DeleteNonLive,
}

impl std::fmt::Display for RejectKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            RejectKind::InsertDuplicate => "insert of live key",
            RejectKind::InsertAfterDelete => "insert after delete",
            RejectKind::UpdateNonLive => "update of non-live key",
            RejectKind::DeleteNonLive => "delete of non-live key",
        };
        f.write_str(s)
    }
}

/// A versioned key/payload record. Deletes reuse the record with
/// `in_version == 0` and the deletion version in `del_version`; they are
/// discarded once applied to the chain they terminate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Element {
    pub key: Key,
    pub lifespan: Lifespan,
    pub priority: Priority,
    pub info: Info,
    pub kind: ElementKind,
    /// Inserts are resolved at creation; updates and deletes become
    /// resolved when buffer emptying links them into their key's chain.
    pub resolved: bool,
}

impl Element {
    pub fn is_delete_marker(&self) -> bool {
        self.kind == ElementKind::Delete
    }
}

/// Ticket identifying a submitted range query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct QueryId(pub u64);

/// A batched range query travelling through buffers: report all elements
/// with key in `[lowkey, highkey]` whose lifespan contains `version`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QueryElement {
    pub id: QueryId,
    pub lowkey: Key,
    pub highkey: Key,
    pub version: VersionId,
}

/// How much of a query's interval is still unsettled on this path. A query
/// splits at most once: after that the low copy only chases `lowkey` and
/// the high copy only chases `highkey`, while fully covered subtrees in
/// between are reported wholesale.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryScope {
    Full,
    LowEdge,
    HighEdge,
}

/// One slot of a buffer block: either an element or a travelling query.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Entry {
    Element(Element),
    Query(QueryElement, QueryScope),
}

impl Entry {
    pub fn is_query(&self) -> bool {
        matches!(self, Entry::Query(..))
    }
}

/// Composite sort key for buffer emptying: key first, then `in_version`,
/// with delete markers (`in_version == 0`) ordered after all real versions
/// of the same key so that chain resolution is a single forward pass.
pub fn element_order_key(e: &Element) -> (Key, u64, u64) {
    let iv = e.lifespan.in_version.0;
    let iv = if iv == 0 { u64::MAX } else { iv };
    (e.key, iv, e.lifespan.del_version.0)
}

/// Strict total order used when selecting which elements a node retains.
pub fn priority_order_key(e: &Element) -> (Priority, Key, u64) {
    (e.priority, e.key, e.lifespan.in_version.0)
}

/// Deterministic stream of element priorities.
#[derive(Debug, Clone)]
pub struct PriorityGen {
    rng: ChaCha8Rng,
}

impl PriorityGen {
    pub fn new(seed: u64) -> Self {
        PriorityGen { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn next_priority(&mut self) -> Priority {
        use rand::RngCore;
        Priority(self.rng.next_u64())
    }

    /// Stream position, persisted so a reopened tree continues the same
    /// priority sequence.
    pub fn word_pos(&self) -> u128 {
        self.rng.get_word_pos()
    }

    pub fn set_word_pos(&mut self, pos: u128) {
        self.rng.set_word_pos(pos);
    }
}

// ── Record encoding ──────────────────────────────────────────────────────
//
// Little-endian fixed-width slots: key(8) in_version(8) del_version(8)
// priority(8) tag(1) info(INFO_BYTES). Query records reuse the numeric
// slots as lowkey/highkey/version/query-id. Tag byte: bits 0-2 kind
// (0 = vacant slot, 1 insert, 2 update, 3 delete, 4 query), bits 3-4 the
// query scope, bit 7 the resolved flag.

const TAG_VACANT: u8 = 0;
const TAG_INSERT: u8 = 1;
const TAG_UPDATE: u8 = 2;
const TAG_DELETE: u8 = 3;
const TAG_QUERY: u8 = 4;
const SCOPE_SHIFT: u8 = 3;
const RESOLVED_BIT: u8 = 0x80;

pub fn encode_entry(entry: &Entry, out: &mut [u8]) {
    assert_eq!(out.len(), RECORD_BYTES);
    let (a, b, c, d, tag, info) = match entry {
        Entry::Element(e) => {
            let kind = match e.kind {
                ElementKind::Insert => TAG_INSERT,
                ElementKind::Update => TAG_UPDATE,
                ElementKind::Delete => TAG_DELETE,
            };
            let tag = kind | if e.resolved { RESOLVED_BIT } else { 0 };
            (
                e.key.0,
                e.lifespan.in_version.0,
                e.lifespan.del_version.0,
                e.priority.0,
                tag,
                e.info.0,
            )
        }
        Entry::Query(q, scope) => {
            let s = match scope {
                QueryScope::Full => 0u8,
                QueryScope::LowEdge => 1,
                QueryScope::HighEdge => 2,
            };
            let tag = TAG_QUERY | (s << SCOPE_SHIFT);
            (q.lowkey.0, q.highkey.0, q.version.0, q.id.0, tag, [0u8; INFO_BYTES])
        }
    };
    out[0..8].copy_from_slice(&a.to_le_bytes());
    out[8..16].copy_from_slice(&b.to_le_bytes());
    out[16..24].copy_from_slice(&c.to_le_bytes());
    out[24..32].copy_from_slice(&d.to_le_bytes());
    out[32] = tag;
    out[33..33 + INFO_BYTES].copy_from_slice(&info);
}

/// Decodes one record slot. Returns `None` for a vacant (zero-padded) slot.
pub fn decode_entry(raw: &[u8]) -> Option<Entry> {
    assert_eq!(raw.len(), RECORD_BYTES);
    let a = u64::from_le_bytes(raw[0..8].try_into().unwrap());
    let b = u64::from_le_bytes(raw[8..16].try_into().unwrap());
    let c = u64::from_le_bytes(raw[16..24].try_into().unwrap());
    let d = u64::from_le_bytes(raw[24..32].try_into().unwrap());
    let tag = raw[32];
    match tag & 0x07 {
        TAG_VACANT => None,
        TAG_QUERY => {
            let scope = match (tag >> SCOPE_SHIFT) & 0x03 {
                0 => QueryScope::Full,
                1 => QueryScope::LowEdge,
                _ => QueryScope::HighEdge,
            };
            Some(Entry::Query(
                QueryElement {
                    id: QueryId(d),
                    lowkey: Key(a),
                    highkey: Key(b),
                    version: VersionId(c),
                },
                scope,
            ))
        }
        kind => {
            let kind = match kind {
                TAG_INSERT => ElementKind::Insert,
                TAG_UPDATE => ElementKind::Update,
                TAG_DELETE => ElementKind::Delete,
                other => panic!("corrupt record tag {other}"),
            };
            let mut info = [0u8; INFO_BYTES];
            info.copy_from_slice(&raw[33..33 + INFO_BYTES]);
            Some(Entry::Element(Element {
                key: Key(a),
                lifespan: Lifespan { in_version: VersionId(b), del_version: VersionId(c) },
                priority: Priority(d),
                info: Info(info),
                kind,
                resolved: tag & RESOLVED_BIT != 0,
            }))
        }
    }
}

/// Packs `entries` into a block payload of `block_elems` record slots.
/// Unused trailing slots are zeroed (vacant).
pub fn encode_block(entries: &[Entry], block_elems: usize) -> Vec<u8> {
    assert!(entries.len() <= block_elems);
    let mut payload = vec![0u8; block_elems * RECORD_BYTES];
    for (i, entry) in entries.iter().enumerate() {
        encode_entry(entry, &mut payload[i * RECORD_BYTES..(i + 1) * RECORD_BYTES]);
    }
    payload
}

/// Decodes the first `count` record slots of a block payload.
pub fn decode_block(payload: &[u8], count: usize) -> Vec<Entry> {
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let raw = &payload[i * RECORD_BYTES..(i + 1) * RECORD_BYTES];
        out.push(decode_entry(raw).expect("vacant slot inside counted prefix"));
    }
    out
}
