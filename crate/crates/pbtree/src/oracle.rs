//! Ground-truth multiversion store: an append-only operation log that
//! answers any versioned range query by replay. Deliberately naive — it is
//! the correctness reference every tree property is tested against. The
//! log also validates workload legality, so the tree's lazily surfaced
//! structural errors can be compared against the oracle's rejections.

use std::collections::{BTreeMap, HashMap, HashSet};

use crate::model::{Info, Key, VersionId};

pub use crate::model::RejectKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Insert,
    Update,
    Delete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoggedOp {
    pub kind: OpKind,
    pub key: Key,
    pub info: Info,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rejection {
    pub kind: RejectKind,
    pub key: Key,
}

/// Append-only log of accepted operations; version i is `ops[i-1]`.
#[derive(Debug, Clone, Default)]
pub struct OpLog {
    ops: Vec<LoggedOp>,
    live: HashMap<Key, Info>,
    deleted: HashSet<Key>,
}

impl OpLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn current_version(&self) -> VersionId {
        VersionId(self.ops.len() as u64)
    }

    pub fn ops(&self) -> &[LoggedOp] {
        &self.ops
    }

    pub fn is_live(&self, key: Key) -> bool {
        self.live.contains_key(&key)
    }

    /// Validates and appends one operation. A rejected operation consumes
    /// no version.
    pub fn apply(&mut self, kind: OpKind, key: Key, info: Info) -> Result<VersionId, Rejection> {
        match kind {
            OpKind::Insert => {
                if self.live.contains_key(&key) {
                    return Err(Rejection { kind: RejectKind::InsertDuplicate, key });
                }
                if self.deleted.contains(&key) {
                    return Err(Rejection { kind: RejectKind::InsertAfterDelete, key });
                }
                self.live.insert(key, info);
            }
            OpKind::Update => {
                if !self.live.contains_key(&key) {
                    return Err(Rejection { kind: RejectKind::UpdateNonLive, key });
                }
                self.live.insert(key, info);
            }
            OpKind::Delete => {
                if !self.live.contains_key(&key) {
                    return Err(Rejection { kind: RejectKind::DeleteNonLive, key });
                }
                self.live.remove(&key);
                self.deleted.insert(key);
            }
        }
        self.ops.push(LoggedOp { kind, key, info });
        Ok(self.current_version())
    }

    /// Replays the first `version` operations and reports the live entries
    /// with key in `[lowkey, highkey]`. Pure; zero model I/O.
    pub fn range(&self, lowkey: Key, highkey: Key, version: VersionId) -> BTreeMap<Key, Info> {
        assert!(version.0 as usize <= self.ops.len(), "version beyond log");
        let mut map: BTreeMap<Key, Info> = BTreeMap::new();
        for op in &self.ops[..version.0 as usize] {
            match op.kind {
                OpKind::Insert | OpKind::Update => {
                    map.insert(op.key, op.info);
                }
                OpKind::Delete => {
                    map.remove(&op.key);
                }
            }
        }
        map.range(lowkey..=highkey).map(|(k, v)| (*k, *v)).collect()
    }

    /// Answers many `(lowkey, highkey, version)` queries with a single
    /// replay pass. Output order matches the input order.
    pub fn range_batch(&self, queries: &[(Key, Key, VersionId)]) -> Vec<BTreeMap<Key, Info>> {
        let mut order: Vec<usize> = (0..queries.len()).collect();
        order.sort_by_key(|&i| queries[i].2);
        let mut answers = vec![BTreeMap::new(); queries.len()];
        let mut map: BTreeMap<Key, Info> = BTreeMap::new();
        let mut version = 0usize;
        for &qi in &order {
            let (lo, hi, v) = queries[qi];
            assert!(v.0 as usize <= self.ops.len(), "version beyond log");
            while version < v.0 as usize {
                let op = &self.ops[version];
                match op.kind {
                    OpKind::Insert | OpKind::Update => {
                        map.insert(op.key, op.info);
                    }
                    OpKind::Delete => {
                        map.remove(&op.key);
                    }
                }
                version += 1;
            }
            answers[qi] = map.range(lo..=hi).map(|(k, v)| (*k, *v)).collect();
        }
        answers
    }

    /// Alternative answer route: reconstructs every key's lifespan chain
    /// (linking each version's deletion version to the next operation on
    /// the key, exactly as global buffer resolution would) and then filters
    /// by lifespan containment. Kept independent of [`OpLog::range`] as a
    /// cross-check of the lazy-resolution semantics.
    pub fn range_via_lifespans(
        &self,
        lowkey: Key,
        highkey: Key,
        version: VersionId,
    ) -> BTreeMap<Key, Info> {
        assert!(version.0 as usize <= self.ops.len(), "version beyond log");
        // key -> list of (in_version, del_version, info)
        let mut chains: BTreeMap<Key, Vec<(u64, u64, Info)>> = BTreeMap::new();
        for (i, op) in self.ops.iter().enumerate() {
            let v = (i + 1) as u64;
            match op.kind {
                OpKind::Insert => {
                    chains.entry(op.key).or_default().push((v, u64::MAX, op.info));
                }
                OpKind::Update => {
                    let chain = chains.entry(op.key).or_default();
                    if let Some(last) = chain.last_mut() {
                        last.1 = v;
                    }
                    chain.push((v, u64::MAX, op.info));
                }
                OpKind::Delete => {
                    if let Some(chain) = chains.get_mut(&op.key) {
                        if let Some(last) = chain.last_mut() {
                            last.1 = v;
                        }
                    }
                }
            }
        }
        let mut out = BTreeMap::new();
        for (key, chain) in chains.range(lowkey..=highkey) {
            for (iv, dv, info) in chain {
                if *iv <= version.0 && version.0 < *dv {
                    out.insert(*key, *info);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn info(v: u64) -> Info {
        Info::from_u64(v)
    }

    #[test]
    fn apply_examples() {
        let mut log = OpLog::new();
        assert_eq!(log.apply(OpKind::Insert, Key(5), info(1)), Ok(VersionId(1)));
        assert_eq!(log.len(), 1);

        let mut log = OpLog::new();
        let err = log.apply(OpKind::Update, Key(5), info(1)).unwrap_err();
        assert_eq!(err.kind, RejectKind::UpdateNonLive);

        let mut log = OpLog::new();
        log.apply(OpKind::Insert, Key(5), info(1)).unwrap();
        log.apply(OpKind::Delete, Key(5), info(0)).unwrap();
        let err = log.apply(OpKind::Insert, Key(5), info(2)).unwrap_err();
        assert_eq!(err.kind, RejectKind::InsertAfterDelete);
    }

    #[test]
    fn rejected_op_consumes_no_version() {
        let mut log = OpLog::new();
        log.apply(OpKind::Insert, Key(1), info(1)).unwrap();
        log.apply(OpKind::Insert, Key(1), info(2)).unwrap_err();
        assert_eq!(log.current_version(), VersionId(1));
    }

    #[test]
    fn range_examples() {
        let log = OpLog::new();
        assert!(log.range(Key(0), Key(100), VersionId(0)).is_empty());

        let mut log = OpLog::new();
        log.apply(OpKind::Insert, Key(5), info(10)).unwrap();
        log.apply(OpKind::Delete, Key(5), info(0)).unwrap();
        let at1 = log.range(Key(0), Key(9), VersionId(1));
        assert_eq!(at1.get(&Key(5)), Some(&info(10)));
        assert!(log.range(Key(0), Key(9), VersionId(2)).is_empty());
    }

    fn arb_ops() -> impl Strategy<Value = Vec<(u8, u64, u64)>> {
        proptest::collection::vec((0u8..3, 0u64..12, any::<u64>()), 0..60)
    }

    proptest! {
        #[test]
        fn dual_route_agreement(ops in arb_ops(), lo in 0u64..12, width in 0u64..12) {
            let mut log = OpLog::new();
            for (kind, key, inf) in ops {
                let kind = match kind { 0 => OpKind::Insert, 1 => OpKind::Update, _ => OpKind::Delete };
                let _ = log.apply(kind, Key(key), info(inf));
            }
            let hi = Key(lo + width);
            let lo = Key(lo);
            for v in 0..=log.len() as u64 {
                let v = VersionId(v);
                prop_assert_eq!(log.range(lo, hi, v), log.range_via_lifespans(lo, hi, v));
            }
        }

        #[test]
        fn batch_matches_single(ops in arb_ops()) {
            let mut log = OpLog::new();
            for (kind, key, inf) in ops {
                let kind = match kind { 0 => OpKind::Insert, 1 => OpKind::Update, _ => OpKind::Delete };
                let _ = log.apply(kind, Key(key), info(inf));
            }
            let mut queries = Vec::new();
            for v in 0..=log.len() as u64 {
                queries.push((Key(3), Key(9), VersionId(v)));
                queries.push((Key(0), Key(12), VersionId(v)));
            }
            let batch = log.range_batch(&queries);
            for (i, (lo, hi, v)) in queries.iter().enumerate() {
                prop_assert_eq!(&batch[i], &log.range(*lo, *hi, *v));
            }
        }
    }

    #[test]
    fn monotone_prefix() {
        let mut log = OpLog::new();
        log.apply(OpKind::Insert, Key(1), info(1)).unwrap();
        log.apply(OpKind::Insert, Key(2), info(2)).unwrap();
        let at1 = log.range(Key(0), Key(10), VersionId(1));
        log.apply(OpKind::Delete, Key(1), info(0)).unwrap();
        // answers at version 1 depend only on the first op
        assert_eq!(at1, log.range(Key(0), Key(10), VersionId(1)));
    }
}
