//! Behavioral tests of the tree's public operations against the oracle
//! and the per-operation contracts.

use std::collections::BTreeMap;

use pbtree::model::{Info, Key, RejectKind, VersionId};
use pbtree::oracle::{OpKind, OpLog};
use pbtree::store::StoreConfig;
use pbtree::tree::{PersistentBufferTree, TreeConfig, TreeError};
use proptest::prelude::*;

fn mem_tree(block_elems: usize, fanout: usize, seed: u64) -> PersistentBufferTree {
    PersistentBufferTree::create(TreeConfig::new(StoreConfig::memory(block_elems, fanout), seed))
        .unwrap()
}

fn info(v: u64) -> Info {
    Info::from_u64(v)
}

#[test]
fn first_insert_creates_version_one_with_open_lifespan() {
    let mut tree = mem_tree(16, 8, 1);
    let v = tree.insert(Key(5), info(7)).unwrap();
    assert_eq!(v, VersionId(1));
    tree.flush().unwrap();
    let elems = tree.dump_elements().unwrap();
    assert_eq!(elems.len(), 1);
    assert_eq!(elems[0].lifespan.in_version, VersionId(1));
    assert!(elems[0].lifespan.del_version.is_open());
}

#[test]
fn staging_holds_b_minus_one_then_appends_one_block() {
    let mut tree = mem_tree(16, 8, 1);
    for k in 0..15u64 {
        tree.insert(Key(k), info(k)).unwrap();
    }
    assert_eq!(tree.stats().io.writes, 0, "B-1 inserts stay in staging");
    tree.insert(Key(15), info(15)).unwrap();
    let io = tree.stats().io;
    assert_eq!(io.writes, 1, "B-th insert appends exactly one block");
    assert_eq!(io.allocs, 1);
}

#[test]
fn first_overflow_runs_exactly_one_emptying() {
    // m·B + B inserts: the (m+1)-th block tips the root past m blocks.
    let mut tree = mem_tree(16, 8, 1);
    for k in 0..(8 * 16) as u64 {
        tree.insert(Key(k * 97), info(k)).unwrap();
    }
    assert_eq!(tree.metrics().invocations, 0);
    for k in 0..16u64 {
        tree.insert(Key(1_000_000 + k), info(k)).unwrap();
    }
    assert_eq!(tree.metrics().invocations, 1);
    assert!(tree.height() >= 1, "overflow created children");
}

#[test]
fn update_changes_info_per_version() {
    let mut tree = mem_tree(16, 8, 2);
    tree.insert(Key(5), info(100)).unwrap();
    tree.update(Key(5), info(200)).unwrap();
    let q1 = tree.range_search(Key(5), Key(5), VersionId(1)).unwrap();
    let q2 = tree.range_search(Key(5), Key(5), VersionId(2)).unwrap();
    let results = tree.flush().unwrap();
    assert_eq!(results[&q1].key_info(), BTreeMap::from([(Key(5), info(100))]));
    assert_eq!(results[&q2].key_info(), BTreeMap::from([(Key(5), info(200))]));
}

#[test]
fn update_of_missing_key_surfaces_at_flush() {
    let mut tree = mem_tree(16, 8, 3);
    tree.update(Key(5), info(1)).unwrap();
    tree.flush().unwrap();
    let errors = tree.structural_errors();
    assert_eq!(errors.len(), 1);
    assert_eq!(errors[0].kind, RejectKind::UpdateNonLive);
    assert_eq!(errors[0].version, VersionId(1));
    assert_eq!(errors[0].key, Key(5));
}

#[test]
fn update_chain_answers_every_version() {
    let mut tree = mem_tree(4, 4, 4);
    tree.insert(Key(9), info(0)).unwrap();
    for i in 1..=10u64 {
        tree.update(Key(9), info(i)).unwrap();
    }
    let tickets: Vec<_> = (1..=11u64)
        .map(|v| (v, tree.range_search(Key(9), Key(9), VersionId(v)).unwrap()))
        .collect();
    let results = tree.flush().unwrap();
    for (v, id) in tickets {
        let expect = BTreeMap::from([(Key(9), info(v - 1))]);
        assert_eq!(results[&id].key_info(), expect, "version {v}");
    }
}

#[test]
fn delete_respects_half_open_lifespan() {
    let mut tree = mem_tree(16, 8, 5);
    tree.insert(Key(5), info(50)).unwrap();
    tree.delete(Key(5)).unwrap();
    let q1 = tree.range_search(Key(0), Key(9), VersionId(1)).unwrap();
    let q2 = tree.range_search(Key(0), Key(9), VersionId(2)).unwrap();
    let results = tree.flush().unwrap();
    assert_eq!(results[&q1].key_info(), BTreeMap::from([(Key(5), info(50))]));
    assert!(results[&q2].key_info().is_empty());
    assert_eq!(tree.stats().live_elements, 0);
}

#[test]
fn delete_of_missing_key_surfaces_at_flush() {
    let mut tree = mem_tree(16, 8, 6);
    tree.delete(Key(7)).unwrap();
    tree.flush().unwrap();
    let errors = tree.structural_errors();
    assert_eq!(errors.len(), 1);
    assert_eq!(errors[0].kind, RejectKind::DeleteNonLive);
}

#[test]
fn query_on_empty_tree_completes_empty() {
    let mut tree = mem_tree(16, 8, 7);
    let q = tree.range_search(Key(0), Key(100), VersionId(0)).unwrap();
    let results = tree.flush().unwrap();
    assert!(results[&q].is_complete());
    assert!(results[&q].is_empty());
}

#[test]
fn range_query_reports_exact_interval() {
    let mut tree = mem_tree(16, 8, 8);
    for k in 1..=100u64 {
        tree.insert(Key(k), info(k)).unwrap();
    }
    let q = tree.range_search(Key(10), Key(20), VersionId(100)).unwrap();
    let results = tree.flush().unwrap();
    let expect: BTreeMap<Key, Info> = (10..=20u64).map(|k| (Key(k), info(k))).collect();
    assert_eq!(results[&q].key_info(), expect);
}

#[test]
fn future_version_is_rejected_immediately() {
    let mut tree = mem_tree(16, 8, 9);
    tree.insert(Key(1), info(1)).unwrap();
    let err = tree.range_search(Key(0), Key(9), VersionId(2)).unwrap_err();
    assert!(matches!(err, TreeError::VersionOutOfRange { .. }));
}

#[test]
fn flush_on_empty_tree_is_free() {
    let mut tree = mem_tree(16, 8, 10);
    tree.flush().unwrap();
    let io = tree.stats().io;
    assert_eq!(io.transfers(), 0, "flush of an empty tree does no I/O");
}

#[test]
fn second_flush_moves_nothing() {
    let mut tree = mem_tree(4, 4, 11);
    for k in 0..50u64 {
        tree.insert(Key(k * 13 % 97), info(k)).unwrap();
    }
    tree.range_search(Key(0), Key(96), VersionId(25)).unwrap();
    tree.flush().unwrap();
    let before = tree.stats().io;
    tree.flush().unwrap();
    let after = tree.stats().io;
    assert_eq!(before, after, "repeat flush is a no-op");
}

#[test]
fn exhaustive_small_history_sweep() {
    // 50 mixed ops over a small key space, then a query for every
    // (key-pair, version) combination; every answer must equal replay.
    let mut tree = mem_tree(2, 4, 12);
    let mut log = OpLog::new();
    let keys: Vec<u64> = (1..=16).map(|k| k * 10).collect();
    let mut rng_state = 0xdeadbeefu64;
    let mut rng = move || {
        rng_state ^= rng_state << 13;
        rng_state ^= rng_state >> 7;
        rng_state ^= rng_state << 17;
        rng_state
    };
    let mut n = 0;
    let mut attempts = 0;
    while n < 50 && attempts < 10_000 {
        attempts += 1;
        let k = Key(keys[(rng() % keys.len() as u64) as usize]);
        let inf = info(rng() % 1000);
        let op = match rng() % 8 {
            0..=3 => OpKind::Insert,
            4..=6 => OpKind::Update,
            _ => OpKind::Delete,
        };
        if log.apply(op, k, inf).is_ok() {
            match op {
                OpKind::Insert => tree.insert(k, inf).unwrap(),
                OpKind::Update => tree.update(k, inf).unwrap(),
                OpKind::Delete => tree.delete(k).unwrap(),
            };
            n += 1;
        }
    }
    assert_eq!(n, 50, "random walk exhausted the key space");
    let mut tickets = Vec::new();
    for i in (0..keys.len()).step_by(3) {
        for j in (i..keys.len()).step_by(3) {
            for v in 1..=50u64 {
                let id = tree
                    .range_search(Key(keys[i]), Key(keys[j]), VersionId(v))
                    .unwrap();
                tickets.push((id, Key(keys[i]), Key(keys[j]), VersionId(v)));
            }
        }
    }
    let results = tree.flush().unwrap();
    assert!(tree.structural_errors().is_empty());
    for (id, lo, hi, v) in tickets {
        assert_eq!(
            results[&id].key_info(),
            log.range(lo, hi, v),
            "query [{lo},{hi}]@{v}"
        );
    }
    assert!(tree.audit().unwrap().is_empty());
}

#[test]
fn childless_overflow_creates_children_and_retains_half() {
    let mut tree = mem_tree(4, 4, 13);
    // 4-block buffer capacity; (m+1)·B = 20 inserts force one emptying
    for k in 0..20u64 {
        tree.insert(Key(k * 7 + 1), info(k)).unwrap();
    }
    assert_eq!(tree.metrics().invocations, 1);
    assert!(tree.height() >= 1);
    assert_eq!(tree.metrics().occupancy_violations, 0);
}

#[test]
fn height_of_empty_and_unemptied_root_is_zero() {
    let mut tree = mem_tree(16, 8, 14);
    assert_eq!(tree.height(), 0);
    for k in 0..100u64 {
        tree.insert(Key(k), info(k)).unwrap();
    }
    // 100 < m·B = 128: never emptied
    assert_eq!(tree.height(), 0);
}

#[test]
fn audit_is_clean_after_random_soak() {
    let mix = pbtree::harness::Mix { insert: 0.5, update: 0.2, delete: 0.1, query: 0.2 };
    let spec = pbtree::harness::WorkloadSpec::new(10_000, mix, 99);
    let report = pbtree::harness::run_equivalence(&spec, StoreConfig::memory(16, 8)).unwrap();
    assert_eq!(report.mismatches, 0);
    assert!(report.structural_errors.is_empty());

    // re-run by hand to audit the final tree
    let (ops, _, _) = pbtree::harness::generate(&spec);
    let mut tree = mem_tree(16, 8, spec.seed);
    pbtree::harness::execute_ops(&mut tree, &ops).unwrap();
    tree.flush().unwrap();
    assert_eq!(tree.audit().unwrap(), vec![]);
}

#[test]
fn strict_mode_aborts_on_structural_error() {
    let mut cfg = TreeConfig::new(StoreConfig::memory(16, 8), 15);
    cfg.strict_audit = true;
    let mut tree = PersistentBufferTree::create(cfg).unwrap();
    tree.delete(Key(3)).unwrap();
    let err = tree.flush().unwrap_err();
    assert!(matches!(err, TreeError::Structural(_)));
}

#[test]
fn mixed_illegal_ops_match_oracle_rejections() {
    for seed in 0..6u64 {
        let mix = pbtree::harness::Mix { insert: 0.55, update: 0.25, delete: 0.2, query: 0.0 };
        let spec = pbtree::harness::WorkloadSpec::new(300, mix, seed);
        let (ops, expected) = pbtree::harness::generate_with_faults(&spec, 8);
        let mut tree = mem_tree(4, 4, seed);
        pbtree::harness::execute_ops(&mut tree, &ops).unwrap();
        tree.flush().unwrap();
        let got = tree.structural_errors();
        assert_eq!(got, expected, "seed {seed}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// The fundamental property: any legal operation sequence with
    /// interleaved queries answers exactly like the oracle after flush.
    #[test]
    fn tree_matches_oracle(
        ops in proptest::collection::vec((0u8..4, 0u64..24, 0u64..1000, 0u64..24), 1..120),
        seed in 0u64..1000,
        b in prop_oneof![Just(2usize), Just(4usize)],
    ) {
        let mut tree = mem_tree(b, 4, seed);
        let mut log = OpLog::new();
        let mut tickets = Vec::new();
        for (kind, key, inf, aux) in ops {
            let key = Key(key);
            let inf = info(inf);
            match kind {
                0 => {
                    if log.apply(OpKind::Insert, key, inf).is_ok() {
                        tree.insert(key, inf).unwrap();
                    }
                }
                1 => {
                    if log.apply(OpKind::Update, key, inf).is_ok() {
                        tree.update(key, inf).unwrap();
                    }
                }
                2 => {
                    if log.apply(OpKind::Delete, key, inf).is_ok() {
                        tree.delete(key).unwrap();
                    }
                }
                _ => {
                    let hi = Key(key.0 + aux % 8);
                    let version = VersionId(aux % (log.len() as u64 + 1));
                    let id = tree.range_search(key, hi, version).unwrap();
                    tickets.push((id, key, hi, version));
                }
            }
        }
        let results = tree.flush().unwrap();
        prop_assert!(tree.structural_errors().is_empty());
        for (id, lo, hi, v) in tickets {
            prop_assert_eq!(results[&id].key_info(), log.range(lo, hi, v));
        }
        prop_assert_eq!(tree.audit().unwrap(), vec![]);
    }
}
