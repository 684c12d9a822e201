// Scratch reproduction harness for shrunk failing sequences. Not part of
// the test suite.

use pbtree::model::{Info, Key, VersionId};
use pbtree::oracle::{OpKind, OpLog};
use pbtree::store::StoreConfig;
use pbtree::tree::{PersistentBufferTree, TreeConfig};

fn main() {
    let ops: Vec<(u8, u64, u64, u64)> = vec![
        (0, 1, 0, 0),
        (0, 14, 0, 0),
        (0, 4, 0, 0),
        (1, 14, 0, 0),
        (0, 10, 0, 0),
        (1, 4, 0, 0),
        (3, 0, 0, 0),
        (0, 15, 0, 0),
        (3, 0, 0, 0),
        (0, 2, 0, 0),
        (3, 0, 1, 23),
        (0, 11, 702, 11),
        (1, 1, 388, 23),
        (1, 10, 691, 23),
        (3, 4, 696, 14),
        (3, 17, 119, 7),
        (3, 2, 593, 2),
        (3, 13, 390, 0),
        (3, 6, 304, 6),
        (3, 11, 922, 4),
        (1, 1, 673, 20),
    ];
    let seed = 559;
    let b = 4;

    let mut tree = PersistentBufferTree::create(TreeConfig::new(
        StoreConfig::memory(b, 4),
        seed,
    ))
    .unwrap();
    let mut log = OpLog::new();
    let mut tickets = Vec::new();
    for (kind, key, inf, aux) in ops {
        let key = Key(key);
        let inf = Info::from_u64(inf);
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
    println!("errors: {:?}", tree.structural_errors());
    for (id, lo, hi, v) in tickets {
        let got = results[&id].key_info();
        let want = log.range(lo, hi, v);
        let marker = if got == want { "ok  " } else { "FAIL" };
        println!(
            "{marker} [{lo},{hi}]@{v}: got {:?} want {:?}",
            got.iter().map(|(k, i)| (k.0, i.as_u64())).collect::<Vec<_>>(),
            want.iter().map(|(k, i)| (k.0, i.as_u64())).collect::<Vec<_>>(),
        );
    }
    println!("audit: {:?}", tree.audit().unwrap());
    println!("height {}", tree.height());
    println!("{}", tree.dump_structure().unwrap());
}
// (structure dump appended by edit below)
