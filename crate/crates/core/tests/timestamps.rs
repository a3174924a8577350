//! Timestamp comparisons: the precomputed table against the direct
//! definition, and properties of updates.

use clocksync_core::adversary::SchedulerKind;
use clocksync_core::enmasse::{
    candidate_count, fresh_label, is_comparable, rank, ts_greater, updated_record, ComparableSetView, Label,
    OrderVector, PairTable, TimestampRecord,
};
use clocksync_core::sim::{run_scenario, InitKind, Scenario};
use clocksync_core::{Mode, NodeSet};
use proptest::prelude::*;

/// Records over a few label indices so that equal labels are common.
fn records() -> impl Strategy<Value = (usize, u32, Vec<TimestampRecord>)> {
    (3usize..=7).prop_flat_map(|n| {
        let pool = n as u32 + 2;
        let one = (
            proptest::collection::vec(0u32..3, n),
            Just((0..pool).collect::<Vec<u32>>()).prop_shuffle(),
        )
            .prop_map(move |(idx, seq)| TimestampRecord {
                time: idx.iter().enumerate().map(|(owner, &idx)| Label { owner, idx }).collect(),
                order: OrderVector { seq },
            });
        (Just(n), Just(pool), proptest::collection::vec(one, n))
    })
}

fn subset(n: usize) -> impl Strategy<Value = NodeSet> {
    (0u64..1 << n).prop_map(NodeSet::from_bits)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn table_matches_definition((n, pool, recs) in records(), w in subset(7)) {
        let w = w.intersection(NodeSet::full(n));
        let refs: Vec<&TimestampRecord> = recs.iter().collect();
        let table = PairTable::build(&refs, pool);
        prop_assert_eq!(table.valid(), NodeSet::full(n));
        let orders: Vec<&OrderVector> = recs.iter().map(|r| &r.order).collect();
        for a in 0..n {
            for b in 0..n {
                let direct = a != b && ts_greater(&recs[a], a, &recs[b], b, w, &orders);
                prop_assert_eq!(table.greater(a, b, w), direct, "a={} b={} w={:?}", a, b, w);
                if direct {
                    prop_assert!(!ts_greater(&recs[b], b, &recs[a], a, w, &orders));
                }
            }
        }
        let view = ComparableSetView::new(w, refs.clone());
        prop_assert_eq!(table.comparable(w), is_comparable(&view));
        if table.comparable(w) {
            let mut ranks: Vec<usize> = w.iter().map(|p| rank(&view, p).unwrap()).collect();
            for (p, r) in w.iter().zip(&ranks) {
                prop_assert_eq!(table.rank(w, p), *r);
            }
            ranks.sort();
            prop_assert_eq!(ranks, (1..=w.len()).collect::<Vec<_>>());
        }
    }

    #[test]
    fn update_installs_a_fresh_maximal_label((n, pool, recs) in records(), q in 0usize..7) {
        let q = q % n;
        let refs: Vec<&TimestampRecord> = recs.iter().collect();
        let fresh = fresh_label(&refs, q, pool).unwrap();
        prop_assert!(recs.iter().all(|r| r.time[q] != fresh));
        prop_assert!(fresh.idx < pool && fresh.owner == q);
        // Smallest unused index.
        prop_assert!((0..fresh.idx).all(|i| recs.iter().any(|r| r.time[q].idx == i)));
        let (rec, label) = updated_record(&refs, q, pool).unwrap();
        prop_assert_eq!(label, fresh);
        prop_assert!(rec.is_well_formed(n, pool));
        prop_assert_eq!(rec.time[q], fresh);
        prop_assert_eq!(rec.order.position(fresh.idx), Some(pool as usize - 1));
        for p in (0..n).filter(|&p| p != q) {
            prop_assert_eq!(rec.time[p], recs[p].time[p]);
        }
    }
}

#[test]
fn malformed_records_compare_with_nobody() {
    let n = 4;
    let pool = 6;
    let mut recs: Vec<TimestampRecord> = (0..n).map(|_| TimestampRecord::initial(n, pool)).collect();
    recs[2].order.seq.pop();
    let refs: Vec<&TimestampRecord> = recs.iter().collect();
    let table = PairTable::build(&refs, pool);
    assert_eq!(table.valid(), NodeSet::full(n).without(2));
    for a in 0..n {
        assert!(!table.greater(a, 2, NodeSet::full(n)));
        assert!(!table.greater(2, a, NodeSet::full(n)));
    }
    assert!(!table.comparable(NodeSet::full(n)));
}

#[test]
fn candidate_count_matches_enumeration() {
    for n in 1..=14usize {
        for f in 0..=3usize {
            let others = n - 1;
            let brute = (0u64..1 << others).filter(|m| m.count_ones() as usize <= f).count() as u64;
            assert_eq!(candidate_count(n, f), brute, "n={n} f={f}");
        }
    }
}

#[test]
fn honest_records_become_comparable() {
    let mut s = Scenario::new("ts", 13, 1, 8, Mode::EnMasseConstructed, SchedulerKind::RandomFair);
    s.init = InitKind::UniformRandomRegisters;
    s.horizon_rounds = 6;
    s.run_to_horizon = true;
    for seed in 0..5 {
        let out = run_scenario(&s, seed).unwrap();
        let em = out.trace.last_configuration().enmasse.as_ref().unwrap();
        let honest = s.honest();
        let refs: Vec<&TimestampRecord> = em.locals.iter().collect();
        let table = PairTable::build(&refs, 15);
        assert!(table.comparable(honest), "seed {seed}");
        let mut ranks: Vec<usize> = honest.iter().map(|p| table.rank(honest, p)).collect();
        ranks.sort();
        assert_eq!(ranks, (1..=12).collect::<Vec<_>>());
    }
}
