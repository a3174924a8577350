//! Bounded timestamps that turn a fair scheduler into an en masse one.
//!
//! Every node publishes a vector of labels, one per node, and an order over
//! its own label pool. A node only "acts" when it finds a large comparable set
//! in which it ranks near the bottom, so between two of its acts many others
//! must have moved ahead of it.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::kernel::{Change, ConfigWriter, Configuration, NodeId, NodeSet, Params};
use crate::{Error, Result};

/// Default bound on candidate subsets examined per step.
pub const DEFAULT_SUBSET_CAP: u64 = 100_000;

/// Label `idx` from the pool of node `owner`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "(NodeId, u32)", into = "(NodeId, u32)")]
pub struct Label {
    pub owner: NodeId,
    pub idx: u32,
}

impl From<(NodeId, u32)> for Label {
    fn from((owner, idx): (NodeId, u32)) -> Label {
        Label { owner, idx }
    }
}

impl From<Label> for (NodeId, u32) {
    fn from(l: Label) -> (NodeId, u32) {
        (l.owner, l.idx)
    }
}

/// Order over one pool: later positions are larger.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct OrderVector {
    pub seq: Vec<u32>,
}

impl OrderVector {
    pub fn identity(pool: u32) -> OrderVector {
        OrderVector { seq: (0..pool).collect() }
    }

    pub fn is_permutation(&self, pool: u32) -> bool {
        if self.seq.len() != pool as usize {
            return false;
        }
        let mut seen = alloc::vec![false; pool as usize];
        for &x in &self.seq {
            match seen.get_mut(x as usize) {
                Some(s) if !*s => *s = true,
                _ => return false,
            }
        }
        true
    }

    pub fn position(&self, idx: u32) -> Option<usize> {
        self.seq.iter().position(|&x| x == idx)
    }

    /// Position of every pool index; assumes a valid permutation.
    fn inverse(&self) -> Vec<usize> {
        let mut inv = alloc::vec![0; self.seq.len()];
        for (pos, &x) in self.seq.iter().enumerate() {
            inv[x as usize] = pos;
        }
        inv
    }

    /// `idx` becomes the largest; the others keep their relative order.
    pub fn promote(&self, idx: u32) -> OrderVector {
        let mut seq: Vec<u32> = self.seq.iter().copied().filter(|&x| x != idx).collect();
        seq.push(idx);
        OrderVector { seq }
    }
}

/// A node's published timestamp: one label per node plus its own order.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TimestampRecord {
    pub time: Vec<Label>,
    pub order: OrderVector,
}

impl TimestampRecord {
    /// Label 0 everywhere and the identity order.
    pub fn initial(n: usize, pool: u32) -> TimestampRecord {
        TimestampRecord {
            time: (0..n).map(|owner| Label { owner, idx: 0 }).collect(),
            order: OrderVector::identity(pool),
        }
    }

    /// Uniformly random well-formed record.
    pub fn random<R: Rng + ?Sized>(n: usize, pool: u32, rng: &mut R) -> TimestampRecord {
        let time = (0..n).map(|owner| Label { owner, idx: rng.gen_range(0..pool) }).collect();
        let mut seq: Vec<u32> = (0..pool).collect();
        seq.shuffle(rng);
        TimestampRecord { time, order: OrderVector { seq } }
    }

    /// Right length, entry `i` of type `i`, indices in the pool, and a valid order.
    pub fn is_well_formed(&self, n: usize, pool: u32) -> bool {
        self.time.len() == n
            && self.time.iter().enumerate().all(|(i, l)| l.owner == i && l.idx < pool)
            && self.order.is_permutation(pool)
    }

    /// The record owner's own label, `time[owner]`.
    pub fn label_of(&self, owner: NodeId) -> Option<Label> {
        self.time.get(owner).copied()
    }
}

/// `a >= b` under `order` (equal labels included).
fn label_ge(order: &OrderVector, a: Label, b: Label) -> bool {
    match (order.position(a.idx), order.position(b.idx)) {
        (Some(x), Some(y)) => x >= y,
        _ => false,
    }
}

/// Whether record `a` of node `p` is greater than record `b` of node `q`
/// relative to `members`. `orders[i]` orders labels of type `i`.
pub fn ts_greater(
    a: &TimestampRecord,
    p: NodeId,
    b: &TimestampRecord,
    q: NodeId,
    members: NodeSet,
    orders: &[&OrderVector],
) -> bool {
    if !members.contains(p) || !members.contains(q) {
        return false;
    }
    let entry = |r: &TimestampRecord, i: NodeId| r.time.get(i).copied().filter(|l| l.owner == i);
    for i in members.iter() {
        match (entry(a, i), entry(b, i)) {
            (Some(x), Some(y)) if label_ge(orders[i], x, y) => {}
            _ => return false,
        }
    }
    let same_q = matches!((entry(a, q), entry(b, q)), (Some(x), Some(y)) if x == y);
    let ahead_p = matches!(
        (entry(a, p), entry(b, p)),
        (Some(x), Some(y)) if x != y && label_ge(orders[p], x, y)
    );
    same_q && ahead_p
}

/// A node set together with the records its members present.
#[derive(Clone, Debug)]
pub struct ComparableSetView<'a> {
    pub members: NodeSet,
    /// Indexed by node id; only members are consulted.
    pub records: Vec<&'a TimestampRecord>,
}

impl<'a> ComparableSetView<'a> {
    pub fn new(members: NodeSet, records: Vec<&'a TimestampRecord>) -> Self {
        ComparableSetView { members, records }
    }

    fn orders(&self) -> Vec<&OrderVector> {
        self.records.iter().map(|r| &r.order).collect()
    }

    pub fn greater(&self, p: NodeId, q: NodeId) -> bool {
        ts_greater(self.records[p], p, self.records[q], q, self.members, &self.orders())
    }
}

/// Every pair of members is strictly ordered one way.
pub fn is_comparable(view: &ComparableSetView<'_>) -> bool {
    let orders = view.orders();
    let ms: Vec<NodeId> = view.members.iter().collect();
    for (i, &p) in ms.iter().enumerate() {
        for &q in &ms[i + 1..] {
            let (rp, rq) = (view.records[p], view.records[q]);
            if !ts_greater(rp, p, rq, q, view.members, &orders) && !ts_greater(rq, q, rp, p, view.members, &orders) {
                return false;
            }
        }
    }
    true
}

/// 1 + number of members greater than `p`.
pub fn rank(view: &ComparableSetView<'_>, p: NodeId) -> Result<usize> {
    if !view.members.contains(p) {
        return Err(Error::Contract(alloc::format!("node {p} is not in the set")));
    }
    if !is_comparable(view) {
        return Err(Error::Contract("rank of a set that is not comparable".into()));
    }
    let orders = view.orders();
    Ok(1 + view
        .members
        .iter()
        .filter(|&o| o != p && ts_greater(view.records[o], o, view.records[p], p, view.members, &orders))
        .count())
}

/// Pairwise comparison tables for one snapshot. `a >_W b` reduces to
/// `W ⊆ ge[a][b] && eq[a][b] && gt[a][b]` for well-formed `a`, `b`.
#[derive(Clone, Debug)]
pub struct PairTable {
    n: usize,
    valid: NodeSet,
    ge: Vec<u64>,
    eq: Vec<bool>,
    gt: Vec<bool>,
}

impl PairTable {
    pub fn build(records: &[&TimestampRecord], pool: u32) -> PairTable {
        let n = records.len();
        let valid: NodeSet = (0..n).filter(|&p| records[p].is_well_formed(n, pool)).collect();
        let inv: Vec<Option<Vec<usize>>> =
            (0..n).map(|p| valid.contains(p).then(|| records[p].order.inverse())).collect();
        let mut ge = alloc::vec![0u64; n * n];
        let mut eq = alloc::vec![false; n * n];
        let mut gt = alloc::vec![false; n * n];
        for a in valid.iter() {
            for b in valid.iter() {
                if a == b {
                    continue;
                }
                let (ra, rb) = (records[a], records[b]);
                let mut mask = 0u64;
                for i in valid.iter() {
                    let pos = inv[i].as_ref().expect("valid");
                    if pos[ra.time[i].idx as usize] >= pos[rb.time[i].idx as usize] {
                        mask |= 1 << i;
                    }
                }
                ge[a * n + b] = mask;
                eq[a * n + b] = ra.time[b] == rb.time[b];
                let pa = inv[a].as_ref().expect("valid");
                gt[a * n + b] = pa[ra.time[a].idx as usize] > pa[rb.time[a].idx as usize];
            }
        }
        PairTable { n, valid, ge, eq, gt }
    }

    pub fn valid(&self) -> NodeSet {
        self.valid
    }

    pub fn greater(&self, a: NodeId, b: NodeId, w: NodeSet) -> bool {
        if a == b || !self.valid.intersection(w).contains(a) || !self.valid.intersection(w).contains(b) {
            return false;
        }
        let i = a * self.n + b;
        w.bits() & !self.ge[i] == 0 && self.eq[i] && self.gt[i]
    }

    pub fn comparable(&self, w: NodeSet) -> bool {
        if !w.is_subset(self.valid) {
            return false;
        }
        let ms: Vec<NodeId> = w.iter().collect();
        ms.iter().enumerate().all(|(i, &a)| ms[i + 1..].iter().all(|&b| self.greater(a, b, w) || self.greater(b, a, w)))
    }

    pub fn rank(&self, w: NodeSet, p: NodeId) -> usize {
        1 + w.iter().filter(|&a| self.greater(a, p, w)).count()
    }
}

/// Number of sets `W ⊇ {q}` with `|W| ≥ n - f`.
pub fn candidate_count(n: usize, f: usize) -> u64 {
    let m = n as u64 - 1;
    let mut total = 0u64;
    let mut c = 1u64; // C(m, i)
    for i in 0..=(f as u64).min(m) {
        total = total.saturating_add(c);
        c = c.saturating_mul(m - i) / (i + 1);
    }
    total
}

/// Smallest pool index of type `q` not held by any record in `snapshot`
/// (which includes `q`'s own local record).
pub fn fresh_label(snapshot: &[&TimestampRecord], q: NodeId, pool: u32) -> Result<Label> {
    let mut used = alloc::vec![false; pool as usize];
    for r in snapshot {
        if let Some(l) = r.time.get(q) {
            if l.owner == q && l.idx < pool {
                used[l.idx as usize] = true;
            }
        }
    }
    used.iter()
        .position(|u| !u)
        .map(|idx| Label { owner: q, idx: idx as u32 })
        .ok_or(Error::PoolExhausted { node: q, pool })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnMasseReport {
    pub candidates: u64,
    /// Candidate sets found comparable.
    pub comparable: u64,
    /// Lowest rank of `q` among the comparable sets examined.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lowest_rank: Option<usize>,
    pub updated: bool,
    pub acted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_label: Option<Label>,
}

/// What `q` sees: other nodes' registers toward `q`, and its own local record.
pub fn snapshot_of(config: &Configuration, q: NodeId) -> Result<Vec<&TimestampRecord>> {
    let em = config.enmasse.as_ref().ok_or_else(|| Error::Contract("configuration has no timestamp state".into()))?;
    Ok((0..config.n()).map(|p| if p == q { &em.locals[q] } else { em.registers.get(p, q) }).collect())
}

/// Decides update/act for `q` on a snapshot.
fn evaluate(snapshot: &[&TimestampRecord], q: NodeId, params: &Params, cap: u64) -> Result<(EnMasseReport, bool)> {
    let n = params.n;
    let f = params.f.min(n - 1);
    let candidates = candidate_count(n, f);
    if candidates > cap {
        return Err(Error::CapExceeded { size: candidates, cap });
    }
    let table = PairTable::build(snapshot, params.label_pool());
    let threshold = params.n_minus(3);
    let others = NodeSet::full(n).without(q);
    let mut comparable = 0u64;
    let mut lowest: Option<usize> = None;
    let mut qualifies = false;
    for_each_removal(others, f, &mut |removed| {
        let w = NodeSet::full(n).difference(removed);
        if table.comparable(w) {
            comparable += 1;
            let r = table.rank(w, q);
            lowest = Some(lowest.map_or(r, |x| x.max(r)));
            if r >= threshold {
                qualifies = true;
            }
        }
    });
    let update = qualifies || comparable == 0;
    Ok((
        EnMasseReport { candidates, comparable, lowest_rank: lowest, updated: update, acted: qualifies, new_label: None },
        qualifies,
    ))
}

/// Calls `visit` on every subset of `pool` with at most `max` elements.
fn for_each_removal(pool: NodeSet, max: usize, visit: &mut dyn FnMut(NodeSet)) {
    fn go(items: &[NodeId], start: usize, cur: NodeSet, left: usize, visit: &mut dyn FnMut(NodeSet)) {
        visit(cur);
        if left == 0 {
            return;
        }
        for i in start..items.len() {
            go(items, i + 1, cur.with(items[i]), left - 1, visit);
        }
    }
    let items: Vec<NodeId> = pool.iter().collect();
    go(&items, 0, NodeSet::EMPTY, max, visit);
}

/// The record `q` holds after an update on `snapshot`.
pub fn updated_record(snapshot: &[&TimestampRecord], q: NodeId, pool: u32) -> Result<(TimestampRecord, Label)> {
    let n = snapshot.len();
    let local = snapshot[q];
    let fresh = fresh_label(snapshot, q, pool)?;
    let time = (0..n)
        .map(|p| {
            if p == q {
                return fresh;
            }
            let seen = snapshot[p].time.get(p).copied().filter(|l| l.owner == p && l.idx < pool);
            let old = local.time.get(p).copied().filter(|l| l.owner == p && l.idx < pool);
            seen.or(old).unwrap_or(Label { owner: p, idx: 0 })
        })
        .collect();
    let base = if local.order.is_permutation(pool) { local.order.clone() } else { OrderVector::identity(pool) };
    Ok((TimestampRecord { time, order: base.promote(fresh.idx) }, fresh))
}

/// One atomic step of `q` in place. `act` runs inside the same step when the
/// update qualifies.
pub fn enmasse_step_in_place<T>(
    w: &mut ConfigWriter<'_>,
    q: NodeId,
    params: &Params,
    cap: u64,
    act: impl FnOnce(&mut ConfigWriter<'_>) -> T,
) -> Result<(EnMasseReport, Option<T>)> {
    if w.config().is_faulty(q) {
        return Err(Error::Contract(alloc::format!("node {q} is Byzantine; its moves belong to the adversary")));
    }
    run_enmasse(w, q, params, cap, act)
}

pub(crate) fn run_enmasse<T>(
    w: &mut ConfigWriter<'_>,
    q: NodeId,
    params: &Params,
    cap: u64,
    act: impl FnOnce(&mut ConfigWriter<'_>) -> T,
) -> Result<(EnMasseReport, Option<T>)> {
    let snapshot = snapshot_of(w.config(), q)?;
    let (mut report, acts) = evaluate(&snapshot, q, params, cap)?;
    let record = if report.updated {
        let (rec, label) = updated_record(&snapshot, q, params.label_pool())?;
        report.new_label = Some(label);
        Some(rec)
    } else {
        None
    };
    let record = match record {
        Some(r) => {
            w.push(Change::LocalRecord { node: q, record: r.clone() });
            r
        }
        None => snapshot[q].clone(),
    };
    let out = acts.then(|| act(w));
    w.push(Change::RecordRow { writer: q, record });
    Ok((report, out))
}

/// One atomic step of `q` on a copy of `config`.
pub fn enmasse_step<T>(
    config: &Configuration,
    q: NodeId,
    params: &Params,
    cap: u64,
    act: impl FnOnce(&mut ConfigWriter<'_>) -> T,
) -> Result<(Configuration, EnMasseReport, Option<T>)> {
    let mut next = config.clone();
    let mut w = ConfigWriter::new(&mut next);
    let (report, out) = enmasse_step_in_place(&mut w, q, params, cap, act)?;
    drop(w);
    Ok((next, report, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{EnMasseState, Mode, RegisterMatrix};

    fn label(owner: NodeId, idx: u32) -> Label {
        Label { owner, idx }
    }

    fn rec(time: &[u32], order: &[u32]) -> TimestampRecord {
        TimestampRecord {
            time: time.iter().enumerate().map(|(i, &x)| label(i, x)).collect(),
            order: OrderVector { seq: order.to_vec() },
        }
    }

    #[test]
    fn two_node_greater() {
        // p=0 updated to label 1 after seeing q's label 0.
        let a = rec(&[1, 0], &[0, 1, 2, 3]);
        let b = rec(&[0, 0], &[0, 1, 2, 3]);
        let orders = [&a.order, &b.order];
        let both = NodeSet::full(2);
        assert!(ts_greater(&a, 0, &b, 1, both, &orders));
        assert!(!ts_greater(&b, 1, &a, 0, both, &orders));
        assert!(!ts_greater(&a, 0, &a, 0, both, &orders));
        let view = ComparableSetView::new(both, alloc::vec![&a, &b]);
        assert!(is_comparable(&view));
        assert_eq!(rank(&view, 0).unwrap(), 1);
        assert_eq!(rank(&view, 1).unwrap(), 2);
        let c = rec(&[1, 2], &[0, 1, 2, 3]);
        assert!(!ts_greater(&a, 0, &c, 1, both, &[&a.order, &c.order]));
    }

    #[test]
    fn equal_records_not_comparable() {
        let a = rec(&[0, 0], &[0, 1, 2, 3]);
        let view = ComparableSetView::new(NodeSet::full(2), alloc::vec![&a, &a]);
        assert!(!is_comparable(&view));
        assert!(rank(&view, 0).is_err());
        let single = ComparableSetView::new(NodeSet::single(0), alloc::vec![&a, &a]);
        assert!(is_comparable(&single));
    }

    #[test]
    fn chain_ranks() {
        // 2 saw 1 which saw 0.
        let r0 = rec(&[1, 0, 0], &[0, 1, 2, 3, 4]);
        let r1 = rec(&[1, 1, 0], &[0, 1, 2, 3, 4]);
        let r2 = rec(&[1, 1, 1], &[0, 1, 2, 3, 4]);
        let view = ComparableSetView::new(NodeSet::full(3), alloc::vec![&r0, &r1, &r2]);
        assert!(is_comparable(&view));
        assert_eq!(rank(&view, 2).unwrap(), 1);
        assert_eq!(rank(&view, 1).unwrap(), 2);
        assert_eq!(rank(&view, 0).unwrap(), 3);
        let t = PairTable::build(&view.records, 5);
        assert!(t.comparable(NodeSet::full(3)));
        assert_eq!(t.rank(NodeSet::full(3), 0), 3);
    }

    #[test]
    fn order_vectors() {
        let o = OrderVector { seq: alloc::vec![2, 0, 1, 3] };
        assert!(o.is_permutation(4));
        assert_eq!(o.promote(0).seq, [2, 1, 3, 0]);
        assert!(!OrderVector { seq: alloc::vec![0, 0, 1] }.is_permutation(3));
        assert!(!OrderVector { seq: alloc::vec![0, 5, 1] }.is_permutation(3));
    }

    #[test]
    fn fresh_label_examples() {
        let n = 3;
        let pool = 5;
        let recs: Vec<TimestampRecord> = (0..=n as u32).map(|i| rec(&[i, 0, 0], &[0, 1, 2, 3, 4])).collect();
        let snap: Vec<&TimestampRecord> = recs.iter().collect();
        assert_eq!(fresh_label(&snap, 0, pool).unwrap(), label(0, 4));
        let one = rec(&[0, 0, 0], &[0, 1, 2, 3, 4]);
        assert_eq!(fresh_label(&[&one, &one, &one], 0, pool).unwrap(), label(0, 1));
        assert!(fresh_label(&[&one], 0, 1).is_err());
    }

    #[test]
    fn candidate_counts() {
        assert_eq!(candidate_count(13, 1), 13);
        assert_eq!(candidate_count(13, 0), 1);
        assert_eq!(candidate_count(25, 2), 1 + 24 + 276);
        let mut seen = 0;
        for_each_removal(NodeSet::full(13).without(4), 1, &mut |_| seen += 1);
        assert_eq!(seen, 13);
    }

    fn config_with(params: &Params, recs: Vec<TimestampRecord>) -> Configuration {
        let n = params.n;
        let mut c = Configuration::uniform(params, 0, NodeSet::EMPTY);
        c.enmasse = Some(EnMasseState {
            registers: RegisterMatrix::from_fn(n, |w, _| recs[w].clone()),
            locals: recs,
        });
        c
    }

    #[test]
    fn bottom_of_full_chain_updates_and_acts() {
        let params = Params::new(13, 1, 8, Mode::EnMasseConstructed).unwrap();
        let pool = params.label_pool();
        // Node i has seen the updates of nodes 0..i, giving a chain 12 > 11 > ... > 0.
        let recs: Vec<TimestampRecord> = (0..13)
            .map(|i| TimestampRecord {
                time: (0..13).map(|j| label(j, u32::from(j <= i))).collect(),
                order: OrderVector::identity(pool),
            })
            .collect();
        let c = config_with(&params, recs);
        let snap = snapshot_of(&c, 0).unwrap();
        assert!(PairTable::build(&snap, pool).comparable(NodeSet::full(13)));
        let (next, report, acted) = enmasse_step(&c, 0, &params, DEFAULT_SUBSET_CAP, |_| 7).unwrap();
        assert!(report.updated && report.acted);
        assert_eq!(acted, Some(7));
        assert_eq!(report.candidates, 13);
        assert_eq!(report.lowest_rank, Some(13));
        let new = &next.enmasse.as_ref().unwrap().locals[0];
        assert_eq!(new.time[0], label(0, 0));
        assert_eq!(new.order.seq, [1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 0]);
        assert_eq!(new.time[5], label(5, 1));
        assert!(next.enmasse.as_ref().unwrap().registers.row(0).iter().all(|r| r == new));

        // The top of the chain ranks 1 < n - 3f and neither updates nor acts.
        let (_, report, acted) = enmasse_step(&c, 12, &params, DEFAULT_SUBSET_CAP, |_| ()).unwrap();
        assert!(!report.updated && acted.is_none());
        assert!(report.comparable > 0);
    }

    #[test]
    fn incomparable_records_update_without_acting() {
        let params = Params::new(13, 1, 8, Mode::EnMasseConstructed).unwrap();
        let recs = (0..13).map(|_| TimestampRecord::initial(13, params.label_pool())).collect();
        let c = config_with(&params, recs);
        let (next, report, acted) = enmasse_step(&c, 3, &params, DEFAULT_SUBSET_CAP, |_| ()).unwrap();
        assert_eq!(report.comparable, 0);
        assert!(report.updated && !report.acted && acted.is_none());
        assert_eq!(next.enmasse.unwrap().locals[3].time[3], label(3, 1));
    }

    #[test]
    fn subset_cap_enforced() {
        let params = Params::new(13, 1, 8, Mode::EnMasseConstructed).unwrap();
        let recs = (0..13).map(|_| TimestampRecord::initial(13, params.label_pool())).collect();
        let c = config_with(&params, recs);
        assert!(matches!(
            enmasse_step(&c, 0, &params, 12, |_| ()),
            Err(Error::CapExceeded { size: 13, cap: 12 })
        ));
    }

    #[test]
    fn labels_serialize_as_pairs() {
        let l = label(3, 7);
        let v: (NodeId, u32) = l.into();
        assert_eq!(v, (3, 7));
    }
}
