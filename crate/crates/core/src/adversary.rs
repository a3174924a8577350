//! Schedulers, Byzantine strategies and capture plans.
//!
//! The adversary sees the whole configuration and every past coin. Its
//! randomness comes from dedicated seed streams so that replaying a seed
//! replays its choices.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::asyncclock::{self, decide, Branch, Histogram};
use crate::enmasse::{self, OrderVector, TimestampRecord};
use crate::kernel::{Change, ClockValue, ConfigWriter, Configuration, Mode, Modulus, NodeId, NodeSet, Params, StepEvent};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Heuristic {
    /// Prefer nodes whose next step would flip a coin.
    CoinFirst,
    /// Prefer the node whose value has the least support in its own view.
    LaggingFirst,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum SchedulerKind {
    RoundRobin,
    RandomFair,
    EnMasseEnforcing,
    /// Full-information choice among the en masse eligible nodes.
    Adaptive { heuristic: Heuristic },
}

/// Picks which non-faulty node takes the next protocol step.
#[derive(Clone, Debug)]
pub struct Scheduler {
    kind: SchedulerKind,
    n: usize,
    threshold: usize,
    next_rr: usize,
    steps: u64,
    /// Distinct non-faulty nodes that stepped since each node's last step.
    since_last: Vec<NodeSet>,
    last_step: Vec<Option<u64>>,
}

impl Scheduler {
    pub fn new(kind: SchedulerKind, params: &Params) -> Scheduler {
        Scheduler {
            kind,
            n: params.n,
            threshold: params.en_masse_threshold(),
            next_rr: 0,
            steps: 0,
            since_last: alloc::vec![NodeSet::EMPTY; params.n],
            last_step: alloc::vec![None; params.n],
        }
    }

    pub fn kind(&self) -> SchedulerKind {
        self.kind
    }

    /// Non-faulty nodes that may step without breaking the en masse property.
    pub fn en_masse_eligible(&self, config: &Configuration) -> NodeSet {
        config
            .honest_set()
            .iter()
            .filter(|&p| self.last_step[p].is_none() || self.since_last[p].len() >= self.threshold)
            .collect()
    }

    pub fn next_actor(&mut self, config: &Configuration, params: &Params, rng: &mut ChaCha8Rng) -> Result<NodeId> {
        let honest = config.honest_set();
        if honest.is_empty() {
            return Err(Error::SchedulerDeadlock { event: self.steps as usize });
        }
        match self.kind {
            SchedulerKind::RoundRobin => {
                for _ in 0..self.n {
                    let p = self.next_rr;
                    self.next_rr = (self.next_rr + 1) % self.n;
                    if honest.contains(p) {
                        return Ok(p);
                    }
                }
                unreachable!("honest set is non-empty")
            }
            SchedulerKind::RandomFair => Ok(pick(honest, rng)),
            SchedulerKind::EnMasseEnforcing => {
                let eligible = self.en_masse_eligible(config);
                if eligible.is_empty() {
                    return Err(Error::SchedulerDeadlock { event: self.steps as usize });
                }
                Ok(pick(eligible, rng))
            }
            SchedulerKind::Adaptive { heuristic } => {
                let eligible = self.en_masse_eligible(config);
                if eligible.is_empty() {
                    return Err(Error::SchedulerDeadlock { event: self.steps as usize });
                }
                // Starved nodes go first so the run stays fair.
                let starve = 4 * self.n as u64;
                let starved: NodeSet = eligible
                    .iter()
                    .filter(|&p| self.last_step[p].is_some_and(|s| self.steps - s > starve))
                    .collect();
                if !starved.is_empty() {
                    return Ok(pick(starved, rng));
                }
                Ok(pick(preferred(heuristic, eligible, config, params), rng))
            }
        }
    }

    /// Records a finished event.
    pub fn observe(&mut self, event: &StepEvent) {
        if !event.is_protocol_step() {
            return;
        }
        let a = event.actor;
        for q in 0..self.n {
            if q != a {
                self.since_last[q].insert(a);
            }
        }
        self.since_last[a] = NodeSet::EMPTY;
        self.last_step[a] = Some(self.steps);
        self.steps += 1;
    }
}

fn pick(set: NodeSet, rng: &mut ChaCha8Rng) -> NodeId {
    let items: Vec<NodeId> = set.iter().collect();
    *items.choose(rng).expect("non-empty set")
}

fn column_hist(config: &Configuration, reader: NodeId, m: Modulus, writers: NodeSet) -> Histogram {
    let mut h = Histogram::new(m);
    for w in writers.iter() {
        h.add(m.reduce(*config.clock.get(w, reader)));
    }
    h
}

fn preferred(h: Heuristic, eligible: NodeSet, config: &Configuration, params: &Params) -> NodeSet {
    let m = params.modulus();
    let all = NodeSet::full(params.n);
    match h {
        Heuristic::CoinFirst => {
            let coin: NodeSet = eligible
                .iter()
                .filter(|&p| decide(&column_hist(config, p, m, all), params).branch == Branch::Coin)
                .collect();
            if coin.is_empty() {
                eligible
            } else {
                coin
            }
        }
        Heuristic::LaggingFirst => {
            let support = |p: NodeId| {
                let h = column_hist(config, p, m, all);
                asyncclock::count(&h, config.clock_value(p, m), 1)
            };
            let least = eligible.iter().map(support).min().unwrap_or(0);
            eligible.iter().filter(|&p| support(p) == least).collect()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum ByzantineKind {
    Silent,
    /// Random raw integers and random, sometimes malformed, records.
    UniformRandom,
    /// Readers with `2r < n` see the first value, the rest the second.
    /// Defaults to the honest plurality and its antipode.
    SplitPerReader {
        #[serde(default)]
        values: Option<(u32, u32)>,
    },
    /// Each reader sees a value just outside its best two-value window.
    AntiConvergence,
    /// Runs the honest step.
    BenignFollower,
}

/// Most common value among non-faulty `my_val`s, smallest on ties.
pub fn honest_plurality(config: &Configuration, m: Modulus) -> ClockValue {
    let mut h = Histogram::new(m);
    for p in config.honest_set().iter() {
        h.add(config.clock_value(p, m));
    }
    m.values().max_by_key(|&v| (h.get(v), core::cmp::Reverse(v))).unwrap_or(m.value(0))
}

/// Start of the width-2 window holding the most values, smallest on ties.
fn best_window(h: &Histogram) -> ClockValue {
    let m = h.modulus();
    m.values()
        .max_by_key(|&v| (asyncclock::count(h, v, 1), core::cmp::Reverse(v)))
        .unwrap_or(m.value(0))
}

fn camp_a(n: usize) -> NodeSet {
    (0..n).filter(|&r| 2 * r < n).collect()
}

/// One adversarial move: every currently faulty node rewrites its own cells.
pub fn byzantine_move(
    w: &mut ConfigWriter<'_>,
    kind: ByzantineKind,
    params: &Params,
    subset_cap: u64,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let faulty = w.config().faulty_set();
    let n = params.n;
    let m = params.modulus();
    let k = params.k as i64;
    let has_records = w.config().enmasse.is_some();
    for p in faulty.iter() {
        match kind {
            ByzantineKind::Silent => {}
            ByzantineKind::UniformRandom => {
                for r in 0..n {
                    if rng.gen_bool(0.5) {
                        w.write_clock_cell(p, r, rng.gen_range(-4 * k..4 * k));
                    }
                }
                if has_records {
                    for r in 0..n {
                        if rng.gen_bool(0.5) {
                            let record = random_record(n, params.label_pool(), rng);
                            w.push(Change::RecordCell { writer: p, reader: r, record });
                        }
                    }
                }
            }
            ByzantineKind::SplitPerReader { values } => {
                let (a, b) = match values {
                    Some((a, b)) => (m.reduce(a as i64), m.reduce(b as i64)),
                    None => {
                        let v = honest_plurality(w.config(), m);
                        (v, m.add(v, (params.k / 2) as i64))
                    }
                };
                let camp = camp_a(n);
                w.push(Change::ClockCells { writer: p, readers: camp, value: a.get() as i64 });
                w.push(Change::ClockCells { writer: p, readers: NodeSet::full(n).difference(camp), value: b.get() as i64 });
                if has_records {
                    honest_looking_record(w, p, camp, params)?;
                }
            }
            ByzantineKind::AntiConvergence => {
                let honest = w.config().honest_set();
                for r in 0..n {
                    let v = best_window(&column_hist(w.config(), r, m, honest));
                    let out = if r % 2 == 0 { m.add(v, -1) } else { m.add(v, 2) };
                    w.write_clock_cell(p, r, out.get() as i64);
                }
                if has_records {
                    let even: NodeSet = (0..n).filter(|r| r % 2 == 0).collect();
                    honest_looking_record(w, p, even, params)?;
                }
            }
            ByzantineKind::BenignFollower => match params.mode {
                Mode::EnMasseAssumed => {
                    asyncclock::run_step(w, p, params, rng);
                }
                Mode::EnMasseConstructed => {
                    enmasse::run_enmasse(w, p, params, subset_cap, |w| asyncclock::run_step(w, p, params, rng))?;
                }
            },
        }
    }
    Ok(())
}

/// Publishes the record an honest update would produce to `readers` only;
/// other readers keep the stale record.
fn honest_looking_record(w: &mut ConfigWriter<'_>, p: NodeId, readers: NodeSet, params: &Params) -> Result<()> {
    let snapshot = enmasse::snapshot_of(w.config(), p)?;
    let (record, _) = enmasse::updated_record(&snapshot, p, params.label_pool())?;
    w.push(Change::LocalRecord { node: p, record: record.clone() });
    w.push(Change::RecordCells { writer: p, readers, record });
    Ok(())
}

/// A random record; one in eight is malformed.
fn random_record(n: usize, pool: u32, rng: &mut ChaCha8Rng) -> TimestampRecord {
    let mut r = TimestampRecord::random(n, pool, rng);
    if rng.gen_ratio(1, 8) {
        match rng.gen_range(0..3) {
            0 => {
                r.time.pop();
            }
            1 => r.order = OrderVector { seq: alloc::vec![0; pool as usize] },
            _ => {
                let i = rng.gen_range(0..n);
                r.time[i].owner = (i + 1) % n.max(2);
            }
        }
    }
    r
}

/// One planned capture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capture {
    /// Number of protocol steps taken before the capture happens.
    pub at_step: u64,
    pub node: NodeId,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CapturePlan {
    pub captures: Vec<Capture>,
}

impl CapturePlan {
    /// Rejects plans that name unknown nodes or exceed the fault budget.
    pub fn validate(&self, params: &Params, initially_faulty: NodeSet) -> Result<()> {
        if self.captures.len() > params.f {
            return Err(Error::CapturePlan(alloc::format!(
                "{} captures planned but f={}",
                self.captures.len(),
                params.f
            )));
        }
        let mut all = initially_faulty;
        for c in &self.captures {
            if c.node >= params.n {
                return Err(Error::CapturePlan(alloc::format!("node {} out of range", c.node)));
            }
            all.insert(c.node);
        }
        if all.len() > params.f {
            return Err(Error::CapturePlan(alloc::format!(
                "{} nodes would end up faulty but f={}",
                all.len(),
                params.f
            )));
        }
        Ok(())
    }

    /// Nodes that are faulty once the plan has run.
    pub fn final_faulty(&self, initially_faulty: NodeSet) -> NodeSet {
        self.captures.iter().fold(initially_faulty, |s, c| s.with(c.node))
    }

    /// Captures due before protocol step `step`, in plan order.
    pub fn due(&self, step: u64) -> impl Iterator<Item = NodeId> + '_ {
        self.captures.iter().filter(move |c| c.at_step == step).map(|c| c.node)
    }
}

/// Marks `node` Byzantine. Capturing an already-faulty node is a no-op.
pub fn apply_capture(w: &mut ConfigWriter<'_>, node: NodeId) -> Result<()> {
    let c = w.config();
    if node >= c.n() {
        return Err(Error::CapturePlan(alloc::format!("node {node} out of range")));
    }
    if c.is_faulty(node) {
        return Ok(());
    }
    if c.captures_remaining == 0 {
        return Err(Error::CapturePlan(alloc::format!("no capture budget left for node {node}")));
    }
    w.push(Change::Capture { node });
    Ok(())
}
