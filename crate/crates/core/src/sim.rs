//! Scenarios and the step loop.
//!
//! Each protocol step is preceded by one adversarial move in which every
//! faulty node may rewrite its own registers. Captures fire before the
//! protocol step whose ordinal they name.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::{apply_capture, byzantine_move, ByzantineKind, CapturePlan, Scheduler, SchedulerKind};
use crate::analysis::{honest_records_comparable, is_converged, is_tight, step_invariants, v_summary, StepCheck};
use crate::asyncclock;
use crate::enmasse::{self, TimestampRecord, DEFAULT_SUBSET_CAP};
use crate::kernel::{
    ClockValue, Configuration, EnMasseState, EventKind, Mode, NodeId, NodeSet, Params, RegisterMatrix, RoundTracker,
    RunTrace, StepEvent, TraceHeader,
};
use crate::rng::{stream, Stream};
use crate::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum InitKind {
    #[default]
    AllZero,
    Uniform {
        value: i64,
    },
    /// Every register and local value random; records random.
    UniformRandomRegisters,
    /// Honest values spread evenly around the circle; records random.
    AdversarialSpread,
    /// Consistent registers with at least `n - 2f` honest values in some
    /// `{v, v+1}`; records random.
    RandomTight,
    /// A configuration loaded from a file; the harness resolves it.
    ExplicitFile {
        path: String,
    },
    Explicit {
        config: Configuration,
    },
}

/// Online checks, evaluated while the run executes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Assertions {
    pub tight_closure: bool,
    pub step_invariants: bool,
    pub comparability: bool,
}

impl Assertions {
    pub fn all() -> Assertions {
        Assertions { tight_closure: true, step_invariants: true, comparability: true }
    }
}

fn default_true() -> bool {
    true
}

fn default_silent() -> ByzantineKind {
    ByzantineKind::Silent
}

fn default_extra() -> u64 {
    64
}

fn default_cap() -> u64 {
    DEFAULT_SUBSET_CAP
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub id: String,
    pub n: usize,
    pub f: usize,
    pub k: u32,
    pub mode: Mode,
    /// Enforce the redundancy bounds; relaxed runs carry no guarantee.
    #[serde(default = "default_true")]
    pub strict: bool,
    pub scheduler: SchedulerKind,
    #[serde(default = "default_silent")]
    pub byzantine: ByzantineKind,
    /// Initially faulty nodes. Defaults to the highest ids not named in
    /// the capture plan, enough to use the budget left after captures.
    #[serde(default)]
    pub faulty: Option<Vec<NodeId>>,
    #[serde(default)]
    pub captures: CapturePlan,
    #[serde(default)]
    pub init: InitKind,
    pub horizon_rounds: u64,
    #[serde(default)]
    pub max_events: Option<u64>,
    /// Keep going to the horizon instead of stopping after convergence.
    #[serde(default)]
    pub run_to_horizon: bool,
    /// Rounds to continue after convergence.
    #[serde(default = "default_extra")]
    pub extra_rounds: u64,
    #[serde(default)]
    pub assertions: Assertions,
    #[serde(default = "default_cap")]
    pub subset_cap: u64,
}

impl Scenario {
    /// A scenario with defaults for everything but the essentials.
    pub fn new(id: impl Into<String>, n: usize, f: usize, k: u32, mode: Mode, scheduler: SchedulerKind) -> Scenario {
        Scenario {
            id: id.into(),
            n,
            f,
            k,
            mode,
            strict: true,
            scheduler,
            byzantine: ByzantineKind::Silent,
            faulty: None,
            captures: CapturePlan::default(),
            init: InitKind::AllZero,
            horizon_rounds: 1000,
            max_events: None,
            run_to_horizon: false,
            extra_rounds: 64,
            assertions: Assertions::default(),
            subset_cap: DEFAULT_SUBSET_CAP,
        }
    }

    pub fn params(&self) -> Result<Params> {
        if self.strict {
            Params::new(self.n, self.f, self.k, self.mode)
        } else {
            Params::relaxed(self.n, self.f, self.k, self.mode)
        }
    }

    pub fn initially_faulty(&self) -> NodeSet {
        if let Some(list) = &self.faulty {
            return list.iter().copied().collect();
        }
        let planned: NodeSet = self.captures.captures.iter().map(|c| c.node).collect();
        let want = self.f.saturating_sub(planned.len());
        (0..self.n).rev().filter(|&p| !planned.contains(p)).take(want).collect()
    }

    /// Nodes faulty once every planned capture has happened.
    pub fn eventually_faulty(&self) -> NodeSet {
        self.captures.final_faulty(self.initially_faulty())
    }

    /// Nodes non-faulty for the whole run.
    pub fn honest(&self) -> NodeSet {
        NodeSet::full(self.n).difference(self.eventually_faulty())
    }

    pub fn validate(&self) -> Result<Params> {
        let params = self.params()?;
        if self.horizon_rounds == 0 {
            return Err(Error::Parameter("horizon must be at least one round".into()));
        }
        if let Some(list) = &self.faulty {
            if list.iter().any(|&p| p >= self.n) {
                return Err(Error::Parameter("faulty node out of range".into()));
            }
        }
        let init = self.initially_faulty();
        if init.len() > self.f {
            return Err(Error::Parameter(alloc::format!("{} initially faulty nodes exceed f={}", init.len(), self.f)));
        }
        self.captures.validate(&params, init)?;
        if let InitKind::Explicit { config } = &self.init {
            config.validate(&params)?;
            if self.mode == Mode::EnMasseConstructed && config.enmasse.is_none() {
                return Err(Error::Parameter("explicit configuration lacks timestamp records".into()));
            }
        }
        Ok(params)
    }
}

/// Builds the initial configuration for `scenario`.
pub fn initial_configuration(scenario: &Scenario, params: &Params, rng: &mut ChaCha8Rng) -> Result<Configuration> {
    let n = params.n;
    let k = params.k as i64;
    let faulty = scenario.initially_faulty();
    let honest: Vec<NodeId> = NodeSet::full(n).difference(faulty).iter().collect();
    let mut c = Configuration::uniform(params, 0, faulty);
    let mut random_records = true;
    let fill_consistent = |c: &mut Configuration, vals: &[(NodeId, i64)]| {
        for &(q, v) in vals {
            c.my_val[q] = v;
            c.clock.set_row(q, &v);
        }
    };
    match &scenario.init {
        InitKind::AllZero => random_records = false,
        InitKind::Uniform { value } => {
            c = Configuration::uniform(params, *value, faulty);
            random_records = false;
        }
        InitKind::UniformRandomRegisters => {
            c.clock = RegisterMatrix::from_fn(n, |_, _| rng.gen_range(0..4 * k));
            c.my_val = (0..n).map(|_| rng.gen_range(0..4 * k)).collect();
        }
        InitKind::AdversarialSpread => {
            let h = honest.len() as i64;
            let vals: Vec<(NodeId, i64)> = honest.iter().enumerate().map(|(j, &q)| (q, j as i64 * k / h)).collect();
            fill_consistent(&mut c, &vals);
            randomize_faulty_rows(&mut c, faulty, k, rng);
        }
        InitKind::RandomTight => {
            let v = rng.gen_range(0..k);
            let need = params.n_minus(2).max(1);
            let inside = rng.gen_range(need.min(honest.len())..=honest.len());
            let mut order = honest.clone();
            order.shuffle(rng);
            let vals: Vec<(NodeId, i64)> = order
                .iter()
                .enumerate()
                .map(|(j, &q)| (q, if j < inside { (v + rng.gen_range(0..2)) % k } else { rng.gen_range(0..k) }))
                .collect();
            fill_consistent(&mut c, &vals);
            randomize_faulty_rows(&mut c, faulty, k, rng);
        }
        InitKind::Explicit { config } => {
            c = config.clone();
            c.set_faulty_view(faulty);
            c.captures_remaining = params.f - faulty.len();
            random_records = false;
        }
        InitKind::ExplicitFile { path } => {
            return Err(Error::Parameter(alloc::format!("configuration file {path} was not loaded")));
        }
    }
    if params.mode == Mode::EnMasseConstructed && c.enmasse.is_none() {
        let pool = params.label_pool();
        c.enmasse = Some(if random_records {
            EnMasseState {
                registers: RegisterMatrix::from_fn(n, |_, _| TimestampRecord::random(n, pool, rng)),
                locals: (0..n).map(|_| TimestampRecord::random(n, pool, rng)).collect(),
            }
        } else {
            EnMasseState {
                registers: RegisterMatrix::filled(n, TimestampRecord::initial(n, pool)),
                locals: alloc::vec![TimestampRecord::initial(n, pool); n],
            }
        });
    }
    c.validate(params)?;
    Ok(c)
}

fn randomize_faulty_rows(c: &mut Configuration, faulty: NodeSet, k: i64, rng: &mut ChaCha8Rng) {
    for p in faulty.iter() {
        for r in 0..c.n() {
            c.clock.set(p, r, rng.gen_range(0..k));
        }
        c.my_val[p] = rng.gen_range(0..k);
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OnlineCheck {
    TightClosure,
    Step(StepCheck),
    Comparability,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OnlineViolation {
    pub event: usize,
    pub check: OnlineCheck,
}

/// One row of an experiment summary.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub seed: u64,
    pub converged: bool,
    /// Index of the first tight and consistent configuration.
    pub convergence_event: Option<usize>,
    /// Round in which it was reached; 0 when the initial configuration qualifies.
    pub convergence_round: Option<u64>,
    pub rounds: u64,
    pub events: usize,
    pub protocol_steps: u64,
    /// Tight configurations followed by a non-tight one, after convergence.
    pub post_convergence_violations: usize,
    pub vmin_changes: usize,
    /// Complete rounds after convergence per change of the minimum value.
    pub rounds_per_vmin_change: Option<f64>,
    pub online_violations: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub trace: RunTrace,
    pub summary: SummaryRow,
    pub violations: Vec<OnlineViolation>,
}

/// Runs `scenario` under `seed` until the horizon or the stop condition.
pub fn run_scenario(scenario: &Scenario, seed: u64) -> Result<RunOutput> {
    let params = scenario.validate()?;
    let n = params.n;
    let honest = scenario.honest();
    let m = params.modulus();

    let mut init_rng = stream(seed, Stream::Init);
    let mut sched_rng = stream(seed, Stream::Scheduler);
    let mut byz_rng = stream(seed, Stream::Byzantine);
    let mut coins: Vec<ChaCha8Rng> = (0..n).map(|p| stream(seed, Stream::Coin(p))).collect();

    let initial = initial_configuration(scenario, &params, &mut init_rng)?;
    let mut header = TraceHeader::new(params, scenario.id.clone(), seed);
    header.scenario = Some(scenario.clone());
    let mut trace = RunTrace::new(header, initial);
    let mut scheduler = Scheduler::new(scenario.scheduler, &params);
    let mut rounds = RoundTracker::new(n, trace.initial().faulty_set());

    let mut summary = SummaryRow { seed, ..Default::default() };
    let mut violations = Vec::new();
    let mut steps = 0u64;
    let mut prev_converged = is_converged(trace.initial(), honest, &params);
    let mut last_min: Option<ClockValue> = None;
    let mut comparable = false;
    if prev_converged {
        summary.convergence_event = Some(0);
        summary.convergence_round = Some(0);
        last_min = v_summary(trace.initial(), honest, &params).min();
    }

    let assertions = scenario.assertions;
    let mut on_event = |trace: &RunTrace,
                        rounds: &mut RoundTracker,
                        scheduler: &mut Scheduler,
                        violations: &mut Vec<OnlineViolation>,
                        summary: &mut SummaryRow| {
        let idx = trace.events().len() - 1;
        let e = &trace.events()[idx];
        scheduler.observe(e);
        rounds.observe(e);
        let c = trace.last_configuration();
        let tight = !is_tight(c, honest, &params).is_empty();
        let consistent = c.registers_consistent(honest, m);
        if prev_converged && !tight {
            summary.post_convergence_violations += 1;
            if assertions.tight_closure {
                violations.push(OnlineViolation { event: idx, check: OnlineCheck::TightClosure });
            }
        }
        let now = tight && consistent;
        if now && summary.convergence_event.is_none() {
            summary.convergence_event = Some(idx + 1);
            summary.convergence_round = Some(rounds.completed() + u64::from(rounds.open_events() > 0));
        }
        if summary.convergence_event.is_some() {
            let min = v_summary(c, honest, &params).min();
            if min != last_min && last_min.is_some() && min.is_some() {
                summary.vmin_changes += 1;
            }
            last_min = min;
        }
        prev_converged = now;
        if assertions.comparability && e.is_protocol_step() {
            if let Some(em) = &c.enmasse {
                let now_cmp = honest_records_comparable(&em.locals, honest, params.label_pool());
                if comparable && !now_cmp {
                    violations.push(OnlineViolation { event: idx, check: OnlineCheck::Comparability });
                }
                comparable = comparable || now_cmp;
            }
        }
    };

    loop {
        if rounds.completed() >= scenario.horizon_rounds {
            break;
        }
        if scenario.max_events.is_some_and(|cap| trace.events().len() as u64 >= cap) {
            break;
        }
        if !scenario.run_to_horizon {
            if let Some(r) = summary.convergence_round {
                if rounds.completed() >= r + scenario.extra_rounds {
                    break;
                }
            }
        }

        for node in scenario.captures.due(steps) {
            let recorded = trace.record(|w| {
                let was = w.config().is_faulty(node);
                apply_capture(w, node)?;
                Ok((!was).then(|| event(node, false, EventKind::Capture)))
            })?;
            if recorded.is_some() {
                on_event(&trace, &mut rounds, &mut scheduler, &mut violations, &mut summary);
            }
        }

        let faulty = trace.last_configuration().faulty_set();
        if !faulty.is_empty() && scenario.byzantine != ByzantineKind::Silent {
            let actor = faulty.iter().next().expect("non-empty");
            trace.record(|w| {
                byzantine_move(w, scenario.byzantine, &params, scenario.subset_cap, &mut byz_rng)?;
                Ok(Some(event(actor, true, EventKind::AdversarialMove)))
            })?;
            on_event(&trace, &mut rounds, &mut scheduler, &mut violations, &mut summary);
        }

        let q = scheduler.next_actor(trace.last_configuration(), &params, &mut sched_rng)?;
        let before = assertions.step_invariants.then(|| {
            let c = trace.last_configuration();
            Configuration {
                clock: c.clock.clone(),
                my_val: c.my_val.clone(),
                enmasse: None,
                fault: c.fault.clone(),
                captures_remaining: c.captures_remaining,
            }
        });
        let coin = &mut coins[q];
        trace.record(|w| {
            let mut e = event(q, false, EventKind::ProtocolStep);
            match params.mode {
                Mode::EnMasseAssumed => {
                    e.clock = Some(asyncclock::async_clock_step_in_place(w, q, &params, coin)?);
                }
                Mode::EnMasseConstructed => {
                    let (report, clock) = enmasse::enmasse_step_in_place(w, q, &params, scenario.subset_cap, |w| {
                        asyncclock::async_clock_step_in_place(w, q, &params, coin)
                    })?;
                    e.clock = clock.transpose()?;
                    e.enmasse = Some(report);
                }
            }
            e.coin_used = e.clock.as_ref().and_then(|t| t.coin);
            Ok(Some(e))
        })?;
        steps += 1;
        if let Some(before) = before {
            let e = trace.events().last().expect("just recorded");
            if let Some(t) = &e.clock {
                for check in step_invariants(&before, trace.last_configuration(), q, t, honest, &params) {
                    violations.push(OnlineViolation {
                        event: trace.events().len() - 1,
                        check: OnlineCheck::Step(check),
                    });
                }
            }
        }
        on_event(&trace, &mut rounds, &mut scheduler, &mut violations, &mut summary);
    }

    summary.converged = summary.convergence_event.is_some();
    summary.rounds = rounds.completed();
    summary.events = trace.events().len();
    summary.protocol_steps = steps;
    summary.online_violations = violations.len();
    if let Some(r) = summary.convergence_round {
        let after = summary.rounds.saturating_sub(r);
        if summary.vmin_changes > 0 && after > 0 {
            summary.rounds_per_vmin_change = Some(after as f64 / summary.vmin_changes as f64);
        }
    }
    Ok(RunOutput { trace, summary, violations })
}

fn event(actor: NodeId, faulty: bool, kind: EventKind) -> StepEvent {
    StepEvent { actor, actor_was_faulty: faulty, kind, coin_used: None, clock: None, enmasse: None, delta: Vec::new() }
}

impl SummaryRow {
    /// A row for a seed whose run failed.
    pub fn failed(seed: u64, err: &Error) -> SummaryRow {
        SummaryRow { seed, error: Some(err.to_string()), ..Default::default() }
    }
}
