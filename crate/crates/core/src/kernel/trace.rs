use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{Change, ConfigWriter, Configuration, NodeId, NodeSet, Params};
use crate::asyncclock::StepTrace;
use crate::enmasse::EnMasseReport;
use crate::sim::Scenario;
use crate::{Error, Result};

pub const TRACE_FORMAT: &str = "clocksync-trace";
pub const TRACE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    /// A non-faulty node's atomic step.
    ProtocolStep,
    /// The adversary's turn for a faulty node.
    AdversarialMove,
    /// The adversary captures a node.
    Capture,
    /// Arbitrary corruption of any state, used to model transient faults.
    TransientFault,
}

/// One event of a run together with the delta it applied.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepEvent {
    pub actor: NodeId,
    pub actor_was_faulty: bool,
    pub kind: EventKind,
    /// Index into the coin domain when the clock step flipped a coin.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coin_used: Option<u32>,
    /// Present whenever the clock step executed during this event.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clock: Option<StepTrace>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enmasse: Option<EnMasseReport>,
    pub delta: Vec<Change>,
}

impl StepEvent {
    pub fn is_protocol_step(&self) -> bool {
        self.kind == EventKind::ProtocolStep
    }

    /// A non-faulty step that ran the clock step ("act").
    pub fn acted(&self) -> bool {
        self.is_protocol_step() && self.clock.is_some()
    }

    pub fn captured(&self) -> Option<NodeId> {
        match self.kind {
            EventKind::Capture => Some(self.actor),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub format: String,
    pub version: u32,
    pub params: Params,
    pub scenario_id: String,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<Scenario>,
}

impl TraceHeader {
    pub fn new(params: Params, scenario_id: impl Into<String>, seed: u64) -> TraceHeader {
        TraceHeader {
            format: TRACE_FORMAT.into(),
            version: TRACE_VERSION,
            params,
            scenario_id: scenario_id.into(),
            seed,
            scenario: None,
        }
    }
}

const DEFAULT_KEYFRAME_INTERVAL: usize = 1024;

/// A finite run prefix. Configuration `i` is the state after the first `i`
/// events; configuration 0 is the initial one. Events store deltas and full
/// keyframes are kept every `keyframe_interval` configurations.
#[derive(Clone, Debug)]
pub struct RunTrace {
    pub header: TraceHeader,
    initial: Configuration,
    events: Vec<StepEvent>,
    keyframes: Vec<Configuration>,
    keyframe_interval: usize,
    last: Configuration,
}

impl RunTrace {
    pub fn new(header: TraceHeader, initial: Configuration) -> RunTrace {
        RunTrace {
            header,
            keyframes: alloc::vec![initial.clone()],
            last: initial.clone(),
            initial,
            events: Vec::new(),
            keyframe_interval: DEFAULT_KEYFRAME_INTERVAL,
        }
    }

    /// Rebuilds a trace from its initial configuration and events,
    /// replaying every delta.
    pub fn from_parts(header: TraceHeader, initial: Configuration, events: Vec<StepEvent>) -> Result<RunTrace> {
        let mut t = RunTrace::new(header, initial);
        for e in events {
            t.push(e)?;
        }
        Ok(t)
    }

    pub fn push(&mut self, event: StepEvent) -> Result<()> {
        for ch in &event.delta {
            ch.apply(&mut self.last)?;
        }
        self.events.push(event);
        if self.events.len() % self.keyframe_interval == 0 {
            self.keyframes.push(self.last.clone());
        }
        Ok(())
    }

    /// Runs `build` against the latest configuration and records the event
    /// it returns, with the delta of everything `build` wrote. Returning
    /// `None` records nothing; `build` must then leave the state untouched.
    pub fn record(
        &mut self,
        build: impl FnOnce(&mut ConfigWriter<'_>) -> Result<Option<StepEvent>>,
    ) -> Result<Option<&StepEvent>> {
        let mut w = ConfigWriter::new(&mut self.last);
        let event = build(&mut w)?;
        let delta = w.into_delta();
        let Some(mut event) = event else {
            debug_assert!(delta.is_empty());
            return Ok(None);
        };
        event.delta = delta;
        self.events.push(event);
        if self.events.len() % self.keyframe_interval == 0 {
            self.keyframes.push(self.last.clone());
        }
        Ok(self.events.last())
    }

    pub fn params(&self) -> &Params {
        &self.header.params
    }

    pub fn initial(&self) -> &Configuration {
        &self.initial
    }

    pub fn events(&self) -> &[StepEvent] {
        &self.events
    }

    pub fn last_configuration(&self) -> &Configuration {
        &self.last
    }

    /// Number of configurations, one more than the number of events.
    pub fn len(&self) -> usize {
        self.events.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Nodes that are Byzantine at the end of the trace. Since captures are
    /// permanent, the complement is the set of nodes non-faulty throughout.
    pub fn eventually_faulty(&self) -> NodeSet {
        self.last.faulty_set()
    }

    pub fn configuration_at(&self, index: usize) -> Result<Configuration> {
        if index > self.events.len() {
            return Err(Error::Trace(format!(
                "configuration {index} beyond trace of {} events",
                self.events.len()
            )));
        }
        let kf = index / self.keyframe_interval;
        let mut c = self.keyframes[kf].clone();
        for e in &self.events[kf * self.keyframe_interval..index] {
            for ch in &e.delta {
                ch.apply(&mut c)?;
            }
        }
        Ok(c)
    }

    /// Sequential walk over configurations starting at `index`.
    pub fn cursor_at(&self, index: usize) -> Result<TraceCursor<'_>> {
        Ok(TraceCursor { trace: self, index, config: self.configuration_at(index)?, faulty_view: None })
    }

    pub fn cursor(&self) -> TraceCursor<'_> {
        TraceCursor { trace: self, index: 0, config: self.initial.clone(), faulty_view: None }
    }
}

/// Walks the configurations of a trace in order.
pub struct TraceCursor<'a> {
    trace: &'a RunTrace,
    index: usize,
    config: Configuration,
    faulty_view: Option<NodeSet>,
}

impl<'a> TraceCursor<'a> {
    /// Presents every configuration with the given nodes marked Byzantine.
    pub fn with_faulty_view(mut self, faulty: NodeSet) -> Self {
        self.faulty_view = Some(faulty);
        self.config.set_faulty_view(faulty);
        self
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn config(&self) -> &Configuration {
        &self.config
    }

    /// The event leading out of the current configuration, if any.
    pub fn next_event(&self) -> Option<&'a StepEvent> {
        self.trace.events.get(self.index)
    }

    /// Applies the next event; returns it, or `None` at the end.
    pub fn advance(&mut self) -> Result<Option<&'a StepEvent>> {
        let Some(e) = self.trace.events.get(self.index) else {
            return Ok(None);
        };
        for ch in &e.delta {
            ch.apply(&mut self.config)?;
        }
        if let Some(view) = self.faulty_view {
            self.config.set_faulty_view(view);
        }
        self.index += 1;
        Ok(Some(e))
    }
}

/// Online round segmentation. A round ends with the first event after which
/// every node that was non-faulty throughout the round has performed a
/// protocol step.
#[derive(Clone, Debug)]
pub struct RoundTracker {
    n: usize,
    faulty: NodeSet,
    required: NodeSet,
    stepped: NodeSet,
    events_in_round: usize,
    completed: u64,
}

impl RoundTracker {
    pub fn new(n: usize, faulty: NodeSet) -> RoundTracker {
        RoundTracker {
            n,
            faulty,
            required: NodeSet::full(n).difference(faulty),
            stepped: NodeSet::EMPTY,
            events_in_round: 0,
            completed: 0,
        }
    }

    /// Feeds one event; returns true when it closes a round.
    pub fn observe(&mut self, event: &StepEvent) -> bool {
        self.events_in_round += 1;
        if let Some(node) = event.captured() {
            self.faulty.insert(node);
            self.required.remove(node);
        }
        if event.is_protocol_step() {
            self.stepped.insert(event.actor);
        }
        if self.required.is_subset(self.stepped) {
            self.completed += 1;
            self.events_in_round = 0;
            self.stepped = NodeSet::EMPTY;
            self.required = NodeSet::full(self.n).difference(self.faulty);
            true
        } else {
            false
        }
    }

    pub fn completed(&self) -> u64 {
        self.completed
    }

    /// Events seen since the last boundary.
    pub fn open_events(&self) -> usize {
        self.events_in_round
    }
}

/// Round boundaries of a trace.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rounds {
    /// Index of the last event of each complete round.
    pub boundaries: Vec<usize>,
    /// First event of the incomplete final round, if there is one.
    pub open_from: Option<usize>,
}

impl Rounds {
    pub fn complete(&self) -> usize {
        self.boundaries.len()
    }

    /// 1-based round number containing event `e`.
    pub fn round_of(&self, e: usize) -> usize {
        self.boundaries.partition_point(|&b| b < e) + 1
    }

    /// Event range of 1-based round `r`, when complete.
    pub fn events_of(&self, r: usize) -> Option<core::ops::RangeInclusive<usize>> {
        if r == 0 || r > self.boundaries.len() {
            return None;
        }
        let start = if r == 1 { 0 } else { self.boundaries[r - 2] + 1 };
        Some(start..=self.boundaries[r - 1])
    }
}

/// Splits `events` into rounds, starting from `initial_faulty`.
pub fn segment_events(n: usize, initial_faulty: NodeSet, events: &[StepEvent]) -> Rounds {
    let mut tracker = RoundTracker::new(n, initial_faulty);
    let mut boundaries = Vec::new();
    for (i, e) in events.iter().enumerate() {
        if tracker.observe(e) {
            boundaries.push(i);
        }
    }
    let next = boundaries.last().map_or(0, |&b| b + 1);
    let open_from = (next < events.len()).then_some(next);
    Rounds { boundaries, open_from }
}

pub fn segment_rounds(trace: &RunTrace) -> Rounds {
    segment_events(trace.params().n, trace.initial().faulty_set(), trace.events())
}

/// Which protocol steps count for the en masse check.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepSelector {
    #[default]
    ProtocolSteps,
    /// Only steps that ran the clock step.
    Acts,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct EnMasseOptions {
    /// Overrides the default `min(n - 2f, n - 1)`.
    pub threshold: Option<usize>,
    pub selector: StepSelector,
    /// Pairs whose first step precedes this event are not checked.
    pub from_event: usize,
    /// Only steps by these nodes count; defaults to every node.
    pub only: Option<NodeSet>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnMasseViolation {
    pub node: NodeId,
    pub first_event: usize,
    pub second_event: usize,
    pub distinct: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub horizon_events: usize,
    pub complete_rounds: usize,
    /// Nodes non-faulty at the end that never took a counted step.
    pub never_stepped: NodeSet,
}

impl FairnessReport {
    pub fn fair_over_horizon(&self) -> bool {
        self.complete_rounds > 0 && self.never_stepped.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnMasseVerdict {
    pub threshold: usize,
    /// True when `n - 2f` was replaced by `n - 1` (only at `f = 0`).
    pub substituted: bool,
    pub pairs_checked: usize,
    pub violations: Vec<EnMasseViolation>,
    pub fairness: FairnessReport,
}

impl EnMasseVerdict {
    pub fn holds(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks that between any two consecutive counted steps of a non-faulty
/// node, enough distinct other non-faulty nodes took counted steps.
pub fn verify_en_masse(trace: &RunTrace, opts: EnMasseOptions) -> EnMasseVerdict {
    let p = trace.params();
    let n = p.n;
    let threshold = opts.threshold.unwrap_or_else(|| p.en_masse_threshold());
    let substituted = opts.threshold.is_none() && p.n_minus(2) > p.n - 1;

    let only = opts.only.unwrap_or(NodeSet::full(n));
    let counted = |e: &StepEvent| {
        only.contains(e.actor)
            && match opts.selector {
                StepSelector::ProtocolSteps => e.is_protocol_step(),
                StepSelector::Acts => e.acted(),
            }
    };

    let mut last: Vec<Option<usize>> = alloc::vec![None; n];
    let mut between: Vec<NodeSet> = alloc::vec![NodeSet::EMPTY; n];
    let mut stepped = NodeSet::EMPTY;
    let mut violations = Vec::new();
    let mut pairs = 0;

    for (i, e) in trace.events().iter().enumerate() {
        if let Some(node) = e.captured() {
            last[node] = None;
            continue;
        }
        if !counted(e) {
            continue;
        }
        let a = e.actor;
        stepped.insert(a);
        if let Some(prev) = last[a] {
            if prev >= opts.from_event {
                pairs += 1;
                let distinct = between[a].len();
                if distinct < threshold {
                    violations.push(EnMasseViolation { node: a, first_event: prev, second_event: i, distinct });
                }
            }
        }
        last[a] = Some(i);
        between[a] = NodeSet::EMPTY;
        for q in 0..n {
            if q != a {
                between[q].insert(a);
            }
        }
    }

    let rounds = segment_rounds(trace);
    let honest_at_end = trace.last_configuration().honest_set().intersection(only);
    EnMasseVerdict {
        threshold,
        substituted,
        pairs_checked: pairs,
        violations,
        fairness: FairnessReport {
            horizon_events: trace.events().len(),
            complete_rounds: rounds.complete(),
            never_stepped: honest_at_end.difference(stepped),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::Mode;

    pub(crate) fn step(actor: NodeId) -> StepEvent {
        StepEvent {
            actor,
            actor_was_faulty: false,
            kind: EventKind::ProtocolStep,
            coin_used: None,
            clock: None,
            enmasse: None,
            delta: Vec::new(),
        }
    }

    fn byz(actor: NodeId) -> StepEvent {
        StepEvent { actor_was_faulty: true, kind: EventKind::AdversarialMove, ..step(actor) }
    }

    fn trace_of(params: Params, faulty: NodeSet, events: Vec<StepEvent>) -> RunTrace {
        let init = Configuration::uniform(&params, 0, faulty);
        RunTrace::from_parts(TraceHeader::new(params, "test", 0), init, events).unwrap()
    }

    #[test]
    fn rounds_minimal_prefixes() {
        let p = Params::relaxed(3, 0, 8, Mode::EnMasseAssumed).unwrap();
        let t = trace_of(p, NodeSet::EMPTY, [1, 2, 0, 1, 1, 0, 2].into_iter().map(step).collect());
        let r = segment_rounds(&t);
        assert_eq!(r.boundaries, [2, 6]);
        assert_eq!(r.open_from, None);
        assert_eq!(r.round_of(3), 2);
        assert_eq!(r.events_of(2), Some(3..=6));
    }

    #[test]
    fn rounds_never_complete_without_all_nodes() {
        let p = Params::relaxed(2, 0, 8, Mode::EnMasseAssumed).unwrap();
        let t = trace_of(p, NodeSet::EMPTY, (0..5).map(|_| step(0)).collect());
        let r = segment_rounds(&t);
        assert!(r.boundaries.is_empty());
        assert_eq!(r.open_from, Some(0));
    }

    #[test]
    fn rounds_ignore_faulty_nodes() {
        let p = Params::relaxed(2, 1, 8, Mode::EnMasseAssumed).unwrap();
        let t = trace_of(p, NodeSet::single(1), alloc::vec![step(0), byz(1)]);
        let r = segment_rounds(&t);
        assert_eq!(r.boundaries, [0]);
        assert_eq!(r.open_from, Some(1));
    }

    #[test]
    fn rounds_drop_nodes_captured_mid_round() {
        let p = Params::relaxed(3, 1, 8, Mode::EnMasseAssumed).unwrap();
        let capture = StepEvent { kind: EventKind::Capture, delta: alloc::vec![Change::Capture { node: 2 }], ..step(2) };
        let t = trace_of(p, NodeSet::EMPTY, alloc::vec![step(0), capture, step(1)]);
        assert_eq!(segment_rounds(&t).boundaries, [2]);
    }

    #[test]
    fn en_masse_counts_distinct_in_between() {
        let p = Params::relaxed(4, 1, 8, Mode::EnMasseAssumed).unwrap();
        let t = trace_of(p, NodeSet::single(3), [0, 1, 2, 0].into_iter().map(step).collect());
        let v = verify_en_masse(&t, EnMasseOptions::default());
        assert_eq!(v.threshold, 2);
        assert!(v.holds());
        assert_eq!(v.pairs_checked, 1);

        let t = trace_of(p, NodeSet::single(3), [0, 0, 1, 2].into_iter().map(step).collect());
        let v = verify_en_masse(&t, EnMasseOptions::default());
        assert_eq!(v.violations, [EnMasseViolation { node: 0, first_event: 0, second_event: 1, distinct: 0 }]);
    }

    #[test]
    fn en_masse_vacuous_when_each_node_steps_once() {
        let p = Params::relaxed(4, 1, 8, Mode::EnMasseAssumed).unwrap();
        let t = trace_of(p, NodeSet::single(3), [2, 0, 1].into_iter().map(step).collect());
        let v = verify_en_masse(&t, EnMasseOptions::default());
        assert!(v.holds());
        assert_eq!(v.pairs_checked, 0);
        assert!(v.fairness.fair_over_horizon());
    }

    #[test]
    fn en_masse_substitutes_threshold_at_f_zero() {
        let p = Params::relaxed(3, 0, 8, Mode::EnMasseAssumed).unwrap();
        let t = trace_of(p, NodeSet::EMPTY, [0, 1, 2, 0, 1, 2].into_iter().map(step).collect());
        let v = verify_en_masse(&t, EnMasseOptions::default());
        assert!(v.substituted);
        assert_eq!(v.threshold, 2);
        assert!(v.holds());
    }

    #[test]
    fn keyframes_reconstruct_configurations() {
        let p = Params::relaxed(3, 0, 8, Mode::EnMasseAssumed).unwrap();
        let events: Vec<StepEvent> = (0..3000)
            .map(|i| StepEvent {
                delta: alloc::vec![Change::ClockRow { writer: i % 3, value: i as i64 }, Change::MyVal { node: i % 3, value: i as i64 }],
                ..step(i % 3)
            })
            .collect();
        let t = trace_of(p, NodeSet::EMPTY, events);
        let c = t.configuration_at(2050).unwrap();
        assert_eq!(c.my_val, [2049, 2047, 2048]);
        let mut cur = t.cursor();
        while cur.index() < 2050 {
            cur.advance().unwrap();
        }
        assert_eq!(cur.config(), &c);
        assert_eq!(&t.configuration_at(3000).unwrap(), t.last_configuration());
        assert!(t.configuration_at(3001).is_err());
    }
}
