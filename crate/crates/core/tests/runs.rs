//! Whole runs: replay, round segmentation, checker agreement and the
//! configuration-level invariants.

use clocksync_core::adversary::{ByzantineKind, Capture, CapturePlan, Heuristic, SchedulerKind};
use clocksync_core::analysis::{
    check_exactly_once, check_tight_closure, h_set, h_set_view, is_tight, v_summary, ExactlyOnce,
};
use clocksync_core::kernel::{
    segment_events, verify_en_masse, Configuration, EventKind, RunTrace, StepEvent, TraceHeader,
};
use clocksync_core::sim::{run_scenario, Assertions, InitKind, Scenario};
use clocksync_core::{Mode, NodeSet, Params};
use proptest::prelude::*;

fn byzantine() -> impl Strategy<Value = ByzantineKind> {
    prop_oneof![
        Just(ByzantineKind::Silent),
        Just(ByzantineKind::UniformRandom),
        Just(ByzantineKind::SplitPerReader { values: None }),
        (0u32..8, 0u32..8).prop_map(|v| ByzantineKind::SplitPerReader { values: Some(v) }),
        Just(ByzantineKind::AntiConvergence),
        Just(ByzantineKind::BenignFollower),
    ]
}

fn scheduler() -> impl Strategy<Value = SchedulerKind> {
    prop_oneof![
        Just(SchedulerKind::RoundRobin),
        Just(SchedulerKind::RandomFair),
        Just(SchedulerKind::EnMasseEnforcing),
        Just(SchedulerKind::Adaptive { heuristic: Heuristic::CoinFirst }),
        Just(SchedulerKind::Adaptive { heuristic: Heuristic::LaggingFirst }),
    ]
}

fn init() -> impl Strategy<Value = InitKind> {
    prop_oneof![
        Just(InitKind::AllZero),
        (0i64..100).prop_map(|value| InitKind::Uniform { value }),
        Just(InitKind::UniformRandomRegisters),
        Just(InitKind::AdversarialSpread),
        Just(InitKind::RandomTight),
    ]
}

fn ev(actor: usize, kind: EventKind) -> StepEvent {
    StepEvent { actor, actor_was_faulty: false, kind, coin_used: None, clock: None, enmasse: None, delta: Vec::new() }
}

/// Rounds by the definition: repeatedly take the shortest prefix of the rest
/// in which every node non-faulty throughout that prefix steps.
fn oracle_rounds(n: usize, mut faulty: NodeSet, events: &[StepEvent]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut start = 0;
    'outer: while start < events.len() {
        for end in start..events.len() {
            let seg = &events[start..=end];
            let mut f = faulty;
            for e in seg {
                if e.kind == EventKind::Capture {
                    f.insert(e.actor);
                }
            }
            let stepped: NodeSet = seg.iter().filter(|e| e.kind == EventKind::ProtocolStep).map(|e| e.actor).collect();
            if NodeSet::full(n).difference(f).is_subset(stepped) {
                out.push(end);
                faulty = f;
                start = end + 1;
                continue 'outer;
            }
        }
        break;
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn replay_reproduces_every_configuration(
        seed in any::<u64>(),
        b in byzantine(),
        sch in scheduler(),
        init in init(),
        constructed in any::<bool>(),
    ) {
        let (mode, n) = if constructed { (Mode::EnMasseConstructed, 13) } else { (Mode::EnMasseAssumed, 7) };
        let mut s = Scenario::new("replay", n, 1, 8, mode, sch);
        s.byzantine = b;
        s.init = init;
        s.horizon_rounds = 5;
        s.run_to_horizon = true;
        let a = run_scenario(&s, seed).unwrap();
        let again = run_scenario(&s, seed).unwrap();
        prop_assert_eq!(a.trace.events(), again.trace.events());
        prop_assert_eq!(a.trace.initial(), again.trace.initial());
        let rebuilt = RunTrace::from_parts(a.trace.header.clone(), a.trace.initial().clone(), a.trace.events().to_vec()).unwrap();
        prop_assert_eq!(rebuilt.last_configuration(), a.trace.last_configuration());
        let mut cur = a.trace.cursor();
        loop {
            let i = cur.index();
            if i % 37 == 0 {
                prop_assert_eq!(&a.trace.configuration_at(i).unwrap(), cur.config());
            }
            if cur.advance().unwrap().is_none() {
                break;
            }
        }
    }

    #[test]
    fn segmentation_is_minimal(
        n in 2usize..7,
        actors in proptest::collection::vec((0usize..7, 0u8..20), 0..120),
        faulty in 0u64..4,
    ) {
        let faulty = NodeSet::from_bits(faulty).intersection(NodeSet::full(n)).without(0);
        let events: Vec<StepEvent> = actors
            .iter()
            .map(|&(a, k)| ev(a % n, if k == 0 { EventKind::Capture } else if k < 3 { EventKind::AdversarialMove } else { EventKind::ProtocolStep }))
            .collect();
        let rounds = segment_events(n, faulty, &events);
        prop_assert_eq!(&rounds.boundaries, &oracle_rounds(n, faulty, &events));
        let next = rounds.boundaries.last().map_or(0, |b| b + 1);
        prop_assert_eq!(rounds.open_from, (next < events.len()).then_some(next));
    }

    /// Online and offline closure counts agree whatever the scheduler,
    /// including schedulers that give no en masse guarantee.
    #[test]
    fn online_closure_matches_offline(seed in any::<u64>(), b in byzantine(), sch in scheduler(), init in init()) {
        let mut s = Scenario::new("closure", 7, 1, 8, Mode::EnMasseAssumed, sch);
        s.byzantine = b;
        s.init = init;
        s.horizon_rounds = 30;
        s.run_to_horizon = true;
        let out = run_scenario(&s, seed).unwrap();
        let offline = check_tight_closure(&out.trace, s.honest()).unwrap();
        prop_assert_eq!(out.summary.post_convergence_violations, offline.violations.len());
    }

    #[test]
    fn en_masse_schedulers_deliver(seed in any::<u64>(), b in byzantine(), adaptive in any::<bool>()) {
        let sch = if adaptive { SchedulerKind::Adaptive { heuristic: Heuristic::CoinFirst } } else { SchedulerKind::EnMasseEnforcing };
        let mut s = Scenario::new("em", 7, 1, 8, Mode::EnMasseAssumed, sch);
        s.byzantine = b;
        s.init = InitKind::UniformRandomRegisters;
        s.horizon_rounds = 30;
        s.run_to_horizon = true;
        s.assertions = Assertions::all();
        let out = run_scenario(&s, seed).unwrap();
        let v = verify_en_masse(&out.trace, Default::default());
        prop_assert!(v.holds(), "{:?}", v.violations.first());
        prop_assert!(v.fairness.fair_over_horizon());
        prop_assert!(out.violations.is_empty(), "{:?}", out.violations);
        let honest = s.honest();
        for (i, e) in out.trace.events().iter().enumerate() {
            if e.is_protocol_step() {
                let verdict = check_exactly_once(&out.trace, i, honest);
                let violated = matches!(verdict, ExactlyOnce::Violated { .. });
                prop_assert!(!violated, "event {}: {:?}", i, verdict);
            }
        }
    }

    /// Tight witnesses are adjacent, the value set has a regular shape, and
    /// register views differ from local values by at most the faulty writers.
    #[test]
    fn configuration_invariants(
        vals in proptest::collection::vec(0i64..8, 7),
        faulty_row in proptest::collection::vec(0i64..8, 7),
        k in 7u32..12,
    ) {
        let params = Params::new(7, 1, k, Mode::EnMasseAssumed).unwrap();
        let m = params.modulus();
        let mut c = Configuration::uniform(&params, 0, NodeSet::single(6));
        for q in 0..6 {
            c.my_val[q] = vals[q];
            c.clock.set_row(q, &vals[q]);
        }
        for r in 0..7 {
            c.clock.set(6, r, faulty_row[r]);
        }
        let honest = c.honest_set();
        let w = is_tight(&c, honest, &params);
        for a in &w {
            for b in &w {
                prop_assert!(m.ahead_of(a.value, b.value, 1) || m.ahead_of(b.value, a.value, 1));
            }
        }
        let s = v_summary(&c, honest, &params);
        prop_assert!(s.shape_ok(m), "{:?}", s);
        for p in 0..7 {
            for v in m.values() {
                let h = h_set(&c, honest, m, v, 1).len();
                let view = h_set_view(&c, p, m, v, 1).len();
                prop_assert!(view >= h && view <= h + 1);
            }
        }
    }
}

#[test]
fn capture_budget_is_enforced() {
    let mut s = Scenario::new("cap", 7, 1, 8, Mode::EnMasseAssumed, SchedulerKind::RoundRobin);
    s.faulty = Some(vec![6]);
    s.captures = CapturePlan { captures: vec![Capture { at_step: 3, node: 2 }] };
    assert!(run_scenario(&s, 0).is_err());
    s.faulty = Some(Vec::new());
    assert!(run_scenario(&s, 0).is_ok());
}

#[test]
fn relaxed_parameters_run_without_guarantees() {
    let mut s = Scenario::new("relaxed", 5, 1, 8, Mode::EnMasseAssumed, SchedulerKind::RoundRobin);
    assert!(s.validate().is_err());
    s.strict = false;
    s.horizon_rounds = 3;
    assert!(run_scenario(&s, 0).is_ok());
}

#[test]
fn hand_built_trace_header_round_trips() {
    let p = Params::new(7, 1, 8, Mode::EnMasseAssumed).unwrap();
    let t = RunTrace::new(TraceHeader::new(p, "x", 9), Configuration::uniform(&p, 0, NodeSet::single(6)));
    assert_eq!((t.header.seed, t.len(), t.events().len()), (9, 1, 0));
}
