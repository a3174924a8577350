use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::envelope::{well_definedness_envelope, DEFAULT_ENVELOPE_CAP};
use super::tight::{h_set, h_set_view, is_converged, is_tight, v_summary};
use super::Verdict;
use crate::asyncclock::{Branch, StepTrace};
use crate::kernel::{segment_rounds, ClockValue, Configuration, NodeId, NodeSet, Params, RunTrace};
use crate::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClosureReport {
    /// Consecutive pairs whose first configuration is tight and consistent.
    pub pairs_checked: usize,
    /// Indices `i` with `C_i` tight but `C_{i+1}` not.
    pub violations: Vec<usize>,
}

impl ClosureReport {
    pub fn verdict(&self) -> Verdict {
        if self.violations.is_empty() {
            Verdict::Holds
        } else {
            Verdict::Violated
        }
    }
}

/// Tightness is never lost once reached. Only pairs starting from a
/// configuration where every honest node's registers hold its value count.
pub fn check_tight_closure(trace: &RunTrace, honest: NodeSet) -> Result<ClosureReport> {
    let params = *trace.params();
    let mut cur = trace.cursor();
    let mut report = ClosureReport::default();
    let mut prev = is_converged(cur.config(), honest, &params);
    while cur.advance()?.is_some() {
        let tight = !is_tight(cur.config(), honest, &params).is_empty();
        if prev {
            report.pairs_checked += 1;
            if !tight {
                report.violations.push(cur.index() - 1);
            }
        }
        prev = tight && cur.config().registers_consistent(honest, params.modulus());
    }
    Ok(report)
}

/// Index of the first tight and consistent configuration.
pub fn first_convergence(trace: &RunTrace, honest: NodeSet) -> Result<Option<usize>> {
    let params = *trace.params();
    let mut cur = trace.cursor();
    loop {
        if is_converged(cur.config(), honest, &params) {
            return Ok(Some(cur.index()));
        }
        if cur.advance()?.is_none() {
            return Ok(None);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WellDefinedOptions {
    pub ell: u32,
    pub cap: u64,
    pub from: usize,
    pub to: Option<usize>,
    /// Probe every `stride`-th configuration together with its successor.
    pub stride: usize,
    pub honest: NodeSet,
}

impl WellDefinedOptions {
    pub fn new(ell: u32, honest: NodeSet) -> Self {
        WellDefinedOptions { ell, cap: DEFAULT_ENVELOPE_CAP, from: 0, to: None, stride: 1, honest }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Clause {
    /// Some value is a defined value.
    Defined,
    /// Consecutive defined values are at most `ell` apart.
    Consecutive,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WellDefinedViolation {
    pub index: usize,
    pub clause: Clause,
    pub min_ell: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WellDefinedReport {
    pub ell: u32,
    pub configurations: usize,
    pub pairs: usize,
    pub max_min_ell: u32,
    /// Histogram of minimal `l` over checked configurations.
    pub min_ell_counts: Vec<usize>,
    pub violations: Vec<WellDefinedViolation>,
    pub cap_exceeded: bool,
}

impl WellDefinedReport {
    pub fn verdict(&self) -> Verdict {
        if !self.violations.is_empty() {
            Verdict::Violated
        } else if self.cap_exceeded || self.configurations == 0 {
            Verdict::Inconclusive
        } else {
            Verdict::Holds
        }
    }
}

/// Every probed configuration is `ell`-well-defined and defined values of
/// consecutive probed configurations are at most `ell` apart.
pub fn verify_run_well_defined(trace: &RunTrace, opts: WellDefinedOptions) -> Result<WellDefinedReport> {
    let params = *trace.params();
    let m = params.modulus();
    let stride = opts.stride.max(1);
    let last = opts.to.unwrap_or(trace.len() - 1).min(trace.len() - 1);
    let mut report = WellDefinedReport { ell: opts.ell, min_ell_counts: alloc::vec![0; params.k as usize], ..Default::default() };
    if opts.from > last {
        return Ok(report);
    }
    let mut cur = trace.cursor_at(opts.from)?;
    let mut prev: Option<(usize, Vec<ClockValue>)> = None;
    loop {
        let i = cur.index();
        let offset = i - opts.from;
        if offset % stride == 0 || (offset % stride == 1 && stride > 1) {
            let env = match well_definedness_envelope(cur.config(), opts.honest, &params, opts.cap) {
                Ok(e) => e,
                Err(Error::CapExceeded { .. }) => {
                    report.cap_exceeded = true;
                    return Ok(report);
                }
                Err(e) => return Err(e),
            };
            report.configurations += 1;
            report.max_min_ell = report.max_min_ell.max(env.min_ell);
            report.min_ell_counts[env.min_ell as usize] += 1;
            let defined = env.defined_values(opts.ell);
            if defined.is_empty() {
                report.violations.push(WellDefinedViolation { index: i, clause: Clause::Defined, min_ell: env.min_ell });
            }
            if let Some((j, before)) = &prev {
                if *j + 1 == i && !before.is_empty() && !defined.is_empty() {
                    report.pairs += 1;
                    let linked = before.iter().any(|&v| defined.iter().any(|&w| m.ahead_of(v, w, opts.ell)));
                    if !linked {
                        report.violations.push(WellDefinedViolation {
                            index: i,
                            clause: Clause::Consecutive,
                            min_ell: env.min_ell,
                        });
                    }
                }
            }
            prev = Some((i, defined));
        }
        if i >= last || cur.advance()?.is_none() {
            break;
        }
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncOptions {
    pub window_rounds: usize,
    pub honest: NodeSet,
    /// Convergence is searched from this configuration on.
    pub from: usize,
}

impl SyncOptions {
    pub fn new(honest: NodeSet) -> Self {
        SyncOptions { window_rounds: 4, honest, from: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncReport {
    pub convergence: Option<usize>,
    pub vmin_changes: usize,
    pub windows_checked: usize,
    /// First round of each window without a change of the minimum.
    pub liveness_violations: Vec<usize>,
    /// Indices `i` where the minimum of `C_{i+1}` is more than 3 ahead of `C_i`'s.
    pub step_violations: Vec<usize>,
    /// Configurations whose value set is irregular.
    pub shape_violations: Vec<usize>,
    /// Configurations after convergence that are not tight.
    pub not_tight: Vec<usize>,
}

impl SyncReport {
    pub fn verdict(&self) -> Verdict {
        if self.convergence.is_none() {
            Verdict::Inconclusive
        } else if self.liveness_violations.is_empty()
            && self.step_violations.is_empty()
            && self.shape_violations.is_empty()
            && self.not_tight.is_empty()
        {
            Verdict::Holds
        } else {
            Verdict::Violated
        }
    }
}

/// After convergence the minimum defined value moves by at most 3 per step
/// and changes within every window of `window_rounds` complete rounds.
pub fn verify_clock_synchronized(trace: &RunTrace, opts: SyncOptions) -> Result<SyncReport> {
    let params = *trace.params();
    let m = params.modulus();
    let mut report = SyncReport::default();
    let mut cur = trace.cursor_at(opts.from.min(trace.len() - 1))?;
    while !is_converged(cur.config(), opts.honest, &params) {
        if cur.advance()?.is_none() {
            return Ok(report);
        }
    }
    let c0 = cur.index();
    report.convergence = Some(c0);

    let mut mins: Vec<Option<ClockValue>> = Vec::with_capacity(trace.len() - c0);
    loop {
        let s = v_summary(cur.config(), opts.honest, &params);
        if s.values.is_empty() {
            report.not_tight.push(cur.index());
        } else if !s.shape_ok(m) {
            report.shape_violations.push(cur.index());
        }
        mins.push(s.min());
        if cur.advance()?.is_none() {
            break;
        }
    }
    let changed: Vec<bool> = mins.windows(2).map(|w| w[0] != w[1]).collect();
    for (off, w) in mins.windows(2).enumerate() {
        if let (Some(a), Some(b)) = (w[0], w[1]) {
            if a != b {
                report.vmin_changes += 1;
            }
            if !m.ahead_of(a, b, 3) {
                report.step_violations.push(c0 + off);
            }
        }
    }

    let rounds = segment_rounds(trace);
    let w = opts.window_rounds.max(1);
    for r in 1..=rounds.complete() {
        let span_start = *rounds.events_of(r).expect("complete round").start();
        if span_start < c0 {
            continue;
        }
        let Some(end) = rounds.events_of(r + w - 1) else { break };
        report.windows_checked += 1;
        let hit = (span_start..=*end.end()).any(|e| changed[e - c0]);
        if !hit {
            report.liveness_violations.push(r);
        }
    }
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExactlyOnce {
    Holds,
    Violated { node: NodeId, event: usize },
    Inconclusive,
}

/// In the shortest stretch after `from_event` in which `n - 2f` distinct
/// honest nodes step, none steps twice.
pub fn check_exactly_once(trace: &RunTrace, from_event: usize, honest: NodeSet) -> ExactlyOnce {
    let target = trace.params().n_minus(2).min(honest.len());
    let mut seen = NodeSet::EMPTY;
    if target == 0 {
        return ExactlyOnce::Holds;
    }
    for (i, e) in trace.events().iter().enumerate().skip(from_event) {
        if !e.is_protocol_step() || !honest.contains(e.actor) {
            continue;
        }
        if seen.contains(e.actor) {
            return ExactlyOnce::Violated { node: e.actor, event: i };
        }
        seen.insert(e.actor);
        if seen.len() >= target {
            return ExactlyOnce::Holds;
        }
    }
    ExactlyOnce::Inconclusive
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StepCheck {
    /// More than two values pass the `n - 2f` threshold, or two that are not adjacent.
    PassShape,
    /// Coin domain of more than three values.
    CoinDomain,
    /// The choice of `low` was ambiguous or impossible.
    LowAnomaly,
    /// Relative median landed outside `{v, v+1}` of a well-supported `v`.
    MedianBound,
    /// The new value is outside the value set of the next configuration.
    NextValue,
    /// Register-view and local counts disagree by more than `f`.
    HSandwich,
}

/// Per-step invariants for honest actor `q` moving from `before` to `after`.
pub fn step_invariants(
    before: &Configuration,
    after: &Configuration,
    q: NodeId,
    step: &StepTrace,
    honest: NodeSet,
    params: &Params,
) -> Vec<StepCheck> {
    let m = params.modulus();
    let mut out = Vec::new();
    if !step.pass12f_well_shaped(m) {
        out.push(StepCheck::PassShape);
    }
    if step.coin_domain.as_ref().is_some_and(|d| d.len() > 3) {
        out.push(StepCheck::CoinDomain);
    }
    if !step.anomalies.is_empty() {
        out.push(StepCheck::LowAnomaly);
    }
    if !honest.contains(q) || !before.registers_consistent(honest, m) {
        return out;
    }
    let n3f = params.n_minus(3);
    if step.branch == Branch::Median {
        let bad = m
            .values()
            .any(|v| h_set(before, honest, m, v, 1).len() >= n3f && !m.ahead_of(v, step.new_my_val, 1));
        if bad {
            out.push(StepCheck::MedianBound);
        }
    }
    let sandwich = m.values().all(|v| {
        let h = h_set(before, honest, m, v, 1).len();
        let view = h_set_view(before, q, m, v, 1).len();
        h + params.f >= view && view >= h
    });
    if !sandwich {
        out.push(StepCheck::HSandwich);
    }
    if is_converged(before, honest, params) {
        let next = v_summary(after, honest, params);
        if !next.values.contains(&step.new_my_val) {
            out.push(StepCheck::NextValue);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{Change, EventKind, Mode, StepEvent, TraceHeader};

    fn ev(actor: NodeId, delta: Vec<Change>) -> StepEvent {
        StepEvent { actor, actor_was_faulty: false, kind: EventKind::ProtocolStep, coin_used: None, clock: None, enmasse: None, delta }
    }

    fn set(node: NodeId, v: i64) -> Vec<Change> {
        alloc::vec![Change::MyVal { node, value: v }, Change::ClockRow { writer: node, value: v }]
    }

    #[test]
    fn frozen_trace_violates_liveness() {
        let p = Params::new(7, 1, 8, Mode::EnMasseAssumed).unwrap();
        let c = Configuration::uniform(&p, 2, NodeSet::single(6));
        let events = (0..60).map(|i| ev(i % 6, Vec::new())).collect();
        let t = RunTrace::from_parts(TraceHeader::new(p, "frozen", 0), c.clone(), events).unwrap();
        let r = verify_clock_synchronized(&t, SyncOptions::new(c.honest_set())).unwrap();
        assert_eq!(r.convergence, Some(0));
        assert_eq!(r.verdict(), Verdict::Violated);
        assert_eq!(r.liveness_violations.first(), Some(&1));
    }

    #[test]
    fn jump_of_four_is_flagged() {
        let p = Params::new(7, 1, 8, Mode::EnMasseAssumed).unwrap();
        let c = Configuration::uniform(&p, 2, NodeSet::single(6));
        // Transient rewrite of every honest node from 2 to 6.
        let delta: Vec<Change> = (0..6).flat_map(|q| set(q, 6)).collect();
        let e = StepEvent { kind: EventKind::TransientFault, ..ev(0, delta) };
        let t = RunTrace::from_parts(TraceHeader::new(p, "jump", 0), c.clone(), alloc::vec![e]).unwrap();
        let r = verify_clock_synchronized(&t, SyncOptions::new(c.honest_set())).unwrap();
        assert_eq!(r.step_violations, [0]);
    }

    #[test]
    fn single_configuration_is_vacuous_for_pairs() {
        let p = Params::new(7, 1, 8, Mode::EnMasseAssumed).unwrap();
        let c = Configuration::uniform(&p, 3, NodeSet::single(6));
        let t = RunTrace::new(TraceHeader::new(p, "one", 0), c.clone());
        let r = verify_run_well_defined(&t, WellDefinedOptions::new(5, c.honest_set())).unwrap();
        assert_eq!((r.configurations, r.pairs), (1, 0));
        assert_eq!(r.verdict(), Verdict::Holds);
    }

    #[test]
    fn injected_split_view_breaks_well_definedness() {
        let p = Params::new(7, 1, 8, Mode::EnMasseAssumed).unwrap();
        let c = Configuration::uniform(&p, 3, NodeSet::single(6));
        // Honest writers show each reader a different unanimous value, so the
        // readers would install 0, 2, 4 and 6.
        let per_reader = [7, 7, 1, 3, 5, 5, 5];
        let delta: Vec<Change> = (0..6)
            .flat_map(|w| (0..7).map(move |r| Change::ClockCell { writer: w, reader: r, value: per_reader[r] }))
            .collect();
        let events = alloc::vec![ev(0, set(0, 4)), StepEvent { kind: EventKind::TransientFault, ..ev(0, delta) }];
        let t = RunTrace::from_parts(TraceHeader::new(p, "inject", 0), c.clone(), events).unwrap();
        let r = verify_run_well_defined(&t, WellDefinedOptions::new(5, c.honest_set())).unwrap();
        assert_eq!(r.verdict(), Verdict::Violated);
        assert_eq!(r.violations[0].index, 2);
        assert_eq!(r.violations[0].min_ell, 6);
        assert_eq!(r.configurations, 3);
    }

    #[test]
    fn exactly_once_cases() {
        let p = Params::new(7, 1, 8, Mode::EnMasseAssumed).unwrap();
        let c = Configuration::uniform(&p, 3, NodeSet::single(6));
        let honest = c.honest_set();
        let rr = (0..12).map(|i| ev(i % 6, Vec::new())).collect();
        let t = RunTrace::from_parts(TraceHeader::new(p, "rr", 0), c.clone(), rr).unwrap();
        for from in 0..7 {
            assert_eq!(check_exactly_once(&t, from, honest), ExactlyOnce::Holds);
        }
        assert_eq!(check_exactly_once(&t, 10, honest), ExactlyOnce::Inconclusive);
        let bad = [0, 1, 2, 3, 0, 4].into_iter().map(|a| ev(a, Vec::new())).collect();
        let t = RunTrace::from_parts(TraceHeader::new(p, "bad", 0), c, bad).unwrap();
        assert_eq!(check_exactly_once(&t, 0, honest), ExactlyOnce::Violated { node: 0, event: 4 });
        assert!(!crate::kernel::verify_en_masse(&t, Default::default()).holds());
    }
}
