use std::fmt;
use std::str::FromStr;

use clocksync_core::analysis::{
    check_exactly_once, check_tight_closure, first_convergence, verify_clock_synchronized, verify_enmasse_guarantees,
    verify_run_well_defined, EnMasseCheckOptions, ExactlyOnce, SyncOptions, Verdict, WellDefinedOptions,
    DEFAULT_ENVELOPE_CAP,
};
use clocksync_core::kernel::{verify_en_masse, EnMasseOptions, RunTrace};
use clocksync_core::{Mode, NodeSet};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Property {
    TightClosure,
    EnMasse,
    ClockSync,
    WellDefined,
    EnmasseGuarantees,
    ExactlyOnce,
}

impl Property {
    pub const ALL: [Property; 6] = [
        Property::TightClosure,
        Property::EnMasse,
        Property::ClockSync,
        Property::WellDefined,
        Property::EnmasseGuarantees,
        Property::ExactlyOnce,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Property::TightClosure => "tight-closure",
            Property::EnMasse => "en-masse",
            Property::ClockSync => "clock-sync",
            Property::WellDefined => "well-defined",
            Property::EnmasseGuarantees => "enmasse-guarantees",
            Property::ExactlyOnce => "exactly-once",
        }
    }
}

impl fmt::Display for Property {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Property {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Property::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Property::ALL.iter().map(|p| p.name()).collect();
            format!("unknown property {s:?}; expected one of {}", names.join(", "))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyOptions {
    pub ell: u32,
    pub window: usize,
    pub cap: u64,
    /// Probe stride for the well-definedness check.
    pub stride: usize,
    /// First configuration to check; defaults to the first converged one
    /// for properties that only hold after convergence.
    pub from: Option<usize>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions { ell: 5, window: 4, cap: DEFAULT_ENVELOPE_CAP, stride: 1, from: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub property: Property,
    pub scenario_id: String,
    pub seed: u64,
    pub options: VerifyOptions,
    pub verdict: Verdict,
    /// Event or configuration index of the first violation.
    pub first_violation: Option<usize>,
    pub details: Value,
}

impl Report {
    pub fn exit_code(&self) -> i32 {
        match self.verdict {
            Verdict::Holds => 0,
            Verdict::Violated => 1,
            Verdict::Inconclusive => 2,
        }
    }
}

impl fmt::Display for Report {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "property:  {}", self.property)?;
        writeln!(f, "trace:     {} seed {}", self.scenario_id, self.seed)?;
        writeln!(f, "verdict:   {:?}", self.verdict)?;
        if let Some(i) = self.first_violation {
            writeln!(f, "first violation at index {i}")?;
        }
        if let Value::Object(map) = &self.details {
            for (k, v) in map {
                let v = match v {
                    Value::Array(a) if a.len() > 8 => format!("[{} entries]", a.len()),
                    other => other.to_string(),
                };
                writeln!(f, "  {k}: {v}")?;
            }
        }
        Ok(())
    }
}

fn honest_of(trace: &RunTrace) -> NodeSet {
    NodeSet::full(trace.params().n).difference(trace.eventually_faulty())
}

/// Runs one checker over `trace` against the nodes non-faulty throughout.
pub fn verify(trace: &RunTrace, property: Property, opts: VerifyOptions) -> Result<Report> {
    let honest = honest_of(trace);
    let mut report = Report {
        property,
        scenario_id: trace.header.scenario_id.clone(),
        seed: trace.header.seed,
        options: opts,
        verdict: Verdict::Inconclusive,
        first_violation: None,
        details: Value::Null,
    };
    match property {
        Property::TightClosure => {
            let r = check_tight_closure(trace, honest)?;
            report.verdict = if r.pairs_checked == 0 && r.violations.is_empty() { Verdict::Inconclusive } else { r.verdict() };
            report.first_violation = r.violations.first().copied();
            report.details = json!({ "pairs_checked": r.pairs_checked, "violations": r.violations });
        }
        Property::EnMasse => {
            let v = verify_en_masse(
                trace,
                EnMasseOptions { from_event: opts.from.unwrap_or(0), only: Some(honest), ..Default::default() },
            );
            report.verdict = if !v.holds() {
                Verdict::Violated
            } else if v.pairs_checked == 0 {
                Verdict::Inconclusive
            } else {
                Verdict::Holds
            };
            report.first_violation = v.violations.first().map(|x| x.second_event);
            report.details = serde_json::to_value(&v).expect("serializable");
        }
        Property::ClockSync => {
            let r = verify_clock_synchronized(
                trace,
                SyncOptions { window_rounds: opts.window, honest, from: opts.from.unwrap_or(0) },
            )?;
            report.verdict = r.verdict();
            report.first_violation = [
                r.step_violations.first(),
                r.shape_violations.first(),
                r.not_tight.first(),
            ]
            .into_iter()
            .flatten()
            .min()
            .copied();
            report.details = serde_json::to_value(&r).expect("serializable");
        }
        Property::WellDefined => {
            let from = match opts.from {
                Some(i) => Some(i),
                None => first_convergence(trace, honest)?,
            };
            if let Some(from) = from {
                let r = verify_run_well_defined(
                    trace,
                    WellDefinedOptions { ell: opts.ell, cap: opts.cap, from, to: None, stride: opts.stride, honest },
                )?;
                report.verdict = r.verdict();
                report.first_violation = r.violations.first().map(|v| v.index);
                report.details = json!({
                    "from": from,
                    "configurations": r.configurations,
                    "pairs": r.pairs,
                    "max_min_ell": r.max_min_ell,
                    "min_ell_counts": r.min_ell_counts,
                    "cap_exceeded": r.cap_exceeded,
                    "violations": r.violations,
                });
            } else {
                report.details = json!({ "reason": "run never converged" });
            }
        }
        Property::EnmasseGuarantees => {
            if trace.params().mode != Mode::EnMasseConstructed {
                report.details = json!({ "reason": "trace has no timestamp layer" });
            } else {
                let g = verify_enmasse_guarantees(
                    trace,
                    EnMasseCheckOptions { honest, act_gap_from_round: None, comparability: true },
                )?;
                report.verdict = g.verdict();
                report.first_violation = g.act_gaps.first().map(|v| v.second_event).or(g.comparability_lost.first().copied());
                report.details = json!({
                    "complete_rounds": g.complete_rounds,
                    "all_updated_by": g.all_updated_by,
                    "late_updaters": g.late_updaters,
                    "thin_rounds": g.thin_rounds,
                    "act_pairs": g.act_pairs,
                    "act_gaps": g.act_gaps,
                    "windows_checked": g.windows_checked,
                    "absent_actors": g.absent_actors,
                    "growth_violations": g.growth_violations,
                    "comparable_from": g.comparable_from,
                    "comparability_lost": g.comparability_lost,
                });
            }
        }
        Property::ExactlyOnce => {
            let from = opts.from.unwrap_or(0);
            let (mut holds, mut open) = (0usize, 0usize);
            let mut first = None;
            for (i, e) in trace.events().iter().enumerate().skip(from) {
                if !e.is_protocol_step() || !honest.contains(e.actor) {
                    continue;
                }
                match check_exactly_once(trace, i, honest) {
                    ExactlyOnce::Holds => holds += 1,
                    ExactlyOnce::Inconclusive => open += 1,
                    ExactlyOnce::Violated { event, .. } => {
                        first = Some(event);
                        break;
                    }
                }
            }
            report.verdict = match (first, holds) {
                (Some(_), _) => Verdict::Violated,
                (None, 0) => Verdict::Inconclusive,
                (None, _) => Verdict::Holds,
            };
            report.first_violation = first;
            report.details = json!({ "probes_holding": holds, "probes_open": open });
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use clocksync_core::adversary::SchedulerKind;
    use clocksync_core::sim::{run_scenario, InitKind, Scenario};

    #[test]
    fn names_round_trip() {
        for p in Property::ALL {
            assert_eq!(p.name().parse::<Property>().unwrap(), p);
            assert_eq!(serde_json::to_string(&p).unwrap(), format!("\"{}\"", p.name()));
        }
        assert!("liveness".parse::<Property>().is_err());
    }

    #[test]
    fn converged_trace_passes_closure_and_sync() {
        let mut s = Scenario::new("v", 7, 1, 8, Mode::EnMasseAssumed, SchedulerKind::EnMasseEnforcing);
        s.init = InitKind::RandomTight;
        s.horizon_rounds = 40;
        s.run_to_horizon = true;
        let t = run_scenario(&s, 2).unwrap().trace;
        let opts = VerifyOptions::default();
        for p in [Property::TightClosure, Property::EnMasse, Property::ClockSync, Property::WellDefined, Property::ExactlyOnce] {
            let r = verify(&t, p, opts).unwrap();
            assert_eq!(r.verdict, Verdict::Holds, "{r}");
            assert_eq!(r.exit_code(), 0);
        }
        let r = verify(&t, Property::EnmasseGuarantees, opts).unwrap();
        assert_eq!(r.exit_code(), 2);
    }
}
