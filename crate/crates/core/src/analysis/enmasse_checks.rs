use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::Verdict;
use crate::enmasse::{PairTable, TimestampRecord};
use crate::kernel::{segment_rounds, verify_en_masse, EnMasseOptions, EnMasseViolation, NodeSet, RunTrace, StepSelector};
use crate::Result;

/// Nodes that have updated by the end of each round (index 0 is round 1).
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnMasseRoundStats {
    pub honest: NodeSet,
    pub updated_by: Vec<NodeSet>,
    /// Distinct honest updaters within each round.
    pub updaters_in: Vec<NodeSet>,
    /// Distinct honest actors within each round.
    pub actors_in: Vec<NodeSet>,
}

impl EnMasseRoundStats {
    /// Honest nodes yet to update by the end of round `r`.
    pub fn pending(&self, r: usize) -> NodeSet {
        self.honest.difference(self.updated_by[r - 1])
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbsentActor {
    pub node: usize,
    /// First round of the window in which the node never acted.
    pub window_start: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnMasseGuarantees {
    pub complete_rounds: usize,
    pub stats: EnMasseRoundStats,
    /// Round by which every honest node has updated.
    pub all_updated_by: Option<usize>,
    /// Round `n - 2f + 2` was reached and some honest node had not updated.
    pub late_updaters: bool,
    /// Later rounds with fewer than `2f` distinct honest updaters.
    pub thin_rounds: Vec<usize>,
    /// Acts of one node with fewer than `n - 4f` honest actors between them.
    pub act_gaps: Vec<EnMasseViolation>,
    pub act_pairs: usize,
    pub absent_actors: Vec<AbsentActor>,
    pub windows_checked: usize,
    /// Rounds after which the updater set grew too slowly.
    pub growth_violations: Vec<usize>,
    /// Configuration where comparability was first observed.
    pub comparable_from: Option<usize>,
    /// Later configurations where it was lost.
    pub comparability_lost: Vec<usize>,
}

impl EnMasseGuarantees {
    pub fn holds(&self) -> bool {
        !self.late_updaters
            && self.thin_rounds.is_empty()
            && self.act_gaps.is_empty()
            && self.absent_actors.is_empty()
            && self.growth_violations.is_empty()
            && self.comparability_lost.is_empty()
    }

    pub fn verdict(&self) -> Verdict {
        if !self.holds() {
            Verdict::Violated
        } else if self.complete_rounds == 0 {
            Verdict::Inconclusive
        } else {
            Verdict::Holds
        }
    }
}

/// The honest records, in node order, as a comparable-set check sees them.
pub fn honest_records_comparable(locals: &[TimestampRecord], honest: NodeSet, pool: u32) -> bool {
    let recs: Vec<&TimestampRecord> = locals.iter().collect();
    PairTable::build(&recs, pool).comparable(honest)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnMasseCheckOptions {
    pub honest: NodeSet,
    /// Acts starting before this round are not checked for gaps.
    pub act_gap_from_round: Option<usize>,
    /// Check comparability persistence on every configuration.
    pub comparability: bool,
}

/// Stabilization and act-spacing guarantees of the timestamp layer.
pub fn verify_enmasse_guarantees(trace: &RunTrace, opts: EnMasseCheckOptions) -> Result<EnMasseGuarantees> {
    let params = *trace.params();
    let n = params.n;
    let f = params.f;
    let honest = opts.honest;
    let rounds = segment_rounds(trace);
    let complete = rounds.complete();
    let events = trace.events();

    let mut stats = EnMasseRoundStats { honest, ..Default::default() };
    let mut so_far = NodeSet::EMPTY;
    for r in 1..=complete {
        let mut up = NodeSet::EMPTY;
        let mut acts = NodeSet::EMPTY;
        for e in &events[rounds.events_of(r).expect("complete")] {
            if !e.is_protocol_step() || !honest.contains(e.actor) {
                continue;
            }
            if e.enmasse.as_ref().is_some_and(|x| x.updated) {
                up.insert(e.actor);
            }
            if e.acted() {
                acts.insert(e.actor);
            }
        }
        so_far = so_far.union(up);
        stats.updated_by.push(so_far);
        stats.updaters_in.push(up);
        stats.actors_in.push(acts);
    }

    let mut g = EnMasseGuarantees { complete_rounds: complete, ..Default::default() };
    g.all_updated_by = (1..=complete).find(|&r| stats.pending(r).is_empty());
    let settle = params.n_minus(2) + 2;
    if complete >= settle && !stats.pending(settle).is_empty() {
        g.late_updaters = true;
    }
    for r in settle + 1..=complete {
        if stats.updaters_in[r - 1].len() < 2 * f {
            g.thin_rounds.push(r);
        }
    }
    for r in 1..complete {
        let (now, next) = (stats.updated_by[r - 1].len(), stats.updated_by[r].len());
        let ok = if now < params.n_minus(2) { next > now } else { next >= params.n_minus(1).min(honest.len()) };
        if !ok {
            g.growth_violations.push(r);
        }
    }

    let gap_round = opts.act_gap_from_round.unwrap_or(settle + 1);
    if let Some(span) = rounds.events_of(gap_round) {
        let v = verify_en_masse(
            trace,
            EnMasseOptions {
                threshold: Some(params.n_minus(4)),
                selector: StepSelector::Acts,
                from_event: *span.start(),
                only: Some(honest),
            },
        );
        g.act_pairs = v.pairs_checked;
        g.act_gaps = v.violations;
    }

    if f > 0 {
        let window = n.div_ceil(2 * f);
        let mut start = settle + 1;
        while start + window - 1 <= complete {
            let acted = (start..start + window).fold(NodeSet::EMPTY, |s, r| s.union(stats.actors_in[r - 1]));
            for node in honest.difference(acted).iter() {
                g.absent_actors.push(AbsentActor { node, window_start: start });
            }
            g.windows_checked += 1;
            start += 1;
        }
    }

    if opts.comparability {
        let pool = params.label_pool();
        let mut cur = trace.cursor();
        let mut dirty = true;
        let mut comparable = false;
        let mut was = false;
        loop {
            if dirty {
                if let Some(em) = &cur.config().enmasse {
                    comparable = honest_records_comparable(&em.locals, honest, pool);
                }
            }
            match (g.comparable_from, comparable) {
                (None, true) => g.comparable_from = Some(cur.index()),
                (Some(_), false) if was => g.comparability_lost.push(cur.index()),
                _ => {}
            }
            was = comparable;
            match cur.advance()? {
                Some(e) => dirty = e.delta.iter().any(|c| matches!(c, crate::kernel::Change::LocalRecord { .. })),
                None => break,
            }
        }
    }
    g.stats = stats;
    Ok(g)
}
