//! Checkers for tightness, well-definedness, synchronization and the
//! timestamp layer's guarantees. All of them read traces and never mutate
//! them; "non-faulty" always means the `honest` set passed in, normally the
//! nodes that stay non-faulty for the whole run.

mod checks;
mod enmasse_checks;
mod envelope;
mod tight;

use serde::{Deserialize, Serialize};

pub use checks::{
    check_exactly_once, check_tight_closure, first_convergence, step_invariants, verify_clock_synchronized,
    verify_run_well_defined, Clause, ClosureReport, ExactlyOnce, StepCheck, SyncOptions, SyncReport,
    WellDefinedOptions, WellDefinedReport, WellDefinedViolation,
};
pub use enmasse_checks::{
    honest_records_comparable, verify_enmasse_guarantees, AbsentActor, EnMasseCheckOptions, EnMasseGuarantees,
    EnMasseRoundStats,
};
pub use envelope::{enumeration_size, well_definedness_envelope, Envelope, DEFAULT_ENVELOPE_CAP};
pub use tight::{h_set, h_set_view, is_converged, is_tight, v_summary, TightWitness, VSummary};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Holds,
    Violated,
    /// The horizon or the enumeration cap prevented a decision.
    Inconclusive,
}
