use alloc::string::String;

use crate::kernel::NodeId;

/// Errors raised by the simulator and its checkers.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("node {node} has no free label in a pool of {pool}")]
    PoolExhausted { node: NodeId, pool: u32 },

    #[error("scheduler deadlock: no eligible node at event {event}")]
    SchedulerDeadlock { event: usize },

    #[error("enumeration of {size} cases exceeds the cap of {cap}")]
    CapExceeded { size: u64, cap: u64 },

    #[error("capture plan rejected: {0}")]
    CapturePlan(String),

    #[error("trace error: {0}")]
    Trace(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
