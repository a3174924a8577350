//! The shared-memory system model.
//!
//! Nodes communicate through an `n x n` matrix of single-writer registers:
//! cell `(p, q)` is written by `p` and read by `q`. Clock values live on a
//! circle of size `k`, and most of the arithmetic in this crate is expressed
//! through [`Modulus`].

mod config;
mod trace;

use alloc::format;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use config::{Change, ConfigWriter, Configuration, EnMasseState, FaultStatus, RegisterMatrix};
pub use trace::{
    segment_events, segment_rounds, verify_en_masse, EnMasseOptions, EnMasseVerdict, EnMasseViolation,
    EventKind, FairnessReport, RoundTracker, Rounds, RunTrace, StepEvent, StepSelector,
    TraceCursor, TraceHeader, TRACE_FORMAT, TRACE_VERSION,
};

pub type NodeId = usize;

/// Largest supported node count; node sets are stored as 64-bit masks.
pub const MAX_NODES: usize = 64;

/// A set of node ids, stored as a bit mask.
#[derive(Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeSet(u64);

impl NodeSet {
    pub const EMPTY: NodeSet = NodeSet(0);

    pub fn full(n: usize) -> NodeSet {
        if n >= 64 {
            NodeSet(u64::MAX)
        } else {
            NodeSet((1u64 << n) - 1)
        }
    }

    pub fn from_bits(bits: u64) -> NodeSet {
        NodeSet(bits)
    }

    pub fn bits(self) -> u64 {
        self.0
    }

    pub fn single(p: NodeId) -> NodeSet {
        NodeSet(1u64 << p)
    }

    pub fn contains(self, p: NodeId) -> bool {
        p < 64 && self.0 & (1u64 << p) != 0
    }

    pub fn insert(&mut self, p: NodeId) {
        self.0 |= 1u64 << p;
    }

    pub fn remove(&mut self, p: NodeId) {
        self.0 &= !(1u64 << p);
    }

    pub fn with(mut self, p: NodeId) -> NodeSet {
        self.insert(p);
        self
    }

    pub fn without(mut self, p: NodeId) -> NodeSet {
        self.remove(p);
        self
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn union(self, other: NodeSet) -> NodeSet {
        NodeSet(self.0 | other.0)
    }

    pub fn intersection(self, other: NodeSet) -> NodeSet {
        NodeSet(self.0 & other.0)
    }

    pub fn difference(self, other: NodeSet) -> NodeSet {
        NodeSet(self.0 & !other.0)
    }

    pub fn is_subset(self, other: NodeSet) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = NodeId> {
        let mut bits = self.0;
        core::iter::from_fn(move || {
            if bits == 0 {
                None
            } else {
                let p = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                Some(p)
            }
        })
    }
}

impl FromIterator<NodeId> for NodeSet {
    fn from_iter<I: IntoIterator<Item = NodeId>>(iter: I) -> Self {
        let mut s = NodeSet::EMPTY;
        for p in iter {
            s.insert(p);
        }
        s
    }
}

impl fmt::Debug for NodeSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_set().entries(self.iter()).finish()
    }
}

/// Which guarantee the scheduler provides to the clock step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    /// The scheduler itself is en masse; the clock step runs directly.
    EnMasseAssumed,
    /// Runs are only fair; the timestamp layer decides when the clock step runs.
    EnMasseConstructed,
}

/// Instance parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Params {
    pub n: usize,
    pub f: usize,
    pub k: u32,
    pub mode: Mode,
}

impl Params {
    /// Parameters inside the proven regime: `n > 6f` (or `n > 12f` when the
    /// en masse property is constructed) and `k > 6`.
    pub fn new(n: usize, f: usize, k: u32, mode: Mode) -> Result<Params> {
        let p = Params::relaxed(n, f, k, mode)?;
        let factor = match mode {
            Mode::EnMasseAssumed => 6,
            Mode::EnMasseConstructed => 12,
        };
        if n <= factor * f {
            return Err(Error::Parameter(format!(
                "{mode:?} needs n > {factor}f, got n={n}, f={f}"
            )));
        }
        if k <= 6 {
            return Err(Error::Parameter(format!("wrap-around k must exceed 6, got {k}")));
        }
        Ok(p)
    }

    /// Structurally valid parameters with no redundancy requirement. Runs under
    /// such parameters are simulated faithfully but carry no correctness claim.
    pub fn relaxed(n: usize, f: usize, k: u32, mode: Mode) -> Result<Params> {
        if n == 0 || n > MAX_NODES {
            return Err(Error::Parameter(format!("n must be in 1..={MAX_NODES}, got {n}")));
        }
        if f >= n {
            return Err(Error::Parameter(format!("f must be below n, got f={f}, n={n}")));
        }
        if k == 0 {
            return Err(Error::Parameter("k must be positive".into()));
        }
        Ok(Params { n, f, k, mode })
    }

    /// Re-checks the strict constraints of [`Params::new`].
    pub fn is_strict(&self) -> bool {
        Params::new(self.n, self.f, self.k, self.mode).is_ok()
    }

    pub fn modulus(&self) -> Modulus {
        Modulus(self.k)
    }

    /// `n - c*f`, clamped at zero.
    pub fn n_minus(&self, c: usize) -> usize {
        self.n.saturating_sub(c * self.f)
    }

    /// Number of distinct in-between steppers an en masse run requires.
    /// At `f = 0` the literal `n` is unreachable, so `n - 1` is used instead.
    pub fn en_masse_threshold(&self) -> usize {
        self.n_minus(2).min(self.n - 1)
    }

    /// Labels per node in the timestamp layer.
    pub fn label_pool(&self) -> u32 {
        self.n as u32 + 2
    }
}

/// A clock value in `[0, k)`.
#[derive(
    Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct ClockValue(u32);

impl ClockValue {
    pub fn get(self) -> u32 {
        self.0
    }

    pub(crate) fn from_index(v: usize) -> ClockValue {
        ClockValue(v as u32)
    }
}

impl fmt::Display for ClockValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// The wrap-around value `k` of the clock circle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Modulus(u32);

impl Modulus {
    pub fn new(k: u32) -> Result<Modulus> {
        if k == 0 {
            return Err(Error::Parameter("k must be positive".into()));
        }
        Ok(Modulus(k))
    }

    pub fn k(self) -> u32 {
        self.0
    }

    /// Builds a clock value, panicking when `v` is out of range.
    pub fn value(self, v: u32) -> ClockValue {
        assert!(v < self.0, "clock value {v} out of range for k={}", self.0);
        ClockValue(v)
    }

    /// Reduces an arbitrary register content into `[0, k)`.
    pub fn reduce(self, raw: i64) -> ClockValue {
        ClockValue(raw.rem_euclid(self.0 as i64) as u32)
    }

    /// `v ⊕ delta`; `delta` may be negative.
    pub fn add(self, v: ClockValue, delta: i64) -> ClockValue {
        self.reduce(v.0 as i64 + delta)
    }

    /// The unique `j` in `[0, k)` with `from ⊕ j = to`.
    pub fn distance(self, from: ClockValue, to: ClockValue) -> u32 {
        (to.0 + self.0 - from.0) % self.0
    }

    /// `to` is at most `d` ahead of `from`.
    pub fn ahead_of(self, from: ClockValue, to: ClockValue, d: u32) -> bool {
        self.distance(from, to) <= d
    }

    pub fn values(self) -> impl Iterator<Item = ClockValue> {
        (0..self.0).map(ClockValue)
    }
}

/// `(a + b) mod k`, normalized into `[0, k)`.
pub fn modk_add(a: i64, b: i64, k: i64) -> Result<ClockValue> {
    if k <= 0 || k > u32::MAX as i64 {
        return Err(Error::Parameter(format!("modulus must be in 1..=u32::MAX, got {k}")));
    }
    let sum = (a as i128 + b as i128).rem_euclid(k as i128);
    Ok(ClockValue(sum as u32))
}

/// Whether `v2` is at most `d` ahead of `v` on the circle of size `k`.
pub fn ahead_of(v: ClockValue, v2: ClockValue, d: u32, k: u32) -> Result<bool> {
    let m = Modulus::new(k)?;
    if d >= k {
        return Err(Error::Parameter(format!("distance {d} must be below k={k}")));
    }
    if v.0 >= k || v2.0 >= k {
        return Err(Error::Parameter(format!("values {v}, {v2} out of range for k={k}")));
    }
    Ok(m.ahead_of(v, v2, d))
}
