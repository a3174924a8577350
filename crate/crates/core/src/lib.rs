//! Simulation and run-checking toolkit for a self-stabilizing, Byzantine-tolerant
//! clock protocol over asynchronous shared memory.
//!
//! The crate is `no_std` (it needs `alloc`). Everything here is pure: step
//! functions map configurations to configurations, schedulers and Byzantine
//! strategies draw from explicitly seeded streams, and checkers read recorded
//! traces without mutating them. File formats, sweeps and the command line
//! live in the companion `clocksync` crate.
//!
//! Module map:
//!
//! * [`kernel`]: mod-k arithmetic, registers, configurations, traces, rounds.
//! * [`asyncclock`]: the clock update step, its clock function, and the divider.
//! * [`enmasse`]: bounded timestamps that pace the clock step ("act").
//! * [`adversary`]: schedulers, Byzantine strategies and capture plans.
//! * [`analysis`]: tightness, well-definedness envelopes and trace verdicts.
//! * [`sim`]: scenarios and the step loop that produces traces.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

pub mod adversary;
pub mod analysis;
pub mod asyncclock;
pub mod enmasse;
mod error;
pub mod kernel;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};
pub use kernel::{ahead_of, modk_add, ClockValue, Mode, Modulus, NodeId, NodeSet, Params};
