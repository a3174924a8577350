//! Seed partitioning. A run seed is split into independent ChaCha streams so
//! that the scheduler, the Byzantine strategy and each node's coin never share
//! draws.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::kernel::NodeId;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init,
    Scheduler,
    Byzantine,
    Coin(NodeId),
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Init => 0,
            Stream::Scheduler => 1,
            Stream::Byzantine => 2,
            Stream::Coin(p) => 16 + p as u64,
        }
    }
}

pub fn stream(seed: u64, which: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which.id());
    rng
}

/// Source of the clock step's coin: picks an index into a domain.
pub trait CoinSource {
    fn pick(&mut self, domain_len: usize) -> usize;
}

impl CoinSource for ChaCha8Rng {
    fn pick(&mut self, domain_len: usize) -> usize {
        if domain_len <= 1 {
            0
        } else {
            self.gen_range(0..domain_len)
        }
    }
}

/// Always returns the same index, clamped into the domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FixedCoin(pub usize);

impl CoinSource for FixedCoin {
    fn pick(&mut self, domain_len: usize) -> usize {
        self.0.min(domain_len.saturating_sub(1))
    }
}
