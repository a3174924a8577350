use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::asyncclock::{outcomes_for_histogram, Histogram};
use crate::kernel::{ClockValue, Configuration, NodeSet, Params};
use crate::{Error, Result};

/// Default bound on (reader, assignment, coin) cases per configuration.
pub const DEFAULT_ENVELOPE_CAP: u64 = 1_000_000;

/// Exact spread of the clock function over every adversarial move.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Envelope {
    /// For each `v`, the least `l` with `v` at most `l` behind every reachable value.
    pub ell_by_value: Vec<u32>,
    pub min_ell: u32,
    /// Values attaining `min_ell`.
    pub witnesses: Vec<ClockValue>,
    /// Every value some honest reader could install, ascending.
    pub reachable: Vec<ClockValue>,
    pub enumeration_size: u64,
}

impl Envelope {
    /// Values `v` for which the configuration is `ell`-well-defined.
    pub fn defined_values(&self, ell: u32) -> Vec<ClockValue> {
        self.ell_by_value
            .iter()
            .enumerate()
            .filter(|(_, &l)| l <= ell)
            .map(|(v, _)| ClockValue::from_index(v))
            .collect()
    }
}

/// Cases the envelope enumerates: readers × k^faulty × 3 coin outcomes.
pub fn enumeration_size(honest: NodeSet, n: usize, k: u32) -> u64 {
    let faulty = (n - honest.len()) as u32;
    (k as u64)
        .checked_pow(faulty)
        .and_then(|a| a.checked_mul(honest.len() as u64))
        .and_then(|a| a.checked_mul(3))
        .unwrap_or(u64::MAX)
}

/// Enumerates, per honest reader, every value each faulty writer could
/// present in that reader's column, and every coin outcome.
pub fn well_definedness_envelope(
    config: &Configuration,
    honest: NodeSet,
    params: &Params,
    cap: u64,
) -> Result<Envelope> {
    let m = params.modulus();
    let n = params.n;
    let k = params.k;
    let size = enumeration_size(honest, n, k);
    if size > cap {
        return Err(Error::CapExceeded { size, cap });
    }
    let faulty: Vec<usize> = NodeSet::full(n).difference(honest).iter().collect();
    let mut reachable = alloc::vec![false; k as usize];
    for p in honest.iter() {
        let mut hist = Histogram::new(m);
        for w in honest.iter() {
            hist.add(m.reduce(*config.clock.get(w, p)));
        }
        // Odometer over the faulty writers' values.
        let mut digits = alloc::vec![0u32; faulty.len()];
        for &d in &digits {
            hist.add(m.value(d));
        }
        loop {
            for v in outcomes_for_histogram(&hist, params) {
                reachable[v.get() as usize] = true;
            }
            let mut i = 0;
            loop {
                if i == digits.len() {
                    break;
                }
                hist.remove(m.value(digits[i]));
                digits[i] = (digits[i] + 1) % k;
                hist.add(m.value(digits[i]));
                if digits[i] != 0 {
                    break;
                }
                i += 1;
            }
            if i == digits.len() {
                break;
            }
        }
    }
    let reach: Vec<ClockValue> = m.values().filter(|v| reachable[v.get() as usize]).collect();
    let ell_by_value: Vec<u32> =
        m.values().map(|v| reach.iter().map(|&r| m.distance(v, r)).max().unwrap_or(0)).collect();
    let min_ell = ell_by_value.iter().copied().min().unwrap_or(0);
    let witnesses = m.values().filter(|v| ell_by_value[v.get() as usize] == min_ell).collect();
    Ok(Envelope { ell_by_value, min_ell, witnesses, reachable: reach, enumeration_size: size })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::Mode;

    #[test]
    fn uniform_three_forces_four() {
        let p = Params::new(7, 1, 8, Mode::EnMasseAssumed).unwrap();
        let c = Configuration::uniform(&p, 3, NodeSet::single(6));
        let e = well_definedness_envelope(&c, c.honest_set(), &p, DEFAULT_ENVELOPE_CAP).unwrap();
        assert_eq!(e.min_ell, 0);
        assert_eq!(e.witnesses, [p.modulus().value(4)]);
        assert_eq!(e.enumeration_size, 6 * 8 * 3);
    }

    #[test]
    fn no_faults_gives_honest_spread() {
        let p = Params::new(4, 0, 8, Mode::EnMasseAssumed).unwrap();
        let mut c = Configuration::uniform(&p, 2, NodeSet::EMPTY);
        c.clock.set_row(3, &3);
        c.my_val[3] = 3;
        let e = well_definedness_envelope(&c, c.honest_set(), &p, DEFAULT_ENVELOPE_CAP).unwrap();
        // Three 2s and a 3: every reader takes the same forced branch.
        assert_eq!(e.reachable, [p.modulus().value(3)]);
        assert_eq!(e.min_ell, 0);
        assert_eq!(e.defined_values(1).len(), 2);
    }

    #[test]
    fn cap_is_enforced() {
        let p = Params::new(7, 1, 8, Mode::EnMasseAssumed).unwrap();
        let c = Configuration::uniform(&p, 3, NodeSet::single(6));
        assert!(matches!(
            well_definedness_envelope(&c, c.honest_set(), &p, 10),
            Err(Error::CapExceeded { .. })
        ));
    }
}
