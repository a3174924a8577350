use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::kernel::{ClockValue, Configuration, Modulus, NodeId, NodeSet, Params};

/// Nodes of `honest` whose `my_val` is at most `d` ahead of `v`.
pub fn h_set(config: &Configuration, honest: NodeSet, m: Modulus, v: ClockValue, d: u32) -> NodeSet {
    honest.iter().filter(|&q| m.ahead_of(v, config.clock_value(q, m), d)).collect()
}

/// Writers whose register toward `p` holds a value at most `d` ahead of `v`.
pub fn h_set_view(config: &Configuration, p: NodeId, m: Modulus, v: ClockValue, d: u32) -> NodeSet {
    (0..config.n()).filter(|&w| m.ahead_of(v, m.reduce(*config.clock.get(w, p)), d)).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TightWitness {
    pub value: ClockValue,
    pub members: NodeSet,
}

/// Every `v` with at least `n - 2f` honest values in `{v, v+1}`.
pub fn is_tight(config: &Configuration, honest: NodeSet, params: &Params) -> Vec<TightWitness> {
    let m = params.modulus();
    let need = params.n_minus(2);
    m.values()
        .filter_map(|v| {
            let members = h_set(config, honest, m, v, 1);
            (members.len() >= need && !members.is_empty()).then_some(TightWitness { value: v, members })
        })
        .collect()
}

/// Tight, and every honest node's registers hold its `my_val`.
pub fn is_converged(config: &Configuration, honest: NodeSet, params: &Params) -> bool {
    config.registers_consistent(honest, params.modulus()) && !is_tight(config, honest, params).is_empty()
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VSummary {
    /// Union of the member values over all witnesses, ascending.
    pub values: Vec<ClockValue>,
    pub vmin: Vec<ClockValue>,
    pub vmax: Vec<ClockValue>,
}

impl VSummary {
    pub fn from_witnesses(config: &Configuration, witnesses: &[TightWitness], m: Modulus) -> VSummary {
        let mut present = alloc::vec![false; m.k() as usize];
        for w in witnesses {
            for q in w.members.iter() {
                present[config.clock_value(q, m).get() as usize] = true;
            }
        }
        let has = |v: ClockValue| present[v.get() as usize];
        let values: Vec<ClockValue> = m.values().filter(|&v| has(v)).collect();
        let vmin = values.iter().copied().filter(|&v| !has(m.add(v, -1))).collect();
        let vmax = values.iter().copied().filter(|&v| !has(m.add(v, 1))).collect();
        VSummary { values, vmin, vmax }
    }

    /// The single minimum, when the shape is regular.
    pub fn min(&self) -> Option<ClockValue> {
        match self.vmin.as_slice() {
            [v] => Some(*v),
            _ => None,
        }
    }

    /// Empty, or `{v}`, `{v, v+1}` or `{v, v+1, v+2}`.
    pub fn shape_ok(&self, m: Modulus) -> bool {
        if self.values.is_empty() {
            return true;
        }
        let Some(lo) = self.min() else { return false };
        self.values.len() <= 3 && self.values.iter().all(|&v| m.distance(lo, v) < self.values.len() as u32)
    }
}

pub fn v_summary(config: &Configuration, honest: NodeSet, params: &Params) -> VSummary {
    VSummary::from_witnesses(config, &is_tight(config, honest, params), params.modulus())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::Mode;

    fn config(params: &Params, vals: &[i64]) -> Configuration {
        let mut c = Configuration::uniform(params, 0, NodeSet::single(params.n - 1));
        for (q, &v) in vals.iter().enumerate() {
            c.my_val[q] = v;
            c.clock.set_row(q, &v);
        }
        c
    }

    #[test]
    fn h_sets() {
        let p = Params::new(7, 1, 8, Mode::EnMasseAssumed).unwrap();
        let c = config(&p, &[4, 4, 5, 5, 4, 3]);
        let m = p.modulus();
        let honest = c.honest_set();
        assert_eq!(h_set(&c, honest, m, m.value(4), 1).len(), 5);
        assert_eq!(h_set(&c, honest, m, m.value(5), 1).len(), 2);
        assert_eq!(h_set(&c, honest, m, m.value(0), 7), honest);
        let w = is_tight(&c, honest, &p);
        assert_eq!(w.iter().map(|w| w.value.get()).collect::<Vec<_>>(), [4]);
        let s = v_summary(&c, honest, &p);
        assert_eq!(s.values, [m.value(4), m.value(5)]);
        assert_eq!(s.min(), Some(m.value(4)));
        assert_eq!(s.vmax, [m.value(5)]);
        assert!(s.shape_ok(m));
    }

    #[test]
    fn all_equal_has_two_witnesses() {
        let p = Params::new(7, 1, 8, Mode::EnMasseAssumed).unwrap();
        let c = config(&p, &[6; 6]);
        let m = p.modulus();
        let w: Vec<u32> = is_tight(&c, c.honest_set(), &p).iter().map(|w| w.value.get()).collect();
        assert_eq!(w, [5, 6]);
        let s = v_summary(&c, c.honest_set(), &p);
        assert_eq!(s.values, [m.value(6)]);
        assert_eq!((s.min(), s.vmax.as_slice()), (Some(m.value(6)), &[m.value(6)][..]));
    }

    #[test]
    fn spread_is_not_tight() {
        let p = Params::new(7, 1, 8, Mode::EnMasseAssumed).unwrap();
        let c = config(&p, &[0, 2, 4, 6, 1, 3]);
        assert!(is_tight(&c, c.honest_set(), &p).is_empty());
        assert_eq!(v_summary(&c, c.honest_set(), &p), VSummary::default());
    }

    #[test]
    fn three_value_summary() {
        // n = 13, f = 1: 11 in {3, 4} and 11 in {4, 5}.
        let p = Params::new(13, 1, 8, Mode::EnMasseConstructed).unwrap();
        let c = config(&p, &[3, 4, 4, 4, 4, 4, 4, 4, 4, 4, 4, 5]);
        let s = v_summary(&c, c.honest_set(), &p);
        let m = p.modulus();
        assert_eq!(s.values, [m.value(3), m.value(4), m.value(5)]);
        assert_eq!(s.min(), Some(m.value(3)));
        assert!(s.shape_ok(m));
    }

    #[test]
    fn view_counts_registers() {
        let p = Params::new(7, 1, 8, Mode::EnMasseAssumed).unwrap();
        let mut c = config(&p, &[4, 4, 5, 5, 4, 3]);
        c.clock.set(6, 2, 4);
        let m = p.modulus();
        assert_eq!(h_set_view(&c, 2, m, m.value(4), 1).len(), 6);
        assert_eq!(h_set_view(&c, 1, m, m.value(4), 1).len(), 5);
    }
}
