//! The randomized clock step and its clock function.
//!
//! A step reads the reader's whole register column mod k, builds a histogram
//! and walks a four-way cascade: strong agreement advances the clock, partial
//! agreement snaps to the relative median, anything else flips a coin over at
//! most three candidates.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::kernel::{ClockValue, ConfigWriter, Configuration, Modulus, NodeId, Params};
use crate::rng::CoinSource;
use crate::{Error, Result};

/// Occurrence counts of each clock value in a column.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Histogram {
    m: Modulus,
    counts: Vec<u32>,
}

impl Histogram {
    pub fn new(m: Modulus) -> Histogram {
        Histogram { m, counts: alloc::vec![0; m.k() as usize] }
    }

    pub fn from_values(m: Modulus, vals: &[ClockValue]) -> Histogram {
        let mut h = Histogram::new(m);
        for &v in vals {
            h.counts[v.get() as usize] += 1;
        }
        h
    }

    pub fn modulus(&self) -> Modulus {
        self.m
    }

    pub fn get(&self, v: ClockValue) -> u32 {
        self.counts[v.get() as usize]
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn total(&self) -> u32 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, v: ClockValue) {
        self.counts[v.get() as usize] += 1;
    }

    pub fn remove(&mut self, v: ClockValue) {
        self.counts[v.get() as usize] -= 1;
    }
}

/// Occurrences of `v, v+1, ..., v+l` (mod k).
pub fn count(hist: &Histogram, v: ClockValue, l: u32) -> u32 {
    let k = hist.m.k();
    debug_assert!(l < k);
    let start = v.get();
    (0..=l).map(|j| hist.counts[((start + j) % k) as usize]).sum()
}

/// Every value whose `l`-window count reaches `a`, in ascending order.
pub fn pass(hist: &Histogram, l: u32, a: u32) -> Vec<ClockValue> {
    hist.m.values().filter(|&v| count(hist, v, l) >= a).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Branch {
    /// `n - f` copies of one value: advance past it.
    Unanimous,
    /// `n - f` values inside a width-2 window: advance past the window.
    NearlyUnanimous,
    /// `n - 2f` values inside a window: relative median.
    Median,
    /// No agreement: coin flip.
    Coin,
}

/// Conditions that cannot arise when the column holds at most `f` faulty
/// values and `n > 6f`, recorded instead of aborting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Anomaly {
    /// A pass set with no element ahead of all others by at most one.
    NoCircularMax,
    /// More than one candidate for `low`; the smallest was taken.
    AmbiguousLow,
    /// No candidate for `low`; the value below the smallest passing one was taken.
    MissingLow,
}

/// Everything one clock step computed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepTrace {
    pub vals: Vec<ClockValue>,
    pub hist: Vec<u32>,
    pub branch: Branch,
    pub pass01: Vec<ClockValue>,
    pub pass1f: Vec<ClockValue>,
    pub pass12f: Vec<ClockValue>,
    pub pass13f: Vec<ClockValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub low: Option<ClockValue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relative_median: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coin_domain: Option<Vec<ClockValue>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coin: Option<u32>,
    pub new_my_val: ClockValue,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub anomalies: Vec<Anomaly>,
}

impl StepTrace {
    /// At most two passing values, consecutive when two.
    pub fn pass12f_well_shaped(&self, m: Modulus) -> bool {
        match self.pass12f.as_slice() {
            [] | [_] => true,
            [a, b] => m.distance(*a, *b) == 1 || m.distance(*b, *a) == 1,
            _ => false,
        }
    }
}

/// The coin-free part of a step: either a forced value or a coin domain.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Outcome {
    Forced(ClockValue),
    Coin(Vec<ClockValue>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Decision {
    pub branch: Branch,
    pub pass01: Vec<ClockValue>,
    pub pass1f: Vec<ClockValue>,
    pub pass12f: Vec<ClockValue>,
    pub pass13f: Vec<ClockValue>,
    pub low: Option<ClockValue>,
    pub relative_median: Option<u32>,
    pub outcome: Outcome,
    pub anomalies: Vec<Anomaly>,
}

/// The element of `set` that every other element is at most one behind.
fn circular_max(m: Modulus, set: &[ClockValue], anomalies: &mut Vec<Anomaly>) -> ClockValue {
    let found = set.iter().copied().find(|&x| set.iter().all(|&y| m.ahead_of(y, x, 1)));
    found.unwrap_or_else(|| {
        anomalies.push(Anomaly::NoCircularMax);
        *set.iter().max().expect("pass set is non-empty")
    })
}

/// Evaluates the decision cascade for a column histogram of `params.n` values.
pub fn decide(hist: &Histogram, params: &Params) -> Decision {
    let m = hist.modulus();
    let n = params.n as u32;
    let nf = params.n_minus(1) as u32;
    let n2f = params.n_minus(2) as u32;
    let n3f = params.n_minus(3) as u32;
    let mut anomalies = Vec::new();

    let pass01 = pass(hist, 0, nf);
    let pass1f = pass(hist, 1, nf);
    let pass12f = pass(hist, 1, n2f);
    let pass13f = pass(hist, 1, n3f);
    let mut low = None;
    let mut relative_median = None;

    let (branch, outcome) = if !pass01.is_empty() {
        let top = circular_max(m, &pass01, &mut anomalies);
        (Branch::Unanimous, Outcome::Forced(m.add(top, 1)))
    } else if !pass1f.is_empty() {
        let top = circular_max(m, &pass1f, &mut anomalies);
        (Branch::NearlyUnanimous, Outcome::Forced(m.add(top, 1)))
    } else if !pass12f.is_empty() {
        let in_pass = |v: ClockValue| pass12f.binary_search(&v).is_ok();
        let candidates: Vec<ClockValue> =
            m.values().filter(|&v| !in_pass(v) && in_pass(m.add(v, 1))).collect();
        let l = match candidates.as_slice() {
            [only] => *only,
            [first, ..] => {
                anomalies.push(Anomaly::AmbiguousLow);
                *first
            }
            [] => {
                anomalies.push(Anomaly::MissingLow);
                m.add(pass12f[0], -1)
            }
        };
        // Smallest window from `low` holding a strict majority; 2c > n avoids
        // rounding n/2.
        let rm = (0..m.k()).find(|&j| 2 * count(hist, l, j) > n).unwrap_or(m.k() - 1);
        low = Some(l);
        relative_median = Some(rm);
        (Branch::Median, Outcome::Forced(m.add(l, rm as i64)))
    } else {
        let mut domain = pass13f.clone();
        let zero = m.value(0);
        if let Err(pos) = domain.binary_search(&zero) {
            domain.insert(pos, zero);
        }
        (Branch::Coin, Outcome::Coin(domain))
    };

    Decision { branch, pass01, pass1f, pass12f, pass13f, low, relative_median, outcome, anomalies }
}

/// Runs one step on an already-read column.
pub fn step_on_column(vals: Vec<ClockValue>, params: &Params, coin: &mut dyn CoinSource) -> StepTrace {
    let m = params.modulus();
    let hist = Histogram::from_values(m, &vals);
    let d = decide(&hist, params);
    let (new_my_val, coin_domain, coin_idx) = match d.outcome {
        Outcome::Forced(v) => (v, None, None),
        Outcome::Coin(domain) => {
            let i = coin.pick(domain.len());
            (domain[i], Some(domain), Some(i as u32))
        }
    };
    StepTrace {
        vals,
        hist: hist.counts,
        branch: d.branch,
        pass01: d.pass01,
        pass1f: d.pass1f,
        pass12f: d.pass12f,
        pass13f: d.pass13f,
        low: d.low,
        relative_median: d.relative_median,
        coin_domain,
        coin: coin_idx,
        new_my_val,
        anomalies: d.anomalies,
    }
}

/// Executes the step for `q` through a writer, without checking fault status.
/// Byzantine nodes that follow the protocol go through here too.
pub(crate) fn run_step(
    w: &mut ConfigWriter<'_>,
    q: NodeId,
    params: &Params,
    coin: &mut dyn CoinSource,
) -> StepTrace {
    let vals = w.config().read_column(q, params.modulus());
    let t = step_on_column(vals, params, coin);
    let v = t.new_my_val.get() as i64;
    w.set_my_val(q, v);
    w.write_clock_row(q, v);
    t
}

/// One atomic step of non-faulty node `q`, applied in place.
pub fn async_clock_step_in_place(
    w: &mut ConfigWriter<'_>,
    q: NodeId,
    params: &Params,
    coin: &mut dyn CoinSource,
) -> Result<StepTrace> {
    check_actor(w.config(), q)?;
    Ok(run_step(w, q, params, coin))
}

/// One atomic step of non-faulty node `q` on a copy of `config`.
pub fn async_clock_step(
    config: &Configuration,
    q: NodeId,
    params: &Params,
    coin: &mut dyn CoinSource,
) -> Result<(Configuration, StepTrace)> {
    let mut next = config.clone();
    let mut w = ConfigWriter::new(&mut next);
    let t = async_clock_step_in_place(&mut w, q, params, coin)?;
    drop(w);
    Ok((next, t))
}

fn check_actor(config: &Configuration, q: NodeId) -> Result<()> {
    if q >= config.n() {
        return Err(Error::Contract(alloc::format!("node {q} out of range")));
    }
    if config.is_faulty(q) {
        return Err(Error::Contract(alloc::format!("node {q} is Byzantine; its moves belong to the adversary")));
    }
    Ok(())
}

/// Every value the step could install for a column histogram, ascending.
pub fn outcomes_for_histogram(hist: &Histogram, params: &Params) -> Vec<ClockValue> {
    match decide(hist, params).outcome {
        Outcome::Forced(v) => alloc::vec![v],
        Outcome::Coin(domain) => domain,
    }
}

/// The clock function of `p`: every value its next step could install.
pub fn clock_function_outcomes(config: &Configuration, p: NodeId, params: &Params) -> Result<Vec<ClockValue>> {
    check_actor(config, p)?;
    let m = params.modulus();
    let hist = Histogram::from_values(m, &config.read_column(p, m));
    Ok(outcomes_for_histogram(&hist, params))
}

/// A clock of size `outer_k` derived from one of size `inner_k = outer_k * ell`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DividedClock {
    pub inner_k: u32,
    pub outer_k: u32,
    pub ell: u32,
}

impl DividedClock {
    pub fn new(outer_k: u32, ell: u32) -> Result<DividedClock> {
        let dc = DividedClock { inner_k: outer_k.saturating_mul(ell), outer_k, ell };
        dc.validate()?;
        Ok(dc)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ell == 0 || self.outer_k == 0 || self.outer_k.checked_mul(self.ell) != Some(self.inner_k) {
            return Err(Error::Parameter(alloc::format!(
                "divided clock needs inner_k = outer_k * ell with positive factors, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// `floor(value / ell)`.
pub fn divided_clock(value: ClockValue, dc: &DividedClock) -> Result<ClockValue> {
    dc.validate()?;
    if value.get() >= dc.inner_k {
        return Err(Error::Parameter(alloc::format!("value {value} out of range for k={}", dc.inner_k)));
    }
    Ok(Modulus::new(dc.outer_k)?.value(value.get() / dc.ell))
}
