use std::collections::BTreeSet;
use std::io::Write;

use clocksync_core::sim::{run_scenario, Scenario, SummaryRow};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Parses `0..100`, `3`, `1,5,9` or any comma-separated mix.
pub fn parse_seeds(text: &str) -> Result<Vec<u64>, String> {
    let mut seeds = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let (inclusive, b) = match b.strip_prefix('=') {
                Some(b) => (true, b),
                None => (false, b),
            };
            let a: u64 = a.trim().parse().map_err(|_| format!("bad seed range start in {part:?}"))?;
            let b: u64 = b.trim().parse().map_err(|_| format!("bad seed range end in {part:?}"))?;
            if inclusive {
                seeds.extend(a..=b);
            } else {
                seeds.extend(a..b);
            }
        } else {
            seeds.push(part.parse().map_err(|_| format!("bad seed {part:?}"))?);
        }
    }
    Ok(seeds)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub p50: f64,
    pub p90: f64,
    pub p99: f64,
    pub max: f64,
}

impl Quantiles {
    /// Nearest-rank quantiles; `None` for an empty sample.
    pub fn of(sample: &[f64]) -> Option<Quantiles> {
        if sample.is_empty() {
            return None;
        }
        let mut s = sample.to_vec();
        s.sort_by(f64::total_cmp);
        let q = |p: f64| s[((p * s.len() as f64).ceil() as usize).clamp(1, s.len()) - 1];
        Some(Quantiles { p50: q(0.5), p90: q(0.9), p99: q(0.99), max: s[s.len() - 1] })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub seeds: usize,
    pub failed: usize,
    pub converged: usize,
    /// Fraction of completed seeds that converged within the horizon.
    pub convergence_fraction: Option<f64>,
    pub mean_convergence_round: Option<f64>,
    pub convergence_round: Option<Quantiles>,
    /// `2 * 3^(n - 2f)`, the expected-round bound the mean is compared to.
    pub reference_rounds: f64,
    pub post_convergence_violations: usize,
    pub online_violations: usize,
    pub mean_rounds_per_vmin_change: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub scenario_id: String,
    pub rows: Vec<SummaryRow>,
    pub aggregate: Aggregate,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

pub fn aggregate(scenario: &Scenario, rows: &[SummaryRow]) -> Aggregate {
    let ok: Vec<&SummaryRow> = rows.iter().filter(|r| r.error.is_none()).collect();
    let conv: Vec<f64> = ok.iter().filter_map(|r| r.convergence_round).map(|r| r as f64).collect();
    let cadence: Vec<f64> = ok.iter().filter_map(|r| r.rounds_per_vmin_change).collect();
    Aggregate {
        seeds: rows.len(),
        failed: rows.len() - ok.len(),
        converged: conv.len(),
        convergence_fraction: (!ok.is_empty()).then(|| conv.len() as f64 / ok.len() as f64),
        mean_convergence_round: mean(&conv),
        convergence_round: Quantiles::of(&conv),
        reference_rounds: 2.0 * 3f64.powi(scenario.n.saturating_sub(2 * scenario.f) as i32),
        post_convergence_violations: ok.iter().map(|r| r.post_convergence_violations).sum(),
        online_violations: ok.iter().map(|r| r.online_violations).sum(),
        mean_rounds_per_vmin_change: mean(&cadence),
    }
}

/// Runs every distinct seed in parallel. Failing seeds become rows with
/// `error` set; the sweep carries on.
pub fn sweep(scenario: &Scenario, seeds: &[u64]) -> ExperimentSummary {
    let unique: BTreeSet<u64> = seeds.iter().copied().collect();
    if unique.len() != seeds.len() {
        log::warn!("{} duplicate seeds dropped", seeds.len() - unique.len());
    }
    let unique: Vec<u64> = unique.into_iter().collect();
    let rows: Vec<SummaryRow> = unique
        .par_iter()
        .map(|&seed| match run_scenario(scenario, seed) {
            Ok(out) => out.summary,
            Err(e) => {
                log::warn!("seed {seed}: {e}");
                SummaryRow::failed(seed, &e)
            }
        })
        .collect();
    ExperimentSummary { scenario_id: scenario.id.clone(), aggregate: aggregate(scenario, &rows), rows }
}

/// Column order of the summary table.
pub const CSV_HEADER: [&str; 12] = [
    "seed",
    "converged",
    "convergence_event",
    "convergence_round",
    "rounds",
    "events",
    "protocol_steps",
    "post_convergence_violations",
    "vmin_changes",
    "rounds_per_vmin_change",
    "online_violations",
    "error",
];

fn opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map(T::to_string).unwrap_or_default()
}

/// Writes one CSV row per seed, header first.
pub fn write_csv(out: impl Write, rows: &[SummaryRow]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_HEADER)?;
    for r in rows {
        w.write_record([
            r.seed.to_string(),
            r.converged.to_string(),
            opt(&r.convergence_event),
            opt(&r.convergence_round),
            r.rounds.to_string(),
            r.events.to_string(),
            r.protocol_steps.to_string(),
            r.post_convergence_violations.to_string(),
            r.vmin_changes.to_string(),
            opt(&r.rounds_per_vmin_change),
            r.online_violations.to_string(),
            opt(&r.error),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use clocksync_core::adversary::SchedulerKind;
    use clocksync_core::sim::InitKind;
    use clocksync_core::Mode;

    #[test]
    fn seed_specs() {
        assert_eq!(parse_seeds("0..3").unwrap(), [0, 1, 2]);
        assert_eq!(parse_seeds("1..=2, 7").unwrap(), [1, 2, 7]);
        assert_eq!(parse_seeds("").unwrap(), Vec::<u64>::new());
        assert!(parse_seeds("x").is_err());
        assert!(parse_seeds("3..y").is_err());
    }

    #[test]
    fn quantiles_nearest_rank() {
        let q = Quantiles::of(&[5.0, 1.0, 3.0, 2.0, 4.0]).unwrap();
        assert_eq!((q.p50, q.p90, q.p99, q.max), (3.0, 5.0, 5.0, 5.0));
        assert!(Quantiles::of(&[]).is_none());
    }

    fn scenario() -> Scenario {
        let mut s = Scenario::new("sw", 7, 1, 8, Mode::EnMasseAssumed, SchedulerKind::EnMasseEnforcing);
        s.init = InitKind::UniformRandomRegisters;
        s.horizon_rounds = 2000;
        s.extra_rounds = 4;
        s
    }

    #[test]
    fn empty_and_duplicate_seeds() {
        let s = scenario();
        let empty = sweep(&s, &[]);
        assert!(empty.rows.is_empty());
        assert_eq!(empty.aggregate.seeds, 0);
        assert_eq!(empty.aggregate.convergence_fraction, None);
        let dup = sweep(&s, &[3, 1, 3]);
        assert_eq!(dup.rows.iter().map(|r| r.seed).collect::<Vec<_>>(), [1, 3]);
    }

    #[test]
    fn parallel_matches_sequential() {
        let s = scenario();
        let par = sweep(&s, &[0, 1, 2, 3]);
        for row in &par.rows {
            assert_eq!(&run_scenario(&s, row.seed).unwrap().summary, row);
        }
        assert_eq!(par.aggregate.reference_rounds, 486.0);
    }

    #[test]
    fn csv_has_fixed_header() {
        let rows = [SummaryRow { seed: 9, converged: true, convergence_round: Some(4), ..Default::default() }];
        let mut buf = Vec::new();
        write_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER.join(","));
        assert_eq!(lines.next().unwrap(), "9,true,,4,0,0,0,0,0,,0,");
    }
}
