use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use clocksync::scenario_file::load_scenario;
use clocksync::sweep::{parse_seeds, sweep, write_csv};
use clocksync::trace_io::{load_trace, save_trace, trace_bytes};
use clocksync::verify::{verify, Property, VerifyOptions};
use clocksync_core::analysis::DEFAULT_ENVELOPE_CAP;
use clocksync_core::sim::{run_scenario, Assertions, Scenario};

#[derive(Parser)]
#[command(name = "clocksync", version, about = "Run, sweep, verify and replay clock synchronization simulations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ScenarioArgs {
    /// Scenario file (TOML, or JSON with a .json extension).
    #[arg(long)]
    scenario: PathBuf,
    /// Override the scenario's horizon.
    #[arg(long)]
    max_rounds: Option<u64>,
    /// Enable every online assertion.
    #[arg(long)]
    assert_online: bool,
    /// Output directory.
    #[arg(long, env = "CLOCKSYNC_OUT", default_value = "out")]
    out: PathBuf,
}

impl ScenarioArgs {
    fn load(&self) -> anyhow::Result<Scenario> {
        let mut s = load_scenario(&self.scenario)?;
        if let Some(r) = self.max_rounds {
            s.horizon_rounds = r;
        }
        if self.assert_online {
            s.assertions = Assertions::all();
        }
        s.validate()?;
        Ok(s)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one seed and write its trace.
    Run {
        #[command(flatten)]
        common: ScenarioArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run many seeds in parallel and write a summary table.
    Sweep {
        #[command(flatten)]
        common: ScenarioArgs,
        /// Seeds such as `0..100` or `1,4,9`.
        #[arg(long, default_value = "0..100")]
        seeds: String,
    },
    /// Check a property on a recorded trace. Exit 0 holds, 1 violated, 2 otherwise.
    Verify {
        trace: PathBuf,
        #[arg(long)]
        property: Property,
        #[arg(long, default_value_t = 5)]
        ell: u32,
        /// Liveness window in rounds.
        #[arg(long, default_value_t = 4)]
        window: usize,
        /// Bound on enumerated adversarial cases per configuration.
        #[arg(long, default_value_t = DEFAULT_ENVELOPE_CAP)]
        cap: u64,
        #[arg(long, default_value_t = 1)]
        stride: usize,
        /// First configuration or event to check.
        #[arg(long)]
        from: Option<usize>,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Re-run the scenario stored in a trace and compare byte for byte.
    Replay {
        trace: PathBuf,
        /// Also write the regenerated trace here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn trace_path(out: &Path, scenario: &Scenario, seed: u64) -> PathBuf {
    out.join(format!("{}-seed{}.jsonl", scenario.id, seed))
}

fn run(cli: Cli) -> anyhow::Result<u8> {
    match cli.command {
        Command::Run { common, seed } => {
            let s = common.load()?;
            let out = run_scenario(&s, seed).with_context(|| format!("seed {seed}"))?;
            let path = trace_path(&common.out, &s, seed);
            save_trace(&path, &out.trace)?;
            let r = &out.summary;
            println!("trace:      {}", path.display());
            println!("events:     {} ({} protocol steps, {} rounds)", r.events, r.protocol_steps, r.rounds);
            match r.convergence_round {
                Some(round) => println!("converged:  round {round} (configuration {})", r.convergence_event.unwrap_or(0)),
                None => println!("converged:  no"),
            }
            println!("post-convergence violations: {}", r.post_convergence_violations);
            println!("online violations: {}", r.online_violations);
            for v in out.violations.iter().take(10) {
                println!("  event {}: {:?}", v.event, v.check);
            }
            Ok(u8::from(!out.violations.is_empty()))
        }
        Command::Sweep { common, seeds } => {
            let s = common.load()?;
            let seeds = parse_seeds(&seeds).map_err(anyhow::Error::msg)?;
            let summary = sweep(&s, &seeds);
            fs::create_dir_all(&common.out).with_context(|| common.out.display().to_string())?;
            let csv_path = common.out.join(format!("{}-sweep.csv", s.id));
            let mut w = BufWriter::new(File::create(&csv_path).with_context(|| csv_path.display().to_string())?);
            write_csv(&mut w, &summary.rows)?;
            w.flush()?;
            let json_path = common.out.join(format!("{}-sweep.json", s.id));
            fs::write(&json_path, serde_json::to_vec_pretty(&summary)?)?;
            let a = &summary.aggregate;
            println!("seeds {}  failed {}  converged {}", a.seeds, a.failed, a.converged);
            if let Some(fr) = a.convergence_fraction {
                println!("convergence fraction       {fr:.3}");
            }
            if let (Some(mean), Some(q)) = (a.mean_convergence_round, &a.convergence_round) {
                println!("convergence round  mean {mean:.1}  p50 {}  p90 {}  p99 {}  max {}", q.p50, q.p90, q.p99, q.max);
            }
            println!("reference 2*3^(n-2f)       {}", a.reference_rounds);
            println!("post-convergence violations {}", a.post_convergence_violations);
            if let Some(c) = a.mean_rounds_per_vmin_change {
                println!("rounds per V_min change    {c:.2}");
            }
            println!("table: {}", csv_path.display());
            Ok(u8::from(a.failed > 0))
        }
        Command::Verify { trace, property, ell, window, cap, stride, from, json } => {
            let t = load_trace(&trace)?;
            let report = verify(&t, property, VerifyOptions { ell, window, cap, stride, from })?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{report}");
            }
            Ok(report.exit_code() as u8)
        }
        Command::Replay { trace, out } => {
            let original = fs::read(&trace).with_context(|| trace.display().to_string())?;
            let t = load_trace(&trace)?;
            let Some(scenario) = t.header.scenario.clone() else {
                bail!("trace does not record its scenario");
            };
            let again = run_scenario(&scenario, t.header.seed)?;
            let bytes = trace_bytes(&again.trace);
            if let Some(path) = out {
                fs::write(&path, &bytes).with_context(|| path.display().to_string())?;
            }
            if bytes == original {
                println!("identical: {} events", again.trace.events().len());
                Ok(0)
            } else {
                let line = original.split(|&b| b == b'\n').zip(bytes.split(|&b| b == b'\n')).position(|(a, b)| a != b);
                println!("differs{}", line.map(|l| format!(" from line {}", l + 1)).unwrap_or_default());
                Ok(1)
            }
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
