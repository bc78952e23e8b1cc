//! Command-line runs: load a scenario, run the coordinator, the rolling
//! baseline or both, and write the artifacts to an output directory.

use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};

use crate::baseline::{OrderPolicy, RollingBaselineConfig};
use crate::error::{Error, Result};
use crate::metrics::{comparison_csv, comparison_report, violations_csv, RunMetrics};
use crate::scenario::{load_scenario, run_coordinator, run_rolling, ScenarioFile};
use crate::types::secs_to_ms;

pub const EXIT_OK: i32 = 0;
pub const EXIT_SET_FAILED: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Coordinator,
    Rolling,
    /// Coordinator plus rolling runs for batch sizes 1 to 4 (or the given one).
    Compare,
}

#[derive(Clone, Debug, Parser)]
#[command(name = "iaas-upgrade", version, about = "Simulate an IaaS upgrade under the coordinator or a rolling baseline")]
pub struct Args {
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long, value_enum, default_value_t = Mode::Coordinator)]
    pub mode: Mode,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Overrides the failure model seed; also seeds ordering samples.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Simulated seconds after which the run stops.
    #[arg(long)]
    pub max_sim_time: Option<f64>,
    /// auto, enumerate-all, sample-<n> or fixed-order.
    #[arg(long, default_value = "auto")]
    pub order_policy: String,
}

fn write(dir: &Path, name: &str, body: &str) -> Result<()> {
    std::fs::write(dir.join(name), body)?;
    Ok(())
}

fn json<T: serde::Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializes");
    s.push('\n');
    s
}

/// Runs per the arguments; returns the unsuccessful change sets of the coordinator run.
pub fn execute(args: &Args, scenario: &ScenarioFile) -> Result<Vec<String>> {
    let policy: OrderPolicy = args.order_policy.parse()?;
    if args.mode == Mode::Rolling && args.batch_size.is_none() {
        return Err(Error::InvalidFlags("rolling mode requires --batch-size".into()));
    }
    if args.batch_size == Some(0) {
        return Err(Error::InvalidBatchSize);
    }
    let max = args.max_sim_time.map(secs_to_ms);
    std::fs::create_dir_all(&args.out)?;
    let mut rows: Vec<(String, Vec<RunMetrics>)> = Vec::new();
    let mut failed = Vec::new();

    if matches!(args.mode, Mode::Coordinator | Mode::Compare) {
        let run = run_coordinator(scenario, args.seed, max)?;
        write(&args.out, "reports.jsonl", &run.reports_jsonl)?;
        let mut log = String::new();
        for r in &run.log {
            log.push_str(&serde_json::to_string(r).expect("log serializes"));
            log.push('\n');
        }
        write(&args.out, "events.jsonl", &log)?;
        write(&args.out, "metrics.json", &json(&run.metrics))?;
        write(&args.out, "violations.csv", &violations_csv(&run.metrics.violations)?)?;
        failed = run.unsuccessful_sets.iter().map(|s| s.to_string()).collect();
        rows.push(("coordinator".into(), vec![run.metrics]));
    }
    if matches!(args.mode, Mode::Rolling | Mode::Compare) {
        let sizes: Vec<usize> = match args.batch_size {
            Some(b) => vec![b],
            None => (1..=4).collect(),
        };
        for b in sizes {
            let cfg = RollingBaselineConfig {
                batch_size: b,
                order_policy: policy.clone(),
                seed: args.seed.unwrap_or(scenario.failure.seed),
            };
            let result = run_rolling(scenario, &cfg)?;
            let mut lines = String::new();
            for (run, m) in result.runs.iter().zip(&result.metrics) {
                let line = serde_json::json!({
                    "batch_size": b,
                    "ordering": run.ordering,
                    "duration": run.duration as f64 / 1000.0,
                    "migrations": run.migrations,
                    "infeasible_batches": run.infeasible_batches,
                    "penalty": m.penalty.penalty,
                });
                lines.push_str(&line.to_string());
                lines.push('\n');
            }
            write(&args.out, &format!("rolling-b{b}.jsonl"), &lines)?;
            if result.infeasible() {
                eprintln!("batch size {b}: evacuation infeasible in some batches");
            }
            rows.push((format!("rolling-b{b}"), result.metrics));
        }
    }
    write(&args.out, "comparison.csv", &comparison_csv(&comparison_report(&rows))?)?;
    Ok(failed)
}

/// Process entry: parses `argv`, runs and maps the outcome to an exit code.
pub fn main_with<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args = match Args::try_parse_from(argv) {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let scenario = match load_scenario(&args.scenario) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("{}: {e}", args.scenario.display());
            return EXIT_USAGE;
        }
    };
    match execute(&args, &scenario) {
        Ok(failed) if failed.is_empty() => EXIT_OK,
        Ok(failed) => {
            eprintln!("change sets not completed: {}", failed.join(", "));
            EXIT_SET_FAILED
        }
        Err(e @ (Error::InvalidFlags(_) | Error::InvalidBatchSize)) => {
            eprintln!("{e}");
            EXIT_USAGE
        }
        Err(e) => {
            eprintln!("run failed: {e}");
            EXIT_SET_FAILED
        }
    }
}
