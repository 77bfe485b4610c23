//! Scenario runner and cost estimator.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use moqdns_core::harness::{compare_modes, run_scenario, traffic_estimate_with_relays, Mode, Scenario};

#[derive(Parser, Debug)]
#[command(name = "moqdns-sim", version, about = "Deterministic simulations of pub/sub DNS")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Pubsub,
    BaselineUdp,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one scenario and write its metrics.
    Run {
        #[arg(long, value_name = "FILE")]
        scenario: PathBuf,
        /// Directory for report.json and the CSV files.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Override the scenario's mode.
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Run a scenario in both modes with the same seed and print a table.
    Compare {
        #[arg(long, value_name = "FILE")]
        scenario: PathBuf,
        /// Print JSON instead of the table.
        #[arg(long)]
        json: bool,
    },
    /// Downstream update bandwidth in bits per second.
    Estimate {
        /// Number of subscriptions.
        #[arg(long, value_name = "N")]
        subs: f64,
        /// Seconds between updates.
        #[arg(long, value_name = "S")]
        interval: f64,
        /// Bytes per update.
        #[arg(long, value_name = "B")]
        size: f64,
        /// Relay hops charged per update.
        #[arg(long, default_value_t = 1.0, value_name = "H")]
        relays: f64,
    },
}

fn load(path: &Path) -> Result<Scenario> {
    Scenario::load(path).with_context(|| format!("loading {}", path.display()))
}

fn ms(v: Option<u64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v} ms"))
}

fn run(args: Args) -> Result<()> {
    match args.command {
        Command::Run { scenario, out, mode } => {
            let mut s = load(&scenario)?;
            if let Some(m) = mode {
                s = s.with_mode(match m {
                    ModeArg::Pubsub => Mode::PubSub,
                    ModeArg::BaselineUdp => Mode::BaselineUdp,
                });
            }
            let report = run_scenario(&s)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            report.write_to(&out)?;
            let st = &report.staleness;
            println!("scenario {} ({}), seed {}", report.scenario, report.mode.as_str(), report.seed);
            println!(
                "changes {}, staleness samples {}, p50 {}, p90 {}, p99 {}, max {}",
                report.changes,
                st.samples,
                ms(st.p50_ms),
                ms(st.p90_ms),
                ms(st.p99_ms),
                ms(st.max_ms)
            );
            println!(
                "upstream queries {}, update objects {}, bytes {}",
                report.totals.upstream_queries, report.totals.update_objects, report.totals.bytes
            );
            println!("wrote {}", out.display());
        }
        Command::Compare { scenario, json } => {
            let c = compare_modes(&load(&scenario)?)?;
            if json {
                print!("{}", c.to_json());
            } else {
                print!("{}", c.table());
            }
        }
        Command::Estimate {
            subs,
            interval,
            size,
            relays,
        } => {
            let bps = traffic_estimate_with_relays(subs, interval, size, relays)?;
            println!("{bps} bit/s ({:.3} Gbit/s)", bps / 1e9);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("moqdns-sim: {e:#}");
            ExitCode::FAILURE
        }
    }
}
