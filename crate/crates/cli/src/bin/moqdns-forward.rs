//! Stub-side forwarder: classic DNS to local clients, MoQT-lite upstream,
//! with subscription state kept across restarts in the resume file.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::time::Duration;

use anyhow::{Context, Result};
use clap::Parser;
use moqdns_cli::{init_logging, run_daemon, DaemonArgs};
use moqdns_core::forwarder::{Forwarder, ForwarderConfig, ResumeStore, UpstreamMode};

#[derive(Parser, Debug)]
#[command(name = "moqdns-forward", version, about = "DNS forwarder resolving over MoQT-lite subscriptions")]
struct Args {
    /// Classic DNS listen address for local clients.
    #[arg(long, value_name = "ADDR")]
    udp_listen: SocketAddr,

    /// Recursive resolver (MoQT-lite address, or DNS address with --udp-upstream).
    #[arg(long, value_name = "ADDR")]
    upstream: SocketAddr,

    /// Where the largest group seen per track is kept.
    #[arg(long, value_name = "PATH")]
    resume_file: PathBuf,

    /// Drop a track no client asked for in this long.
    #[arg(long, value_name = "N")]
    idle_secs: Option<u64>,

    /// Query the upstream over classic UDP instead of subscribing.
    #[arg(long)]
    udp_upstream: bool,

    #[command(flatten)]
    daemon: DaemonArgs,
}

fn main() -> Result<()> {
    init_logging();
    let args = Args::parse();
    let store =
        ResumeStore::open(&args.resume_file).with_context(|| format!("opening {}", args.resume_file.display()))?;
    tracing::info!(tracks = store.len(), "resume state loaded");

    let mut cfg = ForwarderConfig::new(args.upstream);
    if args.udp_upstream {
        cfg.mode = UpstreamMode::Udp;
    }
    if let Some(s) = args.idle_secs {
        cfg.idle_timeout = Duration::from_secs(s);
    }
    let mut net = args.daemon.net_config(args.upstream)?;
    net.udp_listen = Some(args.udp_listen);
    run_daemon(net, Box::new(Forwarder::new(cfg, store)), None)?;
    Ok(())
}
