//! Recursive resolver serving subscriptions downstream and keeping its
//! cache current through upstream subscriptions or polling.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::time::Duration;

use anyhow::{Context, Result};
use clap::{Parser, ValueEnum};
use moqdns_cli::{init_logging, run_daemon, DaemonArgs};
use moqdns_core::recursive::{parse_root_hints, Recursive, RecursiveConfig};
use moqdns_core::transport::{DEFAULT_DNS_PORT, DEFAULT_MOQT_PORT};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Parser, Debug)]
#[command(name = "moqdns-recursive", version, about = "Recursive resolver with MoQT-lite subscriptions")]
struct Args {
    /// MoQT-lite listen address for downstream clients.
    #[arg(long, value_name = "ADDR")]
    listen: SocketAddr,

    /// Root hints (JSON list of {name, address, capability?}).
    #[arg(long, value_name = "FILE")]
    root_hints: PathBuf,

    /// Also serve classic DNS over UDP here.
    #[arg(long, value_name = "ADDR")]
    udp_listen: Option<SocketAddr>,

    /// Poll servers without MoQT support at TTL expiry.
    #[arg(long, value_enum, value_name = "on|off")]
    poll_fallback: Option<Switch>,

    /// Tear down an upstream subscription nobody used for this long.
    #[arg(long, value_name = "N")]
    idle_secs: Option<u64>,

    /// Upstream subscription budget.
    #[arg(long, value_name = "N")]
    max_subs: Option<usize>,

    /// Port nameservers accept MoQT-lite on.
    #[arg(long, default_value_t = DEFAULT_MOQT_PORT, value_name = "PORT")]
    upstream_moqt_port: u16,

    /// Port nameservers accept classic DNS on.
    #[arg(long, default_value_t = DEFAULT_DNS_PORT, value_name = "PORT")]
    upstream_dns_port: u16,

    #[command(flatten)]
    daemon: DaemonArgs,
}

fn main() -> Result<()> {
    init_logging();
    let args = Args::parse();
    let text = std::fs::read_to_string(&args.root_hints).with_context(|| format!("reading {}", args.root_hints.display()))?;
    let hints = parse_root_hints(&text).with_context(|| format!("parsing {}", args.root_hints.display()))?;
    anyhow::ensure!(!hints.is_empty(), "no root hints in {}", args.root_hints.display());

    let mut cfg = RecursiveConfig::new(hints);
    cfg.moqt_port = args.upstream_moqt_port;
    cfg.udp_port = args.upstream_dns_port;
    if let Some(p) = args.poll_fallback {
        cfg.poll_fallback = p == Switch::On;
    }
    if let Some(s) = args.idle_secs {
        cfg.idle_timeout = Duration::from_secs(s);
    }
    if let Some(n) = args.max_subs {
        cfg.max_subscriptions = n;
    }
    let mut net = args.daemon.net_config(args.listen)?;
    net.moqt_listen = Some(args.listen);
    net.udp_listen = args.udp_listen;
    run_daemon(net, Box::new(Recursive::new(cfg)), None)?;
    Ok(())
}
