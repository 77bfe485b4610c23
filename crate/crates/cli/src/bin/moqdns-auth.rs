//! Authoritative nameserver. Sends SIGHUP to reload the zone file; every
//! answer that changed is pushed to its subscribers.

use std::net::SocketAddr;
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Parser;
use moqdns_cli::{init_logging, run_daemon, DaemonArgs};
use moqdns_core::authoritative::{load_zone_file, AuthConfig, Authoritative};
use moqdns_net::Handle;

#[derive(Parser, Debug)]
#[command(name = "moqdns-auth", version, about = "Authoritative nameserver publishing answers over MoQT-lite")]
struct Args {
    /// Zone document (JSON).
    #[arg(long, value_name = "FILE")]
    zone: PathBuf,

    /// MoQT-lite listen address.
    #[arg(long, value_name = "ADDR")]
    listen: SocketAddr,

    /// Also answer classic DNS over UDP here.
    #[arg(long, value_name = "ADDR")]
    udp: Option<SocketAddr>,

    /// Groups kept per track for fetches.
    #[arg(long, value_name = "N")]
    retention: Option<usize>,

    /// Decline subscriptions; fetches and UDP are still served.
    #[arg(long)]
    no_subscriptions: bool,

    #[command(flatten)]
    daemon: DaemonArgs,
}

fn reloader(path: PathBuf) -> Box<dyn Fn(Handle)> {
    Box::new(move |handle: Handle| {
        let zone = match load_zone_file(&path) {
            Ok(z) => z,
            Err(e) => return tracing::error!(path = %path.display(), error = %e, "reload failed; keeping the old zone"),
        };
        tokio::task::spawn_local(async move {
            match handle.with_node::<Authoritative, _, _>(move |a, io| a.reload(&zone, io)).await {
                Ok(o) => tracing::info!(version = o.version, changed = o.changed, published = o.published, "zone reloaded"),
                Err(e) => tracing::error!(error = %e, "reload failed"),
            }
        });
    })
}

fn main() -> Result<()> {
    init_logging();
    let args = Args::parse();
    let zone = load_zone_file(&args.zone).with_context(|| format!("loading {}", args.zone.display()))?;
    tracing::info!(origin = %zone.origin(), records = zone.record_count(), "zone loaded");

    let mut cfg = AuthConfig {
        accept_subscriptions: !args.no_subscriptions,
        ..AuthConfig::default()
    };
    if let Some(r) = args.retention {
        cfg.retention = r;
    }
    let mut net = args.daemon.net_config(args.listen)?;
    net.moqt_listen = Some(args.listen);
    net.udp_listen = args.udp;
    run_daemon(net, Box::new(Authoritative::new(zone, cfg)), Some(reloader(args.zone)))?;
    Ok(())
}
