//! Shared pieces of the moqdns command-line tools.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::time::Duration;

use anyhow::{Context, Result};
use clap::Args;
use moqdns_core::transport::Node;
use moqdns_net::{parse_fingerprint, tls, Handle, Identity, NetConfig, Runtime, Verify};
use tokio::task::LocalSet;

/// Options every daemon accepts.
#[derive(Args, Debug, Clone)]
pub struct DaemonArgs {
    /// Keepalive probe interval. A peer silent for three intervals is dropped.
    #[arg(long, default_value_t = 30, value_name = "N")]
    pub keepalive_secs: u64,

    /// PEM certificate chain for the MoQT listener. A self-signed
    /// certificate is generated when omitted.
    #[arg(long, requires = "key", value_name = "FILE")]
    pub cert: Option<PathBuf>,

    /// PEM private key for --cert.
    #[arg(long, requires = "cert", value_name = "FILE")]
    pub key: Option<PathBuf>,

    /// Accept only upstream certificates with this SHA-256 fingerprint
    /// (64 hex digits). Repeatable.
    #[arg(long = "pin", value_name = "HEX")]
    pub pins: Vec<String>,

    /// Validate upstream certificates against the CA certificates in this
    /// PEM file.
    #[arg(long, conflicts_with = "pins", value_name = "FILE")]
    pub ca: Option<PathBuf>,

    /// Accept any upstream certificate. This is the default when neither
    /// --pin nor --ca is given.
    #[arg(long, conflicts_with_all = ["pins", "ca"])]
    pub insecure: bool,

    /// Name sent in the TLS SNI and put in generated certificates.
    #[arg(long, default_value = "localhost", value_name = "NAME")]
    pub server_name: String,
}

impl DaemonArgs {
    pub fn identity(&self) -> Result<Option<Identity>> {
        match (&self.cert, &self.key) {
            (Some(cert), Some(key)) => Ok(Some(Identity::from_pem_files(cert, key)?)),
            _ => Ok(None),
        }
    }

    pub fn verify(&self) -> Result<Verify> {
        if let Some(ca) = &self.ca {
            return Ok(Verify::Roots(tls::load_certificates(ca)?));
        }
        if !self.pins.is_empty() {
            let pins = self.pins.iter().map(|p| parse_fingerprint(p)).collect::<Result<_, _>>()?;
            return Ok(Verify::Pinned(pins));
        }
        if !self.insecure {
            tracing::warn!("no --pin or --ca given; upstream certificates are not checked");
        }
        Ok(Verify::Insecure)
    }

    /// Network configuration with the TLS and keepalive options applied.
    /// Outbound sockets bind to the unspecified address of `family`.
    pub fn net_config(&self, family: SocketAddr) -> Result<NetConfig> {
        let any = if family.is_ipv6() {
            SocketAddr::from(([0u16; 8], 0))
        } else {
            SocketAddr::from(([0u8; 4], 0))
        };
        anyhow::ensure!(self.keepalive_secs > 0, "--keepalive-secs must be positive");
        Ok(NetConfig {
            udp_client: any,
            quic_client: any,
            identity: self.identity()?,
            verify: self.verify()?,
            server_name: self.server_name.clone(),
            keepalive: Duration::from_secs(self.keepalive_secs),
            ..NetConfig::default()
        })
    }
}

/// Logs to stderr, filtered by `RUST_LOG` (default `info`).
pub fn init_logging() {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into());
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();
}

/// Runs `node` until SIGINT or SIGTERM. `on_hangup` is called for each
/// SIGHUP. Returns the node after its shutdown hook ran.
pub fn run_daemon(
    cfg: NetConfig,
    node: Box<dyn Node>,
    on_hangup: Option<Box<dyn Fn(Handle)>>,
) -> Result<Box<dyn Node>> {
    let rt = tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .context("starting the async runtime")?;
    let local = LocalSet::new();
    local.block_on(&rt, async move {
        let runtime = Runtime::bind(cfg).await.context("binding sockets")?;
        if let Some(addr) = runtime.moqt_addr() {
            tracing::info!(%addr, "moqt listening");
        }
        if let Some(fp) = runtime.fingerprint() {
            tracing::info!(fingerprint = %hex::encode(fp), "server certificate");
        }
        if let Some(addr) = runtime.udp_addr() {
            tracing::info!(%addr, "dns udp listening");
        }
        let handle = runtime.handle();
        tokio::task::spawn_local(watch_signals(handle, on_hangup));
        Ok(runtime.run(node).await)
    })
}

#[cfg(unix)]
async fn watch_signals(handle: Handle, on_hangup: Option<Box<dyn Fn(Handle)>>) {
    use tokio::signal::unix::{signal, SignalKind};
    let (Ok(mut term), Ok(mut int), Ok(mut hup)) = (
        signal(SignalKind::terminate()),
        signal(SignalKind::interrupt()),
        signal(SignalKind::hangup()),
    ) else {
        tracing::error!("cannot install signal handlers");
        return;
    };
    loop {
        tokio::select! {
            _ = term.recv() => break,
            _ = int.recv() => break,
            _ = hup.recv() => match &on_hangup {
                Some(f) => f(handle.clone()),
                None => tracing::info!("SIGHUP ignored"),
            },
        }
    }
    tracing::info!("shutting down");
    handle.shutdown();
}

#[cfg(not(unix))]
async fn watch_signals(handle: Handle, _on_hangup: Option<Box<dyn Fn(Handle)>>) {
    let _ = tokio::signal::ctrl_c().await;
    handle.shutdown();
}
