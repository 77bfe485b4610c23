//! The event loop that drives one [`Node`] over real sockets.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use bytes::Bytes;
use moqdns_core::transport::{
    CloseReason, ConnectError, Event, Node, Observation, Role, SendError, SessionId, SocketKind, Transport, ALPN,
    DEFAULT_KEEPALIVE, KEEPALIVE_MISSES,
};
use moqdns_core::wire::{encode_control, encode_object, ControlMessage, ObjectMessage};
use moqdns_core::Time;
use quinn::crypto::rustls::{QuicClientConfig, QuicServerConfig};
use quinn::{Connection, Endpoint, IdleTimeout, TransportConfig, VarInt};
use tokio::net::UdpSocket;
use tokio::sync::{mpsc, oneshot};
use tokio::time::Instant;

use crate::session::{self, client_setup, connect_error, established, server_setup, WriterCmd, CODE_CLOSED};
use crate::tls::{self, Fingerprint, Identity, Verify};
use crate::NetError;

pub(crate) type Tx = mpsc::UnboundedSender<Msg>;
type AdminFn = Box<dyn FnOnce(&mut dyn Node, &mut dyn Transport) + Send>;

pub(crate) enum Msg {
    Event(Event),
    Up {
        id: SessionId,
        peer: SocketAddr,
        role: Role,
        link: Link,
    },
    Failed {
        id: SessionId,
        peer: SocketAddr,
        error: ConnectError,
    },
    Down {
        id: SessionId,
        reason: CloseReason,
    },
    Admin(AdminFn),
    Shutdown,
}

pub(crate) struct Link {
    pub(crate) conn: Connection,
    pub(crate) ctl: mpsc::UnboundedSender<WriterCmd>,
}

#[derive(Clone, Debug)]
pub struct NetConfig {
    /// Accept MoQT-lite sessions here.
    pub moqt_listen: Option<SocketAddr>,
    /// Classic DNS service socket.
    pub udp_listen: Option<SocketAddr>,
    /// Socket outbound UDP queries are sent from.
    pub udp_client: SocketAddr,
    /// Bind address for outbound QUIC when not listening.
    pub quic_client: SocketAddr,
    /// Server certificate. A self-signed one is generated when absent.
    pub identity: Option<Identity>,
    pub verify: Verify,
    /// Name sent in the TLS SNI.
    pub server_name: String,
    /// Keepalive probe interval. A peer silent for
    /// `KEEPALIVE_MISSES` intervals is declared dead.
    pub keepalive: Duration,
    pub connect_timeout: Duration,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            moqt_listen: None,
            udp_listen: None,
            udp_client: SocketAddr::from(([0, 0, 0, 0], 0)),
            quic_client: SocketAddr::from(([0, 0, 0, 0], 0)),
            identity: None,
            verify: Verify::Insecure,
            server_name: "localhost".into(),
            keepalive: DEFAULT_KEEPALIVE,
            connect_timeout: Duration::from_secs(5),
        }
    }
}

/// Sockets bound and ready; call [`Runtime::run`] to start the node.
pub struct Runtime {
    cfg: NetConfig,
    endpoint: Endpoint,
    listening: bool,
    fingerprint: Option<Fingerprint>,
    transport: Arc<TransportConfig>,
    service: Option<Arc<UdpSocket>>,
    client: Arc<UdpSocket>,
    tx: Tx,
    rx: mpsc::UnboundedReceiver<Msg>,
}

fn transport_config(keepalive: Duration) -> Result<Arc<TransportConfig>, NetError> {
    let idle = IdleTimeout::try_from(keepalive * KEEPALIVE_MISSES).map_err(|e| NetError::Quic(e.to_string()))?;
    let mut t = TransportConfig::default();
    t.keep_alive_interval(Some(keepalive))
        .max_idle_timeout(Some(idle))
        .max_concurrent_uni_streams(VarInt::from_u32(1024));
    Ok(Arc::new(t))
}

fn bind(addr: SocketAddr) -> impl FnOnce(std::io::Error) -> NetError {
    move |source| NetError::Bind { addr, source }
}

impl Runtime {
    pub async fn bind(cfg: NetConfig) -> Result<Runtime, NetError> {
        let transport = transport_config(cfg.keepalive)?;
        let (endpoint, fingerprint) = match cfg.moqt_listen {
            Some(addr) => {
                let identity = match &cfg.identity {
                    Some(id) => id.clone(),
                    None => Identity::self_signed(&[cfg.server_name.as_str()])?,
                };
                let crypto = QuicServerConfig::try_from(tls::server_config(&identity, ALPN)?)
                    .map_err(|e| NetError::Tls(e.to_string()))?;
                let mut sc = quinn::ServerConfig::with_crypto(Arc::new(crypto));
                sc.transport_config(transport.clone());
                (Endpoint::server(sc, addr).map_err(bind(addr))?, Some(identity.fingerprint()))
            }
            None => (Endpoint::client(cfg.quic_client).map_err(bind(cfg.quic_client))?, None),
        };
        let service = match cfg.udp_listen {
            Some(addr) => Some(Arc::new(UdpSocket::bind(addr).await.map_err(bind(addr))?)),
            None => None,
        };
        let client = Arc::new(UdpSocket::bind(cfg.udp_client).await.map_err(bind(cfg.udp_client))?);
        let (tx, rx) = mpsc::unbounded_channel();
        Ok(Runtime {
            listening: cfg.moqt_listen.is_some(),
            cfg,
            endpoint,
            fingerprint,
            transport,
            service,
            client,
            tx,
            rx,
        })
    }

    pub fn moqt_addr(&self) -> Option<SocketAddr> {
        if self.listening {
            self.endpoint.local_addr().ok()
        } else {
            None
        }
    }

    pub fn udp_addr(&self) -> Option<SocketAddr> {
        self.service.as_ref().and_then(|s| s.local_addr().ok())
    }

    pub fn udp_client_addr(&self) -> Option<SocketAddr> {
        self.client.local_addr().ok()
    }

    /// Fingerprint of the certificate this runtime serves.
    pub fn fingerprint(&self) -> Option<Fingerprint> {
        self.fingerprint
    }

    pub fn handle(&self) -> Handle {
        Handle { tx: self.tx.clone() }
    }

    /// Drives `node` until [`Handle::shutdown`] and returns it.
    ///
    /// The future is not `Send`; run it with `block_on` or on a
    /// `LocalSet`. Connection tasks are spawned on the ambient runtime.
    pub async fn run(self, mut node: Box<dyn Node>) -> Box<dyn Node> {
        let Runtime {
            cfg,
            endpoint,
            listening,
            transport,
            service,
            client,
            tx,
            mut rx,
            ..
        } = self;
        let ids = Arc::new(AtomicU64::new(1));
        if listening {
            tokio::spawn(accept_loop(endpoint.clone(), ids.clone(), tx.clone(), cfg.connect_timeout));
        }
        if let Some(s) = &service {
            tokio::spawn(read_udp(s.clone(), SocketKind::Service, tx.clone()));
        }
        tokio::spawn(read_udp(client.clone(), SocketKind::Client, tx.clone()));

        let mut io = NetIo {
            start: Instant::now(),
            tx,
            ids,
            endpoint: endpoint.clone(),
            transport,
            verify: cfg.verify,
            server_name: cfg.server_name,
            connect_timeout: cfg.connect_timeout,
            client_configs: HashMap::new(),
            sessions: HashMap::new(),
            pending: HashMap::new(),
            service,
            client,
        };
        node.handle(Event::Start, &mut io);
        while let Some(msg) = rx.recv().await {
            match msg {
                Msg::Event(ev @ (Event::Control { session, .. } | Event::Object { session, .. })) => {
                    if io.sessions.contains_key(&session) {
                        node.handle(ev, &mut io);
                    }
                }
                Msg::Event(ev) => node.handle(ev, &mut io),
                Msg::Up { id, peer, role, link } => {
                    if role == Role::Client && io.pending.remove(&id).is_none() {
                        // Closed locally while connecting.
                        let _ = link.ctl.send(WriterCmd::Close);
                        continue;
                    }
                    io.sessions.insert(id, link);
                    node.handle(
                        Event::SessionUp {
                            session: id,
                            peer,
                            role,
                        },
                        &mut io,
                    );
                }
                Msg::Failed { id, peer, error } => {
                    if io.pending.remove(&id).is_some() {
                        node.handle(
                            Event::SessionFailed {
                                session: id,
                                peer,
                                error,
                            },
                            &mut io,
                        );
                    }
                }
                Msg::Down { id, reason } => {
                    if io.sessions.remove(&id).is_some() {
                        node.handle(Event::SessionClosed { session: id, reason }, &mut io);
                    }
                }
                Msg::Admin(f) => f(node.as_mut(), &mut io),
                Msg::Shutdown => break,
            }
        }

        node.shutdown(&mut io);
        let conns: Vec<Connection> = io.sessions.values().map(|l| l.conn.clone()).collect();
        for (_, link) in io.sessions.drain() {
            let _ = link.ctl.send(WriterCmd::Close);
        }
        let flushed = async {
            while conns.iter().any(|c| c.close_reason().is_none()) {
                tokio::time::sleep(Duration::from_millis(10)).await;
            }
        };
        let _ = tokio::time::timeout(Duration::from_secs(2), flushed).await;
        endpoint.close(VarInt::from_u32(CODE_CLOSED), b"shutdown");
        let _ = tokio::time::timeout(Duration::from_secs(1), endpoint.wait_idle()).await;
        node
    }
}

/// Reaches into a running node from other tasks.
#[derive(Clone)]
pub struct Handle {
    tx: Tx,
}

impl Handle {
    /// Runs `f` on the node inside the event loop and returns its result.
    pub async fn with_node<T, R, F>(&self, f: F) -> Result<R, NetError>
    where
        T: Node,
        R: Send + 'static,
        F: FnOnce(&mut T, &mut dyn Transport) -> R + Send + 'static,
    {
        let (otx, orx) = oneshot::channel();
        let admin: AdminFn = Box::new(move |node, io| {
            let any: &mut dyn std::any::Any = node;
            let _ = otx.send(any.downcast_mut::<T>().map(|n| f(n, io)));
        });
        self.tx.send(Msg::Admin(admin)).map_err(|_| NetError::NotRunning)?;
        orx.await.map_err(|_| NetError::NotRunning)?.ok_or(NetError::WrongNode)
    }

    /// Asks the loop to stop. The node's `shutdown` hook runs first.
    pub fn shutdown(&self) {
        let _ = self.tx.send(Msg::Shutdown);
    }

    pub fn is_running(&self) -> bool {
        !self.tx.is_closed()
    }
}

struct NetIo {
    start: Instant,
    tx: Tx,
    ids: Arc<AtomicU64>,
    endpoint: Endpoint,
    transport: Arc<TransportConfig>,
    verify: Verify,
    server_name: String,
    connect_timeout: Duration,
    client_configs: HashMap<Vec<u8>, quinn::ClientConfig>,
    sessions: HashMap<SessionId, Link>,
    pending: HashMap<SessionId, SocketAddr>,
    service: Option<Arc<UdpSocket>>,
    client: Arc<UdpSocket>,
}

impl NetIo {
    fn client_config(&mut self, alpn: &[u8]) -> Result<quinn::ClientConfig, NetError> {
        if let Some(c) = self.client_configs.get(alpn) {
            return Ok(c.clone());
        }
        let crypto =
            QuicClientConfig::try_from(tls::client_config(&self.verify, alpn)?).map_err(|e| NetError::Tls(e.to_string()))?;
        let mut cc = quinn::ClientConfig::new(Arc::new(crypto));
        cc.transport_config(self.transport.clone());
        self.client_configs.insert(alpn.to_vec(), cc.clone());
        Ok(cc)
    }

    fn fail(&self, id: SessionId, peer: SocketAddr, error: ConnectError) {
        let _ = self.tx.send(Msg::Failed { id, peer, error });
    }

    fn live_link(&self, session: SessionId) -> Result<&Link, SendError> {
        if self.pending.contains_key(&session) {
            return Err(SendError::NotEstablished);
        }
        match self.sessions.get(&session) {
            Some(link) if link.conn.close_reason().is_none() => Ok(link),
            _ => Err(SendError::SessionClosed),
        }
    }
}

impl Transport for NetIo {
    fn now(&self) -> Time {
        Time::from_millis(self.start.elapsed().as_millis() as u64)
    }

    fn open_session(&mut self, peer: SocketAddr, alpn: &[u8]) -> SessionId {
        let id = SessionId(self.ids.fetch_add(1, Ordering::Relaxed));
        self.pending.insert(id, peer);
        let cc = match self.client_config(alpn) {
            Ok(c) => c,
            Err(e) => {
                self.fail(id, peer, ConnectError::Setup(e.to_string()));
                return id;
            }
        };
        let connecting = match self.endpoint.connect_with(cc, peer, &self.server_name) {
            Ok(c) => c,
            Err(e) => {
                self.fail(id, peer, ConnectError::Setup(e.to_string()));
                return id;
            }
        };
        let (tx, limit) = (self.tx.clone(), self.connect_timeout);
        tokio::spawn(async move {
            let attempt = async {
                let conn = connecting.await.map_err(connect_error)?;
                let (send, reader) = client_setup(&conn).await?;
                Ok::<_, ConnectError>((conn, send, reader))
            };
            let error = match tokio::time::timeout(limit, attempt).await {
                Ok(Ok((conn, send, reader))) => return established(id, Role::Client, conn, send, reader, tx),
                Ok(Err(e)) => e,
                Err(_) => ConnectError::Timeout,
            };
            tracing::debug!(%id, %peer, %error, "session failed");
            let _ = tx.send(Msg::Failed { id, peer, error });
        });
        id
    }

    fn send_control(&mut self, session: SessionId, msg: ControlMessage) -> Result<(), SendError> {
        let link = self.live_link(session)?;
        let bytes = encode_control(&msg).map_err(|e| SendError::Encode(e.to_string()))?;
        link.ctl.send(WriterCmd::Frame(bytes)).map_err(|_| SendError::SessionClosed)
    }

    fn send_object(&mut self, session: SessionId, obj: ObjectMessage) -> Result<(), SendError> {
        let link = self.live_link(session)?;
        let bytes = encode_object(&obj).map_err(|e| SendError::Encode(e.to_string()))?;
        if bytes.len() > session::MAX_OBJECT {
            return Err(SendError::Encode(format!("object of {} bytes exceeds the stream limit", bytes.len())));
        }
        let conn = link.conn.clone();
        tokio::spawn(async move {
            let result = async {
                let mut send = conn.open_uni().await?;
                send.write_all(&bytes).await?;
                send.finish()?;
                Ok::<_, Box<dyn std::error::Error + Send + Sync>>(())
            };
            if let Err(e) = result.await {
                tracing::debug!(error = %e, "object not sent");
            }
        });
        Ok(())
    }

    fn close_session(&mut self, session: SessionId) {
        self.pending.remove(&session);
        if let Some(link) = self.sessions.remove(&session) {
            let _ = link.ctl.send(WriterCmd::Close);
        }
    }

    fn is_live(&self, session: SessionId) -> bool {
        self.sessions
            .get(&session)
            .is_some_and(|l| l.conn.close_reason().is_none())
    }

    fn send_udp(&mut self, socket: SocketKind, to: SocketAddr, payload: Bytes) {
        let sock = match socket {
            SocketKind::Service => self.service.as_ref().unwrap_or(&self.client),
            SocketKind::Client => &self.client,
        };
        match sock.try_send_to(&payload, to) {
            Ok(_) => {}
            // Readiness is not known until the reactor has polled the socket once.
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                let sock = sock.clone();
                tokio::spawn(async move {
                    if let Err(e) = sock.send_to(&payload, to).await {
                        tracing::debug!(%to, error = %e, "udp send failed");
                    }
                });
            }
            Err(e) => tracing::debug!(%to, error = %e, "udp send failed"),
        }
    }

    fn set_timer(&mut self, at: Time, token: u64) {
        let Some(deadline) = self.start.checked_add(Duration::from_millis(at.as_millis())) else {
            return;
        };
        let tx = self.tx.clone();
        tokio::spawn(async move {
            tokio::select! {
                _ = tokio::time::sleep_until(deadline) => {
                    let _ = tx.send(Msg::Event(Event::Timer(token)));
                }
                _ = tx.closed() => {}
            }
        });
    }

    fn record(&mut self, obs: Observation) {
        tracing::trace!(?obs, "observation");
    }
}

async fn accept_loop(endpoint: Endpoint, ids: Arc<AtomicU64>, tx: Tx, limit: Duration) {
    loop {
        let incoming = tokio::select! {
            i = endpoint.accept() => i,
            _ = tx.closed() => return,
        };
        let Some(incoming) = incoming else { return };
        let id = SessionId(ids.fetch_add(1, Ordering::Relaxed));
        let tx = tx.clone();
        tokio::spawn(async move {
            let peer = incoming.remote_address();
            let attempt = async {
                let conn = incoming.await.map_err(|e| e.to_string())?;
                match server_setup(&conn).await {
                    Ok((send, reader)) => Ok((conn, send, reader)),
                    Err(e) => {
                        conn.close(VarInt::from_u32(session::CODE_PROTOCOL), b"setup failed");
                        Err(e.to_string())
                    }
                }
            };
            match tokio::time::timeout(limit, attempt).await {
                Ok(Ok((conn, send, reader))) => established(id, Role::Server, conn, send, reader, tx),
                Ok(Err(e)) => tracing::debug!(%peer, error = %e, "inbound session failed"),
                Err(_) => tracing::debug!(%peer, "inbound session timed out"),
            }
        });
    }
}

async fn read_udp(socket: Arc<UdpSocket>, kind: SocketKind, tx: Tx) {
    let mut buf = vec![0u8; 65_535];
    loop {
        let r = tokio::select! {
            r = socket.recv_from(&mut buf) => r,
            _ = tx.closed() => return,
        };
        match r {
            Ok((n, from)) => {
                let ev = Event::Udp {
                    socket: kind,
                    from,
                    payload: Bytes::copy_from_slice(&buf[..n]),
                };
                if tx.send(Msg::Event(ev)).is_err() {
                    return;
                }
            }
            // ICMP errors surface here on some platforms; the socket stays usable.
            Err(e) => tracing::debug!(error = %e, "udp receive failed"),
        }
    }
}
