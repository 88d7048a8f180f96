//! Live mode: the same server and agent over TCP, one length-prefixed
//! frame per envelope. Both sides count ticks from the Unix epoch so a
//! restarted server and a running agent agree on token expiry.

use std::collections::VecDeque;
use std::io::{self, BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, RwLock};
use std::thread;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use log::{debug, info, warn};

use crate::agent::{AgentError, BootOutcome, LinkError, NodeAgent, ServerLink};
use crate::server::SecurityServer;
use crate::wire::{Envelope, FrameCodec, WireError};
use crate::Tick;

pub const DEFAULT_TICK_MS: u64 = 100;

pub fn wall_tick(tick_ms: u64) -> Tick {
    let ms = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0);
    ms / tick_ms.max(1)
}

/// Accepts connections forever. Requests are serialized through a write
/// lock; deep analysis runs once per tick on its own thread.
pub fn serve(listener: TcpListener, server: SecurityServer, tick_ms: u64) -> io::Result<()> {
    let shared = Arc::new(RwLock::new(server));
    {
        let shared = Arc::clone(&shared);
        thread::spawn(move || loop {
            thread::sleep(Duration::from_millis(tick_ms.max(1)));
            let now = wall_tick(tick_ms);
            if let Err(e) = shared.write().unwrap().run_deep_analysis(now) {
                warn!("deep analysis failed: {e}");
            }
        });
    }
    for conn in listener.incoming() {
        let stream = match conn {
            Ok(s) => s,
            Err(e) => {
                warn!("accept failed: {e}");
                continue;
            }
        };
        let shared = Arc::clone(&shared);
        thread::spawn(move || {
            let peer = stream.peer_addr().ok();
            if let Err(e) = session(stream, &shared, tick_ms) {
                debug!("session {peer:?} ended: {e}");
            }
        });
    }
    Ok(())
}

fn session(stream: TcpStream, shared: &RwLock<SecurityServer>, tick_ms: u64) -> Result<(), WireError> {
    let codec = FrameCodec::default();
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    while let Some(request) = codec.read::<_, Envelope>(&mut reader)? {
        let now = wall_tick(tick_ms);
        let out = shared.write().unwrap().handle(&request, now);
        info!(
            "{} {} -> {}",
            request.sender,
            request.body.kind(),
            out.reply.body.kind()
        );
        codec.write(&mut writer, &out.reply)?;
        for push in &out.pushes {
            codec.write(&mut writer, push)?;
        }
        writer.flush()?;
    }
    Ok(())
}

/// Client side of a session. A reader thread turns incoming frames into
/// channel messages; replies are matched on `reply_to`, anything else is a
/// push and waits in the inbox.
pub struct TcpLink {
    addr: SocketAddr,
    timeout: Duration,
    conn: Option<(TcpStream, Receiver<Result<Envelope, String>>)>,
    inbox: VecDeque<Envelope>,
}

impl TcpLink {
    pub fn new(addr: impl ToSocketAddrs, timeout: Duration) -> io::Result<Self> {
        let addr = addr
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "no address"))?;
        Ok(Self {
            addr,
            timeout,
            conn: None,
            inbox: VecDeque::new(),
        })
    }

    fn connect(&mut self) -> Result<(), LinkError> {
        if self.conn.is_some() {
            return Ok(());
        }
        let stream =
            TcpStream::connect_timeout(&self.addr, self.timeout).map_err(|e| LinkError::Unreachable(e.to_string()))?;
        let read_half = stream.try_clone().map_err(|e| LinkError::Unreachable(e.to_string()))?;
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            let codec = FrameCodec::default();
            let mut r = BufReader::new(read_half);
            loop {
                match codec.read::<_, Envelope>(&mut r) {
                    Ok(Some(env)) => {
                        if tx.send(Ok(env)).is_err() {
                            return;
                        }
                    }
                    Ok(None) => {
                        let _ = tx.send(Err("connection closed".into()));
                        return;
                    }
                    Err(e) => {
                        let _ = tx.send(Err(e.to_string()));
                        return;
                    }
                }
            }
        });
        self.conn = Some((stream, rx));
        Ok(())
    }

    fn drop_conn(&mut self, why: String) -> LinkError {
        self.conn = None;
        LinkError::Unreachable(why)
    }

    /// Pushes received so far.
    pub fn take_pushes(&mut self) -> Vec<Envelope> {
        if let Some((_, rx)) = &self.conn {
            let mut closed = false;
            while let Ok(msg) = rx.try_recv() {
                match msg {
                    Ok(env) => self.inbox.push_back(env),
                    Err(_) => closed = true,
                }
            }
            if closed {
                self.conn = None;
            }
        }
        self.inbox.drain(..).collect()
    }
}

impl ServerLink for TcpLink {
    fn call(&mut self, request: Envelope) -> Result<Envelope, LinkError> {
        self.connect()?;
        let seq = request.seq;
        let (stream, _) = self.conn.as_mut().expect("connected");
        let bytes = FrameCodec::default()
            .encode(&request)
            .map_err(|e| LinkError::Protocol(e.to_string()))?;
        if let Err(e) = stream.write_all(&bytes) {
            return Err(self.drop_conn(e.to_string()));
        }
        loop {
            let (_, rx) = self.conn.as_ref().expect("connected");
            match rx.recv_timeout(self.timeout) {
                Ok(Ok(env)) if env.reply_to == Some(seq) => return Ok(env),
                Ok(Ok(env)) => self.inbox.push_back(env),
                Ok(Err(e)) => return Err(self.drop_conn(e)),
                Err(RecvTimeoutError::Timeout) => return Err(self.drop_conn("reply timed out".into())),
                Err(RecvTimeoutError::Disconnected) => return Err(self.drop_conn("reader gone".into())),
            }
        }
    }
}

/// An infection planted by the operator, for demos and tests.
#[derive(Clone, Debug)]
pub struct PlannedInjection {
    /// Ticks after the agent starts.
    pub after: Tick,
    pub vm_id: String,
    pub pattern: Vec<u8>,
}

#[derive(Clone, Debug)]
pub struct AgentLoop {
    pub tick_ms: u64,
    /// Stop after this many ticks; run forever when `None`.
    pub ticks: Option<u64>,
    pub injections: Vec<PlannedInjection>,
}

/// Drives an agent against a live server: boot (again, whenever admission
/// is lost), apply pushes, then housekeeping and a guard cycle per tick.
pub fn run_agent(agent: &mut NodeAgent, link: &mut TcpLink, cfg: &AgentLoop) -> Result<(), AgentError> {
    let start = wall_tick(cfg.tick_ms);
    let mut injections = cfg.injections.clone();
    let mut n = 0u64;
    while cfg.ticks.is_none_or(|limit| n < limit) {
        let tick = wall_tick(cfg.tick_ms);
        if !agent.is_admitted(tick) {
            match agent.boot_sequence(link, tick) {
                Ok(BootOutcome::Admitted) => {
                    info!("{} admitted", agent.node_id());
                    if !agent.tokens().is_empty() && agent.tokens().iter().all(|t| t.expiry_tick <= tick) {
                        return Err(AgentError::StaleTokens);
                    }
                }
                Ok(BootOutcome::Denied(reason)) => return Err(AgentError::Denied(reason)),
                Err(AgentError::Link(e)) => warn!("boot: {e}"),
                Err(e) => return Err(e),
            }
        }
        for push in link.take_pushes() {
            if let Err(e) = agent.handle_push(link, &push, tick) {
                warn!("push rejected: {e}");
            }
        }
        injections.retain(|inj| {
            if tick - start < inj.after {
                return true;
            }
            if let Err(e) = agent.expose(&inj.vm_id, &inj.pattern, tick, tick) {
                warn!("injection into {} skipped: {e}", inj.vm_id);
            }
            false
        });
        if agent.is_admitted(tick) {
            for e in agent.maintain(link, tick) {
                warn!("{e}");
            }
            for r in agent.guard_cycle(link, tick) {
                if r.verdict.is_infected() {
                    info!("{} {}: {}", r.component_id, r.observation.vm_id, r.verdict);
                }
            }
        }
        n += 1;
        thread::sleep(Duration::from_millis(cfg.tick_ms));
    }
    Ok(())
}
