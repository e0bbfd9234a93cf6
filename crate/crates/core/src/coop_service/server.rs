//! Network front end for the simulation.
//!
//! One thread owns the [`Simulation`]; connection threads talk to it only
//! through a queue of [`Event`]s and receive outbound lines on their own
//! channel. Order within each client's stream is the order the simulation
//! produced it.
//!
//! Two listeners: plain TCP carrying newline-delimited JSON, and an HTTP
//! port that upgrades to WebSocket (one message per text frame) or serves
//! the console page at `/`.

use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use thiserror::Error;

use super::protocol::{decode_message, encode_json, Message};
use super::sim::{SimOptions, Simulation};
use crate::scene::Scenario;

const CONSOLE_HTML: &str = include_str!("../../assets/console.html");
const POLL: Duration = Duration::from_millis(10);

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("cannot bind {addr}: {source}")]
    Bind { addr: String, source: io::Error },
}

#[derive(Debug, Clone)]
pub struct ServeOptions {
    /// TCP line-protocol address.
    pub bind: String,
    /// Browser endpoint. `None` picks the TCP port plus one (or an
    /// ephemeral port when the TCP port is ephemeral).
    pub ws_bind: Option<String>,
    /// No browser endpoint at all.
    pub headless: bool,
    /// Pace ticks at the frame rate; otherwise run flat out.
    pub realtime: bool,
    /// Stop after this many ticks.
    pub max_ticks: Option<u64>,
    pub sim: SimOptions,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:7878".into(),
            ws_bind: None,
            headless: false,
            realtime: true,
            max_ticks: None,
            sim: SimOptions::default(),
        }
    }
}

enum Event {
    Join { id: u64, tx: Sender<Arc<str>>, socket: Option<TcpStream> },
    Leave(u64),
    Inbound(u64, Message),
    Shutdown,
}

pub struct ServerHandle {
    tcp_addr: SocketAddr,
    ws_addr: Option<SocketAddr>,
    events: Sender<Event>,
    stop: Arc<AtomicBool>,
    sim_thread: JoinHandle<()>,
    acceptors: Vec<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn tcp_addr(&self) -> SocketAddr {
        self.tcp_addr
    }

    pub fn ws_addr(&self) -> Option<SocketAddr> {
        self.ws_addr
    }

    /// Blocks until the simulation ends (tick limit or shutdown).
    pub fn wait(self) {
        let _ = self.sim_thread.join();
        self.stop.store(true, Ordering::SeqCst);
        for a in self.acceptors {
            let _ = a.join();
        }
    }

    pub fn shutdown(self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = self.events.send(Event::Shutdown);
        self.wait();
    }
}

fn bind(addr: &str) -> Result<TcpListener, ServeError> {
    let err = |source| ServeError::Bind { addr: addr.to_string(), source };
    let addrs: Vec<SocketAddr> = addr.to_socket_addrs().map_err(err)?.collect();
    let l = TcpListener::bind(&addrs[..]).map_err(err)?;
    l.set_nonblocking(true).map_err(err)?;
    Ok(l)
}

pub fn serve(scenario: Scenario, opts: &ServeOptions) -> Result<ServerHandle, ServeError> {
    let tcp = bind(&opts.bind)?;
    let tcp_addr = tcp.local_addr().map_err(|source| ServeError::Bind { addr: opts.bind.clone(), source })?;
    let ws = if opts.headless {
        None
    } else {
        let addr = match &opts.ws_bind {
            Some(a) => a.clone(),
            None if tcp_addr.port() == 0 => SocketAddr::new(tcp_addr.ip(), 0).to_string(),
            None => SocketAddr::new(tcp_addr.ip(), tcp_addr.port().wrapping_add(1)).to_string(),
        };
        Some(bind(&addr)?)
    };
    let ws_addr = ws.as_ref().and_then(|l| l.local_addr().ok());

    let (events, rx) = mpsc::channel();
    let stop = Arc::new(AtomicBool::new(false));
    let ids = Arc::new(AtomicU64::new(0));
    let mut acceptors = Vec::new();
    {
        let (events, stop, ids) = (events.clone(), stop.clone(), ids.clone());
        acceptors.push(thread::spawn(move || accept_loop(tcp, &stop, |s| tcp_client(s, ids.fetch_add(1, Ordering::SeqCst), events.clone()))));
    }
    if let Some(ws) = ws {
        let (events, stop) = (events.clone(), stop.clone());
        acceptors.push(thread::spawn(move || accept_loop(ws, &stop, |s| http_client(s, ids.fetch_add(1, Ordering::SeqCst), events.clone()))));
    }
    let sim = Simulation::new(scenario, opts.sim);
    let (realtime, max_ticks) = (opts.realtime, opts.max_ticks);
    let sim_stop = stop.clone();
    let sim_thread = thread::spawn(move || run_sim(sim, rx, &sim_stop, realtime, max_ticks));
    info!("serving line protocol on {tcp_addr}");
    if let Some(a) = ws_addr {
        info!("console and WebSocket on http://{a}/");
    }
    Ok(ServerHandle {
        tcp_addr,
        ws_addr,
        events,
        stop,
        sim_thread,
        acceptors,
    })
}

fn accept_loop(listener: TcpListener, stop: &AtomicBool, mut spawn: impl FnMut(TcpStream)) {
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((s, peer)) => {
                debug!("connection from {peer}");
                if s.set_nonblocking(false).is_ok() {
                    spawn(s);
                }
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(POLL),
            Err(e) => warn!("accept failed: {e}"),
        }
    }
}

struct Client {
    id: u64,
    tx: Sender<Arc<str>>,
    socket: Option<TcpStream>,
}

fn run_sim(mut sim: Simulation, rx: Receiver<Event>, stop: &AtomicBool, realtime: bool, max_ticks: Option<u64>) {
    let period = Duration::from_secs_f64(sim.dt());
    let mut clients: Vec<Client> = Vec::new();
    let mut next = Instant::now();
    let handle = |sim: &mut Simulation, clients: &mut Vec<Client>, ev: Event| -> bool {
        match ev {
            Event::Join { id, tx, socket } => {
                let snap: Arc<str> = encode_json(&Message::Scene(sim.snapshot())).into();
                if tx.send(snap).is_ok() {
                    clients.push(Client { id, tx, socket });
                }
            }
            Event::Leave(id) => clients.retain(|c| c.id != id),
            Event::Inbound(id, msg) => {
                debug!("client {id}: {msg:?}");
                sim.apply(&msg)
            }
            Event::Shutdown => return false,
        }
        true
    };
    'run: loop {
        loop {
            let now = Instant::now();
            let wait = if realtime { next.saturating_duration_since(now) } else { Duration::ZERO };
            let ev = if wait.is_zero() {
                match rx.try_recv() {
                    Ok(ev) => ev,
                    Err(_) => break,
                }
            } else {
                match rx.recv_timeout(wait) {
                    Ok(ev) => ev,
                    Err(RecvTimeoutError::Timeout) => break,
                    Err(RecvTimeoutError::Disconnected) => break 'run,
                }
            };
            if !handle(&mut sim, &mut clients, ev) {
                break 'run;
            }
        }
        if stop.load(Ordering::SeqCst) || max_ticks.is_some_and(|m| sim.tick_index() >= m) {
            break;
        }
        if !sim.paused() {
            for rec in sim.step() {
                let line: Arc<str> = encode_json(&rec.message).into();
                clients.retain(|c| c.tx.send(line.clone()).is_ok());
            }
        }
        next = (next + period).max(Instant::now() - period);
    }
    for c in clients {
        if let Some(s) = c.socket {
            let _ = s.shutdown(Shutdown::Both);
        }
    }
}

fn tcp_client(stream: TcpStream, id: u64, events: Sender<Event>) {
    let (Ok(reader), Ok(mut writer), Ok(closer)) = (stream.try_clone(), stream.try_clone(), stream.try_clone()) else {
        return;
    };
    let (tx, rx) = mpsc::channel::<Arc<str>>();
    if events.send(Event::Join { id, tx, socket: Some(closer) }).is_err() {
        return;
    }
    thread::spawn(move || {
        for line in rx {
            if writer
                .write_all(line.as_bytes())
                .and_then(|_| writer.write_all(b"\n"))
                .is_err()
            {
                break;
            }
        }
        let _ = writer.shutdown(Shutdown::Write);
    });
    thread::spawn(move || {
        for line in BufReader::new(reader).lines() {
            let line = match line {
                Ok(l) => l,
                Err(e) if e.kind() == io::ErrorKind::InvalidData => {
                    warn!("client {id}: non-UTF-8 input, disconnecting");
                    break;
                }
                Err(_) => break,
            };
            if line.trim().is_empty() {
                continue;
            }
            match decode_message(&line) {
                Ok(m) => {
                    let _ = events.send(Event::Inbound(id, m));
                }
                Err(e) => {
                    warn!("client {id}: {e}, disconnecting");
                    break;
                }
            }
        }
        let _ = events.send(Event::Leave(id));
        let _ = stream.shutdown(Shutdown::Both);
    });
}

/// Reads the request head without consuming it, so an upgrade can hand
/// the untouched stream to the WebSocket handshake.
fn peek_head(stream: &TcpStream) -> io::Result<String> {
    let mut buf = vec![0u8; 8192];
    let deadline = Instant::now() + Duration::from_secs(5);
    loop {
        let n = stream.peek(&mut buf)?;
        let head = &buf[..n];
        if head.windows(4).any(|w| w == b"\r\n\r\n") || n == buf.len() {
            return Ok(String::from_utf8_lossy(head).into_owned());
        }
        if n == 0 || Instant::now() > deadline {
            return Err(io::ErrorKind::UnexpectedEof.into());
        }
        thread::sleep(Duration::from_millis(2));
    }
}

fn http_client(stream: TcpStream, id: u64, events: Sender<Event>) {
    thread::spawn(move || {
        let Ok(head) = peek_head(&stream) else {
            return;
        };
        let lower = head.to_ascii_lowercase();
        if lower.lines().any(|l| l.starts_with("upgrade:") && l.contains("websocket")) {
            ws_session(stream, id, events);
        } else {
            let _ = static_response(stream, &head);
        }
    });
}

fn static_response(mut stream: TcpStream, head: &str) -> io::Result<()> {
    let end = head.find("\r\n\r\n").map_or(head.len(), |i| i + 4);
    let mut sink = vec![0u8; end];
    stream.read_exact(&mut sink)?;
    let path = head.split_whitespace().nth(1).unwrap_or("/");
    let (status, ctype, body) = match path {
        "/" | "/index.html" => ("200 OK", "text/html; charset=utf-8", CONSOLE_HTML),
        _ => ("404 Not Found", "text/plain", "not found\n"),
    };
    write!(
        stream,
        "HTTP/1.1 {status}\r\nContent-Type: {ctype}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    )?;
    stream.flush()
}

fn ws_session(stream: TcpStream, id: u64, events: Sender<Event>) {
    use tungstenite::{Error as WsError, Message as WsMessage};

    let mut ws = match tungstenite::accept(stream) {
        Ok(ws) => ws,
        Err(e) => {
            debug!("websocket handshake failed: {e}");
            return;
        }
    };
    if ws.get_ref().set_read_timeout(Some(POLL)).is_err() {
        return;
    }
    let (tx, rx) = mpsc::channel::<Arc<str>>();
    if events.send(Event::Join { id, tx, socket: None }).is_err() {
        return;
    }
    'session: loop {
        match ws.read() {
            Ok(WsMessage::Text(text)) => match decode_message(&text) {
                Ok(m) => {
                    let _ = events.send(Event::Inbound(id, m));
                }
                Err(e) => {
                    warn!("websocket client {id}: {e}, disconnecting");
                    let _ = ws.close(None);
                    let _ = ws.flush();
                    break;
                }
            },
            Ok(WsMessage::Binary(_)) => {
                warn!("websocket client {id}: binary frame, disconnecting");
                let _ = ws.close(None);
                let _ = ws.flush();
                break;
            }
            Ok(WsMessage::Close(_)) => break,
            Ok(_) => {}
            Err(WsError::Io(e)) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
            Err(_) => break,
        }
        loop {
            match rx.try_recv() {
                Ok(line) => {
                    if ws.send(WsMessage::Text(line.to_string())).is_err() {
                        break 'session;
                    }
                }
                Err(mpsc::TryRecvError::Empty) => break,
                Err(mpsc::TryRecvError::Disconnected) => {
                    let _ = ws.close(None);
                    let _ = ws.flush();
                    break 'session;
                }
            }
        }
    }
    let _ = events.send(Event::Leave(id));
}
