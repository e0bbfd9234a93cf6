use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpStream};
use std::time::{Duration, Instant};

use vlp_core::coop_service::protocol::{decode_message, Message};
use vlp_core::coop_service::{serve, ServeOptions, ServerHandle};
use vlp_core::scene::Scenario;

fn start(headless: bool) -> ServerHandle {
    let opts = ServeOptions {
        bind: "127.0.0.1:0".into(),
        headless,
        ..ServeOptions::default()
    };
    serve(Scenario::default(), &opts).expect("server binds")
}

struct LineClient {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl LineClient {
    fn connect(addr: SocketAddr) -> Self {
        let s = TcpStream::connect(addr).unwrap();
        s.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
        Self { writer: s.try_clone().unwrap(), reader: BufReader::new(s) }
    }

    fn next(&mut self) -> Option<Message> {
        let mut line = String::new();
        match self.reader.read_line(&mut line) {
            Ok(0) | Err(_) => None,
            Ok(_) => Some(decode_message(&line).expect("server sends valid lines")),
        }
    }

    fn send(&mut self, line: &str) {
        self.writer.write_all(line.as_bytes()).unwrap();
        self.writer.write_all(b"\n").unwrap();
    }

    fn snapshot(addr: SocketAddr) -> vlp_core::coop_service::protocol::SceneSnapshot {
        match Self::connect(addr).next() {
            Some(Message::Scene(s)) => s,
            other => panic!("expected scene first, got {other:?}"),
        }
    }
}

#[test]
fn tcp_client_gets_snapshot_then_tick_messages() {
    let server = start(true);
    assert!(server.ws_addr().is_none());
    let mut c = LineClient::connect(server.tcp_addr());
    let Some(Message::Scene(snap)) = c.next() else { panic!("scene must come first") };
    assert_eq!(snap.agents.len(), 2);
    assert!(!snap.lamps.is_empty());
    let mut last_t = None;
    for _ in 0..20 {
        let m = c.next().expect("stream stays open");
        let (_, t) = m.agent_tick().expect("per-agent message");
        if let Some(prev) = last_t {
            assert!(t >= prev);
        }
        last_t = Some(t);
    }
    server.shutdown();
}

#[test]
fn console_page_and_websocket_share_a_port() {
    let server = start(false);
    let http = server.ws_addr().expect("browser port");

    let mut s = TcpStream::connect(http).unwrap();
    s.write_all(b"GET / HTTP/1.1\r\nHost: x\r\n\r\n").unwrap();
    let mut body = String::new();
    s.read_to_string(&mut body).unwrap();
    assert!(body.starts_with("HTTP/1.1 200"));
    assert!(body.contains("<canvas"));

    let mut s = TcpStream::connect(http).unwrap();
    s.write_all(b"GET /missing HTTP/1.1\r\nHost: x\r\n\r\n").unwrap();
    let mut body = String::new();
    s.read_to_string(&mut body).unwrap();
    assert!(body.starts_with("HTTP/1.1 404"));

    let (mut ws, _) = tungstenite::connect(format!("ws://{http}/")).unwrap();
    let first = ws.read().unwrap();
    let Message::Scene(_) = decode_message(first.to_text().unwrap()).unwrap() else {
        panic!("scene must come first")
    };
    let next = ws.read().unwrap();
    assert!(decode_message(next.to_text().unwrap()).unwrap().agent_tick().is_some());
    server.shutdown();
}

#[test]
fn control_commands_are_last_writer_wins() {
    let server = start(true);
    let addr = server.tcp_addr();
    let mut a = LineClient::connect(addr);
    let mut b = LineClient::connect(addr);
    a.next();
    b.next();
    a.send(r#"{"type":"control","command":"pause"}"#);
    let deadline = Instant::now() + Duration::from_secs(5);
    while !LineClient::snapshot(addr).paused {
        assert!(Instant::now() < deadline, "pause never applied");
    }
    b.send(r#"{"type":"control","command":"resume"}"#);
    while LineClient::snapshot(addr).paused {
        assert!(Instant::now() < deadline, "resume never applied");
    }
    b.send(r#"{"type":"control","command":"follow_mode","enabled":false}"#);
    while LineClient::snapshot(addr).follow_mode {
        assert!(Instant::now() < deadline, "follow_mode off never applied");
    }
    a.send(r#"{"type":"control","command":"follow_mode"}"#);
    while !LineClient::snapshot(addr).follow_mode {
        assert!(Instant::now() < deadline, "follow_mode on never applied");
    }
    server.shutdown();
}

#[test]
fn four_clients_stay_live_together() {
    let server = start(false);
    let tcp = server.tcp_addr();
    let ws_addr = server.ws_addr().unwrap();
    let mut lines: Vec<LineClient> = (0..3).map(|_| LineClient::connect(tcp)).collect();
    let (mut ws, _) = tungstenite::connect(format!("ws://{ws_addr}/")).unwrap();
    let started = Instant::now();
    for c in &mut lines {
        assert!(matches!(c.next(), Some(Message::Scene(_))));
        for _ in 0..30 {
            assert!(c.next().is_some_and(|m| m.agent_tick().is_some()));
        }
    }
    let mut got = 0;
    while got < 30 {
        if let Ok(tungstenite::Message::Text(_)) = ws.read() {
            got += 1;
        }
    }
    assert!(started.elapsed() < Duration::from_secs(10));
    server.shutdown();
}

#[test]
fn malformed_clients_are_dropped_without_disturbing_others() {
    let server = start(false);
    let tcp = server.tcp_addr();
    let mut good = LineClient::connect(tcp);
    good.next();

    let mut bad = LineClient::connect(tcp);
    bad.send("{not json");
    let deadline = Instant::now() + Duration::from_secs(5);
    while bad.next().is_some() {
        assert!(Instant::now() < deadline, "bad TCP client not disconnected");
    }

    let mut raw = TcpStream::connect(tcp).unwrap();
    raw.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
    raw.write_all(b"\xff\xfe\xfd\n").unwrap();
    let mut sink = Vec::new();
    if let Err(e) = raw.read_to_end(&mut sink) {
        assert_eq!(e.kind(), std::io::ErrorKind::ConnectionReset, "non-UTF-8 client not disconnected");
    }

    let (mut ws, _) = tungstenite::connect(format!("ws://{}/", server.ws_addr().unwrap())).unwrap();
    ws.send(tungstenite::Message::Text(r#"{"type":"goal","x":"far"}"#.into())).unwrap();
    let deadline = Instant::now() + Duration::from_secs(5);
    loop {
        match ws.read() {
            Ok(tungstenite::Message::Close(_)) | Err(_) => break,
            Ok(_) => assert!(Instant::now() < deadline, "bad websocket client not closed"),
        }
    }

    for _ in 0..20 {
        assert!(good.next().is_some_and(|m| m.agent_tick().is_some()));
    }
    server.shutdown();
}
