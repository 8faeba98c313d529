//! Performance stream wire protocol.
//!
//! A session opens with one ASCII header line
//! `<direction> <duration_s> <rate_mbps> <msg_size>\n`; for `up` the client
//! then sends pseudo-random messages paced to the rate for the duration, for
//! `down` the server does. Upload sessions end with the server reporting its
//! received byte count as `OK <bytes>\n`. Malformed headers earn
//! `ERR <reason>\n`; an endpoint already serving a stream answers `BUSY\n`.
//! TCP and UDP listeners share the port number but are separate endpoints.

use std::io::{ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, UdpSocket};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Up,
    Down,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Up => "up",
            Direction::Down => "down",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Transport {
    Tcp,
    Udp,
}

impl Transport {
    pub fn as_str(self) -> &'static str {
        match self {
            Transport::Tcp => "tcp",
            Transport::Udp => "udp",
        }
    }
}

/// Parsed session header.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamRequest {
    pub direction: Direction,
    pub duration_s: f64,
    pub rate_mbps: f64,
    pub msg_size: usize,
}

impl StreamRequest {
    pub fn header_line(&self) -> String {
        format!(
            "{} {} {} {}\n",
            self.direction.as_str(),
            self.duration_s,
            self.rate_mbps,
            self.msg_size
        )
    }

    pub fn parse(line: &str) -> Result<Self, String> {
        let mut parts = line.split_whitespace();
        let direction = match parts.next() {
            Some("up") => Direction::Up,
            Some("down") => Direction::Down,
            other => return Err(format!("bad direction {other:?}")),
        };
        let duration_s: f64 = parts
            .next()
            .and_then(|v| v.parse().ok())
            .filter(|v| *v > 0.0)
            .ok_or("bad duration")?;
        let rate_mbps: f64 = parts
            .next()
            .and_then(|v| v.parse().ok())
            .filter(|v| *v > 0.0)
            .ok_or("bad rate")?;
        let msg_size: usize = parts
            .next()
            .and_then(|v| v.parse().ok())
            .filter(|v| *v > 0)
            .ok_or("bad msg size")?;
        if parts.next().is_some() {
            return Err("trailing fields".into());
        }
        Ok(Self {
            direction,
            duration_s,
            rate_mbps,
            msg_size,
        })
    }
}

/// Token bucket refilled on a 10 ms tick, bounding send burstiness.
pub struct TokenBucket {
    rate_bytes_per_s: f64,
    capacity: f64,
    available: f64,
    last_refill: Instant,
}

pub const PACING_TICK: Duration = Duration::from_millis(10);

impl TokenBucket {
    pub fn new(rate_mbps: f64, msg_size: usize) -> Self {
        let rate_bytes_per_s = rate_mbps * 1e6 / 8.0;
        let per_tick = rate_bytes_per_s * PACING_TICK.as_secs_f64();
        // Headroom over one tick absorbs scheduler oversleep; without it the
        // overflow tokens are lost and the achieved rate sags.
        let capacity = (msg_size as f64).max(per_tick) + 2.0 * per_tick;
        Self {
            rate_bytes_per_s,
            capacity,
            available: msg_size as f64,
            last_refill: Instant::now(),
        }
    }

    fn refill(&mut self) {
        let now = Instant::now();
        let elapsed = now.duration_since(self.last_refill).as_secs_f64();
        self.available = (self.available + elapsed * self.rate_bytes_per_s).min(self.capacity);
        self.last_refill = now;
    }

    /// Block until `bytes` tokens are available, then spend them.
    pub fn acquire(&mut self, bytes: usize) {
        loop {
            self.refill();
            if self.available >= bytes as f64 {
                self.available -= bytes as f64;
                return;
            }
            let deficit = bytes as f64 - self.available;
            let wait = Duration::from_secs_f64(deficit / self.rate_bytes_per_s);
            std::thread::sleep(wait.max(PACING_TICK).min(Duration::from_millis(50)));
        }
    }
}

/// One server-side session log entry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ServerRecord {
    pub direction: Direction,
    pub transport: Transport,
    pub bytes: u64,
    pub duration_s: f64,
    pub rate_mbps: f64,
    pub complete: bool,
}

fn fill_pseudo_random(buf: &mut [u8]) {
    // Cheap xorshift fill; payload content carries no meaning.
    let mut state: u64 = 0x9e37_79b9_7f4a_7c15;
    for b in buf.iter_mut() {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        *b = state as u8;
    }
}

const HEADER_CAP: usize = 128;
const READ_TIMEOUT: Duration = Duration::from_millis(50);
const HEADER_TIMEOUT: Duration = Duration::from_secs(2);
const ACK_TIMEOUT: Duration = Duration::from_secs(2);
/// Receivers keep listening this long past the nominal duration.
const RECV_GRACE: Duration = Duration::from_millis(400);

fn read_line_bytewise(stream: &mut TcpStream, deadline: Instant) -> std::io::Result<String> {
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    while line.len() < HEADER_CAP {
        if Instant::now() >= deadline {
            return Err(std::io::Error::new(ErrorKind::TimedOut, "header timeout"));
        }
        match stream.read(&mut byte) {
            Ok(0) => break,
            Ok(_) => {
                if byte[0] == b'\n' {
                    break;
                }
                line.push(byte[0]);
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock || e.kind() == ErrorKind::TimedOut => {
                continue;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(String::from_utf8_lossy(&line).into_owned())
}

/// A perf endpoint serving one TCP and one UDP stream at a time on one port.
pub struct PerfServer {
    port: u16,
    shutdown: Arc<AtomicBool>,
    records: Arc<Mutex<Vec<ServerRecord>>>,
    handles: Vec<JoinHandle<()>>,
}

impl PerfServer {
    pub fn start(bind_host: &str, port: u16) -> std::io::Result<PerfServer> {
        let listener = TcpListener::bind((bind_host, port))?;
        let actual_port = listener.local_addr()?.port();
        let udp = UdpSocket::bind((bind_host, actual_port))?;
        listener.set_nonblocking(true)?;
        udp.set_read_timeout(Some(READ_TIMEOUT))?;

        let shutdown = Arc::new(AtomicBool::new(false));
        let records = Arc::new(Mutex::new(Vec::new()));

        let tcp_handle = {
            let shutdown = shutdown.clone();
            let records = records.clone();
            std::thread::spawn(move || tcp_accept_loop(listener, shutdown, records))
        };
        let udp_handle = {
            let shutdown = shutdown.clone();
            let records = records.clone();
            std::thread::spawn(move || udp_loop(udp, shutdown, records))
        };

        Ok(PerfServer {
            port: actual_port,
            shutdown,
            records,
            handles: vec![tcp_handle, udp_handle],
        })
    }

    pub fn port(&self) -> u16 {
        self.port
    }

    pub fn records(&self) -> Vec<ServerRecord> {
        self.records.lock().unwrap().clone()
    }

    pub fn stop(mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

fn tcp_accept_loop(
    listener: TcpListener,
    shutdown: Arc<AtomicBool>,
    records: Arc<Mutex<Vec<ServerRecord>>>,
) {
    let busy = Arc::new(AtomicBool::new(false));
    let mut sessions: Vec<JoinHandle<()>> = Vec::new();
    while !shutdown.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((mut stream, _peer)) => {
                if busy.swap(true, Ordering::SeqCst) {
                    let _ = stream.write_all(b"BUSY\n");
                    // Drain whatever the client already sent; closing with
                    // unread data would turn the reply into a reset.
                    let _ = stream.set_read_timeout(Some(Duration::from_millis(50)));
                    let mut sink = [0u8; 1024];
                    while matches!(stream.read(&mut sink), Ok(n) if n > 0) {}
                    continue;
                }
                let busy = busy.clone();
                let records = records.clone();
                sessions.push(std::thread::spawn(move || {
                    handle_tcp_session(&mut stream, &records);
                    busy.store(false, Ordering::SeqCst);
                }));
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => {
                std::thread::sleep(Duration::from_millis(5));
            }
            Err(_) => break,
        }
        sessions.retain(|h| !h.is_finished());
    }
    for h in sessions {
        let _ = h.join();
    }
}

fn handle_tcp_session(stream: &mut TcpStream, records: &Mutex<Vec<ServerRecord>>) {
    let _ = stream.set_nodelay(true);
    let _ = stream.set_read_timeout(Some(READ_TIMEOUT));
    let header = match read_line_bytewise(stream, Instant::now() + HEADER_TIMEOUT) {
        Ok(line) => line,
        Err(_) => return,
    };
    let request = match StreamRequest::parse(&header) {
        Ok(r) => r,
        Err(reason) => {
            let _ = stream.write_all(format!("ERR {reason}\n").as_bytes());
            return;
        }
    };
    let duration = Duration::from_secs_f64(request.duration_s);
    match request.direction {
        Direction::Up => {
            // Count client bytes for the requested duration, then report.
            let start = Instant::now();
            let deadline = start + duration + RECV_GRACE;
            let mut buf = vec![0u8; 64 * 1024];
            let mut bytes = 0u64;
            let mut complete = true;
            loop {
                if Instant::now() >= deadline {
                    break;
                }
                match stream.read(&mut buf) {
                    Ok(0) => break,
                    Ok(n) => bytes += n as u64,
                    Err(e)
                        if e.kind() == ErrorKind::WouldBlock
                            || e.kind() == ErrorKind::TimedOut =>
                    {
                        continue
                    }
                    Err(_) => {
                        complete = false;
                        break;
                    }
                }
            }
            let _ = stream.write_all(format!("OK {bytes}\n").as_bytes());
            records.lock().unwrap().push(ServerRecord {
                direction: Direction::Up,
                transport: Transport::Tcp,
                bytes,
                duration_s: request.duration_s,
                rate_mbps: request.rate_mbps,
                complete,
            });
        }
        Direction::Down => {
            let mut payload = vec![0u8; request.msg_size];
            fill_pseudo_random(&mut payload);
            let mut bucket = TokenBucket::new(request.rate_mbps, request.msg_size);
            let start = Instant::now();
            let mut bytes = 0u64;
            let mut complete = true;
            while start.elapsed() < duration {
                bucket.acquire(request.msg_size);
                if start.elapsed() >= duration {
                    break;
                }
                if stream.write_all(&payload).is_err() {
                    complete = false;
                    break;
                }
                bytes += request.msg_size as u64;
            }
            let _ = stream.shutdown(std::net::Shutdown::Write);
            records.lock().unwrap().push(ServerRecord {
                direction: Direction::Down,
                transport: Transport::Tcp,
                bytes,
                duration_s: request.duration_s,
                rate_mbps: request.rate_mbps,
                complete,
            });
        }
    }
}

fn udp_loop(socket: UdpSocket, shutdown: Arc<AtomicBool>, records: Arc<Mutex<Vec<ServerRecord>>>) {
    let mut buf = vec![0u8; 64 * 1024];
    while !shutdown.load(Ordering::SeqCst) {
        match socket.recv_from(&mut buf) {
            Ok((n, peer)) => {
                let header = String::from_utf8_lossy(&buf[..n.min(HEADER_CAP)]).into_owned();
                match StreamRequest::parse(header.trim_end()) {
                    Ok(request) => {
                        udp_session(&socket, peer, &request, &shutdown, &records);
                    }
                    Err(reason) => {
                        let _ = socket.send_to(format!("ERR {reason}\n").as_bytes(), peer);
                    }
                }
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock || e.kind() == ErrorKind::TimedOut => {}
            Err(_) => break,
        }
    }
}

fn udp_session(
    socket: &UdpSocket,
    peer: SocketAddr,
    request: &StreamRequest,
    shutdown: &AtomicBool,
    records: &Mutex<Vec<ServerRecord>>,
) {
    let duration = Duration::from_secs_f64(request.duration_s);
    let mut buf = vec![0u8; 64 * 1024];
    match request.direction {
        Direction::Up => {
            let start = Instant::now();
            let deadline = start + duration + RECV_GRACE;
            let mut bytes = 0u64;
            while Instant::now() < deadline && !shutdown.load(Ordering::SeqCst) {
                match socket.recv_from(&mut buf) {
                    Ok((n, from)) if from == peer => bytes += n as u64,
                    // A competing header while busy gets turned away.
                    Ok((n, from)) => {
                        if StreamRequest::parse(String::from_utf8_lossy(&buf[..n]).trim_end())
                            .is_ok()
                        {
                            let _ = socket.send_to(b"BUSY\n", from);
                        }
                    }
                    Err(e)
                        if e.kind() == ErrorKind::WouldBlock
                            || e.kind() == ErrorKind::TimedOut => {}
                    Err(_) => break,
                }
            }
            let _ = socket.send_to(format!("OK {bytes}\n").as_bytes(), peer);
            records.lock().unwrap().push(ServerRecord {
                direction: Direction::Up,
                transport: Transport::Udp,
                bytes,
                duration_s: request.duration_s,
                rate_mbps: request.rate_mbps,
                complete: true,
            });
        }
        Direction::Down => {
            let mut payload = vec![0u8; request.msg_size];
            fill_pseudo_random(&mut payload);
            let mut bucket = TokenBucket::new(request.rate_mbps, request.msg_size);
            let start = Instant::now();
            let mut bytes = 0u64;
            // Poll for competing headers without stalling the send pacing.
            let _ = socket.set_nonblocking(true);
            while start.elapsed() < duration && !shutdown.load(Ordering::SeqCst) {
                bucket.acquire(request.msg_size);
                if start.elapsed() >= duration {
                    break;
                }
                if socket.send_to(&payload, peer).is_err() {
                    break;
                }
                bytes += request.msg_size as u64;
                if let Ok((n, from)) = socket.recv_from(&mut buf) {
                    if from != peer
                        && StreamRequest::parse(String::from_utf8_lossy(&buf[..n]).trim_end())
                            .is_ok()
                    {
                        let _ = socket.send_to(b"BUSY\n", from);
                    }
                }
            }
            let _ = socket.set_nonblocking(false);
            let _ = socket.set_read_timeout(Some(READ_TIMEOUT));
            records.lock().unwrap().push(ServerRecord {
                direction: Direction::Down,
                transport: Transport::Udp,
                bytes,
                duration_s: request.duration_s,
                rate_mbps: request.rate_mbps,
                complete: true,
            });
        }
    }
}

/// Client-side result of one stream session.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientOutcome {
    /// Payload bytes sent (up) or received (down) by this client.
    pub bytes: u64,
    /// Server-reported received bytes for upload sessions.
    pub acked_bytes: Option<u64>,
    /// False on connection failures, BUSY/ERR rejections, or mid-stream drops.
    pub complete: bool,
}

impl ClientOutcome {
    fn failed() -> Self {
        Self {
            bytes: 0,
            acked_bytes: None,
            complete: false,
        }
    }

    /// Receiver-side byte count when available, else the local count.
    pub fn effective_bytes(&self) -> u64 {
        self.acked_bytes.unwrap_or(self.bytes)
    }
}

/// Run one client stream session against a perf endpoint. Failures never
/// panic: refused or rejected sessions come back as zero-byte outcomes.
pub fn client_stream(
    host: &str,
    port: u16,
    transport: Transport,
    request: &StreamRequest,
) -> ClientOutcome {
    match transport {
        Transport::Tcp => tcp_client(host, port, request),
        Transport::Udp => udp_client(host, port, request),
    }
}

fn tcp_client(host: &str, port: u16, request: &StreamRequest) -> ClientOutcome {
    let addr = match (host, port).to_socket_addrs_first() {
        Some(a) => a,
        None => return ClientOutcome::failed(),
    };
    let mut stream = match TcpStream::connect_timeout(&addr, Duration::from_secs(1)) {
        Ok(s) => s,
        Err(_) => return ClientOutcome::failed(),
    };
    let _ = stream.set_nodelay(true);
    let _ = stream.set_read_timeout(Some(READ_TIMEOUT));
    if stream.write_all(request.header_line().as_bytes()).is_err() {
        return ClientOutcome::failed();
    }
    let duration = Duration::from_secs_f64(request.duration_s);
    match request.direction {
        Direction::Up => {
            let mut payload = vec![0u8; request.msg_size];
            fill_pseudo_random(&mut payload);
            let mut bucket = TokenBucket::new(request.rate_mbps, request.msg_size);
            let start = Instant::now();
            let mut bytes = 0u64;
            let mut complete = true;
            while start.elapsed() < duration {
                bucket.acquire(request.msg_size);
                if start.elapsed() >= duration {
                    break;
                }
                if stream.write_all(&payload).is_err() {
                    complete = false;
                    break;
                }
                bytes += request.msg_size as u64;
            }
            let _ = stream.shutdown(std::net::Shutdown::Write);
            let line = read_line_bytewise(&mut stream, Instant::now() + ACK_TIMEOUT)
                .unwrap_or_default();
            if line.starts_with("BUSY") || line.starts_with("ERR") {
                return ClientOutcome::failed();
            }
            let acked = line
                .strip_prefix("OK ")
                .and_then(|rest| rest.trim().parse::<u64>().ok());
            ClientOutcome {
                bytes,
                acked_bytes: acked,
                complete: complete && acked.is_some(),
            }
        }
        Direction::Down => {
            let start = Instant::now();
            let deadline = start + duration + RECV_GRACE;
            let mut buf = vec![0u8; 64 * 1024];
            let mut bytes = 0u64;
            let mut first_chunk = true;
            let mut complete = true;
            loop {
                if Instant::now() >= deadline {
                    break;
                }
                match stream.read(&mut buf) {
                    Ok(0) => break,
                    Ok(n) => {
                        // Rejections arrive as a short first chunk; random
                        // payload matching them is vanishingly unlikely.
                        if first_chunk && (buf.starts_with(b"BUSY") || buf.starts_with(b"ERR ")) {
                            return ClientOutcome::failed();
                        }
                        first_chunk = false;
                        bytes += n as u64;
                    }
                    Err(e)
                        if e.kind() == ErrorKind::WouldBlock
                            || e.kind() == ErrorKind::TimedOut =>
                    {
                        continue
                    }
                    Err(_) => {
                        complete = false;
                        break;
                    }
                }
            }
            ClientOutcome {
                bytes,
                acked_bytes: None,
                complete,
            }
        }
    }
}

fn udp_client(host: &str, port: u16, request: &StreamRequest) -> ClientOutcome {
    let socket = match UdpSocket::bind("0.0.0.0:0") {
        Ok(s) => s,
        Err(_) => return ClientOutcome::failed(),
    };
    if socket.connect((host, port)).is_err() {
        return ClientOutcome::failed();
    }
    let _ = socket.set_read_timeout(Some(READ_TIMEOUT));
    if socket.send(request.header_line().as_bytes()).is_err() {
        return ClientOutcome::failed();
    }
    let duration = Duration::from_secs_f64(request.duration_s);
    let mut buf = vec![0u8; 64 * 1024];
    match request.direction {
        Direction::Up => {
            let mut payload = vec![0u8; request.msg_size];
            fill_pseudo_random(&mut payload);
            let mut bucket = TokenBucket::new(request.rate_mbps, request.msg_size);
            let start = Instant::now();
            let mut bytes = 0u64;
            while start.elapsed() < duration {
                bucket.acquire(request.msg_size);
                if start.elapsed() >= duration {
                    break;
                }
                if socket.send(&payload).is_err() {
                    break;
                }
                bytes += request.msg_size as u64;
            }
            // Wait for the receiver-side count.
            let ack_deadline = Instant::now() + ACK_TIMEOUT;
            while Instant::now() < ack_deadline {
                match socket.recv(&mut buf) {
                    Ok(n) => {
                        let line = String::from_utf8_lossy(&buf[..n]);
                        if line.starts_with("BUSY") || line.starts_with("ERR") {
                            return ClientOutcome::failed();
                        }
                        if let Some(acked) = line
                            .trim_end()
                            .strip_prefix("OK ")
                            .and_then(|rest| rest.parse::<u64>().ok())
                        {
                            return ClientOutcome {
                                bytes,
                                acked_bytes: Some(acked),
                                complete: true,
                            };
                        }
                    }
                    Err(e)
                        if e.kind() == ErrorKind::WouldBlock
                            || e.kind() == ErrorKind::TimedOut => {}
                    Err(_) => break,
                }
            }
            ClientOutcome {
                bytes,
                acked_bytes: None,
                complete: false,
            }
        }
        Direction::Down => {
            let start = Instant::now();
            let deadline = start + duration + RECV_GRACE;
            let mut bytes = 0u64;
            while Instant::now() < deadline {
                match socket.recv(&mut buf) {
                    Ok(n) => {
                        if n < request.msg_size {
                            let line = String::from_utf8_lossy(&buf[..n]);
                            if line.starts_with("BUSY") || line.starts_with("ERR") {
                                return ClientOutcome::failed();
                            }
                        }
                        bytes += n as u64;
                    }
                    Err(e)
                        if e.kind() == ErrorKind::WouldBlock
                            || e.kind() == ErrorKind::TimedOut => {}
                    Err(_) => break,
                }
            }
            ClientOutcome {
                bytes,
                acked_bytes: None,
                complete: true,
            }
        }
    }
}

trait ToSocketAddrsFirst {
    fn to_socket_addrs_first(&self) -> Option<SocketAddr>;
}

impl ToSocketAddrsFirst for (&str, u16) {
    fn to_socket_addrs_first(&self) -> Option<SocketAddr> {
        use std::net::ToSocketAddrs;
        self.to_socket_addrs().ok()?.next()
    }
}
