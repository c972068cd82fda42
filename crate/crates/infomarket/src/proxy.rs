//! Forward HTTP/1.1 proxy that puts the tracking policy on the wire.
//!
//! Every client must authenticate with proxy Basic auth; the username is
//! the user id and the password is ignored. Each plain-HTTP transaction is
//! classified and transformed by the policy module, then forwarded with
//! bodies untouched; upstream connections persist per (host, port) within
//! a client connection. CONNECT tunnels are forwarded opaquely after
//! authentication, so TLS traffic is attributed but not inspected.
//!
//! Hop-by-hop headers (Connection and anything it names, Keep-Alive,
//! Proxy-Authorization, Proxy-Connection, TE, Trailer, Upgrade) stop at
//! the proxy in both directions. Transfer-Encoding stays: the body is
//! forwarded in its original framing. Everything else the policy does not
//! name passes byte-exact.
//!
//! Grant tables arrive over a local control socket as one JSON line per
//! update, `{"period": N, "grants": [...]}`. An update must carry a
//! period strictly above the current one; it replaces the whole table
//! atomically and moves the proxy to that period. Transactions already in
//! flight finish under the state they started with. Each transaction
//! appends one JSON log line `{ts, user, host, party, pass_tracking,
//! stripped}`.

use crate::policy::{
    decide, transform_request, transform_response, GrantRecord, HeaderList, Party, PolicyState,
    RequestMeta,
};
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

const MAX_HEAD_LINE: usize = 16 * 1024;
const MAX_HEADERS: usize = 256;
const IO_TIMEOUT: Duration = Duration::from_secs(30);

/// Full-replacement grant table plus the period it begins.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrantUpdate {
    pub period: u64,
    pub grants: Vec<GrantRecord>,
}

/// One transaction log line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogRecord {
    pub ts: u64,
    pub user: String,
    pub host: String,
    pub party: Party,
    pub pass_tracking: bool,
    pub stripped: Vec<String>,
}

struct Snapshot {
    state: PolicyState,
    period: u64,
}

struct Shared {
    snapshot: RwLock<Arc<Snapshot>>,
    log: Option<Mutex<std::fs::File>>,
    resolve: std::collections::HashMap<String, std::net::IpAddr>,
    shutdown: AtomicBool,
}

impl Shared {
    fn current(&self) -> Arc<Snapshot> {
        self.snapshot.read().expect("snapshot lock").clone()
    }

    /// Atomic table swap; the new period must move forward.
    fn apply_grants(&self, update: &GrantUpdate) -> Result<(), String> {
        let mut guard = self.snapshot.write().expect("snapshot lock");
        if update.period <= guard.period {
            return Err(format!(
                "stale period {} (current period is {})",
                update.period, guard.period
            ));
        }
        let next = Snapshot { state: guard.state.with_grants(&update.grants), period: update.period };
        *guard = Arc::new(next);
        Ok(())
    }

    fn log(&self, record: &LogRecord) {
        if let Some(log) = &self.log {
            let mut line = serde_json::to_vec(record).expect("log record serializes");
            line.push(b'\n');
            let mut file = log.lock().expect("log lock");
            let _ = file.write_all(&line);
            let _ = file.flush();
        }
    }
}

/// Running proxy plus its control endpoint. Dropping the handle leaves the
/// threads running; call `shutdown` to stop accepting.
pub struct ProxyHandle {
    addr: SocketAddr,
    control_addr: SocketAddr,
    shared: Arc<Shared>,
    accept_threads: Vec<std::thread::JoinHandle<()>>,
}

impl ProxyHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn control_addr(&self) -> SocketAddr {
        self.control_addr
    }

    pub fn current_period(&self) -> u64 {
        self.shared.current().period
    }

    pub fn shutdown(mut self) {
        self.shared.shutdown.store(true, Ordering::SeqCst);
        for t in self.accept_threads.drain(..) {
            let _ = t.join();
        }
    }

    /// Blocks until the accept loops exit, which only happens on
    /// listener failure; the CLI parks here to serve indefinitely.
    pub fn wait(mut self) {
        for t in self.accept_threads.drain(..) {
            let _ = t.join();
        }
    }
}

/// Binds the proxy and its control listener and serves until shutdown.
/// `period` is the starting auction period; grant updates advance it.
/// `resolve` pins hostnames to addresses ahead of DNS, the usual way to
/// point staging or test hosts at local servers; policy classification
/// still sees the original hostname.
pub fn serve(
    listen: &str,
    control: &str,
    state: PolicyState,
    period: u64,
    log_path: Option<PathBuf>,
    resolve: &[(String, std::net::IpAddr)],
) -> std::io::Result<ProxyHandle> {
    let listener = TcpListener::bind(listen)?;
    let control_listener = TcpListener::bind(control)?;
    listener.set_nonblocking(true)?;
    control_listener.set_nonblocking(true)?;
    let log = match log_path {
        Some(path) => Some(Mutex::new(
            std::fs::OpenOptions::new().create(true).append(true).open(path)?,
        )),
        None => None,
    };
    let shared = Arc::new(Shared {
        snapshot: RwLock::new(Arc::new(Snapshot { state, period })),
        log,
        resolve: resolve.iter().map(|(h, ip)| (h.to_ascii_lowercase(), *ip)).collect(),
        shutdown: AtomicBool::new(false),
    });

    let addr = listener.local_addr()?;
    let control_addr = control_listener.local_addr()?;
    let mut accept_threads = Vec::new();

    let shared_proxy = shared.clone();
    accept_threads.push(std::thread::spawn(move || {
        accept_loop(listener, shared_proxy, |stream, shared| {
            std::thread::spawn(move || {
                let _ = handle_client(stream, &shared);
            });
        })
    }));

    let shared_control = shared.clone();
    accept_threads.push(std::thread::spawn(move || {
        accept_loop(control_listener, shared_control, |stream, shared| {
            std::thread::spawn(move || handle_control(stream, &shared));
        })
    }));

    Ok(ProxyHandle { addr, control_addr, shared, accept_threads })
}

fn accept_loop(
    listener: TcpListener,
    shared: Arc<Shared>,
    spawn: impl Fn(TcpStream, Arc<Shared>),
) {
    while !shared.shutdown.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _)) => {
                let _ = stream.set_read_timeout(Some(IO_TIMEOUT));
                let _ = stream.set_write_timeout(Some(IO_TIMEOUT));
                spawn(stream, shared.clone());
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                std::thread::sleep(Duration::from_millis(10));
            }
            Err(_) => break,
        }
    }
}

fn handle_control(stream: TcpStream, shared: &Arc<Shared>) {
    let mut writer = match stream.try_clone() {
        Ok(w) => w,
        Err(_) => return,
    };
    let reader = BufReader::new(stream);
    for line in reader.lines() {
        let line = match line {
            Ok(l) => l,
            Err(_) => return,
        };
        if line.trim().is_empty() {
            continue;
        }
        let reply = match serde_json::from_str::<GrantUpdate>(&line) {
            Ok(update) => match shared.apply_grants(&update) {
                Ok(()) => format!("ok period {}\n", update.period),
                Err(msg) => format!("error: {msg}\n"),
            },
            Err(e) => format!("error: bad update: {e}\n"),
        };
        if writer.write_all(reply.as_bytes()).is_err() {
            return;
        }
    }
}

fn now_millis() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Reads one request or response head: the start line plus headers up to
/// the blank line. Returns None on clean EOF before any byte of the line.
fn read_head(reader: &mut impl BufRead) -> std::io::Result<Option<(String, HeaderList)>> {
    let start = match read_crlf_line(reader)? {
        Some(line) if !line.is_empty() => line,
        _ => return Ok(None),
    };
    let start = String::from_utf8(start)
        .map_err(|_| std::io::Error::new(std::io::ErrorKind::InvalidData, "non-utf8 start line"))?;
    let mut headers = HeaderList::new();
    for _ in 0..MAX_HEADERS {
        match read_crlf_line(reader)? {
            Some(line) if line.is_empty() => return Ok(Some((start, headers))),
            Some(line) => headers.push_raw(line),
            None => {
                return Err(std::io::Error::new(
                    std::io::ErrorKind::UnexpectedEof,
                    "eof inside header block",
                ))
            }
        }
    }
    Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "too many headers"))
}

/// One line without its CRLF (or bare LF) terminator; None on EOF at a
/// line boundary.
fn read_crlf_line(reader: &mut impl BufRead) -> std::io::Result<Option<Vec<u8>>> {
    let mut line = Vec::new();
    let n = reader.take(MAX_HEAD_LINE as u64 + 2).read_until(b'\n', &mut line)?;
    if n == 0 {
        return Ok(None);
    }
    if line.last() != Some(&b'\n') {
        return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "header line too long"));
    }
    line.pop();
    if line.last() == Some(&b'\r') {
        line.pop();
    }
    Ok(Some(line))
}

/// Username from a proxy Basic auth header value.
fn basic_auth_user(value: &str) -> Option<String> {
    let (scheme, payload) = value.trim().split_once(' ')?;
    if !scheme.eq_ignore_ascii_case("basic") {
        return None;
    }
    let decoded = base64::engine::general_purpose::STANDARD.decode(payload.trim()).ok()?;
    let decoded = String::from_utf8(decoded).ok()?;
    let user = decoded.split(':').next().unwrap_or("");
    if user.is_empty() {
        None
    } else {
        Some(user.to_string())
    }
}

struct Target {
    host: String,
    port: u16,
    origin_form: String,
}

/// Splits a proxy request target. Absolute form carries the upstream
/// address; origin form falls back to the Host header.
fn parse_target(target: &str, headers: &HeaderList) -> Result<Target, String> {
    if let Some(rest) = target.strip_prefix("http://") {
        let (authority, path) = match rest.find('/') {
            Some(i) => (&rest[..i], &rest[i..]),
            None => (rest, "/"),
        };
        let (host, port) = split_host_port(authority)?;
        return Ok(Target { host, port, origin_form: path.to_string() });
    }
    if target.starts_with("https://") {
        return Err("https requests must use CONNECT".to_string());
    }
    if target.starts_with('/') {
        let authority = headers.get("Host").ok_or("origin-form request without Host header")?;
        let (host, port) = split_host_port(&authority)?;
        return Ok(Target { host, port, origin_form: target.to_string() });
    }
    Err(format!("unsupported request target {target:?}"))
}

fn split_host_port(authority: &str) -> Result<(String, u16), String> {
    if authority.is_empty() {
        return Err("empty host".to_string());
    }
    if let Some(rest) = authority.strip_prefix('[') {
        // bracketed IPv6 literal
        let end = rest.find(']').ok_or("unterminated IPv6 literal")?;
        let host = format!("[{}]", &rest[..end]);
        let port = match rest[end + 1..].strip_prefix(':') {
            Some(p) => p.parse().map_err(|_| format!("bad port {p:?}"))?,
            None => 80,
        };
        return Ok((host, port));
    }
    match authority.rsplit_once(':') {
        Some((h, p)) if !h.is_empty() => Ok((h.to_string(), p.parse().map_err(|_| format!("bad port {p:?}"))?)),
        _ => Ok((authority.to_string(), 80)),
    }
}

const HOP_BY_HOP: [&str; 7] =
    ["Connection", "Keep-Alive", "Proxy-Authenticate", "Proxy-Authorization", "Proxy-Connection", "TE", "Trailer"];

/// Drops hop-by-hop headers: the fixed set, Upgrade, and anything the
/// Connection header names. Transfer-Encoding survives so body framing is
/// forwarded unchanged.
fn strip_hop_by_hop(headers: &HeaderList) -> HeaderList {
    let mut named: Vec<String> = Vec::new();
    for value in headers.values("Connection") {
        for token in value.split(',') {
            let token = token.trim();
            if !token.is_empty() && !token.eq_ignore_ascii_case("close") && !token.eq_ignore_ascii_case("keep-alive")
            {
                named.push(token.to_string());
            }
        }
    }
    let mut names: Vec<&str> = HOP_BY_HOP.to_vec();
    names.push("Upgrade");
    for n in &named {
        names.push(n.as_str());
    }
    let (kept, _) = headers.without(&names);
    kept
}

enum BodyKind {
    None,
    Length(u64),
    Chunked,
    ToEof,
}

fn request_body_kind(headers: &HeaderList) -> Result<BodyKind, String> {
    if let Some(te) = headers.get("Transfer-Encoding") {
        if te.to_ascii_lowercase().contains("chunked") {
            return Ok(BodyKind::Chunked);
        }
        return Err(format!("unsupported transfer encoding {te:?}"));
    }
    match headers.get("Content-Length") {
        Some(v) => Ok(BodyKind::Length(v.parse().map_err(|_| format!("bad content-length {v:?}"))?)),
        None => Ok(BodyKind::None),
    }
}

fn response_body_kind(status: u16, method: &str, headers: &HeaderList) -> Result<BodyKind, String> {
    if method.eq_ignore_ascii_case("HEAD") || status / 100 == 1 || status == 204 || status == 304 {
        return Ok(BodyKind::None);
    }
    if let Some(te) = headers.get("Transfer-Encoding") {
        if te.to_ascii_lowercase().contains("chunked") {
            return Ok(BodyKind::Chunked);
        }
        return Err(format!("unsupported transfer encoding {te:?}"));
    }
    match headers.get("Content-Length") {
        Some(v) => Ok(BodyKind::Length(v.parse().map_err(|_| format!("bad content-length {v:?}"))?)),
        None => Ok(BodyKind::ToEof),
    }
}

fn copy_body(kind: &BodyKind, from: &mut impl BufRead, to: &mut impl Write) -> std::io::Result<bool> {
    match kind {
        BodyKind::None => Ok(true),
        BodyKind::Length(n) => {
            std::io::copy(&mut from.take(*n), to)?;
            Ok(true)
        }
        BodyKind::Chunked => {
            copy_chunked(from, to)?;
            Ok(true)
        }
        BodyKind::ToEof => {
            std::io::copy(from, to)?;
            // the connection is spent once the body ran to EOF
            Ok(false)
        }
    }
}

/// Forwards a chunked body verbatim: size lines, chunk data, and trailers
/// through the final blank line.
fn copy_chunked(from: &mut impl BufRead, to: &mut impl Write) -> std::io::Result<()> {
    loop {
        let line = read_crlf_line(from)?
            .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::UnexpectedEof, "eof in chunked body"))?;
        to.write_all(&line)?;
        to.write_all(b"\r\n")?;
        let size_text = line.split(|&b| b == b';').next().unwrap_or(&[]);
        let size_text = std::str::from_utf8(size_text)
            .map_err(|_| std::io::Error::new(std::io::ErrorKind::InvalidData, "bad chunk size"))?;
        let size = u64::from_str_radix(size_text.trim(), 16)
            .map_err(|_| std::io::Error::new(std::io::ErrorKind::InvalidData, "bad chunk size"))?;
        if size == 0 {
            break;
        }
        std::io::copy(&mut from.take(size + 2), to)?;
    }
    // trailers, ending with an empty line
    loop {
        let line = read_crlf_line(from)?
            .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::UnexpectedEof, "eof in trailers"))?;
        to.write_all(&line)?;
        to.write_all(b"\r\n")?;
        if line.is_empty() {
            return Ok(());
        }
    }
}

/// Writes a proxy-generated error response. These always close the
/// connection afterwards, so the head says so.
fn write_simple_response(to: &mut impl Write, status: &str, extra_headers: &[&str], body: &str) -> std::io::Result<()> {
    let mut head = format!("HTTP/1.1 {status}\r\n");
    for h in extra_headers {
        head.push_str(h);
        head.push_str("\r\n");
    }
    head.push_str(&format!(
        "Content-Length: {}\r\nContent-Type: text/plain\r\nConnection: close\r\n\r\n",
        body.len()
    ));
    to.write_all(head.as_bytes())?;
    to.write_all(body.as_bytes())
}

struct Upstream {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

fn dial(shared: &Shared, host: &str, port: u16) -> std::io::Result<TcpStream> {
    let bare = host.trim_matches(['[', ']']);
    match shared.resolve.get(&bare.to_ascii_lowercase()) {
        Some(ip) => TcpStream::connect((*ip, port)),
        None => TcpStream::connect((bare, port)),
    }
}

fn connect_upstream(shared: &Shared, host: &str, port: u16) -> std::io::Result<Upstream> {
    let stream = dial(shared, host, port)?;
    stream.set_read_timeout(Some(IO_TIMEOUT))?;
    stream.set_write_timeout(Some(IO_TIMEOUT))?;
    let reader = BufReader::new(stream.try_clone()?);
    Ok(Upstream { reader, writer: stream })
}

fn handle_client(stream: TcpStream, shared: &Arc<Shared>) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = stream;
    let mut pool: std::collections::HashMap<(String, u16), Upstream> = std::collections::HashMap::new();

    loop {
        let (request_line, headers) = match read_head(&mut reader)? {
            Some(head) => head,
            None => return Ok(()),
        };
        let mut parts = request_line.split_whitespace();
        let (method, target, version) = match (parts.next(), parts.next(), parts.next()) {
            (Some(m), Some(t), Some(v)) => (m.to_string(), t.to_string(), v.to_string()),
            _ => {
                write_simple_response(&mut writer, "400 Bad Request", &[], "malformed request line\n")?;
                return Ok(());
            }
        };

        let user = match headers.get("Proxy-Authorization").as_deref().and_then(basic_auth_user) {
            Some(user) => user,
            None => {
                write_simple_response(
                    &mut writer,
                    "407 Proxy Authentication Required",
                    &["Proxy-Authenticate: Basic realm=\"infomarket\""],
                    "proxy authentication required\n",
                )?;
                return Ok(());
            }
        };

        if method.eq_ignore_ascii_case("CONNECT") {
            return tunnel_connect(&target, user, reader, writer, shared);
        }

        let target = match parse_target(&target, &headers) {
            Ok(t) => t,
            Err(msg) => {
                write_simple_response(&mut writer, "400 Bad Request", &[], &format!("{msg}\n"))?;
                return Ok(());
            }
        };
        let client_wants_close = headers
            .values("Connection")
            .any(|v| v.split(',').any(|t| t.trim().eq_ignore_ascii_case("close")))
            || version == "HTTP/1.0";

        // policy runs on the snapshot this transaction started with
        let snapshot = shared.current();
        let meta = RequestMeta { user: user.clone(), host: target.host.clone(), referer: headers.get("Referer") };
        let decision = decide(&meta, &snapshot.state, snapshot.period);
        let (headers, stripped_request) = transform_request(&headers, &decision);
        let mut upstream_headers = strip_hop_by_hop(&headers);
        if !upstream_headers.contains("Host") {
            let authority = if target.port == 80 {
                target.host.clone()
            } else {
                format!("{}:{}", target.host, target.port)
            };
            upstream_headers.push("Host", &authority);
        }

        let body_kind = match request_body_kind(&upstream_headers) {
            Ok(k) => k,
            Err(msg) => {
                write_simple_response(&mut writer, "400 Bad Request", &[], &format!("{msg}\n"))?;
                return Ok(());
            }
        };

        let pool_key = (target.host.clone(), target.port);
        if !pool.contains_key(&pool_key) {
            match connect_upstream(shared, &target.host, target.port) {
                Ok(up) => {
                    pool.insert(pool_key.clone(), up);
                }
                Err(e) => {
                    write_simple_response(&mut writer, "502 Bad Gateway", &[], &format!("upstream connect failed: {e}\n"))?;
                    return Ok(());
                }
            }
        }
        let upstream = pool.get_mut(&pool_key).expect("just inserted");

        let send = (|| -> std::io::Result<()> {
            upstream.writer.write_all(format!("{method} {} {version}\r\n", target.origin_form).as_bytes())?;
            upstream.writer.write_all(&upstream_headers.to_bytes())?;
            upstream.writer.write_all(b"\r\n")?;
            copy_body(&body_kind, &mut reader, &mut upstream.writer)?;
            upstream.writer.flush()
        })();
        if send.is_err() {
            // a pooled connection may have gone stale; drop it and fail
            // this transaction rather than guessing at a retry
            pool.remove(&pool_key);
            write_simple_response(&mut writer, "502 Bad Gateway", &[], "upstream write failed\n")?;
            return Ok(());
        }

        let (status_line, response_headers) = match read_head(&mut upstream.reader) {
            Ok(Some(head)) => head,
            _ => {
                pool.remove(&pool_key);
                write_simple_response(&mut writer, "502 Bad Gateway", &[], "upstream returned no response\n")?;
                return Ok(());
            }
        };
        let status: u16 = status_line
            .split_whitespace()
            .nth(1)
            .and_then(|s| s.parse().ok())
            .unwrap_or(502);
        let (response_headers, stripped_response) = transform_response(&response_headers, &decision);
        let downstream_headers = strip_hop_by_hop(&response_headers);
        let response_body = match response_body_kind(status, &method, &downstream_headers) {
            Ok(k) => k,
            Err(msg) => {
                pool.remove(&pool_key);
                write_simple_response(&mut writer, "502 Bad Gateway", &[], &format!("{msg}\n"))?;
                return Ok(());
            }
        };

        writer.write_all(status_line.as_bytes())?;
        writer.write_all(b"\r\n")?;
        writer.write_all(&downstream_headers.to_bytes())?;
        writer.write_all(b"\r\n")?;
        let upstream_reusable = copy_body(&response_body, &mut upstream.reader, &mut writer)?;
        writer.flush()?;
        if !upstream_reusable {
            pool.remove(&pool_key);
        }

        let mut stripped = stripped_request;
        stripped.extend(stripped_response);
        shared.log(&LogRecord {
            ts: now_millis(),
            user,
            host: target.host.clone(),
            party: decision.party,
            pass_tracking: decision.pass_tracking,
            stripped,
        });

        if client_wants_close {
            return Ok(());
        }
        if matches!(response_body, BodyKind::ToEof) {
            // body length was delimited by upstream EOF, so the client
            // connection cannot be reused either
            return Ok(());
        }
    }
}

fn tunnel_connect(
    target: &str,
    user: String,
    client_reader: BufReader<TcpStream>,
    mut client_writer: TcpStream,
    shared: &Arc<Shared>,
) -> std::io::Result<()> {
    let (host, port) = match split_host_port(target) {
        Ok((h, p)) => (h, p),
        Err(msg) => {
            return write_simple_response(&mut client_writer, "400 Bad Request", &[], &format!("{msg}\n"));
        }
    };
    let upstream = match dial(shared, &host, port) {
        Ok(s) => s,
        Err(e) => {
            return write_simple_response(
                &mut client_writer,
                "502 Bad Gateway",
                &[],
                &format!("upstream connect failed: {e}\n"),
            );
        }
    };
    client_writer.write_all(b"HTTP/1.1 200 Connection Established\r\n\r\n")?;
    client_writer.flush()?;
    shared.log(&LogRecord {
        ts: now_millis(),
        user,
        host: host.clone(),
        // tunneled bytes are opaque; nothing is inspected or stripped
        party: Party::FirstParty,
        pass_tracking: false,
        stripped: Vec::new(),
    });

    let mut upstream_writer = upstream.try_clone()?;
    let mut upstream_reader = upstream;
    let mut client_reader = client_reader;
    let pump = std::thread::spawn(move || {
        let _ = std::io::copy(&mut client_reader, &mut upstream_writer);
        let _ = upstream_writer.shutdown(std::net::Shutdown::Write);
    });
    let _ = std::io::copy(&mut upstream_reader, &mut client_writer);
    let _ = client_writer.shutdown(std::net::Shutdown::Write);
    let _ = pump.join();
    Ok(())
}
