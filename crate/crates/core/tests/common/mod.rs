//! Shared integration-test fixtures: an in-process SMTP sink, a background
//! API server and a small blocking HTTP client.

#![allow(dead_code)]

use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde_json::Value;

use safespace_core::api::{router, AppState};
use safespace_core::clock::Clock;
use safespace_core::config::Config;
use safespace_core::directory::{ContactInput, Directory};
use safespace_core::dispatch::{MailTransport, SmtpConfig};
use safespace_core::model::UserId;
use safespace_core::service::serve_with;
use safespace_core::store::Store;

pub fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(rel)
}

/// How the sink answers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SinkMode {
    Accept,
    /// 421 to RCPT: transient.
    Defer,
    /// 550 to RCPT: permanent.
    Reject,
    /// 421 greeting, then hang up: the relay is unreachable.
    Down,
}

#[derive(Debug, Clone)]
pub struct Received {
    pub from: String,
    pub to: Vec<String>,
    /// DATA payload with dot-stuffing removed, CRLF line endings kept.
    pub data: String,
}

impl Received {
    pub fn header(&self, name: &str) -> Option<String> {
        let head = self.data.split("\r\n\r\n").next()?;
        let mut value: Option<String> = None;
        for line in head.split("\r\n") {
            if let Some(v) = &mut value {
                if line.starts_with(' ') || line.starts_with('\t') {
                    v.push_str(line);
                    continue;
                }
                break;
            }
            if let Some((k, v)) = line.split_once(':') {
                if k.eq_ignore_ascii_case(name) {
                    value = Some(v.trim().to_string());
                }
            }
        }
        value
    }

    pub fn body(&self) -> &str {
        self.data.split_once("\r\n\r\n").map(|(_, b)| b).unwrap_or("")
    }
}

struct SinkState {
    mode: Mutex<SinkMode>,
    received: Mutex<Vec<Received>>,
    attempts: Mutex<usize>,
}

/// Minimal SMTP server for tests. Plain text, no STARTTLS advertised.
pub struct SmtpSink {
    pub addr: SocketAddr,
    state: Arc<SinkState>,
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl SmtpSink {
    pub fn start(mode: SinkMode) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        listener.set_nonblocking(true).unwrap();
        let addr = listener.local_addr().unwrap();
        let state = Arc::new(SinkState {
            mode: Mutex::new(mode),
            received: Mutex::new(Vec::new()),
            attempts: Mutex::new(0),
        });
        let stop = Arc::new(AtomicBool::new(false));
        let handle = {
            let state = state.clone();
            let stop = stop.clone();
            std::thread::spawn(move || {
                while !stop.load(Ordering::Relaxed) {
                    match listener.accept() {
                        Ok((stream, _)) => {
                            let state = state.clone();
                            std::thread::spawn(move || {
                                let _ = handle_session(stream, &state);
                            });
                        }
                        Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                            std::thread::sleep(Duration::from_millis(5));
                        }
                        Err(_) => break,
                    }
                }
            })
        };
        Self {
            addr,
            state,
            stop,
            handle: Some(handle),
        }
    }

    pub fn set_mode(&self, mode: SinkMode) {
        *self.state.mode.lock().unwrap() = mode;
    }

    pub fn received(&self) -> Vec<Received> {
        self.state.received.lock().unwrap().clone()
    }

    /// Sessions opened so far, including refused ones.
    pub fn sessions(&self) -> usize {
        *self.state.attempts.lock().unwrap()
    }

    /// Polls until `n` messages arrived or `timeout` passes.
    pub fn wait_for(&self, n: usize, timeout: Duration) -> Vec<Received> {
        let end = Instant::now() + timeout;
        loop {
            let got = self.received();
            if got.len() >= n || Instant::now() > end {
                return got;
            }
            std::thread::sleep(Duration::from_millis(20));
        }
    }

    pub fn smtp_config(&self) -> SmtpConfig {
        SmtpConfig {
            host: "127.0.0.1".into(),
            port: self.addr.port(),
            starttls: false,
            sender: "alerts@safespace.test".into(),
            timeout_s: 5,
            ..SmtpConfig::default()
        }
    }
}

impl Drop for SmtpSink {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

fn handle_session(stream: TcpStream, state: &SinkState) -> std::io::Result<()> {
    stream.set_read_timeout(Some(Duration::from_secs(10)))?;
    *state.attempts.lock().unwrap() += 1;
    let mut out = stream.try_clone()?;
    let mut reader = BufReader::new(stream);
    if *state.mode.lock().unwrap() == SinkMode::Down {
        out.write_all(b"421 sink.test service not available\r\n")?;
        return Ok(());
    }
    out.write_all(b"220 sink.test ESMTP\r\n")?;
    let mut from = String::new();
    let mut to = Vec::new();
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 {
            return Ok(());
        }
        let cmd = line.trim_end().to_string();
        let upper = cmd.to_ascii_uppercase();
        if upper.starts_with("EHLO") || upper.starts_with("HELO") {
            out.write_all(b"250-sink.test\r\n250 8BITMIME\r\n")?;
        } else if upper.starts_with("MAIL FROM:") {
            from = cmd[10..].trim().trim_matches(['<', '>']).to_string();
            to.clear();
            out.write_all(b"250 ok\r\n")?;
        } else if upper.starts_with("RCPT TO:") {
            match *state.mode.lock().unwrap() {
                SinkMode::Accept => {
                    to.push(cmd[8..].trim().trim_matches(['<', '>']).to_string());
                    out.write_all(b"250 ok\r\n")?;
                }
                SinkMode::Defer | SinkMode::Down => out.write_all(b"421 4.7.0 try again later\r\n")?,
                SinkMode::Reject => out.write_all(b"550 5.1.1 mailbox unavailable\r\n")?,
            }
        } else if upper == "DATA" {
            out.write_all(b"354 end with <CRLF>.<CRLF>\r\n")?;
            let mut data = String::new();
            loop {
                let mut l = String::new();
                if reader.read_line(&mut l)? == 0 {
                    return Ok(());
                }
                if l == ".\r\n" {
                    break;
                }
                data.push_str(l.strip_prefix('.').unwrap_or(&l));
            }
            state.received.lock().unwrap().push(Received {
                from: from.clone(),
                to: to.clone(),
                data,
            });
            out.write_all(b"250 queued\r\n")?;
        } else if upper == "QUIT" {
            out.write_all(b"221 bye\r\n")?;
            return Ok(());
        } else if upper == "RSET" || upper == "NOOP" {
            out.write_all(b"250 ok\r\n")?;
        } else {
            out.write_all(b"502 not implemented\r\n")?;
        }
    }
}

/// Builds app state over the given pieces with test-friendly limits.
pub fn app_state(
    config: &Config,
    store: Arc<dyn Store>,
    clock: Arc<dyn Clock>,
    transport: Arc<dyn MailTransport>,
) -> AppState {
    AppState::new(config, store, clock, transport).unwrap()
}

/// Creates a user with `contacts` emergency contacts; returns id and token.
pub fn user_with_contacts(state: &AppState, name: &str, contacts: u8) -> (UserId, String) {
    let dir = Directory::new(state.store.as_ref());
    let (profile, token) = dir.create_user(name, state.clock.now()).unwrap();
    if contacts > 0 {
        dir.set_contacts(
            &profile.user_id,
            (1..=contacts)
                .map(|i| ContactInput {
                    name: format!("Contact {i}"),
                    email: format!("contact{i}.{}@example.org", profile.user_id.as_str().to_lowercase()),
                    priority: i,
                })
                .collect(),
        )
        .unwrap();
    }
    (profile.user_id, token)
}

/// API server on an ephemeral port, on its own runtime thread.
pub struct TestServer {
    pub base: String,
    pub state: AppState,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl TestServer {
    /// Router only; tests drive the scheduler and dispatcher by hand.
    pub fn start(state: AppState) -> Self {
        Self::spawn(state, false)
    }

    /// Router plus the background loops, as `safespace serve` runs it.
    pub fn start_with_loops(state: AppState) -> Self {
        Self::spawn(state, true)
    }

    fn spawn(state: AppState, loops: bool) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        listener.set_nonblocking(true).unwrap();
        let addr = listener.local_addr().unwrap();
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let served = state.clone();
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap();
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener).unwrap();
                let shutdown = async move {
                    let _ = rx.await;
                };
                if loops {
                    serve_with(listener, served, shutdown).await.unwrap();
                } else {
                    axum::serve(listener, router(served))
                        .with_graceful_shutdown(shutdown)
                        .await
                        .unwrap();
                }
            });
        });
        Self {
            base: format!("http://{addr}"),
            state,
            shutdown: Some(tx),
            thread: Some(thread),
        }
    }

    pub fn client(&self) -> Client {
        Client::new(&self.base)
    }
}

impl Drop for TestServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

pub struct Reply {
    pub status: u16,
    pub body: Value,
    pub headers: Vec<(String, String)>,
}

impl Reply {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    pub fn code(&self) -> &str {
        self.body["code"].as_str().unwrap_or("")
    }
}

/// Blocking JSON client that never turns HTTP statuses into errors.
pub struct Client {
    base: String,
    agent: ureq::Agent,
    token: Option<String>,
}

impl Client {
    pub fn new(base: &str) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(30)))
            .build()
            .into();
        Self {
            base: base.to_string(),
            agent,
            token: None,
        }
    }

    pub fn with_token(mut self, token: &str) -> Self {
        self.token = Some(token.to_string());
        self
    }

    fn auth(&self) -> Option<String> {
        self.token.as_ref().map(|t| format!("Bearer {t}"))
    }

    fn finish(resp: Result<ureq::http::Response<ureq::Body>, ureq::Error>) -> Reply {
        let mut resp = resp.expect("request reached the server");
        let status = resp.status().as_u16();
        let headers = resp
            .headers()
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_str().unwrap_or("").to_string()))
            .collect();
        let text = resp.body_mut().read_to_string().unwrap_or_default();
        let body = if text.is_empty() {
            Value::Null
        } else {
            serde_json::from_str(&text).unwrap_or(Value::String(text))
        };
        Reply { status, body, headers }
    }

    pub fn get(&self, path: &str) -> Reply {
        let mut req = self.agent.get(format!("{}{path}", self.base));
        if let Some(a) = self.auth() {
            req = req.header("Authorization", a);
        }
        Self::finish(req.call())
    }

    pub fn post(&self, path: &str, body: &Value) -> Reply {
        self.send_raw("POST", path, "application/json", body.to_string().into_bytes())
    }

    pub fn post_empty(&self, path: &str) -> Reply {
        let mut req = self.agent.post(format!("{}{path}", self.base));
        if let Some(a) = self.auth() {
            req = req.header("Authorization", a);
        }
        Self::finish(req.send_empty())
    }

    pub fn put(&self, path: &str, body: &Value) -> Reply {
        self.send_raw("PUT", path, "application/json", body.to_string().into_bytes())
    }

    pub fn send_raw(&self, method: &str, path: &str, content_type: &str, body: Vec<u8>) -> Reply {
        let url = format!("{}{path}", self.base);
        let mut req = match method {
            "POST" => self.agent.post(url),
            "PUT" => self.agent.put(url),
            other => panic!("unsupported method {other}"),
        };
        req = req.header("Content-Type", content_type);
        if let Some(a) = self.auth() {
            req = req.header("Authorization", a);
        }
        Self::finish(req.send(&body[..]))
    }

    /// Uploads `bytes` as multipart field `field`.
    pub fn upload(&self, path: &str, field: &str, bytes: &[u8]) -> Reply {
        let boundary = "safespace-test-boundary-7d2f";
        let mut body = Vec::new();
        body.extend_from_slice(
            format!(
                "--{boundary}\r\nContent-Disposition: form-data; name=\"{field}\"; filename=\"shot.png\"\r\nContent-Type: image/png\r\n\r\n"
            )
            .as_bytes(),
        );
        body.extend_from_slice(bytes);
        body.extend_from_slice(format!("\r\n--{boundary}--\r\n").as_bytes());
        self.send_raw("POST", path, &format!("multipart/form-data; boundary={boundary}"), body)
    }
}
