//! Detector backends: the local toy model, and a client for external models
//! speaking the newline-delimited JSON bridge protocol over TCP or a child's stdio.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{Shutdown, TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{load_features, AudioError};
use crate::eval::{generate_local, MAX_NEW_TOKENS};
use crate::model::checkpoint::{load_adapters, load_model, CheckpointError};
use crate::model::{AudioTokens, ModelError, MultimodalModel};

pub const DEFAULT_TIMEOUT_S: f64 = 120.0;
pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("request {id} timed out after {secs} s")]
    Timeout { id: u64, secs: f64 },
    #[error("protocol error: {msg}; offending line: {line:?}")]
    Protocol { msg: String, line: String },
    #[error("remote error for request {id}: {msg}")]
    Remote { id: u64, msg: String },
    #[error("connection error: {0}")]
    Connection(String),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl BackendError {
    /// Timeouts may succeed on retry; everything else is permanent for the request.
    pub fn is_retriable(&self) -> bool {
        matches!(self, BackendError::Timeout { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HealthStatus {
    Ready,
    Degraded,
    Down,
}

impl fmt::Display for HealthStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HealthStatus::Ready => "ready",
            HealthStatus::Degraded => "degraded",
            HealthStatus::Down => "down",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Health {
    pub status: HealthStatus,
    pub model: String,
    pub detail: String,
}

pub trait DetectorBackend: Send + Sync {
    fn name(&self) -> String;

    /// Raw generated text for one utterance.
    fn classify(&self, wav_path: &Path, prompt: &str, constrained: bool) -> Result<String, BackendError>;

    /// One result per `(wav_path, prompt)` item, in input order.
    fn classify_batch(&self, items: &[(PathBuf, String)], constrained: bool) -> Vec<Result<String, BackendError>> {
        items
            .iter()
            .map(|(p, prompt)| self.classify(p, prompt, constrained))
            .collect()
    }

    fn healthcheck(&self) -> Health;
}

/// Where a remote model lives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    /// `host:port` (optionally prefixed `tcp://`).
    Tcp(String),
    /// `stdio:<program> [args…]`: spawn and talk over stdin/stdout.
    Stdio { program: String, args: Vec<String> },
}

impl FromStr for Endpoint {
    type Err = BackendError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(cmd) = s.strip_prefix("stdio:") {
            let mut parts = cmd.split_whitespace().map(str::to_string);
            let program = parts
                .next()
                .ok_or_else(|| BackendError::Connection("stdio endpoint needs a program".into()))?;
            return Ok(Endpoint::Stdio {
                program,
                args: parts.collect(),
            });
        }
        let addr = s.strip_prefix("tcp://").unwrap_or(s);
        if addr.rsplit_once(':').is_none_or(|(h, p)| h.is_empty() || p.parse::<u16>().is_err()) {
            return Err(BackendError::Connection(format!("bad endpoint {s:?}; expected host:port or stdio:<cmd>")));
        }
        Ok(Endpoint::Tcp(addr.to_string()))
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Tcp(a) => write!(f, "tcp://{a}"),
            Endpoint::Stdio { program, args } => write!(f, "stdio:{program} {}", args.join(" ")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackendDescriptor {
    Local {
        checkpoint: PathBuf,
        adapter: Option<PathBuf>,
    },
    Remote {
        endpoint: Endpoint,
        timeout_s: f64,
        model: String,
    },
}

/// Builds the backend a descriptor names.
pub fn open_backend(desc: &BackendDescriptor) -> Result<Box<dyn DetectorBackend>, BackendError> {
    match desc {
        BackendDescriptor::Local { checkpoint, adapter } => {
            Ok(Box::new(LocalBackend::from_checkpoint(checkpoint, adapter.as_deref())?))
        }
        BackendDescriptor::Remote {
            endpoint,
            timeout_s,
            model,
        } => {
            let client = RemoteClient::connect(endpoint, Duration::from_secs_f64(*timeout_s))?;
            Ok(Box::new(client.with_name(model)))
        }
    }
}

/// Health of whatever a descriptor names; failures to open map to `Down`.
pub fn probe(desc: &BackendDescriptor) -> Health {
    match open_backend(desc) {
        Ok(b) => b.healthcheck(),
        Err(e) => Health {
            status: HealthStatus::Down,
            model: match desc {
                BackendDescriptor::Local { checkpoint, .. } => checkpoint.display().to_string(),
                BackendDescriptor::Remote { model, .. } => model.clone(),
            },
            detail: e.to_string(),
        },
    }
}

/// The toy model running in-process.
pub struct LocalBackend {
    model: MultimodalModel,
    name: String,
}

impl LocalBackend {
    pub fn new(model: MultimodalModel, name: impl Into<String>) -> Self {
        Self {
            model,
            name: name.into(),
        }
    }

    pub fn from_checkpoint(checkpoint: &Path, adapter: Option<&Path>) -> Result<Self, BackendError> {
        let mut model = load_model(checkpoint)?;
        let mut name = String::from("toy");
        if let Some(a) = adapter {
            model = load_adapters(model, a)?;
            name.push_str("+lora");
        }
        Ok(Self { model, name })
    }

    pub fn model(&self) -> &MultimodalModel {
        &self.model
    }

    fn audio_tokens(&self, wav_path: &Path) -> Result<AudioTokens, BackendError> {
        let mel = load_features(wav_path)?;
        Ok(self.model.encode_audio(&mel)?)
    }
}

impl DetectorBackend for LocalBackend {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn classify(&self, wav_path: &Path, prompt: &str, constrained: bool) -> Result<String, BackendError> {
        let audio = self.audio_tokens(wav_path)?;
        Ok(generate_local(&self.model, &audio, prompt, constrained)?)
    }

    /// Encodes each distinct file once, then decodes every item in parallel.
    fn classify_batch(&self, items: &[(PathBuf, String)], constrained: bool) -> Vec<Result<String, BackendError>> {
        let mut unique: Vec<&PathBuf> = items.iter().map(|(p, _)| p).collect();
        unique.sort();
        unique.dedup();
        let encoded: BTreeMap<&PathBuf, Result<AudioTokens, String>> = unique
            .par_iter()
            .map(|p| (*p, self.audio_tokens(p).map_err(|e| e.to_string())))
            .collect::<Vec<_>>()
            .into_iter()
            .collect();
        items
            .par_iter()
            .map(|(p, prompt)| match &encoded[p] {
                Ok(audio) => Ok(generate_local(&self.model, audio, prompt, constrained)?),
                Err(msg) => Err(BackendError::Connection(format!("{}: {msg}", p.display()))),
            })
            .collect()
    }

    fn healthcheck(&self) -> Health {
        let ok = self.model.all_finite();
        Health {
            status: if ok { HealthStatus::Ready } else { HealthStatus::Down },
            model: self.name.clone(),
            detail: format!("{} parameters", self.model.param_count()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BridgeRequest {
    pub id: u64,
    pub wav_path: String,
    pub prompt: String,
    pub max_new_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PingRequest {
    pub id: u64,
    pub ping: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BridgeResponse {
    pub id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pong: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
}

type Reply = Result<(BridgeResponse, String), BackendError>;

#[derive(Default)]
struct Pending {
    waiting: HashMap<u64, Sender<Reply>>,
    abandoned: HashSet<u64>,
    closed: Option<BackendError>,
}

fn clone_err(e: &BackendError) -> BackendError {
    match e {
        BackendError::Protocol { msg, line } => BackendError::Protocol {
            msg: msg.clone(),
            line: line.clone(),
        },
        other => BackendError::Connection(other.to_string()),
    }
}

impl Pending {
    fn fail_all(&mut self, err: BackendError) {
        for (_, tx) in self.waiting.drain() {
            let _ = tx.send(Err(clone_err(&err)));
        }
        self.closed = Some(err);
    }
}

enum Transport {
    Tcp(TcpStream),
    Child(Child),
}

/// Bridge protocol client with id-matched, pipelined requests.
pub struct RemoteClient {
    writer: Mutex<Box<dyn Write + Send>>,
    pending: Arc<Mutex<Pending>>,
    next_id: AtomicU64,
    slots: (Mutex<usize>, Condvar),
    max_in_flight: usize,
    timeout: Duration,
    name: String,
    remote_failures: AtomicUsize,
    last_ok: AtomicBool,
    probe: Option<(PathBuf, String)>,
    transport: Mutex<Transport>,
}

fn spawn_reader(reader: impl Read + Send + 'static, pending: Arc<Mutex<Pending>>) {
    thread::spawn(move || {
        let mut r = BufReader::new(reader);
        loop {
            let mut line = String::new();
            let closed = match r.read_line(&mut line) {
                Ok(0) => Some(BackendError::Protocol {
                    msg: "connection closed by server".into(),
                    line: String::new(),
                }),
                Ok(_) if !line.ends_with('\n') => Some(BackendError::Protocol {
                    msg: "connection closed mid-response".into(),
                    line: line.clone(),
                }),
                Ok(_) => None,
                Err(e) => Some(BackendError::Protocol {
                    msg: format!("read failed: {e}"),
                    line: line.clone(),
                }),
            };
            if let Some(err) = closed {
                pending.lock().unwrap().fail_all(err);
                return;
            }
            let raw = line.trim_end_matches(['\n', '\r']).to_string();
            if raw.trim().is_empty() {
                continue;
            }
            let mut p = pending.lock().unwrap();
            match serde_json::from_str::<BridgeResponse>(&raw) {
                Ok(resp) => {
                    if let Some(tx) = p.waiting.remove(&resp.id) {
                        let _ = tx.send(Ok((resp, raw)));
                    } else if !p.abandoned.remove(&resp.id) {
                        log::warn!("bridge: response for unknown id {}: {raw}", resp.id);
                        p.fail_all(BackendError::Protocol {
                            msg: format!("response id {} matches no pending request", resp.id),
                            line: raw,
                        });
                        return;
                    }
                }
                Err(e) => {
                    p.fail_all(BackendError::Protocol {
                        msg: format!("malformed response: {e}"),
                        line: raw,
                    });
                    return;
                }
            }
        }
    });
}

impl RemoteClient {
    pub fn connect(endpoint: &Endpoint, timeout: Duration) -> Result<Self, BackendError> {
        let pending = Arc::new(Mutex::new(Pending::default()));
        let (writer, transport): (Box<dyn Write + Send>, Transport) = match endpoint {
            Endpoint::Tcp(addr) => {
                let sock = addr
                    .to_socket_addrs()
                    .map_err(|e| BackendError::Connection(format!("{addr}: {e}")))?
                    .next()
                    .ok_or_else(|| BackendError::Connection(format!("{addr}: no address")))?;
                let stream = TcpStream::connect_timeout(&sock, timeout)
                    .map_err(|e| BackendError::Connection(format!("{addr}: {e}")))?;
                let _ = stream.set_nodelay(true);
                let read_half = stream
                    .try_clone()
                    .map_err(|e| BackendError::Connection(e.to_string()))?;
                spawn_reader(read_half, Arc::clone(&pending));
                let write_half = stream
                    .try_clone()
                    .map_err(|e| BackendError::Connection(e.to_string()))?;
                (Box::new(write_half), Transport::Tcp(stream))
            }
            Endpoint::Stdio { program, args } => {
                let mut child = Command::new(program)
                    .args(args)
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()
                    .map_err(|e| BackendError::Connection(format!("{program}: {e}")))?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                spawn_reader(stdout, Arc::clone(&pending));
                (Box::new(stdin), Transport::Child(child))
            }
        };
        Ok(Self {
            writer: Mutex::new(writer),
            pending,
            next_id: AtomicU64::new(1),
            slots: (Mutex::new(0), Condvar::new()),
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
            timeout,
            name: endpoint.to_string(),
            remote_failures: AtomicUsize::new(0),
            last_ok: AtomicBool::new(true),
            probe: None,
            transport: Mutex::new(transport),
        })
    }

    pub fn with_name(mut self, name: &str) -> Self {
        if !name.is_empty() {
            self.name = name.to_string();
        }
        self
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.max_in_flight = n.max(1);
        self
    }

    /// Healthchecks also classify this file; a refusal marks the backend degraded.
    pub fn with_probe(mut self, wav_path: PathBuf, prompt: String) -> Self {
        self.probe = Some((wav_path, prompt));
        self
    }

    fn acquire(&self) {
        let (lock, cv) = &self.slots;
        let mut n = lock.lock().unwrap();
        while *n >= self.max_in_flight {
            n = cv.wait(n).unwrap();
        }
        *n += 1;
    }

    fn release(&self) {
        let (lock, cv) = &self.slots;
        *lock.lock().unwrap() -= 1;
        cv.notify_one();
    }

    /// Sends one JSON line and waits for the response with the same id.
    fn round_trip<T: Serialize>(&self, id: u64, msg: &T) -> Result<(BridgeResponse, String), BackendError> {
        self.acquire();
        let result = self.round_trip_inner(id, msg);
        self.release();
        result
    }

    fn round_trip_inner<T: Serialize>(&self, id: u64, msg: &T) -> Result<(BridgeResponse, String), BackendError> {
        let (tx, rx) = mpsc::channel();
        {
            let mut p = self.pending.lock().unwrap();
            if let Some(err) = &p.closed {
                return Err(clone_err(err));
            }
            p.waiting.insert(id, tx);
        }
        let mut line = serde_json::to_string(msg).expect("request serializes");
        line.push('\n');
        let write = {
            let mut w = self.writer.lock().unwrap();
            w.write_all(line.as_bytes()).and_then(|_| w.flush())
        };
        if let Err(e) = write {
            self.pending.lock().unwrap().waiting.remove(&id);
            return Err(BackendError::Connection(format!("write failed: {e}")));
        }
        match rx.recv_timeout(self.timeout) {
            Ok(reply) => reply,
            Err(RecvTimeoutError::Timeout) => {
                let mut p = self.pending.lock().unwrap();
                p.waiting.remove(&id);
                p.abandoned.insert(id);
                Err(BackendError::Timeout {
                    id,
                    secs: self.timeout.as_secs_f64(),
                })
            }
            Err(RecvTimeoutError::Disconnected) => Err(BackendError::Connection("reader stopped".into())),
        }
    }

    /// Sends a ping; returns the model name the server reports.
    pub fn ping(&self) -> Result<String, BackendError> {
        let id = self.next_id.fetch_add(1, Ordering::SeqCst);
        let (resp, raw) = self.round_trip(id, &PingRequest { id, ping: true })?;
        match (resp.pong, resp.model) {
            (Some(true), Some(model)) => Ok(model),
            _ => Err(BackendError::Protocol {
                msg: "ping answered without pong/model".into(),
                line: raw,
            }),
        }
    }
}

impl DetectorBackend for RemoteClient {
    fn name(&self) -> String {
        self.name.clone()
    }

    /// `constrained` is ignored: remote models return free text.
    fn classify(&self, wav_path: &Path, prompt: &str, _constrained: bool) -> Result<String, BackendError> {
        let id = self.next_id.fetch_add(1, Ordering::SeqCst);
        let wav = std::fs::canonicalize(wav_path).unwrap_or_else(|_| wav_path.to_path_buf());
        let req = BridgeRequest {
            id,
            wav_path: wav.to_string_lossy().into_owned(),
            prompt: prompt.to_string(),
            max_new_tokens: MAX_NEW_TOKENS,
        };
        let (resp, raw) = self.round_trip(id, &req)?;
        let outcome = match (resp.text, resp.error) {
            (Some(text), None) => Ok(text),
            (None, Some(msg)) => {
                self.remote_failures.fetch_add(1, Ordering::Relaxed);
                self.last_ok.store(false, Ordering::Relaxed);
                return Err(BackendError::Remote { id, msg });
            }
            _ => Err(BackendError::Protocol {
                msg: "response must carry exactly one of text/error".into(),
                line: raw,
            }),
        };
        if outcome.is_ok() {
            self.last_ok.store(true, Ordering::Relaxed);
        }
        outcome
    }

    /// Pipelines up to `max_in_flight` requests; results keep input order.
    fn classify_batch(&self, items: &[(PathBuf, String)], constrained: bool) -> Vec<Result<String, BackendError>> {
        let next = AtomicUsize::new(0);
        let results: Vec<Mutex<Option<Result<String, BackendError>>>> = items.iter().map(|_| Mutex::new(None)).collect();
        thread::scope(|s| {
            for _ in 0..self.max_in_flight.min(items.len()) {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= items.len() {
                        break;
                    }
                    let (p, prompt) = &items[i];
                    *results[i].lock().unwrap() = Some(self.classify(p, prompt, constrained));
                });
            }
        });
        results
            .into_iter()
            .map(|m| m.into_inner().unwrap().expect("every item processed"))
            .collect()
    }

    fn healthcheck(&self) -> Health {
        let model = match self.ping() {
            Ok(m) => m,
            Err(e) => {
                return Health {
                    status: HealthStatus::Down,
                    model: self.name.clone(),
                    detail: e.to_string(),
                }
            }
        };
        if let Some((wav, prompt)) = &self.probe {
            if let Err(e) = self.classify(wav, prompt, false) {
                return Health {
                    status: HealthStatus::Degraded,
                    model,
                    detail: format!("ping ok, classify failed: {e}"),
                };
            }
        }
        if !self.last_ok.load(Ordering::Relaxed) {
            return Health {
                status: HealthStatus::Degraded,
                model,
                detail: format!(
                    "ping ok, {} classify requests refused",
                    self.remote_failures.load(Ordering::Relaxed)
                ),
            };
        }
        Health {
            status: HealthStatus::Ready,
            model,
            detail: "pong".into(),
        }
    }
}

impl Drop for RemoteClient {
    fn drop(&mut self) {
        match &mut *self.transport.lock().unwrap() {
            Transport::Tcp(s) => {
                let _ = s.shutdown(Shutdown::Both);
            }
            Transport::Child(c) => {
                let _ = c.kill();
                let _ = c.wait();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoint_parsing() {
        assert_eq!("127.0.0.1:9000".parse::<Endpoint>().unwrap(), Endpoint::Tcp("127.0.0.1:9000".into()));
        assert_eq!("tcp://localhost:1".parse::<Endpoint>().unwrap(), Endpoint::Tcp("localhost:1".into()));
        assert_eq!(
            "stdio:python3 -m bridge".parse::<Endpoint>().unwrap(),
            Endpoint::Stdio {
                program: "python3".into(),
                args: vec!["-m".into(), "bridge".into()]
            }
        );
        assert!("nonsense".parse::<Endpoint>().is_err());
        assert!("host:99999".parse::<Endpoint>().is_err());
        assert!("stdio:".parse::<Endpoint>().is_err());
    }

    #[test]
    fn wire_field_names() {
        let req = BridgeRequest {
            id: 7,
            wav_path: "/a.wav".into(),
            prompt: "p".into(),
            max_new_tokens: 16,
        };
        assert_eq!(
            serde_json::to_string(&req).unwrap(),
            r#"{"id":7,"wav_path":"/a.wav","prompt":"p","max_new_tokens":16}"#
        );
        assert_eq!(serde_json::to_string(&PingRequest { id: 1, ping: true }).unwrap(), r#"{"id":1,"ping":true}"#);
        let resp: BridgeResponse = serde_json::from_str(r#"{"id":1,"pong":true,"model":"m"}"#).unwrap();
        assert_eq!(resp.model.as_deref(), Some("m"));
    }

    #[test]
    fn only_timeouts_are_retriable() {
        assert!(BackendError::Timeout { id: 1, secs: 1.0 }.is_retriable());
        assert!(!BackendError::Remote { id: 1, msg: "x".into() }.is_retriable());
    }
}
