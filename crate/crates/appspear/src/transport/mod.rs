//! Proxy-pair communication between the application, the TOMs and the TPS.
//!
//! Every boundary is a [`Channel`] on the requester side and a [`Responder`]
//! on the other. Three backends exist: a direct in-process call, Unix domain
//! sockets between processes and a simulated enclave boundary.

pub mod ipc;
pub mod tee;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use appspear_core::{Invalidation, WireMessage};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("attestation failed: expected measurement {expected}, found {found}")]
    AttestationMismatch { expected: String, found: String },
    #[error("transport failure: {0}")]
    TransportFailure(String),
    #[error("submission queue saturated")]
    QueueSaturated,
    #[error("sealed data failed authentication")]
    TamperDetected,
    #[error("unsupported configuration: {0}")]
    ConfigUnsupported(String),
}

impl TransportError {
    pub(crate) fn failure(e: impl fmt::Display) -> Self {
        TransportError::TransportFailure(e.to_string())
    }
}

/// Isolation mechanism placed at one boundary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Boundary {
    Lpc,
    Ipc,
    Tee,
}

impl Boundary {
    pub fn is_remote(self) -> bool {
        self != Boundary::Lpc
    }

    pub fn name(self) -> &'static str {
        match self {
            Boundary::Lpc => "lpc",
            Boundary::Ipc => "ipc",
            Boundary::Tee => "tee",
        }
    }
}

impl fmt::Display for Boundary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Boundary {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "lpc" => Ok(Boundary::Lpc),
            "ipc" => Ok(Boundary::Ipc),
            "tee" => Ok(Boundary::Tee),
            _ => Err(format!("unknown boundary `{s}` (expected lpc, ipc or tee)")),
        }
    }
}

/// How calls into a simulated enclave are made.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CallMode {
    /// Every call is a full boundary transition.
    Synchronous,
    /// Calls go through a submission queue polled by a resident trusted
    /// worker; a full queue falls back to a synchronous call.
    Queued,
}

/// Placement and mechanism of the two isolation boundaries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct IsolationConfig {
    pub app_tom: Boundary,
    pub tom_tps: Boundary,
    pub call_mode: CallMode,
    pub cache_enabled: bool,
}

impl IsolationConfig {
    /// The seven placements exercised by the tests and the benchmark matrix.
    pub const VARIANTS: [(Boundary, Boundary); 7] = [
        (Boundary::Lpc, Boundary::Lpc),
        (Boundary::Lpc, Boundary::Ipc),
        (Boundary::Ipc, Boundary::Lpc),
        (Boundary::Ipc, Boundary::Ipc),
        (Boundary::Lpc, Boundary::Tee),
        (Boundary::Tee, Boundary::Lpc),
        (Boundary::Ipc, Boundary::Tee),
    ];

    pub fn new(app_tom: Boundary, tom_tps: Boundary) -> Self {
        IsolationConfig { app_tom, tom_tps, call_mode: CallMode::Synchronous, cache_enabled: false }
    }

    pub fn integrated() -> Self {
        IsolationConfig::new(Boundary::Lpc, Boundary::Lpc)
    }

    pub fn with_cache(mut self, on: bool) -> Self {
        self.cache_enabled = on;
        self
    }

    pub fn with_call_mode(mut self, mode: CallMode) -> Self {
        self.call_mode = mode;
        self
    }

    pub fn all_variants() -> Vec<IsolationConfig> {
        Self::VARIANTS.iter().map(|(a, b)| IsolationConfig::new(*a, *b)).collect()
    }

    /// Architecture variant: (a) fully integrated, (b) only the TPS
    /// separated, (c) only the application separated, (d) both.
    pub fn variant(&self) -> char {
        match (self.app_tom.is_remote(), self.tom_tps.is_remote()) {
            (false, false) => 'a',
            (false, true) => 'b',
            (true, false) => 'c',
            (true, true) => 'd',
        }
    }

    pub fn remote_boundaries(&self) -> usize {
        self.app_tom.is_remote() as usize + self.tom_tps.is_remote() as usize
    }

    pub fn label(&self) -> String {
        format!("{}/{}", self.app_tom.name().to_uppercase(), self.tom_tps.name().to_uppercase())
    }
}

impl fmt::Display for IsolationConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.label())?;
        if self.cache_enabled {
            f.write_str("+cache")?;
        }
        if self.call_mode == CallMode::Queued {
            f.write_str("+queued")?;
        }
        Ok(())
    }
}

/// Receives cache invalidation notices pushed by the TPS. `deliver` returns
/// once the notice has been applied.
pub trait Subscriber: Send + Sync {
    fn deliver(&self, notice: &Invalidation) -> Result<(), TransportError>;

    /// Called when notices can no longer arrive.
    fn disconnected(&self) {}
}

/// Responder proxy: the component side of a boundary.
pub trait Responder: Send + Sync {
    fn respond(&self, msg: WireMessage) -> WireMessage;

    /// Registers an invalidation subscriber; only the TPS accepts these.
    fn subscribe(&self, _subscriber: Arc<dyn Subscriber>) -> Result<(), TransportError> {
        Err(TransportError::ConfigUnsupported("component takes no subscribers".into()))
    }
}

/// Requester proxy: the caller side of a boundary.
pub trait Channel: Send + Sync {
    /// Sends `msg` and blocks for the response carrying the same request id.
    fn call(&self, msg: WireMessage) -> Result<WireMessage, TransportError>;

    /// Arranges for invalidation notices from the far side to reach
    /// `subscriber`.
    fn subscribe(&self, subscriber: Arc<dyn Subscriber>) -> Result<(), TransportError>;
}

/// Local procedure call: the message is handed to the responder directly.
pub struct LpcChannel {
    responder: Arc<dyn Responder>,
}

impl LpcChannel {
    pub fn new(responder: Arc<dyn Responder>) -> Self {
        LpcChannel { responder }
    }
}

impl Channel for LpcChannel {
    fn call(&self, msg: WireMessage) -> Result<WireMessage, TransportError> {
        Ok(self.responder.respond(msg))
    }

    fn subscribe(&self, subscriber: Arc<dyn Subscriber>) -> Result<(), TransportError> {
        self.responder.subscribe(subscriber)
    }
}

/// Responds to echo probes only; used to check backends in isolation.
pub struct EchoResponder;

impl Responder for EchoResponder {
    fn respond(&self, msg: WireMessage) -> WireMessage {
        match msg {
            WireMessage::Echo { .. } => msg,
            other => WireMessage::Ack(appspear_core::Ack {
                request_id: other.request_id(),
                status: appspear_core::Status::Malformed,
                epoch: 0,
            }),
        }
    }
}

/// Socket of `component` inside `runtime_dir`.
pub fn socket_path(runtime_dir: &Path, component: &str) -> PathBuf {
    runtime_dir.join(format!("appspear-{component}.sock"))
}

/// Directory for sockets of a deployment: `APPSPEAR_RUNTIME_DIR`, else
/// `XDG_RUNTIME_DIR`, else the system temp directory.
pub fn default_runtime_root() -> PathBuf {
    std::env::var_os("APPSPEAR_RUNTIME_DIR")
        .or_else(|| std::env::var_os("XDG_RUNTIME_DIR"))
        .map(PathBuf::from)
        .unwrap_or_else(std::env::temp_dir)
}
