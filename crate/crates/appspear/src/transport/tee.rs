//! Simulated enclave boundary.
//!
//! The trusted side runs on its own threads inside the host process, as an
//! enclave would. Data crosses only through untrusted staging memory and is
//! explicitly copied in and out; in transit it is ChaCha20-Poly1305
//! ciphertext under a per-launch session key, and the staging area is wiped
//! once a call completes. A launch measures the trusted code image plus its
//! configuration and refuses to start when that differs from the expected
//! value. Sealing keys derive from the measurement, so only an identical
//! trusted component can unseal what an earlier launch sealed.
//!
//! Synchronous calls hand the request to a sleeping gate thread and sleep
//! until it answers, paying two thread switches per call. Queued calls push
//! onto a bounded submission queue polled by a resident worker.

use std::fmt;
use std::fs::File;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle, Thread};
use std::time::Duration;

use appspear_core::{Ack, Status, WireMessage};
use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use crossbeam::queue::ArrayQueue;
use crossbeam::utils::Backoff;
use rand::RngCore;
use sha2::{Digest, Sha256};
use zeroize::Zeroize;

use super::{CallMode, Channel, Responder, Subscriber, TransportError};
use crate::store::{SealError, Sealer};

const MEASURE_DOMAIN: &[u8] = b"appspear-measurement-v1";
const SEAL_MAGIC: &[u8; 4] = b"ASEL";
const NONCE_LEN: usize = 12;
/// Empty polls before the queued-call worker parks.
const IDLE_POLLS: u32 = 20_000;

/// Digest of the trusted component's code image and configuration.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Measurement(pub [u8; 32]);

impl Measurement {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let bytes = hex::decode(s).ok()?;
        Some(Measurement(bytes.try_into().ok()?))
    }
}

impl fmt::Debug for Measurement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Measurement({})", self.to_hex())
    }
}

impl fmt::Display for Measurement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

fn measure_start(code_len: u64) -> Sha256 {
    let mut h = Sha256::new();
    h.update(MEASURE_DOMAIN);
    h.update(code_len.to_le_bytes());
    h
}

fn measure_finish(mut h: Sha256, config: &[u8]) -> Measurement {
    h.update((config.len() as u64).to_le_bytes());
    h.update(config);
    Measurement(h.finalize().into())
}

pub fn measure(code: &[u8], config: &[u8]) -> Measurement {
    let mut h = measure_start(code.len() as u64);
    h.update(code);
    measure_finish(h, config)
}

/// Measures a code image on disk without loading it whole.
pub fn measure_files(code: &Path, config: &Path) -> io::Result<Measurement> {
    let config = std::fs::read(config)?;
    measure_image(code, &config)
}

fn measure_image(code: &Path, config: &[u8]) -> io::Result<Measurement> {
    let mut file = File::open(code)?;
    let len = file.metadata()?.len();
    let mut h = measure_start(len);
    let copied = io::copy(&mut file, &mut h)?;
    if copied != len {
        return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "code image changed while measuring"));
    }
    Ok(measure_finish(h, config))
}

/// Stand-in for the hardware root key: `APPSPEAR_PLATFORM_SECRET` or a
/// built-in default.
fn platform_secret() -> Vec<u8> {
    std::env::var("APPSPEAR_PLATFORM_SECRET")
        .map(String::into_bytes)
        .unwrap_or_else(|_| b"appspear-simulated-platform-root-key".to_vec())
}

/// Authenticated encryption bound to one measurement.
#[derive(Clone)]
pub struct SealedBlob {
    pub measurement: Measurement,
    pub nonce: [u8; NONCE_LEN],
    pub ciphertext: Vec<u8>,
}

impl SealedBlob {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 32 + NONCE_LEN + self.ciphertext.len());
        out.extend_from_slice(SEAL_MAGIC);
        out.extend_from_slice(&self.measurement.0);
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&self.ciphertext);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TransportError> {
        if bytes.len() < 4 + 32 + NONCE_LEN || &bytes[..4] != SEAL_MAGIC {
            return Err(TransportError::TamperDetected);
        }
        Ok(SealedBlob {
            measurement: Measurement(bytes[4..36].try_into().unwrap()),
            nonce: bytes[36..48].try_into().unwrap(),
            ciphertext: bytes[48..].to_vec(),
        })
    }
}

/// Sealing key of one trusted component.
#[derive(Clone)]
pub struct SealingKey {
    cipher: ChaCha20Poly1305,
    measurement: Measurement,
}

impl SealingKey {
    pub fn derive(measurement: Measurement, platform_secret: &[u8]) -> Self {
        let mut h = Sha256::new();
        h.update(b"appspear-seal-key");
        h.update((platform_secret.len() as u64).to_le_bytes());
        h.update(platform_secret);
        h.update(measurement.0);
        let mut key: [u8; 32] = h.finalize().into();
        let cipher = ChaCha20Poly1305::new(&Key::from(key));
        key.zeroize();
        SealingKey { cipher, measurement }
    }

    pub fn measurement(&self) -> Measurement {
        self.measurement
    }

    pub fn seal(&self, plain: &[u8]) -> SealedBlob {
        let mut nonce = [0u8; NONCE_LEN];
        rand::thread_rng().fill_bytes(&mut nonce);
        let ciphertext = self
            .cipher
            .encrypt(&Nonce::from(nonce), Payload { msg: plain, aad: &self.measurement.0 })
            .expect("sealing cannot fail for in-memory buffers");
        SealedBlob { measurement: self.measurement, nonce, ciphertext }
    }

    /// Fails on a blob sealed under another measurement or any modification.
    pub fn unseal(&self, blob: &SealedBlob) -> Result<Vec<u8>, TransportError> {
        if blob.measurement != self.measurement {
            return Err(TransportError::TamperDetected);
        }
        self.cipher
            .decrypt(&Nonce::from(blob.nonce), Payload { msg: &blob.ciphertext, aad: &self.measurement.0 })
            .map_err(|_| TransportError::TamperDetected)
    }
}

impl Sealer for SealingKey {
    fn seal(&self, plain: &[u8]) -> Vec<u8> {
        SealingKey::seal(self, plain).to_bytes()
    }

    fn unseal(&self, sealed: &[u8]) -> Result<Vec<u8>, SealError> {
        let blob = SealedBlob::from_bytes(sealed).map_err(|_| SealError)?;
        SealingKey::unseal(self, &blob).map_err(|_| SealError)
    }
}

#[derive(Clone, Debug)]
pub struct EnclaveConfig {
    /// Code image measured at launch.
    pub code: PathBuf,
    /// Configuration measured at launch and handed to the trusted side.
    pub config: PathBuf,
    /// Launch fails unless the measurement equals this, when given.
    pub expected: Option<Measurement>,
    pub call_mode: CallMode,
    /// Submission queue capacity for queued calls; 0 disables the queue.
    pub queue_depth: usize,
}

/// What the trusted side receives at launch.
pub struct EnclaveEnv {
    pub measurement: Measurement,
    pub config: Vec<u8>,
    pub sealing_key: SealingKey,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EnclaveStats {
    pub synchronous: u64,
    pub queued: u64,
    /// Queued calls that found the queue full and went synchronous.
    pub fallbacks: u64,
}

#[derive(PartialEq, Eq)]
enum GateState {
    Idle,
    Request,
    Response,
}

/// Untrusted memory through which synchronous calls pass.
struct Gate {
    staging: Vec<u8>,
    len: usize,
    state: GateState,
}

impl Gate {
    fn put(&mut self, data: &[u8]) {
        if self.staging.len() < data.len() {
            self.staging.resize(data.len(), 0);
        }
        self.staging[..data.len()].copy_from_slice(data);
        self.len = data.len();
    }

    /// Copies the staged bytes out and wipes the staging area.
    fn take(&mut self) -> Vec<u8> {
        let out = self.staging[..self.len].to_vec();
        self.staging.as_mut_slice().zeroize();
        self.len = 0;
        out
    }
}

struct Job {
    envelope: Vec<u8>,
    done: Arc<Completion>,
}

#[derive(Default)]
struct Completion {
    ready: AtomicBool,
    data: Mutex<Vec<u8>>,
}

struct Shared {
    responder: Arc<dyn Responder>,
    session: ChaCha20Poly1305,
    nonces: AtomicU64,
    mode: CallMode,
    /// One synchronous call in flight at a time.
    tcs: Mutex<()>,
    gate: Mutex<Gate>,
    request_ready: Condvar,
    response_ready: Condvar,
    queue: Option<ArrayQueue<Job>>,
    worker: Mutex<Option<Thread>>,
    worker_parked: AtomicBool,
    shutdown: AtomicBool,
    multicore: bool,
    trace: Mutex<Option<Vec<Vec<u8>>>>,
    synchronous: AtomicU64,
    queued: AtomicU64,
    fallbacks: AtomicU64,
}

impl Shared {
    fn nonce(&self) -> [u8; NONCE_LEN] {
        let n = self.nonces.fetch_add(1, Ordering::Relaxed);
        let mut nonce = [0u8; NONCE_LEN];
        nonce[..8].copy_from_slice(&n.to_le_bytes());
        nonce
    }

    fn seal(&self, plain: &[u8], aad: &[u8]) -> Vec<u8> {
        let nonce = self.nonce();
        let ct = self
            .session
            .encrypt(&Nonce::from(nonce), Payload { msg: plain, aad })
            .expect("encryption of in-memory buffers cannot fail");
        let mut out = Vec::with_capacity(NONCE_LEN + ct.len());
        out.extend_from_slice(&nonce);
        out.extend_from_slice(&ct);
        out
    }

    fn open(&self, envelope: &[u8], aad: &[u8]) -> Option<Vec<u8>> {
        if envelope.len() < NONCE_LEN {
            return None;
        }
        let nonce: [u8; NONCE_LEN] = envelope[..NONCE_LEN].try_into().unwrap();
        self.session.decrypt(&Nonce::from(nonce), Payload { msg: &envelope[NONCE_LEN..], aad }).ok()
    }

    fn observe(&self, bytes: &[u8]) {
        if let Some(trace) = self.trace.lock().unwrap().as_mut() {
            trace.push(bytes.to_vec());
        }
    }

    /// Trusted-side handling of one request envelope.
    fn process(&self, envelope: &[u8]) -> Vec<u8> {
        let reply = match self.open(envelope, b"request").map(|f| (WireMessage::decode_frame(&f), f)) {
            Some((Ok((msg, _)), mut frame)) => {
                frame.zeroize();
                self.responder.respond(msg)
            }
            _ => WireMessage::Ack(Ack { request_id: 0, status: Status::Malformed, epoch: 0 }),
        };
        let mut frame = reply.encode_frame();
        let out = self.seal(&frame, b"response");
        frame.zeroize();
        out
    }

    fn call_sync(&self, envelope: &[u8]) -> Result<Vec<u8>, TransportError> {
        self.synchronous.fetch_add(1, Ordering::Relaxed);
        let _tcs = self.tcs.lock().unwrap();
        let mut g = self.gate.lock().unwrap();
        g.put(envelope);
        self.observe(&g.staging[..g.len]);
        g.state = GateState::Request;
        self.request_ready.notify_one();
        while g.state != GateState::Response {
            if self.shutdown.load(Ordering::SeqCst) {
                return Err(TransportError::failure("enclave shut down"));
            }
            g = self.response_ready.wait_timeout(g, Duration::from_millis(100)).unwrap().0;
        }
        let out = g.take();
        g.state = GateState::Idle;
        Ok(out)
    }

    fn gate_loop(&self) {
        loop {
            let mut g = self.gate.lock().unwrap();
            while g.state != GateState::Request {
                if self.shutdown.load(Ordering::SeqCst) {
                    return;
                }
                g = self.request_ready.wait_timeout(g, Duration::from_millis(100)).unwrap().0;
            }
            let mut private = g.take();
            drop(g);
            let reply = self.process(&private);
            private.zeroize();
            let mut g = self.gate.lock().unwrap();
            g.put(&reply);
            self.observe(&g.staging[..g.len]);
            g.state = GateState::Response;
            self.response_ready.notify_one();
        }
    }

    fn call_queued(&self, envelope: Vec<u8>) -> Result<Vec<u8>, TransportError> {
        let Some(queue) = &self.queue else {
            return self.call_sync(&envelope);
        };
        let done = Arc::new(Completion::default());
        self.observe(&envelope);
        if let Err(job) = queue.push(Job { envelope, done: done.clone() }) {
            self.fallbacks.fetch_add(1, Ordering::Relaxed);
            return self.call_sync(&job.envelope);
        }
        self.queued.fetch_add(1, Ordering::Relaxed);
        std::sync::atomic::fence(Ordering::SeqCst);
        if self.worker_parked.load(Ordering::SeqCst) {
            if let Some(t) = self.worker.lock().unwrap().as_ref() {
                t.unpark();
            }
        }
        let backoff = Backoff::new();
        while !done.ready.load(Ordering::Acquire) {
            if self.shutdown.load(Ordering::SeqCst) {
                return Err(TransportError::failure("enclave shut down"));
            }
            if self.multicore {
                backoff.snooze();
            } else {
                // One core: spinning would only burn the worker's time.
                thread::yield_now();
            }
        }
        let mut data = done.data.lock().unwrap();
        Ok(std::mem::take(&mut *data))
    }

    fn worker_loop(&self) {
        let queue = self.queue.as_ref().expect("worker without queue");
        let mut idle = 0u32;
        while !self.shutdown.load(Ordering::SeqCst) {
            if let Some(mut job) = queue.pop() {
                let reply = self.process(&job.envelope);
                job.envelope.zeroize();
                self.observe(&reply);
                *job.done.data.lock().unwrap() = reply;
                job.done.ready.store(true, Ordering::Release);
                idle = 0;
                continue;
            }
            idle += 1;
            if idle < IDLE_POLLS {
                if self.multicore {
                    std::hint::spin_loop();
                } else {
                    thread::yield_now();
                }
                continue;
            }
            self.worker_parked.store(true, Ordering::SeqCst);
            std::sync::atomic::fence(Ordering::SeqCst);
            if queue.is_empty() {
                thread::park_timeout(Duration::from_millis(5));
            }
            self.worker_parked.store(false, Ordering::SeqCst);
            idle = 0;
        }
    }
}

/// A launched trusted component.
pub struct Enclave {
    shared: Arc<Shared>,
    measurement: Measurement,
    threads: Vec<JoinHandle<()>>,
}

impl Enclave {
    /// Measures the image, checks it against the expected value and starts
    /// the trusted side, whose responder `init` builds from the measured
    /// configuration.
    pub fn launch<F>(cfg: &EnclaveConfig, init: F) -> Result<Enclave, TransportError>
    where
        F: FnOnce(&EnclaveEnv) -> Result<Arc<dyn Responder>, String>,
    {
        let unavailable =
            |what: &Path, e: io::Error| TransportError::BackendUnavailable(format!("{}: {e}", what.display()));
        let config = std::fs::read(&cfg.config).map_err(|e| unavailable(&cfg.config, e))?;
        let measurement = measure_image(&cfg.code, &config).map_err(|e| unavailable(&cfg.code, e))?;
        if let Some(expected) = cfg.expected {
            if expected != measurement {
                return Err(TransportError::AttestationMismatch {
                    expected: expected.to_hex(),
                    found: measurement.to_hex(),
                });
            }
        }
        let env = EnclaveEnv { measurement, sealing_key: SealingKey::derive(measurement, &platform_secret()), config };
        let responder = init(&env).map_err(TransportError::BackendUnavailable)?;

        let mut key = [0u8; 32];
        rand::thread_rng().fill_bytes(&mut key);
        let session = ChaCha20Poly1305::new(&Key::from(key));
        key.zeroize();
        let queued = cfg.call_mode == CallMode::Queued && cfg.queue_depth > 0;
        let shared = Arc::new(Shared {
            responder,
            session,
            nonces: AtomicU64::new(0),
            mode: cfg.call_mode,
            tcs: Mutex::new(()),
            gate: Mutex::new(Gate { staging: Vec::new(), len: 0, state: GateState::Idle }),
            request_ready: Condvar::new(),
            response_ready: Condvar::new(),
            queue: queued.then(|| ArrayQueue::new(cfg.queue_depth)),
            worker: Mutex::new(None),
            worker_parked: AtomicBool::new(false),
            shutdown: AtomicBool::new(false),
            multicore: thread::available_parallelism().map(|n| n.get() > 1).unwrap_or(false),
            trace: Mutex::new(None),
            synchronous: AtomicU64::new(0),
            queued: AtomicU64::new(0),
            fallbacks: AtomicU64::new(0),
        });

        let mut threads = Vec::new();
        let s = shared.clone();
        threads.push(
            thread::Builder::new()
                .name("appspear-enclave-gate".into())
                .spawn(move || s.gate_loop())
                .map_err(|e| TransportError::BackendUnavailable(e.to_string()))?,
        );
        if queued {
            let s = shared.clone();
            let worker = thread::Builder::new()
                .name("appspear-enclave-worker".into())
                .spawn(move || s.worker_loop())
                .map_err(|e| TransportError::BackendUnavailable(e.to_string()))?;
            *shared.worker.lock().unwrap() = Some(worker.thread().clone());
            threads.push(worker);
        }
        Ok(Enclave { shared, measurement, threads })
    }

    pub fn measurement(&self) -> Measurement {
        self.measurement
    }

    pub fn channel(&self) -> EnclaveChannel {
        EnclaveChannel { shared: self.shared.clone() }
    }

    pub fn stats(&self) -> EnclaveStats {
        EnclaveStats {
            synchronous: self.shared.synchronous.load(Ordering::Relaxed),
            queued: self.shared.queued.load(Ordering::Relaxed),
            fallbacks: self.shared.fallbacks.load(Ordering::Relaxed),
        }
    }

    /// Starts or stops recording every byte string placed in untrusted
    /// memory, as an observer outside the enclave would see it.
    pub fn trace_untrusted(&self, on: bool) {
        *self.shared.trace.lock().unwrap() = on.then(Vec::new);
    }

    pub fn untrusted_trace(&self) -> Vec<Vec<u8>> {
        self.shared.trace.lock().unwrap().clone().unwrap_or_default()
    }

    /// Current content of the whole staging area.
    pub fn staging_snapshot(&self) -> Vec<u8> {
        self.shared.gate.lock().unwrap().staging.clone()
    }
}

impl Drop for Enclave {
    fn drop(&mut self) {
        self.shared.shutdown.store(true, Ordering::SeqCst);
        self.shared.request_ready.notify_all();
        if let Some(t) = self.shared.worker.lock().unwrap().as_ref() {
            t.unpark();
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

/// Requester proxy into an [`Enclave`].
#[derive(Clone)]
pub struct EnclaveChannel {
    shared: Arc<Shared>,
}

impl Channel for EnclaveChannel {
    fn call(&self, msg: WireMessage) -> Result<WireMessage, TransportError> {
        if self.shared.shutdown.load(Ordering::SeqCst) {
            return Err(TransportError::failure("enclave shut down"));
        }
        let id = msg.request_id();
        let mut frame = msg.encode_frame();
        let envelope = self.shared.seal(&frame, b"request");
        frame.zeroize();
        let reply = match self.shared.mode {
            CallMode::Queued => self.shared.call_queued(envelope)?,
            CallMode::Synchronous => self.shared.call_sync(&envelope)?,
        };
        let mut plain = self.shared.open(&reply, b"response").ok_or(TransportError::TamperDetected)?;
        let decoded = WireMessage::decode_frame(&plain);
        plain.zeroize();
        let (msg, _) = decoded.map_err(TransportError::failure)?;
        if msg.request_id() != id {
            return Err(TransportError::failure(format!("response id {} does not match {id}", msg.request_id())));
        }
        Ok(msg)
    }

    fn subscribe(&self, subscriber: Arc<dyn Subscriber>) -> Result<(), TransportError> {
        // Notices leave the enclave as direct calls into the untrusted proxy.
        self.shared.responder.subscribe(subscriber)
    }
}
