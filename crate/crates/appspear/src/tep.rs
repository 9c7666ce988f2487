//! Event processing next to the policy server: context providers that push
//! fresh values into it, and the audit trail of its decisions.

use std::fmt::Write as _;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use appspear_core::{ContextValue, DecisionEvent, EntityId, Status, WireMessage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tps::PolicyServer;
use crate::transport::Channel;

#[derive(Debug, Error)]
pub enum TepError {
    #[error("context push rejected: {0:?}")]
    Rejected(Status),
    #[error("audit sink failure: {0}")]
    SinkFailure(String),
    #[error("trace line {line}: {message}")]
    Trace { line: usize, message: String },
    #[error("I/O: {0}")]
    Io(#[from] io::Error),
}

/// Where providers deliver context values.
pub trait ContextSink: Send + Sync {
    fn push_context(&self, provider: &str, value: ContextValue) -> Result<(), TepError>;
}

impl ContextSink for Mutex<PolicyServer> {
    fn push_context(&self, provider: &str, value: ContextValue) -> Result<(), TepError> {
        match self.lock().unwrap().push_context(provider, value) {
            Status::Ok => Ok(()),
            s => Err(TepError::Rejected(s)),
        }
    }
}

/// Pushes over a proxy channel to a policy server elsewhere.
pub struct ChannelSink<C: Channel> {
    channel: C,
    next_id: std::sync::atomic::AtomicU64,
}

impl<C: Channel> ChannelSink<C> {
    pub fn new(channel: C) -> Self {
        ChannelSink { channel, next_id: std::sync::atomic::AtomicU64::new(1) }
    }
}

impl<C: Channel> ContextSink for ChannelSink<C> {
    fn push_context(&self, provider: &str, value: ContextValue) -> Result<(), TepError> {
        let request_id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let msg = WireMessage::ContextPush { request_id, provider: provider.to_owned(), value };
        match self.channel.call(msg) {
            Ok(WireMessage::Ack(a)) if a.status.is_ok() => Ok(()),
            Ok(WireMessage::Ack(a)) => Err(TepError::Rejected(a.status)),
            _ => Err(TepError::Rejected(Status::Unavailable)),
        }
    }
}

/// Where a provider's values come from.
#[derive(Clone, Debug)]
pub enum ContextSource {
    /// Seconds elapsed since the provider started.
    Clock,
    /// Uniform noise in `mean ± spread`, reproducible from the seed.
    Sensor { seed: u64, mean: f64, spread: f64 },
    /// A fixed sequence of `(timestamp, value)` pairs.
    Trace(Vec<(u64, f64)>),
}

/// Samples one context variable. Timestamps never decrease.
pub struct ContextProvider {
    name: String,
    variable: String,
    source: ContextSource,
    started: Instant,
    rng: ChaCha8Rng,
    cursor: usize,
    last_ts: u64,
}

impl ContextProvider {
    pub fn new(name: impl Into<String>, variable: impl Into<String>, source: ContextSource) -> Self {
        let seed = match &source {
            ContextSource::Sensor { seed, .. } => *seed,
            _ => 0,
        };
        ContextProvider {
            name: name.into(),
            variable: variable.into(),
            source,
            started: Instant::now(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            cursor: 0,
            last_ts: 0,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn variable(&self) -> &str {
        &self.variable
    }

    /// Next value, or `None` once a trace is exhausted.
    pub fn sample(&mut self) -> Option<ContextValue> {
        use rand::Rng;
        let elapsed = self.started.elapsed();
        let (ts, value) = match &self.source {
            ContextSource::Clock => (elapsed.as_nanos() as u64, elapsed.as_secs_f64()),
            ContextSource::Sensor { mean, spread, .. } => {
                let (mean, spread) = (*mean, *spread);
                let noise = if spread > 0.0 { self.rng.gen_range(-spread..=spread) } else { 0.0 };
                (elapsed.as_nanos() as u64, mean + noise)
            }
            ContextSource::Trace(points) => {
                let p = *points.get(self.cursor)?;
                self.cursor += 1;
                p
            }
        };
        let ts = ts.max(self.last_ts);
        self.last_ts = ts;
        Some(ContextValue::new(self.variable.clone(), value, ts))
    }
}

/// Runs a provider on its own thread, pushing one value per `period` until
/// stopped or until its trace ends.
pub struct ProviderHandle {
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<usize>>,
}

impl ProviderHandle {
    /// Stops the provider and returns how many values it pushed.
    pub fn stop(mut self) -> usize {
        self.stop.store(true, Ordering::SeqCst);
        self.thread.take().map(|t| t.join().unwrap_or(0)).unwrap_or(0)
    }
}

impl Drop for ProviderHandle {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

pub fn run_provider(mut provider: ContextProvider, sink: Arc<dyn ContextSink>, period: Duration) -> ProviderHandle {
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    let thread = thread::spawn(move || {
        let mut pushed = 0;
        while !flag.load(Ordering::SeqCst) {
            let Some(v) = provider.sample() else { break };
            match sink.push_context(&provider.name, v) {
                Ok(()) => pushed += 1,
                Err(e) => log::warn!("provider {}: {e}", provider.name),
            }
            thread::sleep(period);
        }
        pushed
    });
    ProviderHandle { stop, thread: Some(thread) }
}

/// Pushes a trace to its end, or a single sample of a live source.
pub fn drive(provider: &mut ContextProvider, sink: &dyn ContextSink) -> Result<usize, TepError> {
    let mut n = 0;
    while let Some(v) = provider.sample() {
        sink.push_context(&provider.name, v)?;
        n += 1;
        if !matches!(provider.source, ContextSource::Trace(_)) {
            break;
        }
    }
    Ok(n)
}

/// Timestamped points per context variable.
pub type Trace = Vec<(String, Vec<(u64, f64)>)>;

/// Parses a context trace: one `variable timestamp value` per line, `#`
/// comments and blank lines ignored. Returns the points per variable in
/// file order.
pub fn parse_trace(text: &str) -> Result<Trace, TepError> {
    let mut out: Trace = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: &str| TepError::Trace { line: i + 1, message: message.to_owned() };
        let f: Vec<&str> = line.split_whitespace().collect();
        let [var, ts, value] = f[..] else {
            return Err(err("expected `variable timestamp value`"));
        };
        let ts: u64 = ts.parse().map_err(|_| err("bad timestamp"))?;
        let value: f64 = value.parse().map_err(|_| err("bad value"))?;
        if !value.is_finite() {
            return Err(err("value must be finite"));
        }
        match out.iter_mut().find(|(v, _)| v == var) {
            Some((_, points)) => points.push((ts, value)),
            None => out.push((var.to_owned(), vec![(ts, value)])),
        }
    }
    Ok(out)
}

pub fn load_trace(path: &Path) -> Result<Trace, TepError> {
    parse_trace(&std::fs::read_to_string(path)?)
}

/// Receives decision events. Failures are counted by the caller and never
/// affect the decision.
pub trait AuditSink: Send {
    /// Appends the event and returns its sequence number.
    fn record(&mut self, event: &DecisionEvent) -> Result<u64, TepError>;
}

/// Append-only audit file, one tab-separated line per decision:
///
/// ```text
/// seq  request_id  epoch  timestamp  allow|deny  status  op  entity,entity,...
/// ```
///
/// The operation name is percent-encoded; entities are raw ids in hex.
/// Sequence numbers continue across reopenings.
pub struct AuditLog {
    path: PathBuf,
    out: Option<BufWriter<File>>,
    next_seq: u64,
    line: String,
}

impl AuditLog {
    pub fn open(path: &Path) -> Result<Self, TepError> {
        let next_seq = match File::open(path) {
            Ok(f) => BufReader::new(f).lines().map_while(Result::ok).filter(|l| !l.is_empty()).count() as u64,
            Err(e) if e.kind() == io::ErrorKind::NotFound => 0,
            Err(e) => return Err(e.into()),
        };
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(AuditLog { path: path.to_owned(), out: Some(BufWriter::new(file)), next_seq, line: String::new() })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Flushes and closes the file; later records fail.
    pub fn close(&mut self) -> Result<(), TepError> {
        if let Some(mut out) = self.out.take() {
            out.flush()?;
        }
        Ok(())
    }
}

impl AuditSink for AuditLog {
    fn record(&mut self, ev: &DecisionEvent) -> Result<u64, TepError> {
        let out = self.out.as_mut().ok_or_else(|| TepError::SinkFailure("audit log closed".into()))?;
        let seq = self.next_seq;
        self.line.clear();
        let _ = write!(
            self.line,
            "{seq}\t{}\t{}\t{}\t{}\t{}\t",
            ev.request_id,
            ev.epoch,
            ev.timestamp,
            if ev.verdict { "allow" } else { "deny" },
            ev.status as u8
        );
        for b in ev.op.bytes() {
            if b.is_ascii_alphanumeric() || b"-_.".contains(&b) {
                self.line.push(b as char);
            } else {
                let _ = write!(self.line, "%{b:02X}");
            }
        }
        self.line.push('\t');
        for (i, e) in ev.entities.iter().enumerate() {
            if i > 0 {
                self.line.push(',');
            }
            let _ = write!(self.line, "{:x}", e.raw());
        }
        self.line.push('\n');
        out.write_all(self.line.as_bytes()).map_err(|e| TepError::SinkFailure(e.to_string()))?;
        out.flush().map_err(|e| TepError::SinkFailure(e.to_string()))?;
        self.next_seq += 1;
        Ok(seq)
    }
}

impl Drop for AuditLog {
    fn drop(&mut self) {
        let _ = self.close();
    }
}

/// One parsed audit line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AuditRecord {
    pub seq: u64,
    pub event: DecisionEvent,
}

pub fn parse_audit_line(line: &str) -> Option<AuditRecord> {
    let f: Vec<&str> = line.split('\t').collect();
    let [seq, req, epoch, ts, verdict, status, op, entities] = f[..] else { return None };
    let verdict = match verdict {
        "allow" => true,
        "deny" => false,
        _ => return None,
    };
    let mut name = Vec::new();
    let mut bytes = op.bytes();
    while let Some(b) = bytes.next() {
        if b == b'%' {
            let hi = bytes.next()?;
            let lo = bytes.next()?;
            name.push(u8::from_str_radix(std::str::from_utf8(&[hi, lo]).ok()?, 16).ok()?);
        } else {
            name.push(b);
        }
    }
    let entities = if entities.is_empty() {
        Vec::new()
    } else {
        entities
            .split(',')
            .map(|e| u64::from_str_radix(e, 16).ok().and_then(EntityId::from_raw))
            .collect::<Option<Vec<_>>>()?
    };
    Some(AuditRecord {
        seq: seq.parse().ok()?,
        event: DecisionEvent {
            request_id: req.parse().ok()?,
            entities,
            op: String::from_utf8(name).ok()?,
            verdict,
            status: Status::from_code(status.parse().ok()?)?,
            epoch: epoch.parse().ok()?,
            timestamp: ts.parse().ok()?,
        },
    })
}

pub fn read_audit(path: &Path) -> Result<Vec<AuditRecord>, TepError> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            parse_audit_line(l).ok_or_else(|| TepError::Trace { line: i + 1, message: "malformed audit line".into() })
        })
        .collect()
}

/// Keeps events in memory; the shared vector can be inspected while the
/// sink is installed.
#[derive(Clone, Default)]
pub struct MemoryAudit {
    pub events: Arc<Mutex<Vec<DecisionEvent>>>,
}

impl AuditSink for MemoryAudit {
    fn record(&mut self, ev: &DecisionEvent) -> Result<u64, TepError> {
        let mut events = self.events.lock().unwrap();
        events.push(ev.clone());
        Ok(events.len() as u64 - 1)
    }
}
