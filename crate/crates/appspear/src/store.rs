//! Durable storage of the policy state.
//!
//! A store directory holds `policy.snapshot`, one complete-state record, and
//! `policy.difflog`, the transitions committed since that snapshot. Every
//! transition is appended to the log and synced before it is acknowledged;
//! after `snapshot_every` transitions a fresh snapshot replaces the old one
//! (written aside, then renamed) and the log is truncated. With
//! `snapshot_every == 1` the store keeps snapshots only; with 0 it never
//! snapshots past the initial state and recovery replays the whole log.
//!
//! Log entries are framed as
//!
//! ```text
//! +-------------+--------------+------------------------------------+
//! | len u32 LE  | !len u32 LE  | record (len bytes, optionally sealed) |
//! +-------------+--------------+------------------------------------+
//! ```
//!
//! where the record is a one-command diff log. A truncated final entry is a
//! torn write and is discarded; anything else that fails to verify aborts
//! recovery.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use appspear_core::{AdminCommand, PersistError, PersistenceRecord, PolicyState};
use thiserror::Error;

pub const SNAPSHOT_FILE: &str = "policy.snapshot";
pub const LOG_FILE: &str = "policy.difflog";
/// Default number of transitions between snapshots.
pub const SNAPSHOT_EVERY: usize = 100;

#[derive(Debug, Error)]
#[error("sealed record failed authentication")]
pub struct SealError;

/// Authenticated encryption applied to records before they reach disk.
pub trait Sealer: Send + Sync {
    fn seal(&self, plain: &[u8]) -> Vec<u8>;
    fn unseal(&self, sealed: &[u8]) -> Result<Vec<u8>, SealError>;
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("policy store I/O: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Persist(#[from] PersistError),
    #[error("sealed policy record failed authentication")]
    TamperDetected,
    #[error("corrupt diff-log entry at byte {0}")]
    CorruptLog(u64),
    #[error("diff log continues from epoch {found} but the state is at {expected}")]
    Gap { expected: u64, found: u64 },
    #[error("no policy state stored in {0}")]
    Empty(PathBuf),
}

/// Outcome of opening an existing store.
#[derive(Debug)]
pub struct Recovery {
    pub state: PolicyState,
    /// Log entries applied on top of the snapshot.
    pub replayed: usize,
    /// Whether an incomplete trailing entry was dropped.
    pub torn_tail: bool,
}

pub struct PolicyStore {
    dir: PathBuf,
    snapshot_every: usize,
    since_snapshot: usize,
    log: File,
    sealer: Option<Arc<dyn Sealer>>,
}

impl PolicyStore {
    /// Creates a store holding `initial`, replacing whatever `dir` held.
    pub fn create(
        dir: &Path,
        initial: &PolicyState,
        snapshot_every: usize,
        sealer: Option<Arc<dyn Sealer>>,
    ) -> Result<Self, StoreError> {
        fs::create_dir_all(dir)?;
        let log = OpenOptions::new().create(true).write(true).truncate(true).open(dir.join(LOG_FILE))?;
        let mut store = PolicyStore { dir: dir.to_owned(), snapshot_every, since_snapshot: 0, log, sealer };
        store.snapshot(initial)?;
        Ok(store)
    }

    /// Recovers the state from `dir` and reopens it for appending.
    pub fn open(
        dir: &Path,
        snapshot_every: usize,
        sealer: Option<Arc<dyn Sealer>>,
    ) -> Result<(Self, Recovery), StoreError> {
        let (recovery, good_len) = recover(dir, sealer.as_deref())?;
        let log = OpenOptions::new().create(true).write(true).truncate(false).open(dir.join(LOG_FILE))?;
        if recovery.torn_tail {
            log.set_len(good_len)?;
            log.sync_data()?;
        }
        let mut log = log;
        io::Seek::seek(&mut log, io::SeekFrom::End(0))?;
        let store = PolicyStore { dir: dir.to_owned(), snapshot_every, since_snapshot: recovery.replayed, log, sealer };
        Ok((store, recovery))
    }

    /// Opens `dir` if it holds a state, else creates it from `initial`.
    pub fn open_or_create(
        dir: &Path,
        initial: &PolicyState,
        snapshot_every: usize,
        sealer: Option<Arc<dyn Sealer>>,
    ) -> Result<(Self, Option<Recovery>), StoreError> {
        if dir.join(SNAPSHOT_FILE).exists() {
            let (s, r) = PolicyStore::open(dir, snapshot_every, sealer)?;
            Ok((s, Some(r)))
        } else {
            Ok((PolicyStore::create(dir, initial, snapshot_every, sealer)?, None))
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn wrap(&self, record: Vec<u8>) -> Vec<u8> {
        match &self.sealer {
            Some(s) => s.seal(&record),
            None => record,
        }
    }

    /// Durably records `cmd`, which took the state from `base_epoch` to
    /// `after`.
    pub fn record(&mut self, base_epoch: u64, cmd: &AdminCommand, after: &PolicyState) -> Result<(), StoreError> {
        let blob = self.wrap(PersistenceRecord::diff_log(base_epoch, [cmd]).to_bytes());
        let len = u32::try_from(blob.len()).map_err(|_| io::Error::other("record too large"))?;
        let mut entry = Vec::with_capacity(8 + blob.len());
        entry.extend_from_slice(&len.to_le_bytes());
        entry.extend_from_slice(&(!len).to_le_bytes());
        entry.extend_from_slice(&blob);
        self.log.write_all(&entry)?;
        self.log.sync_data()?;
        self.since_snapshot += 1;
        if self.snapshot_every > 0 && self.since_snapshot >= self.snapshot_every {
            self.snapshot(after)?;
        }
        Ok(())
    }

    /// Replaces the snapshot with `state` and empties the log.
    pub fn snapshot(&mut self, state: &PolicyState) -> Result<(), StoreError> {
        let blob = self.wrap(PersistenceRecord::snapshot(state).to_bytes());
        let tmp = self.dir.join(format!("{SNAPSHOT_FILE}.tmp"));
        {
            let mut f = File::create(&tmp)?;
            f.write_all(&blob)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, self.dir.join(SNAPSHOT_FILE))?;
        if let Ok(d) = File::open(&self.dir) {
            let _ = d.sync_all();
        }
        // A crash between the rename and this truncation leaves entries the
        // snapshot already covers; recovery skips them by epoch.
        self.log.set_len(0)?;
        io::Seek::seek(&mut self.log, io::SeekFrom::Start(0))?;
        self.log.sync_data()?;
        self.since_snapshot = 0;
        Ok(())
    }
}

fn unwrap_record(blob: &[u8], sealer: Option<&dyn Sealer>) -> Result<PersistenceRecord, StoreError> {
    let plain;
    let bytes = match sealer {
        Some(s) => {
            plain = s.unseal(blob).map_err(|_| StoreError::TamperDetected)?;
            &plain[..]
        }
        None => blob,
    };
    Ok(PersistenceRecord::from_bytes(bytes)?)
}

/// Reads the state stored in `dir` without modifying anything. Also returns
/// the length of the verified log prefix.
pub fn recover(dir: &Path, sealer: Option<&dyn Sealer>) -> Result<(Recovery, u64), StoreError> {
    let snap = match fs::read(dir.join(SNAPSHOT_FILE)) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(StoreError::Empty(dir.to_owned())),
        Err(e) => return Err(e.into()),
    };
    let mut state = unwrap_record(&snap, sealer)?.restore_snapshot()?;
    let log = match fs::read(dir.join(LOG_FILE)) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(e.into()),
    };

    let mut pos = 0usize;
    let mut replayed = 0;
    let mut torn_tail = false;
    while pos < log.len() {
        let rest = &log[pos..];
        if rest.len() < 8 {
            torn_tail = true;
            break;
        }
        let len = u32::from_le_bytes(rest[..4].try_into().unwrap());
        let check = u32::from_le_bytes(rest[4..8].try_into().unwrap());
        if check != !len {
            return Err(StoreError::CorruptLog(pos as u64));
        }
        let Some(blob) = rest.get(8..8 + len as usize) else {
            torn_tail = true;
            break;
        };
        let (base, commands) = unwrap_record(blob, sealer)?.diff_entries()?;
        if base > state.epoch() {
            return Err(StoreError::Gap { expected: state.epoch(), found: base });
        }
        if base == state.epoch() {
            for c in &commands {
                state.execute(c).map_err(PersistError::Replay)?;
            }
            replayed += 1;
        }
        pos += 8 + len as usize;
    }
    Ok((Recovery { state, replayed, torn_tail }, pos as u64))
}
