//! Checksummed persistence records for the policy state.
//!
//! ```text
//! +--------+---------+-------------+------------------+---------+--------------+
//! | "ASPR" | version | strategy u8 | payload len u32  | payload | SHA-256 (32) |
//! +--------+---------+-------------+------------------+---------+--------------+
//! ```
//!
//! The digest covers every byte before it. A snapshot payload is the
//! encoded [`PolicyState`]; a diff-log payload is the epoch of the state it
//! applies to followed by the encoded [`AdminCommand`]s in order.

use alloc::vec::Vec;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::policy::{AdminCommand, PolicyError, PolicyState};
use crate::wire::{Decode, Decoder, Encode, Encoder, WireError};

const MAGIC: &[u8; 4] = b"ASPR";
const VERSION: u8 = 1;
const HEADER: usize = 4 + 1 + 1 + 4;
const DIGEST: usize = 32;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PersistError {
    #[error("malformed persistence record: {0}")]
    MalformedRecord(&'static str),
    #[error("persistence record checksum mismatch")]
    ChecksumMismatch,
    #[error("record payload does not decode: {0}")]
    Payload(#[from] WireError),
    #[error("diff log applies to epoch {expected}, base state is at {found}")]
    BaseMismatch { expected: u64, found: u64 },
    #[error("replaying diff log failed: {0}")]
    Replay(PolicyError),
    #[error("expected a {expected:?} record")]
    WrongStrategy { expected: Strategy },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Strategy {
    Snapshot = 1,
    DiffLog = 2,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PersistenceRecord {
    pub strategy: Strategy,
    pub payload: Vec<u8>,
    pub checksum: [u8; DIGEST],
}

fn digest(strategy: Strategy, payload: &[u8]) -> [u8; DIGEST] {
    let mut h = Sha256::new();
    h.update(MAGIC);
    h.update([VERSION, strategy as u8]);
    h.update((payload.len() as u32).to_le_bytes());
    h.update(payload);
    h.finalize().into()
}

impl PersistenceRecord {
    fn new(strategy: Strategy, payload: Vec<u8>) -> Self {
        let checksum = digest(strategy, &payload);
        PersistenceRecord { strategy, payload, checksum }
    }

    pub fn snapshot(state: &PolicyState) -> Self {
        PersistenceRecord::new(Strategy::Snapshot, state.to_bytes())
    }

    /// A log of `commands` to be replayed onto a state at `base_epoch`.
    pub fn diff_log<'a>(base_epoch: u64, commands: impl IntoIterator<Item = &'a AdminCommand>) -> Self {
        let mut e = Encoder::new();
        e.u64(base_epoch);
        let commands: Vec<_> = commands.into_iter().collect();
        e.len(commands.len());
        for c in commands {
            e.put(c);
        }
        PersistenceRecord::new(Strategy::DiffLog, e.into_bytes())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER + self.payload.len() + DIGEST);
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.strategy as u8);
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
        out.extend_from_slice(&self.checksum);
        out
    }

    /// Parses and verifies one record occupying all of `buf`.
    pub fn from_bytes(buf: &[u8]) -> Result<Self, PersistError> {
        let (rec, used) = PersistenceRecord::read_prefix(buf)?;
        if used != buf.len() {
            return Err(PersistError::MalformedRecord("trailing bytes after record"));
        }
        Ok(rec)
    }

    /// Parses and verifies the record at the front of `buf`, returning it
    /// with the number of bytes it occupies.
    pub fn read_prefix(buf: &[u8]) -> Result<(Self, usize), PersistError> {
        if buf.len() < HEADER {
            return Err(PersistError::MalformedRecord("truncated header"));
        }
        if &buf[..4] != MAGIC {
            return Err(PersistError::MalformedRecord("bad magic"));
        }
        if buf[4] != VERSION {
            return Err(PersistError::MalformedRecord("unsupported version"));
        }
        let strategy = match buf[5] {
            1 => Strategy::Snapshot,
            2 => Strategy::DiffLog,
            _ => return Err(PersistError::MalformedRecord("unknown strategy")),
        };
        let len = u32::from_le_bytes(buf[6..10].try_into().unwrap()) as usize;
        let total = HEADER
            .checked_add(len)
            .and_then(|n| n.checked_add(DIGEST))
            .ok_or(PersistError::MalformedRecord("length overflow"))?;
        if buf.len() < total {
            return Err(PersistError::MalformedRecord("truncated payload"));
        }
        let payload = buf[HEADER..HEADER + len].to_vec();
        let checksum: [u8; DIGEST] = buf[HEADER + len..total].try_into().unwrap();
        if digest(strategy, &payload) != checksum {
            return Err(PersistError::ChecksumMismatch);
        }
        Ok((PersistenceRecord { strategy, payload, checksum }, total))
    }

    pub fn verify(&self) -> Result<(), PersistError> {
        if digest(self.strategy, &self.payload) == self.checksum {
            Ok(())
        } else {
            Err(PersistError::ChecksumMismatch)
        }
    }

    pub fn restore_snapshot(&self) -> Result<PolicyState, PersistError> {
        if self.strategy != Strategy::Snapshot {
            return Err(PersistError::WrongStrategy { expected: Strategy::Snapshot });
        }
        self.verify()?;
        Ok(PolicyState::from_bytes(&self.payload)?)
    }

    /// Base epoch and commands of a diff-log record.
    pub fn diff_entries(&self) -> Result<(u64, Vec<AdminCommand>), PersistError> {
        if self.strategy != Strategy::DiffLog {
            return Err(PersistError::WrongStrategy { expected: Strategy::DiffLog });
        }
        self.verify()?;
        let mut d = Decoder::new(&self.payload);
        let base = d.u64()?;
        let commands = d.seq::<AdminCommand>(1)?;
        d.finish()?;
        Ok((base, commands))
    }

    /// Replays a diff-log record onto `base`, which must be at the epoch
    /// the log was recorded against.
    pub fn replay_onto(&self, mut base: PolicyState) -> Result<PolicyState, PersistError> {
        let (epoch, commands) = self.diff_entries()?;
        if epoch != base.epoch() {
            return Err(PersistError::BaseMismatch { expected: epoch, found: base.epoch() });
        }
        for c in &commands {
            base.execute(c).map_err(PersistError::Replay)?;
        }
        Ok(base)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entity::{EntityId, EntityKind};
    use crate::policy::{Role, TransitionCommand};
    use alloc::vec;

    fn state() -> PolicyState {
        let u = EntityId::new(EntityKind::User, 1);
        PolicyState::builder()
            .operation("read", 2)
            .role("nurse")
            .permission("read", EntityKind::Patient)
            .user(u)
            .assign(u, "nurse")
            .grant("read", EntityKind::Patient, "nurse")
            .activate(u, "nurse")
            .build()
            .unwrap()
    }

    #[test]
    fn snapshot_roundtrip() {
        let s = state();
        let bytes = PersistenceRecord::snapshot(&s).to_bytes();
        let back = PersistenceRecord::from_bytes(&bytes).unwrap().restore_snapshot().unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn truncated_payload_is_malformed() {
        let bytes = PersistenceRecord::snapshot(&state()).to_bytes();
        for cut in [0, 3, HEADER, bytes.len() - 1] {
            assert!(matches!(PersistenceRecord::from_bytes(&bytes[..cut]), Err(PersistError::MalformedRecord(_))));
        }
    }

    #[test]
    fn payload_corruption_is_detected() {
        let mut bytes = PersistenceRecord::snapshot(&state()).to_bytes();
        bytes[HEADER + 3] ^= 0x10;
        assert_eq!(PersistenceRecord::from_bytes(&bytes), Err(PersistError::ChecksumMismatch));
    }

    #[test]
    fn diff_log_replay_matches_direct_application() {
        let u = EntityId::new(EntityKind::User, 1);
        let cmds = vec![
            AdminCommand::Transition(TransitionCommand::DeactivateRole { user: u, role: Role::new("nurse") }),
            AdminCommand::Transition(TransitionCommand::AddUser(EntityId::new(EntityKind::User, 2))),
        ];
        let mut direct = state();
        for c in &cmds {
            direct.execute(c).unwrap();
        }
        let rec = PersistenceRecord::diff_log(0, &cmds);
        let rec = PersistenceRecord::from_bytes(&rec.to_bytes()).unwrap();
        assert_eq!(rec.replay_onto(state()).unwrap(), direct);
        assert!(matches!(rec.replay_onto(direct.clone()), Err(PersistError::BaseMismatch { .. })));
    }
}
