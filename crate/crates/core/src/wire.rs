//! Binary wire format spoken between requester and responder proxies.
//!
//! A frame is
//!
//! ```text
//! +-------------------+----------+---------------------------+
//! | length: u32 (LE)  | type: u8 | payload (length - 1 bytes) |
//! +-------------------+----------+---------------------------+
//! ```
//!
//! where `length` counts the type byte and the payload. Payload fields are
//! written in a fixed order with these encodings:
//!
//! * integers: little-endian, fixed width
//! * `bool`: one byte, `0` or `1` (other values are rejected)
//! * `f64`: IEEE-754 bits, little-endian; `-0.0` is written as `0.0`
//! * strings and byte strings: `u32` length, then the bytes (strings UTF-8)
//! * sequences: `u32` element count, then the elements
//! * [`EntityId`]: its raw `u64`
//! * options: one byte `0`/`1`, then the value if present
//! * sets and maps: in ascending key order
//!
//! so equal messages always have byte-identical encodings. Message type
//! codes are listed on [`WireMessage`].

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

use crate::context::{ContextValue, RiskPolicy};
use crate::entity::{EntityId, EntityKind, OperationId};
use crate::policy::{
    AdminCommand, Invalidation, KeyPattern, OperationSpec, Permission, PolicyError, PolicyState, Role,
    TransitionCommand,
};

/// Upper bound on a single frame, length field included.
pub const MAX_FRAME: usize = 16 << 20;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("message truncated")]
    Truncated,
    #[error("unknown message type {0}")]
    UnknownMessageType(u8),
    #[error("invalid tag {tag} for {what}")]
    InvalidTag { what: &'static str, tag: u64 },
    #[error("invalid utf-8 in string field")]
    InvalidUtf8,
    #[error("{0} trailing bytes after message")]
    TrailingBytes(usize),
    #[error("frame of {0} bytes exceeds limit")]
    TooLarge(usize),
    #[error("decoded policy state is inconsistent: {0}")]
    InvalidState(PolicyError),
}

#[derive(Default, Debug, Clone)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Self {
        Encoder::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Encoder { buf: Vec::with_capacity(n) }
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.buf
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn bool(&mut self, v: bool) -> &mut Self {
        self.u8(v as u8)
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        let v = if v == 0.0 { 0.0 } else { v };
        self.u64(v.to_bits())
    }

    pub fn len(&mut self, n: usize) -> &mut Self {
        self.u32(u32::try_from(n).expect("field longer than u32::MAX"))
    }

    pub fn bytes(&mut self, v: &[u8]) -> &mut Self {
        self.len(v.len());
        self.buf.extend_from_slice(v);
        self
    }

    pub fn str(&mut self, v: &str) -> &mut Self {
        self.bytes(v.as_bytes())
    }

    pub fn entity(&mut self, v: EntityId) -> &mut Self {
        self.u64(v.raw())
    }

    pub fn put<T: Encode + ?Sized>(&mut self, v: &T) -> &mut Self {
        v.encode(self);
        self
    }

    pub fn seq<'a, T: Encode + 'a>(&mut self, items: impl ExactSizeIterator<Item = &'a T>) -> &mut Self {
        self.len(items.len());
        for item in items {
            item.encode(self);
        }
        self
    }
}

#[derive(Debug, Clone)]
pub struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Decoder { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn finish(&self) -> Result<(), WireError> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(WireError::TrailingBytes(n)),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        if self.remaining() < n {
            return Err(WireError::Truncated);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn bool(&mut self) -> Result<bool, WireError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            t => Err(WireError::InvalidTag { what: "bool", tag: t as u64 }),
        }
    }

    pub fn f64(&mut self) -> Result<f64, WireError> {
        let bits = self.u64()?;
        // The encoder never emits negative zero.
        if bits == (-0.0f64).to_bits() {
            return Err(WireError::InvalidTag { what: "f64", tag: bits });
        }
        Ok(f64::from_bits(bits))
    }

    /// Reads a length and checks that at least `min_elem` bytes per element
    /// remain, so corrupt counts cannot trigger huge allocations.
    pub fn len(&mut self, min_elem: usize) -> Result<usize, WireError> {
        let n = self.u32()? as usize;
        if min_elem > 0 && n.saturating_mul(min_elem) > self.remaining() {
            return Err(WireError::Truncated);
        }
        Ok(n)
    }

    pub fn bytes(&mut self) -> Result<&'a [u8], WireError> {
        let n = self.len(1)?;
        self.take(n)
    }

    pub fn string(&mut self) -> Result<String, WireError> {
        let b = self.bytes()?;
        core::str::from_utf8(b).map(String::from).map_err(|_| WireError::InvalidUtf8)
    }

    pub fn entity(&mut self) -> Result<EntityId, WireError> {
        let raw = self.u64()?;
        EntityId::from_raw(raw).ok_or(WireError::InvalidTag { what: "entity kind", tag: raw >> 56 })
    }

    pub fn get<T: Decode>(&mut self) -> Result<T, WireError> {
        T::decode(self)
    }

    pub fn seq<T: Decode>(&mut self, min_elem: usize) -> Result<Vec<T>, WireError> {
        let n = self.len(min_elem)?;
        (0..n).map(|_| T::decode(self)).collect()
    }
}

pub trait Encode {
    fn encode(&self, e: &mut Encoder);

    fn to_bytes(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        self.encode(&mut e);
        e.into_bytes()
    }
}

pub trait Decode: Sized {
    fn decode(d: &mut Decoder<'_>) -> Result<Self, WireError>;

    /// Decodes a complete buffer, rejecting trailing bytes.
    fn from_bytes(buf: &[u8]) -> Result<Self, WireError> {
        let mut d = Decoder::new(buf);
        let v = Self::decode(&mut d)?;
        d.finish()?;
        Ok(v)
    }
}

impl Encode for EntityId {
    fn encode(&self, e: &mut Encoder) {
        e.entity(*self);
    }
}

impl Decode for EntityId {
    fn decode(d: &mut Decoder<'_>) -> Result<Self, WireError> {
        d.entity()
    }
}

impl Encode for EntityKind {
    fn encode(&self, e: &mut Encoder) {
        e.u8(self.tag());
    }
}

impl Decode for EntityKind {
    fn decode(d: &mut Decoder<'_>) -> Result<Self, WireError> {
        let t = d.u8()?;
        EntityKind::from_tag(t).ok_or(WireError::InvalidTag { what: "entity kind", tag: t as u64 })
    }
}

impl Encode for OperationId {
    fn encode(&self, e: &mut Encoder) {
        e.str(&self.name).u8(self.arity);
    }
}

impl Decode for OperationId {
    fn decode(d: &mut Decoder<'_>) -> Result<Self, WireError> {
        Ok(OperationId { name: d.string()?, arity: d.u8()? })
    }
}

impl Encode for Role {
    fn encode(&self, e: &mut Encoder) {
        e.str(self.as_str());
    }
}

impl Decode for Role {
    fn decode(d: &mut Decoder<'_>) -> Result<Self, WireError> {
        Ok(Role::new(d.string()?))
    }
}

impl Encode for Permission {
    fn encode(&self, e: &mut Encoder) {
        e.str(&self.op).put(&self.kind);
    }
}

impl Decode for Permission {
    fn decode(d: &mut Decoder<'_>) -> Result<Self, WireError> {
        Ok(Permission { op: d.string()?, kind: d.get()? })
    }
}

impl Encode for ContextValue {
    fn encode(&self, e: &mut Encoder) {
        e.str(&self.name).f64(self.value).u64(self.timestamp);
    }
}

impl Decode for ContextValue {
    fn decode(d: &mut Decoder<'_>) -> Result<Self, WireError> {
        Ok(ContextValue { name: d.string()?, value: d.f64()?, timestamp: d.u64()? })
    }
}

impl Encode for KeyPattern {
    fn encode(&self, e: &mut Encoder) {
        match self {
            KeyPattern::Subject(s) => e.u8(1).entity(*s),
            KeyPattern::All => e.u8(2),
        };
    }
}

impl Decode for KeyPattern {
    fn decode(d: &mut Decoder<'_>) -> Result<Self, WireError> {
        match d.u8()? {
            1 => Ok(KeyPattern::Subject(d.entity()?)),
            2 => Ok(KeyPattern::All),
            t => Err(WireError::InvalidTag { what: "key pattern", tag: t as u64 }),
        }
    }
}

impl Encode for Invalidation {
    fn encode(&self, e: &mut Encoder) {
        e.u64(self.epoch).seq(self.patterns.iter());
    }
}

impl Decode for Invalidation {
    fn decode(d: &mut Decoder<'_>) -> Result<Self, WireError> {
        Ok(Invalidation { epoch: d.u64()?, patterns: d.seq(1)? })
    }
}

impl Encode for TransitionCommand {
    fn encode(&self, e: &mut Encoder) {
        use TransitionCommand::*;
        match self {
            AddUser(u) => e.u8(1).entity(*u),
            RemoveUser(u) => e.u8(2).entity(*u),
            AssignRole { user, role } => e.u8(3).entity(*user).put(role),
            RevokeRole { user, role } => e.u8(4).entity(*user).put(role),
            ActivateRole { user, role } => e.u8(5).entity(*user).put(role),
            DeactivateRole { user, role } => e.u8(6).entity(*user).put(role),
            GrantPermission { permission, role } => e.u8(7).put(permission).put(role),
            RevokePermission { permission, role } => e.u8(8).put(permission).put(role),
        };
    }
}

impl Decode for TransitionCommand {
    fn decode(d: &mut Decoder<'_>) -> Result<Self, WireError> {
        use TransitionCommand::*;
        Ok(match d.u8()? {
            1 => AddUser(d.entity()?),
            2 => RemoveUser(d.entity()?),
            3 => AssignRole { user: d.entity()?, role: d.get()? },
            4 => RevokeRole { user: d.entity()?, role: d.get()? },
            5 => ActivateRole { user: d.entity()?, role: d.get()? },
            6 => DeactivateRole { user: d.entity()?, role: d.get()? },
            7 => GrantPermission { permission: d.get()?, role: d.get()? },
            8 => RevokePermission { permission: d.get()?, role: d.get()? },
            t => return Err(WireError::InvalidTag { what: "transition command", tag: t as u64 }),
        })
    }
}

impl Encode for AdminCommand {
    fn encode(&self, e: &mut Encoder) {
        match self {
            AdminCommand::Transition(t) => e.u8(1).put(t),
            AdminCommand::Install(s) => e.u8(2).put(s),
        };
    }
}

impl Decode for AdminCommand {
    fn decode(d: &mut Decoder<'_>) -> Result<Self, WireError> {
        match d.u8()? {
            1 => Ok(AdminCommand::Transition(d.get()?)),
            2 => Ok(AdminCommand::Install(d.get()?)),
            t => Err(WireError::InvalidTag { what: "admin command", tag: t as u64 }),
        }
    }
}

impl Encode for RiskPolicy {
    fn encode(&self, e: &mut Encoder) {
        e.len(self.weights.len());
        for (name, w) in &self.weights {
            e.str(name).f64(*w);
        }
        e.f64(self.threshold);
    }
}

impl Decode for RiskPolicy {
    fn decode(d: &mut Decoder<'_>) -> Result<Self, WireError> {
        let n = d.len(12)?;
        let mut weights = Vec::with_capacity(n);
        for _ in 0..n {
            weights.push((d.string()?, d.f64()?));
        }
        let threshold = d.f64()?;
        RiskPolicy::new(weights, threshold).map_err(WireError::InvalidState)
    }
}

impl Encode for PolicyState {
    fn encode(&self, e: &mut Encoder) {
        e.u64(self.epoch());
        let ops: Vec<_> = self.operations().collect();
        e.len(ops.len());
        for (name, spec) in ops {
            e.str(name).u8(spec.arity).bool(spec.context);
        }
        let users: Vec<_> = self.users().collect();
        e.seq(users.iter());
        let retired: Vec<_> = self.retired_users().collect();
        e.seq(retired.iter());
        let roles: Vec<_> = self.roles().collect();
        e.len(roles.len());
        roles.iter().for_each(|r| r.encode(e));
        let perms: Vec<_> = self.permissions().collect();
        e.len(perms.len());
        perms.iter().for_each(|p| p.encode(e));
        let ua: Vec<_> = self.user_role_pairs().collect();
        e.len(ua.len());
        for (u, r) in ua {
            e.entity(u).put(r);
        }
        // Permission-role pairs come out grouped by kind then op; sort to
        // keep the encoding independent of the internal index layout.
        let mut pa: Vec<_> = self.permission_role_pairs().collect();
        pa.sort();
        e.len(pa.len());
        for (p, r) in pa {
            e.put(&p).put(r);
        }
        let sessions: Vec<_> = self.session_pairs().collect();
        e.len(sessions.len());
        for (u, r) in sessions {
            e.entity(u).put(r);
        }
        match self.risk() {
            Some(r) => e.u8(1).put(r),
            None => e.u8(0),
        };
    }
}

impl Decode for PolicyState {
    fn decode(d: &mut Decoder<'_>) -> Result<Self, WireError> {
        let epoch = d.u64()?;
        let n = d.len(6)?;
        let mut operations = BTreeMap::new();
        for _ in 0..n {
            let name = d.string()?;
            let spec = OperationSpec { arity: d.u8()?, context: d.bool()? };
            operations.insert(name, spec);
        }
        let users: BTreeSet<EntityId> = d.seq::<EntityId>(8)?.into_iter().collect();
        let retired: BTreeSet<EntityId> = d.seq::<EntityId>(8)?.into_iter().collect();
        let roles: BTreeSet<Role> = d.seq::<Role>(4)?.into_iter().collect();
        let permissions: BTreeSet<Permission> = d.seq::<Permission>(5)?.into_iter().collect();
        let n = d.len(12)?;
        let mut ua = Vec::with_capacity(n);
        for _ in 0..n {
            ua.push((d.entity()?, d.get::<Role>()?));
        }
        let n = d.len(9)?;
        let mut pa = Vec::with_capacity(n);
        for _ in 0..n {
            pa.push((d.get::<Permission>()?, d.get::<Role>()?));
        }
        let n = d.len(12)?;
        let mut sessions = Vec::with_capacity(n);
        for _ in 0..n {
            sessions.push((d.entity()?, d.get::<Role>()?));
        }
        let risk = match d.u8()? {
            0 => None,
            1 => Some(d.get::<RiskPolicy>()?),
            t => return Err(WireError::InvalidTag { what: "option", tag: t as u64 }),
        };
        PolicyState::from_parts(operations, users, retired, roles, permissions, ua, pa, sessions, risk, epoch)
            .map_err(WireError::InvalidState)
    }
}

/// Outcome code carried by decisions and acknowledgements.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Status {
    Ok = 0,
    UnknownEntity = 1,
    ArityMismatch = 2,
    UnknownOperation = 3,
    UnknownContextVariable = 4,
    UnknownReferent = 5,
    InvariantViolation = 6,
    UnknownProvider = 7,
    StaleContext = 8,
    Malformed = 9,
    Unavailable = 10,
    Internal = 11,
}

impl Status {
    pub fn from_code(code: u8) -> Option<Self> {
        use Status::*;
        Some(match code {
            0 => Ok,
            1 => UnknownEntity,
            2 => ArityMismatch,
            3 => UnknownOperation,
            4 => UnknownContextVariable,
            5 => UnknownReferent,
            6 => InvariantViolation,
            7 => UnknownProvider,
            8 => StaleContext,
            9 => Malformed,
            10 => Unavailable,
            11 => Internal,
            _ => return None,
        })
    }

    pub fn is_ok(self) -> bool {
        self == Status::Ok
    }
}

impl From<&PolicyError> for Status {
    fn from(e: &PolicyError) -> Self {
        match e {
            PolicyError::UnknownEntity(_) => Status::UnknownEntity,
            PolicyError::ArityMismatch { .. } => Status::ArityMismatch,
            PolicyError::UnknownOperation(_) => Status::UnknownOperation,
            PolicyError::UnknownContextVariable(_) => Status::UnknownContextVariable,
            PolicyError::UnknownReferent(_) => Status::UnknownReferent,
            PolicyError::InvariantViolation(_) => Status::InvariantViolation,
            PolicyError::MissingRiskPolicy(_) => Status::Internal,
        }
    }
}

impl Encode for Status {
    fn encode(&self, e: &mut Encoder) {
        e.u8(*self as u8);
    }
}

impl Decode for Status {
    fn decode(d: &mut Decoder<'_>) -> Result<Self, WireError> {
        let c = d.u8()?;
        Status::from_code(c).ok_or(WireError::InvalidTag { what: "status", tag: c as u64 })
    }
}

/// TOM → TPS policy query.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AccessRequest {
    pub request_id: u64,
    pub entities: Vec<EntityId>,
    pub op: OperationId,
    pub contexts_required: bool,
}

/// TPS → TOM answer to an [`AccessRequest`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AccessDecision {
    pub request_id: u64,
    pub verdict: bool,
    pub epoch: u64,
    pub cacheable: bool,
    pub status: Status,
}

impl AccessDecision {
    /// A denial carrying the reason. Never cacheable.
    pub fn deny(request_id: u64, epoch: u64, status: Status) -> Self {
        AccessDecision { request_id, verdict: false, epoch, cacheable: false, status }
    }
}

/// Generic acknowledgement for admin commands, context pushes and
/// invalidation notices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ack {
    pub request_id: u64,
    pub status: Status,
    pub epoch: u64,
}

/// Audit record of one access decision.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecisionEvent {
    pub request_id: u64,
    pub entities: Vec<EntityId>,
    pub op: String,
    pub verdict: bool,
    pub status: Status,
    pub epoch: u64,
    pub timestamp: u64,
}

impl Encode for DecisionEvent {
    fn encode(&self, e: &mut Encoder) {
        e.u64(self.request_id)
            .seq(self.entities.iter())
            .str(&self.op)
            .bool(self.verdict)
            .put(&self.status)
            .u64(self.epoch)
            .u64(self.timestamp);
    }
}

impl Decode for DecisionEvent {
    fn decode(d: &mut Decoder<'_>) -> Result<Self, WireError> {
        Ok(DecisionEvent {
            request_id: d.u64()?,
            entities: d.seq(8)?,
            op: d.string()?,
            verdict: d.bool()?,
            status: d.get()?,
            epoch: d.u64()?,
            timestamp: d.u64()?,
        })
    }
}

/// Every message that crosses a proxy boundary. The discriminant in
/// brackets is the frame's type byte.
#[derive(Clone, Debug, PartialEq)]
pub enum WireMessage {
    /// `[1]` TOM → TPS access request.
    Request(AccessRequest),
    /// `[2]` TPS → TOM decision.
    Decision(AccessDecision),
    /// `[3]` administrative transition or state installation.
    Admin { request_id: u64, command: AdminCommand },
    /// `[4]` TPS → TOM cache invalidation notice, acknowledged with an
    /// [`Ack`] whose `request_id` is the notice epoch.
    Invalidation(Invalidation),
    /// `[5]` TEP → TPS context update.
    ContextPush { request_id: u64, provider: String, value: ContextValue },
    /// `[6]` TPS → TEP decision event.
    Event(DecisionEvent),
    /// `[7]` acknowledgement.
    Ack(Ack),
    /// `[8]` application → TOM call; the body is opaque to this crate.
    Call { request_id: u64, body: Vec<u8> },
    /// `[9]` TOM → application reply.
    Reply { request_id: u64, body: Vec<u8> },
    /// `[10]` echo probe, answered with an identical message.
    Echo { request_id: u64, body: Vec<u8> },
    /// `[11]` registers the connection as an invalidation subscriber.
    Subscribe { request_id: u64 },
    /// `[12]` asks the TPS for its counters.
    StatsQuery { request_id: u64 },
    /// `[13]` TPS counters.
    Stats { request_id: u64, requests: u64, transitions: u64, epoch: u64 },
}

impl WireMessage {
    pub fn msg_type(&self) -> u8 {
        use WireMessage::*;
        match self {
            Request(_) => 1,
            Decision(_) => 2,
            Admin { .. } => 3,
            Invalidation(_) => 4,
            ContextPush { .. } => 5,
            Event(_) => 6,
            Ack(_) => 7,
            Call { .. } => 8,
            Reply { .. } => 9,
            Echo { .. } => 10,
            Subscribe { .. } => 11,
            StatsQuery { .. } => 12,
            Stats { .. } => 13,
        }
    }

    /// Correlation id; invalidation notices correlate by epoch.
    pub fn request_id(&self) -> u64 {
        use WireMessage::*;
        match self {
            Request(r) => r.request_id,
            Decision(d) => d.request_id,
            Invalidation(i) => i.epoch,
            Event(e) => e.request_id,
            Ack(a) => a.request_id,
            Admin { request_id, .. }
            | ContextPush { request_id, .. }
            | Call { request_id, .. }
            | Reply { request_id, .. }
            | Echo { request_id, .. }
            | Subscribe { request_id }
            | StatsQuery { request_id }
            | Stats { request_id, .. } => *request_id,
        }
    }

    pub fn encode_payload(&self, e: &mut Encoder) {
        use WireMessage::*;
        match self {
            Request(r) => {
                e.u64(r.request_id).seq(r.entities.iter()).put(&r.op).bool(r.contexts_required);
            }
            Decision(d) => {
                e.u64(d.request_id).bool(d.verdict).u64(d.epoch).bool(d.cacheable).put(&d.status);
            }
            Admin { request_id, command } => {
                e.u64(*request_id).put(command);
            }
            Invalidation(i) => {
                e.put(i);
            }
            ContextPush { request_id, provider, value } => {
                e.u64(*request_id).str(provider).put(value);
            }
            Event(ev) => {
                e.put(ev);
            }
            Ack(a) => {
                e.u64(a.request_id).put(&a.status).u64(a.epoch);
            }
            Call { request_id, body } | Reply { request_id, body } | Echo { request_id, body } => {
                e.u64(*request_id).bytes(body);
            }
            Subscribe { request_id } | StatsQuery { request_id } => {
                e.u64(*request_id);
            }
            Stats { request_id, requests, transitions, epoch } => {
                e.u64(*request_id).u64(*requests).u64(*transitions).u64(*epoch);
            }
        }
    }

    pub fn decode_payload(msg_type: u8, payload: &[u8]) -> Result<Self, WireError> {
        use WireMessage::*;
        let d = &mut Decoder::new(payload);
        let msg = match msg_type {
            1 => Request(AccessRequest {
                request_id: d.u64()?,
                entities: d.seq(8)?,
                op: d.get()?,
                contexts_required: d.bool()?,
            }),
            2 => Decision(AccessDecision {
                request_id: d.u64()?,
                verdict: d.bool()?,
                epoch: d.u64()?,
                cacheable: d.bool()?,
                status: d.get()?,
            }),
            3 => Admin { request_id: d.u64()?, command: d.get()? },
            4 => Invalidation(d.get()?),
            5 => ContextPush { request_id: d.u64()?, provider: d.string()?, value: d.get()? },
            6 => Event(d.get()?),
            7 => Ack(crate::wire::Ack { request_id: d.u64()?, status: d.get()?, epoch: d.u64()? }),
            8 => Call { request_id: d.u64()?, body: d.bytes()?.to_vec() },
            9 => Reply { request_id: d.u64()?, body: d.bytes()?.to_vec() },
            10 => Echo { request_id: d.u64()?, body: d.bytes()?.to_vec() },
            11 => Subscribe { request_id: d.u64()? },
            12 => StatsQuery { request_id: d.u64()? },
            13 => Stats { request_id: d.u64()?, requests: d.u64()?, transitions: d.u64()?, epoch: d.u64()? },
            t => return Err(WireError::UnknownMessageType(t)),
        };
        d.finish()?;
        Ok(msg)
    }

    /// Full frame: length prefix, type byte, payload.
    pub fn encode_frame(&self) -> Vec<u8> {
        let mut e = Encoder::with_capacity(64);
        e.u32(0).u8(self.msg_type());
        self.encode_payload(&mut e);
        let mut buf = e.into_bytes();
        let len = (buf.len() - 4) as u32;
        buf[..4].copy_from_slice(&len.to_le_bytes());
        buf
    }

    /// Parses one frame from the front of `buf`, returning the message and
    /// the number of bytes consumed.
    pub fn decode_frame(buf: &[u8]) -> Result<(Self, usize), WireError> {
        let len = frame_len(buf)?;
        if buf.len() < 4 + len {
            return Err(WireError::Truncated);
        }
        let msg = WireMessage::decode_payload(buf[4], &buf[5..4 + len])?;
        Ok((msg, 4 + len))
    }
}

/// Reads and checks the length prefix of a frame.
pub fn frame_len(buf: &[u8]) -> Result<usize, WireError> {
    if buf.len() < 4 {
        return Err(WireError::Truncated);
    }
    let len = u32::from_le_bytes(buf[..4].try_into().unwrap()) as usize;
    if len == 0 {
        return Err(WireError::Truncated);
    }
    if len + 4 > MAX_FRAME {
        return Err(WireError::TooLarge(len + 4));
    }
    Ok(len)
}
