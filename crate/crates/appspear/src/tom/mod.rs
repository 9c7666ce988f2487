//! Trusted object managers.
//!
//! An [`ObjectManager`] owns every object of one kind. Its table is private:
//! the only way to touch an object is [`ObjectManager::mediate`], which asks
//! the policy once and runs the action only on an allow. Entity ids come
//! from a per-kind counter that is never rewound, so an id is bound to one
//! object for good.

pub mod oswrap;

use std::collections::BTreeMap;
use std::io;
use std::sync::{Arc, Mutex};

use appspear_core::wire::{Decode, Decoder, Encode, Encoder};
use appspear_core::{EntityId, EntityKind, OperationId, Status};
use smallvec::SmallVec;
use thiserror::Error;

use crate::client::PolicyClient;
use crate::kv::KvStore;

/// Ids reserved per persisted high-water mark update.
const ID_BLOCK: u64 = 1024;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TomError {
    #[error("permission denied")]
    PermissionDenied,
    #[error("unknown entity {0}")]
    UnknownEntity(EntityId),
    #[error("no object manager for kind `{0}`")]
    UnknownKind(String),
    #[error("policy error: {0:?}")]
    Policy(Status),
    #[error("transport failure: {0}")]
    TransportFailure(String),
    #[error("{0} is still referenced by {1} record(s)")]
    DanglingLink(EntityId, usize),
    #[error("storage failure: {0}")]
    Storage(String),
    #[error("I/O error ({kind}): {message}")]
    Io { kind: String, message: String },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("unknown user `{0}`")]
    UnknownUser(String),
    #[error("role `{0}` is not assigned")]
    RoleNotAssigned(String),
    #[error("{0} is not logged in")]
    NotLoggedIn(EntityId),
}

impl TomError {
    pub(crate) fn storage(e: io::Error) -> Self {
        TomError::Storage(e.to_string())
    }

    pub(crate) fn io(e: io::Error) -> Self {
        TomError::Io { kind: format!("{:?}", e.kind()), message: e.to_string() }
    }
}

/// Payload of a managed object.
pub trait ObjectBody: Encode + Decode + Clone + Send + Sync + 'static {}

impl<T: Encode + Decode + Clone + Send + Sync + 'static> ObjectBody for T {}

#[derive(Clone, Debug, PartialEq)]
pub struct ManagedObject<T> {
    eid: EntityId,
    body: T,
    version: u64,
}

impl<T> ManagedObject<T> {
    pub fn eid(&self) -> EntityId {
        self.eid
    }

    pub fn body(&self) -> &T {
        &self.body
    }

    /// Number of writes since creation.
    pub fn version(&self) -> u64 {
        self.version
    }
}

/// The four generic operations, each taking ⟨subject, object⟩. Creation
/// targets the kind's class entity.
#[derive(Clone, Debug)]
pub struct CrudOps {
    pub create: OperationId,
    pub read: OperationId,
    pub write: OperationId,
    pub destroy: OperationId,
}

impl Default for CrudOps {
    fn default() -> Self {
        CrudOps {
            create: OperationId::new("create", 2),
            read: OperationId::new("read", 2),
            write: OperationId::new("write", 2),
            destroy: OperationId::new("destroy", 2),
        }
    }
}

/// Hands out fresh ids of one kind. With a store, the high-water mark is
/// persisted ahead of use so a restart never reissues an id.
pub(crate) struct IdAllocator {
    kind: EntityKind,
    next: u64,
    reserved: u64,
    kv: Option<Arc<Mutex<KvStore>>>,
}

fn hwm_key(kind: EntityKind) -> [u8; 5] {
    [b'h', b'w', b'm', b'/', kind.tag()]
}

impl IdAllocator {
    pub(crate) fn new(kind: EntityKind, kv: Option<Arc<Mutex<KvStore>>>) -> Self {
        let hwm = kv
            .as_ref()
            .and_then(|kv| {
                kv.lock().unwrap().get(&hwm_key(kind)).map(|v| u64::from_le_bytes(v.try_into().unwrap_or([0; 8])))
            })
            .unwrap_or(0)
            .max(1);
        IdAllocator { kind, next: hwm, reserved: hwm, kv }
    }

    /// Makes sure ids at or below `serial` are never handed out.
    pub(crate) fn skip_past(&mut self, serial: u64) {
        self.next = self.next.max(serial + 1);
        self.reserved = self.reserved.max(self.next);
    }

    pub(crate) fn next(&mut self) -> Result<EntityId, TomError> {
        if self.next > EntityId::MAX_SERIAL {
            return Err(TomError::Storage(format!("{} id space exhausted", self.kind)));
        }
        if self.next >= self.reserved {
            let until = self.next + ID_BLOCK;
            if let Some(kv) = &self.kv {
                kv.lock().unwrap().put(&hwm_key(self.kind), &until.to_le_bytes()).map_err(TomError::storage)?;
            }
            self.reserved = until;
        }
        let id = EntityId::new(self.kind, self.next);
        self.next += 1;
        Ok(id)
    }
}

fn object_key(eid: EntityId) -> [u8; 12] {
    let mut k = [0u8; 12];
    k[..4].copy_from_slice(b"obj/");
    k[4..].copy_from_slice(&eid.raw().to_be_bytes());
    k
}

fn kind_prefix(kind: EntityKind) -> [u8; 5] {
    [b'o', b'b', b'j', b'/', kind.tag()]
}

/// Objects of one kind. Reachable only inside a mediated action.
pub struct Table<T> {
    kind: EntityKind,
    objects: BTreeMap<EntityId, ManagedObject<T>>,
    ids: IdAllocator,
    kv: Option<Arc<Mutex<KvStore>>>,
}

impl<T: ObjectBody> Table<T> {
    fn open(kind: EntityKind, kv: Option<Arc<Mutex<KvStore>>>) -> Result<Self, TomError> {
        let mut objects = BTreeMap::new();
        let mut ids = IdAllocator::new(kind, kv.clone());
        if let Some(kv) = &kv {
            let kv = kv.lock().unwrap();
            for (k, v) in kv.scan_prefix(&kind_prefix(kind)) {
                let corrupt = || TomError::Storage(format!("corrupt object record {}", hex::encode(k)));
                let raw = u64::from_be_bytes(k[4..].try_into().map_err(|_| corrupt())?);
                let eid = EntityId::from_raw(raw).ok_or_else(corrupt)?;
                let mut d = Decoder::new(v);
                let version = d.u64().map_err(|_| corrupt())?;
                let body = T::decode(&mut d).map_err(|_| corrupt())?;
                d.finish().map_err(|_| corrupt())?;
                ids.skip_past(eid.serial());
                objects.insert(eid, ManagedObject { eid, body, version });
            }
        }
        Ok(Table { kind, objects, ids, kv })
    }

    fn persist(&self, obj: &ManagedObject<T>) -> Result<(), TomError> {
        let Some(kv) = &self.kv else { return Ok(()) };
        let mut e = Encoder::new();
        e.u64(obj.version).put(&obj.body);
        kv.lock().unwrap().put(&object_key(obj.eid), e.as_bytes()).map_err(TomError::storage)
    }

    pub fn kind(&self) -> EntityKind {
        self.kind
    }

    pub fn get(&self, eid: EntityId) -> Result<&ManagedObject<T>, TomError> {
        self.objects.get(&eid).ok_or(TomError::UnknownEntity(eid))
    }

    pub fn contains(&self, eid: EntityId) -> bool {
        self.objects.contains_key(&eid)
    }

    /// Stores a new object under a fresh id.
    pub fn insert(&mut self, body: T) -> Result<EntityId, TomError> {
        let eid = self.ids.next()?;
        let obj = ManagedObject { eid, body, version: 0 };
        self.persist(&obj)?;
        self.objects.insert(eid, obj);
        Ok(eid)
    }

    /// Replaces the body and returns the new version.
    pub fn update(&mut self, eid: EntityId, body: T) -> Result<u64, TomError> {
        self.update_with(eid, |b| *b = body)
    }

    pub fn update_with(&mut self, eid: EntityId, f: impl FnOnce(&mut T)) -> Result<u64, TomError> {
        let obj = self.objects.get(&eid).ok_or(TomError::UnknownEntity(eid))?;
        let mut next = obj.clone();
        f(&mut next.body);
        next.version += 1;
        self.persist(&next)?;
        let version = next.version;
        self.objects.insert(eid, next);
        Ok(version)
    }

    pub fn remove(&mut self, eid: EntityId) -> Result<ManagedObject<T>, TomError> {
        if !self.objects.contains_key(&eid) {
            return Err(TomError::UnknownEntity(eid));
        }
        if let Some(kv) = &self.kv {
            kv.lock().unwrap().delete(&object_key(eid)).map_err(TomError::storage)?;
        }
        Ok(self.objects.remove(&eid).expect("checked above"))
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &ManagedObject<T>> {
        self.objects.values()
    }
}

/// Asks the policy about ⟨subject, targets...⟩ and `op`. Counts the
/// consultation and maps every non-allow outcome to an error.
pub(crate) fn authorize(
    policy: &PolicyClient,
    subject: EntityId,
    op: &OperationId,
    targets: &[EntityId],
) -> Result<(), TomError> {
    let mut entities: SmallVec<[EntityId; 4]> = SmallVec::new();
    entities.push(subject);
    entities.extend_from_slice(targets);
    let decision = policy.check(&entities, op).map_err(|e| {
        policy.counter().refused();
        TomError::TransportFailure(e.to_string())
    })?;
    if !decision.status.is_ok() {
        policy.counter().refused();
        return Err(TomError::Policy(decision.status));
    }
    if !decision.verdict {
        policy.counter().refused();
        return Err(TomError::PermissionDenied);
    }
    Ok(())
}

/// The TOM for one object kind.
pub struct ObjectManager<T> {
    kind: EntityKind,
    policy: Arc<PolicyClient>,
    table: Mutex<Table<T>>,
    ops: CrudOps,
}

impl<T: ObjectBody> ObjectManager<T> {
    /// Loads the kind's objects from `kv`, if given, and persists every
    /// later change there.
    pub fn open(
        kind: EntityKind,
        policy: Arc<PolicyClient>,
        kv: Option<Arc<Mutex<KvStore>>>,
    ) -> Result<Self, TomError> {
        if kind == EntityKind::User {
            return Err(TomError::UnknownKind(kind.name().into()));
        }
        Ok(ObjectManager { kind, policy, table: Mutex::new(Table::open(kind, kv)?), ops: CrudOps::default() })
    }

    pub fn kind(&self) -> EntityKind {
        self.kind
    }

    pub fn ops(&self) -> &CrudOps {
        &self.ops
    }

    /// Runs `action` on the object table iff the policy allows `subject` to
    /// perform `op` on `targets`. Exactly one policy consultation per call;
    /// on any failure to obtain an allow the action does not run.
    pub fn mediate<R>(
        &self,
        subject: EntityId,
        op: &OperationId,
        targets: &[EntityId],
        action: impl FnOnce(&mut Table<T>) -> Result<R, TomError>,
    ) -> Result<R, TomError> {
        authorize(&self.policy, subject, op, targets)?;
        let mut table = self.table.lock().unwrap();
        action(&mut table)
    }

    pub fn create(&self, subject: EntityId, body: T) -> Result<EntityId, TomError> {
        self.mediate(subject, &self.ops.create, &[EntityId::class(self.kind)], |t| t.insert(body))
    }

    pub fn read(&self, subject: EntityId, eid: EntityId) -> Result<ManagedObject<T>, TomError> {
        self.mediate(subject, &self.ops.read, &[eid], |t| t.get(eid).cloned())
    }

    /// Replaces the body; returns the new version.
    pub fn write(&self, subject: EntityId, eid: EntityId, body: T) -> Result<u64, TomError> {
        self.mediate(subject, &self.ops.write, &[eid], |t| t.update(eid, body))
    }

    pub fn destroy(&self, subject: EntityId, eid: EntityId) -> Result<(), TomError> {
        self.mediate(subject, &self.ops.destroy, &[eid], |t| t.remove(eid).map(drop))
    }

    /// Unmediated access for checks inside the trusted component, such as
    /// referential integrity.
    pub(crate) fn inspect<R>(&self, f: impl FnOnce(&Table<T>) -> R) -> R {
        f(&self.table.lock().unwrap())
    }
}

/// Opaque document body for the generic document manager.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Document(pub Vec<u8>);

impl Encode for Document {
    fn encode(&self, e: &mut Encoder) {
        e.bytes(&self.0);
    }
}

impl Decode for Document {
    fn decode(d: &mut Decoder<'_>) -> Result<Self, appspear_core::WireError> {
        Ok(Document(d.bytes()?.to_vec()))
    }
}
