//! The TOM side of the application boundary: all object managers of the
//! EMR application behind one call interface, plus its wire codec.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use appspear_core::wire::{Decode, Decoder, Encode, Encoder};
use appspear_core::{
    Ack, AdminCommand, Bootstrap, CacheStats, EntityId, EntityKind, OperationId, Status, WireError, WireMessage,
};

use crate::client::{MediationStats, PolicyClient, PolicyPort, ServerCounters};
use crate::emr::{load_dataset, EmrServices};
use crate::kv::KvStore;
use crate::tom::oswrap::{FileOp, FileTom};
use crate::tom::{authorize, Document, ObjectManager, TomError};
use crate::transport::Responder;

/// Requests the application may make of the TOMs.
#[derive(Clone, Debug, PartialEq)]
pub enum TomCall {
    Login {
        username: String,
    },
    Logout {
        user: EntityId,
    },
    ActivateRole {
        user: EntityId,
        role: String,
    },
    DeactivateRole {
        user: EntityId,
        role: String,
    },
    CreatePerson {
        subject: EntityId,
        name: String,
        address: String,
    },
    DeletePerson {
        subject: EntityId,
        person: EntityId,
    },
    GetAddress {
        subject: EntityId,
        person: EntityId,
    },
    SetAddress {
        subject: EntityId,
        person: EntityId,
        address: String,
    },
    CreatePatient {
        subject: EntityId,
        person: EntityId,
        diagnosis: String,
    },
    DeletePatient {
        subject: EntityId,
        patient: EntityId,
    },
    GetDiagnosis {
        subject: EntityId,
        patient: EntityId,
    },
    SetDiagnosis {
        subject: EntityId,
        patient: EntityId,
        diagnosis: String,
    },
    /// Mediation alone, with no object effect.
    Invoke {
        subject: EntityId,
        op: OperationId,
        targets: Vec<EntityId>,
    },
    CreateDocument {
        subject: EntityId,
        body: Vec<u8>,
    },
    ReadDocument {
        subject: EntityId,
        doc: EntityId,
    },
    WriteDocument {
        subject: EntityId,
        doc: EntityId,
        body: Vec<u8>,
    },
    DestroyDocument {
        subject: EntityId,
        doc: EntityId,
    },
    RegisterPath {
        path: String,
    },
    File {
        subject: EntityId,
        op: FileOp,
        target: EntityId,
        data: Vec<u8>,
    },
    Admin {
        command: AdminCommand,
    },
    Stats,
    LoadDataset {
        subject: EntityId,
        seed: u64,
        n: u64,
    },
    Digest,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TomValue {
    Unit,
    Id(EntityId),
    Text(String),
    Version(u64),
    Bytes(Vec<u8>),
    Pairs(Vec<(EntityId, EntityId)>),
    Ack(Ack),
    Stats(HostStats),
    Digest([u8; 32]),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct HostStats {
    pub mediation: MediationStats,
    pub server: ServerCounters,
    pub cache: Option<CacheStats>,
    pub persons_created: u64,
    pub patients_created: u64,
    pub documents_created: u64,
}

#[derive(Clone, Debug, Default)]
pub struct HostOptions {
    pub cache: bool,
    pub cache_capacity: Option<usize>,
    /// Object store log; in memory when absent.
    pub kv_path: Option<PathBuf>,
    /// Sandbox of the file TOM; file calls fail with `UnknownKind` without.
    pub file_root: Option<PathBuf>,
}

pub struct TomHost {
    policy: Arc<PolicyClient>,
    emr: EmrServices,
    documents: ObjectManager<Document>,
    files: Option<FileTom>,
    kv: Option<Arc<Mutex<KvStore>>>,
    persons_created: AtomicU64,
    patients_created: AtomicU64,
    documents_created: AtomicU64,
}

fn unknown_kind(kind: EntityKind) -> TomError {
    TomError::UnknownKind(kind.name().into())
}

impl TomHost {
    pub fn new(port: Arc<dyn PolicyPort>, bootstrap: &Bootstrap, opts: &HostOptions) -> Result<Self, TomError> {
        let policy = Arc::new(
            PolicyClient::new(port, opts.cache, opts.cache_capacity)
                .map_err(|e| TomError::TransportFailure(e.to_string()))?,
        );
        let kv = match &opts.kv_path {
            Some(p) => Some(Arc::new(Mutex::new(KvStore::open(p).map_err(TomError::storage)?))),
            None => None,
        };
        let files = match &opts.file_root {
            Some(root) => Some(FileTom::new(root, policy.clone())?),
            None => None,
        };
        Ok(TomHost {
            emr: EmrServices::open(policy.clone(), bootstrap, kv.clone())?,
            documents: ObjectManager::open(EntityKind::EmrDocument, policy.clone(), kv.clone())?,
            policy,
            files,
            kv,
            persons_created: AtomicU64::new(0),
            patients_created: AtomicU64::new(0),
            documents_created: AtomicU64::new(0),
        })
    }

    pub fn policy(&self) -> &PolicyClient {
        &self.policy
    }

    pub fn emr(&self) -> &EmrServices {
        &self.emr
    }

    /// Mediates `op` on ⟨subject, targets...⟩ without touching any object.
    pub fn invoke(&self, subject: EntityId, op: &OperationId, targets: &[EntityId]) -> Result<(), TomError> {
        authorize(&self.policy, subject, op, targets)
    }

    fn files(&self) -> Result<&FileTom, TomError> {
        self.files.as_ref().ok_or_else(|| unknown_kind(EntityKind::OsObject))
    }

    pub fn stats(&self) -> Result<HostStats, TomError> {
        Ok(HostStats {
            mediation: self.policy.counter().snapshot(),
            server: self.policy.server_counters().map_err(|e| TomError::TransportFailure(e.to_string()))?,
            cache: self.policy.cache_stats(),
            persons_created: self.persons_created.load(Ordering::SeqCst),
            patients_created: self.patients_created.load(Ordering::SeqCst),
            documents_created: self.documents_created.load(Ordering::SeqCst),
        })
    }

    /// Digest of the object store; in-memory hosts report the empty digest.
    pub fn digest(&self) -> [u8; 32] {
        match &self.kv {
            Some(kv) => kv.lock().unwrap().digest(),
            None => KvStore::in_memory().digest(),
        }
    }

    fn counted(counter: &AtomicU64, r: Result<EntityId, TomError>) -> Result<TomValue, TomError> {
        let id = r?;
        counter.fetch_add(1, Ordering::SeqCst);
        Ok(TomValue::Id(id))
    }

    pub fn dispatch(&self, call: TomCall) -> Result<TomValue, TomError> {
        use TomCall::*;
        let emr = &self.emr;
        Ok(match call {
            Login { username } => TomValue::Id(emr.users.login(&username)?),
            Logout { user } => emr.users.logout(user).map(|_| TomValue::Unit)?,
            ActivateRole { user, role } => emr.users.activate_role(user, &role).map(|_| TomValue::Unit)?,
            DeactivateRole { user, role } => emr.users.deactivate_role(user, &role).map(|_| TomValue::Unit)?,
            CreatePerson { subject, name, address } => {
                Self::counted(&self.persons_created, emr.persons.create_person(subject, &name, &address))?
            }
            DeletePerson { subject, person } => emr.persons.delete_person(subject, person).map(|_| TomValue::Unit)?,
            GetAddress { subject, person } => TomValue::Text(emr.persons.get_address(subject, person)?),
            SetAddress { subject, person, address } => {
                TomValue::Version(emr.persons.set_address(subject, person, &address)?)
            }
            CreatePatient { subject, person, diagnosis } => {
                Self::counted(&self.patients_created, emr.patients.create_patient(subject, person, &diagnosis))?
            }
            DeletePatient { subject, patient } => {
                emr.patients.delete_patient(subject, patient).map(|_| TomValue::Unit)?
            }
            GetDiagnosis { subject, patient } => TomValue::Text(emr.patients.get_diagnosis(subject, patient)?),
            SetDiagnosis { subject, patient, diagnosis } => {
                TomValue::Version(emr.patients.set_diagnosis(subject, patient, &diagnosis)?)
            }
            Invoke { subject, op, targets } => self.invoke(subject, &op, &targets).map(|_| TomValue::Unit)?,
            CreateDocument { subject, body } => {
                Self::counted(&self.documents_created, self.documents.create(subject, Document(body)))?
            }
            ReadDocument { subject, doc } => TomValue::Bytes(self.documents.read(subject, doc)?.body().0.clone()),
            WriteDocument { subject, doc, body } => {
                TomValue::Version(self.documents.write(subject, doc, Document(body))?)
            }
            DestroyDocument { subject, doc } => self.documents.destroy(subject, doc).map(|_| TomValue::Unit)?,
            RegisterPath { path } => TomValue::Id(self.files()?.register_path(Path::new(&path))?),
            File { subject, op, target, data } => match self.files()?.call(subject, op, target, &data)? {
                Some(bytes) => TomValue::Bytes(bytes),
                None => TomValue::Unit,
            },
            Admin { command } => {
                TomValue::Ack(self.policy.admin(command).map_err(|e| TomError::TransportFailure(e.to_string()))?)
            }
            Stats => TomValue::Stats(self.stats()?),
            LoadDataset { subject, seed, n } => {
                let pairs = load_dataset(emr, subject, seed, n as usize)?;
                self.persons_created.fetch_add(pairs.len() as u64, Ordering::SeqCst);
                self.patients_created.fetch_add(pairs.len() as u64, Ordering::SeqCst);
                TomValue::Pairs(pairs)
            }
            Digest => TomValue::Digest(self.digest()),
        })
    }
}

/// Serves a [`TomHost`] behind a transport.
pub struct HostResponder {
    host: Arc<TomHost>,
}

impl HostResponder {
    pub fn new(host: Arc<TomHost>) -> Self {
        HostResponder { host }
    }
}

impl Responder for HostResponder {
    fn respond(&self, msg: WireMessage) -> WireMessage {
        match msg {
            WireMessage::Call { request_id, body } => {
                let result = match TomCall::from_bytes(&body) {
                    Ok(call) => self.host.dispatch(call),
                    Err(e) => Err(TomError::Invalid(format!("undecodable call: {e}"))),
                };
                WireMessage::Reply { request_id, body: encode_result(&result) }
            }
            m @ WireMessage::Echo { .. } => m,
            other => WireMessage::Ack(Ack { request_id: other.request_id(), status: Status::Malformed, epoch: 0 }),
        }
    }
}

pub fn encode_result(r: &Result<TomValue, TomError>) -> Vec<u8> {
    let mut e = Encoder::new();
    match r {
        Ok(v) => e.u8(0).put(v),
        Err(err) => e.u8(1).put(err),
    };
    e.into_bytes()
}

pub fn decode_result(buf: &[u8]) -> Result<Result<TomValue, TomError>, WireError> {
    let mut d = Decoder::new(buf);
    let r = match d.u8()? {
        0 => Ok(d.get()?),
        1 => Err(d.get()?),
        t => return Err(WireError::InvalidTag { what: "result", tag: t as u64 }),
    };
    d.finish()?;
    Ok(r)
}

fn bad(what: &'static str, tag: u8) -> WireError {
    WireError::InvalidTag { what, tag: tag as u64 }
}

impl Encode for TomCall {
    fn encode(&self, e: &mut Encoder) {
        use TomCall::*;
        match self {
            Login { username } => e.u8(0).str(username),
            Logout { user } => e.u8(1).entity(*user),
            ActivateRole { user, role } => e.u8(2).entity(*user).str(role),
            DeactivateRole { user, role } => e.u8(3).entity(*user).str(role),
            CreatePerson { subject, name, address } => e.u8(4).entity(*subject).str(name).str(address),
            DeletePerson { subject, person } => e.u8(5).entity(*subject).entity(*person),
            GetAddress { subject, person } => e.u8(6).entity(*subject).entity(*person),
            SetAddress { subject, person, address } => e.u8(7).entity(*subject).entity(*person).str(address),
            CreatePatient { subject, person, diagnosis } => e.u8(8).entity(*subject).entity(*person).str(diagnosis),
            DeletePatient { subject, patient } => e.u8(9).entity(*subject).entity(*patient),
            GetDiagnosis { subject, patient } => e.u8(10).entity(*subject).entity(*patient),
            SetDiagnosis { subject, patient, diagnosis } => e.u8(11).entity(*subject).entity(*patient).str(diagnosis),
            Invoke { subject, op, targets } => e.u8(12).entity(*subject).put(op).seq(targets.iter()),
            CreateDocument { subject, body } => e.u8(13).entity(*subject).bytes(body),
            ReadDocument { subject, doc } => e.u8(14).entity(*subject).entity(*doc),
            WriteDocument { subject, doc, body } => e.u8(15).entity(*subject).entity(*doc).bytes(body),
            DestroyDocument { subject, doc } => e.u8(16).entity(*subject).entity(*doc),
            RegisterPath { path } => e.u8(17).str(path),
            File { subject, op, target, data } => e.u8(18).entity(*subject).u8(op.code()).entity(*target).bytes(data),
            Admin { command } => e.u8(19).put(command),
            Stats => e.u8(20),
            LoadDataset { subject, seed, n } => e.u8(21).entity(*subject).u64(*seed).u64(*n),
            Digest => e.u8(22),
        };
    }
}

impl Decode for TomCall {
    fn decode(d: &mut Decoder<'_>) -> Result<Self, WireError> {
        use TomCall::*;
        Ok(match d.u8()? {
            0 => Login { username: d.string()? },
            1 => Logout { user: d.entity()? },
            2 => ActivateRole { user: d.entity()?, role: d.string()? },
            3 => DeactivateRole { user: d.entity()?, role: d.string()? },
            4 => CreatePerson { subject: d.entity()?, name: d.string()?, address: d.string()? },
            5 => DeletePerson { subject: d.entity()?, person: d.entity()? },
            6 => GetAddress { subject: d.entity()?, person: d.entity()? },
            7 => SetAddress { subject: d.entity()?, person: d.entity()?, address: d.string()? },
            8 => CreatePatient { subject: d.entity()?, person: d.entity()?, diagnosis: d.string()? },
            9 => DeletePatient { subject: d.entity()?, patient: d.entity()? },
            10 => GetDiagnosis { subject: d.entity()?, patient: d.entity()? },
            11 => SetDiagnosis { subject: d.entity()?, patient: d.entity()?, diagnosis: d.string()? },
            12 => Invoke { subject: d.entity()?, op: d.get()?, targets: d.seq(8)? },
            13 => CreateDocument { subject: d.entity()?, body: d.bytes()?.to_vec() },
            14 => ReadDocument { subject: d.entity()?, doc: d.entity()? },
            15 => WriteDocument { subject: d.entity()?, doc: d.entity()?, body: d.bytes()?.to_vec() },
            16 => DestroyDocument { subject: d.entity()?, doc: d.entity()? },
            17 => RegisterPath { path: d.string()? },
            18 => {
                let subject = d.entity()?;
                let code = d.u8()?;
                let op = FileOp::from_code(code).ok_or(bad("file op", code))?;
                File { subject, op, target: d.entity()?, data: d.bytes()?.to_vec() }
            }
            19 => Admin { command: d.get()? },
            20 => Stats,
            21 => LoadDataset { subject: d.entity()?, seed: d.u64()?, n: d.u64()? },
            22 => Digest,
            t => return Err(bad("call", t)),
        })
    }
}

fn put_ack(e: &mut Encoder, a: &Ack) {
    e.u64(a.request_id).put(&a.status).u64(a.epoch);
}

impl Encode for TomValue {
    fn encode(&self, e: &mut Encoder) {
        match self {
            TomValue::Unit => {
                e.u8(0);
            }
            TomValue::Id(id) => {
                e.u8(1).entity(*id);
            }
            TomValue::Text(s) => {
                e.u8(2).str(s);
            }
            TomValue::Version(v) => {
                e.u8(3).u64(*v);
            }
            TomValue::Bytes(b) => {
                e.u8(4).bytes(b);
            }
            TomValue::Pairs(p) => {
                e.u8(5).len(p.len());
                for (a, b) in p {
                    e.entity(*a).entity(*b);
                }
            }
            TomValue::Ack(a) => {
                e.u8(6);
                put_ack(e, a);
            }
            TomValue::Stats(s) => {
                let m = &s.mediation;
                e.u8(7).u64(m.requests_sent).u64(m.cache_hits).u64(m.operations_executed).u64(m.denied);
                e.u64(s.server.requests).u64(s.server.transitions).u64(s.server.epoch);
                match &s.cache {
                    Some(c) => e
                        .bool(true)
                        .u64(c.hits)
                        .u64(c.misses)
                        .u64(c.inserts)
                        .u64(c.skipped)
                        .u64(c.evicted)
                        .u64(c.invalidated),
                    None => e.bool(false),
                };
                e.u64(s.persons_created).u64(s.patients_created).u64(s.documents_created);
            }
            TomValue::Digest(h) => {
                e.u8(8).bytes(h);
            }
        }
    }
}

impl Decode for TomValue {
    fn decode(d: &mut Decoder<'_>) -> Result<Self, WireError> {
        Ok(match d.u8()? {
            0 => TomValue::Unit,
            1 => TomValue::Id(d.entity()?),
            2 => TomValue::Text(d.string()?),
            3 => TomValue::Version(d.u64()?),
            4 => TomValue::Bytes(d.bytes()?.to_vec()),
            5 => {
                let n = d.len(16)?;
                TomValue::Pairs((0..n).map(|_| Ok((d.entity()?, d.entity()?))).collect::<Result<_, WireError>>()?)
            }
            6 => TomValue::Ack(Ack { request_id: d.u64()?, status: d.get()?, epoch: d.u64()? }),
            7 => {
                let mediation = MediationStats {
                    requests_sent: d.u64()?,
                    cache_hits: d.u64()?,
                    operations_executed: d.u64()?,
                    denied: d.u64()?,
                };
                let server = ServerCounters { requests: d.u64()?, transitions: d.u64()?, epoch: d.u64()? };
                let cache = if d.bool()? {
                    Some(CacheStats {
                        hits: d.u64()?,
                        misses: d.u64()?,
                        inserts: d.u64()?,
                        skipped: d.u64()?,
                        evicted: d.u64()?,
                        invalidated: d.u64()?,
                    })
                } else {
                    None
                };
                TomValue::Stats(HostStats {
                    mediation,
                    server,
                    cache,
                    persons_created: d.u64()?,
                    patients_created: d.u64()?,
                    documents_created: d.u64()?,
                })
            }
            8 => {
                let b = d.bytes()?;
                TomValue::Digest(
                    b.try_into().map_err(|_| WireError::InvalidTag { what: "digest length", tag: b.len() as u64 })?,
                )
            }
            t => return Err(bad("value", t)),
        })
    }
}

impl Encode for TomError {
    fn encode(&self, e: &mut Encoder) {
        use TomError::*;
        match self {
            PermissionDenied => e.u8(0),
            UnknownEntity(id) => e.u8(1).entity(*id),
            UnknownKind(k) => e.u8(2).str(k),
            Policy(s) => e.u8(3).put(s),
            TransportFailure(m) => e.u8(4).str(m),
            DanglingLink(id, n) => e.u8(5).entity(*id).u64(*n as u64),
            Storage(m) => e.u8(6).str(m),
            Io { kind, message } => e.u8(7).str(kind).str(message),
            Invalid(m) => e.u8(8).str(m),
            UnknownUser(u) => e.u8(9).str(u),
            RoleNotAssigned(r) => e.u8(10).str(r),
            NotLoggedIn(id) => e.u8(11).entity(*id),
        };
    }
}

impl Decode for TomError {
    fn decode(d: &mut Decoder<'_>) -> Result<Self, WireError> {
        use TomError::*;
        Ok(match d.u8()? {
            0 => PermissionDenied,
            1 => UnknownEntity(d.entity()?),
            2 => UnknownKind(d.string()?),
            3 => Policy(d.get()?),
            4 => TransportFailure(d.string()?),
            5 => DanglingLink(d.entity()?, d.u64()? as usize),
            6 => Storage(d.string()?),
            7 => Io { kind: d.string()?, message: d.string()? },
            8 => Invalid(d.string()?),
            9 => UnknownUser(d.string()?),
            10 => RoleNotAssigned(d.string()?),
            11 => NotLoggedIn(d.entity()?),
            t => return Err(bad("error", t)),
        })
    }
}
