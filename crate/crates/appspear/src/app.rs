//! The untrusted application's handle on the TOMs.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use appspear_core::wire::Encode;
use appspear_core::{Ack, AdminCommand, EntityId, OperationId, WireMessage};

use crate::host::{decode_result, HostStats, TomCall, TomHost, TomValue};
use crate::tom::oswrap::FileOp;
use crate::tom::TomError;
use crate::transport::Channel;

enum Target {
    /// TOMs in the same address space.
    Direct(Arc<TomHost>),
    /// TOMs behind a proxy channel.
    Remote(Arc<dyn Channel>),
}

pub struct App {
    target: Target,
    next_id: AtomicU64,
}

fn unexpected(v: TomValue) -> TomError {
    TomError::Invalid(format!("unexpected reply {v:?}"))
}

impl App {
    pub fn direct(host: Arc<TomHost>) -> Self {
        App { target: Target::Direct(host), next_id: AtomicU64::new(1) }
    }

    pub fn remote(channel: Arc<dyn Channel>) -> Self {
        App { target: Target::Remote(channel), next_id: AtomicU64::new(1) }
    }

    /// The in-process host, when there is one.
    pub fn host(&self) -> Option<&Arc<TomHost>> {
        match &self.target {
            Target::Direct(h) => Some(h),
            Target::Remote(_) => None,
        }
    }

    pub fn call(&self, call: TomCall) -> Result<TomValue, TomError> {
        match &self.target {
            Target::Direct(host) => host.dispatch(call),
            Target::Remote(channel) => {
                let request_id = self.next_id.fetch_add(1, Ordering::Relaxed);
                let msg = WireMessage::Call { request_id, body: call.to_bytes() };
                match channel.call(msg).map_err(|e| TomError::TransportFailure(e.to_string()))? {
                    WireMessage::Reply { body, .. } => {
                        decode_result(&body).map_err(|e| TomError::TransportFailure(format!("bad reply: {e}")))?
                    }
                    other => Err(TomError::TransportFailure(format!("unexpected message {other:?}"))),
                }
            }
        }
    }

    /// Mediation without object effect: `Ok` iff allowed.
    pub fn invoke(&self, subject: EntityId, op: &OperationId, targets: &[EntityId]) -> Result<(), TomError> {
        match &self.target {
            Target::Direct(host) => host.invoke(subject, op, targets),
            Target::Remote(_) => {
                self.call(TomCall::Invoke { subject, op: op.clone(), targets: targets.to_vec() }).map(drop)
            }
        }
    }

    fn id(&self, call: TomCall) -> Result<EntityId, TomError> {
        match self.call(call)? {
            TomValue::Id(id) => Ok(id),
            v => Err(unexpected(v)),
        }
    }

    fn unit(&self, call: TomCall) -> Result<(), TomError> {
        match self.call(call)? {
            TomValue::Unit => Ok(()),
            v => Err(unexpected(v)),
        }
    }

    fn text(&self, call: TomCall) -> Result<String, TomError> {
        match self.call(call)? {
            TomValue::Text(s) => Ok(s),
            v => Err(unexpected(v)),
        }
    }

    fn version(&self, call: TomCall) -> Result<u64, TomError> {
        match self.call(call)? {
            TomValue::Version(v) => Ok(v),
            v => Err(unexpected(v)),
        }
    }

    pub fn login(&self, username: &str) -> Result<EntityId, TomError> {
        self.id(TomCall::Login { username: username.into() })
    }

    pub fn logout(&self, user: EntityId) -> Result<(), TomError> {
        self.unit(TomCall::Logout { user })
    }

    pub fn activate_role(&self, user: EntityId, role: &str) -> Result<(), TomError> {
        self.unit(TomCall::ActivateRole { user, role: role.into() })
    }

    pub fn deactivate_role(&self, user: EntityId, role: &str) -> Result<(), TomError> {
        self.unit(TomCall::DeactivateRole { user, role: role.into() })
    }

    pub fn create_person(&self, subject: EntityId, name: &str, address: &str) -> Result<EntityId, TomError> {
        self.id(TomCall::CreatePerson { subject, name: name.into(), address: address.into() })
    }

    pub fn delete_person(&self, subject: EntityId, person: EntityId) -> Result<(), TomError> {
        self.unit(TomCall::DeletePerson { subject, person })
    }

    pub fn get_address(&self, subject: EntityId, person: EntityId) -> Result<String, TomError> {
        self.text(TomCall::GetAddress { subject, person })
    }

    pub fn set_address(&self, subject: EntityId, person: EntityId, address: &str) -> Result<u64, TomError> {
        self.version(TomCall::SetAddress { subject, person, address: address.into() })
    }

    pub fn create_patient(&self, subject: EntityId, person: EntityId, diagnosis: &str) -> Result<EntityId, TomError> {
        self.id(TomCall::CreatePatient { subject, person, diagnosis: diagnosis.into() })
    }

    pub fn delete_patient(&self, subject: EntityId, patient: EntityId) -> Result<(), TomError> {
        self.unit(TomCall::DeletePatient { subject, patient })
    }

    pub fn get_diagnosis(&self, subject: EntityId, patient: EntityId) -> Result<String, TomError> {
        self.text(TomCall::GetDiagnosis { subject, patient })
    }

    pub fn set_diagnosis(&self, subject: EntityId, patient: EntityId, diagnosis: &str) -> Result<u64, TomError> {
        self.version(TomCall::SetDiagnosis { subject, patient, diagnosis: diagnosis.into() })
    }

    pub fn create_document(&self, subject: EntityId, body: &[u8]) -> Result<EntityId, TomError> {
        self.id(TomCall::CreateDocument { subject, body: body.to_vec() })
    }

    pub fn read_document(&self, subject: EntityId, doc: EntityId) -> Result<Vec<u8>, TomError> {
        match self.call(TomCall::ReadDocument { subject, doc })? {
            TomValue::Bytes(b) => Ok(b),
            v => Err(unexpected(v)),
        }
    }

    pub fn write_document(&self, subject: EntityId, doc: EntityId, body: &[u8]) -> Result<u64, TomError> {
        self.version(TomCall::WriteDocument { subject, doc, body: body.to_vec() })
    }

    pub fn destroy_document(&self, subject: EntityId, doc: EntityId) -> Result<(), TomError> {
        self.unit(TomCall::DestroyDocument { subject, doc })
    }

    pub fn register_path(&self, path: &str) -> Result<EntityId, TomError> {
        self.id(TomCall::RegisterPath { path: path.into() })
    }

    /// Reads return the content; other operations return `None`.
    pub fn file(
        &self,
        subject: EntityId,
        op: FileOp,
        target: EntityId,
        data: &[u8],
    ) -> Result<Option<Vec<u8>>, TomError> {
        match self.call(TomCall::File { subject, op, target, data: data.to_vec() })? {
            TomValue::Bytes(b) => Ok(Some(b)),
            TomValue::Unit => Ok(None),
            v => Err(unexpected(v)),
        }
    }

    pub fn admin(&self, command: AdminCommand) -> Result<Ack, TomError> {
        match self.call(TomCall::Admin { command })? {
            TomValue::Ack(a) => Ok(a),
            v => Err(unexpected(v)),
        }
    }

    pub fn stats(&self) -> Result<HostStats, TomError> {
        match self.call(TomCall::Stats)? {
            TomValue::Stats(s) => Ok(s),
            v => Err(unexpected(v)),
        }
    }

    pub fn load_dataset(&self, subject: EntityId, seed: u64, n: usize) -> Result<Vec<(EntityId, EntityId)>, TomError> {
        match self.call(TomCall::LoadDataset { subject, seed, n: n as u64 })? {
            TomValue::Pairs(p) => Ok(p),
            v => Err(unexpected(v)),
        }
    }

    pub fn digest(&self) -> Result<[u8; 32], TomError> {
        match self.call(TomCall::Digest)? {
            TomValue::Digest(d) => Ok(d),
            v => Err(unexpected(v)),
        }
    }
}
