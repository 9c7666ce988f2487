//! A TOM wrapping files under a sandbox directory as os-object entities.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, Mutex};

use appspear_core::{EntityId, EntityKind, OperationId};

use super::{authorize, IdAllocator, TomError};
use crate::client::PolicyClient;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FileOp {
    Read,
    Write,
    Create,
    Delete,
}

impl FileOp {
    pub const ALL: [FileOp; 4] = [FileOp::Read, FileOp::Write, FileOp::Create, FileOp::Delete];

    pub fn op_name(self) -> &'static str {
        match self {
            FileOp::Read => "file_read",
            FileOp::Write => "file_write",
            FileOp::Create => "file_create",
            FileOp::Delete => "file_delete",
        }
    }

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Self> {
        FileOp::ALL.get(c as usize).copied()
    }
}

pub struct FileTom {
    root: PathBuf,
    policy: Arc<PolicyClient>,
    paths: Mutex<(BTreeMap<EntityId, PathBuf>, IdAllocator)>,
    ops: [OperationId; 4],
}

fn check_relative(rel: &Path) -> Result<(), TomError> {
    let ok = !rel.as_os_str().is_empty() && rel.components().all(|c| matches!(c, Component::Normal(_)));
    if ok {
        Ok(())
    } else {
        Err(TomError::Invalid(format!("path `{}` must be relative and stay inside the sandbox", rel.display())))
    }
}

impl FileTom {
    pub fn new(root: &Path, policy: Arc<PolicyClient>) -> Result<Self, TomError> {
        fs::create_dir_all(root).map_err(TomError::io)?;
        Ok(FileTom {
            root: root.to_owned(),
            policy,
            paths: Mutex::new((BTreeMap::new(), IdAllocator::new(EntityKind::OsObject, None))),
            ops: FileOp::ALL.map(|op| OperationId::new(op.op_name(), 2)),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Binds a sandbox-relative path to a fresh os-object id. The file need
    /// not exist yet.
    pub fn register_path(&self, rel: &Path) -> Result<EntityId, TomError> {
        check_relative(rel)?;
        let mut guard = self.paths.lock().unwrap();
        if let Some((eid, _)) = guard.0.iter().find(|(_, p)| p.as_path() == rel) {
            return Ok(*eid);
        }
        let eid = guard.1.next()?;
        guard.0.insert(eid, rel.to_owned());
        Ok(eid)
    }

    /// Performs `op` on the file bound to `eid` if the policy allows it.
    /// Reads return the content; other operations return nothing.
    pub fn call(&self, subject: EntityId, op: FileOp, eid: EntityId, data: &[u8]) -> Result<Option<Vec<u8>>, TomError> {
        authorize(&self.policy, subject, &self.ops[op as usize], &[eid])?;
        let rel = self.paths.lock().unwrap().0.get(&eid).cloned().ok_or(TomError::UnknownEntity(eid))?;
        let path = self.root.join(rel);
        match op {
            FileOp::Read => fs::read(&path).map(Some).map_err(TomError::io),
            FileOp::Write => {
                let mut f = OpenOptions::new().write(true).truncate(true).open(&path).map_err(TomError::io)?;
                f.write_all(data).map_err(TomError::io)?;
                Ok(None)
            }
            FileOp::Create => {
                let mut f = OpenOptions::new().write(true).create_new(true).open(&path).map_err(TomError::io)?;
                f.write_all(data).map_err(TomError::io)?;
                Ok(None)
            }
            FileOp::Delete => fs::remove_file(&path).map(|_| None).map_err(TomError::io),
        }
    }
}
