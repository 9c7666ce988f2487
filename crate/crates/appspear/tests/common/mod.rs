//! Helpers shared by the integration suites.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use appspear::app::App;
use appspear::deploy::{DeploySettings, Deployment};
use appspear::emr::EMR_POLICY;
use appspear::tom::TomError;
use appspear::transport::IsolationConfig;
use appspear_core::{EntityId, OperationId};
use tempfile::TempDir;

pub fn server_exe() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_appspear"))
}

/// A scratch directory holding a bootstrap file with `policy`.
pub struct Scratch {
    pub dir: TempDir,
    pub bootstrap: PathBuf,
}

impl Scratch {
    pub fn new(policy: &str) -> Self {
        let dir = tempfile::tempdir().expect("tempdir");
        let bootstrap = dir.path().join("policy.txt");
        std::fs::write(&bootstrap, policy).expect("write bootstrap");
        Scratch { dir, bootstrap }
    }

    pub fn emr() -> Self {
        Scratch::new(EMR_POLICY)
    }

    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    pub fn settings(&self) -> DeploySettings {
        let mut s = DeploySettings::new(&self.bootstrap);
        s.server_exe = server_exe();
        s
    }

    /// Settings with a data directory of its own under the scratch dir.
    pub fn settings_with_data(&self, name: &str) -> DeploySettings {
        let mut s = self.settings();
        s.data_dir = Some(self.path().join(name));
        s
    }
}

pub fn launch(config: IsolationConfig, settings: &DeploySettings) -> Deployment {
    Deployment::launch(config, settings).unwrap_or_else(|e| panic!("launching {}: {e}", config.label()))
}

/// What a served request amounted to: a verdict or a policy error.
pub fn served(r: Result<(), TomError>) -> Result<Result<bool, ()>, TomError> {
    match r {
        Ok(()) => Ok(Ok(true)),
        Err(TomError::PermissionDenied) => Ok(Ok(false)),
        Err(TomError::Policy(_)) => Ok(Err(())),
        Err(e) => Err(e),
    }
}

/// Sends `⟨entities, op⟩` through the TOM's generic mediation entry.
pub fn ask(app: &App, entities: &[EntityId], op: &OperationId) -> Result<Result<bool, ()>, TomError> {
    served(app.invoke(entities[0], op, &entities[1..]))
}

/// Runs the EMR functional scenario and records every observable outcome.
/// The transcript of a correct deployment does not depend on where its
/// components run.
pub fn emr_transcript(app: &App) -> Vec<String> {
    let mut t = Vec::new();
    macro_rules! step {
        ($label:expr, $e:expr) => {{
            let r = $e;
            t.push(format!("{}: {:?}", $label, r));
            r
        }};
    }

    let alice = step!("login alice", app.login("alice")).unwrap();
    let bob = step!("login bob", app.login("bob")).unwrap();
    let carol = step!("login carol", app.login("carol")).unwrap();
    step!("login mallory", app.login("mallory")).ok();

    step!("person before activation", app.create_person(alice, "Early Bird", "Nowhere 1")).ok();
    step!("activate physician", app.activate_role(alice, "physician")).ok();
    step!("bob activates physician", app.activate_role(bob, "physician")).ok();
    step!("bob activates nurse", app.activate_role(bob, "nurse")).ok();
    step!("carol activates admin", app.activate_role(carol, "admin")).ok();

    let p1 = step!("create person 1", app.create_person(alice, "Ada Lovelace", "Marylebone 12, London")).unwrap();
    let p2 = step!("create person 2", app.create_person(alice, "Carl Gauss", "Bahnhofstr. 3, Braunschweig")).unwrap();
    let x1 = step!("patient 1", app.create_patient(alice, p1, "influenza")).unwrap();
    let x2 = step!("patient 2", app.create_patient(alice, p1, "fracture")).unwrap();
    let x3 = step!("patient 3", app.create_patient(alice, p2, "migraine")).unwrap();
    step!("nurse creates patient", app.create_patient(bob, p2, "none")).ok();

    step!("physician reads diagnosis", app.get_diagnosis(alice, x1)).ok();
    step!("nurse reads diagnosis", app.get_diagnosis(bob, x1)).ok();
    step!("nurse writes diagnosis", app.set_diagnosis(bob, x1, "cured")).ok();
    step!("admin reads diagnosis", app.get_diagnosis(carol, x1)).ok();
    step!("physician updates diagnosis", app.set_diagnosis(alice, x1, "recovering")).ok();
    step!("physician updates again", app.set_diagnosis(alice, x1, "recovered")).ok();
    step!("updated diagnosis", app.get_diagnosis(bob, x1)).ok();
    step!("nurse moves person", app.set_address(bob, p1, "Horsley Towers, Surrey")).ok();
    step!("moved address", app.get_address(alice, p1)).ok();

    step!("delete linked person", app.delete_person(carol, p1)).ok();
    step!("physician deletes person", app.delete_person(alice, p2)).ok();
    step!("physician deletes patient", app.delete_patient(alice, x1)).ok();
    step!("nurse deletes patient", app.delete_patient(bob, x2)).ok();
    step!("admin deletes patient", app.delete_patient(carol, x2)).ok();
    step!("deleted patient", app.get_diagnosis(alice, x2)).ok();
    step!("delete unlinked person", app.delete_person(carol, p1)).ok();
    step!("deleted person", app.get_address(alice, p1)).ok();
    step!("patient of deleted person", app.create_patient(alice, p1, "orphan")).ok();
    step!("surviving patient", app.get_diagnosis(alice, x3)).ok();

    let doc = step!("create document", app.create_document(alice, b"discharge letter")).unwrap();
    step!("nurse reads document", app.read_document(bob, doc)).ok();
    step!("nurse writes document", app.write_document(bob, doc, b"forged")).ok();
    step!("physician writes document", app.write_document(alice, doc, b"discharge letter v2")).ok();
    step!("document body", app.read_document(alice, doc)).ok();
    step!("destroy document", app.destroy_document(alice, doc)).ok();
    step!("destroyed document", app.read_document(alice, doc)).ok();

    step!("noop", app.invoke(alice, &OperationId::new("noop", 1), &[])).ok();
    step!("noop with wrong arity", app.invoke(alice, &OperationId::new("noop", 2), &[alice])).ok();
    step!("unknown operation", app.invoke(alice, &OperationId::new("teleport", 2), &[x3])).ok();

    step!("deactivate physician", app.deactivate_role(alice, "physician")).ok();
    step!("read after deactivation", app.get_diagnosis(alice, x3)).ok();
    step!("logout bob", app.logout(bob)).ok();
    step!("bob after logout", app.get_diagnosis(bob, x3)).ok();
    step!("bob activates after logout", app.activate_role(bob, "nurse")).ok();
    step!("logout bob twice", app.logout(bob)).ok();
    step!("reactivate physician", app.activate_role(alice, "physician")).ok();
    step!("read after reactivation", app.get_diagnosis(alice, x3)).ok();
    step!("unknown patient", app.get_diagnosis(alice, EntityId::new(appspear_core::EntityKind::Patient, 999))).ok();

    let stats = app.stats().expect("stats");
    t.push(format!("mediation: {:?}", stats.mediation));
    t.push(format!("server requests: {}", stats.server.requests));
    t.push(format!("created: {} {} {}", stats.persons_created, stats.patients_created, stats.documents_created));
    t.push(format!("digest: {}", hex::encode(app.digest().expect("digest"))));
    t
}
