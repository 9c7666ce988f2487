mod common;

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;

use appspear::app::App;
use appspear::client::LocalPort;
use appspear::emr::dataset::generate;
use appspear::emr::EMR_POLICY;
use appspear::host::{HostOptions, TomHost};
use appspear::tom::oswrap::FileOp;
use appspear::tom::TomError;
use appspear::tps::PolicyServer;
use appspear::transport::IsolationConfig;
use appspear_core::{parse_bootstrap, EntityId, EntityKind, Status};
use common::{launch, Scratch};

fn host(opts: HostOptions) -> App {
    let boot = parse_bootstrap(EMR_POLICY).unwrap();
    let server = PolicyServer::new(boot.state.clone()).shared();
    App::direct(Arc::new(TomHost::new(Arc::new(LocalPort::new(server)), &boot, &opts).unwrap()))
}

fn session(app: &App, user: &str, role: &str) -> EntityId {
    let u = app.login(user).unwrap();
    app.activate_role(u, role).unwrap();
    u
}

#[test]
fn objects_get_unique_ids_of_their_kind() {
    let app = host(HostOptions::default());
    let alice = session(&app, "alice", "physician");
    let mut seen = BTreeSet::new();
    for i in 0..200 {
        let p = app.create_person(alice, &format!("p{i}"), "somewhere").unwrap();
        let x = app.create_patient(alice, p, "none").unwrap();
        let d = app.create_document(alice, b"").unwrap();
        assert_eq!((p.kind(), x.kind(), d.kind()), (EntityKind::Person, EntityKind::Patient, EntityKind::EmrDocument));
        assert!(!p.is_class() && !x.is_class() && !d.is_class());
        assert!(seen.insert(p) && seen.insert(x) && seen.insert(d));
    }
}

#[test]
fn crud_lifecycle_bumps_versions() {
    let app = host(HostOptions::default());
    let alice = session(&app, "alice", "physician");
    let carol = session(&app, "carol", "admin");
    let p = app.create_person(alice, "Ada", "London").unwrap();
    let x = app.create_patient(alice, p, "flu").unwrap();
    assert_eq!(app.set_diagnosis(alice, x, "better").unwrap(), 1);
    assert_eq!(app.set_diagnosis(alice, x, "well").unwrap(), 2);
    assert_eq!(app.get_diagnosis(alice, x).unwrap(), "well");
    assert_eq!(app.set_address(alice, p, "Surrey").unwrap(), 1);

    assert_eq!(app.delete_person(carol, p), Err(TomError::DanglingLink(p, 1)));
    app.delete_patient(alice, x).unwrap();
    assert_eq!(app.get_diagnosis(alice, x), Err(TomError::UnknownEntity(x)));
    app.delete_person(carol, p).unwrap();
    assert_eq!(app.get_address(alice, p), Err(TomError::UnknownEntity(p)));

    let d = app.create_document(alice, b"v0").unwrap();
    assert_eq!(app.write_document(alice, d, b"v1").unwrap(), 1);
    assert_eq!(app.read_document(alice, d).unwrap(), b"v1");
    app.destroy_document(alice, d).unwrap();
    assert_eq!(app.read_document(alice, d), Err(TomError::UnknownEntity(d)));
}

#[test]
fn denied_operations_have_no_effect() {
    let app = host(HostOptions::default());
    let alice = session(&app, "alice", "physician");
    let bob = session(&app, "bob", "nurse");
    let p = app.create_person(alice, "Ada", "London").unwrap();
    let x = app.create_patient(alice, p, "flu").unwrap();
    assert_eq!(app.set_diagnosis(bob, x, "forged"), Err(TomError::PermissionDenied));
    assert_eq!(app.create_patient(bob, p, "x"), Err(TomError::PermissionDenied));
    assert_eq!(app.get_diagnosis(alice, x).unwrap(), "flu");
    let stats = app.stats().unwrap();
    assert_eq!(stats.patients_created, 1);
    assert_eq!(stats.mediation.denied, 2);
}

#[test]
fn every_operation_is_counted() {
    let app = host(HostOptions::default());
    let alice = session(&app, "alice", "physician");
    let before = app.stats().unwrap().mediation;
    let p = app.create_person(alice, "Ada", "London").unwrap();
    app.get_address(alice, p).unwrap();
    app.set_address(alice, p, "Surrey").unwrap();
    app.get_address(alice, EntityId::new(EntityKind::Person, 999)).unwrap_err();
    let after = app.stats().unwrap();
    assert_eq!(after.mediation.requests_sent - before.requests_sent, 4);
    assert_eq!(after.mediation.operations_executed - before.operations_executed, 4);
    assert_eq!(after.mediation.cache_hits, 0);
    assert_eq!(after.server.requests, after.mediation.requests_sent);
    assert_eq!(after.persons_created, 1);
}

#[test]
fn cache_serves_repeated_reads() {
    let app = host(HostOptions { cache: true, ..Default::default() });
    let alice = session(&app, "alice", "physician");
    let p = app.create_person(alice, "Ada", "London").unwrap();
    for _ in 0..10 {
        app.get_address(alice, p).unwrap();
    }
    let s = app.stats().unwrap();
    assert!(s.mediation.cache_hits >= 9);
    assert_eq!(s.mediation.requests_sent + s.mediation.cache_hits, s.mediation.operations_executed);

    // Deactivation must reach the cache before the next check.
    app.deactivate_role(alice, "physician").unwrap();
    assert_eq!(app.get_address(alice, p), Err(TomError::PermissionDenied));
}

#[test]
fn objects_outlive_the_host_with_a_store() {
    let dir = tempfile::tempdir().unwrap();
    let opts = HostOptions { kv_path: Some(dir.path().join("objects.kv")), ..Default::default() };
    let (p, x, digest) = {
        let app = host(opts.clone());
        let alice = session(&app, "alice", "physician");
        let p = app.create_person(alice, "Ada", "London").unwrap();
        let x = app.create_patient(alice, p, "flu").unwrap();
        app.set_diagnosis(alice, x, "well").unwrap();
        (p, x, app.digest().unwrap())
    };
    let app = host(opts);
    assert_eq!(app.digest().unwrap(), digest);
    let alice = session(&app, "alice", "physician");
    assert_eq!(app.get_diagnosis(alice, x).unwrap(), "well");
    assert_eq!(app.get_address(alice, p).unwrap(), "London");
    let fresh = app.create_person(alice, "Carl", "Braunschweig").unwrap();
    assert!(fresh.serial() > p.serial());
    assert_eq!(app.delete_person(session(&app, "carol", "admin"), p), Err(TomError::DanglingLink(p, 1)));
}

#[test]
fn session_rules() {
    let app = host(HostOptions::default());
    assert_eq!(app.login("mallory"), Err(TomError::UnknownUser("mallory".into())));
    let bob = app.login("bob").unwrap();
    assert_eq!(app.login("bob").unwrap(), bob);
    assert_eq!(app.activate_role(bob, "physician"), Err(TomError::RoleNotAssigned("physician".into())));
    app.logout(bob).unwrap();
    assert_eq!(app.activate_role(bob, "nurse"), Err(TomError::NotLoggedIn(bob)));
}

#[test]
fn generic_mediation_reports_policy_errors() {
    let app = host(HostOptions::default());
    let alice = session(&app, "alice", "physician");
    let op = |name, n| appspear_core::OperationId::new(name, n);
    app.invoke(alice, &op("noop", 1), &[]).unwrap();
    assert_eq!(app.invoke(alice, &op("noop", 2), &[alice]), Err(TomError::Policy(Status::ArityMismatch)));
    assert_eq!(app.invoke(alice, &op("fly", 1), &[]), Err(TomError::Policy(Status::UnknownOperation)));
}

#[test]
fn file_tom_stays_in_its_sandbox() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("files");
    let app = host(HostOptions { file_root: Some(root.clone()), ..Default::default() });
    for bad in ["../escape.txt", "/etc/passwd", "a/../../b", ""] {
        assert!(matches!(app.register_path(bad), Err(TomError::Invalid(_))), "{bad}");
    }
    let f = app.register_path("notes.txt").unwrap();
    assert_eq!(f.kind(), EntityKind::OsObject);
    assert_eq!(app.register_path("notes.txt").unwrap(), f);

    let alice = session(&app, "alice", "physician");
    let bob = session(&app, "bob", "nurse");
    let carol = session(&app, "carol", "admin");
    assert_eq!(app.file(alice, FileOp::Create, f, b"x"), Err(TomError::PermissionDenied));
    assert!(!root.join("notes.txt").exists());

    app.file(carol, FileOp::Create, f, b"hello").unwrap();
    assert!(matches!(app.file(carol, FileOp::Create, f, b"again"), Err(TomError::Io { .. })));
    assert_eq!(app.file(bob, FileOp::Read, f, b"").unwrap(), Some(b"hello".to_vec()));
    assert_eq!(app.file(bob, FileOp::Write, f, b"nurse"), Err(TomError::PermissionDenied));
    app.file(carol, FileOp::Write, f, b"admin").unwrap();
    assert_eq!(std::fs::read(root.join("notes.txt")).unwrap(), b"admin");
    assert_eq!(app.file(bob, FileOp::Delete, f, b""), Err(TomError::PermissionDenied));
    app.file(carol, FileOp::Delete, f, b"").unwrap();
    assert!(!Path::new(&root.join("notes.txt")).exists());

    let stranger = EntityId::new(EntityKind::OsObject, 4242);
    assert_eq!(app.file(carol, FileOp::Read, stranger, b""), Err(TomError::UnknownEntity(stranger)));
}

#[test]
fn file_calls_need_a_sandbox() {
    let app = host(HostOptions::default());
    assert!(matches!(app.register_path("a.txt"), Err(TomError::UnknownKind(_))));
}

#[test]
fn dataset_is_deterministic() {
    assert_eq!(generate(7, 50), generate(7, 50));
    assert_ne!(generate(7, 50), generate(8, 50));
    assert_eq!(generate(7, 10)[..], generate(7, 50)[..10]);

    let load = || {
        let app = host(HostOptions::default());
        let alice = session(&app, "alice", "physician");
        let pairs = app.load_dataset(alice, 7, 50).unwrap();
        let diagnoses: Vec<String> = pairs.iter().map(|&(_, x)| app.get_diagnosis(alice, x).unwrap()).collect();
        (pairs, diagnoses, app.digest().unwrap())
    };
    let (pairs, diagnoses, digest) = load();
    assert_eq!(pairs.len(), 50);
    let expected: Vec<String> = generate(7, 50).into_iter().map(|p| p.diagnosis).collect();
    assert_eq!(diagnoses, expected);
    assert_eq!(load().2, digest);
}

#[test]
fn integrated_deployment_transcript_is_stable() {
    let scratch = Scratch::emr();
    let run = || common::emr_transcript(launch(IsolationConfig::integrated(), &scratch.settings()).app());
    let t = run();
    assert_eq!(t, run());
    let has = |needle: &str| t.iter().any(|l| l == needle);
    assert!(has("person before activation: Err(PermissionDenied)"));
    assert!(has("nurse writes diagnosis: Err(PermissionDenied)"));
    assert!(has("updated diagnosis: Ok(\"recovered\")"));
    assert!(has("read after deactivation: Err(PermissionDenied)"));
    assert!(t.iter().any(|l| l.starts_with("delete linked person: Err(DanglingLink(")));
    assert!(has("created: 2 3 1"));
}
