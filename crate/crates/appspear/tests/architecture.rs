mod common;

use appspear::deploy::{DeployError, Deployment};
use appspear::transport::{Boundary, IsolationConfig, TransportError};
use common::{launch, Scratch};

#[test]
fn core_crate_builds_without_std() {
    let lib = include_str!("../../core/src/lib.rs");
    assert!(lib.lines().any(|l| l.trim() == "#![no_std]"));
    assert!(!lib.contains("extern crate std"));
}

#[test]
fn components_land_where_the_placement_says() {
    use Boundary::*;
    let scratch = Scratch::emr();
    let settings = scratch.settings();
    // (placement, child processes, enclave in this process, server in this process)
    let table = [
        ((Lpc, Lpc), 0, false, true),
        ((Lpc, Ipc), 1, false, false),
        ((Ipc, Lpc), 1, false, false),
        ((Ipc, Ipc), 2, false, false),
        ((Lpc, Tee), 0, true, false),
        ((Tee, Lpc), 0, true, false),
        ((Ipc, Tee), 1, false, false),
    ];
    assert_eq!(table.map(|row| row.0), IsolationConfig::VARIANTS);
    for ((app_tom, tom_tps), children, enclave, server) in table {
        let config = IsolationConfig::new(app_tom, tom_tps);
        let d = launch(config, &settings);
        let label = config.label();
        assert_eq!(d.child_count(), children, "{label}");
        assert_eq!(d.enclave().is_some(), enclave, "{label}");
        assert_eq!(d.measurement().is_some(), enclave, "{label}");
        assert_eq!(d.server().is_some(), server, "{label}");
        assert!(d.app().login("alice").is_ok(), "{label}");
    }
}

#[test]
fn nested_enclaves_are_refused() {
    let scratch = Scratch::emr();
    let err =
        Deployment::launch(IsolationConfig::new(Boundary::Tee, Boundary::Tee), &scratch.settings()).err().unwrap();
    assert!(matches!(err, DeployError::Transport(TransportError::ConfigUnsupported(_))), "{err}");
}

#[test]
fn children_exit_with_the_deployment() {
    let scratch = Scratch::emr();
    let mut settings = scratch.settings();
    let run = scratch.path().join("run");
    settings.runtime_dir = Some(run.clone());
    let d = launch(IsolationConfig::new(Boundary::Ipc, Boundary::Ipc), &settings);
    let sockets: Vec<_> = std::fs::read_dir(&run).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(sockets.len(), 2);
    drop(d);
    assert!(sockets.iter().all(|s| !s.exists()));
}
