//! The reference method over real subprocess pipes.

use std::time::{Duration, Instant};

use viewbench::conformance::{run_suite, toy_dataset};
use viewbench::dataset::Split;
use viewbench::method::{ErrorKind, MethodApi, RenderOptions, SetupRequest};
use viewbench::refsplat::RefSplat;
use viewbench::rpc::{spawn_session, SessionConfig};

fn argv(extra: &[&str]) -> Vec<String> {
    std::iter::once(env!("CARGO_BIN_EXE_ref-splat"))
        .chain(extra.iter().copied())
        .map(String::from)
        .collect()
}

fn setup_toy(extra: &[&str]) -> viewbench::rpc::Session {
    let mut s = spawn_session(&argv(extra), SessionConfig::default()).unwrap();
    s.setup(SetupRequest {
        train_dataset: Some(toy_dataset()),
        ..Default::default()
    })
    .unwrap();
    s
}

#[test]
fn reference_method_passes_conformance() {
    let results = run_suite(&argv(&[]), SessionConfig::default());
    for r in &results {
        assert!(r.passed, "{}: {}", r.name, r.detail);
    }
    assert_eq!(results.len(), 11);
}

#[test]
fn conformance_without_embeddings_expects_capability_error() {
    let results = run_suite(&argv(&["--no-embeddings"]), SessionConfig::default());
    let e = results.iter().find(|r| r.name == "optimize_embedding").unwrap();
    assert!(e.passed, "{}", e.detail);
    assert!(e.detail.contains("capability"));
}

#[test]
fn handshake_reports_method_id() {
    let s = spawn_session(&argv(&[]), SessionConfig::default()).unwrap();
    assert_eq!(s.info().method_id, "ref-splat");
    assert!(s.info().capabilities.supports_embeddings);
    s.shutdown().unwrap();
}

#[test]
fn wrong_protocol_version_is_refused() {
    let err = spawn_session(&argv(&["--protocol-version", "nbproto/0"]), SessionConfig::default())
        .err()
        .unwrap();
    assert_eq!(err.kind, ErrorKind::Protocol);
    assert!(err.message.contains("mismatch"), "{err}");
}

#[test]
fn missing_executable_is_spawn_error() {
    let err = spawn_session(&["/nonexistent/method".to_string()], SessionConfig::default())
        .err()
        .unwrap();
    assert_eq!(err.kind, ErrorKind::Spawn);
}

#[test]
fn method_exception_is_relayed_with_traceback() {
    let mut s = setup_toy(&["--fail-on", "train_iteration"]);
    let err = s.train_iteration(0).unwrap_err();
    assert_eq!(err.kind, ErrorKind::MethodException);
    assert!(err.traceback.unwrap().contains("Traceback"));
    // The session is still usable.
    let cam = toy_dataset().images[0].camera.clone().unwrap();
    s.render(&cam, &RenderOptions::default()).unwrap();
}

#[test]
fn crash_surfaces_as_dead_session() {
    let mut s = setup_toy(&["--crash-on", "render"]);
    let cam = toy_dataset().images[0].camera.clone().unwrap();
    let err = s.render(&cam, &RenderOptions::default()).unwrap_err();
    assert_eq!(err.kind, ErrorKind::SessionDead, "{err}");
    assert!(err.message.contains("exit status"), "{err}");
    assert!(!s.is_alive());
    // Later calls fail fast instead of hanging.
    assert_eq!(s.get_info().unwrap_err().kind, ErrorKind::SessionDead);
}

#[test]
fn hang_is_cut_by_watchdog() {
    let config = SessionConfig {
        call_timeout: Duration::from_millis(500),
        ..Default::default()
    };
    let mut s = spawn_session(&argv(&["--hang-on", "train_iteration"]), config).unwrap();
    s.setup(SetupRequest {
        train_dataset: Some(toy_dataset()),
        ..Default::default()
    })
    .unwrap();
    let t = Instant::now();
    let err = s.train_iteration(0).unwrap_err();
    assert_eq!(err.kind, ErrorKind::Timeout);
    assert!(t.elapsed() < Duration::from_secs(10));
    assert!(!s.is_alive());
}

#[test]
fn unknown_override_is_rejected() {
    let mut s = spawn_session(&argv(&[]), SessionConfig::default()).unwrap();
    let err = s
        .setup(SetupRequest {
            train_dataset: Some(toy_dataset()),
            config_overrides: [("warp_factor".to_string(), serde_json::json!(9))].into(),
            ..Default::default()
        })
        .unwrap_err();
    assert_eq!(err.kind, ErrorKind::InvalidArgument);
    assert!(err.message.contains("warp_factor"));
}

#[test]
fn subprocess_matches_in_process() {
    let ds = toy_dataset();
    let mut remote = setup_toy(&["--seed", "5"]);
    let mut local = RefSplat::default();
    local
        .setup(SetupRequest {
            train_dataset: Some(ds.clone()),
            config_overrides: [("seed".to_string(), serde_json::json!(5))].into(),
            ..Default::default()
        })
        .unwrap();
    for step in 0..6 {
        let a = remote.train_iteration(step).unwrap();
        let b = local.train_iteration(step).unwrap();
        assert_eq!(a, b);
    }
    for img in ds.split(Split::Test) {
        let cam = img.camera.as_ref().unwrap();
        assert_eq!(
            remote.render(cam, &RenderOptions::default()).unwrap(),
            local.render(cam, &RenderOptions::default()).unwrap()
        );
    }
}
