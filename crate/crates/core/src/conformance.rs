//! Conformance suite for executables claiming to speak `nbproto/1`.
//!
//! Each check starts from the observable contract only: it never looks at
//! method internals, so the same suite applies to the bundled reference
//! method and to methods wrapped by external adapters.

use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::Serialize;
use serde_json::json;

use crate::camera::{Camera, CameraModel, Pose};
use crate::dataset::{DatasetMetadata, SceneDataset, SceneImage, ScenePoint, Split};
use crate::image::Image;
use crate::method::{ErrorKind, MethodApi, MethodError, RenderOptions, SetupRequest};
use crate::rpc::{spawn_session, Session, SessionConfig};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Small scene with points on a grid, two training and one test view.
pub fn toy_dataset() -> SceneDataset {
    let mut points = Vec::new();
    for i in 0..5 {
        for j in 0..5 {
            points.push(ScenePoint {
                xyz: [i as f64 * 0.2 - 0.4, j as f64 * 0.2 - 0.4, 0.0],
                rgb: [(i * 50) as u8, (j * 50) as u8, 128],
            });
        }
    }
    let image = |id: &str, tx: f64, split| {
        let camera = Camera::new(
            CameraModel::Pinhole,
            32,
            32,
            vec![40.0, 40.0, 15.5, 15.5],
            Pose {
                qvec: [1.0, 0.0, 0.0, 0.0],
                tvec: [tx, 0.0, 2.0],
            },
        )
        .expect("pinhole arity");
        let pixels: Vec<u8> = (0..32 * 32)
            .flat_map(|k| [(k % 32 * 8) as u8, (k / 32 * 8) as u8, 200])
            .collect();
        SceneImage {
            id: id.into(),
            file_name: format!("{id}.png"),
            path: PathBuf::from(format!("{id}.png")),
            camera: Some(camera),
            split,
            image: Some(Arc::new(Image::from_u8(32, 32, 3, pixels).expect("sized"))),
        }
    };
    SceneDataset {
        name: "conformance-toy".into(),
        images: vec![
            image("t0", -0.1, Split::Train),
            image("t1", 0.1, Split::Train),
            image("v0", 0.0, Split::Test),
        ],
        points3d: Some(points),
        metadata: DatasetMetadata::default(),
    }
}

fn scratch_dir() -> PathBuf {
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let n = COUNTER.fetch_add(1, Ordering::Relaxed);
    let nanos = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_nanos())
        .unwrap_or(0);
    std::env::temp_dir().join(format!("nbproto-conformance-{}-{nanos}-{n}", std::process::id()))
}

struct Suite {
    results: Vec<CheckResult>,
}

impl Suite {
    fn record(&mut self, name: &'static str, outcome: Result<String, String>) -> bool {
        let passed = outcome.is_ok();
        let detail = outcome.unwrap_or_else(|e| e);
        self.results.push(CheckResult { name, passed, detail });
        passed
    }
}

fn describe(e: MethodError) -> String {
    e.to_string()
}

fn expect_kind(r: Result<impl std::fmt::Debug, MethodError>, kind: ErrorKind) -> Result<String, String> {
    match r {
        Err(e) if e.kind == kind && !e.message.is_empty() => Ok(format!("relayed {e}")),
        Err(e) => Err(format!("expected a {} error, got {e}", kind.name())),
        Ok(v) => Err(format!("expected a {} error, call succeeded with {v:?}", kind.name())),
    }
}

/// Runs every check against the executable `argv`. Checks after a failed
/// handshake are skipped (reported as failed).
pub fn run_suite(argv: &[String], config: SessionConfig) -> Vec<CheckResult> {
    let mut suite = Suite { results: Vec::new() };
    let ds = toy_dataset();
    let train: Vec<&Camera> = ds.split(Split::Train).filter_map(|i| i.camera.as_ref()).collect();
    let cameras: Vec<Camera> = ds.images.iter().filter_map(|i| i.camera.clone()).collect();

    let session = spawn_session(argv, config.clone());
    let mut s: Session = match session {
        Ok(s) => {
            let id = s.info().method_id.clone();
            suite.record("handshake", if id.is_empty() { Err("empty method_id".into()) } else { Ok(format!("method_id {id:?}")) });
            s
        }
        Err(e) => {
            suite.record("handshake", Err(describe(e)));
            return suite.results;
        }
    };

    suite.record("setup requires dataset or checkpoint", expect_kind(s.setup(SetupRequest::default()).map(|i| i.method_id), ErrorKind::Precondition));

    let setup = s.setup(SetupRequest {
        train_dataset: Some(ds.clone()),
        ..Default::default()
    });
    let caps = match setup {
        Ok(info) => {
            suite.record("setup with dataset", Ok(format!("{} ready", info.method_id)));
            info.capabilities
        }
        Err(e) => {
            suite.record("setup with dataset", Err(describe(e)));
            return suite.results;
        }
    };

    let train_ok = (0..4u64).try_for_each(|step| match s.train_iteration(step) {
        Ok(m) if m.get("loss").is_some_and(|l| l.is_finite()) => Ok(()),
        Ok(m) => Err(format!("step {step}: no finite loss in {m:?}")),
        Err(e) => Err(format!("step {step}: {e}")),
    });
    suite.record("train_iteration returns loss", train_ok.map(|_| "4 steps".into()));

    let render_check = (|| {
        let cam = train[0];
        let a = s.render(cam, &RenderOptions::default()).map_err(describe)?;
        let b = s.render(cam, &RenderOptions::default()).map_err(describe)?;
        if (a.width(), a.height(), a.channels()) != (cam.width as usize, cam.height as usize, 3) {
            return Err(format!("render is {}x{}x{}", a.width(), a.height(), a.channels()));
        }
        if a != b {
            return Err("two renders of the same camera differ".into());
        }
        Ok(format!("{}x{} RGB, deterministic", a.width(), a.height()))
    })();
    suite.record("render", render_check);

    let mut bad = train[0].clone();
    bad.width = 0;
    suite.record("error relay", expect_kind(s.render(&bad, &RenderOptions::default()).map(|_| ()), ErrorKind::InvalidArgument));
    suite.record("session survives relayed error", s.get_info().map(|i| i.method_id).map_err(describe));

    let dir = scratch_dir();
    let roundtrip = (|| {
        let ckpt = dir.join("checkpoint");
        s.save(&ckpt).map_err(describe)?;
        let before: Vec<Image> = cameras
            .iter()
            .map(|c| s.render(c, &RenderOptions::default()))
            .collect::<Result<_, _>>()
            .map_err(describe)?;
        let mut fresh = spawn_session(argv, config.clone()).map_err(describe)?;
        fresh
            .setup(SetupRequest {
                checkpoint: Some(ckpt),
                ..Default::default()
            })
            .map_err(describe)?;
        for (c, b) in cameras.iter().zip(&before) {
            let a = fresh.render(c, &RenderOptions::default()).map_err(describe)?;
            if &a != b {
                return Err("render after reload differs".into());
            }
        }
        fresh.shutdown().map_err(describe)?;
        Ok(format!("{} cameras byte-identical after reload", cameras.len()))
    })();
    suite.record("save/load round trip", roundtrip);

    let single = SceneDataset {
        images: vec![ds.images[2].clone()],
        ..ds.clone()
    };
    let embedding = s.optimize_embedding(&single, None);
    if caps.supports_embeddings {
        let check = embedding.map_err(describe).and_then(|e| {
            let opts = RenderOptions {
                embedding: Some(e.clone()),
                output_names: None,
            };
            s.render(&cameras[2], &opts).map_err(describe)?;
            Ok(format!("embedding of length {}", e.len()))
        });
        suite.record("optimize_embedding", check);
    } else {
        suite.record("optimize_embedding", expect_kind(embedding, ErrorKind::Capability));
    }

    let mesh = dir.join("mesh.ply");
    let exported = s.export_mesh(&mesh, &json!({}));
    if caps.supports_mesh_export {
        suite.record("export_mesh", exported.map(|_| format!("{} written", mesh.display())).map_err(describe));
    } else {
        suite.record("export_mesh", expect_kind(exported, ErrorKind::Capability));
    }
    let _ = std::fs::remove_dir_all(&dir);

    suite.record(
        "shutdown",
        s.shutdown().map_err(describe).and_then(|st| {
            if st.success() {
                Ok("clean exit".into())
            } else {
                Err(format!("exit status {st}"))
            }
        }),
    );
    suite.results
}
