//! Process entry point serving [`RefSplat`] over `nbproto/1` on stdio.
//!
//! Arguments: `[--seed N] [--no-embeddings] [--protocol-version V]
//! [--fail-on KIND] [--crash-on KIND] [--hang-on KIND]`
//!
//! The last four flags inject faults so hosts can test their error handling.

use std::path::Path;

use serde_json::Value;

use crate::camera::Camera;
use crate::dataset::SceneDataset;
use crate::image::Image;
use crate::method::{
    ErrorKind, MethodApi, MethodError, MethodInfo, RenderOptions, SetupRequest, TrainMetrics,
};
use crate::refsplat::{RefSplat, RefSplatConfig};
use crate::rpc::{self, Kind};

#[derive(Default)]
struct Faults {
    fail_on: Option<Kind>,
    crash_on: Option<Kind>,
    hang_on: Option<Kind>,
}

struct Faulty {
    inner: RefSplat,
    faults: Faults,
}

impl Faulty {
    fn enter(&self, kind: Kind) -> Result<(), MethodError> {
        if self.faults.crash_on == Some(kind) {
            eprintln!("ref-splat: crashing on {} as requested", kind.name());
            std::process::exit(70);
        }
        if self.faults.hang_on == Some(kind) {
            eprintln!("ref-splat: hanging on {} as requested", kind.name());
            loop {
                std::thread::sleep(std::time::Duration::from_secs(3600));
            }
        }
        if self.faults.fail_on == Some(kind) {
            return Err(MethodError::new(
                ErrorKind::MethodException,
                format!("injected failure in {}", kind.name()),
            )
            .with_traceback(format!(
                "Traceback (most recent call last):\n  ref-splat {}\nInjectedFault",
                kind.name()
            )));
        }
        Ok(())
    }
}

impl MethodApi for Faulty {
    fn get_info(&mut self) -> Result<MethodInfo, MethodError> {
        self.enter(Kind::GetInfo)?;
        self.inner.get_info()
    }

    fn setup(&mut self, request: SetupRequest) -> Result<MethodInfo, MethodError> {
        self.enter(Kind::Setup)?;
        self.inner.setup(request)
    }

    fn train_iteration(&mut self, step: u64) -> Result<TrainMetrics, MethodError> {
        self.enter(Kind::TrainIteration)?;
        self.inner.train_iteration(step)
    }

    fn render(&mut self, camera: &Camera, options: &RenderOptions) -> Result<Image, MethodError> {
        self.enter(Kind::Render)?;
        self.inner.render(camera, options)
    }

    fn save(&mut self, path: &Path) -> Result<(), MethodError> {
        self.enter(Kind::Save)?;
        self.inner.save(path)
    }

    fn optimize_embedding(
        &mut self,
        dataset: &SceneDataset,
        initial: Option<&[f64]>,
    ) -> Result<Vec<f64>, MethodError> {
        self.enter(Kind::OptimizeEmbedding)?;
        self.inner.optimize_embedding(dataset, initial)
    }

    fn export_mesh(&mut self, path: &Path, options: &Value) -> Result<(), MethodError> {
        self.enter(Kind::ExportMesh)?;
        self.inner.export_mesh(path, options)
    }
}

fn parse_args(args: impl IntoIterator<Item = String>) -> Result<(RefSplatConfig, bool, String, Faults), String> {
    let mut config = RefSplatConfig::default();
    let mut embeddings = true;
    let mut protocol = rpc::PROTOCOL_VERSION.to_string();
    let mut faults = Faults::default();
    let mut args = args.into_iter();
    while let Some(flag) = args.next() {
        let mut value = |name: &str| args.next().ok_or_else(|| format!("{name} needs a value"));
        let kind = |s: String| Kind::from_name(&s).ok_or_else(|| format!("unknown message kind {s:?}"));
        match flag.as_str() {
            "--seed" => {
                config.seed = value("--seed")?.parse().map_err(|e| format!("--seed: {e}"))?;
            }
            "--no-embeddings" => embeddings = false,
            "--protocol-version" => protocol = value("--protocol-version")?,
            "--fail-on" => faults.fail_on = Some(kind(value("--fail-on")?)?),
            "--crash-on" => faults.crash_on = Some(kind(value("--crash-on")?)?),
            "--hang-on" => faults.hang_on = Some(kind(value("--hang-on")?)?),
            "-h" | "--help" => {
                return Err("usage: ref-splat [--seed N] [--no-embeddings] [--protocol-version V] \
                            [--fail-on KIND] [--crash-on KIND] [--hang-on KIND]"
                    .into())
            }
            other => return Err(format!("unknown argument {other:?}")),
        }
    }
    Ok((config, embeddings, protocol, faults))
}

/// Serves until stdin closes; returns the process exit status (0 clean,
/// 1 wire failure, 2 bad arguments).
pub fn serve_stdio(args: impl IntoIterator<Item = String>) -> u8 {
    let (config, embeddings, protocol, faults) = match parse_args(args) {
        Ok(v) => v,
        Err(msg) => {
            eprintln!("{msg}");
            return 2;
        }
    };
    let mut inner = RefSplat::new(config);
    if !embeddings {
        inner = inner.without_embeddings();
    }
    let mut method = Faulty { inner, faults };
    match rpc::serve(&mut method, std::io::stdin().lock(), std::io::stdout().lock(), &protocol) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("ref-splat: {e}");
            1
        }
    }
}
