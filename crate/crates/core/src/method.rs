//! The method interface: what a novel-view-synthesis method must offer to be
//! trained, rendered and evaluated, whether it runs in-process or behind the
//! subprocess protocol in [`crate::rpc`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::Camera;
use crate::dataset::SceneDataset;
use crate::image::Image;

/// Error categories shared by both ends of the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    /// A request argument is unusable (bad camera, unknown override, ...).
    InvalidArgument,
    /// The call is not allowed in the method's current state.
    Precondition,
    /// The method does not implement the requested optional operation.
    Capability,
    /// The method raised while doing the work.
    MethodException,
    /// Malformed or unexpected traffic, including version mismatches.
    Protocol,
    /// No response within the watchdog deadline.
    Timeout,
    /// The method process exited or closed its streams.
    SessionDead,
    /// The method process could not be started.
    Spawn,
    Io,
}

impl ErrorKind {
    pub fn name(self) -> &'static str {
        match self {
            ErrorKind::InvalidArgument => "invalid_argument",
            ErrorKind::Precondition => "precondition",
            ErrorKind::Capability => "capability",
            ErrorKind::MethodException => "method_exception",
            ErrorKind::Protocol => "protocol",
            ErrorKind::Timeout => "timeout",
            ErrorKind::SessionDead => "session_dead",
            ErrorKind::Spawn => "spawn",
            ErrorKind::Io => "io",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error, Serialize, Deserialize)]
#[error("{}: {message}", kind.name())]
pub struct MethodError {
    #[serde(rename = "error_kind")]
    pub kind: ErrorKind,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub traceback: Option<String>,
}

impl MethodError {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
            traceback: None,
        }
    }

    pub fn with_traceback(mut self, tb: impl Into<String>) -> Self {
        self.traceback = Some(tb.into());
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Capabilities {
    pub supports_embeddings: bool,
    pub supports_mesh_export: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodInfo {
    pub method_id: String,
    pub capabilities: Capabilities,
    #[serde(default)]
    pub hyperparameters: BTreeMap<String, serde_json::Value>,
    pub checkpoint_format_version: u32,
}

/// Inputs to [`MethodApi::setup`]. At least one of `train_dataset` and
/// `checkpoint` must be present.
#[derive(Debug, Clone, Default)]
pub struct SetupRequest {
    pub train_dataset: Option<SceneDataset>,
    pub checkpoint: Option<PathBuf>,
    pub config_overrides: BTreeMap<String, serde_json::Value>,
}

impl SetupRequest {
    pub fn check(&self) -> Result<(), MethodError> {
        if self.train_dataset.is_none() && self.checkpoint.is_none() {
            return Err(MethodError::new(
                ErrorKind::Precondition,
                "setup needs a training dataset, a checkpoint, or both",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RenderOptions {
    pub embedding: Option<Vec<f64>>,
    /// Extra buffers to return; only `color` is mandatory for every method.
    pub output_names: Option<Vec<String>>,
}

pub type TrainMetrics = BTreeMap<String, f64>;

/// A trainable, renderable scene representation.
///
/// Calls on one instance are strictly sequential.
pub trait MethodApi {
    fn get_info(&mut self) -> Result<MethodInfo, MethodError>;

    fn setup(&mut self, request: SetupRequest) -> Result<MethodInfo, MethodError>;

    /// One optimization step; the result contains at least `loss`.
    fn train_iteration(&mut self, step: u64) -> Result<TrainMetrics, MethodError>;

    /// Renders a u8 RGB image of the camera's size.
    fn render(&mut self, camera: &Camera, options: &RenderOptions) -> Result<Image, MethodError>;

    fn save(&mut self, path: &Path) -> Result<(), MethodError>;

    /// Fits an appearance embedding to the (single-image) dataset.
    fn optimize_embedding(
        &mut self,
        dataset: &SceneDataset,
        initial: Option<&[f64]>,
    ) -> Result<Vec<f64>, MethodError>;

    fn export_mesh(&mut self, path: &Path, options: &serde_json::Value) -> Result<(), MethodError>;
}
