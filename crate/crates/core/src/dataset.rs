//! Scene datasets and their validation.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::image::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneImage {
    /// File stem; the key predictions and metric records use.
    pub id: String,
    pub file_name: String,
    pub path: PathBuf,
    pub camera: Option<Camera>,
    pub split: Split,
    pub image: Option<Arc<Image>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenePoint {
    pub xyz: [f64; 3],
    pub rgb: [u8; 3],
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DatasetMetadata {
    pub has_alpha: bool,
    /// Downscale factor applied to the stored pixels relative to `images/`.
    pub downscale_factor: Option<u32>,
    /// Name of the rule that assigned splits, when one was applied.
    pub split_rule: Option<String>,
    /// Directory the pixels were read from, relative to the scene root.
    pub image_dir: Option<String>,
    /// Scene root on disk, used to locate alternative image directories.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SceneDataset {
    pub name: String,
    pub images: Vec<SceneImage>,
    pub points3d: Option<Vec<ScenePoint>>,
    pub metadata: DatasetMetadata,
}

pub const QUATERNION_TOLERANCE: f64 = 1e-9;

impl SceneDataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &SceneImage> {
        self.images.iter().filter(move |i| i.split == split)
    }

    pub fn find(&self, id: &str) -> Option<&SceneImage> {
        self.images.iter().find(|i| i.id == id)
    }

    /// Copy holding only the images of one split.
    pub fn subset(&self, split: Split) -> SceneDataset {
        SceneDataset {
            images: self.split(split).cloned().collect(),
            ..self.clone()
        }
    }
}

/// Lists every broken invariant; an empty list means the dataset is valid.
pub fn validate_dataset(ds: &SceneDataset) -> Vec<String> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for img in &ds.images {
        if !seen.insert(img.id.as_str()) {
            out.push(format!("image {:?}: id appears more than once", img.id));
        }
        let Some(cam) = &img.camera else {
            if img.split == Split::Test {
                out.push(format!("image {:?}: test image has no camera", img.id));
            }
            continue;
        };
        if cam.params.len() != cam.model.arity() {
            out.push(format!(
                "camera of image {:?}: {} expects {} parameters, got {}",
                img.id,
                cam.model.name(),
                cam.model.arity(),
                cam.params.len()
            ));
        }
        let norm = cam.pose.quat_norm();
        if (norm - 1.0).abs() > QUATERNION_TOLERANCE {
            out.push(format!(
                "camera of image {:?}: quaternion norm {norm} is not 1",
                img.id
            ));
        }
        if cam.width == 0 || cam.height == 0 {
            out.push(format!("camera of image {:?}: zero-sized image plane", img.id));
        }
        if let Some(pixels) = &img.image {
            if (pixels.width(), pixels.height()) != (cam.width as usize, cam.height as usize) {
                out.push(format!(
                    "image {:?}: pixels are {}x{} but camera is {}x{}",
                    img.id,
                    pixels.width(),
                    pixels.height(),
                    cam.width,
                    cam.height
                ));
            }
        }
    }
    if let Some(rule) = &ds.metadata.split_rule {
        for split in [Split::Train, Split::Test] {
            if !ds.images.is_empty() && ds.split(split).next().is_none() {
                out.push(format!(
                    "split rule {rule:?} left the {} split empty",
                    match split {
                        Split::Train => "train",
                        Split::Test => "test",
                    }
                ));
            }
        }
    }
    out
}
