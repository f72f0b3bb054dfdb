//! Scene loading: COLMAP sparse models and Blender `transforms_*.json` files,
//! split assignment, and protocol-driven image sourcing.
//!
//! Image order (and therefore split membership) depends only on file names,
//! compared byte-wise; directory listing order never matters.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::{downscale_camera, mat_vec, rescale_camera, Camera, CameraError, CameraModel, Mat3, Pose};
use crate::colmap::{self, ColmapError};
use crate::dataset::{DatasetMetadata, SceneDataset, SceneImage, ScenePoint, Split};
use crate::image::{sha256_hex, Image, ImageError};
use crate::imageops::{downscale_area, ImageOpError};
use crate::protocol::{EvalProtocol, ImageSource};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("malformed {path}: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error(transparent)]
    Colmap(#[from] ColmapError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Camera(#[from] CameraError),
    #[error(transparent)]
    ImageOp(#[from] ImageOpError),
    #[error("image directory {0} does not exist")]
    MissingImageDir(PathBuf),
    #[error("no sparse model found under {0}")]
    NoSparseModel(PathBuf),
    #[error("dataset has no root directory to reload images from")]
    NoRoot,
}

/// How images are assigned to train and test.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitRule {
    /// Every `n`-th image (sorted by name, starting at index 0) is test.
    EveryNth(usize),
    /// Every image gets the same label.
    All(Split),
}

impl SplitRule {
    /// The conventional `llffhold = 8` split.
    pub const LLFF_HOLD: SplitRule = SplitRule::EveryNth(8);

    pub fn name(&self) -> String {
        match self {
            SplitRule::EveryNth(n) => format!("every-{n}th-test"),
            SplitRule::All(Split::Train) => "all-train".into(),
            SplitRule::All(Split::Test) => "all-test".into(),
        }
    }

    pub fn assign(&self, index: usize) -> Split {
        match *self {
            SplitRule::EveryNth(n) if n > 0 && index % n == 0 => Split::Test,
            SplitRule::EveryNth(_) => Split::Train,
            SplitRule::All(s) => s,
        }
    }
}

fn file_stem(name: &str) -> String {
    Path::new(name)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| name.to_string())
}

fn load_all(paths: &[PathBuf]) -> Result<Vec<Arc<Image>>, SceneError> {
    paths
        .par_iter()
        .map(|p| {
            if !p.is_file() {
                return Err(SceneError::MissingFile(p.clone()));
            }
            Ok(Arc::new(Image::load(p)?))
        })
        .collect()
}

/// Directory holding the sparse model: `sparse/0`, `sparse`, or the root.
pub fn find_sparse_dir(root: &Path) -> Result<PathBuf, SceneError> {
    for cand in [root.join("sparse").join("0"), root.join("sparse"), root.to_path_buf()] {
        if colmap::detect_encoding(&cand).is_some() {
            return Ok(cand);
        }
    }
    Err(SceneError::NoSparseModel(root.to_path_buf()))
}

fn scene_name(root: &Path) -> String {
    root.canonicalize()
        .ok()
        .and_then(|p| p.file_name().map(|s| s.to_string_lossy().into_owned()))
        .unwrap_or_else(|| root.display().to_string())
}

/// Loads a COLMAP scene.
///
/// Images are sorted by name and split with `rule`. When `images_dir` is given
/// (relative to `root`) pixels are decoded from it; otherwise only paths into
/// `images/` are recorded and [`select_image_source`] loads pixels later.
pub fn load_colmap_scene(
    root: &Path,
    images_dir: Option<&str>,
    rule: SplitRule,
) -> Result<SceneDataset, SceneError> {
    let rec = colmap::read_reconstruction(&find_sparse_dir(root)?)?;
    let mut records: Vec<_> = rec.images.iter().collect();
    records.sort_by(|a, b| a.name.as_bytes().cmp(b.name.as_bytes()));

    let dir = images_dir.unwrap_or("images");
    let image_root = root.join(dir);
    if images_dir.is_some() && !image_root.is_dir() {
        return Err(SceneError::MissingImageDir(image_root));
    }
    let paths: Vec<PathBuf> = records.iter().map(|r| image_root.join(&r.name)).collect();
    let pixels = match images_dir {
        Some(_) => Some(load_all(&paths)?),
        None => None,
    };

    let images = records
        .iter()
        .enumerate()
        .map(|(i, r)| SceneImage {
            id: file_stem(&r.name),
            file_name: r.name.clone(),
            path: paths[i].clone(),
            camera: rec.camera_for(r),
            split: rule.assign(i),
            image: pixels.as_ref().map(|p| p[i].clone()),
        })
        .collect();
    let points = rec
        .points3d
        .iter()
        .map(|p| ScenePoint {
            xyz: p.xyz,
            rgb: p.rgb,
        })
        .collect();
    Ok(SceneDataset {
        name: scene_name(root),
        images,
        points3d: Some(points),
        metadata: DatasetMetadata {
            has_alpha: false,
            downscale_factor: None,
            split_rule: Some(rule.name()),
            image_dir: Some(dir.to_string()),
            root: Some(root.to_path_buf()),
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlenderFrame {
    pub file_path: String,
    pub transform_matrix: [[f64; 4]; 4],
}

/// Contents of a `transforms_<split>.json` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlenderTransforms {
    pub camera_angle_x: f64,
    pub frames: Vec<BlenderFrame>,
}

pub const ROTATION_TOLERANCE: f64 = 1e-6;

fn is_orthonormal(r: &Mat3) -> bool {
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
            let want = if i == j { 1.0 } else { 0.0 };
            if (dot - want).abs() > ROTATION_TOLERANCE {
                return false;
            }
        }
    }
    true
}

/// World-to-camera pose from a Blender (OpenGL-axis) camera-to-world matrix.
///
/// The camera's y and z axes are flipped so that it looks down +z with +y
/// pointing down the image, like every other camera in this crate.
pub fn pose_from_blender_matrix(m: &[[f64; 4]; 4]) -> Option<Pose> {
    let mut r: Mat3 = [[0.0; 3]; 3];
    for i in 0..3 {
        r[i][0] = m[i][0];
        r[i][1] = -m[i][1];
        r[i][2] = -m[i][2];
    }
    if !is_orthonormal(&r) {
        return None;
    }
    let c = [m[0][3], m[1][3], m[2][3]];
    // Inverse of [R | c]: [R^T | -R^T c].
    let rt: Mat3 = [
        [r[0][0], r[1][0], r[2][0]],
        [r[0][1], r[1][1], r[2][1]],
        [r[0][2], r[1][2], r[2][2]],
    ];
    let t = mat_vec(&rt, c);
    Some(Pose::from_rotation_translation(&rt, [-t[0], -t[1], -t[2]]))
}

/// Focal length in pixels from the horizontal field of view.
pub fn blender_focal(width: u32, camera_angle_x: f64) -> f64 {
    0.5 * width as f64 / (0.5 * camera_angle_x).tan()
}

fn resolve_frame_path(dir: &Path, file_path: &str) -> PathBuf {
    let p = dir.join(file_path);
    if p.extension().is_none() {
        let png = p.with_extension("png");
        if png.is_file() || !p.is_file() {
            return png;
        }
    }
    p
}

/// Loads one split of a Blender-style scene. RGBA pixels are kept unblended.
pub fn load_blender_scene(dir: &Path, split: Split) -> Result<SceneDataset, SceneError> {
    let name = match split {
        Split::Train => "transforms_train.json",
        Split::Test => "transforms_test.json",
    };
    let json_path = dir.join(name);
    let text = std::fs::read_to_string(&json_path)
        .map_err(|_| SceneError::MissingFile(json_path.clone()))?;
    let transforms: BlenderTransforms =
        serde_json::from_str(&text).map_err(|e| SceneError::Malformed {
            path: json_path.clone(),
            message: e.to_string(),
        })?;

    let mut frames: Vec<(PathBuf, &BlenderFrame)> = transforms
        .frames
        .iter()
        .map(|f| (resolve_frame_path(dir, &f.file_path), f))
        .collect();
    frames.sort_by(|a, b| {
        a.0.as_os_str()
            .as_encoded_bytes()
            .cmp(b.0.as_os_str().as_encoded_bytes())
    });
    let paths: Vec<PathBuf> = frames.iter().map(|f| f.0.clone()).collect();
    let pixels = load_all(&paths)?;

    let mut images = Vec::with_capacity(frames.len());
    let mut has_alpha = false;
    for (i, (path, frame)) in frames.iter().enumerate() {
        let px = &pixels[i];
        has_alpha |= px.channels() == 4;
        let pose = pose_from_blender_matrix(&frame.transform_matrix).ok_or_else(|| {
            SceneError::Malformed {
                path: json_path.clone(),
                message: format!("frame {:?} has a non-orthonormal rotation", frame.file_path),
            }
        })?;
        let (w, h) = (px.width() as u32, px.height() as u32);
        let f = blender_focal(w, transforms.camera_angle_x);
        let camera = Camera::new(
            CameraModel::Pinhole,
            w,
            h,
            vec![f, f, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0],
            pose,
        )?;
        let file_name = path
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        images.push(SceneImage {
            id: file_stem(&file_name),
            file_name,
            path: path.clone(),
            camera: Some(camera),
            split,
            image: Some(px.clone()),
        });
    }
    Ok(SceneDataset {
        name: scene_name(dir),
        images,
        points3d: None,
        metadata: DatasetMetadata {
            has_alpha,
            downscale_factor: None,
            split_rule: None,
            image_dir: None,
            root: Some(dir.to_path_buf()),
        },
    })
}

fn downscaled_dir_name(factor: u32) -> String {
    if factor == 1 {
        "images".into()
    } else {
        format!("images_{factor}")
    }
}

/// Loads ground-truth pixels the way `protocol.image_source` prescribes.
///
/// `PreDownscaled` reads released files verbatim from `images_<f>/`;
/// `ManualDownscale` reads full-resolution files and area-downscales them.
/// Cameras are rescaled to the resulting pixel dimensions.
pub fn select_image_source(
    ds: &SceneDataset,
    protocol: &EvalProtocol,
) -> Result<SceneDataset, SceneError> {
    let root = ds.metadata.root.as_deref();
    let (sources, factor, manual): (Vec<PathBuf>, u32, bool) = match protocol.image_source {
        ImageSource::PreDownscaled { factor: 1 } => {
            if ds.images.iter().all(|i| i.image.is_some()) && ds.metadata.downscale_factor.is_none() {
                return Ok(ds.clone());
            }
            (ds.images.iter().map(|i| i.path.clone()).collect(), 1, false)
        }
        ImageSource::PreDownscaled { factor } => {
            let dir = root.ok_or(SceneError::NoRoot)?.join(downscaled_dir_name(factor));
            if !dir.is_dir() {
                return Err(SceneError::MissingImageDir(dir));
            }
            (ds.images.iter().map(|i| dir.join(&i.file_name)).collect(), factor, false)
        }
        ImageSource::ManualDownscale { factor } => {
            let base = match (root, ds.metadata.image_dir.as_deref()) {
                (Some(r), Some(_)) => Some(r.join("images")),
                _ => None,
            };
            let paths = ds
                .images
                .iter()
                .map(|i| match &base {
                    Some(b) => b.join(&i.file_name),
                    None => i.path.clone(),
                })
                .collect();
            (paths, factor, true)
        }
    };
    let mut pixels = load_all(&sources)?;
    if manual {
        pixels = pixels
            .into_par_iter()
            .map(|p| downscale_area(&p, factor).map(Arc::new))
            .collect::<Result<_, _>>()?;
    }
    let mut out = ds.clone();
    for ((img, px), path) in out.images.iter_mut().zip(pixels).zip(sources) {
        if let Some(cam) = &img.camera {
            let scaled = if factor == 1 {
                cam.clone()
            } else {
                downscale_camera(cam, factor as f64)?
            };
            img.camera = Some(
                if (scaled.width as usize, scaled.height as usize) == (px.width(), px.height()) {
                    scaled
                } else {
                    rescale_camera(cam, px.width() as u32, px.height() as u32)?
                },
            );
        }
        img.path = path;
        img.image = Some(px);
    }
    out.metadata.downscale_factor = (factor != 1).then_some(factor);
    out.metadata.image_dir = Some(if manual {
        format!("images (area /{factor})")
    } else {
        downscaled_dir_name(factor)
    });
    Ok(out)
}

/// Detects the scene layout and loads one split with its protocol image
/// source applied.
pub fn load_scene_for_protocol(
    root: &Path,
    protocol: &EvalProtocol,
    split: Split,
    rule: SplitRule,
) -> Result<SceneDataset, SceneError> {
    let ds = if root.join("transforms_test.json").is_file() || root.join("transforms_train.json").is_file() {
        load_blender_scene(root, split)?
    } else {
        load_colmap_scene(root, None, rule)?.subset(split)
    };
    select_image_source(&ds, protocol)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub file_name: String,
    pub split: Split,
    pub camera: Option<Camera>,
    pub sha256: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub metadata: DatasetMetadata,
    pub images: Vec<ManifestEntry>,
    pub num_points3d: Option<usize>,
}

/// Auditable listing of a dataset: names, splits, cameras and file checksums.
pub fn dataset_manifest(ds: &SceneDataset) -> DatasetManifest {
    let images = ds
        .images
        .par_iter()
        .map(|img| ManifestEntry {
            id: img.id.clone(),
            file_name: img.file_name.clone(),
            split: img.split,
            camera: img.camera.clone(),
            sha256: std::fs::read(&img.path).ok().map(|b| sha256_hex(&b)),
        })
        .collect();
    let mut metadata = ds.metadata.clone();
    metadata.root = None;
    DatasetManifest {
        name: ds.name.clone(),
        metadata,
        images,
        num_points3d: ds.points3d.as_ref().map(Vec::len),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_eighth_rule() {
        let rule = SplitRule::LLFF_HOLD;
        let test: Vec<usize> = (0..9).filter(|&i| rule.assign(i) == Split::Test).collect();
        assert_eq!(test, vec![0, 8]);
    }

    #[test]
    fn focal_formula() {
        let angle = 0.6911112070083618;
        let f = blender_focal(800, angle);
        assert!((f - 400.0 / (angle / 2.0).tan()).abs() < 1e-12);
        assert!((f - 1111.1110311937682).abs() < 1e-6);
    }

    #[test]
    fn identity_matrix_pose() {
        let id = [
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ];
        let pose = pose_from_blender_matrix(&id).unwrap();
        // Camera at the origin looking down world -z.
        assert_eq!(pose.tvec, [0.0, 0.0, 0.0]);
        let p = pose.transform_point([0.0, 0.0, -2.0]);
        assert!((p[2] - 2.0).abs() < 1e-12);
        let up = pose.transform_point([0.0, 1.0, 0.0]);
        assert!((up[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn blender_camera_center_is_recovered() {
        // Camera at (0, -4, 0) looking toward the origin (Blender convention).
        let m = [
            [1.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, -1.0, -4.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ];
        let pose = pose_from_blender_matrix(&m).unwrap();
        let c = pose.inverse().tvec;
        assert!((c[1] + 4.0).abs() < 1e-12 && c[0].abs() < 1e-12 && c[2].abs() < 1e-12);
        let origin = pose.transform_point([0.0, 0.0, 0.0]);
        assert!((origin[2] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn skewed_matrix_rejected() {
        let m = [
            [1.0, 0.1, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ];
        assert!(pose_from_blender_matrix(&m).is_none());
    }
}
