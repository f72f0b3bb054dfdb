//! Applies an evaluation protocol to predictions and ground truth.
//!
//! Ground truth is blended over the protocol background when it has alpha and
//! quantized to u8 exactly once, so every method is scored against identical
//! bytes. Predictions are quantized to u8 as well (unless the protocol opts
//! out), and all metrics are computed on float views of those bytes.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::to_canonical_json;
use crate::dataset::{SceneDataset, SceneImage, Split};
use crate::image::{sha256_hex, Image, ImageError};
use crate::imageops::{blend_background, crop_halves, quantize_u8, ImageOpError};
use crate::lpips::{LpipsError, LpipsNetwork};
use crate::method::{ErrorKind, MethodApi, MethodError, RenderOptions};
use crate::metrics::{aggregate, psnr, ssim, MetricError, SsimConfig};
use crate::protocol::{AppearanceProtocol, EvalProtocol, LpipsBackbone};
use crate::results::{tool_version, MetricRecord, ResultsDocument};

pub const PREDICTIONS_MANIFEST: &str = "predictions.json";

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("missing predictions for: {}", .0.join(", "))]
    MissingPredictions(Vec<String>),
    #[error("predictions for images outside the test split: {}", .0.join(", "))]
    UnexpectedPredictions(Vec<String>),
    #[error("image {id:?}: prediction is {found:?} but ground truth is {expected:?} (width, height)")]
    ShapeMismatch {
        id: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("image {0:?}: ground-truth pixels are not loaded")]
    MissingGroundTruth(String),
    #[error("the dataset has no test images")]
    NoTestImages,
    #[error("protocol wants {protocol} LPIPS but the network is {network}")]
    BackboneMismatch {
        protocol: LpipsBackbone,
        network: LpipsBackbone,
    },
    #[error("predictions manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("image {id:?}: {source}")]
    Image { id: String, source: ImageError },
    #[error("image {id:?}: {source}")]
    ImageOp { id: String, source: ImageOpError },
    #[error("image {id:?}: {source}")]
    Metric { id: String, source: MetricError },
    #[error("image {id:?}: LPIPS: {source}")]
    Lpips { id: String, source: LpipsError },
    #[error("method lacks a required capability: {0}")]
    Capability(MethodError),
    #[error("method call failed: {0}")]
    Method(MethodError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl EvalError {
    /// Whether the failure lies in the inputs (as opposed to the computation
    /// or a method capability).
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            EvalError::MissingPredictions(_)
                | EvalError::UnexpectedPredictions(_)
                | EvalError::ShapeMismatch { .. }
                | EvalError::MissingGroundTruth(_)
                | EvalError::NoTestImages
                | EvalError::BackboneMismatch { .. }
                | EvalError::Manifest { .. }
                | EvalError::Image { .. }
                | EvalError::Io(_)
        )
    }
}

fn method_error(e: MethodError) -> EvalError {
    if e.kind == ErrorKind::Capability {
        EvalError::Capability(e)
    } else {
        EvalError::Method(e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionManifest {
    pub method_id: String,
    /// Image id → file name inside the prediction directory.
    pub images: BTreeMap<String, String>,
    #[serde(default)]
    pub checkpoint: Option<String>,
}

/// Predicted images of one method on one scene's test split.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub dir: PathBuf,
    pub manifest: PredictionManifest,
}

impl PredictionSet {
    /// Reads `predictions.json`, or, without one, every `<id>.png` in `dir`.
    pub fn load(dir: &Path) -> Result<PredictionSet, EvalError> {
        let path = dir.join(PREDICTIONS_MANIFEST);
        let manifest = if path.is_file() {
            let text = std::fs::read_to_string(&path)?;
            serde_json::from_str(&text).map_err(|e| EvalError::Manifest {
                path: path.clone(),
                message: e.to_string(),
            })?
        } else {
            let mut images = BTreeMap::new();
            for entry in std::fs::read_dir(dir)? {
                let p = entry?.path();
                if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
                    let stem = p.file_stem().unwrap().to_string_lossy().into_owned();
                    let name = p.file_name().unwrap().to_string_lossy().into_owned();
                    images.insert(stem, name);
                }
            }
            PredictionManifest {
                method_id: "unknown".into(),
                images,
                checkpoint: None,
            }
        };
        Ok(PredictionSet {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    /// Writes `<id>.png` files plus the manifest.
    pub fn write(
        dir: &Path,
        method_id: &str,
        images: &[(String, Image)],
        checkpoint: Option<String>,
    ) -> Result<PredictionSet, EvalError> {
        std::fs::create_dir_all(dir)?;
        let mut names = BTreeMap::new();
        for (id, img) in images {
            let name = format!("{id}.png");
            let bytes = quantize_u8(img).encode_png().map_err(|source| EvalError::Image {
                id: id.clone(),
                source,
            })?;
            std::fs::write(dir.join(&name), bytes)?;
            names.insert(id.clone(), name);
        }
        let manifest = PredictionManifest {
            method_id: method_id.into(),
            images: names,
            checkpoint,
        };
        std::fs::write(
            dir.join(PREDICTIONS_MANIFEST),
            to_canonical_json(&manifest).expect("manifest serializes"),
        )?;
        Ok(PredictionSet {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn path_of(&self, id: &str) -> Option<PathBuf> {
        self.manifest.images.get(id).map(|n| self.dir.join(n))
    }
}

/// Identifies what a results document describes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunLabels {
    pub method_id: String,
    pub dataset_id: String,
    pub scene_id: String,
}

/// One prediction paired with its ground truth.
#[derive(Debug, Clone)]
pub struct EvalPair {
    pub id: String,
    pub prediction: Image,
    pub ground_truth: Arc<Image>,
    /// Content hash recorded for the prediction.
    pub checksum: String,
}

fn to_rgb(img: &Image, background: Option<[f64; 3]>, id: &str) -> Result<Image, EvalError> {
    match (img.channels(), background) {
        (3, _) => Ok(img.clone()),
        (4, Some(bg)) => blend_background(img, bg).map_err(|source| EvalError::ImageOp {
            id: id.into(),
            source,
        }),
        (c, _) => {
            // Without a background, alpha is ignored and gray is replicated.
            let n = img.width() * img.height();
            let data: Vec<f64> = (0..n)
                .flat_map(|i| (0..3).map(move |k| (i, k)))
                .map(|(i, k)| img.value_at(i * c + if c >= 3 { k } else { 0 }))
                .collect();
            Ok(Image::from_float(img.width(), img.height(), 3, data).expect("shape"))
        }
    }
}

/// Ground truth as scored: RGB (blended when the protocol says so), u8.
pub fn prepare_ground_truth(img: &Image, protocol: &EvalProtocol, id: &str) -> Result<Image, EvalError> {
    let rgb = match img.pixels() {
        crate::image::Pixels::U8(_) if img.channels() == 3 => return Ok(img.clone()),
        _ => to_rgb(img, protocol.background, id)?,
    };
    Ok(quantize_u8(&rgb))
}

fn prepare_prediction(img: &Image, protocol: &EvalProtocol, id: &str) -> Result<Image, EvalError> {
    let rgb = to_rgb(img, protocol.background, id)?;
    Ok(if protocol.quantize_before_metrics {
        quantize_u8(&rgb)
    } else {
        rgb
    })
}

fn check_backbone(protocol: &EvalProtocol, net: &LpipsNetwork) -> Result<(), EvalError> {
    if protocol.lpips_backbone != net.backbone() {
        return Err(EvalError::BackboneMismatch {
            protocol: protocol.lpips_backbone,
            network: net.backbone(),
        });
    }
    Ok(())
}

fn check_shape(id: &str, pred: &Image, gt: &Image) -> Result<(), EvalError> {
    if (pred.width(), pred.height()) != (gt.width(), gt.height()) {
        return Err(EvalError::ShapeMismatch {
            id: id.into(),
            expected: (gt.width(), gt.height()),
            found: (pred.width(), pred.height()),
        });
    }
    Ok(())
}

fn score(id: &str, pred: &Image, gt: &Image, net: &LpipsNetwork) -> Result<MetricRecord, EvalError> {
    let metric = |source| EvalError::Metric { id: id.into(), source };
    check_shape(id, pred, gt)?;
    let p = pred.to_float01();
    let g = gt.to_float01();
    Ok(MetricRecord {
        image_id: id.into(),
        psnr: psnr(&p, &g).map_err(metric)?,
        ssim: ssim(&p, &g, &SsimConfig::default()).map_err(metric)?,
        lpips: net.distance(&p, &g).map_err(|source| EvalError::Lpips {
            id: id.into(),
            source,
        })?,
    })
}

fn document(
    labels: &RunLabels,
    protocol: &EvalProtocol,
    net: &LpipsNetwork,
    per_image: Vec<MetricRecord>,
    checksums: BTreeMap<String, String>,
) -> Result<ResultsDocument, EvalError> {
    let aggregates = aggregate(&per_image).map_err(|source| EvalError::Metric {
        id: "<aggregate>".into(),
        source,
    })?;
    Ok(ResultsDocument {
        method_id: labels.method_id.clone(),
        dataset_id: labels.dataset_id.clone(),
        scene_id: labels.scene_id.clone(),
        protocol_id: protocol.id.clone(),
        per_image,
        aggregates,
        checksums,
        tool_version: tool_version(&format!("lpips checkpoint {}", net.checkpoint_tag())),
    })
}

/// Scores in-memory pairs. Records come out in input order; pairs are
/// processed in parallel on the current rayon pool. Under the `nerfw_half`
/// appearance protocol only the right `floor(W/2)` columns are scored.
pub fn evaluate_pairs(
    pairs: &[EvalPair],
    protocol: &EvalProtocol,
    net: &LpipsNetwork,
    labels: &RunLabels,
) -> Result<ResultsDocument, EvalError> {
    check_backbone(protocol, net)?;
    if pairs.is_empty() {
        return Err(EvalError::NoTestImages);
    }
    let per_image = pairs
        .par_iter()
        .map(|p| {
            let gt = prepare_ground_truth(&p.ground_truth, protocol, &p.id)?;
            let pred = prepare_prediction(&p.prediction, protocol, &p.id)?;
            if protocol.appearance_protocol == AppearanceProtocol::NerfwHalf {
                check_shape(&p.id, &pred, &gt)?;
                let op = |source| EvalError::ImageOp { id: p.id.clone(), source };
                let (_, pred_right) = crop_halves(&pred).map_err(op)?;
                let (_, gt_right) = crop_halves(&gt).map_err(op)?;
                return score(&p.id, &pred_right, &gt_right, net);
            }
            score(&p.id, &pred, &gt, net)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let checksums = pairs.iter().map(|p| (p.id.clone(), p.checksum.clone())).collect();
    document(labels, protocol, net, per_image, checksums)
}

fn test_images(ds: &SceneDataset) -> Result<Vec<&SceneImage>, EvalError> {
    let test: Vec<&SceneImage> = ds.split(Split::Test).collect();
    if test.is_empty() {
        return Err(EvalError::NoTestImages);
    }
    Ok(test)
}

/// Scores a prediction directory against the test split of `ds`, whose
/// pixels must already come from the protocol's image source.
pub fn evaluate(
    preds: &PredictionSet,
    ds: &SceneDataset,
    protocol: &EvalProtocol,
    net: &LpipsNetwork,
    dataset_id: &str,
) -> Result<ResultsDocument, EvalError> {
    check_backbone(protocol, net)?;
    let test = test_images(ds)?;
    let wanted: BTreeSet<&str> = test.iter().map(|i| i.id.as_str()).collect();
    let missing: Vec<String> = wanted
        .iter()
        .filter(|id| !preds.manifest.images.contains_key(**id))
        .map(|s| s.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(EvalError::MissingPredictions(missing));
    }
    let extra: Vec<String> = preds
        .manifest
        .images
        .keys()
        .filter(|k| !wanted.contains(k.as_str()))
        .cloned()
        .collect();
    if !extra.is_empty() {
        return Err(EvalError::UnexpectedPredictions(extra));
    }

    let pairs = test
        .par_iter()
        .map(|img| {
            let path = preds.path_of(&img.id).expect("coverage checked");
            if !path.is_file() {
                return Err(EvalError::MissingPredictions(vec![img.id.clone()]));
            }
            let bytes = std::fs::read(&path)?;
            let prediction = Image::decode(&bytes, &path.display().to_string()).map_err(|source| {
                EvalError::Image {
                    id: img.id.clone(),
                    source,
                }
            })?;
            let ground_truth = img
                .image
                .clone()
                .ok_or_else(|| EvalError::MissingGroundTruth(img.id.clone()))?;
            Ok(EvalPair {
                id: img.id.clone(),
                prediction,
                ground_truth,
                checksum: sha256_hex(&bytes),
            })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    let labels = RunLabels {
        method_id: preds.manifest.method_id.clone(),
        dataset_id: dataset_id.into(),
        scene_id: ds.name.clone(),
    };
    evaluate_pairs(&pairs, protocol, net, &labels)
}

/// Renders every test view of `ds` with `method`.
///
/// Under the `nerfw_half` appearance protocol each view's embedding is first
/// fitted on a single-image dataset holding the left `ceil(W/2)` columns of
/// its ground truth (skipped when `optimize` is false). Calls are sequential
/// since a method session is single-threaded. Renders come back quantized.
pub fn render_test_views(
    method: &mut dyn MethodApi,
    ds: &SceneDataset,
    protocol: &EvalProtocol,
    optimize: bool,
) -> Result<Vec<(String, Image)>, EvalError> {
    let info = method.get_info().map_err(method_error)?;
    let nerfw = protocol.appearance_protocol == AppearanceProtocol::NerfwHalf;
    if nerfw && optimize && !info.capabilities.supports_embeddings {
        return Err(EvalError::Capability(MethodError::new(
            ErrorKind::Capability,
            format!(
                "protocol {} fits appearance embeddings but {} does not support them",
                protocol.id, info.method_id
            ),
        )));
    }
    let mut out = Vec::new();
    for img in test_images(ds)? {
        let id = img.id.as_str();
        let camera = img.camera.as_ref().ok_or_else(|| EvalError::MissingGroundTruth(id.into()))?;
        let embedding = if nerfw && optimize {
            let gt_raw = img.image.as_ref().ok_or_else(|| EvalError::MissingGroundTruth(id.into()))?;
            let gt = prepare_ground_truth(gt_raw, protocol, id)?;
            let (left, _) = crop_halves(&gt).map_err(|source| EvalError::ImageOp { id: id.into(), source })?;
            let mut left_camera = camera.clone();
            left_camera.width = left.width() as u32;
            let single = SceneDataset {
                name: format!("{}-{id}-left", ds.name),
                images: vec![SceneImage {
                    camera: Some(left_camera),
                    image: Some(Arc::new(left)),
                    split: Split::Train,
                    ..img.clone()
                }],
                points3d: None,
                metadata: ds.metadata.clone(),
            };
            Some(method.optimize_embedding(&single, None).map_err(method_error)?)
        } else {
            None
        };
        let render = method
            .render(
                camera,
                &RenderOptions {
                    embedding,
                    output_names: None,
                },
            )
            .map_err(method_error)?;
        out.push((id.to_string(), quantize_u8(&render)));
    }
    Ok(out)
}

/// Renders and scores the test split in one go; equivalent to writing the
/// renders with [`PredictionSet::write`] and running [`evaluate`].
pub fn evaluate_method(
    method: &mut dyn MethodApi,
    ds: &SceneDataset,
    protocol: &EvalProtocol,
    net: &LpipsNetwork,
    dataset_id: &str,
    optimize: bool,
) -> Result<ResultsDocument, EvalError> {
    check_backbone(protocol, net)?;
    let method_id = method.get_info().map_err(method_error)?.method_id;
    let renders = render_test_views(method, ds, protocol, optimize)?;
    let mut pairs = Vec::with_capacity(renders.len());
    for (id, prediction) in renders {
        let img = ds.find(&id).expect("rendered from ds");
        let bytes = prediction.encode_png().map_err(|source| EvalError::Image {
            id: id.clone(),
            source,
        })?;
        pairs.push(EvalPair {
            ground_truth: img
                .image
                .clone()
                .ok_or_else(|| EvalError::MissingGroundTruth(id.clone()))?,
            id,
            prediction,
            checksum: sha256_hex(&bytes),
        });
    }
    let labels = RunLabels {
        method_id,
        dataset_id: dataset_id.into(),
        scene_id: ds.name.clone(),
    };
    evaluate_pairs(&pairs, protocol, net, &labels)
}
