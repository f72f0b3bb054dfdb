//! `ref-splat`, the reference method used to exercise the whole pipeline.
//!
//! The scene is the dataset's 3D points, each drawn as a square splat of
//! fixed pixel radius with a z-buffer, over a learned uniform background.
//! Training nudges every point that wins the z-buffer at its own projected
//! center toward the observed pixel there, and the background toward the
//! mean of uncovered pixels. The appearance embedding is a per-image RGB
//! gain, fitted in closed form by least squares.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::camera::{Camera, Projection};
use crate::canonical::to_canonical_json;
use crate::dataset::{SceneDataset, Split};
use crate::image::Image;
use crate::imageops::quantize_value;
use crate::method::{
    Capabilities, ErrorKind, MethodApi, MethodError, MethodInfo, RenderOptions, SetupRequest,
    TrainMetrics,
};
use crate::rng::SplitMix64;

pub const METHOD_ID: &str = "ref-splat";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const CHECKPOINT_FILE: &str = "checkpoint.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefSplatConfig {
    /// Splat half-width in pixels; a splat covers `(2r+1)²` pixels.
    pub radius: u32,
    pub learning_rate: f64,
    /// Seeds the perturbation of initial point colors.
    pub seed: u64,
    /// Amplitude of the seeded initial color perturbation.
    pub init_noise: f64,
    pub initial_background: [f64; 3],
}

impl Default for RefSplatConfig {
    fn default() -> Self {
        Self {
            radius: 1,
            learning_rate: 0.5,
            seed: 0,
            init_noise: 0.1,
            initial_background: [0.5, 0.5, 0.5],
        }
    }
}

impl RefSplatConfig {
    fn to_map(&self) -> BTreeMap<String, Value> {
        match serde_json::to_value(self).expect("config serializes") {
            Value::Object(m) => m.into_iter().collect(),
            _ => unreachable!(),
        }
    }

    /// Applies overrides; unknown keys and ill-typed values are rejected.
    pub fn with_overrides(&self, overrides: &BTreeMap<String, Value>) -> Result<Self, MethodError> {
        let mut map = self.to_map();
        for (k, v) in overrides {
            if !map.contains_key(k) {
                return Err(MethodError::new(
                    ErrorKind::InvalidArgument,
                    format!(
                        "unknown config override {k:?}; known keys: {}",
                        map.keys().cloned().collect::<Vec<_>>().join(", ")
                    ),
                ));
            }
            map.insert(k.clone(), v.clone());
        }
        serde_json::from_value(Value::Object(map.into_iter().collect()))
            .map_err(|e| MethodError::new(ErrorKind::InvalidArgument, format!("config override: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    method_id: String,
    config: RefSplatConfig,
    points: Vec<[f64; 3]>,
    colors: Vec<[f64; 3]>,
    background: [f64; 3],
}

#[derive(Debug, Clone)]
struct TrainView {
    camera: Camera,
    image: Arc<Image>,
}

#[derive(Debug, Clone)]
pub struct RefSplat {
    config: RefSplatConfig,
    supports_embeddings: bool,
    points: Vec<[f64; 3]>,
    colors: Vec<[f64; 3]>,
    background: [f64; 3],
    train: Vec<TrainView>,
    ready: bool,
}

impl Default for RefSplat {
    fn default() -> Self {
        Self::new(RefSplatConfig::default())
    }
}

fn invalid(msg: impl Into<String>) -> MethodError {
    MethodError::new(ErrorKind::InvalidArgument, msg)
}

fn precondition(msg: impl Into<String>) -> MethodError {
    MethodError::new(ErrorKind::Precondition, msg)
}

/// Per-pixel winning point (if any) for one camera.
struct Raster {
    width: usize,
    height: usize,
    owner: Vec<Option<usize>>,
    /// Rounded projected center of every point, when in front of the camera.
    centers: Vec<Option<(i64, i64)>>,
}

impl RefSplat {
    pub fn new(config: RefSplatConfig) -> Self {
        Self {
            background: config.initial_background,
            config,
            supports_embeddings: true,
            points: Vec::new(),
            colors: Vec::new(),
            train: Vec::new(),
            ready: false,
        }
    }

    /// Variant that advertises no embedding support.
    pub fn without_embeddings(mut self) -> Self {
        self.supports_embeddings = false;
        self
    }

    pub fn config(&self) -> &RefSplatConfig {
        &self.config
    }

    pub fn colors(&self) -> &[[f64; 3]] {
        &self.colors
    }

    pub fn background(&self) -> [f64; 3] {
        self.background
    }

    /// Starts from explicit points and colors, without a dataset.
    pub fn from_points(config: RefSplatConfig, points: Vec<[f64; 3]>, colors: Vec<[f64; 3]>, background: [f64; 3]) -> Self {
        assert_eq!(points.len(), colors.len());
        Self {
            points,
            colors,
            background,
            ready: true,
            ..Self::new(config)
        }
    }

    fn info(&self) -> MethodInfo {
        MethodInfo {
            method_id: METHOD_ID.into(),
            capabilities: Capabilities {
                supports_embeddings: self.supports_embeddings,
                supports_mesh_export: true,
            },
            hyperparameters: self.config.to_map(),
            checkpoint_format_version: CHECKPOINT_FORMAT_VERSION,
        }
    }

    fn rasterize(&self, cam: &Camera) -> Result<Raster, MethodError> {
        if cam.width == 0 || cam.height == 0 {
            return Err(invalid(format!("camera has zero size {}x{}", cam.width, cam.height)));
        }
        let (w, h) = (cam.width as usize, cam.height as usize);
        let r = self.config.radius as i64;
        let mut depth = vec![f64::INFINITY; w * h];
        let mut owner = vec![None; w * h];
        let mut centers = Vec::with_capacity(self.points.len());
        for (i, &p) in self.points.iter().enumerate() {
            let proj = cam.project(p).map_err(|e| invalid(format!("camera: {e}")))?;
            let Projection::Pixel(px) = proj else {
                centers.push(None);
                continue;
            };
            if !(px[0].is_finite() && px[1].is_finite()) || px[0].abs() > 1e9 || px[1].abs() > 1e9 {
                centers.push(None);
                continue;
            }
            let z = cam.pose.transform_point(p)[2];
            // Pixel x covers [x - 0.5, x + 0.5).
            let (u, v) = ((px[0] + 0.5).floor() as i64, (px[1] + 0.5).floor() as i64);
            centers.push(Some((u, v)));
            for y in (v - r).max(0)..=(v + r).min(h as i64 - 1) {
                for x in (u - r).max(0)..=(u + r).min(w as i64 - 1) {
                    let k = y as usize * w + x as usize;
                    if z < depth[k] {
                        depth[k] = z;
                        owner[k] = Some(i);
                    }
                }
            }
        }
        Ok(Raster {
            width: w,
            height: h,
            owner,
            centers,
        })
    }

    fn shade(&self, raster: &Raster, gain: [f64; 3]) -> Vec<f64> {
        let mut out = Vec::with_capacity(raster.owner.len() * 3);
        for o in &raster.owner {
            let c = o.map_or(self.background, |i| self.colors[i]);
            for ch in 0..3 {
                out.push(c[ch] * gain[ch]);
            }
        }
        out
    }

    /// Unquantized render with values possibly outside [0, 1].
    fn render_linear(&self, cam: &Camera, gain: [f64; 3]) -> Result<(Raster, Vec<f64>), MethodError> {
        let raster = self.rasterize(cam)?;
        let px = self.shade(&raster, gain);
        Ok((raster, px))
    }

    fn init_from_dataset(&mut self, ds: &SceneDataset) -> Result<(), MethodError> {
        let pts = ds
            .points3d
            .as_ref()
            .filter(|p| !p.is_empty())
            .ok_or_else(|| invalid("ref-splat needs a dataset with 3D points"))?;
        let mut rng = SplitMix64::new(self.config.seed);
        self.points = pts.iter().map(|p| p.xyz).collect();
        self.colors = pts
            .iter()
            .map(|p| {
                let mut c = [0.0; 3];
                for ch in 0..3 {
                    let noise = (2.0 * rng.next_unit() - 1.0) * self.config.init_noise;
                    c[ch] = (p.rgb[ch] as f64 / 255.0 + noise).clamp(0.0, 1.0);
                }
                c
            })
            .collect();
        self.background = self.config.initial_background;
        Ok(())
    }

    fn set_train_views(&mut self, ds: &SceneDataset) {
        let has_train = ds.images.iter().any(|i| i.split == Split::Train);
        self.train = ds
            .images
            .iter()
            .filter(|i| !has_train || i.split == Split::Train)
            .filter_map(|i| {
                Some(TrainView {
                    camera: i.camera.clone()?,
                    image: i.image.clone()?,
                })
            })
            .collect();
    }

    fn load_checkpoint(&mut self, path: &Path) -> Result<(), MethodError> {
        let file = if path.is_dir() { path.join(CHECKPOINT_FILE) } else { path.to_path_buf() };
        let text = std::fs::read_to_string(&file)
            .map_err(|e| invalid(format!("cannot read checkpoint {}: {e}", file.display())))?;
        let ck: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| invalid(format!("malformed checkpoint {}: {e}", file.display())))?;
        if ck.format_version != CHECKPOINT_FORMAT_VERSION || ck.method_id != METHOD_ID {
            return Err(invalid(format!(
                "checkpoint is {} v{}, expected {METHOD_ID} v{CHECKPOINT_FORMAT_VERSION}",
                ck.method_id, ck.format_version
            )));
        }
        if ck.points.len() != ck.colors.len() {
            return Err(invalid("checkpoint point and color counts differ"));
        }
        self.config = ck.config;
        self.points = ck.points;
        self.colors = ck.colors;
        self.background = ck.background;
        Ok(())
    }

    fn check_ready(&self) -> Result<(), MethodError> {
        if !self.ready {
            return Err(precondition("setup has not been called"));
        }
        Ok(())
    }
}

impl MethodApi for RefSplat {
    fn get_info(&mut self) -> Result<MethodInfo, MethodError> {
        Ok(self.info())
    }

    fn setup(&mut self, request: SetupRequest) -> Result<MethodInfo, MethodError> {
        request.check()?;
        if let Some(ck) = &request.checkpoint {
            self.load_checkpoint(ck)?;
        }
        self.config = self.config.with_overrides(&request.config_overrides)?;
        if let Some(ds) = &request.train_dataset {
            if request.checkpoint.is_none() {
                self.init_from_dataset(ds)?;
            }
            self.set_train_views(ds);
        } else {
            self.train.clear();
        }
        self.ready = true;
        Ok(self.info())
    }

    fn train_iteration(&mut self, step: u64) -> Result<TrainMetrics, MethodError> {
        self.check_ready()?;
        if self.train.is_empty() {
            return Err(precondition("no training images; setup was called without a dataset"));
        }
        let view = self.train[(step % self.train.len() as u64) as usize].clone();
        let (raster, px) = self.render_linear(&view.camera, [1.0; 3])?;
        let img = &view.image;
        if (img.width(), img.height()) != (raster.width, raster.height) {
            return Err(invalid("training image and camera sizes differ"));
        }
        let observed = |x: usize, y: usize| -> [f64; 3] {
            if img.channels() >= 3 {
                [img.value(x, y, 0), img.value(x, y, 1), img.value(x, y, 2)]
            } else {
                [img.value(x, y, 0); 3]
            }
        };
        let mut sq = 0.0;
        let mut bg_sum = [0.0; 3];
        let mut bg_count = 0usize;
        for y in 0..raster.height {
            for x in 0..raster.width {
                let k = y * raster.width + x;
                let o = observed(x, y);
                for ch in 0..3 {
                    let d = px[3 * k + ch] - o[ch];
                    sq += d * d;
                }
                if raster.owner[k].is_none() {
                    for ch in 0..3 {
                        bg_sum[ch] += o[ch];
                    }
                    bg_count += 1;
                }
            }
        }
        let lr = self.config.learning_rate;
        let mut updated = 0usize;
        for (i, c) in raster.centers.iter().enumerate() {
            let Some((u, v)) = *c else { continue };
            if u < 0 || v < 0 || u >= raster.width as i64 || v >= raster.height as i64 {
                continue;
            }
            let (u, v) = (u as usize, v as usize);
            if raster.owner[v * raster.width + u] != Some(i) {
                continue;
            }
            let o = observed(u, v);
            for ch in 0..3 {
                self.colors[i][ch] += lr * (o[ch] - self.colors[i][ch]);
            }
            updated += 1;
        }
        if bg_count > 0 {
            for ch in 0..3 {
                let mean = bg_sum[ch] / bg_count as f64;
                self.background[ch] += lr * (mean - self.background[ch]);
            }
        }
        let loss = sq / (3 * raster.width * raster.height) as f64;
        Ok(BTreeMap::from([
            ("loss".to_string(), loss),
            ("points_updated".to_string(), updated as f64),
        ]))
    }

    fn render(&mut self, camera: &Camera, options: &RenderOptions) -> Result<Image, MethodError> {
        self.check_ready()?;
        if let Some(names) = &options.output_names {
            if let Some(bad) = names.iter().find(|n| n.as_str() != "color") {
                return Err(invalid(format!("unsupported output {bad:?}; ref-splat renders only \"color\"")));
            }
        }
        let gain = match &options.embedding {
            None => [1.0; 3],
            Some(e) if e.len() == 3 => [e[0], e[1], e[2]],
            Some(e) => return Err(invalid(format!("embedding must have 3 entries, got {}", e.len()))),
        };
        let (raster, px) = self.render_linear(camera, gain)?;
        let data = px.into_iter().map(quantize_value).collect();
        Image::from_u8(raster.width, raster.height, 3, data).map_err(|e| invalid(e.to_string()))
    }

    fn save(&mut self, path: &Path) -> Result<(), MethodError> {
        self.check_ready()?;
        let io = |e: std::io::Error| MethodError::new(ErrorKind::Io, format!("{}: {e}", path.display()));
        std::fs::create_dir_all(path).map_err(io)?;
        let ck = Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            method_id: METHOD_ID.into(),
            config: self.config.clone(),
            points: self.points.clone(),
            colors: self.colors.clone(),
            background: self.background,
        };
        let text = to_canonical_json(&ck).expect("checkpoint serializes");
        std::fs::write(path.join(CHECKPOINT_FILE), text).map_err(io)
    }

    fn optimize_embedding(
        &mut self,
        dataset: &SceneDataset,
        initial: Option<&[f64]>,
    ) -> Result<Vec<f64>, MethodError> {
        if !self.supports_embeddings {
            return Err(MethodError::new(
                ErrorKind::Capability,
                "this ref-splat instance was started without embedding support",
            ));
        }
        self.check_ready()?;
        let [img] = dataset.images.as_slice() else {
            return Err(invalid(format!(
                "optimize_embedding expects a single-image dataset, got {} images",
                dataset.images.len()
            )));
        };
        let cam = img.camera.as_ref().ok_or_else(|| invalid("image has no camera"))?;
        let pixels = img.image.as_ref().ok_or_else(|| invalid("image has no pixels"))?;
        if (pixels.width(), pixels.height()) != (cam.width as usize, cam.height as usize) {
            return Err(invalid("image and camera sizes differ"));
        }
        let (_, base) = self.render_linear(cam, [1.0; 3])?;
        let fallback = match initial {
            Some(e) if e.len() == 3 => [e[0], e[1], e[2]],
            Some(e) => return Err(invalid(format!("initial embedding must have 3 entries, got {}", e.len()))),
            None => [1.0; 3],
        };
        let mut gain = [0.0; 3];
        for ch in 0..3 {
            let (mut num, mut den) = (0.0, 0.0);
            for k in 0..base.len() / 3 {
                let (x, y) = (k % pixels.width(), k / pixels.width());
                let o = pixels.value(x, y, ch.min(pixels.channels() - 1));
                num += base[3 * k + ch] * o;
                den += base[3 * k + ch] * base[3 * k + ch];
            }
            gain[ch] = if den > 0.0 { num / den } else { fallback[ch] };
        }
        Ok(gain.to_vec())
    }

    fn export_mesh(&mut self, path: &Path, _options: &Value) -> Result<(), MethodError> {
        self.check_ready()?;
        let io = |e: std::io::Error| MethodError::new(ErrorKind::Io, format!("{}: {e}", path.display()));
        let mut out = Vec::new();
        writeln!(
            out,
            "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nend_header",
            self.points.len()
        )
        .map_err(io)?;
        for (p, c) in self.points.iter().zip(&self.colors) {
            writeln!(
                out,
                "{:?} {:?} {:?} {} {} {}",
                p[0],
                p[1],
                p[2],
                quantize_value(c[0]),
                quantize_value(c[1]),
                quantize_value(c[2])
            )
            .map_err(io)?;
        }
        std::fs::write(path, out).map_err(io)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::Pose;
    use serde_json::json;

    fn red_point() -> RefSplat {
        RefSplat::from_points(
            RefSplatConfig::default(),
            vec![[0.0, 0.0, 1.0]],
            vec![[1.0, 0.0, 0.0]],
            [0.0, 0.0, 0.0],
        )
    }

    #[test]
    fn red_point_lands_on_principal_point() {
        let mut m = red_point();
        let cam = Camera::pinhole(9, 7, 10.0, 10.0, 4.0, 3.0);
        let img = m.render(&cam, &RenderOptions::default()).unwrap();
        let px = img.as_u8().unwrap();
        let at = |x: usize, y: usize| &px[(y * 9 + x) * 3..][..3];
        assert_eq!(at(4, 3), &[255, 0, 0]);
        assert_eq!(at(5, 4), &[255, 0, 0]);
        assert_eq!(at(6, 3), &[0, 0, 0]);
        let red = px.chunks(3).filter(|c| c[0] == 255).count();
        assert_eq!(red, 9);
    }

    #[test]
    fn nearer_point_wins() {
        let mut m = RefSplat::from_points(
            RefSplatConfig::default(),
            vec![[0.0, 0.0, 2.0], [0.0, 0.0, 1.0]],
            vec![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            [0.0; 3],
        );
        let cam = Camera::pinhole(5, 5, 4.0, 4.0, 2.0, 2.0);
        let img = m.render(&cam, &RenderOptions::default()).unwrap();
        assert_eq!(&img.as_u8().unwrap()[(2 * 5 + 2) * 3..][..3], &[0, 255, 0]);
    }

    #[test]
    fn point_behind_camera_is_invisible() {
        let mut m = red_point();
        let cam = Camera::pinhole(5, 5, 4.0, 4.0, 2.0, 2.0).with_pose(Pose {
            qvec: [0.0, 0.0, 1.0, 0.0],
            tvec: [0.0; 3],
        });
        let img = m.render(&cam, &RenderOptions::default()).unwrap();
        assert!(img.as_u8().unwrap().iter().all(|&v| v == 0));
    }

    #[test]
    fn zero_width_camera_is_argument_error() {
        let mut m = red_point();
        let err = m.render(&Camera::pinhole(0, 5, 1.0, 1.0, 0.0, 0.0), &RenderOptions::default()).unwrap_err();
        assert_eq!(err.kind, ErrorKind::InvalidArgument);
    }

    #[test]
    fn setup_requires_an_input() {
        let err = RefSplat::default().setup(SetupRequest::default()).unwrap_err();
        assert_eq!(err.kind, ErrorKind::Precondition);
    }

    #[test]
    fn overrides() {
        let cfg = RefSplatConfig::default();
        let o = BTreeMap::from([("radius".to_string(), json!(3))]);
        assert_eq!(cfg.with_overrides(&o).unwrap().radius, 3);
        let bad = BTreeMap::from([("nope".to_string(), json!(1))]);
        assert_eq!(cfg.with_overrides(&bad).unwrap_err().kind, ErrorKind::InvalidArgument);
        let ill = BTreeMap::from([("radius".to_string(), json!("big"))]);
        assert!(cfg.with_overrides(&ill).is_err());
    }

    #[test]
    fn gain_is_recovered_exactly() {
        let mut m = red_point();
        m.background = [0.2, 0.4, 0.6];
        let cam = Camera::pinhole(9, 7, 10.0, 10.0, 4.0, 3.0);
        let (_, base) = m.render_linear(&cam, [1.0; 3]).unwrap();
        let target: Vec<f64> = base
            .chunks(3)
            .flat_map(|c| [c[0] * 0.5, c[1] * 1.25, c[2] * 0.75])
            .collect();
        let img = Image::from_float(9, 7, 3, target).unwrap();
        let ds = SceneDataset {
            images: vec![crate::dataset::SceneImage {
                id: "a".into(),
                file_name: "a.png".into(),
                path: "a.png".into(),
                camera: Some(cam),
                split: Split::Test,
                image: Some(Arc::new(img)),
            }],
            ..Default::default()
        };
        let g = m.optimize_embedding(&ds, None).unwrap();
        for (a, b) in g.iter().zip([0.5, 1.25, 0.75]) {
            assert!((a - b).abs() < 1e-12, "{g:?}");
        }
    }
}
