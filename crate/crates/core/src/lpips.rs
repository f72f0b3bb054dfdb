//! Learned perceptual image patch similarity, run from a portable weight
//! container.
//!
//! A container is the 8-byte magic `LPIPSWC1`, a little-endian `u32` manifest
//! length, a UTF-8 JSON manifest and a payload of little-endian `f32`
//! tensors. The manifest records the layer sequence (convolution strides and
//! padding, pooling kernel and ceil mode, tap positions) so the file fully
//! determines the computation; the loader still insists that it matches the
//! canonical AlexNet or VGG-16 definition.
//!
//! Convolutions keep activations in `f32` but accumulate every output value
//! in `f64`, always in input-channel, kernel-row, kernel-column order, so the
//! result does not depend on the thread count.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::Image;
use crate::protocol::LpipsBackbone;
pub use crate::rng::SplitMix64;

pub const MAGIC: &[u8; 8] = b"LPIPSWC1";
pub const FORMAT_VERSION: u32 = 1;
/// Guards the channel normalization against all-zero feature vectors.
pub const NORMALIZE_EPS: f64 = 1e-10;
pub const MIN_SIDE: usize = 32;

/// Input scaling of the reference release, applied after mapping to [-1, 1].
pub const REFERENCE_SHIFT: [f32; 3] = [-0.030, -0.088, -0.188];
pub const REFERENCE_SCALE: [f32; 3] = [0.458, 0.448, 0.450];

#[derive(Debug, Error)]
pub enum LpipsError {
    #[error("not a weight container (bad magic)")]
    BadMagic,
    #[error("container truncated: {0}")]
    Truncated(&'static str),
    #[error("manifest is not valid JSON: {0}")]
    Manifest(String),
    #[error("unsupported container format version {found} (this build reads {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("container is for backbone {found}, expected {expected}")]
    BackboneMismatch {
        found: LpipsBackbone,
        expected: LpipsBackbone,
    },
    #[error("tensor {tensor:?} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        tensor: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor {0:?} is missing from the container")]
    MissingTensor(String),
    #[error("tensor {0:?} is not part of the architecture")]
    UnexpectedTensor(String),
    #[error("tensor {0:?} is listed more than once")]
    DuplicateTensor(String),
    #[error("tensor {tensor:?} lies outside the payload ({end} > {len} bytes)")]
    OutOfBounds { tensor: String, end: u64, len: u64 },
    #[error("tensors {0:?} and {1:?} overlap")]
    Overlap(String, String),
    #[error("layer list does not match the {0} architecture")]
    LayerMismatch(LpipsBackbone),
    #[error("linear weight tensor {0:?} has negative entries")]
    NegativeLinearWeight(String),
    #[error("tensor {0:?} has non-finite entries")]
    NonFinite(String),
    #[error("input must be RGB, got {0} channels")]
    NotRgb(usize),
    #[error("inputs differ in shape: {0:?} vs {1:?}")]
    ShapeDiffers((usize, usize), (usize, usize)),
    #[error("input {0}x{1} is smaller than {MIN_SIDE}x{MIN_SIDE}")]
    TooSmall(usize, usize),
    #[error("feature map vanished at layer {0}; input too small for this backbone")]
    Vanished(usize),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum LayerOp {
    Conv {
        weight: String,
        bias: String,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
        ceil_mode: bool,
    },
    /// Feature tap weighted by the named 1×1 linear layer.
    Tap { lin: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
}

impl TensorEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub backbone: LpipsBackbone,
    pub checkpoint_tag: String,
    pub layers: Vec<LayerOp>,
    pub tensors: Vec<TensorEntry>,
}

/// (in, out, kernel, stride, padding, pool-before) per AlexNet convolution.
const ALEX_CONVS: [(usize, usize, usize, usize, usize, bool); 5] = [
    (3, 64, 11, 4, 2, false),
    (64, 192, 5, 1, 2, true),
    (192, 384, 3, 1, 1, true),
    (384, 256, 3, 1, 1, false),
    (256, 256, 3, 1, 1, false),
];
const ALEX_INDICES: [usize; 5] = [0, 3, 6, 8, 10];

/// VGG-16 blocks: channel width and number of convolutions; a tap closes each.
const VGG_BLOCKS: [(usize, usize); 5] = [(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)];

/// Channel counts at the five taps.
pub fn tap_channels(backbone: LpipsBackbone) -> [usize; 5] {
    match backbone {
        LpipsBackbone::Alex => [64, 192, 384, 256, 256],
        LpipsBackbone::Vgg => [64, 128, 256, 512, 512],
    }
}

/// Canonical layer sequence and tensor shapes for a backbone. Tensor names
/// follow torchvision's `features.<index>` numbering.
pub fn architecture(backbone: LpipsBackbone) -> (Vec<LayerOp>, Vec<(String, Vec<usize>)>) {
    let mut ops = Vec::new();
    let mut tensors = vec![
        ("scaling.shift".to_string(), vec![3]),
        ("scaling.scale".to_string(), vec![3]),
    ];
    let mut conv = |ops: &mut Vec<LayerOp>, idx: usize, cin: usize, cout: usize, k: usize, s: usize, p: usize| {
        let w = format!("features.{idx}.weight");
        let b = format!("features.{idx}.bias");
        tensors.push((w.clone(), vec![cout, cin, k, k]));
        tensors.push((b.clone(), vec![cout]));
        ops.push(LayerOp::Conv {
            weight: w,
            bias: b,
            stride: s,
            padding: p,
        });
        ops.push(LayerOp::Relu);
    };
    match backbone {
        LpipsBackbone::Alex => {
            for (i, &(cin, cout, k, s, p, pool)) in ALEX_CONVS.iter().enumerate() {
                if pool {
                    ops.push(LayerOp::MaxPool {
                        kernel: 3,
                        stride: 2,
                        ceil_mode: false,
                    });
                }
                conv(&mut ops, ALEX_INDICES[i], cin, cout, k, s, p);
                ops.push(LayerOp::Tap { lin: format!("lin{i}") });
            }
        }
        LpipsBackbone::Vgg => {
            let mut idx = 0;
            let mut cin = 3;
            for (b, &(width, n)) in VGG_BLOCKS.iter().enumerate() {
                if b > 0 {
                    ops.push(LayerOp::MaxPool {
                        kernel: 2,
                        stride: 2,
                        ceil_mode: false,
                    });
                    idx += 1;
                }
                for _ in 0..n {
                    conv(&mut ops, idx, cin, width, 3, 1, 1);
                    idx += 2;
                    cin = width;
                }
                ops.push(LayerOp::Tap { lin: format!("lin{b}") });
            }
        }
    }
    for (i, c) in tap_channels(backbone).iter().enumerate() {
        tensors.push((format!("lin{i}"), vec![1, *c, 1, 1]));
    }
    (ops, tensors)
}

/// Assembles a container from a manifest header and named tensor data,
/// laying tensors out back to back in the given order.
pub fn write_container(
    backbone: LpipsBackbone,
    checkpoint_tag: &str,
    layers: Vec<LayerOp>,
    tensors: &[(String, Vec<usize>, Vec<f32>)],
) -> Vec<u8> {
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, shape, data) in tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            byte_offset: payload.len() as u64,
        });
        for v in data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        backbone,
        checkpoint_tag: checkpoint_tag.to_string(),
        layers,
        tensors: entries,
    };
    let header = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(12 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out
}

/// Splits a container into its manifest and payload without validation.
pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8]), LpipsError> {
    if bytes.len() < 8 {
        return Err(LpipsError::Truncated("magic"));
    }
    if &bytes[..8] != MAGIC {
        return Err(LpipsError::BadMagic);
    }
    let len_bytes = bytes.get(8..12).ok_or(LpipsError::Truncated("manifest length"))?;
    let len = u32::from_le_bytes(len_bytes.try_into().unwrap()) as usize;
    let header = bytes
        .get(12..12 + len)
        .ok_or(LpipsError::Truncated("manifest"))?;
    let text = std::str::from_utf8(header).map_err(|e| LpipsError::Manifest(e.to_string()))?;
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| LpipsError::Manifest(e.to_string()))?;
    // Check the version before the rest of the schema so future formats get
    // a clear error instead of a field complaint.
    let version = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| LpipsError::Manifest("missing format_version".into()))?;
    if version != FORMAT_VERSION as u64 {
        return Err(LpipsError::VersionMismatch {
            found: version as u32,
            expected: FORMAT_VERSION,
        });
    }
    let manifest: Manifest =
        serde_json::from_value(value).map_err(|e| LpipsError::Manifest(e.to_string()))?;
    Ok((manifest, &bytes[12 + len..]))
}

#[derive(Debug, Clone)]
struct Conv {
    cin: usize,
    cout: usize,
    k: usize,
    stride: usize,
    padding: usize,
    weight: Vec<f32>,
    bias: Vec<f32>,
}

#[derive(Debug, Clone)]
enum Layer {
    Conv(Conv),
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
        ceil_mode: bool,
    },
    Tap(Vec<f32>),
}

/// A loaded, read-only network; share it freely across threads.
#[derive(Debug, Clone)]
pub struct LpipsNetwork {
    backbone: LpipsBackbone,
    checkpoint_tag: String,
    shift: [f32; 3],
    scale: [f32; 3],
    layers: Vec<Layer>,
}

/// Loads and validates a container, taking the backbone from its manifest.
pub fn load_weights(bytes: &[u8]) -> Result<LpipsNetwork, LpipsError> {
    load(bytes, None)
}

/// Loads a container that must hold the given backbone's weights.
pub fn load_weights_as(bytes: &[u8], backbone: LpipsBackbone) -> Result<LpipsNetwork, LpipsError> {
    load(bytes, Some(backbone))
}

pub fn load_weights_file(path: &std::path::Path) -> Result<LpipsNetwork, LpipsError> {
    load_weights(&std::fs::read(path)?)
}

fn load(bytes: &[u8], expected: Option<LpipsBackbone>) -> Result<LpipsNetwork, LpipsError> {
    let (manifest, payload) = read_manifest(bytes)?;
    let backbone = expected.unwrap_or(manifest.backbone);
    let (ops, shapes) = architecture(backbone);

    let mut listed: BTreeMap<&str, &TensorEntry> = BTreeMap::new();
    for t in &manifest.tensors {
        if listed.insert(t.name.as_str(), t).is_some() {
            return Err(LpipsError::DuplicateTensor(t.name.clone()));
        }
    }
    for (name, shape) in &shapes {
        let t = listed
            .get(name.as_str())
            .ok_or_else(|| LpipsError::MissingTensor(name.clone()))?;
        if &t.shape != shape {
            return Err(LpipsError::ShapeMismatch {
                tensor: name.clone(),
                expected: shape.clone(),
                found: t.shape.clone(),
            });
        }
    }
    if let Some(extra) = manifest
        .tensors
        .iter()
        .find(|t| !shapes.iter().any(|(n, _)| *n == t.name))
    {
        return Err(LpipsError::UnexpectedTensor(extra.name.clone()));
    }
    if manifest.backbone != backbone {
        return Err(LpipsError::BackboneMismatch {
            found: manifest.backbone,
            expected: backbone,
        });
    }
    if manifest.layers != ops {
        return Err(LpipsError::LayerMismatch(backbone));
    }

    let mut spans: Vec<(u64, u64, &str)> = Vec::new();
    for t in &manifest.tensors {
        let end = t.byte_offset + 4 * t.numel() as u64;
        if end > payload.len() as u64 {
            return Err(LpipsError::OutOfBounds {
                tensor: t.name.clone(),
                end,
                len: payload.len() as u64,
            });
        }
        spans.push((t.byte_offset, end, &t.name));
    }
    spans.sort();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(LpipsError::Overlap(w[0].2.to_string(), w[1].2.to_string()));
        }
    }

    let mut data: HashMap<&str, Vec<f32>> = HashMap::new();
    for t in &manifest.tensors {
        let start = t.byte_offset as usize;
        let v: Vec<f32> = payload[start..start + 4 * t.numel()]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if v.iter().any(|x| !x.is_finite()) {
            return Err(LpipsError::NonFinite(t.name.clone()));
        }
        data.insert(t.name.as_str(), v);
    }
    let mut take = |name: &str| data.remove(name).expect("presence checked above");

    let mut layers = Vec::with_capacity(ops.len());
    for op in &ops {
        layers.push(match op {
            LayerOp::Conv {
                weight,
                bias,
                stride,
                padding,
            } => {
                let shape = &shapes.iter().find(|(n, _)| n == weight).unwrap().1;
                Layer::Conv(Conv {
                    cout: shape[0],
                    cin: shape[1],
                    k: shape[2],
                    stride: *stride,
                    padding: *padding,
                    weight: take(weight),
                    bias: take(bias),
                })
            }
            LayerOp::Relu => Layer::Relu,
            LayerOp::MaxPool {
                kernel,
                stride,
                ceil_mode,
            } => Layer::MaxPool {
                kernel: *kernel,
                stride: *stride,
                ceil_mode: *ceil_mode,
            },
            LayerOp::Tap { lin } => {
                let w = take(lin);
                if w.iter().any(|&x| x < 0.0) {
                    return Err(LpipsError::NegativeLinearWeight(lin.clone()));
                }
                Layer::Tap(w)
            }
        });
    }
    let shift = take("scaling.shift");
    let scale = take("scaling.scale");
    Ok(LpipsNetwork {
        backbone,
        checkpoint_tag: manifest.checkpoint_tag,
        shift: [shift[0], shift[1], shift[2]],
        scale: [scale[0], scale[1], scale[2]],
        layers,
    })
}

/// Channel-major feature map.
#[derive(Debug, Clone)]
struct Tensor {
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f32>,
}

/// Rows of output computed together by one task.
const ROW_BLOCK: usize = 8;

fn conv_forward(conv: &Conv, x: &Tensor) -> Option<Tensor> {
    let (k, s, p) = (conv.k, conv.stride, conv.padding);
    let (ph, pw) = (x.h + 2 * p, x.w + 2 * p);
    if ph < k || pw < k {
        return None;
    }
    let (oh, ow) = ((ph - k) / s + 1, (pw - k) / s + 1);
    let padded = if p == 0 {
        x.data.clone()
    } else {
        let mut v = vec![0f32; x.c * ph * pw];
        for c in 0..x.c {
            for y in 0..x.h {
                let src = &x.data[(c * x.h + y) * x.w..][..x.w];
                v[(c * ph + y + p) * pw + p..][..x.w].copy_from_slice(src);
            }
        }
        v
    };
    let blocks = oh.div_ceil(ROW_BLOCK);
    let mut out = vec![0f32; conv.cout * oh * ow];
    out.par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(oc, plane)| {
            let mut acc = vec![0f64; ROW_BLOCK * ow];
            for b in 0..blocks {
                let y0 = b * ROW_BLOCK;
                let rows = ROW_BLOCK.min(oh - y0);
                let acc = &mut acc[..rows * ow];
                acc.fill(conv.bias[oc] as f64);
                for ic in 0..conv.cin {
                    let chan = &padded[ic * ph * pw..][..ph * pw];
                    let wbase = ((oc * conv.cin + ic) * k) * k;
                    for ky in 0..k {
                        for kx in 0..k {
                            let wv = conv.weight[wbase + ky * k + kx] as f64;
                            for r in 0..rows {
                                let row = &chan[((y0 + r) * s + ky) * pw..][..pw];
                                let dst = &mut acc[r * ow..][..ow];
                                if s == 1 {
                                    for (d, &v) in dst.iter_mut().zip(&row[kx..kx + ow]) {
                                        *d += wv * v as f64;
                                    }
                                } else {
                                    for (ox, d) in dst.iter_mut().enumerate() {
                                        *d += wv * row[ox * s + kx] as f64;
                                    }
                                }
                            }
                        }
                    }
                }
                for (o, a) in plane[y0 * ow..][..rows * ow].iter_mut().zip(acc.iter()) {
                    *o = *a as f32;
                }
            }
        });
    Some(Tensor {
        c: conv.cout,
        h: oh,
        w: ow,
        data: out,
    })
}

fn pool_dim(n: usize, k: usize, s: usize, ceil_mode: bool) -> Option<usize> {
    if n < k {
        return None;
    }
    let mut out = if ceil_mode {
        (n - k).div_ceil(s) + 1
    } else {
        (n - k) / s + 1
    };
    // A ceil-mode window must still start inside the input.
    if ceil_mode && (out - 1) * s >= n {
        out -= 1;
    }
    Some(out)
}

fn maxpool_forward(x: &Tensor, k: usize, s: usize, ceil_mode: bool) -> Option<Tensor> {
    let oh = pool_dim(x.h, k, s, ceil_mode)?;
    let ow = pool_dim(x.w, k, s, ceil_mode)?;
    let mut out = vec![0f32; x.c * oh * ow];
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(c, plane)| {
        let chan = &x.data[c * x.h * x.w..][..x.h * x.w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = f32::NEG_INFINITY;
                for y in oy * s..(oy * s + k).min(x.h) {
                    for xx in ox * s..(ox * s + k).min(x.w) {
                        m = m.max(chan[y * x.w + xx]);
                    }
                }
                plane[oy * ow + ox] = m;
            }
        }
    });
    Some(Tensor {
        c: x.c,
        h: oh,
        w: ow,
        data: out,
    })
}

/// Unit-normalized features at one tap, pixel-major: `data[pixel * c + ch]`.
struct TapFeatures {
    c: usize,
    pixels: usize,
    data: Vec<f64>,
}

fn normalize_tap(x: &Tensor) -> TapFeatures {
    let n = x.h * x.w;
    let mut data = vec![0f64; n * x.c];
    data.par_chunks_mut(x.c).enumerate().for_each(|(i, v)| {
        for (ch, d) in v.iter_mut().enumerate() {
            *d = x.data[ch * n + i] as f64;
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        for d in v.iter_mut() {
            *d /= norm + NORMALIZE_EPS;
        }
    });
    TapFeatures {
        c: x.c,
        pixels: n,
        data,
    }
}

impl LpipsNetwork {
    pub fn backbone(&self) -> LpipsBackbone {
        self.backbone
    }

    pub fn checkpoint_tag(&self) -> &str {
        &self.checkpoint_tag
    }

    pub fn shift(&self) -> [f32; 3] {
        self.shift
    }

    pub fn scale(&self) -> [f32; 3] {
        self.scale
    }

    /// Linear weights of each tap, in tap order.
    pub fn tap_weights(&self) -> Vec<&[f32]> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Tap(w) => Some(w.as_slice()),
                _ => None,
            })
            .collect()
    }

    fn check_input(img: &Image) -> Result<(), LpipsError> {
        if img.channels() != 3 {
            return Err(LpipsError::NotRgb(img.channels()));
        }
        if img.width() < MIN_SIDE || img.height() < MIN_SIDE {
            return Err(LpipsError::TooSmall(img.width(), img.height()));
        }
        Ok(())
    }

    fn features(&self, img: &Image) -> Result<Vec<TapFeatures>, LpipsError> {
        let (h, w) = (img.height(), img.width());
        let mut data = vec![0f32; 3 * h * w];
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let v = (2.0 * img.value(x, y, c) - 1.0) as f32;
                    data[(c * h + y) * w + x] = (v - self.shift[c]) / self.scale[c];
                }
            }
        }
        let mut t = Tensor { c: 3, h, w, data };
        let mut taps = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv(conv) => {
                    t = conv_forward(conv, &t).ok_or(LpipsError::Vanished(i))?;
                }
                Layer::Relu => t.data.iter_mut().for_each(|v| *v = v.max(0.0)),
                Layer::MaxPool {
                    kernel,
                    stride,
                    ceil_mode,
                } => {
                    t = maxpool_forward(&t, *kernel, *stride, *ceil_mode)
                        .ok_or(LpipsError::Vanished(i))?;
                }
                Layer::Tap(_) => taps.push(normalize_tap(&t)),
            }
        }
        Ok(taps)
    }

    /// Perceptual distance between two RGB images with values in [0, 1].
    pub fn distance(&self, x: &Image, y: &Image) -> Result<f64, LpipsError> {
        Self::check_input(x)?;
        Self::check_input(y)?;
        if (x.width(), x.height()) != (y.width(), y.height()) {
            return Err(LpipsError::ShapeDiffers(
                (x.width(), x.height()),
                (y.width(), y.height()),
            ));
        }
        let fx = self.features(x)?;
        let fy = self.features(y)?;
        let mut total = 0.0;
        for ((a, b), lin) in fx.iter().zip(&fy).zip(self.tap_weights()) {
            let mut sum = 0.0;
            for p in 0..a.pixels {
                let va = &a.data[p * a.c..][..a.c];
                let vb = &b.data[p * b.c..][..b.c];
                let mut s = 0.0;
                for ch in 0..a.c {
                    let d = va[ch] - vb[ch];
                    s += lin[ch] as f64 * d * d;
                }
                sum += s;
            }
            total += sum / a.pixels as f64;
        }
        Ok(total)
    }
}

/// Convenience wrapper for [`LpipsNetwork::distance`].
pub fn lpips(net: &LpipsNetwork, x: &Image, y: &Image) -> Result<f64, LpipsError> {
    net.distance(x, y)
}

pub const SYNTHETIC_BIAS_RANGE: f64 = 0.05;

/// Checkpoint tag recorded in synthetic containers.
pub fn synthetic_tag(seed: u64) -> String {
    format!("synthetic-seed{seed}")
}

/// Seeded stand-in weights with the exact architecture and reference input
/// scaling. Convolution weights are He-uniform, biases uniform in
/// ±[`SYNTHETIC_BIAS_RANGE`], linear weights uniform in [0, 1); values are
/// drawn in tensor order, row-major within each tensor.
pub fn synthetic_container(backbone: LpipsBackbone, seed: u64) -> Vec<u8> {
    let (ops, shapes) = architecture(backbone);
    let mut rng = SplitMix64::new(seed);
    let tensors: Vec<(String, Vec<usize>, Vec<f32>)> = shapes
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = if name == "scaling.shift" {
                REFERENCE_SHIFT.to_vec()
            } else if name == "scaling.scale" {
                REFERENCE_SCALE.to_vec()
            } else if name.starts_with("lin") {
                (0..n).map(|_| rng.next_unit() as f32).collect()
            } else if name.ends_with(".weight") {
                let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                let a = (6.0 / fan_in).sqrt();
                (0..n).map(|_| ((2.0 * rng.next_unit() - 1.0) * a) as f32).collect()
            } else {
                (0..n)
                    .map(|_| ((2.0 * rng.next_unit() - 1.0) * SYNTHETIC_BIAS_RANGE) as f32)
                    .collect()
            };
            (name, shape, data)
        })
        .collect();
    write_container(backbone, &synthetic_tag(seed), ops, &tensors)
}

/// Absolute tolerance for agreement with an exporter's golden value.
pub const GOLDEN_TOLERANCE: f64 = 1e-4;
/// Absolute tolerance for `lpips(x, x) = 0` and symmetry.
pub const IDENTITY_TOLERANCE: f64 = 1e-8;

/// Hex SHA-256 of a container's tensor payload (manifest excluded).
pub fn payload_sha256(bytes: &[u8]) -> Result<String, LpipsError> {
    let (_, payload) = read_manifest(bytes)?;
    Ok(crate::image::sha256_hex(payload))
}

/// Image pair and reference distance written next to an exported container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldenPair {
    pub backbone: LpipsBackbone,
    pub width: usize,
    pub height: usize,
    /// Row-major interleaved RGB u8 pixels.
    pub x_rgb_base64: String,
    pub y_rgb_base64: String,
    pub lpips: f64,
    /// Payload hash of the container the value was computed with.
    #[serde(default)]
    pub payload_sha256: Option<String>,
    /// Seed of a synthetic container, when the golden was made from one.
    #[serde(default)]
    pub container_seed: Option<u64>,
    /// Free-form description of the implementation that produced `lpips`.
    #[serde(default)]
    pub reference: Option<String>,
}

impl GoldenPair {
    pub fn images(&self) -> Result<(Image, Image), String> {
        use base64::Engine;
        let decode = |name: &str, b64: &str| {
            let bytes = base64::engine::general_purpose::STANDARD
                .decode(b64)
                .map_err(|e| format!("{name}: {e}"))?;
            Image::from_u8(self.width, self.height, 3, bytes).map_err(|e| format!("{name}: {e}"))
        };
        Ok((decode("x_rgb_base64", &self.x_rgb_base64)?, decode("y_rgb_base64", &self.y_rgb_base64)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelftestCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelftestReport {
    pub backbone: LpipsBackbone,
    pub checkpoint_tag: String,
    pub payload_sha256: String,
    pub checks: Vec<SelftestCheck>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Seeded noise image used when no golden pair is supplied.
fn noise_image(side: usize, seed: u64) -> Image {
    let mut rng = SplitMix64::new(seed);
    let px: Vec<u8> = (0..side * side * 3).map(|_| (rng.next_u64() >> 56) as u8).collect();
    Image::from_u8(side, side, 3, px).expect("sized")
}

/// Loads a container and checks it: identity and symmetry on the golden
/// pair (or a seeded noise pair), and, with a golden, the payload hash and
/// agreement within [`GOLDEN_TOLERANCE`].
pub fn selftest(bytes: &[u8], golden: Option<&GoldenPair>) -> Result<SelftestReport, LpipsError> {
    let net = match golden {
        Some(g) => load_weights_as(bytes, g.backbone)?,
        None => load_weights(bytes)?,
    };
    let sha = payload_sha256(bytes)?;
    let mut checks = Vec::new();
    let mut check = |name: &str, passed: bool, detail: String| {
        checks.push(SelftestCheck {
            name: name.into(),
            passed,
            detail,
        })
    };
    let (x, y) = match golden {
        Some(g) => match g.images() {
            Ok(pair) => pair,
            Err(e) => {
                check("golden images", false, e);
                return Ok(SelftestReport {
                    backbone: net.backbone(),
                    checkpoint_tag: net.checkpoint_tag().into(),
                    payload_sha256: sha,
                    checks,
                });
            }
        },
        None => (noise_image(64, 1), noise_image(64, 2)),
    };
    let d = net.distance(&x, &y)?;
    let back = net.distance(&y, &x)?;
    let same = net.distance(&x, &x)?;
    check("identity", same.abs() < IDENTITY_TOLERANCE, format!("lpips(x, x) = {same:e}"));
    check(
        "symmetry",
        (d - back).abs() < IDENTITY_TOLERANCE,
        format!("lpips(x, y) = {d}, lpips(y, x) = {back}"),
    );
    check("finite and positive", d.is_finite() && d > 0.0, format!("lpips(x, y) = {d}"));
    if let Some(g) = golden {
        if let Some(expected) = &g.payload_sha256 {
            check(
                "payload hash",
                *expected == sha,
                format!("container {sha}, golden {expected}"),
            );
        }
        let err = (d - g.lpips).abs();
        check(
            "golden value",
            err <= GOLDEN_TOLERANCE,
            format!("computed {d}, reference {}, |error| {err:e} (tolerance {GOLDEN_TOLERANCE:e})", g.lpips),
        );
    }
    Ok(SelftestReport {
        backbone: net.backbone(),
        checkpoint_tag: net.checkpoint_tag().into(),
        payload_sha256: sha,
        checks,
    })
}
