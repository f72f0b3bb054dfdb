//! Camera intrinsics, poses, projection and lens distortion.
//!
//! Conventions used throughout the crate:
//! - poses are world-to-camera, rotation stored as a unit quaternion `(w, x, y, z)`;
//! - integer pixel coordinates address pixel centers, so the principal point
//!   projects exactly onto `(cx, cy)`;
//! - distortion follows the COLMAP polynomial models (radial `k1, k2`,
//!   tangential `p1, p2`) applied to normalized image coordinates.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{Image, Pixels};
use crate::imageops::quantize_value;

#[derive(Debug, Error, PartialEq)]
pub enum CameraError {
    #[error("{model:?} expects {expected} parameters, got {actual}")]
    BadArity {
        model: CameraModel,
        expected: usize,
        actual: usize,
    },
    #[error("undistortion did not converge after {iterations} iterations (last iterate {last:?}, residual {residual:e})")]
    NonConvergence {
        iterations: usize,
        last: [f64; 2],
        residual: f64,
    },
    #[error("downscale factor must be a finite value >= 1, got {0}")]
    BadFactor(f64),
    #[error("unknown camera model {0:?}")]
    UnknownModel(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CameraModel {
    SimplePinhole,
    Pinhole,
    SimpleRadial,
    Radial,
    Opencv,
}

impl CameraModel {
    pub const ALL: [CameraModel; 5] = [
        CameraModel::SimplePinhole,
        CameraModel::Pinhole,
        CameraModel::SimpleRadial,
        CameraModel::Radial,
        CameraModel::Opencv,
    ];

    pub fn arity(self) -> usize {
        match self {
            CameraModel::SimplePinhole => 3,
            CameraModel::Pinhole => 4,
            CameraModel::SimpleRadial => 4,
            CameraModel::Radial => 5,
            CameraModel::Opencv => 8,
        }
    }

    /// COLMAP numeric model id.
    pub fn colmap_id(self) -> i32 {
        match self {
            CameraModel::SimplePinhole => 0,
            CameraModel::Pinhole => 1,
            CameraModel::SimpleRadial => 2,
            CameraModel::Radial => 3,
            CameraModel::Opencv => 4,
        }
    }

    pub fn from_colmap_id(id: i32) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.colmap_id() == id)
    }

    pub fn name(self) -> &'static str {
        match self {
            CameraModel::SimplePinhole => "SIMPLE_PINHOLE",
            CameraModel::Pinhole => "PINHOLE",
            CameraModel::SimpleRadial => "SIMPLE_RADIAL",
            CameraModel::Radial => "RADIAL",
            CameraModel::Opencv => "OPENCV",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == name)
    }

    pub fn has_distortion(self) -> bool {
        matches!(
            self,
            CameraModel::SimpleRadial | CameraModel::Radial | CameraModel::Opencv
        )
    }
}

/// Focal lengths, principal point and distortion coefficients unpacked from a
/// model-specific parameter vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub distortion: Distortion,
}

/// Radial (`k1`, `k2`) and tangential (`p1`, `p2`) coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Distortion {
    pub k1: f64,
    pub k2: f64,
    pub p1: f64,
    pub p2: f64,
}

impl Distortion {
    pub fn is_zero(&self) -> bool {
        self.k1 == 0.0 && self.k2 == 0.0 && self.p1 == 0.0 && self.p2 == 0.0
    }

    /// Forward distortion of normalized coordinates.
    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let [u, v] = p;
        let r2 = u * u + v * v;
        let radial = self.k1 * r2 + self.k2 * r2 * r2;
        [
            u + u * radial + 2.0 * self.p1 * u * v + self.p2 * (r2 + 2.0 * u * u),
            v + v * radial + 2.0 * self.p2 * u * v + self.p1 * (r2 + 2.0 * v * v),
        ]
    }

    /// Jacobian of [`Distortion::apply`], row-major `[[dx/du, dx/dv], [dy/du, dy/dv]]`.
    pub fn jacobian(&self, p: [f64; 2]) -> [[f64; 2]; 2] {
        let [u, v] = p;
        let r2 = u * u + v * v;
        let radial = self.k1 * r2 + self.k2 * r2 * r2;
        let dradial = 2.0 * (self.k1 + 2.0 * self.k2 * r2);
        let (dr_du, dr_dv) = (dradial * u, dradial * v);
        [
            [
                1.0 + radial + u * dr_du + 2.0 * self.p1 * v + 6.0 * self.p2 * u,
                u * dr_dv + 2.0 * self.p1 * u + 2.0 * self.p2 * v,
            ],
            [
                v * dr_du + 2.0 * self.p2 * v + 2.0 * self.p1 * u,
                1.0 + radial + v * dr_dv + 2.0 * self.p2 * u + 6.0 * self.p1 * v,
            ],
        ]
    }

    /// Inverts the distortion with Newton's method.
    ///
    /// Starts from the distorted point itself and stops once the Newton step
    /// norm drops below [`UNDISTORT_TOLERANCE`].
    pub fn invert(&self, target: [f64; 2]) -> Result<[f64; 2], CameraError> {
        if self.is_zero() {
            return Ok(target);
        }
        let mut p = target;
        for _ in 0..UNDISTORT_MAX_ITERATIONS {
            let d = self.apply(p);
            let (rx, ry) = (d[0] - target[0], d[1] - target[1]);
            let j = self.jacobian(p);
            let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
            if !det.is_finite() || det.abs() < 1e-300 {
                break;
            }
            let sx = (j[1][1] * rx - j[0][1] * ry) / det;
            let sy = (-j[1][0] * rx + j[0][0] * ry) / det;
            p = [p[0] - sx, p[1] - sy];
            if !(p[0].is_finite() && p[1].is_finite()) {
                break;
            }
            if sx.hypot(sy) < UNDISTORT_TOLERANCE {
                return Ok(p);
            }
        }
        let d = self.apply(p);
        Err(CameraError::NonConvergence {
            iterations: UNDISTORT_MAX_ITERATIONS,
            last: p,
            residual: (d[0] - target[0]).hypot(d[1] - target[1]),
        })
    }
}

pub const UNDISTORT_MAX_ITERATIONS: usize = 50;
pub const UNDISTORT_TOLERANCE: f64 = 1e-12;

/// Rigid world-to-camera transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    /// Unit quaternion, scalar first.
    pub qvec: [f64; 4],
    pub tvec: [f64; 3],
}

impl Default for Pose {
    fn default() -> Self {
        Self::IDENTITY
    }
}

pub type Mat3 = [[f64; 3]; 3];

impl Pose {
    pub const IDENTITY: Pose = Pose {
        qvec: [1.0, 0.0, 0.0, 0.0],
        tvec: [0.0, 0.0, 0.0],
    };

    pub fn rotation_matrix(&self) -> Mat3 {
        quat_to_matrix(self.qvec)
    }

    pub fn from_rotation_translation(r: &Mat3, t: [f64; 3]) -> Pose {
        Pose {
            qvec: matrix_to_quat(r),
            tvec: t,
        }
    }

    pub fn transform_point(&self, p: [f64; 3]) -> [f64; 3] {
        let r = mat_vec(&self.rotation_matrix(), p);
        [r[0] + self.tvec[0], r[1] + self.tvec[1], r[2] + self.tvec[2]]
    }

    pub fn inverse(&self) -> Pose {
        let q = quat_conj(self.qvec);
        let t = mat_vec(&quat_to_matrix(q), self.tvec);
        Pose {
            qvec: q,
            tvec: [-t[0], -t[1], -t[2]],
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        let t = self.transform_point(other.tvec);
        Pose {
            qvec: quat_mul(self.qvec, other.qvec),
            tvec: t,
        }
    }

    pub fn quat_norm(&self) -> f64 {
        self.qvec.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub fn quat_mul(a: [f64; 4], b: [f64; 4]) -> [f64; 4] {
    let [aw, ax, ay, az] = a;
    let [bw, bx, by, bz] = b;
    [
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ]
}

fn quat_conj(q: [f64; 4]) -> [f64; 4] {
    [q[0], -q[1], -q[2], -q[3]]
}

pub fn quat_to_matrix(q: [f64; 4]) -> Mat3 {
    let [w, x, y, z] = q;
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// Rotation matrix to unit quaternion with non-negative scalar part.
pub fn matrix_to_quat(r: &Mat3) -> [f64; 4] {
    let trace = r[0][0] + r[1][1] + r[2][2];
    let q = if trace > 0.0 {
        let s = (trace + 1.0).sqrt() * 2.0;
        [
            0.25 * s,
            (r[2][1] - r[1][2]) / s,
            (r[0][2] - r[2][0]) / s,
            (r[1][0] - r[0][1]) / s,
        ]
    } else if r[0][0] > r[1][1] && r[0][0] > r[2][2] {
        let s = (1.0 + r[0][0] - r[1][1] - r[2][2]).sqrt() * 2.0;
        [
            (r[2][1] - r[1][2]) / s,
            0.25 * s,
            (r[0][1] + r[1][0]) / s,
            (r[0][2] + r[2][0]) / s,
        ]
    } else if r[1][1] > r[2][2] {
        let s = (1.0 + r[1][1] - r[0][0] - r[2][2]).sqrt() * 2.0;
        [
            (r[0][2] - r[2][0]) / s,
            (r[0][1] + r[1][0]) / s,
            0.25 * s,
            (r[1][2] + r[2][1]) / s,
        ]
    } else {
        let s = (1.0 + r[2][2] - r[0][0] - r[1][1]).sqrt() * 2.0;
        [
            (r[1][0] - r[0][1]) / s,
            (r[0][2] + r[2][0]) / s,
            (r[1][2] + r[2][1]) / s,
            0.25 * s,
        ]
    };
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let sign = if q[0] < 0.0 { -1.0 } else { 1.0 };
    q.map(|v| sign * v / n)
}

pub fn mat_vec(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub model: CameraModel,
    pub width: u32,
    pub height: u32,
    pub params: Vec<f64>,
    #[serde(flatten)]
    pub pose: Pose,
}

/// Result of projecting a world point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Projection {
    Pixel([f64; 2]),
    /// Camera-frame depth at or below `1e-9`.
    BehindCamera,
}

impl Projection {
    pub fn pixel(self) -> Option<[f64; 2]> {
        match self {
            Projection::Pixel(p) => Some(p),
            Projection::BehindCamera => None,
        }
    }
}

pub const MIN_DEPTH: f64 = 1e-9;

impl Camera {
    pub fn new(
        model: CameraModel,
        width: u32,
        height: u32,
        params: Vec<f64>,
        pose: Pose,
    ) -> Result<Self, CameraError> {
        check_arity(model, &params)?;
        Ok(Camera {
            model,
            width,
            height,
            params,
            pose,
        })
    }

    pub fn pinhole(width: u32, height: u32, fx: f64, fy: f64, cx: f64, cy: f64) -> Self {
        Camera {
            model: CameraModel::Pinhole,
            width,
            height,
            params: vec![fx, fy, cx, cy],
            pose: Pose::IDENTITY,
        }
    }

    pub fn with_pose(mut self, pose: Pose) -> Self {
        self.pose = pose;
        self
    }

    pub fn intrinsics(&self) -> Result<Intrinsics, CameraError> {
        check_arity(self.model, &self.params)?;
        let p = &self.params;
        let zero = Distortion::default();
        Ok(match self.model {
            CameraModel::SimplePinhole => Intrinsics {
                fx: p[0],
                fy: p[0],
                cx: p[1],
                cy: p[2],
                distortion: zero,
            },
            CameraModel::Pinhole => Intrinsics {
                fx: p[0],
                fy: p[1],
                cx: p[2],
                cy: p[3],
                distortion: zero,
            },
            CameraModel::SimpleRadial => Intrinsics {
                fx: p[0],
                fy: p[0],
                cx: p[1],
                cy: p[2],
                distortion: Distortion {
                    k1: p[3],
                    ..zero
                },
            },
            CameraModel::Radial => Intrinsics {
                fx: p[0],
                fy: p[0],
                cx: p[1],
                cy: p[2],
                distortion: Distortion {
                    k1: p[3],
                    k2: p[4],
                    ..zero
                },
            },
            CameraModel::Opencv => Intrinsics {
                fx: p[0],
                fy: p[1],
                cx: p[2],
                cy: p[3],
                distortion: Distortion {
                    k1: p[4],
                    k2: p[5],
                    p1: p[6],
                    p2: p[7],
                },
            },
        })
    }

    /// Projects a world point to pixel coordinates.
    pub fn project(&self, xyz_world: [f64; 3]) -> Result<Projection, CameraError> {
        let k = self.intrinsics()?;
        let pc = self.pose.transform_point(xyz_world);
        if pc[2] <= MIN_DEPTH {
            return Ok(Projection::BehindCamera);
        }
        let d = k.distortion.apply([pc[0] / pc[2], pc[1] / pc[2]]);
        Ok(Projection::Pixel([
            k.fx * d[0] + k.cx,
            k.fy * d[1] + k.cy,
        ]))
    }
}

fn check_arity(model: CameraModel, params: &[f64]) -> Result<(), CameraError> {
    if params.len() != model.arity() {
        return Err(CameraError::BadArity {
            model,
            expected: model.arity(),
            actual: params.len(),
        });
    }
    Ok(())
}

fn distortion_of(model: CameraModel, params: &[f64]) -> Result<Distortion, CameraError> {
    let cam = Camera {
        model,
        width: 1,
        height: 1,
        params: params.to_vec(),
        pose: Pose::IDENTITY,
    };
    Ok(cam.intrinsics()?.distortion)
}

/// Applies the model's forward distortion to normalized coordinates.
pub fn distort_normalized(
    model: CameraModel,
    params: &[f64],
    xy: [f64; 2],
) -> Result<[f64; 2], CameraError> {
    Ok(distortion_of(model, params)?.apply(xy))
}

/// Inverts the model's distortion for normalized coordinates.
pub fn undistort_normalized(
    model: CameraModel,
    params: &[f64],
    distorted_xy: [f64; 2],
) -> Result<[f64; 2], CameraError> {
    distortion_of(model, params)?.invert(distorted_xy)
}

/// Bilinear sample at a continuous pixel-center coordinate; `None` outside
/// the image.
pub fn sample_bilinear(img: &Image, x: f64, y: f64, out: &mut [f64]) -> bool {
    const EDGE: f64 = 1e-6;
    let (w, h) = (img.width() as f64, img.height() as f64);
    if !(x >= -EDGE && y >= -EDGE && x <= w - 1.0 + EDGE && y <= h - 1.0 + EDGE) {
        return false;
    }
    let x = x.clamp(0.0, w - 1.0);
    let y = y.clamp(0.0, h - 1.0);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(img.width() - 1);
    let y1 = (y0 + 1).min(img.height() - 1);
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    for (c, o) in out.iter_mut().enumerate() {
        let top = img.value(x0, y0, c) * (1.0 - fx) + img.value(x1, y0, c) * fx;
        let bottom = img.value(x0, y1, c) * (1.0 - fx) + img.value(x1, y1, c) * fx;
        *o = if fy == 0.0 {
            top
        } else {
            top * (1.0 - fy) + bottom * fy
        };
    }
    true
}

/// Resamples a distorted image into an ideal pinhole image with the same
/// focal lengths and principal point.
///
/// Each output pixel is mapped through the forward distortion and bilinearly
/// sampled from the source; samples falling outside the source are black.
/// u8 inputs yield u8 outputs (quantized), float inputs stay float.
pub fn undistort_image(img: &Image, cam: &Camera) -> Result<(Image, Camera), CameraError> {
    let k = cam.intrinsics()?;
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let rows: Vec<Vec<f64>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut row = vec![0.0; w * ch];
            let mut px = vec![0.0; ch];
            for x in 0..w {
                let u = (x as f64 - k.cx) / k.fx;
                let v = (y as f64 - k.cy) / k.fy;
                let d = k.distortion.apply([u, v]);
                let sx = k.fx * d[0] + k.cx;
                let sy = k.fy * d[1] + k.cy;
                if sample_bilinear(img, sx, sy, &mut px) {
                    row[x * ch..(x + 1) * ch].copy_from_slice(&px);
                }
            }
            row
        })
        .collect();
    let data: Vec<f64> = rows.into_iter().flatten().collect();
    let out = match img.pixels() {
        Pixels::U8(_) => Image::from_u8(w, h, ch, data.iter().map(|&v| quantize_value(v)).collect()),
        Pixels::Float(_) => Image::from_float(w, h, ch, data),
    }
    .expect("output shape matches input");
    let out_cam = Camera {
        model: CameraModel::Pinhole,
        width: cam.width,
        height: cam.height,
        params: vec![k.fx, k.fy, k.cx, k.cy],
        pose: cam.pose,
    };
    Ok((out, out_cam))
}

/// Rescales a camera for an image downscaled by `factor`.
///
/// Output size is `round(size / factor)` per axis; see [`rescale_camera`] for
/// how intrinsics follow.
pub fn downscale_camera(cam: &Camera, factor: f64) -> Result<Camera, CameraError> {
    if !(factor.is_finite() && factor >= 1.0) {
        return Err(CameraError::BadFactor(factor));
    }
    let width = (cam.width as f64 / factor).round() as u32;
    let height = (cam.height as f64 / factor).round() as u32;
    rescale_camera(cam, width, height)
}

/// Resizes a camera to `width x height`.
///
/// Focal lengths and the principal point are scaled by the realized per-axis
/// ratios. Single-focal models are promoted to their two-focal counterparts
/// (SIMPLE_PINHOLE to PINHOLE, SIMPLE_RADIAL and RADIAL to OPENCV) when the two
/// ratios differ.
pub fn rescale_camera(cam: &Camera, width: u32, height: u32) -> Result<Camera, CameraError> {
    let k = cam.intrinsics()?;
    let sx = width as f64 / cam.width as f64;
    let sy = height as f64 / cam.height as f64;
    let (fx, fy, cx, cy) = (k.fx * sx, k.fy * sy, k.cx * sx, k.cy * sy);
    let d = k.distortion;
    let (model, params) = if sx == sy {
        let mut params = cam.params.clone();
        match cam.model {
            CameraModel::SimplePinhole | CameraModel::SimpleRadial | CameraModel::Radial => {
                params[0] = fx;
                params[1] = cx;
                params[2] = cy;
            }
            CameraModel::Pinhole | CameraModel::Opencv => {
                params[0] = fx;
                params[1] = fy;
                params[2] = cx;
                params[3] = cy;
            }
        }
        (cam.model, params)
    } else {
        match cam.model {
            CameraModel::SimplePinhole | CameraModel::Pinhole => {
                (CameraModel::Pinhole, vec![fx, fy, cx, cy])
            }
            _ => (
                CameraModel::Opencv,
                vec![fx, fy, cx, cy, d.k1, d.k2, d.p1, d.p2],
            ),
        }
    };
    Ok(Camera {
        model,
        width,
        height,
        params,
        pose: cam.pose,
    })
}
