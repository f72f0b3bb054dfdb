//! COLMAP sparse reconstruction files (`cameras`, `images`, `points3D`) in
//! both the binary and the text encoding.
//!
//! Binary layouts (all little-endian):
//!
//! ```text
//! cameras.bin   u64 count; { u32 camera_id, i32 model_id, u64 width, u64 height, f64 params[arity] }
//! images.bin    u64 count; { u32 image_id, f64 qvec[4], f64 tvec[3], u32 camera_id,
//!                            name bytes, 0x00, u64 n, { f64 x, f64 y, u64 point3d_id }[n] }
//! points3D.bin  u64 count; { u64 id, f64 xyz[3], u8 rgb[3], f64 error, u64 n, { u32 image_id, u32 point2d_idx }[n] }
//! ```
//!
//! Parsing never panics: every failure is a [`ColmapError`] carrying a byte
//! offset (binary) or a line number (text).

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::camera::{Camera, CameraModel, Pose};

/// `point3d_id` value meaning "not triangulated".
pub const INVALID_POINT3D_ID: u64 = u64::MAX;

#[derive(Debug, Error, PartialEq)]
pub enum ColmapError {
    #[error("truncated input at byte {offset}: needed {needed} more bytes for {what}")]
    Truncated {
        offset: usize,
        needed: usize,
        what: &'static str,
    },
    #[error("unsupported camera model id {model_id} at byte {offset}")]
    UnsupportedModel { model_id: i32, offset: usize },
    #[error("image name starting at byte {offset} has no null terminator")]
    UnterminatedName { offset: usize },
    #[error("image name at byte {offset} is not valid UTF-8")]
    BadName { offset: usize },
    #[error("line {line}: {message}")]
    Text { line: usize, message: String },
    #[error("cannot encode {what}: {message}")]
    Encode { what: &'static str, message: String },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColmapCameraRecord {
    pub camera_id: u32,
    pub model: CameraModel,
    pub width: u64,
    pub height: u64,
    pub params: Vec<f64>,
}

impl ColmapCameraRecord {
    pub fn model_id(&self) -> i32 {
        self.model.colmap_id()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point2D {
    pub x: f64,
    pub y: f64,
    pub point3d_id: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColmapImageRecord {
    pub image_id: u32,
    pub qvec: [f64; 4],
    pub tvec: [f64; 3],
    pub camera_id: u32,
    pub name: String,
    pub points2d: Vec<Point2D>,
}

impl ColmapImageRecord {
    pub fn pose(&self) -> Pose {
        Pose {
            qvec: self.qvec,
            tvec: self.tvec,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColmapPoint3D {
    pub point3d_id: u64,
    pub xyz: [f64; 3],
    pub rgb: [u8; 3],
    pub error: f64,
    pub track: Vec<(u32, u32)>,
}

/// All three record lists of one sparse model.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Reconstruction {
    pub cameras: Vec<ColmapCameraRecord>,
    pub images: Vec<ColmapImageRecord>,
    pub points3d: Vec<ColmapPoint3D>,
}

impl Reconstruction {
    pub fn camera(&self, camera_id: u32) -> Option<&ColmapCameraRecord> {
        self.cameras.iter().find(|c| c.camera_id == camera_id)
    }

    /// Full camera (intrinsics + pose) for an image record.
    pub fn camera_for(&self, image: &ColmapImageRecord) -> Option<Camera> {
        let c = self.camera(image.camera_id)?;
        Some(Camera {
            model: c.model,
            width: c.width as u32,
            height: c.height as u32,
            params: c.params.clone(),
            pose: image.pose(),
        })
    }
}

// ---------------------------------------------------------------------------
// Binary

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], ColmapError> {
        let remaining = self.bytes.len() - self.pos;
        if remaining < n {
            return Err(ColmapError::Truncated {
                offset: self.pos,
                needed: n - remaining,
                what,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, ColmapError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, ColmapError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn i32(&mut self, what: &'static str) -> Result<i32, ColmapError> {
        Ok(i32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, ColmapError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &'static str) -> Result<f64, ColmapError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64s<const N: usize>(&mut self, what: &'static str) -> Result<[f64; N], ColmapError> {
        let mut out = [0.0; N];
        for v in &mut out {
            *v = self.f64(what)?;
        }
        Ok(out)
    }

    /// Count prefix; capacity hints are bounded by what the input could hold.
    fn count(&mut self, what: &'static str, min_record: usize) -> Result<(u64, usize), ColmapError> {
        let n = self.u64(what)?;
        let room = (self.bytes.len() - self.pos) / min_record.max(1);
        Ok((n, (n as usize).min(room)))
    }
}

pub fn parse_cameras_bin(bytes: &[u8]) -> Result<Vec<ColmapCameraRecord>, ColmapError> {
    let mut r = Reader::new(bytes);
    let (n, cap) = r.count("camera count", 24)?;
    let mut out = Vec::with_capacity(cap);
    for _ in 0..n {
        let camera_id = r.u32("camera_id")?;
        let model_offset = r.pos;
        let model_id = r.i32("model_id")?;
        let model = CameraModel::from_colmap_id(model_id).ok_or(ColmapError::UnsupportedModel {
            model_id,
            offset: model_offset,
        })?;
        let width = r.u64("width")?;
        let height = r.u64("height")?;
        let params = (0..model.arity())
            .map(|_| r.f64("camera params"))
            .collect::<Result<_, _>>()?;
        out.push(ColmapCameraRecord {
            camera_id,
            model,
            width,
            height,
            params,
        });
    }
    Ok(out)
}

pub fn parse_images_bin(bytes: &[u8]) -> Result<Vec<ColmapImageRecord>, ColmapError> {
    let mut r = Reader::new(bytes);
    let (n, cap) = r.count("image count", 64)?;
    let mut out = Vec::with_capacity(cap);
    for _ in 0..n {
        let image_id = r.u32("image_id")?;
        let qvec = r.f64s::<4>("qvec")?;
        let tvec = r.f64s::<3>("tvec")?;
        let camera_id = r.u32("camera_id")?;
        let name_start = r.pos;
        let rest = &r.bytes[name_start..];
        let len = rest
            .iter()
            .position(|&b| b == 0)
            .ok_or(ColmapError::UnterminatedName { offset: name_start })?;
        let name = std::str::from_utf8(&rest[..len])
            .map_err(|_| ColmapError::BadName { offset: name_start })?
            .to_string();
        r.pos += len + 1;
        let (np, cap) = r.count("point2d count", 24)?;
        let mut points2d = Vec::with_capacity(cap);
        for _ in 0..np {
            points2d.push(Point2D {
                x: r.f64("point2d x")?,
                y: r.f64("point2d y")?,
                point3d_id: r.u64("point3d_id")?,
            });
        }
        out.push(ColmapImageRecord {
            image_id,
            qvec,
            tvec,
            camera_id,
            name,
            points2d,
        });
    }
    Ok(out)
}

pub fn parse_points3d_bin(bytes: &[u8]) -> Result<Vec<ColmapPoint3D>, ColmapError> {
    let mut r = Reader::new(bytes);
    let (n, cap) = r.count("point count", 51)?;
    let mut out = Vec::with_capacity(cap);
    for _ in 0..n {
        let point3d_id = r.u64("point3d_id")?;
        let xyz = r.f64s::<3>("xyz")?;
        let rgb = [r.u8("rgb")?, r.u8("rgb")?, r.u8("rgb")?];
        let error = r.f64("error")?;
        let (nt, cap) = r.count("track length", 8)?;
        let mut track = Vec::with_capacity(cap);
        for _ in 0..nt {
            track.push((r.u32("track image_id")?, r.u32("track point2d_idx")?));
        }
        out.push(ColmapPoint3D {
            point3d_id,
            xyz,
            rgb,
            error,
            track,
        });
    }
    Ok(out)
}

pub fn serialize_cameras_bin(cameras: &[ColmapCameraRecord]) -> Result<Vec<u8>, ColmapError> {
    let mut out = Vec::new();
    out.extend_from_slice(&(cameras.len() as u64).to_le_bytes());
    for c in cameras {
        if c.params.len() != c.model.arity() {
            return Err(ColmapError::Encode {
                what: "camera",
                message: format!(
                    "camera {} has {} params, {} expects {}",
                    c.camera_id,
                    c.params.len(),
                    c.model.name(),
                    c.model.arity()
                ),
            });
        }
        out.extend_from_slice(&c.camera_id.to_le_bytes());
        out.extend_from_slice(&c.model_id().to_le_bytes());
        out.extend_from_slice(&c.width.to_le_bytes());
        out.extend_from_slice(&c.height.to_le_bytes());
        for p in &c.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn serialize_images_bin(images: &[ColmapImageRecord]) -> Result<Vec<u8>, ColmapError> {
    let mut out = Vec::new();
    out.extend_from_slice(&(images.len() as u64).to_le_bytes());
    for im in images {
        if im.name.is_empty() || im.name.contains('\0') {
            return Err(ColmapError::Encode {
                what: "image",
                message: format!("image {} has an empty or NUL-containing name", im.image_id),
            });
        }
        out.extend_from_slice(&im.image_id.to_le_bytes());
        for v in im.qvec.iter().chain(&im.tvec) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&im.camera_id.to_le_bytes());
        out.extend_from_slice(im.name.as_bytes());
        out.push(0);
        out.extend_from_slice(&(im.points2d.len() as u64).to_le_bytes());
        for p in &im.points2d {
            out.extend_from_slice(&p.x.to_le_bytes());
            out.extend_from_slice(&p.y.to_le_bytes());
            out.extend_from_slice(&p.point3d_id.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn serialize_points3d_bin(points: &[ColmapPoint3D]) -> Result<Vec<u8>, ColmapError> {
    let mut out = Vec::new();
    out.extend_from_slice(&(points.len() as u64).to_le_bytes());
    for p in points {
        out.extend_from_slice(&p.point3d_id.to_le_bytes());
        for v in &p.xyz {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&p.rgb);
        out.extend_from_slice(&p.error.to_le_bytes());
        out.extend_from_slice(&(p.track.len() as u64).to_le_bytes());
        for (img, idx) in &p.track {
            out.extend_from_slice(&img.to_le_bytes());
            out.extend_from_slice(&idx.to_le_bytes());
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Text

struct Fields<'a> {
    line: usize,
    it: std::str::SplitWhitespace<'a>,
}

impl<'a> Fields<'a> {
    fn new(line: usize, text: &'a str) -> Self {
        Self {
            line,
            it: text.split_whitespace(),
        }
    }

    fn err(&self, message: impl Into<String>) -> ColmapError {
        ColmapError::Text {
            line: self.line,
            message: message.into(),
        }
    }

    fn next_str(&mut self, what: &str) -> Result<&'a str, ColmapError> {
        self.it.next().ok_or_else(|| self.err(format!("missing {what}")))
    }

    fn next<T: std::str::FromStr>(&mut self, what: &str) -> Result<T, ColmapError> {
        let s = self.next_str(what)?;
        s.parse()
            .map_err(|_| self.err(format!("invalid {what} {s:?}")))
    }

    fn finish(mut self) -> Result<(), ColmapError> {
        match self.it.next() {
            Some(extra) => Err(self.err(format!("unexpected trailing field {extra:?}"))),
            None => Ok(()),
        }
    }
}

/// Non-comment, non-blank lines with 1-based line numbers.
fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

/// Shortest representation that parses back to the same bits.
fn fmt_f64(out: &mut String, v: f64) {
    write!(out, "{v:?}").unwrap();
}

pub fn parse_cameras_txt(text: &str) -> Result<Vec<ColmapCameraRecord>, ColmapError> {
    let mut out = Vec::new();
    for (line, l) in data_lines(text) {
        let mut f = Fields::new(line, l);
        let camera_id = f.next("camera id")?;
        let model_name = f.next_str("model")?;
        let model = CameraModel::from_name(model_name)
            .ok_or_else(|| f.err(format!("unsupported camera model {model_name:?}")))?;
        let width = f.next("width")?;
        let height = f.next("height")?;
        let params = (0..model.arity())
            .map(|_| f.next("camera parameter"))
            .collect::<Result<_, _>>()?;
        f.finish()?;
        out.push(ColmapCameraRecord {
            camera_id,
            model,
            width,
            height,
            params,
        });
    }
    Ok(out)
}

pub fn parse_images_txt(text: &str) -> Result<Vec<ColmapImageRecord>, ColmapError> {
    let lines: Vec<&str> = text.lines().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        let line = i + 1;
        let l = lines[i].trim();
        i += 1;
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        let mut f = Fields::new(line, l);
        let image_id = f.next("image id")?;
        let mut qvec = [0.0; 4];
        for q in &mut qvec {
            *q = f.next("quaternion component")?;
        }
        let mut tvec = [0.0; 3];
        for t in &mut tvec {
            *t = f.next("translation component")?;
        }
        let camera_id = f.next("camera id")?;
        let name = f.next_str("image name")?.to_string();
        f.finish()?;

        // The observation line always follows, even when empty.
        let mut points2d = Vec::new();
        if i < lines.len() {
            let pl = lines[i];
            let mut f = Fields::new(i + 1, pl);
            i += 1;
            let tokens = pl.split_whitespace().count();
            if tokens % 3 != 0 {
                return Err(f.err(format!(
                    "observation line has {tokens} fields, expected a multiple of 3"
                )));
            }
            for _ in 0..tokens / 3 {
                let x = f.next("x")?;
                let y = f.next("y")?;
                let id: i64 = f.next("point3d id")?;
                let point3d_id = if id == -1 {
                    INVALID_POINT3D_ID
                } else if id >= 0 {
                    id as u64
                } else {
                    return Err(f.err(format!("invalid point3d id {id}")));
                };
                points2d.push(Point2D { x, y, point3d_id });
            }
        }
        out.push(ColmapImageRecord {
            image_id,
            qvec,
            tvec,
            camera_id,
            name,
            points2d,
        });
    }
    Ok(out)
}

pub fn parse_points3d_txt(text: &str) -> Result<Vec<ColmapPoint3D>, ColmapError> {
    let mut out = Vec::new();
    for (line, l) in data_lines(text) {
        let mut f = Fields::new(line, l);
        let point3d_id = f.next("point id")?;
        let xyz = [f.next("x")?, f.next("y")?, f.next("z")?];
        let rgb = [f.next("red")?, f.next("green")?, f.next("blue")?];
        let error = f.next("error")?;
        let rest: Vec<&str> = f.it.by_ref().collect();
        if rest.len() % 2 != 0 {
            return Err(f.err("track has an odd number of fields"));
        }
        let track = rest
            .chunks(2)
            .map(|pair| {
                let a = pair[0].parse().map_err(|_| f.err(format!("invalid track image id {:?}", pair[0])))?;
                let b = pair[1].parse().map_err(|_| f.err(format!("invalid track point index {:?}", pair[1])))?;
                Ok((a, b))
            })
            .collect::<Result<_, ColmapError>>()?;
        out.push(ColmapPoint3D {
            point3d_id,
            xyz,
            rgb,
            error,
            track,
        });
    }
    Ok(out)
}

pub fn serialize_cameras_txt(cameras: &[ColmapCameraRecord]) -> Result<String, ColmapError> {
    let mut out = String::from(
        "# Camera list with one line of data per camera:\n#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n",
    );
    writeln!(out, "# Number of cameras: {}", cameras.len()).unwrap();
    for c in cameras {
        if c.params.len() != c.model.arity() {
            return Err(ColmapError::Encode {
                what: "camera",
                message: format!("camera {} has a parameter count mismatch", c.camera_id),
            });
        }
        write!(out, "{} {} {} {}", c.camera_id, c.model.name(), c.width, c.height).unwrap();
        for &p in &c.params {
            out.push(' ');
            fmt_f64(&mut out, p);
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn serialize_images_txt(images: &[ColmapImageRecord]) -> Result<String, ColmapError> {
    let mut out = String::from(
        "# Image list with two lines of data per image:\n#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n#   POINTS2D[] as (X, Y, POINT3D_ID)\n",
    );
    writeln!(out, "# Number of images: {}", images.len()).unwrap();
    for im in images {
        if im.name.is_empty() || im.name.chars().any(char::is_whitespace) {
            return Err(ColmapError::Encode {
                what: "image",
                message: format!(
                    "image {} name {:?} is empty or contains whitespace",
                    im.image_id, im.name
                ),
            });
        }
        write!(out, "{}", im.image_id).unwrap();
        for &v in im.qvec.iter().chain(&im.tvec) {
            out.push(' ');
            fmt_f64(&mut out, v);
        }
        writeln!(out, " {} {}", im.camera_id, im.name).unwrap();
        for (i, p) in im.points2d.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            fmt_f64(&mut out, p.x);
            out.push(' ');
            fmt_f64(&mut out, p.y);
            if p.point3d_id == INVALID_POINT3D_ID {
                out.push_str(" -1");
            } else if p.point3d_id > i64::MAX as u64 {
                return Err(ColmapError::Encode {
                    what: "image",
                    message: format!("point3d id {} does not fit the text format", p.point3d_id),
                });
            } else {
                write!(out, " {}", p.point3d_id).unwrap();
            }
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn serialize_points3d_txt(points: &[ColmapPoint3D]) -> Result<String, ColmapError> {
    let mut out = String::from(
        "# 3D point list with one line of data per point:\n#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n",
    );
    writeln!(out, "# Number of points: {}", points.len()).unwrap();
    for p in points {
        write!(out, "{}", p.point3d_id).unwrap();
        for &v in &p.xyz {
            out.push(' ');
            fmt_f64(&mut out, v);
        }
        write!(out, " {} {} {} ", p.rgb[0], p.rgb[1], p.rgb[2]).unwrap();
        fmt_f64(&mut out, p.error);
        for (img, idx) in &p.track {
            write!(out, " {img} {idx}").unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Directories

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoding {
    Binary,
    Text,
}

fn read_file(path: &Path) -> Result<Vec<u8>, ColmapError> {
    std::fs::read(path).map_err(|e| ColmapError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn with_path<T>(path: &Path, r: Result<T, ColmapError>) -> Result<T, ColmapError> {
    r.map_err(|e| ColmapError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Which encoding a sparse directory holds; binary wins when both exist.
pub fn detect_encoding(dir: &Path) -> Option<Encoding> {
    if dir.join("cameras.bin").is_file() {
        Some(Encoding::Binary)
    } else if dir.join("cameras.txt").is_file() {
        Some(Encoding::Text)
    } else {
        None
    }
}

pub fn read_reconstruction(dir: &Path) -> Result<Reconstruction, ColmapError> {
    match detect_encoding(dir) {
        Some(Encoding::Binary) => {
            let p = |n: &str| dir.join(n);
            Ok(Reconstruction {
                cameras: with_path(&p("cameras.bin"), parse_cameras_bin(&read_file(&p("cameras.bin"))?))?,
                images: with_path(&p("images.bin"), parse_images_bin(&read_file(&p("images.bin"))?))?,
                points3d: with_path(&p("points3D.bin"), parse_points3d_bin(&read_file(&p("points3D.bin"))?))?,
            })
        }
        Some(Encoding::Text) => {
            let text = |n: &str| -> Result<String, ColmapError> {
                let path = dir.join(n);
                String::from_utf8(read_file(&path)?).map_err(|_| ColmapError::Io {
                    path: path.display().to_string(),
                    message: "not valid UTF-8".into(),
                })
            };
            let p = |n: &str| dir.join(n);
            Ok(Reconstruction {
                cameras: with_path(&p("cameras.txt"), parse_cameras_txt(&text("cameras.txt")?))?,
                images: with_path(&p("images.txt"), parse_images_txt(&text("images.txt")?))?,
                points3d: with_path(&p("points3D.txt"), parse_points3d_txt(&text("points3D.txt")?))?,
            })
        }
        None => Err(ColmapError::Io {
            path: dir.display().to_string(),
            message: "no cameras.bin or cameras.txt found".into(),
        }),
    }
}

pub fn write_reconstruction(dir: &Path, rec: &Reconstruction, encoding: Encoding) -> Result<(), ColmapError> {
    let write = |name: &str, bytes: &[u8]| {
        let path = dir.join(name);
        std::fs::write(&path, bytes).map_err(|e| ColmapError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    };
    std::fs::create_dir_all(dir).map_err(|e| ColmapError::Io {
        path: dir.display().to_string(),
        message: e.to_string(),
    })?;
    match encoding {
        Encoding::Binary => {
            write("cameras.bin", &serialize_cameras_bin(&rec.cameras)?)?;
            write("images.bin", &serialize_images_bin(&rec.images)?)?;
            write("points3D.bin", &serialize_points3d_bin(&rec.points3d)?)?;
        }
        Encoding::Text => {
            write("cameras.txt", serialize_cameras_txt(&rec.cameras)?.as_bytes())?;
            write("images.txt", serialize_images_txt(&rec.images)?.as_bytes())?;
            write("points3D.txt", serialize_points3d_txt(&rec.points3d)?.as_bytes())?;
        }
    }
    Ok(())
}
