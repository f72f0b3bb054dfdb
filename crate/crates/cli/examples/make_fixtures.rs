//! Regenerates the scenes under `crates/cli/tests/fixtures`.
//!
//! `cargo run -p viewbench-cli --example make_fixtures -- <out-dir>`
//!
//! Everything is seeded, so the output is byte-identical across runs.
//!
//! * `synth9/`: nine 64×48 views of a textured ground plane with a raised
//!   block, rendered by the reference splatter from the true point colors.
//!   The two held-out views (indices 0 and 8) carry a per-channel appearance
//!   gain that training views do not have.
//! * `protocol_sensitivity/`: two 192×160 high-frequency JPEGs in
//!   `images/`, plus an `images_4/` that was resized with a Lanczos filter
//!   and stored as JPEG, standing in for a dataset's released downscales.
//!   `predictions/` holds noisy area-downscaled renders of the test view.
//! * `protocols/`: protocol files used with `--protocol-file`.

use std::path::Path;

use image::imageops::FilterType;
use viewbench::camera::{CameraModel, Mat3, Pose};
use viewbench::colmap::{
    write_reconstruction, ColmapCameraRecord, ColmapImageRecord, ColmapPoint3D, Encoding,
    Reconstruction,
};
use viewbench::evaluator::PredictionSet;
use viewbench::image::Image;
use viewbench::imageops::{downscale_area, quantize_u8, quantize_value};
use viewbench::method::{MethodApi, RenderOptions};
use viewbench::protocol::{AppearanceProtocol, EvalProtocol, ImageSource, LpipsBackbone};
use viewbench::refsplat::{RefSplat, RefSplatConfig};
use viewbench::rng::SplitMix64;

type Result<T> = std::result::Result<T, Box<dyn std::error::Error>>;

const SYNTH_W: u32 = 64;
const SYNTH_H: u32 = 48;
const SYNTH_BACKGROUND: [f64; 3] = [0.25, 0.3, 0.35];
/// Appearance gains of the held-out views.
const TEST_GAINS: [(usize, [f64; 3]); 2] = [(0, [1.3, 0.95, 0.75]), (8, [0.8, 1.05, 1.25])];

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// World-to-camera pose of a camera at `center` looking at the origin with
/// world +z up (camera x right, y down, z forward).
fn look_at(center: [f64; 3]) -> Pose {
    let z = normalize([-center[0], -center[1], -center[2]]);
    let down = [0.0, 0.0, -1.0];
    let d = down[0] * z[0] + down[1] * z[1] + down[2] * z[2];
    let y = normalize([down[0] - d * z[0], down[1] - d * z[1], down[2] - d * z[2]]);
    let x = cross(y, z);
    let r: Mat3 = [x, y, z];
    let t = [
        -(r[0][0] * center[0] + r[0][1] * center[1] + r[0][2] * center[2]),
        -(r[1][0] * center[0] + r[1][1] * center[1] + r[1][2] * center[2]),
        -(r[2][0] * center[0] + r[2][1] * center[1] + r[2][2] * center[2]),
    ];
    Pose::from_rotation_translation(&r, t)
}

fn synth_points() -> (Vec<[f64; 3]>, Vec<[f64; 3]>) {
    let (mut points, mut colors) = (Vec::new(), Vec::new());
    let n = 48;
    for i in 0..n {
        for j in 0..n {
            let x = -1.2 + 2.4 * i as f64 / (n - 1) as f64;
            let y = -1.2 + 2.4 * j as f64 / (n - 1) as f64;
            let block = x.abs() < 0.35 && y.abs() < 0.35;
            let z = if block { 0.4 } else { 0.0 };
            let checker = ((i / 6 + j / 6) % 2) as f64;
            colors.push(if block {
                [0.85, 0.35 + 0.3 * checker, 0.2]
            } else {
                [
                    0.5 + 0.35 * (3.0 * x).sin(),
                    0.35 + 0.3 * checker,
                    0.5 + 0.35 * (2.5 * y + x).cos(),
                ]
            });
            points.push([x, y, z]);
        }
    }
    (points, colors)
}

fn write_png(path: &Path, img: &Image) -> Result<()> {
    std::fs::write(path, quantize_u8(img).encode_png()?)?;
    Ok(())
}

fn write_synth9(dir: &Path) -> Result<()> {
    let (points, colors) = synth_points();
    let config = RefSplatConfig {
        radius: 1,
        ..RefSplatConfig::default()
    };
    let mut splat = RefSplat::from_points(config, points.clone(), colors.clone(), SYNTH_BACKGROUND);
    std::fs::create_dir_all(dir.join("images"))?;

    let params = vec![48.0, 48.0, SYNTH_W as f64 / 2.0, SYNTH_H as f64 / 2.0];
    let mut images = Vec::new();
    for i in 0..9 {
        let angle = (-40.0 + 10.0 * i as f64).to_radians();
        let pose = look_at([3.0 * angle.sin(), -3.0 * angle.cos(), 2.0]);
        let name = format!("view_{i:02}.png");
        let camera = viewbench::camera::Camera::new(CameraModel::Pinhole, SYNTH_W, SYNTH_H, params.clone(), pose)?;
        let gain = TEST_GAINS
            .iter()
            .find(|(k, _)| *k == i)
            .map(|(_, g)| g.to_vec());
        let img = splat.render(
            &camera,
            &RenderOptions {
                embedding: gain,
                output_names: None,
            },
        )?;
        write_png(&dir.join("images").join(&name), &img)?;
        images.push(ColmapImageRecord {
            image_id: i as u32 + 1,
            qvec: pose.qvec,
            tvec: pose.tvec,
            camera_id: 1,
            name,
            points2d: Vec::new(),
        });
    }
    let points3d = points
        .iter()
        .zip(&colors)
        .enumerate()
        .map(|(k, (p, c))| ColmapPoint3D {
            point3d_id: k as u64 + 1,
            xyz: *p,
            rgb: [quantize_value(c[0]), quantize_value(c[1]), quantize_value(c[2])],
            error: 0.5,
            track: Vec::new(),
        })
        .collect();
    let rec = Reconstruction {
        cameras: vec![ColmapCameraRecord {
            camera_id: 1,
            model: CameraModel::Pinhole,
            width: SYNTH_W as u64,
            height: SYNTH_H as u64,
            params,
        }],
        images,
        points3d,
    };
    write_reconstruction(&dir.join("sparse").join("0"), &rec, Encoding::Binary)?;
    Ok(())
}

/// Stripes, rings and blocks: enough detail near the downscaled Nyquist
/// limit that the resampling filter visibly changes the result.
fn texture(w: usize, h: usize, phase: f64) -> Image {
    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            let (fx, fy) = (x as f64, y as f64);
            let r = ((fx - w as f64 / 2.0).powi(2) + (fy - h as f64 / 2.0).powi(2)).sqrt();
            data.push(0.5 + 0.4 * (0.45 * fx + phase).sin());
            data.push(0.5 + 0.4 * (0.3 * r + 0.1 * fy).cos());
            data.push(if (x / 8 + y / 10) % 2 == 0 { 0.75 } else { 0.25 });
        }
    }
    Image::from_float(w, h, 3, data).expect("sized")
}

fn lanczos_downscale(img: &Image, factor: u32) -> Image {
    let (w, h) = (img.width() as u32, img.height() as u32);
    let buf = image::RgbImage::from_raw(w, h, img.as_u8().expect("u8").to_vec()).expect("sized");
    let small = image::imageops::resize(&buf, w / factor, h / factor, FilterType::Lanczos3);
    Image::from_u8((w / factor) as usize, (h / factor) as usize, 3, small.into_raw()).expect("sized")
}

fn write_protocol_sensitivity(dir: &Path) -> Result<()> {
    let (w, h, factor) = (192u32, 160u32, 4u32);
    for sub in ["images", "images_4"] {
        std::fs::create_dir_all(dir.join(sub))?;
    }
    let mut rng = SplitMix64::new(7);
    let mut images = Vec::new();
    let mut predictions = Vec::new();
    for i in 0..2 {
        // Originals and released downscales share file names, as in the
        // public captures; originals are near-lossless JPEGs.
        let name = format!("frame_{i}.jpg");
        let original = quantize_u8(&texture(w as usize, h as usize, i as f64)).encode_jpeg(100)?;
        std::fs::write(dir.join("images").join(&name), &original)?;
        let full = Image::decode(&original, &name)?;
        std::fs::write(dir.join("images_4").join(&name), lanczos_downscale(&full, factor).encode_jpeg(90)?)?;
        if i == 0 {
            let area = downscale_area(&full, factor)?;
            let noisy: Vec<f64> = area
                .to_f64()
                .into_iter()
                .map(|v| v + 0.1 * (rng.next_unit() - 0.5))
                .collect();
            let pred = Image::from_float(area.width(), area.height(), 3, noisy)?;
            predictions.push(("frame_0".to_string(), pred));
        }
        images.push(ColmapImageRecord {
            image_id: i + 1,
            qvec: [1.0, 0.0, 0.0, 0.0],
            tvec: [0.1 * i as f64, 0.0, 0.0],
            camera_id: 1,
            name,
            points2d: Vec::new(),
        });
    }
    let rec = Reconstruction {
        cameras: vec![ColmapCameraRecord {
            camera_id: 1,
            model: CameraModel::Pinhole,
            width: w as u64,
            height: h as u64,
            params: vec![150.0, 150.0, w as f64 / 2.0, h as f64 / 2.0],
        }],
        images,
        points3d: Vec::new(),
    };
    write_reconstruction(&dir.join("sparse").join("0"), &rec, Encoding::Text)?;
    PredictionSet::write(&dir.join("predictions"), "noisy-area-downscale", &predictions, None)?;
    Ok(())
}

fn write_protocols(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let protocols = [
        EvalProtocol {
            id: "synthetic-native".into(),
            lpips_backbone: LpipsBackbone::Alex,
            background: None,
            image_source: ImageSource::PreDownscaled { factor: 1 },
            appearance_protocol: AppearanceProtocol::None,
            quantize_before_metrics: true,
        },
        EvalProtocol {
            id: "manual_downscale_4".into(),
            lpips_backbone: LpipsBackbone::Vgg,
            background: None,
            image_source: ImageSource::ManualDownscale { factor: 4 },
            appearance_protocol: AppearanceProtocol::None,
            quantize_before_metrics: true,
        },
    ];
    for p in protocols {
        std::fs::write(
            dir.join(format!("{}.json", p.id)),
            viewbench::canonical::to_canonical_json(&p)?,
        )?;
    }
    Ok(())
}

fn main() -> Result<()> {
    let out = std::env::args()
        .nth(1)
        .ok_or("usage: make_fixtures <out-dir>")?;
    let out = Path::new(&out);
    write_synth9(&out.join("synth9"))?;
    write_protocol_sensitivity(&out.join("protocol_sensitivity"))?;
    write_protocols(&out.join("protocols"))?;
    println!("fixtures written to {}", out.display());
    Ok(())
}
