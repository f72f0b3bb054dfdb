//! Evaluation of prediction sets and in-process methods.

use std::path::PathBuf;
use std::sync::{Arc, OnceLock};

use viewbench::camera::{Camera, Pose};
use viewbench::dataset::{DatasetMetadata, SceneDataset, SceneImage, Split};
use viewbench::evaluator::{
    evaluate, evaluate_method, evaluate_pairs, render_test_views, EvalError, EvalPair,
    PredictionSet, RunLabels,
};
use viewbench::image::Image;
use viewbench::lpips::{load_weights, synthetic_container, LpipsNetwork};
use viewbench::method::{MethodApi, RenderOptions};
use viewbench::protocol::{AppearanceProtocol, EvalProtocol, ImageSource, LpipsBackbone};
use viewbench::refsplat::{RefSplat, RefSplatConfig};
use viewbench::rng::SplitMix64;

fn net() -> &'static LpipsNetwork {
    static NET: OnceLock<LpipsNetwork> = OnceLock::new();
    NET.get_or_init(|| load_weights(&synthetic_container(LpipsBackbone::Alex, 5)).unwrap())
}

fn protocol() -> EvalProtocol {
    EvalProtocol {
        id: "test-native".into(),
        lpips_backbone: LpipsBackbone::Alex,
        background: None,
        image_source: ImageSource::PreDownscaled { factor: 1 },
        appearance_protocol: AppearanceProtocol::None,
        quantize_before_metrics: true,
    }
}

fn noise(w: usize, h: usize, c: usize, seed: u64) -> Image {
    let mut rng = SplitMix64::new(seed);
    Image::from_u8(w, h, c, (0..w * h * c).map(|_| (rng.next_u64() >> 56) as u8).collect()).unwrap()
}

fn camera(w: u32, h: u32, tx: f64) -> Camera {
    Camera::pinhole(w, h, 40.0, 40.0, w as f64 / 2.0, h as f64 / 2.0).with_pose(Pose {
        qvec: [1.0, 0.0, 0.0, 0.0],
        tvec: [tx, 0.0, 2.0],
    })
}

fn scene(images: Vec<(&str, Image)>) -> SceneDataset {
    SceneDataset {
        name: "unit".into(),
        images: images
            .into_iter()
            .enumerate()
            .map(|(i, (id, img))| SceneImage {
                id: id.into(),
                file_name: format!("{id}.png"),
                path: PathBuf::from(format!("{id}.png")),
                camera: Some(camera(img.width() as u32, img.height() as u32, 0.1 * i as f64)),
                split: Split::Test,
                image: Some(Arc::new(img)),
            })
            .collect(),
        points3d: None,
        metadata: DatasetMetadata::default(),
    }
}

#[test]
fn identical_predictions_score_perfectly() {
    let ds = scene(vec![("a", noise(48, 40, 3, 1)), ("b", noise(48, 40, 3, 2))]);
    let dir = tempfile::tempdir().unwrap();
    let imgs: Vec<(String, Image)> =
        ds.images.iter().map(|i| (i.id.clone(), (*i.image.clone().unwrap()).clone())).collect();
    let preds = PredictionSet::write(dir.path(), "oracle", &imgs, None).unwrap();
    let doc = evaluate(&preds, &ds, &protocol(), net(), "unit-ds").unwrap();
    assert_eq!(doc.aggregates.psnr, f64::INFINITY);
    assert_eq!(doc.aggregates.ssim, 1.0);
    assert!(doc.aggregates.lpips.abs() < 1e-8);
    assert_eq!(doc.method_id, "oracle");
    assert_eq!(doc.per_image.iter().map(|r| r.image_id.as_str()).collect::<Vec<_>>(), ["a", "b"]);
    assert!(doc.tool_version.contains("synthetic-seed5"));
    // Checksums are hashes of the stored files.
    let bytes = std::fs::read(dir.path().join("a.png")).unwrap();
    assert_eq!(doc.checksums["a"], viewbench::image::sha256_hex(&bytes));
}

#[test]
fn predictions_without_manifest_are_found_by_stem() {
    let ds = scene(vec![("a", noise(40, 40, 3, 1))]);
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("a.png"), noise(40, 40, 3, 1).encode_png().unwrap()).unwrap();
    let preds = PredictionSet::load(dir.path()).unwrap();
    let doc = evaluate(&preds, &ds, &protocol(), net(), "d").unwrap();
    assert_eq!(doc.aggregates.psnr, f64::INFINITY);
}

#[test]
fn missing_and_unexpected_predictions_are_named() {
    let ds = scene(vec![("a", noise(40, 40, 3, 1)), ("b", noise(40, 40, 3, 2))]);
    let dir = tempfile::tempdir().unwrap();
    let preds = PredictionSet::write(dir.path(), "m", &[("a".into(), noise(40, 40, 3, 1))], None).unwrap();
    let err = evaluate(&preds, &ds, &protocol(), net(), "d").unwrap_err();
    assert!(matches!(&err, EvalError::MissingPredictions(ids) if ids == &["b"]), "{err}");
    assert!(err.to_string().contains('b'));
    assert!(err.is_input_error());

    let dir = tempfile::tempdir().unwrap();
    let all = [("a", 1), ("b", 2), ("zz", 3)].map(|(id, s)| (id.to_string(), noise(40, 40, 3, s)));
    let preds = PredictionSet::write(dir.path(), "m", &all, None).unwrap();
    let err = evaluate(&preds, &ds, &protocol(), net(), "d").unwrap_err();
    assert!(matches!(&err, EvalError::UnexpectedPredictions(ids) if ids == &["zz"]), "{err}");
}

#[test]
fn deleted_prediction_file_is_reported_missing() {
    let ds = scene(vec![("a", noise(40, 40, 3, 1))]);
    let dir = tempfile::tempdir().unwrap();
    let preds = PredictionSet::write(dir.path(), "m", &[("a".into(), noise(40, 40, 3, 1))], None).unwrap();
    std::fs::remove_file(dir.path().join("a.png")).unwrap();
    let err = evaluate(&preds, &ds, &protocol(), net(), "d").unwrap_err();
    assert!(matches!(&err, EvalError::MissingPredictions(ids) if ids == &["a"]), "{err}");
}

#[test]
fn shape_and_backbone_mismatches_are_input_errors() {
    let ds = scene(vec![("a", noise(40, 40, 3, 1))]);
    let dir = tempfile::tempdir().unwrap();
    let preds = PredictionSet::write(dir.path(), "m", &[("a".into(), noise(48, 40, 3, 1))], None).unwrap();
    let err = evaluate(&preds, &ds, &protocol(), net(), "d").unwrap_err();
    assert!(matches!(err, EvalError::ShapeMismatch { expected: (40, 40), found: (48, 40), .. }), "{err}");

    let vgg = EvalProtocol {
        lpips_backbone: LpipsBackbone::Vgg,
        ..protocol()
    };
    let err = evaluate(&preds, &ds, &vgg, net(), "d").unwrap_err();
    assert!(matches!(err, EvalError::BackboneMismatch { .. }));
    assert!(err.is_input_error());
}

#[test]
fn one_level_checkerboard_gives_analytic_psnr() {
    let gt = Image::from_u8(40, 40, 3, vec![100; 40 * 40 * 3]).unwrap();
    let pred: Vec<u8> = (0..40 * 40)
        .flat_map(|p| {
            let v = if (p % 40 + p / 40) % 2 == 0 { 99 } else { 101 };
            [v; 3]
        })
        .collect();
    let pair = EvalPair {
        id: "c".into(),
        prediction: Image::from_u8(40, 40, 3, pred).unwrap(),
        ground_truth: Arc::new(gt),
        checksum: String::new(),
    };
    let labels = RunLabels {
        method_id: "m".into(),
        dataset_id: "d".into(),
        scene_id: "s".into(),
    };
    let doc = evaluate_pairs(&[pair], &protocol(), net(), &labels).unwrap();
    assert!((doc.per_image[0].psnr - 20.0 * 255f64.log10()).abs() < 1e-9);
    assert!(doc.per_image[0].lpips > 0.0);
}

#[test]
fn rgba_ground_truth_is_blended_on_the_protocol_background() {
    let (w, h) = (40, 40);
    let rgba = noise(w, h, 4, 9);
    let blended = viewbench::imageops::blend_background(&rgba, [1.0; 3]).unwrap();
    let white = EvalProtocol {
        background: Some([1.0; 3]),
        ..protocol()
    };
    let labels = RunLabels {
        method_id: "m".into(),
        dataset_id: "d".into(),
        scene_id: "s".into(),
    };
    let pair = |prediction| EvalPair {
        id: "x".into(),
        prediction,
        ground_truth: Arc::new(rgba.clone()),
        checksum: String::new(),
    };
    let doc = evaluate_pairs(&[pair(viewbench::imageops::quantize_u8(&blended))], &white, net(), &labels).unwrap();
    assert_eq!(doc.aggregates.psnr, f64::INFINITY);
    // An RGBA prediction is blended the same way.
    let doc = evaluate_pairs(&[pair(rgba.clone())], &white, net(), &labels).unwrap();
    assert_eq!(doc.aggregates.psnr, f64::INFINITY);
}

#[test]
fn float_predictions_are_quantized_unless_the_protocol_opts_out() {
    let gt = noise(40, 40, 3, 4);
    let mut rng = SplitMix64::new(8);
    let pred = Image::from_float(
        40,
        40,
        3,
        gt.to_f64().iter().map(|v| v + 0.1 * (rng.next_unit() - 0.5)).collect(),
    )
    .unwrap();
    let labels = RunLabels {
        method_id: "m".into(),
        dataset_id: "d".into(),
        scene_id: "s".into(),
    };
    let pair = |p: Image| EvalPair {
        id: "x".into(),
        prediction: p,
        ground_truth: Arc::new(gt.clone()),
        checksum: String::new(),
    };
    let quantized = evaluate_pairs(&[pair(pred.clone())], &protocol(), net(), &labels).unwrap();
    let pre = evaluate_pairs(&[pair(viewbench::imageops::quantize_u8(&pred))], &protocol(), net(), &labels).unwrap();
    assert_eq!(quantized.to_canonical_json(), pre.to_canonical_json());
    let raw = EvalProtocol {
        quantize_before_metrics: false,
        ..protocol()
    };
    let float = evaluate_pairs(&[pair(pred)], &raw, net(), &labels).unwrap();
    assert_ne!(float.per_image[0].psnr, quantized.per_image[0].psnr);
    assert!((float.per_image[0].psnr - quantized.per_image[0].psnr).abs() < 0.1);
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let imgs: Vec<(&str, Image)> = vec![
        ("a", noise(40, 40, 3, 1)),
        ("b", noise(40, 40, 3, 2)),
        ("c", noise(40, 40, 3, 3)),
        ("d", noise(40, 40, 3, 4)),
    ];
    let pairs: Vec<EvalPair> = imgs
        .iter()
        .enumerate()
        .map(|(i, (id, img))| EvalPair {
            id: id.to_string(),
            prediction: noise(40, 40, 3, 100 + i as u64),
            ground_truth: Arc::new(img.clone()),
            checksum: format!("{i}"),
        })
        .collect();
    let labels = RunLabels {
        method_id: "m".into(),
        dataset_id: "d".into(),
        scene_id: "s".into(),
    };
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| evaluate_pairs(&pairs, &protocol(), net(), &labels).unwrap().to_canonical_json())
    };
    let one = run(1);
    assert_eq!(one, run(4));
    assert_eq!(one, run(8));
}

fn splat_scene(gain: [f64; 3]) -> (RefSplat, SceneDataset) {
    let mut points = Vec::new();
    let mut colors = Vec::new();
    for i in 0..40 {
        for j in 0..30 {
            points.push([i as f64 * 0.05 - 1.0, j as f64 * 0.05 - 0.75, 0.0]);
            colors.push([0.3 + 0.01 * i as f64, 0.2 + 0.02 * j as f64, if (i + j) % 2 == 0 { 0.8 } else { 0.3 }]);
        }
    }
    let mut splat = RefSplat::from_points(RefSplatConfig::default(), points, colors, [0.2, 0.2, 0.2]);
    let images = (0..2)
        .map(|k| {
            let cam = camera(64, 48, 0.1 * k as f64);
            let img = splat
                .render(
                    &cam,
                    &RenderOptions {
                        embedding: Some(gain.to_vec()),
                        output_names: None,
                    },
                )
                .unwrap();
            (format!("v{k}"), img)
        })
        .collect::<Vec<_>>();
    let ds = scene(images.iter().map(|(id, img)| (id.as_str(), img.clone())).collect());
    (splat, ds)
}

#[test]
fn in_process_evaluation_equals_writing_predictions() {
    let (mut splat, ds) = splat_scene([1.0; 3]);
    let direct = evaluate_method(&mut splat, &ds, &protocol(), net(), "d", true).unwrap();
    let renders = render_test_views(&mut splat, &ds, &protocol(), true).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let preds = PredictionSet::write(dir.path(), "ref-splat", &renders, None).unwrap();
    let stored = evaluate(&preds, &ds, &protocol(), net(), "d").unwrap();
    assert_eq!(direct.to_canonical_json(), stored.to_canonical_json());
    assert_eq!(direct.aggregates.psnr, f64::INFINITY);
}

#[test]
fn nerfw_half_fits_left_and_scores_right() {
    let (mut splat, ds) = splat_scene([1.25, 0.9, 0.7]);
    let nerfw = EvalProtocol {
        appearance_protocol: AppearanceProtocol::NerfwHalf,
        ..protocol()
    };
    let fitted = evaluate_method(&mut splat, &ds, &nerfw, net(), "d", true).unwrap();
    let plain = evaluate_method(&mut splat, &ds, &nerfw, net(), "d", false).unwrap();
    for (f, p) in fitted.per_image.iter().zip(&plain.per_image) {
        assert!(f.psnr > p.psnr + 1.0, "{} vs {}", f.psnr, p.psnr);
    }
    // Without the appearance protocol the same renders are scored in full.
    let full = evaluate_method(&mut splat, &ds, &protocol(), net(), "d", true).unwrap();
    assert_ne!(full.aggregates.psnr, plain.aggregates.psnr);

    let mut without = RefSplat::default().without_embeddings();
    let err = evaluate_method(&mut without, &ds, &nerfw, net(), "d", true).unwrap_err();
    assert!(matches!(err, EvalError::Capability(_)), "{err}");
}
