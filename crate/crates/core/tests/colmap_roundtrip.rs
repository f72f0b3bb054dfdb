//! Serialize → parse identity for generated reconstructions, in both
//! encodings, and agreement between the binary and text readers.

use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use viewbench::camera::CameraModel;
use viewbench::colmap::*;

fn finite() -> impl Strategy<Value = f64> {
    use proptest::num::f64 as f;
    f::POSITIVE | f::NEGATIVE | f::NORMAL | f::SUBNORMAL | f::ZERO
}

fn camera() -> impl Strategy<Value = ColmapCameraRecord> {
    (any::<u32>(), 0..CameraModel::ALL.len(), 1u64..100_000, 1u64..100_000).prop_flat_map(
        |(camera_id, m, width, height)| {
            let model = CameraModel::ALL[m];
            proptest::collection::vec(finite(), model.arity()).prop_map(move |params| {
                ColmapCameraRecord {
                    camera_id,
                    model,
                    width,
                    height,
                    params,
                }
            })
        },
    )
}

fn point3d_ref() -> impl Strategy<Value = u64> {
    prop_oneof![Just(INVALID_POINT3D_ID), 0..=i64::MAX as u64]
}

fn image() -> impl Strategy<Value = ColmapImageRecord> {
    (
        any::<u32>(),
        proptest::array::uniform4(finite()),
        proptest::array::uniform3(finite()),
        any::<u32>(),
        "[A-Za-z0-9_./-]{1,16}",
        proptest::collection::vec((finite(), finite(), point3d_ref()), 0..6),
    )
        .prop_map(|(image_id, qvec, tvec, camera_id, name, pts)| ColmapImageRecord {
            image_id,
            qvec,
            tvec,
            camera_id,
            name,
            points2d: pts
                .into_iter()
                .map(|(x, y, point3d_id)| Point2D { x, y, point3d_id })
                .collect(),
        })
}

fn point3d() -> impl Strategy<Value = ColmapPoint3D> {
    (
        0..=i64::MAX as u64,
        proptest::array::uniform3(finite()),
        proptest::array::uniform3(any::<u8>()),
        finite(),
        proptest::collection::vec((any::<u32>(), any::<u32>()), 0..5),
    )
        .prop_map(|(point3d_id, xyz, rgb, error, track)| ColmapPoint3D {
            point3d_id,
            xyz,
            rgb,
            error,
            track,
        })
}

fn reconstruction() -> impl Strategy<Value = Reconstruction> {
    (
        proptest::collection::vec(camera(), 0..4),
        proptest::collection::vec(image(), 0..5),
        proptest::collection::vec(point3d(), 0..8),
    )
        .prop_map(|(cameras, images, points3d)| Reconstruction {
            cameras,
            images,
            points3d,
        })
}

fn roundtrip(rec: &Reconstruction) -> Result<(), TestCaseError> {
    let bin = Reconstruction {
        cameras: parse_cameras_bin(&serialize_cameras_bin(&rec.cameras).unwrap()).unwrap(),
        images: parse_images_bin(&serialize_images_bin(&rec.images).unwrap()).unwrap(),
        points3d: parse_points3d_bin(&serialize_points3d_bin(&rec.points3d).unwrap()).unwrap(),
    };
    let txt = Reconstruction {
        cameras: parse_cameras_txt(&serialize_cameras_txt(&rec.cameras).unwrap()).unwrap(),
        images: parse_images_txt(&serialize_images_txt(&rec.images).unwrap()).unwrap(),
        points3d: parse_points3d_txt(&serialize_points3d_txt(&rec.points3d).unwrap()).unwrap(),
    };
    prop_assert_eq!(&bin, rec);
    prop_assert_eq!(&txt, rec);
    prop_assert_eq!(&bin, &txt);
    Ok(())
}

#[test]
fn thousand_generated_reconstructions_roundtrip_quickly() {
    let mut runner = TestRunner::new(Config {
        cases: 1000,
        failure_persistence: None,
        ..Config::default()
    });
    let start = Instant::now();
    runner.run(&reconstruction(), |rec| roundtrip(&rec)).unwrap();
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(10), "1000 cases took {elapsed:?}");
}

#[test]
fn negative_zero_and_extremes_survive_text() {
    let rec = Reconstruction {
        cameras: vec![ColmapCameraRecord {
            camera_id: 7,
            model: CameraModel::Opencv,
            width: 1,
            height: u32::MAX as u64,
            params: vec![-0.0, f64::MAX, f64::MIN_POSITIVE, 5e-324, 1.0 / 3.0, -1e300, 0.1, 2.5],
        }],
        images: vec![],
        points3d: vec![],
    };
    roundtrip(&rec).unwrap();
    let txt = parse_cameras_txt(&serialize_cameras_txt(&rec.cameras).unwrap()).unwrap();
    assert!(txt[0].params[0].is_sign_negative());
}

#[test]
fn directories_roundtrip_in_both_encodings() {
    let mut runner = TestRunner::new(Config {
        cases: 20,
        failure_persistence: None,
        ..Config::default()
    });
    runner
        .run(&reconstruction(), |rec| {
            for encoding in [Encoding::Binary, Encoding::Text] {
                let dir = tempfile::tempdir().unwrap();
                write_reconstruction(dir.path(), &rec, encoding).unwrap();
                prop_assert_eq!(detect_encoding(dir.path()), Some(encoding));
                prop_assert_eq!(&read_reconstruction(dir.path()).unwrap(), &rec);
            }
            Ok(())
        })
        .unwrap();
}
