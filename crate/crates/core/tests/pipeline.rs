//! Cross-module checks through the public API.

use nalgebra::Rotation3;
use proptest::prelude::*;

use normalforge::denoise::{point_update, DenoiseParams};
use normalforge::features::FeatureParams;
use normalforge::filtering::{multi_scale_filter, FilterParams};
use normalforge::io;
use normalforge::metrics::{angular_error, evaluate, summarize};
use normalforge::mfps::{mfps_estimate, pca_estimate, MfpsParams};
use normalforge::refine::{make_samples, refine_field, train, RefineModel, TrainParams};
use normalforge::synth::{synth_generate, ShapeKind, SynthShape};
use normalforge::{NormalField, PointCloud, SpatialIndex, Vec3};

fn cloud(kind: ShapeKind, samples: usize, noise_frac: f64, seed: u64) -> PointCloud {
    synth_generate(&SynthShape { kind, samples, noise_frac, seed }).unwrap()
}

fn gt(cloud: &PointCloud) -> NormalField {
    NormalField(cloud.gt_normals().unwrap().to_vec())
}

#[test]
fn estimate_train_refine_round_trip() {
    let shape = cloud(ShapeKind::Cube, 600, 0.002, 3);
    let mfps = MfpsParams { scales: vec![15, 30], orient_k: 20, ..MfpsParams::default() };
    let initial = mfps_estimate(&shape, &mfps, 3).unwrap();
    initial.check_unit(1e-9).unwrap();
    let filter = FilterParams { spatial: vec![0.05], range: vec![0.35], ..FilterParams::default() };
    let features = FeatureParams { max_pts: 16, ..FeatureParams::default() };
    let samples = make_samples(&shape, &initial, &filter, &features, 3).unwrap();
    let params = TrainParams { epochs: 3, ..TrainParams::desk() };
    let (model, log) = train(&samples, &filter, &features, &params, 3).unwrap();
    assert_eq!(log.history.len(), 4);
    let refined = refine_field(&shape, &initial, &model).unwrap();
    refined.check_unit(1e-9).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    model.save(&path).unwrap();
    let loaded = RefineModel::load(&path).unwrap();
    assert_eq!(refine_field(&shape, &initial, &loaded).unwrap(), refined);
}

#[test]
fn cloud_files_round_trip_at_written_precision() {
    let shape = cloud(ShapeKind::Cylinder, 300, 0.01, 4);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.xyz");
    io::write_cloud(&path, &shape).unwrap();
    let back = io::read_cloud(&path).unwrap();
    // Nine significant digits are written.
    for (a, b) in back.points().iter().zip(shape.points()) {
        assert!((a - b).amax() <= 1e-8 * b.amax().max(1.0));
    }
    for (a, b) in back.gt_normals().unwrap().iter().zip(shape.gt_normals().unwrap()) {
        assert!((a - b).amax() <= 1e-8);
    }
    assert_eq!(io::read_normals(&path).unwrap(), back.gt_normals().unwrap());
    // A second write of the parsed cloud reproduces the file exactly.
    let again = dir.path().join("d.xyz");
    io::write_cloud(&again, &back).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}

#[test]
fn filtered_sets_stay_unit_and_close_on_a_sphere() {
    let shape = cloud(ShapeKind::Sphere, 2000, 0.0, 5);
    let index = SpatialIndex::build(shape.points());
    let initial = pca_estimate(&shape, &index, 20).unwrap();
    let params = FilterParams::default();
    let sets = multi_scale_filter(&shape, &index, &initial, &params).unwrap();
    assert_eq!(sets.len(), shape.len());
    let truth = gt(&shape);
    for (set, g) in sets.iter().zip(truth.iter()) {
        assert_eq!(set.len(), params.branch_count());
        for n in set {
            assert!((n.norm() - 1.0).abs() < 1e-9);
            assert!(angular_error(n, g) < 10.0);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn summary_is_ordered_and_bounded(errors in prop::collection::vec(0.0f64..90.0, 1..200)) {
        let r = summarize(&errors, &[5.0, 10.0, 30.0]);
        prop_assert!(r.mean_deg <= r.rmse_deg + 1e-12);
        prop_assert!(r.pgp["5"] <= r.pgp["10"] && r.pgp["10"] <= r.pgp["30"]);
        prop_assert!((0.0..=1.0).contains(&r.pgp["30"]));
    }

    #[test]
    fn evaluation_ignores_normal_sign(flips in prop::collection::vec(any::<bool>(), 50), seed in 0u64..1000) {
        let shape = cloud(ShapeKind::Sphere, 50, 0.0, seed);
        let truth = gt(&shape);
        let pred = NormalField(truth.iter().zip(&flips).map(|(n, &f)| if f { -n } else { *n }).collect());
        let r = evaluate(&pred, &truth, &[1.0]).unwrap();
        prop_assert!(r.mean_deg < 1e-6);
        prop_assert_eq!(r.pgp["1"], 1.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn denoising_commutes_with_rotation(roll in -3.0f64..3.0, pitch in -1.5f64..1.5, yaw in -3.0f64..3.0, seed in 0u64..100) {
        let shape = cloud(ShapeKind::Cube, 800, 0.005, seed);
        let normals = gt(&shape);
        let q = Rotation3::from_euler_angles(roll, pitch, yaw);
        let moved = shape.transformed(|p| q * p, |n| q * n).unwrap();
        let moved_normals = NormalField(normals.iter().map(|n| q * n).collect());
        let params = DenoiseParams::default();
        let a = point_update(&shape, &normals, &params).unwrap();
        let b = point_update(&moved, &moved_normals, &params).unwrap();
        for (p, r) in a.points().iter().zip(b.points()) {
            let d: Vec3 = q * p - r;
            prop_assert!(d.norm() < 1e-9);
        }
    }
}
