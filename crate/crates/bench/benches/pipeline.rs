use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

use normalforge::features::FeatureParams;
use normalforge::filtering::{bilateral_filter, FilterParams};
use normalforge::mfps::{mfps_estimate, pca_estimate, MfpsParams};
use normalforge::nn::{Mode, Tape};
use normalforge::refine::{make_samples, Batch, LossKind, Network, TrainParams, TrainSample};
use normalforge::synth::{synth_generate, ShapeKind, SynthShape};
use normalforge::{bbox_diagonal, substream, NormalField, PointCloud, SpatialIndex, Vec3};

fn cube(samples: usize) -> PointCloud {
    synth_generate(&SynthShape { kind: ShapeKind::Cube, samples, noise_frac: 0.002, seed: 1 }).unwrap()
}

fn spatial(c: &mut Criterion) {
    let cloud = cube(10_000);
    c.bench_function("index build 10k", |b| b.iter(|| SpatialIndex::build(cloud.points())));
    let index = SpatialIndex::build(cloud.points());
    let q = Vec3::new(0.5, 0.5, 1.0);
    c.bench_function("knn 100 of 10k", |b| b.iter(|| index.knn(&q, 100)));
}

fn estimators(c: &mut Criterion) {
    let cloud = cube(2000);
    let index = SpatialIndex::build(cloud.points());
    c.bench_function("pca k=30 2k", |b| b.iter(|| pca_estimate(&cloud, &index, 30).unwrap()));
    let params = MfpsParams { scales: vec![15, 30, 45], ..MfpsParams::default() };
    let mut group = c.benchmark_group("slow");
    group.sample_size(10);
    group.bench_function("mfps 2k", |b| b.iter(|| mfps_estimate(&cloud, &params, 1).unwrap()));
    group.finish();
    let normals = pca_estimate(&cloud, &index, 30).unwrap();
    let sigma = 0.05 * bbox_diagonal(&cloud);
    c.bench_function("bilateral 2k", |b| b.iter(|| bilateral_filter(&cloud, &index, &normals, sigma, 0.35).unwrap()));
}

fn network(c: &mut Criterion) {
    let cloud = cube(500);
    let gt = NormalField(cloud.gt_normals().unwrap().to_vec());
    let filter = FilterParams { spatial: vec![0.05], range: vec![0.2, 0.5], ..FilterParams::default() };
    let features = FeatureParams { max_pts: 32, ..FeatureParams::default() };
    let samples = make_samples(&cloud, &gt, &filter, &features, 1).unwrap();
    let params = TrainParams::desk();
    let net = Network { arch: params.arch, conn1: params.conn1, conn2: params.conn2, branches: filter.branch_count(), max_pts: features.max_pts, m: features.m };
    let store = net.init(&mut substream(1, 0)).unwrap();
    let picks: Vec<&TrainSample> = samples.iter().take(64).collect();
    let batch = Batch::new(&picks.iter().map(|s| &s.input).collect::<Vec<_>>(), &net).unwrap();
    let target = normalforge::nn::Tensor::new(vec![64, 3], picks.iter().flat_map(|s| [s.gt.x, s.gt.y, s.gt.z]).collect()).unwrap();
    c.bench_function("desk net forward 64", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            net.forward(&mut tape, &store, &batch, Mode::Eval, &mut substream(0, 0)).unwrap()
        })
    });
    c.bench_function("desk net forward+backward 64", |b| {
        b.iter_batched(
            Tape::new,
            |mut tape| {
                let loss = net.loss(&mut tape, &store, &batch, &target, 0.02, LossKind::L2, Mode::Train, &mut substream(0, 0)).unwrap();
                tape.backward(loss, None).params(&tape, &store)
            },
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, spatial, estimators, network);
criterion_main!(benches);
