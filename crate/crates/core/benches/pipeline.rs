use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use gsimclr::cluster::{self, KMeansConfig};
use gsimclr::contrastive::{self, ContrastiveConfig, ContrastiveModel, EncoderSpec, ProjectionHeadSpec};
use gsimclr::dae::LatentMatrix;
use gsimclr::data::{self, AugmentationConfig, SyntheticSpec};
use gsimclr::scheduler::PlanSource;
use gsimclr_tensor::exec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const MODES: [(bool, &str); 2] = [(true, "parallel"), (false, "sequential")];

fn kmeans_assign(c: &mut Criterion) {
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let y = LatentMatrix::new(
        2000,
        2048,
        (0..2000 * 2048).map(|_| r.random_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let model = cluster::kmeans_fit(
        &y,
        &KMeansConfig {
            k: 64,
            max_iter: 2,
            ..Default::default()
        },
        0,
    )
    .unwrap();
    let mut group = c.benchmark_group("kmeans_assign");
    group.sample_size(10);
    for (parallel, label) in MODES {
        exec::set_parallel(parallel);
        group.bench_function(label, |b| {
            b.iter(|| cluster::assign(black_box(&model), black_box(&y)).unwrap())
        });
    }
    exec::set_parallel(true);
    group.finish();
}

fn augmentation(c: &mut Criterion) {
    let ds = data::make_synthetic(SyntheticSpec::new(4, 64, 32), 0).unwrap();
    let idx: Vec<usize> = (0..64).collect();
    let cfg = AugmentationConfig::default();
    let mut group = c.benchmark_group("augment_batch");
    for (parallel, label) in MODES {
        exec::set_parallel(parallel);
        group.bench_function(label, |b| {
            b.iter(|| data::augment_batch(&ds, black_box(&idx), &cfg, 0, 0, 0).unwrap())
        });
    }
    exec::set_parallel(true);
    group.finish();
}

fn contrastive_epoch(c: &mut Criterion) {
    let ds = data::make_synthetic(SyntheticSpec::new(4, 64, 32), 0).unwrap();
    let enc = EncoderSpec::from_filters((32, 32, 3), &[32, 64, 128, 256]);
    let model = ContrastiveModel::build(&enc, &ProjectionHeadSpec { widths: [256, 128, 64] }, 0).unwrap();
    let src = PlanSource::random(ds.len(), 64, 0, true);
    let cfg = ContrastiveConfig {
        epochs: 1,
        ..ContrastiveConfig::default()
    };
    let mut group = c.benchmark_group("contrastive_epoch");
    group.sample_size(10);
    for (parallel, label) in MODES {
        exec::set_parallel(parallel);
        group.bench_function(BenchmarkId::new("256_images", label), |b| {
            b.iter(|| contrastive::train_contrastive(&ds, &src, model.clone(), &cfg).unwrap())
        });
    }
    exec::set_parallel(true);
    group.finish();
}

criterion_group!(benches, kmeans_assign, augmentation, contrastive_epoch);
criterion_main!(benches);
