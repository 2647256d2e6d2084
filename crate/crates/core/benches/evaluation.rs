use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use dble::autodiff::DistanceMode;
use dble::data::{make_blobs, BlobSpec};
use dble::eval::{evaluate_dble, DbleEval};
use dble::exec::Exec;
use dble::model::{ConfidenceConfig, DbleModel, EncoderConfig};
use dble::proto::embed_all;
use dble::rng::{RngStreams, BLOBS, INIT_CONFIDENCE, INIT_ENCODER};

fn policies() -> Vec<(&'static str, Exec)> {
    vec![
        ("sequential", Exec::Sequential),
        #[cfg(feature = "parallel")]
        ("parallel", Exec::Parallel),
    ]
}

fn setup() -> (DbleModel, dble::data::Dataset) {
    let spec = BlobSpec {
        classes: 10,
        per_class: 200,
        dims: 64,
        spread: 1.0,
        separation: 5.0,
    };
    let streams = RngStreams::new(0);
    let ds = make_blobs(&spec, &mut streams.stream(BLOBS)).unwrap();
    let model = DbleModel::init(
        EncoderConfig {
            input_dim: 64,
            hidden_dims: vec![256, 128],
            embed_dim: 64,
        },
        ConfidenceConfig::default(),
        &mut streams.stream(INIT_ENCODER),
        &mut streams.stream(INIT_CONFIDENCE),
    )
    .unwrap();
    (model, ds)
}

fn bench(c: &mut Criterion) {
    let (model, ds) = setup();

    let mut g = c.benchmark_group("embed_all");
    for (name, exec) in policies() {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| embed_all(&model.encoder, &model.theta, ds.features(), exec).unwrap())
        });
    }
    g.finish();

    let mut g = c.benchmark_group("evaluate_dble");
    g.sample_size(10);
    for (name, exec) in policies() {
        let opts = DbleEval {
            samples: 20,
            mode: DistanceMode::Euclidean,
            seed: 0,
            exec,
        };
        g.bench_with_input(BenchmarkId::from_parameter(name), &opts, |b, opts| {
            b.iter(|| evaluate_dble(&model, &ds, &ds, opts).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
