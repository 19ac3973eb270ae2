use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use waffle_bench::{initial_globals, mnist_shaped_clients};
use waffle_core::federation::{
    deserialize_update, fedavg_client_update, serialize_update, waffle_client_update, RoundConfig,
};
use waffle_core::model::{compose_weight, forward};
use waffle_core::{Algorithm, ClientVariationalState, DenseMatrix, FactorScores, ModelConfig, RngStream};

fn factorized_layer(c: &mut Criterion) {
    let mut rng = RngStream::new(0, 0, 0, 0);
    let w_a = DenseMatrix::from_fn(200, 120, |_, _| rng.normal());
    let w_b = DenseMatrix::from_fn(120, 784, |_, _| rng.normal());
    let r = vec![1.0; 120];
    let b: Vec<f64> = (0..120).map(|k| (k % 2) as f64).collect();
    c.bench_function("compose_weight 200x120x784", |bench| {
        bench.iter(|| compose_weight(black_box(&w_a), &r, &b, &w_b).unwrap())
    });

    let model = ModelConfig::mnist_mlp();
    let dict = initial_globals(&model).dict;
    let scores = FactorScores::ones(&model);
    let x = DenseMatrix::from_fn(10, 784, |_, _| rng.uniform());
    c.bench_function("mnist-mlp forward, batch 10", |bench| {
        bench.iter(|| forward(&model, &dict, &scores, black_box(&x)).unwrap())
    });
}

fn client_updates(c: &mut Criterion) {
    let model = ModelConfig::mnist_mlp();
    let clients = mnist_shaped_clients(10, 60);
    let globals = initial_globals(&model);
    let cfg = RoundConfig {
        local_epochs: 1,
        ..RoundConfig::default()
    };
    let varstate = ClientVariationalState::init(&model, &cfg.prior);
    let mut group = c.benchmark_group("client update, one epoch");
    group.sample_size(10);
    group.bench_function("waffle", |bench| {
        bench.iter(|| waffle_client_update(&model, &globals, &varstate, &clients[0], &cfg).unwrap())
    });
    let dense = model.unfactorized();
    let dense_globals = initial_globals(&dense);
    let avg = RoundConfig {
        algorithm: Algorithm::FedAvg,
        ..cfg.clone()
    };
    group.bench_function("fedavg", |bench| {
        bench.iter(|| fedavg_client_update(&dense, &dense_globals, &clients[0], &avg).unwrap())
    });
    group.finish();
}

fn wire_codec(c: &mut Criterion) {
    let model = ModelConfig::mnist_mlp();
    let dict = initial_globals(&model).dict;
    let bytes = serialize_update(&dict, 3, 7);
    c.bench_function("serialize mnist-mlp update", |bench| {
        bench.iter(|| serialize_update(black_box(&dict), 3, 7))
    });
    c.bench_function("deserialize mnist-mlp update", |bench| {
        bench.iter_batched(
            || bytes.clone(),
            |b| deserialize_update(&b).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, factorized_layer, client_updates, wire_codec);
criterion_main!(benches);
