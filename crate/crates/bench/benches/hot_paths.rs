use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use fedtp_core::data::{partition_pathological, SynthImageSpec};
use fedtp_core::hypernet::init_embeddings;
use fedtp_core::model::init_model;
use fedtp_core::{
    Federation, FederationConfig, HyperNet, HyperNetConfig, ModelConfig, ParamSet, StrategyName, StrategySpec,
    Transformer,
};

fn model_step(c: &mut Criterion) {
    let cfg = ModelConfig::desk();
    let model = Transformer::new(cfg.clone()).unwrap();
    let params = init_model(&cfg, 0).unwrap().merged();
    let ds = SynthImageSpec::default().generate().unwrap();
    let idx: Vec<usize> = (0..64).collect();
    let batch = ds.batch(&idx).unwrap();
    c.bench_function("desk model loss and grads, batch 64", |b| {
        b.iter(|| model.loss_and_grads(black_box(&params), &batch).unwrap())
    });
}

fn hypernet(c: &mut Criterion) {
    let hn = HyperNet::init(HyperNetConfig::default(), &ModelConfig::desk(), 0).unwrap();
    let z = init_embeddings(1, hn.config.embed_dim, 0).unwrap().remove(0);
    let w: ParamSet = hn.forward(&z).unwrap();
    c.bench_function("hypernet forward", |b| b.iter(|| hn.forward(black_box(&z)).unwrap()));
    c.bench_function("hypernet vjp", |b| b.iter(|| hn.vjp(black_box(&z), &w).unwrap()));
}

fn round(c: &mut Criterion) {
    let ds = SynthImageSpec {
        per_class: 25,
        ..SynthImageSpec::default()
    }
    .generate()
    .unwrap();
    let manifest = partition_pathological(&ds, 10, 2, 0).unwrap();
    let cfg = FederationConfig {
        rounds: usize::MAX,
        local_epochs: 1,
        lr: 0.05,
        server_lr: 0.05,
        sample_rate: 0.5,
        eval_every: usize::MAX,
        ..FederationConfig::default()
    };
    let mut group = c.benchmark_group("federated round");
    group.sample_size(10);
    for name in [StrategyName::Fedavg, StrategyName::Fedtp] {
        let mut fed = Federation::new(
            ModelConfig::desk(),
            HyperNetConfig::default(),
            StrategySpec::new(name),
            cfg.clone(),
            &ds,
            &manifest,
        )
        .unwrap();
        group.bench_function(name.as_str(), |b| b.iter(|| fed.run_round().unwrap()));
    }
    group.finish();
}

criterion_group!(benches, model_step, hypernet, round);
criterion_main!(benches);
