//! Throughput comparison of the per-image fan-out against a plain
//! sequential loop, for the two embarrassingly parallel stages: dataset
//! synthesis and evaluation inference. Built with default features,
//! `fanout` routes through the rayon pool; with `--no-default-features`
//! both arms are sequential and should time alike.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use pairnet_core::model::{ModelConfig, PairNetModel};
use pairnet_core::oracle::{oracle_queries, EmbeddingTable, OracleConfig};
use pairnet_core::par::map_ordered;
use pairnet_core::scene::synth::{synthesize, SynthConfig};
use pairnet_core::scene::Dataset;

fn synth_cfg(train_scenes: usize) -> SynthConfig {
    SynthConfig {
        train_scenes,
        val_scenes: 0,
        height: 24,
        width: 24,
        object_classes: 8,
        stuff_classes: 3,
        relation_classes: 6,
        mean_relations: 5.6,
        max_relations: 10,
        skew: 1.2,
        segments_min: 4,
        segments_max: 8,
        seed: 0,
    }
}

fn bench_synthesis(c: &mut Criterion) {
    let mut group = c.benchmark_group("synthesis");
    for count in [32usize, 128] {
        let cfg = synth_cfg(count);
        // The library path: fans out per image under the parallel feature.
        group.bench_with_input(BenchmarkId::new("fanout", count), &cfg, |b, cfg| {
            b.iter(|| synthesize(cfg).unwrap());
        });
        // Reference: the same per-image work forced through one thread by
        // generating each image as its own single-scene split.
        group.bench_with_input(BenchmarkId::new("sequential", count), &cfg, |b, cfg| {
            b.iter(|| {
                let mut single = cfg.clone();
                single.train_scenes = 1;
                for _ in 0..count {
                    synthesize(&single).unwrap();
                }
            });
        });
    }
    group.finish();
}

fn eval_world() -> (PairNetModel, Dataset, EmbeddingTable, OracleConfig) {
    let mut cfg = synth_cfg(0);
    cfg.val_scenes = 64;
    let data = synthesize(&cfg).unwrap().val;
    let model = PairNetModel::new(ModelConfig::default(), 0).unwrap();
    let table = EmbeddingTable::new(8, 16, 32, 0).unwrap();
    (model, data, table, OracleConfig::default())
}

fn bench_evaluation(c: &mut Criterion) {
    let (model, data, table, oracle) = eval_world();
    let mut group = c.benchmark_group("evaluation");
    group.sample_size(10);

    let infer_one = |scene: &pairnet_core::scene::PanopticScene| {
        let qs = oracle_queries(scene, &table, &oracle).unwrap().query_set;
        model.infer(&qs).unwrap().predictions.len()
    };

    group.bench_function("fanout", |b| {
        b.iter(|| -> usize { map_ordered(&data.scenes, infer_one).into_iter().sum() })
    });
    group.bench_function("sequential", |b| {
        b.iter(|| -> usize { data.scenes.iter().map(infer_one).sum() })
    });
    group.finish();
}

criterion_group!(benches, bench_synthesis, bench_evaluation);
criterion_main!(benches);
