use std::hint::black_box;

use copersona_core::classifier::{Classifier, ThresholdPolicy, TokenFeatureStrategy};
use copersona_core::embedding::cosine;
use copersona_core::metrics::{cohen_kappa, ConfusionMatrix};
use copersona_core::synthetic::{SyntheticWorld, WorldSpec};
use copersona_core::textproc::{fmm_segment, SegmenterDictionary, TokenSequence};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};

fn bench_cosine(c: &mut Criterion) {
    let mut g = c.benchmark_group("cosine");
    for dim in [32usize, 200] {
        let u: Vec<f32> = (0..dim).map(|i| (i as f32).sin()).collect();
        let v: Vec<f32> = (0..dim).map(|i| (i as f32).cos()).collect();
        g.bench_with_input(BenchmarkId::from_parameter(dim), &dim, |b, _| {
            b.iter(|| cosine(black_box(&u), black_box(&v)).unwrap())
        });
    }
    g.finish();
}

fn bench_classify(c: &mut Criterion) {
    let world = SyntheticWorld::generate(&WorldSpec::default(), 1);
    let posts: Vec<(String, TokenSequence)> = world
        .posts(1000, 15, 0.8, 2)
        .into_iter()
        .map(|p| (p.post_id, p.tokens))
        .collect();
    let mut g = c.benchmark_group("classify_1000_posts");
    g.throughput(Throughput::Elements(posts.len() as u64));
    for strategy in [TokenFeatureStrategy::MaxToken, TokenFeatureStrategy::MeanPostVector] {
        let policy = ThresholdPolicy {
            strategy,
            ..Default::default()
        };
        let clf = Classifier::new(&world.store, world.categories.clone(), policy).unwrap();
        g.bench_function(format!("{strategy:?}"), |b| b.iter(|| clf.classify_tokens(black_box(&posts))));
    }
    g.finish();
}

fn bench_fmm(c: &mut Criterion) {
    let dict = SegmenterDictionary::new(["失眠", "熬夜", "早睡", "咖啡", "加班", "瑜伽", "睡眠质量", "晚上"]);
    let text = "晚上又失眠了熬夜加班喝咖啡睡眠质量很差想早睡做瑜伽".repeat(20);
    let mut g = c.benchmark_group("fmm");
    g.throughput(Throughput::Bytes(text.len() as u64));
    g.bench_function("segment", |b| b.iter(|| fmm_segment(black_box(&text), &dict)));
    g.finish();
}

fn bench_kappa(c: &mut Criterion) {
    let k = 5;
    let counts: Vec<Vec<u64>> = (0..k)
        .map(|i| (0..k).map(|j| if i == j { 200 } else { 12 }).collect())
        .collect();
    let m = ConfusionMatrix::from_counts((0..k).map(|i| format!("c{i}")).collect(), counts).unwrap();
    c.bench_function("kappa_5x5", |b| b.iter(|| cohen_kappa(black_box(&m)).unwrap()));
}

criterion_group!(benches, bench_cosine, bench_classify, bench_fmm, bench_kappa);
criterion_main!(benches);
