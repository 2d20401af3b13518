use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use overlapreg::geometry::{knn_self, KdTree};
use overlapreg::matching::{kabsch, ransac_register, sample_and_match, CorrespondenceSet, RansacConfig, SamplerMode};
use overlapreg::model::{Model, ModelConfig};
use overlapreg::synth::{make_pair, GenConfig};

fn geometry(c: &mut Criterion) {
    let pair = make_pair(&GenConfig::default()).unwrap();
    let src = &pair.source;
    c.bench_function("kdtree_build_717", |b| b.iter(|| KdTree::build(black_box(src))));
    let tree = KdTree::build(&pair.target);
    c.bench_function("kdtree_nearest_717x717", |b| {
        b.iter(|| src.iter().map(|p| tree.nearest(p).unwrap().1).sum::<f64>())
    });
    c.bench_function("knn_self_k10_717", |b| b.iter(|| knn_self(black_box(src), 10).unwrap()));
    let moved = pair.gt.apply(src);
    c.bench_function("kabsch_717", |b| b.iter(|| kabsch(black_box(src.points()), moved.points(), None).unwrap()));
}

fn registration(c: &mut Criterion) {
    let pair = make_pair(&GenConfig { seed: 3, ..GenConfig::default() }).unwrap();
    let n = pair.source.len().min(pair.target.len()).min(250);
    let corr = CorrespondenceSet::new((0..n).map(|i| (i, (i * 7) % pair.target.len())).collect());
    let cfg = RansacConfig { iterations: 1000, ..RansacConfig::default() };
    c.bench_function("ransac_1000_iterations_250_pairs", |b| {
        b.iter(|| ransac_register(&corr, &pair.source, &pair.target, &cfg).ok())
    });
}

fn network(c: &mut Criterion) {
    let pair = make_pair(&GenConfig::default()).unwrap();
    let model = Model::new(ModelConfig { widths: vec![32, 64, 64], k_graph: 8, ..ModelConfig::default() }).unwrap();
    let params = model.init_params(0).unwrap();
    let (ps, pt) = (model.pyramid(&pair.source).unwrap(), model.pyramid(&pair.target).unwrap());
    let mut group = c.benchmark_group("network");
    group.sample_size(10);
    group.bench_function("pyramid_717", |b| b.iter(|| model.pyramid(black_box(&pair.source)).unwrap()));
    group.bench_function("forward_pair_717", |b| b.iter(|| model.infer_prepared(&params, &ps, &pt).unwrap()));
    let (s, t) = model.infer_prepared(&params, &ps, &pt).unwrap();
    group.bench_function("sample_and_match_k250", |b| b.iter(|| sample_and_match(&s, &t, &SamplerMode::default()).unwrap()));
    group.finish();
}

criterion_group!(benches, geometry, registration, network);
criterion_main!(benches);
