use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use topomesh::eval::emd_exact;
use topomesh::losses::chamfer;
use topomesh::spatial::{nearest_all_with, KdTree};
use topomesh::{Tape, Tensor};
use topomesh_bench::random_cloud;

fn bench_chamfer(c: &mut Criterion) {
    let mut group = c.benchmark_group("chamfer");
    for n in [512, 2500] {
        let (p, q) = (random_cloud(n, 1), random_cloud(n, 2));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| {
                let tape = Tape::new();
                let pv = tape.leaf(Tensor::from_points(&p));
                let loss = chamfer(&pv, &tape.constant(Tensor::from_points(&q))).unwrap();
                black_box(tape.backward(loss).unwrap().wrt(&pv))
            })
        });
    }
    group.finish();
}

fn bench_kdtree(c: &mut Criterion) {
    let mut group = c.benchmark_group("kdtree");
    let points = random_cloud(10_000, 3);
    let queries = random_cloud(10_000, 4);
    group.bench_function("build_10k", |b| b.iter(|| black_box(KdTree::new(&points))));
    let tree = KdTree::new(&points);
    group.bench_function("query_10k", |b| b.iter(|| black_box(nearest_all_with(&tree, &queries))));
    group.finish();
}

fn bench_emd(c: &mut Criterion) {
    let mut group = c.benchmark_group("emd");
    group.sample_size(10);
    for n in [256, 1024] {
        let (p, q) = (random_cloud(n, 5), random_cloud(n, 6));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| black_box(emd_exact(&p, &q, 0).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_chamfer, bench_kdtree, bench_emd);
criterion_main!(benches);
