use criterion::{black_box, criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use topomesh::losses::MeshVar;
use topomesh::mesh::make_icosphere;
use topomesh::networks::{deform_var, encode_var, Architecture};
use topomesh::{Tape, Tensor};
use topomesh_bench::random_cloud;

fn bench_mlp(c: &mut Criterion) {
    let arch = Architecture::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let encoder = arch.init_encoder(&mut rng);
    let deformer = arch.init_deform(&mut rng);
    let cloud = Tensor::from_points(&random_cloud(2500, 7));
    let template = make_icosphere(4).unwrap();

    let mut group = c.benchmark_group("mlp");
    group.sample_size(10);
    group.bench_function("encoder_2500_points", |b| {
        b.iter(|| {
            let tape = Tape::new();
            black_box(
                encode_var(&tape.constant(cloud.clone()), &encoder.bind(&tape, false))
                    .unwrap()
                    .value(),
            )
        })
    });
    group.bench_function("deform_2562_vertices", |b| {
        let feature = Tensor::zeros(1, arch.feature_dim);
        b.iter(|| {
            let tape = Tape::new();
            let mesh = MeshVar::constant(&tape, &template);
            let out = deform_var(&mesh, &tape.constant(feature.clone()), &deformer.bind(&tape, false)).unwrap();
            black_box(out.positions.value())
        })
    });
    group.finish();
}

criterion_group!(benches, bench_mlp);
criterion_main!(benches);
