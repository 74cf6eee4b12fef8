use criterion::{black_box, criterion_group, criterion_main, Criterion};
use eqprop::estimators::estimate;
use eqprop::oracles::bptt_gradient;
use eqprop::train::one_hot;
use eqprop::{Connection, Dynamics, EstimatorKind};
use eqprop_bench::{filled, mnist_net};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn relaxation(c: &mut Criterion) {
    let (net, params) = mnist_net(Connection::Bidirectional);
    let x = filled(&[32, 1, 28, 28]);
    let y = one_hot(&(0..32).map(|i| i % 10).collect::<Vec<_>>(), 10);
    let d = Dynamics::new(&net, &params, &x).unwrap();
    let mut g = c.benchmark_group("mnist batch 32");
    g.sample_size(10);
    g.bench_function("free phase T=20", |b| {
        b.iter(|| d.free(black_box(20)).unwrap())
    });
    g.bench_function("symmetric estimate T=20 K=10", |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        b.iter(|| estimate(&d, &y, EstimatorKind::Symmetric, 0.5, 20, 10, &mut rng).unwrap())
    });
    g.bench_function("bptt T=20", |b| {
        b.iter(|| bptt_gradient(&d, &y, 20, false).unwrap())
    });
    g.finish();

    let (unet, uparams) = mnist_net(Connection::Unidirectional);
    let ud = Dynamics::new(&unet, &uparams, &x).unwrap();
    c.bench_function("mnist batch 32/kp-vf-sym estimate T=20 K=10", |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        b.iter(|| estimate(&ud, &y, EstimatorKind::KpVfSym, 0.5, 20, 10, &mut rng).unwrap())
    });
}

criterion_group!(benches, relaxation);
criterion_main!(benches);
