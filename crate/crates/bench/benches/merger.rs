use criterion::{criterion_group, criterion_main, Criterion};
use geovos_core::merger_net::{
    merge_features, MergerConfig, MergerInputs, MergerInstance, MergerParams,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn forward(c: &mut Criterion) {
    let cfg = MergerConfig::desk();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let params = MergerParams::random(&cfg, &mut rng);
    for side in [4usize, 8] {
        let inputs = MergerInputs::random(&cfg, side, side, &mut rng);
        c.bench_function(&format!("merge_features/desk_{side}x{side}"), |b| {
            b.iter(|| merge_features(black_box(&inputs), &cfg, &params).unwrap())
        });
    }
}

fn backward(c: &mut Criterion) {
    let cfg = MergerConfig::desk();
    let inst = MergerInstance::random(&cfg, 4, 4, 6).unwrap();
    c.bench_function("gradients/desk_4x4", |b| {
        b.iter(|| black_box(&inst).gradients(None).unwrap())
    });
}

criterion_group!(benches, forward, backward);
criterion_main!(benches);
