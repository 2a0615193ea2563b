use criterion::{criterion_group, criterion_main, Criterion};
use geovos_bench::track_pair;
use geovos_core::metrics::{count_visible_segments, select_subset, track_metrics, SubsetConfig};
use std::collections::BTreeMap;
use std::hint::black_box;

fn per_track(c: &mut Criterion) {
    let (pred, gt) = track_pair(200, 128, 96, 3);
    c.bench_function("track_metrics/200x128x96", |b| {
        b.iter(|| track_metrics(black_box(&pred), &gt).unwrap())
    });
    c.bench_function("count_visible_segments/200", |b| {
        b.iter(|| count_visible_segments(black_box(&gt), 5))
    });
}

fn subset(c: &mut Criterion) {
    let tracks: BTreeMap<usize, _> = (0..100)
        .map(|i| (i, track_pair(100, 32, 32, i as u64).1))
        .collect();
    let cfg = SubsetConfig::default();
    c.bench_function("select_subset/100_tracks", |b| {
        b.iter(|| select_subset(black_box(&tracks).iter(), &cfg).unwrap())
    });
}

criterion_group!(benches, per_track, subset);
criterion_main!(benches);
