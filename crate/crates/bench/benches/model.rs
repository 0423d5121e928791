// SPDX-License-Identifier: Apache-2.0

use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion, Throughput};
use sbsim_bench::add_sandbox;
use sbsim_core::adversary::{explore, fuzz, run_all};
use sbsim_core::{snapshot, BugInjection, CoreId, FuzzConfig};

fn fuzz_steps(c: &mut Criterion) {
    let mut g = c.benchmark_group("fuzz");
    g.throughput(Throughput::Elements(1000));
    g.sample_size(10);
    g.bench_function("1000_steps", |b| b.iter(|| fuzz(FuzzConfig::new(black_box(1), 1000))));
    g.finish();
}

fn exploration(c: &mut Criterion) {
    let mut g = c.benchmark_group("explore");
    g.sample_size(10);
    g.bench_function("2_granules_depth_4", |b| b.iter(|| explore(2, black_box(4))));
    g.finish();
}

fn attacks(c: &mut Criterion) {
    let mut g = c.benchmark_group("attacks");
    g.sample_size(10);
    g.bench_function("catalog", |b| b.iter(|| run_all(BugInjection::default())));
    g.finish();
}

fn add_rpc(c: &mut Criterion) {
    c.bench_function("app_add", |b| {
        b.iter_batched_ref(
            add_sandbox,
            |(sys, r)| sys.app_add(CoreId(1), *r, black_box(40), 2).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

fn snapshots(c: &mut Criterion) {
    let (sys, _) = add_sandbox();
    let bytes = snapshot::encode(&sys);
    c.bench_function("snapshot_encode", |b| b.iter(|| snapshot::encode(black_box(&sys))));
    c.bench_function("snapshot_decode", |b| {
        b.iter(|| snapshot::decode(black_box(&bytes)).unwrap())
    });
}

criterion_group!(benches, fuzz_steps, exploration, attacks, add_rpc, snapshots);
criterion_main!(benches);
