use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion, Throughput};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cpow_bench::{header, verify_fixture};
use cpow_core::chain::{hash_header_bytes, Difficulty};
use cpow_core::mining::{NonceRange, ScanPlan, Scanner};
use cpow_core::simnet::{run_scenario, ExecMode, ScenarioConfig};

fn hashing(c: &mut Criterion) {
    let bytes = header().canonical_bytes();
    let mut g = c.benchmark_group("hash");
    g.throughput(Throughput::Elements(1));
    g.bench_function("header", |b| {
        let mut nonce = 0u64;
        b.iter(|| {
            nonce += 1;
            hash_header_bytes(black_box(&bytes), nonce)
        })
    });
    g.finish();
}

fn scanning(c: &mut Criterion) {
    let h = header();
    let range = NonceRange::new(0, 1 << 16).unwrap();
    let mut g = c.benchmark_group("scan");
    g.throughput(Throughput::Elements(4096));
    for (name, dense) in [("sampled", vec![]), ("dense", vec![range])] {
        g.bench_function(name, |b| {
            b.iter_batched(
                || Scanner::new(&h, Difficulty::MAX, ScanPlan::new(vec![range], dense.clone(), 64).unwrap()),
                |mut sc| sc.advance(4096),
                BatchSize::SmallInput,
            )
        });
    }
    g.finish();
}

fn verification(c: &mut Criterion) {
    let f = verify_fixture(6, 1 << 14);
    c.bench_function("verify/group-of-6", |b| {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        b.iter_batched(
            || f.cvrm.clone(),
            |mut cvrm| cvrm.verify(f.group, &f.proofs, &f.header, 1, &mut rng, 10).unwrap(),
            BatchSize::LargeInput,
        )
    });
}

fn simulation(c: &mut Criterion) {
    let cfg = ScenarioConfig { blocks_target: 5, ..ScenarioConfig::desk() };
    let mut g = c.benchmark_group("simulate");
    g.sample_size(10);
    g.bench_function("desk-5-blocks", |b| b.iter(|| run_scenario(&cfg, 1, ExecMode::Reference).unwrap()));
    g.bench_function("desk-5-blocks-sharded", |b| {
        b.iter(|| run_scenario(&cfg, 1, ExecMode::Sharded { workers: 4 }).unwrap())
    });
    g.finish();
}

criterion_group!(benches, hashing, scanning, verification, simulation);
criterion_main!(benches);
