//! Single-thread against the full pool on the data-parallel hot paths.
//! Build with `--no-default-features` for the sequential fallback.

use criterion::{criterion_group, criterion_main, Criterion};
use regalign::mapping::{grad_batch, precompute, MappingConfig, MappingParams};
use regalign::par;
use regalign::synth::{generate_dataset, GenConfig};
use regalign::{AttributeCatalog, Encoder, EncoderConfig};

fn hot_paths(c: &mut Criterion) {
    let catalog = AttributeCatalog::standard();
    let ds = generate_dataset(&GenConfig::new(29.4, 2000, 7), &catalog).unwrap();
    let encoder = Encoder::new(EncoderConfig::default()).unwrap();
    let pre = precompute(&ds, &encoder).unwrap();
    let params = MappingParams::init(&MappingConfig::default(), catalog.len(), encoder.d(), 1, encoder.hash()).unwrap();
    let batch = &pre[..48];
    let all = std::thread::available_parallelism().map_or(1, |n| n.get());

    for (label, threads) in [("1 thread", 1), ("all threads", all)] {
        let mut g = c.benchmark_group(label);
        g.sample_size(20);
        g.bench_function("precompute", |b| {
            b.iter(|| par::with_threads(threads, || precompute(&ds, &encoder).unwrap()))
        });
        g.bench_function("grad_batch", |b| {
            b.iter(|| par::with_threads(threads, || grad_batch(&params, batch).unwrap()))
        });
        g.bench_function("generate", |b| {
            b.iter(|| {
                par::with_threads(threads, || {
                    generate_dataset(&GenConfig::new(29.4, 2000, 7), &catalog).unwrap()
                })
            })
        });
        g.finish();
    }
}

criterion_group!(benches, hot_paths);
criterion_main!(benches);
