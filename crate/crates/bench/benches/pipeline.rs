use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use quadsci::baseline::{demosaic_bilinear, expand_cfa, gap_tv, GapConfig};
use quadsci::ssm::{selective_scan, ScanDirection, SsmParams};
use quadsci::train::loss_and_grads;
use quadsci::{encode, initialize, CfaPattern, Model, NetworkConfig, SplitMix64, Variant};
use quadsci_bench::{scene, toy};

fn sensing(c: &mut Criterion) {
    let (raw, masks, meas) = scene(256, 256, 8, 1);
    c.bench_function("encode 256x256x8", |b| b.iter(|| encode(black_box(&raw), &masks, 0.0, 0).unwrap()));
    c.bench_function("initialize 256x256x8", |b| b.iter(|| initialize(black_box(&meas), &masks).unwrap()));
}

fn scan(c: &mut Criterion) {
    let mut rng = SplitMix64::new(2);
    let params = SsmParams::init(32, 16, &mut rng);
    let seq: Vec<f64> = (0..1024 * 32).map(|_| rng.normal()).collect();
    c.bench_function("selective scan L=1024 c=32 N=16", |b| {
        b.iter(|| selective_scan(black_box(&seq), &params, ScanDirection::Forward).unwrap())
    });
}

fn baseline(c: &mut Criterion) {
    let (_, masks, meas) = scene(64, 64, 8, 3);
    let cfg = GapConfig {
        iterations: 10,
        ..GapConfig::default()
    };
    c.bench_function("gap-tv 64x64x8, 10 iterations", |b| b.iter(|| gap_tv(black_box(&meas), &masks, &cfg).unwrap()));
    let (raw, _, _) = scene(128, 128, 8, 4);
    let sparse = expand_cfa(&raw, CfaPattern::QuadBayer).unwrap();
    c.bench_function("bilinear demosaic 128x128x8", |b| {
        b.iter(|| demosaic_bilinear(black_box(&sparse), CfaPattern::QuadBayer).unwrap())
    });
}

fn network(c: &mut Criterion) {
    let mut g = c.benchmark_group("network");
    g.sample_size(10);
    let sample = toy(32, 32, 4);
    let model = Model::build(NetworkConfig::new(Variant::T, 32, 32, 4), 5).unwrap();
    g.bench_function("forward T 32x32x4", |b| b.iter(|| model.forward(black_box(&sample.init)).unwrap()));
    g.bench_function("train step T 32x32x4", |b| b.iter(|| loss_and_grads(&model, black_box(&sample)).unwrap()));
    g.finish();
}

criterion_group!(benches, sensing, scan, baseline, network);
criterion_main!(benches);
