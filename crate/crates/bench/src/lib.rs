//! Shared fixtures for benchmarks.

use quadsci::cfa::mosaic;
use quadsci::train::{toy_sample, ToyDataSpec, ToySample};
use quadsci::{encode, gen_masks, CfaPattern, MaskSet, Measurement, SplitMix64, VideoCube};

pub fn random_rgb(h: usize, w: usize, t: usize, seed: u64) -> VideoCube {
    let mut rng = SplitMix64::new(seed);
    VideoCube::from_fn(h, w, 3, t, |_, _, _, _| rng.uniform())
}

/// Raw video, masks and snapshot for an `h × w × t` quad-Bayer scene.
pub fn scene(h: usize, w: usize, t: usize, seed: u64) -> (VideoCube, MaskSet, Measurement) {
    let raw = mosaic(&random_rgb(h, w, t, seed), CfaPattern::QuadBayer).expect("dims divisible by 4");
    let masks = gen_masks(h, w, t, seed + 1).expect("positive dims");
    let meas = encode(&raw, &masks, 0.0, 0).expect("matching dims");
    (raw, masks, meas)
}

pub fn toy(h: usize, w: usize, t: usize) -> ToySample {
    let spec = ToyDataSpec {
        height: h,
        width: w,
        frames: t,
        ..ToyDataSpec::default()
    };
    toy_sample(&spec, 1, 0).expect("valid spec")
}
