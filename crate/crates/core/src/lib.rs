//! Snapshot compressive imaging for quad-Bayer color video.

#![allow(clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod autodiff;
pub mod baseline;
pub mod blocks;
pub mod cfa;
pub mod cube;
pub mod error;
pub mod feature;
pub mod metrics;
pub mod network;
pub mod rng;
pub mod sensing;
pub mod ssm;
pub mod train;
pub mod weights;

pub use cfa::CfaPattern;
pub use cube::{load_cube, save_cube, Dtype, VideoCube};
pub use error::{Error, ErrorKind, Result};
pub use metrics::{psnr, quality_report, ssim, QualityReport};
pub use rng::SplitMix64;
pub use sensing::{encode, gen_masks, initialize, MaskSet, Measurement};
pub use baseline::{demosaic_bilinear, expand_cfa, gap_tv, GapConfig};
pub use network::{attention_complexity, count_flops, count_params, FlopCount, Model, NetworkConfig, Variant};
pub use train::{train_toy, OptimState, ToyDataSpec, TrainConfig};
