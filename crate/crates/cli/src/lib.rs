//! Command-line front end. [`run`] parses arguments, dispatches one
//! subcommand, prints a one-line JSON manifest to stderr and returns the
//! process exit code.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use quadsci::cfa::mosaic;
use quadsci::cube::dump_frames;
use quadsci::train::{train_toy_with, Stage};
use quadsci::{
    attention_complexity, count_flops, demosaic_bilinear, encode, expand_cfa, gap_tv, gen_masks, initialize,
    load_cube, quality_report, save_cube, CfaPattern, Error, ErrorKind, GapConfig, MaskSet, Measurement, Model,
    NetworkConfig, ToyDataSpec, TrainConfig, Variant, VideoCube,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub const THREADS_ENV: &str = "QUADSCI_THREADS";

#[derive(Debug, Parser)]
#[command(name = "quadsci", version, about = "Quad-Bayer video snapshot compressive imaging")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate Bernoulli(0.5) masks.
    Genmask {
        #[arg(long)]
        h: usize,
        #[arg(long)]
        w: usize,
        #[arg(long)]
        t: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mosaic an RGB video (or take a raw one) and fold it into a snapshot.
    Encode {
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long, default_value = "quad")]
        pattern: CfaPattern,
        #[arg(long, default_value_t = 0.0)]
        noise_sigma: f64,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mask-weighted back-projection of a snapshot.
    Init {
        #[arg(long)]
        meas: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Network reconstruction to RGB.
    Reconstruct {
        #[arg(long)]
        meas: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        variant: Variant,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        dump: DumpArgs,
    },
    /// GAP-TV-like reconstruction of the raw video.
    Baseline {
        #[arg(long)]
        meas: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long, default_value_t = GapConfig::default().iterations)]
        iters: usize,
        #[arg(long, default_value_t = GapConfig::default().tv_weight)]
        tv_weight: f64,
        /// Demosaic the result to RGB with this pattern.
        #[arg(long)]
        pattern: Option<CfaPattern>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        dump: DumpArgs,
    },
    /// Bilinear demosaic of a raw video.
    Demosaic {
        #[arg(long)]
        raw: PathBuf,
        #[arg(long)]
        pattern: CfaPattern,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on synthetic moving-square clips.
    TrainToy {
        #[arg(long, default_value = "t")]
        variant: Variant,
        #[arg(long, default_value_t = 32)]
        h: usize,
        #[arg(long, default_value_t = 32)]
        w: usize,
        #[arg(long, default_value_t = 4)]
        t: usize,
        #[arg(long, default_value_t = 300)]
        iters: usize,
        #[arg(long, default_value_t = ToyDataSpec::default().pool_size)]
        pool_size: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out_weights: PathBuf,
        #[arg(long)]
        out_curve: PathBuf,
    },
    /// Parameter count, FLOPs and the attention-complexity reference value.
    Bench {
        #[arg(long)]
        variant: Variant,
        #[arg(long)]
        h: usize,
        #[arg(long)]
        w: usize,
        #[arg(long)]
        t: usize,
    },
    /// PSNR and SSIM of a test video against a reference.
    Metrics {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
}

#[derive(Debug, Args)]
struct DumpArgs {
    /// Also write every frame as PPM into this directory.
    #[arg(long)]
    dump_frames: Option<PathBuf>,
}

/// Record of one invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub seed: Option<u64>,
    pub version: String,
    pub duration_s: f64,
    pub exit_code: i32,
}

impl RunManifest {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("manifest serializes")
    }

    pub fn parse(line: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(line)
    }
}

struct Outcome {
    config: Value,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    seed: Option<u64>,
}

impl Outcome {
    fn new(config: Value, inputs: &[&Path], outputs: &[&Path], seed: Option<u64>) -> Self {
        Self {
            config,
            inputs: inputs.iter().map(|p| p.to_path_buf()).collect(),
            outputs: outputs.iter().map(|p| p.to_path_buf()).collect(),
            seed,
        }
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err.kind() {
        ErrorKind::Usage => EXIT_USAGE,
        ErrorKind::Data => EXIT_DATA,
        ErrorKind::Numeric => EXIT_NUMERIC,
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return EXIT_USAGE;
    }
    let name = command_name(&cli.command);
    let start = Instant::now();
    let result = dispatch(cli.command);
    let duration_s = start.elapsed().as_secs_f64();
    let (code, outcome) = match result {
        Ok(o) => (EXIT_OK, Some(o)),
        Err(e) => {
            eprintln!("error: {e}");
            (exit_code(&e), None)
        }
    };
    let outcome = outcome.unwrap_or_else(|| Outcome::new(Value::Null, &[], &[], None));
    let manifest = RunManifest {
        command: name.into(),
        config: outcome.config,
        inputs: outcome.inputs.iter().map(|p| p.display().to_string()).collect(),
        outputs: outcome.outputs.iter().map(|p| p.display().to_string()).collect(),
        seed: outcome.seed,
        version: env!("CARGO_PKG_VERSION").into(),
        duration_s,
        exit_code: code,
    };
    eprintln!("{}", manifest.to_line());
    code
}

fn configure_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| format!("{THREADS_ENV} must be a non-negative integer, got `{raw}`"))?;
    // A second call in the same process finds the pool already built.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Genmask { .. } => "genmask",
        Command::Encode { .. } => "encode",
        Command::Init { .. } => "init",
        Command::Reconstruct { .. } => "reconstruct",
        Command::Baseline { .. } => "baseline",
        Command::Demosaic { .. } => "demosaic",
        Command::TrainToy { .. } => "train-toy",
        Command::Bench { .. } => "bench",
        Command::Metrics { .. } => "metrics",
    }
}

fn load_masks(path: &Path) -> quadsci::Result<MaskSet> {
    let cube = load_cube(path)?;
    let [_, _, c, _] = cube.hwct();
    if c != 1 {
        return Err(Error::Shape(format!(
            "mask file {} must be H×W×1×T, got {:?}",
            path.display(),
            cube.dims()
        )));
    }
    MaskSet::from_cube(cube, 0)
}

fn load_meas(path: &Path, masks: &MaskSet) -> quadsci::Result<Measurement> {
    let y = load_cube(path)?;
    Measurement::new(y, masks.frames(), 0.0)
}

fn maybe_dump(cube: &VideoCube, dump: &DumpArgs, stem: &str) -> quadsci::Result<()> {
    if let Some(dir) = &dump.dump_frames {
        dump_frames(cube, dir, stem)?;
    }
    Ok(())
}

/// Splits `iters` over the three learning-rate stages in the 4:1:1 ratio of
/// the default schedule.
fn schedule(iters: usize) -> Vec<Stage> {
    let second = iters / 6;
    let third = iters / 6;
    vec![
        Stage { lr: 5e-4, iters: iters - second - third },
        Stage { lr: 1e-4, iters: second },
        Stage { lr: 1e-5, iters: third },
    ]
}

fn dispatch(cmd: Command) -> quadsci::Result<Outcome> {
    match cmd {
        Command::Genmask { h, w, t, seed, out } => {
            let masks = gen_masks(h, w, t, seed)?;
            save_cube(masks.masks(), &out)?;
            println!("masks {h}×{w}×{t} written to {}", out.display());
            Ok(Outcome::new(json!({"h": h, "w": w, "t": t}), &[], &[&out], Some(seed)))
        }
        Command::Encode {
            video,
            mask,
            pattern,
            noise_sigma,
            seed,
            out,
        } => {
            let v = load_cube(&video)?;
            let masks = load_masks(&mask)?;
            let raw = match v.hwct()[2] {
                1 => v,
                3 => mosaic(&v, pattern)?,
                c => return Err(Error::Shape(format!("video {} has {c} channels, expected 1 or 3", video.display()))),
            };
            let meas = encode(&raw, &masks, noise_sigma, seed)?;
            save_cube(&meas.y, &out)?;
            println!("snapshot of {} frames written to {}", meas.compression_ratio, out.display());
            Ok(Outcome::new(
                json!({"pattern": pattern.to_string(), "noise_sigma": noise_sigma}),
                &[&video, &mask],
                &[&out],
                Some(seed),
            ))
        }
        Command::Init { meas, mask, out } => {
            let masks = load_masks(&mask)?;
            let m = load_meas(&meas, &masks)?;
            save_cube(&initialize(&m, &masks)?, &out)?;
            Ok(Outcome::new(json!({}), &[&meas, &mask], &[&out], None))
        }
        Command::Reconstruct {
            meas,
            mask,
            weights,
            variant,
            out,
            dump,
        } => {
            let masks = load_masks(&mask)?;
            let m = load_meas(&meas, &masks)?;
            let cfg = NetworkConfig::new(variant, masks.height(), masks.width(), masks.frames());
            let model = Model::load(&weights, cfg.clone())?;
            let rgb = model.forward(&initialize(&m, &masks)?)?;
            save_cube(&rgb, &out)?;
            maybe_dump(&rgb, &dump, "reconstruct")?;
            Ok(Outcome::new(
                json!({"variant": variant.to_string(), "h": cfg.height, "w": cfg.width, "t": cfg.frames}),
                &[&meas, &mask, &weights],
                &[&out],
                None,
            ))
        }
        Command::Baseline {
            meas,
            mask,
            iters,
            tv_weight,
            pattern,
            out,
            dump,
        } => {
            let masks = load_masks(&mask)?;
            let m = load_meas(&meas, &masks)?;
            let cfg = GapConfig {
                iterations: iters,
                tv_weight,
                ..GapConfig::default()
            };
            let mut x = gap_tv(&m, &masks, &cfg)?;
            if let Some(p) = pattern {
                x = demosaic_bilinear(&expand_cfa(&x, p)?, p)?;
            }
            save_cube(&x, &out)?;
            maybe_dump(&x, &dump, "baseline")?;
            Ok(Outcome::new(
                json!({
                    "method": "gap-tv-like",
                    "iterations": cfg.iterations,
                    "tv_weight": cfg.tv_weight,
                    "tv_inner_steps": cfg.tv_inner_steps,
                    "pattern": pattern.map(|p| p.to_string()),
                }),
                &[&meas, &mask],
                &[&out],
                None,
            ))
        }
        Command::Demosaic { raw, pattern, out } => {
            let r = load_cube(&raw)?;
            save_cube(&demosaic_bilinear(&expand_cfa(&r, pattern)?, pattern)?, &out)?;
            Ok(Outcome::new(json!({"pattern": pattern.to_string()}), &[&raw], &[&out], None))
        }
        Command::TrainToy {
            variant,
            h,
            w,
            t,
            iters,
            pool_size,
            seed,
            out_weights,
            out_curve,
        } => {
            let data = ToyDataSpec {
                height: h,
                width: w,
                frames: t,
                pool_size,
                ..ToyDataSpec::default()
            };
            let mut cfg = TrainConfig::default_for(variant, data);
            cfg.stages = schedule(iters);
            let outcome = train_toy_with(&cfg, seed, |r| {
                if r.step % 10 == 0 {
                    match r.smoothed_loss {
                        Some(s) => eprintln!("step {:>4}  loss {:.6}  smoothed {:.6}", r.step, r.loss, s),
                        None => eprintln!("step {:>4}  loss {:.6}", r.step, r.loss),
                    }
                }
            })?;
            outcome.model.save(&out_weights)?;
            std::fs::write(&out_curve, outcome.curve.to_csv()).map_err(|e| Error::Io {
                path: out_curve.display().to_string(),
                source: e,
            })?;
            if let (Some(a), Some(b)) = (outcome.curve.initial_smoothed(), outcome.curve.final_smoothed()) {
                println!("smoothed loss {a:.6} -> {b:.6}");
            }
            Ok(Outcome::new(
                json!({
                    "variant": variant.to_string(),
                    "h": h, "w": w, "t": t,
                    "pool_size": pool_size,
                    "pattern": cfg.data.pattern.to_string(),
                    "stages": cfg.stages.iter().map(|s| json!({"lr": s.lr, "iters": s.iters})).collect::<Vec<_>>(),
                }),
                &[],
                &[&out_weights, &out_curve],
                Some(seed),
            ))
        }
        Command::Bench { variant, h, w, t } => {
            let cfg = NetworkConfig::new(variant, h, w, t);
            cfg.validate()?;
            let params = cfg.param_count();
            let flops = count_flops(&cfg, h, w, t);
            let c = cfg.base_channels as u64;
            let n = cfg.d_state as u64;
            let attn = attention_complexity(h as u64, w as u64, t as u64, c, n);
            println!("params {params}");
            println!("flops {} (scan {})", flops.total(), flops.scan);
            println!("attention_complexity {attn} (C = {c}, N = {n})");
            Ok(Outcome::new(
                json!({"variant": variant.to_string(), "h": h, "w": w, "t": t, "c": c, "n": n}),
                &[],
                &[],
                None,
            ))
        }
        Command::Metrics { reference, test } => {
            let r = load_cube(&reference)?;
            let x = load_cube(&test)?;
            println!("{}", quality_report(&r, &x)?.summary());
            Ok(Outcome::new(json!({}), &[&reference, &test], &[], None))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule_matches_the_stage_plan() {
        let s = schedule(300);
        assert_eq!(s.iter().map(|s| s.iters).collect::<Vec<_>>(), vec![200, 50, 50]);
        assert_eq!(schedule(7).iter().map(|s| s.iters).sum::<usize>(), 7);
    }
}
