use std::path::Path;
use std::process::{Command, Output};

use quadsci::{load_cube, save_cube, SplitMix64, VideoCube};
use quadsci_cli::RunManifest;

fn quadsci(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_quadsci"))
        .args(args)
        .env("QUADSCI_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn manifest(o: &Output) -> RunManifest {
    let err = stderr(o);
    let line = err.lines().last().expect("manifest line");
    RunManifest::parse(line).expect("manifest parses")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn random_rgb(h: usize, w: usize, t: usize, seed: u64) -> VideoCube {
    let mut rng = SplitMix64::new(seed);
    VideoCube::from_fn(h, w, 3, t, |_, _, _, _| rng.uniform())
}

#[test]
fn bench_prints_attention_complexity() {
    let o = quadsci(&["bench", "--variant", "b", "--h", "8", "--w", "8", "--t", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("attention_complexity 1310720 (C = 16, N = 16)"), "{out}");
    assert!(out.lines().any(|l| l.starts_with("params ")));
    let m = manifest(&o);
    assert_eq!(m.command, "bench");
    assert_eq!(m.exit_code, 0);
    assert_eq!(m.config["c"], 16);
}

#[test]
fn metrics_self_comparison() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.vcube");
    save_cube(&random_rgb(16, 16, 2, 1), &a).unwrap();
    let o = quadsci(&["metrics", "--ref", p(&a), "--test", p(&a)]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).trim(), "PSNR 100.00 dB  SSIM 1.0000");
}

#[test]
fn pipeline_composes_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let video = d.join("video.vcube");
    save_cube(&random_rgb(16, 16, 4, 2), &video).unwrap();
    let mask = d.join("mask.vcube");
    let meas = d.join("meas.vcube");
    let init = d.join("init.vcube");
    let base = d.join("base.vcube");
    let base2 = d.join("base2.vcube");
    let frames = d.join("frames");
    let steps: Vec<Vec<&str>> = vec![
        vec!["genmask", "--h", "16", "--w", "16", "--t", "4", "--seed", "7", "--out", p(&mask)],
        vec![
            "encode", "--video", p(&video), "--mask", p(&mask), "--pattern", "quad", "--noise-sigma", "0.01",
            "--seed", "3", "--out", p(&meas),
        ],
        vec!["init", "--meas", p(&meas), "--mask", p(&mask), "--out", p(&init)],
        vec![
            "baseline", "--meas", p(&meas), "--mask", p(&mask), "--iters", "5", "--tv-weight", "0.01",
            "--pattern", "quad", "--out", p(&base), "--dump-frames", p(&frames),
        ],
        vec![
            "baseline", "--meas", p(&meas), "--mask", p(&mask), "--iters", "5", "--tv-weight", "0.01",
            "--pattern", "quad", "--out", p(&base2),
        ],
    ];
    for args in &steps {
        let o = quadsci(args);
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", stderr(&o));
        assert_eq!(manifest(&o).command, args[0]);
    }
    assert_eq!(load_cube(&init).unwrap().dims(), &[16, 16, 1, 4]);
    assert_eq!(load_cube(&base).unwrap().dims(), &[16, 16, 3, 4]);
    assert_eq!(std::fs::read(&base).unwrap(), std::fs::read(&base2).unwrap());
    assert_eq!(std::fs::read_dir(&frames).unwrap().count(), 4);

    let mask2 = d.join("mask2.vcube");
    quadsci(&["genmask", "--h", "16", "--w", "16", "--t", "4", "--seed", "7", "--out", p(&mask2)]);
    assert_eq!(std::fs::read(&mask).unwrap(), std::fs::read(&mask2).unwrap());
}

#[test]
fn mismatched_encode_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let video = dir.path().join("v.vcube");
    let mask = dir.path().join("m.vcube");
    save_cube(&random_rgb(8, 8, 2, 0), &video).unwrap();
    quadsci(&["genmask", "--h", "16", "--w", "16", "--t", "2", "--seed", "1", "--out", p(&mask)]);
    let out = dir.path().join("y.vcube");
    let o = quadsci(&["encode", "--video", p(&video), "--mask", p(&mask), "--seed", "0", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("[8, 8, 1, 2]") && err.contains("[16, 16, 1, 2]"), "{err}");
    assert_eq!(manifest(&o).exit_code, 2);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(quadsci(&[]).status.code(), Some(1));
    assert_eq!(quadsci(&["nonsense"]).status.code(), Some(1));
    assert_eq!(quadsci(&["bench", "--variant", "x", "--h", "8", "--w", "8", "--t", "2"]).status.code(), Some(1));
    assert_eq!(quadsci(&["genmask", "--h", "8"]).status.code(), Some(1));
    let o = quadsci(&["bench", "--variant", "t", "--h", "12", "--w", "8", "--t", "2"]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(quadsci(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_file_exits_two_and_names_it() {
    let o = quadsci(&["metrics", "--ref", "/nonexistent/a.vcube", "--test", "/nonexistent/b.vcube"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/a.vcube"));
}

#[test]
fn train_then_reconstruct() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let wts = d.join("w.vwts");
    let curve = d.join("curve.csv");
    let o = quadsci(&[
        "train-toy", "--variant", "t", "--h", "8", "--w", "8", "--t", "2", "--iters", "3", "--pool-size", "2",
        "--seed", "5", "--out-weights", p(&wts), "--out-curve", p(&curve),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = std::fs::read_to_string(&curve).unwrap();
    assert!(csv.starts_with("step,loss,psnr\n"));
    assert_eq!(csv.lines().count(), 3);
    assert_eq!(manifest(&o).seed, Some(5));

    let video = d.join("v.vcube");
    let mask = d.join("m.vcube");
    let meas = d.join("y.vcube");
    let rgb = d.join("rgb.vcube");
    save_cube(&random_rgb(8, 8, 2, 4), &video).unwrap();
    quadsci(&["genmask", "--h", "8", "--w", "8", "--t", "2", "--seed", "1", "--out", p(&mask)]);
    quadsci(&["encode", "--video", p(&video), "--mask", p(&mask), "--seed", "0", "--out", p(&meas)]);
    let o = quadsci(&[
        "reconstruct", "--meas", p(&meas), "--mask", p(&mask), "--weights", p(&wts), "--variant", "t", "--out",
        p(&rgb),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(load_cube(&rgb).unwrap().dims(), &[8, 8, 3, 2]);

    let o = quadsci(&[
        "reconstruct", "--meas", p(&meas), "--mask", p(&mask), "--weights", p(&wts), "--variant", "b", "--out",
        p(&rgb),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn demosaic_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("raw.vcube");
    let out = dir.path().join("rgb.vcube");
    save_cube(&VideoCube::filled(&[8, 8, 1, 2], 0.5), &raw).unwrap();
    let o = quadsci(&["demosaic", "--raw", p(&raw), "--pattern", "bayer", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(0));
    assert!(load_cube(&out).unwrap().data().iter().all(|&v| v == 0.5));
}

#[test]
fn manifest_round_trips() {
    let m = RunManifest {
        command: "bench".into(),
        config: serde_json::json!({"h": 8}),
        inputs: vec![],
        outputs: vec!["x".into()],
        seed: Some(1),
        version: "0.1.0".into(),
        duration_s: 0.5,
        exit_code: 0,
    };
    assert_eq!(RunManifest::parse(&m.to_line()).unwrap(), m);
}

#[test]
fn pipeline_composes_on_dims_divisible_by_eight() {
    for (h, w, t) in [(8, 8, 1), (16, 24, 3), (24, 16, 2)] {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        let (video, mask, meas, init, base) =
            (d.join("v"), d.join("m"), d.join("y"), d.join("x0"), d.join("x"));
        save_cube(&random_rgb(h, w, t, (h * w + t) as u64), &video).unwrap();
        let (hs, ws, ts) = (h.to_string(), w.to_string(), t.to_string());
        for args in [
            vec!["genmask", "--h", &hs, "--w", &ws, "--t", &ts, "--seed", "1", "--out", p(&mask)],
            vec!["encode", "--video", p(&video), "--mask", p(&mask), "--seed", "2", "--out", p(&meas)],
            vec!["init", "--meas", p(&meas), "--mask", p(&mask), "--out", p(&init)],
            vec!["baseline", "--meas", p(&meas), "--mask", p(&mask), "--iters", "3", "--out", p(&base)],
        ] {
            let o = quadsci(&args);
            assert_eq!(o.status.code(), Some(0), "{h}×{w}×{t} {args:?}: {}", stderr(&o));
        }
        assert_eq!(load_cube(&base).unwrap().dims(), &[h, w, 1, t]);
    }
}
