use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use holounfold::dataset::{load_folder, split, write_synthetic_dataset};
use holounfold::grayscale::Gray8;
use holounfold::pcd::{load_weights, save_weights, PcdConfig, PcdWeights};
use holounfold::propagation::{build_plan, OpticalConfig};
use holounfold::solvers::{extract_phase, gradient_step, init_field, UnfoldConfig};
use holounfold::tensor::Tensor;
use holounfold::train::{sample_seed, solver_target, validate_weights};
use num_complex::Complex;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_holounfold")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gradient_image(path: &Path, n: usize) {
    Gray8::from_fn(n, n, |r, c| ((r * 3 + c * 5) % 200 + 20) as u8).save(path).unwrap();
}

#[test]
fn propagate_writes_regime_sidecar() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("t.png");
    gradient_image(&img, 64);
    let out = dir.path().join("out");
    let o = run(&["propagate", s(&img), "--width", "1920", "--height", "1080", "--distance", "0.2", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let sidecar = fs::read_to_string(out.join("t_regime.txt")).unwrap();
    assert_eq!(sidecar.trim(), "regime=ASM z1=0.2362 z2=1.3884");
    assert!(out.join("t_amplitude.png").is_file() && out.join("t_phase.png").is_file());

    let o = run(&["propagate", s(&img), "--width", "64", "--height", "64", "--distance", "2.0", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(fs::read_to_string(out.join("t_regime.txt")).unwrap().starts_with("regime=IR_FAR"));
}

#[test]
fn missing_input_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere.png");
    for cmd in ["propagate", "gs", "gd"] {
        let o = run(&[cmd, s(&missing), "--out", s(dir.path())]);
        assert_eq!(o.status.code(), Some(3), "{cmd}");
        assert!(stderr(&o).contains("nowhere.png"), "{cmd}: {}", stderr(&o));
    }
}

#[test]
fn gd_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("g.png");
    gradient_image(&img, 32);
    let out = dir.path().join("out");
    let o = run(&["gd", s(&img), "--width", "32", "--height", "32", "--distance", "0.002", "--iters", "4", "--seed", "7", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));

    let optics = OpticalConfig::new(520e-9, 8e-6, 0.002, 32, 32).unwrap();
    let plan = build_plan::<f64>(&optics).unwrap();
    let y = solver_target::<f64>(&Gray8::load(&img).unwrap());
    let mut x = init_field(&y, &plan, sample_seed(7, 0)).unwrap();
    for _ in 0..4 {
        x = gradient_step(&x, &y, &plan, 1.0).unwrap();
    }
    let expected = extract_phase(&x).unwrap().to_u8();
    let written = Gray8::load(&out.join("g_gd_hologram.png")).unwrap();
    assert_eq!(written.data(), expected.as_slice());
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("method,image,psnr,ssim,wall_ms\ngd,g,"), "{csv}");
}

#[test]
fn identical_reconstruction_scores_100() {
    // At zero distance a phase-only field reconstructs to a flat image.
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("flat.png");
    Gray8::from_fn(32, 32, |_, _| 128).save(&img).unwrap();
    let metrics = dir.path().join("m.csv");
    let o = run(&["gd", s(&img), "--width", "32", "--height", "32", "--distance", "0", "--out", s(dir.path()), "--metrics", s(&metrics)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(&metrics).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[2], "100.00");
    assert_eq!(row[3], "1.0000");
}

#[test]
fn unfold_infer_requires_weights() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("i.png");
    gradient_image(&img, 64);
    let o = run(&["unfold-infer", s(&img), "--width", "64", "--height", "64", "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("weights required"), "{}", stderr(&o));
}

#[test]
fn stage_mismatch_rejected_before_compute() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("i.png");
    gradient_image(&img, 64);
    let weights = dir.path().join("w.cghw");
    let stages: Vec<PcdWeights<f32>> = (0..2).map(|k| PcdWeights::init(PcdConfig { channels: 4, ..PcdConfig::default() }, k)).collect();
    save_weights(&weights, &stages).unwrap();
    let out = dir.path().join("out");
    let o = run(&["unfold-infer", s(&img), "--width", "64", "--height", "64", "--weights", s(&weights), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("stage count 3"), "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn non_finite_weights_exit_as_numeric_failure() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("i.png");
    gradient_image(&img, 64);
    let cfg = PcdConfig { channels: 4, ..PcdConfig::default() };
    let mut stages: Vec<PcdWeights<f32>> = (0..3).map(|k| PcdWeights::init(cfg, k)).collect();
    let shape = stages[0].params.pirm2.shape().to_vec();
    let n = shape.iter().product();
    stages[0].params.pirm2 = Tensor::new(&shape, vec![Complex::new(f32::NAN, 0.0); n], holounfold::tensor::Kind::Complex).unwrap();
    let weights = dir.path().join("nan.cghw");
    save_weights(&weights, &stages).unwrap();
    let o = run(&["unfold-infer", s(&img), "--width", "64", "--height", "64", "--weights", s(&weights), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn config_errors_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("i.png");
    gradient_image(&img, 32);
    let o = run(&["gs", s(&img), "--set", "optics.colour=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("optics.colour"));
    let o = run(&["gs", s(&img), "--pitch", "1e-7"]);
    assert_eq!(o.status.code(), Some(2));
    let ini = dir.path().join("run.ini");
    fs::write(&ini, "[optics]\nwidth = 32\nheight = 32\ndistance = 0.002\n[solver]\niters = 3\n").unwrap();
    let o = run(&["gs", s(&img), "--config", s(&ini), "--out", s(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
}

fn train_once(data: &Path, out: &Path) -> Output {
    run(&[
        "unfold-train", s(data), "--width", "64", "--height", "64", "--distance", "0.002", "--epochs", "2",
        "--channels", "8", "--lr", "1e-3", "--seed", "3", "--out", s(out),
    ])
}

fn log_without_wall_clock(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect()
}

#[test]
fn smoke_training_is_deterministic_and_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    write_synthetic_dataset(&data, 5, 64, 64, 1).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = train_once(&data, out);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let header = fs::read_to_string(a.join("train_log.csv")).unwrap();
    assert_eq!(header.lines().next().unwrap(), "epoch,step,loss,val_psnr,val_ssim,wall_ms");
    assert_eq!(header.lines().count(), 3);
    assert_eq!(log_without_wall_clock(&a.join("train_log.csv")), log_without_wall_clock(&b.join("train_log.csv")));
    assert_eq!(fs::read(a.join("weights.cghw")).unwrap(), fs::read(b.join("weights.cghw")).unwrap());

    let weights: Vec<PcdWeights<f32>> = load_weights(&a.join("weights.cghw")).unwrap();
    let (_, validation) = split(load_folder(&data, 64, 64).unwrap(), 0.2);
    let optics = OpticalConfig::new(520e-9, 8e-6, 0.002, 64, 64).unwrap();
    let plan = Arc::new(build_plan::<f32>(&optics).unwrap());
    let (psnr, _) = validate_weights(&validation, &weights, &plan, &UnfoldConfig::default(), 3).unwrap();
    let last = header.lines().last().unwrap().split(',').nth(3).unwrap().to_string();
    assert_eq!(format!("{psnr:.4}"), last);

    let img = data.join("synth_0004.png");
    let o = run(&[
        "unfold-infer", s(&img), "--width", "64", "--height", "64", "--distance", "0.002",
        "--weights", s(&a.join("weights.cghw")), "--out", s(&a),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(a.join("synth_0004_unfold-pcd_recon.png").is_file());
}

#[test]
fn empty_dataset_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("empty");
    fs::create_dir(&data).unwrap();
    let o = train_once(&data, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("no images"), "{}", stderr(&o));
}

fn write(path: &PathBuf, text: &str) {
    fs::write(path, text).unwrap();
}

#[test]
fn eval_groups_methods_and_skips_malformed_rows() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    write(&a, "method,image,psnr,ssim,wall_ms\ngs,x,20.00,0.5000,10\ngd,x,12.00,0.2000,4\n");
    write(&b, "method,image,psnr,ssim,wall_ms\ngs,y,30.00,0.7000,30\ngd,y,oops,0.1,1\n");
    let o = run(&["eval", s(&a), s(&b), "--out", s(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("skipped 1 malformed row"), "{}", stderr(&o));
    let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    let rows: Vec<&str> = summary.lines().collect();
    assert_eq!(rows[0], "method,n,psnr_mean,ssim_mean,wall_ms_mean,wall_ms_max");
    assert_eq!(rows[1], "gd,1,12.00,0.2000,4.0,4");
    assert_eq!(rows[2], "gs,2,25.00,0.6000,20.0,30");
    assert!(stdout(&o).contains("25.00"));
}

#[test]
fn eval_rejects_empty_csv() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    write(&a, "method,image,psnr,ssim,wall_ms\n");
    let o = run(&["eval", s(&a), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn synth_data_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        let o = run(&["synth-data", s(d), "--count", "3", "--size", "32", "--seed", "4"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for i in 0..3 {
        let name = format!("synth_{i:04}.png");
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap());
    }
}
