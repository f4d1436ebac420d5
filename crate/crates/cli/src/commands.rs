use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use holounfold::dataset::{list_images, load_folder, split, write_synthetic_dataset};
use holounfold::grayscale::Gray8;
use holounfold::pcd::{check_divisible, load_weights, save_weights};
use holounfold::propagation::{build_plan, PropagationPlan};
use holounfold::solvers::{extract_phase, gradient_step, gs_solve, init_field, DenoiserKind, Hologram};
use holounfold::tensor::{Amplitude, ComplexField};
use holounfold::train::{evaluate_hologram, infer, sample_seed, solver_target, train, LogRow};
use log::{info, warn};

use crate::config::RunConfig;
use crate::error::{io_error, CliError};

pub const GS_DEFAULT_ITERS: usize = 50;
pub const GD_DEFAULT_ITERS: usize = 3;
pub const METRICS_HEADER: [&str; 5] = ["method", "image", "psnr", "ssim", "wall_ms"];

fn ensure_out(cfg: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(&cfg.out).map_err(io_error(&cfg.out))
}

fn plan(cfg: &RunConfig) -> Result<Arc<PropagationPlan<f64>>, CliError> {
    Ok(Arc::new(build_plan(&cfg.optics)?))
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into())
}

/// Target images from a file or a directory, fitted to the optical grid.
fn targets(input: &Path, cfg: &RunConfig) -> Result<Vec<(String, Gray8)>, CliError> {
    if !input.exists() {
        return Err(CliError::Io {
            path: input.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "input not found"),
        });
    }
    let paths = if input.is_dir() { list_images(input)? } else { vec![input.to_path_buf()] };
    paths
        .iter()
        .map(|p| {
            let img = Gray8::load(p)?;
            if img.dims() != (cfg.optics.height, cfg.optics.width) {
                info!("{}: fitting {}x{} to {}x{}", p.display(), img.height(), img.width(), cfg.optics.height, cfg.optics.width);
            }
            Ok((stem(p), img.fit(cfg.optics.height, cfg.optics.width)?))
        })
        .collect()
}

fn amplitude_png(a: &Amplitude<f64>) -> Gray8 {
    Gray8::from_max_normalized(a)
}

fn phase_png(h: &Hologram<f64>) -> Result<Gray8, CliError> {
    let (rows, cols) = h.dims();
    Ok(Gray8::new(rows, cols, h.to_u8())?)
}

fn save(img: &Gray8, path: &Path) -> Result<(), CliError> {
    img.save(path)?;
    info!("wrote {}", path.display());
    Ok(())
}

/// Text sidecar naming the propagation regime and both thresholds in meters.
pub fn regime_line(plan: &PropagationPlan<f64>) -> String {
    format!("regime={} z1={:.4} z2={:.4}", plan.regime(), plan.asm_threshold(), plan.far_threshold())
}

pub fn propagate(cfg: &RunConfig, input: &Path, phase_input: bool) -> Result<(), CliError> {
    cfg.validate()?;
    let targets = targets(input, cfg)?;
    let plan = plan(cfg)?;
    ensure_out(cfg)?;
    let pitch = cfg.optics.pitch;
    for (id, img) in &targets {
        let field = if phase_input {
            Hologram::from_u8(img.height(), img.width(), pitch, img.data())?.field()
        } else {
            ComplexField::from_amplitude(&img.to_amplitude(), pitch)?
        };
        let out = plan.propagate(&field)?;
        if out.data().iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(CliError::Numeric(format!("propagated field of {id} is not finite")));
        }
        save(&amplitude_png(&out.amplitude()), &cfg.out.join(format!("{id}_amplitude.png")))?;
        save(&phase_png(&extract_phase(&out)?)?, &cfg.out.join(format!("{id}_phase.png")))?;
        let sidecar = cfg.out.join(format!("{id}_regime.txt"));
        fs::write(&sidecar, format!("{}\n", regime_line(&plan))).map_err(io_error(&sidecar))?;
    }
    println!("{}", regime_line(&plan));
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Gs,
    Gd,
    Unfold,
}

pub struct MetricsRow {
    pub method: String,
    pub image: String,
    pub psnr: f64,
    pub ssim: f64,
    pub wall_ms: u128,
}

fn append_metrics(path: &Path, rows: &[MetricsRow]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_error(dir))?;
    }
    let file = OpenOptions::new().create(true).append(true).open(path).map_err(io_error(path))?;
    let fresh = file.metadata().map_err(io_error(path))?.len() == 0;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    let csv_err = |source| CliError::Csv { path: path.to_path_buf(), source };
    if fresh {
        w.write_record(METRICS_HEADER).map_err(csv_err)?;
    }
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.image.clone(),
            format!("{:.2}", r.psnr),
            format!("{:.4}", r.ssim),
            r.wall_ms.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(io_error(path))
}

fn method_name(method: Method, cfg: &RunConfig) -> String {
    match method {
        Method::Gs => "gs".into(),
        Method::Gd => "gd".into(),
        Method::Unfold => format!("unfold-{}", cfg.solver.denoiser),
    }
}

/// Runs one solver over every target and writes hologram, reconstruction and
/// metrics.
pub fn solve(cfg: &RunConfig, input: &Path, method: Method) -> Result<Vec<MetricsRow>, CliError> {
    cfg.validate()?;
    let weights = if method == Method::Unfold && cfg.solver.denoiser == DenoiserKind::Pcd {
        let path = cfg
            .weights
            .as_ref()
            .ok_or_else(|| CliError::Config("weights required: pass --weights <file> for the pcd denoiser".into()))?;
        let w = load_weights::<f64>(path).map_err(holounfold::error::Error::from)?;
        if w.len() != cfg.solver.stages {
            return Err(holounfold::error::Error::StageMismatch { stages: cfg.solver.stages, weights: w.len() }.into());
        }
        check_divisible(cfg.optics.height, cfg.optics.width)?;
        w
    } else {
        Vec::new()
    };
    let iters = match method {
        Method::Gs => cfg.iters.unwrap_or(GS_DEFAULT_ITERS),
        Method::Gd => cfg.iters.unwrap_or(GD_DEFAULT_ITERS),
        Method::Unfold => cfg.solver.stages,
    };
    if iters == 0 && method == Method::Gs {
        return Err(CliError::Config("gs needs at least one iteration".into()));
    }
    let targets = targets(input, cfg)?;
    let plan = plan(cfg)?;
    ensure_out(cfg)?;
    let name = method_name(method, cfg);
    let mut rows = Vec::with_capacity(targets.len());
    for (i, (id, img)) in targets.iter().enumerate() {
        let start = Instant::now();
        let seed = sample_seed(cfg.seed, i);
        let hologram = match method {
            Method::Gs => gs_solve(&solver_target(img), &plan, iters, seed)?.hologram,
            Method::Gd => {
                let y = solver_target(img);
                let mut x = init_field(&y, &plan, seed)?;
                for _ in 0..iters {
                    x = gradient_step(&x, &y, &plan, cfg.solver.rho)?;
                }
                extract_phase(&x)?
            }
            Method::Unfold => infer(img, i, &weights, &plan, &cfg.solver, cfg.seed)?,
        };
        let wall_ms = start.elapsed().as_millis();
        let eval = evaluate_hologram(&hologram, img, &plan)?;
        save(&phase_png(&hologram)?, &cfg.out.join(format!("{id}_{name}_hologram.png")))?;
        save(&eval.reconstruction, &cfg.out.join(format!("{id}_{name}_recon.png")))?;
        println!("{name} {id}: psnr {:.2} dB ssim {:.4} ({wall_ms} ms)", eval.psnr, eval.ssim);
        rows.push(MetricsRow { method: name.clone(), image: id.clone(), psnr: eval.psnr, ssim: eval.ssim, wall_ms });
    }
    append_metrics(&cfg.metrics_path(), &rows)?;
    Ok(rows)
}

pub fn unfold_train(cfg: &RunConfig, dataset: &Path) -> Result<(), CliError> {
    cfg.validate()?;
    if cfg.solver.denoiser != DenoiserKind::Pcd {
        return Err(CliError::Config(format!("unfold-train needs the pcd denoiser, got {}", cfg.solver.denoiser)));
    }
    let (h, w) = (cfg.optics.height, cfg.optics.width);
    check_divisible(h, w)?;
    let samples = load_folder(dataset, h, w)?;
    let (train_set, validation) = split(samples, cfg.train.validation_fraction);
    info!("training on {} images, validating on {}", train_set.len(), validation.len());
    let plan = Arc::new(build_plan::<f32>(&cfg.optics)?);
    ensure_out(cfg)?;
    let weights_path = cfg.weights.clone().unwrap_or_else(|| cfg.out.join("weights.cghw"));
    let log_path = cfg.metrics.clone().unwrap_or_else(|| cfg.out.join("train_log.csv"));
    let file = fs::File::create(&log_path).map_err(io_error(&log_path))?;
    let mut log = csv::Writer::from_writer(file);
    let csv_err = |source| CliError::Csv { path: log_path.clone(), source };
    log.write_record(LogRow::HEADER).map_err(csv_err)?;
    log.flush().map_err(io_error(&log_path))?;
    let mut write_error = None;
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = cfg.seed;
    let outcome = train(&train_set, &validation, &plan, &train_cfg, &cfg.solver, cfg.pcd, |row| {
        println!(
            "epoch {:>3}  step {:>6}  loss {:.6}  val psnr {:.2} dB  ssim {:.4}",
            row.epoch, row.step, row.loss, row.val_psnr, row.val_ssim
        );
        let result = log
            .write_record([
                row.epoch.to_string(),
                row.step.to_string(),
                format!("{:.8}", row.loss),
                format!("{:.4}", row.val_psnr),
                format!("{:.6}", row.val_ssim),
                row.wall_ms.to_string(),
            ])
            .and_then(|_| log.flush().map_err(csv::Error::from));
        if let Err(e) = result {
            write_error.get_or_insert(e);
        }
    })?;
    if let Some(source) = write_error {
        return Err(CliError::Csv { path: log_path, source });
    }
    if outcome.weights.iter().any(|w| !w.is_finite()) {
        return Err(CliError::Numeric("trained weights are not finite".into()));
    }
    save_weights(&weights_path, &outcome.weights).map_err(holounfold::error::Error::from)?;
    println!("wrote {} and {}", weights_path.display(), log_path.display());
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MethodSummary {
    pub count: usize,
    pub psnr_mean: f64,
    pub ssim_mean: f64,
    pub wall_ms_mean: f64,
    pub wall_ms_max: f64,
}

/// Per-method means from metrics CSV files and the number of skipped rows.
pub fn summarize(files: &[PathBuf]) -> Result<(BTreeMap<String, MethodSummary>, usize), CliError> {
    let mut sums: BTreeMap<String, MethodSummary> = BTreeMap::new();
    let mut skipped = 0;
    for path in files {
        let mut reader = csv::ReaderBuilder::new()
            .flexible(true)
            .from_path(path)
            .map_err(|source| CliError::Csv { path: path.clone(), source })?;
        for record in reader.records() {
            let parsed = record.ok().and_then(|r| {
                if r.len() != METRICS_HEADER.len() {
                    return None;
                }
                let num = |i: usize| r[i].trim().parse::<f64>().ok().filter(|v| v.is_finite());
                Some((r[0].trim().to_string(), num(2)?, num(3)?, num(4)?))
            });
            let Some((method, psnr, ssim, wall)) = parsed else {
                skipped += 1;
                continue;
            };
            let s = sums.entry(method).or_default();
            s.count += 1;
            s.psnr_mean += psnr;
            s.ssim_mean += ssim;
            s.wall_ms_mean += wall;
            s.wall_ms_max = s.wall_ms_max.max(wall);
        }
    }
    if sums.is_empty() {
        return Err(CliError::Input(format!("no metric rows found in {} file(s)", files.len())));
    }
    for s in sums.values_mut() {
        let n = s.count as f64;
        s.psnr_mean /= n;
        s.ssim_mean /= n;
        s.wall_ms_mean /= n;
    }
    Ok((sums, skipped))
}

pub fn eval(cfg: &RunConfig, files: &[PathBuf]) -> Result<(), CliError> {
    let (sums, skipped) = summarize(files)?;
    if skipped > 0 {
        warn!("skipped {skipped} malformed row(s)");
        eprintln!("warning: skipped {skipped} malformed row(s)");
    }
    println!("{:<16} {:>5} {:>10} {:>8} {:>12} {:>12}", "method", "n", "psnr", "ssim", "wall_ms_mean", "wall_ms_max");
    for (m, s) in &sums {
        println!(
            "{:<16} {:>5} {:>10.2} {:>8.4} {:>12.1} {:>12.0}",
            m, s.count, s.psnr_mean, s.ssim_mean, s.wall_ms_mean, s.wall_ms_max
        );
    }
    ensure_out(cfg)?;
    let path = cfg.out.join("summary.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|source| CliError::Csv { path: path.clone(), source })?;
    let csv_err = |source| CliError::Csv { path: path.clone(), source };
    w.write_record(["method", "n", "psnr_mean", "ssim_mean", "wall_ms_mean", "wall_ms_max"]).map_err(csv_err)?;
    for (m, s) in &sums {
        w.write_record([
            m.clone(),
            s.count.to_string(),
            format!("{:.2}", s.psnr_mean),
            format!("{:.4}", s.ssim_mean),
            format!("{:.1}", s.wall_ms_mean),
            format!("{:.0}", s.wall_ms_max),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(io_error(&path))
}

pub fn synth_data(dir: &Path, count: usize, size: usize, seed: u64) -> Result<(), CliError> {
    if count == 0 {
        return Err(CliError::Config("count must be at least 1".into()));
    }
    let paths = write_synthetic_dataset(dir, count, size, size, seed)?;
    println!("wrote {} images to {}", paths.len(), dir.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_means_and_skips() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        fs::write(&a, "method,image,psnr,ssim,wall_ms\ngs,x,20.00,0.5,10\ngs,y,30.00,0.7,30\ngd,x,10,0.1,5\ngs,broken\ngs,z,nope,1,1\n").unwrap();
        let (s, skipped) = summarize(&[a]).unwrap();
        assert_eq!(skipped, 2);
        assert_eq!(s["gs"].count, 2);
        assert!((s["gs"].psnr_mean - 25.0).abs() < 1e-12);
        assert!((s["gs"].ssim_mean - 0.6).abs() < 1e-12);
        assert_eq!(s["gs"].wall_ms_max, 30.0);
        assert_eq!(s["gd"].count, 1);
    }

    #[test]
    fn empty_summary_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.csv");
        fs::write(&a, "method,image,psnr,ssim,wall_ms\n").unwrap();
        assert!(matches!(summarize(&[a]), Err(CliError::Input(_))));
    }
}
