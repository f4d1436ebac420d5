//! Image folders and a seeded synthetic target generator.

use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::grayscale::Gray8;
use crate::tensor::Fft2;

const EXTENSIONS: [&str; 6] = ["png", "jpg", "jpeg", "bmp", "tif", "tiff"];

/// Image files directly inside `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let io = |source| Error::Io { path: dir.to_path_buf(), source };
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io)? {
        let path = entry.map_err(io)?.path();
        let known = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if known && path.is_file() {
            out.push(path);
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyDataset(dir.to_path_buf()));
    }
    out.sort();
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub image: Gray8,
}

/// Loads every image in `dir`, fitted to `height x width`.
pub fn load_folder(dir: &Path, height: usize, width: usize) -> Result<Vec<Sample>> {
    list_images(dir)?
        .into_iter()
        .map(|p| {
            let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            Ok(Sample { id, image: Gray8::load(&p)?.fit(height, width)? })
        })
        .collect()
}

/// Splits off the trailing `validation_fraction` of the samples, keeping at
/// least one on each side when there are two or more.
pub fn split<S>(mut samples: Vec<S>, validation_fraction: f64) -> (Vec<S>, Vec<S>) {
    let n = samples.len();
    let mut nv = (n as f64 * validation_fraction).round() as usize;
    if n >= 2 {
        nv = nv.clamp(1, n - 1);
    } else {
        nv = 0;
    }
    let val = samples.split_off(n - nv);
    (samples, val)
}

fn gaussian_blur(img: &mut [f64], h: usize, w: usize, sigma: f64) {
    let radius = (4.0 * sigma).round() as isize;
    let mut k: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    // half-sample symmetric boundary
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        loop {
            if i < 0 {
                i = -i - 1;
            } else if i >= n {
                i = 2 * n - i - 1;
            } else {
                return i as usize;
            }
        }
    };
    let mut tmp = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            tmp[r * w + c] =
                k.iter().enumerate().map(|(j, kv)| kv * img[r * w + reflect(c as isize + j as isize - radius, w)]).sum();
        }
    }
    for r in 0..h {
        for c in 0..w {
            img[r * w + c] =
                k.iter().enumerate().map(|(j, kv)| kv * tmp[reflect(r as isize + j as isize - radius, h) * w + c]).sum();
        }
    }
}

/// Smooth background, random ellipses and a faint grating, blurred.
fn shapes(rng: &mut impl Rng, h: usize, w: usize) -> Vec<f64> {
    let n = h.max(w) as f64;
    let base = rng.random_range(0.1..0.6);
    let gx = rng.random_range(-0.3..0.3);
    let gy = rng.random_range(-0.3..0.3);
    let mut img: Vec<f64> =
        (0..h * w).map(|i| base + gx * (i % w) as f64 / n + gy * (i / w) as f64 / n).collect();
    for _ in 0..rng.random_range(3..9) {
        let (cy, cx) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let (ry, rx) = (rng.random_range(0.05..0.3), rng.random_range(0.05..0.3));
        let v = rng.random_range(0.0..1.0);
        for (i, p) in img.iter_mut().enumerate() {
            let (y, x) = ((i / w) as f64 / n, (i % w) as f64 / n);
            if ((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2) < 1.0 {
                *p = v;
            }
        }
    }
    let f = rng.random_range(2.0..12.0);
    let (ta, tb) = (rng.random_range(0.0..3.0f64), rng.random_range(0.0..3.0f64));
    for (i, p) in img.iter_mut().enumerate() {
        let (y, x) = ((i / w) as f64 / n, (i % w) as f64 / n);
        *p += 0.1 * (std::f64::consts::TAU * f * (x * ta.cos() + y * tb.sin())).sin();
    }
    gaussian_blur(&mut img, h, w, 1.0);
    img.iter_mut().for_each(|p| *p = p.clamp(0.0, 1.0));
    img
}

/// Power-law `1/f^alpha` noise rescaled to `[0, 1]`.
fn pink_noise(rng: &mut impl Rng, h: usize, w: usize) -> Vec<f64> {
    let n = h.max(w) as f64;
    let alpha = rng.random_range(1.0..1.6);
    let freq = |k: usize, len: usize| -> f64 {
        let k = if k <= len / 2 { k as f64 } else { k as f64 - len as f64 };
        k * n / len as f64
    };
    let mut spectrum: Vec<Complex64> = (0..h * w)
        .map(|i| {
            let f = freq(i / w, h).hypot(freq(i % w, w));
            let f = if i == 0 { 1.0 } else { f };
            let z = Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
            z / f.powf(alpha)
        })
        .collect();
    Fft2::<f64>::new(h, w).inverse(&mut spectrum);
    let re: Vec<f64> = spectrum.iter().map(|z| z.re).collect();
    let (lo, hi) = re.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    re.iter().map(|v| (v - lo) / span).collect()
}

/// One synthetic target: a random blend of power-law noise and shapes.
pub fn synthetic_image(rng: &mut impl Rng, height: usize, width: usize) -> Gray8 {
    let noise = pink_noise(rng, height, width);
    let s = shapes(rng, height, width);
    let a = rng.random_range(0.3..0.7);
    let data = noise
        .iter()
        .zip(&s)
        .map(|(n, s)| ((a * n + (1.0 - a) * s).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Gray8::new(height, width, data).expect("positive size")
}

/// Writes `count` synthetic PNGs named `synth_0000.png`, ... into `dir`.
pub fn write_synthetic_dataset(dir: &Path, count: usize, height: usize, width: usize, seed: u64) -> Result<Vec<PathBuf>> {
    if height == 0 || width == 0 {
        return Err(Error::Dimensions(format!("target size {height}x{width}")));
    }
    fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.to_path_buf(), source })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let path = dir.join(format!("synth_{i:04}.png"));
            synthetic_image(&mut rng, height, width).save(&path)?;
            Ok(path)
        })
        .collect()
}
