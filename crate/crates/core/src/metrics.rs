//! PSNR and SSIM on 8-bit grayscale images.

use crate::error::{Error, Result};
use crate::grayscale::Gray8;

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
const PEAK: f64 = 255.0;

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
}

impl MetricsReport {
    pub fn compute(id: impl Into<String>, reference: &Gray8, test: &Gray8) -> Result<Self> {
        Ok(Self { id: id.into(), psnr: psnr(reference, test)?, ssim: ssim(reference, test)? })
    }
}

fn same_dims(a: &Gray8, b: &Gray8) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch(format!(
            "images are {}x{} and {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// `10 log10(255^2 / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &Gray8, b: &Gray8) -> Result<f64> {
    same_dims(a, b)?;
    let sse: u64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (i64::from(x) - i64::from(y)).pow(2) as u64).sum();
    if sse == 0 {
        return Ok(PSNR_CAP);
    }
    let mse = sse as f64 / a.data().len() as f64;
    Ok((10.0 * (PEAK * PEAK / mse).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable weighted mean over every fully contained window.
fn filter_valid(data: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..SSIM_WINDOW).map(|i| k[i] * data[r * w + c + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(r + i) * ow + c]).sum();
        }
    }
    out
}

/// Mean structural similarity with an 11x11 Gaussian window (sigma 1.5),
/// `K1 = 0.01`, `K2 = 0.03`, dynamic range 255, over valid windows.
pub fn ssim(a: &Gray8, b: &Gray8) -> Result<f64> {
    same_dims(a, b)?;
    let (h, w) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Dimensions(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    if a.data() == b.data() {
        return Ok(1.0);
    }
    let k = gaussian_window();
    let x: Vec<f64> = a.data().iter().map(|&v| f64::from(v)).collect();
    let y: Vec<f64> = b.data().iter().map(|&v| f64::from(v)).collect();
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(a, b)| a * b).collect() };
    let mx = filter_valid(&x, h, w, &k);
    let my = filter_valid(&y, h, w, &k);
    let sxx = filter_valid(&prod(&x, &x), h, w, &k);
    let syy = filter_valid(&prod(&y, &y), h, w, &k);
    let sxy = filter_valid(&prod(&x, &y), h, w, &k);
    let c1 = (SSIM_K1 * PEAK).powi(2);
    let c2 = (SSIM_K2 * PEAK).powi(2);
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn img(h: usize, w: usize, f: impl Fn(usize, usize) -> u8) -> Gray8 {
        Gray8::from_fn(h, w, f)
    }

    #[test]
    fn identical_images_hit_the_cap() {
        let a = img(16, 16, |r, c| (r * 7 + c * 3) as u8);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn constant_offset_of_sixteen() {
        let a = img(12, 12, |_, _| 100);
        let b = img(12, 12, |_, _| 116);
        let expected = 10.0 * (255.0f64 * 255.0 / 256.0).log10();
        assert!((psnr(&a, &b).unwrap() - expected).abs() < 1e-12);
        assert!((psnr(&a, &b).unwrap() - 24.05).abs() < 0.01);
    }

    #[test]
    fn inverted_checker_is_zero_db() {
        let a = img(8, 8, |r, c| if (r + c) % 2 == 0 { 0 } else { 255 });
        let b = img(8, 8, |r, c| if (r + c) % 2 == 0 { 255 } else { 0 });
        assert_eq!(psnr(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn inversion_gives_negative_ssim() {
        let a = img(32, 32, |r, c| (64.0 + 64.0 * ((r as f64 * 0.4).sin() + (c as f64 * 0.3).cos()) / 2.0) as u8 + 64);
        let inv = img(32, 32, |r, c| 255 - a.get(r, c));
        assert!(ssim(&a, &inv).unwrap() < 0.0);
    }

    #[test]
    fn constant_images_luminance_only() {
        let a = img(20, 20, |_, _| 100);
        let b = img(20, 20, |_, _| 110);
        let c1 = (0.01f64 * 255.0).powi(2);
        let expected = (2.0 * 100.0 * 110.0 + c1) / (100.0f64.powi(2) + 110.0f64.powi(2) + c1);
        assert!((ssim(&a, &b).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_shapes() {
        let a = img(10, 12, |_, _| 0);
        assert!(ssim(&a, &a).is_err());
        let b = img(12, 12, |_, _| 0);
        assert!(psnr(&a, &b).is_err());
    }

    proptest! {
        #[test]
        fn symmetric(seed in 0u64..1000) {
            let a = img(14, 13, |r, c| ((r * 31 + c * 17 + seed as usize * 7) % 256) as u8);
            let b = img(14, 13, |r, c| ((r * 13 + c * 29 + seed as usize * 3) % 256) as u8);
            prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
            prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
            prop_assert!(ssim(&a, &b).unwrap() <= 1.0);
        }

        #[test]
        fn psnr_decreases_with_error(d1 in 1u8..60, extra in 1u8..60) {
            let a = img(4, 4, |_, _| 100);
            let b = img(4, 4, |_, _| 100 + d1);
            let c = img(4, 4, |_, _| 100 + d1 + extra);
            prop_assert!(psnr(&a, &b).unwrap() > psnr(&a, &c).unwrap());
        }
    }
}
