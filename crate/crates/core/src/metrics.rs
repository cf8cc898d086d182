//! Full-reference quality metrics on [`Image`]s.

use crate::error::{Error, Result};
use crate::image::Image;

/// SSIM Gaussian window side.
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Neumaier-compensated sum.
pub(crate) fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.same_shape(b)?;
    let n = a.data().len() as f64;
    let sum = compensated_sum(a.data().iter().zip(b.data()).map(|(x, y)| {
        let d = x - y;
        d * d
    }));
    Ok(sum / n)
}

/// PSNR in dB with peak value 1. Identical images give `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * m.log10())
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let u = i as f64 - half;
        *v = (-(u * u) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable "valid" filtering of one `h×w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let src = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = k.iter().zip(&src[x..x + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * rows[(y + i) * ow + x])
                .sum();
        }
    }
    out
}

/// Mean SSIM over the valid-window map, averaged over channels
/// (11×11 Gaussian, σ = 1.5, K1 = 0.01, K2 = 0.03, L = 1).
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.same_shape(b)?;
    let (h, w, c) = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidImage(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let win = gaussian_window();
    let mut total = 0.0;
    for ch in 0..c {
        let pa: Vec<f64> = a.data().iter().skip(ch).step_by(c).copied().collect();
        let pb: Vec<f64> = b.data().iter().skip(ch).step_by(c).copied().collect();
        let sq = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
        let mu_a = filter_valid(&pa, h, w, &win);
        let mu_b = filter_valid(&pb, h, w, &win);
        let e_aa = filter_valid(&sq(&pa, &pa), h, w, &win);
        let e_bb = filter_valid(&sq(&pb, &pb), h, w, &win);
        let e_ab = filter_valid(&sq(&pa, &pb), h, w, &win);
        let map = (0..mu_a.len()).map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        });
        total += compensated_sum(map) / mu_a.len() as f64;
    }
    Ok(total / c as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn random_image(seed: u64, h: usize, w: usize, c: usize, hi: f64) -> Image {
        let mut rng = SeededRng::new(seed);
        Image::from_fn(h, w, c, |_, _, _| rng.uniform() * hi).unwrap()
    }

    #[test]
    fn identical_images_are_infinite_psnr() {
        let a = random_image(1, 12, 12, 3, 1.0);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
    }

    #[test]
    fn uniform_offset_is_twenty_db() {
        let a = Image::filled(16, 16, 3, 0.0).unwrap();
        let b = Image::filled(16, 16, 3, 0.1).unwrap();
        assert_eq!(psnr(&a, &b).unwrap(), 20.0);
        let a = random_image(3, 16, 16, 3, 0.9);
        let b = Image::new(16, 16, 3, a.data().iter().map(|v| v + 0.1).collect()).unwrap();
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_matches_naive_mse() {
        for seed in 0..5 {
            let a = random_image(seed, 10, 14, 3, 1.0);
            let b = random_image(seed + 100, 10, 14, 3, 1.0);
            let mut acc = 0.0;
            for y in 0..10 {
                for x in 0..14 {
                    for c in 0..3 {
                        let d = a.get(y, x, c) - b.get(y, x, c);
                        acc += d * d;
                    }
                }
            }
            let oracle = 10.0 * (1.0 / (acc / 420.0)).log10();
            assert!((psnr(&a, &b).unwrap() - oracle).abs() < 1e-9);
            assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        }
    }

    #[test]
    fn psnr_decreases_with_noise() {
        let clean = random_image(5, 32, 32, 3, 1.0);
        let mut last = f64::INFINITY;
        for amp in [0.01, 0.05, 0.2] {
            let mut rng = SeededRng::new(77);
            let noisy = Image::from_clamped(
                32,
                32,
                3,
                clean.data().iter().map(|v| v + amp * rng.normal()).collect(),
            )
            .unwrap();
            let p = psnr(&clean, &noisy).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn shape_mismatch_is_error() {
        let a = Image::filled(12, 12, 3, 0.0).unwrap();
        let b = Image::filled(12, 13, 3, 0.0).unwrap();
        assert!(psnr(&a, &b).is_err());
        assert!(ssim(&a, &b).is_err());
    }

    #[test]
    fn ssim_identity_and_constants() {
        let a = random_image(8, 20, 24, 3, 1.0);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let zero = Image::filled(16, 16, 1, 0.0).unwrap();
        let one = Image::filled(16, 16, 1, 1.0).unwrap();
        let expected = 1e-4 / 1.0001;
        assert!((ssim(&zero, &one).unwrap() - expected).abs() < 1e-6);
    }

    #[test]
    fn ssim_is_symmetric_and_bounded() {
        for seed in 0..5 {
            let a = random_image(seed, 16, 16, 3, 1.0);
            let b = random_image(seed + 50, 16, 16, 3, 1.0);
            let ab = ssim(&a, &b).unwrap();
            assert!((ab - ssim(&b, &a).unwrap()).abs() < 1e-15);
            assert!((-1.0..=1.0).contains(&ab));
        }
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = Image::filled(10, 30, 1, 0.0).unwrap();
        assert!(ssim(&a, &a).is_err());
    }
}
