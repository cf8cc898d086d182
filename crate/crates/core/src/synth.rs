//! Turbulence degradation model `y = G(H(x)) + ε`.
//!
//! `H` is a space-invariant Gaussian blur, `G` a random smooth deformation
//! built from a sum of localized displacements, and `ε` i.i.d. Gaussian noise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradationOrder {
    /// `G(H(x))`.
    BlurThenWarp,
    /// `H(G(x))`, for ablations.
    WarpThenBlur,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationConfig {
    pub n_warp_centers: usize,
    /// Per-center displacement magnitude range in pixels; `hi` also bounds the final field.
    pub warp_strength_range: [f64; 2],
    pub warp_falloff_sigma_range: [f64; 2],
    pub psf_sigma_range: [f64; 2],
    /// Std of the additive noise in `[0, 1]` units.
    pub noise_sigma: f64,
    pub seed: u64,
    pub order: DegradationOrder,
}

impl Default for DegradationConfig {
    fn default() -> Self {
        Self {
            n_warp_centers: 32,
            warp_strength_range: [0.5, 4.0],
            warp_falloff_sigma_range: [8.0, 24.0],
            psf_sigma_range: [0.5, 3.0],
            noise_sigma: 0.01,
            seed: 0,
            order: DegradationOrder::BlurThenWarp,
        }
    }
}

impl DegradationConfig {
    /// Parameters under which [`degrade`] is the identity map.
    pub fn identity() -> Self {
        Self {
            n_warp_centers: 0,
            warp_strength_range: [0.0, 0.0],
            warp_falloff_sigma_range: [1.0, 1.0],
            psf_sigma_range: [0.0, 0.0],
            noise_sigma: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, [lo, hi]) in [
            ("warp_strength_range", self.warp_strength_range),
            ("warp_falloff_sigma_range", self.warp_falloff_sigma_range),
            ("psf_sigma_range", self.psf_sigma_range),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo >= 0.0 && lo <= hi) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must satisfy 0 <= lo <= hi, got [{lo}, {hi}]"
                )));
            }
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// Per-pixel displacement; sampling convention `out(p) = in(p + d(p))`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField {
    height: usize,
    width: usize,
    dx: Vec<f64>,
    dy: Vec<f64>,
}

impl DeformationField {
    pub fn zero(height: usize, width: usize) -> Self {
        Self::constant(height, width, 0.0, 0.0)
    }

    pub fn constant(height: usize, width: usize, dx: f64, dy: f64) -> Self {
        Self {
            height,
            width,
            dx: vec![dx; height * width],
            dy: vec![dy; height * width],
        }
    }

    pub fn from_parts(height: usize, width: usize, dx: Vec<f64>, dy: Vec<f64>) -> Result<Self> {
        if dx.len() != height * width || dy.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "field components must have {} entries",
                height * width
            )));
        }
        Ok(Self { height, width, dx, dy })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dx(&self) -> &[f64] {
        &self.dx
    }

    pub fn dy(&self) -> &[f64] {
        &self.dy
    }

    pub fn max_magnitude(&self) -> f64 {
        self.dx
            .iter()
            .zip(&self.dy)
            .map(|(x, y)| x.hypot(*y))
            .fold(0.0, f64::max)
    }

    pub fn negated(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            dx: self.dx.iter().map(|v| -v).collect(),
            dy: self.dy.iter().map(|v| -v).collect(),
        }
    }
}

/// Sum of `n_warp_centers` Gaussian-windowed displacements, magnitude-clamped
/// to `warp_strength_range[1]`.
///
/// Draw order per center: x, y, direction, magnitude, falloff σ.
pub fn sample_deformation_field(
    cfg: &DegradationConfig,
    height: usize,
    width: usize,
    rng: &mut SeededRng,
) -> Result<DeformationField> {
    cfg.validate()?;
    if height < 8 || width < 8 {
        return Err(Error::InvalidImage(format!(
            "deformation field needs at least 8x8, got {height}x{width}"
        )));
    }
    let mut field = DeformationField::zero(height, width);
    let [s_lo, s_hi] = cfg.warp_strength_range;
    let [f_lo, f_hi] = cfg.warp_falloff_sigma_range;
    for _ in 0..cfg.n_warp_centers {
        let cx = rng.uniform() * width as f64;
        let cy = rng.uniform() * height as f64;
        let theta = rng.uniform() * std::f64::consts::TAU;
        let magnitude = rng.uniform_range(s_lo, s_hi);
        let falloff = rng.uniform_range(f_lo, f_hi);
        if magnitude == 0.0 {
            continue;
        }
        let (ux, uy) = (magnitude * theta.cos(), magnitude * theta.sin());
        let inv = if falloff > 0.0 {
            1.0 / (2.0 * falloff * falloff)
        } else {
            f64::INFINITY
        };
        for y in 0..height {
            let ry = y as f64 - cy;
            for x in 0..width {
                let rx = x as f64 - cx;
                let r2 = rx * rx + ry * ry;
                let weight = if inv.is_finite() {
                    (-r2 * inv).exp()
                } else if r2 == 0.0 {
                    1.0
                } else {
                    0.0
                };
                let i = y * width + x;
                field.dx[i] += ux * weight;
                field.dy[i] += uy * weight;
            }
        }
    }
    for (dx, dy) in field.dx.iter_mut().zip(field.dy.iter_mut()) {
        let m = dx.hypot(*dy);
        if m > s_hi {
            let scale = s_hi / m;
            *dx *= scale;
            *dy *= scale;
        }
    }
    Ok(field)
}

/// Bilinear resampling at `p + d(p)` with sample coordinates clamped to the image.
pub fn warp_image(img: &Image, field: &DeformationField) -> Result<Image> {
    let (h, w, c) = img.shape();
    if field.height != h || field.width != w {
        return Err(Error::ShapeMismatch(format!(
            "field {}x{} vs image {h}x{w}",
            field.height, field.width
        )));
    }
    let (xmax, ymax) = ((w - 1) as f64, (h - 1) as f64);
    let src = img.data();
    let mut out = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let sx = (x as f64 + field.dx[i]).clamp(0.0, xmax);
            let sy = (y as f64 + field.dy[i]).clamp(0.0, ymax);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            for ch in 0..c {
                let at = |yy: usize, xx: usize| src[(yy * w + xx) * c + ch];
                let top = at(y0, x0) + (at(y0, x1) - at(y0, x0)) * fx;
                let bottom = at(y1, x0) + (at(y1, x1) - at(y1, x0)) * fx;
                out.push(top + (bottom - top) * fy);
            }
        }
    }
    Image::from_clamped(h, w, c, out)
}

/// Normalized `size×size` blur kernel, symmetric under 180° rotation.
#[derive(Debug, Clone, PartialEq)]
pub struct PsfKernel {
    size: usize,
    weights: Vec<f64>,
}

impl PsfKernel {
    pub fn new(size: usize, weights: Vec<f64>) -> Result<Self> {
        if size.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!("PSF size must be odd, got {size}")));
        }
        if weights.len() != size * size || weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidConfig(
                "PSF weights must be size² non-negative finite values".into(),
            ));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("PSF weights sum to {sum}, not 1")));
        }
        Ok(Self { size, weights })
    }

    pub fn delta() -> Self {
        Self {
            size: 1,
            weights: vec![1.0],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    #[inline]
    pub fn at(&self, v: usize, u: usize) -> f64 {
        self.weights[v * self.size + u]
    }
}

/// Kernel side used for a Gaussian of width `sigma`: `2·⌈3σ⌉ + 1`.
pub fn psf_size_for_sigma(sigma: f64) -> usize {
    2 * (3.0 * sigma).ceil() as usize + 1
}

/// Sampled isotropic Gaussian `∝ exp(−(u² + v²) / 2σ²)` on a centered grid.
/// `sigma == 0` gives the delta kernel at the center.
pub fn make_gaussian_psf(sigma: f64, size: usize) -> Result<PsfKernel> {
    if size.is_multiple_of(2) {
        return Err(Error::InvalidConfig(format!("PSF size must be odd, got {size}")));
    }
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::InvalidConfig(format!("PSF sigma must be >= 0, got {sigma}")));
    }
    let half = (size / 2) as isize;
    let mut weights = vec![0.0; size * size];
    if sigma == 0.0 {
        weights[(size * size) / 2] = 1.0;
    } else {
        let denom = 2.0 * sigma * sigma;
        for v in 0..size {
            for u in 0..size {
                let (dv, du) = ((v as isize - half) as f64, (u as isize - half) as f64);
                weights[v * size + u] = (-(du * du + dv * dv) / denom).exp();
            }
        }
        let sum: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= sum);
    }
    Ok(PsfKernel { size, weights })
}

/// Per-channel 2-D correlation with edge-replication padding.
pub fn convolve2d(img: &Image, kernel: &PsfKernel) -> Result<Image> {
    let (h, w, c) = img.shape();
    let k = kernel.size;
    if k > h || k > w {
        return Err(Error::InvalidConfig(format!(
            "kernel {k}x{k} larger than image {h}x{w}"
        )));
    }
    let half = (k / 2) as isize;
    let src = img.data();
    let mut out = vec![0.0; h * w * c];
    for y in 0..h {
        for x in 0..w {
            let o = (y * w + x) * c;
            for v in 0..k {
                let sy = (y as isize + v as isize - half).clamp(0, h as isize - 1) as usize;
                for u in 0..k {
                    let sx = (x as isize + u as isize - half).clamp(0, w as isize - 1) as usize;
                    let wt = kernel.weights[v * k + u];
                    let s = (sy * w + sx) * c;
                    for ch in 0..c {
                        out[o + ch] += wt * src[s + ch];
                    }
                }
            }
        }
    }
    Image::from_clamped(h, w, c, out)
}

#[derive(Debug, Clone)]
pub struct Degraded {
    pub y: Image,
    pub field: DeformationField,
    pub psf: PsfKernel,
    pub psf_sigma: f64,
}

/// `y = clamp(G(H(x)) + ε)` (or `H(G(x))` under [`DegradationOrder::WarpThenBlur`]).
///
/// Draws, in order: the deformation field, the PSF σ, then one normal per
/// output element when `noise_sigma > 0`. The kernel side is capped at the
/// largest odd size fitting the image.
pub fn degrade(x: &Image, cfg: &DegradationConfig, rng: &mut SeededRng) -> Result<Degraded> {
    cfg.validate()?;
    x.check_pipeline_size()?;
    let (h, w, c) = x.shape();
    let field = sample_deformation_field(cfg, h, w, rng)?;
    let psf_sigma = rng.uniform_range(cfg.psf_sigma_range[0], cfg.psf_sigma_range[1]);
    let max_size = {
        let m = h.min(w);
        if m % 2 == 0 {
            m - 1
        } else {
            m
        }
    };
    let psf = make_gaussian_psf(psf_sigma, psf_size_for_sigma(psf_sigma).min(max_size))?;
    let distorted = match cfg.order {
        DegradationOrder::BlurThenWarp => warp_image(&convolve2d(x, &psf)?, &field)?,
        DegradationOrder::WarpThenBlur => convolve2d(&warp_image(x, &field)?, &psf)?,
    };
    let y = if cfg.noise_sigma > 0.0 {
        let noisy = distorted
            .data()
            .iter()
            .map(|v| v + cfg.noise_sigma * rng.normal())
            .collect();
        Image::from_clamped(h, w, c, noisy)?
    } else {
        distorted
    };
    Ok(Degraded {
        y,
        field,
        psf,
        psf_sigma,
    })
}

/// Smooth random RGB test scene: a background gradient plus colored Gaussian blobs.
pub fn synthetic_scene(height: usize, width: usize, rng: &mut SeededRng) -> Result<Image> {
    let base: Vec<f64> = (0..3).map(|_| rng.uniform_range(0.2, 0.8)).collect();
    let grad: Vec<(f64, f64)> = (0..3)
        .map(|_| (rng.uniform_range(-0.3, 0.3), rng.uniform_range(-0.3, 0.3)))
        .collect();
    let blobs: Vec<_> = (0..6)
        .map(|_| {
            let cx = rng.uniform() * width as f64;
            let cy = rng.uniform() * height as f64;
            let s = rng.uniform_range(0.06, 0.2) * height.min(width) as f64;
            let amp: Vec<f64> = (0..3).map(|_| rng.uniform_range(-0.5, 0.5)).collect();
            (cx, cy, s, amp)
        })
        .collect();
    Image::from_fn(height, width, 3, |y, x, c| {
        let (fy, fx) = (y as f64 / height as f64 - 0.5, x as f64 / width as f64 - 0.5);
        let mut v = base[c] + grad[c].0 * fx + grad[c].1 * fy;
        for (cx, cy, s, amp) in &blobs {
            let r2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            v += amp[c] * (-r2 / (2.0 * s * s)).exp();
        }
        v.clamp(0.0, 1.0)
    })
}
