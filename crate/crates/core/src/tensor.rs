//! Single-sample `C×H×W` feature maps and the dense kernels behind every layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self::filled(c, h, w, 0.0)
    }

    pub fn filled(c: usize, h: usize, w: usize, value: f64) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![value; c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != c * h * w {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {c}x{h}x{w} tensor",
                data.len()
            )));
        }
        Ok(Self { c, h, w, data })
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            c: 1,
            h: 1,
            w: 1,
            data: vec![v],
        }
    }

    /// Planar copy of an interleaved image.
    pub fn from_image(img: &Image) -> Self {
        let (h, w, c) = img.shape();
        let mut data = vec![0.0; c * h * w];
        for (i, px) in img.data().chunks_exact(c).enumerate() {
            for (ch, v) in px.iter().enumerate() {
                data[ch * h * w + i] = *v;
            }
        }
        Self { c, h, w, data }
    }

    /// Interleaved image; values are clamped into `[0, 1]`.
    pub fn to_image(&self) -> Result<Image> {
        let hw = self.h * self.w;
        let mut data = vec![0.0; self.data.len()];
        for ch in 0..self.c {
            for i in 0..hw {
                data[i * self.c + ch] = self.data[ch * hw + i];
            }
        }
        Image::from_clamped(self.h, self.w, self.c, data)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn same_shape(&self, other: &Tensor) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }
}

/// `C = op(A)·op(B) + beta·C` on row-major buffers; `op(A)` is `m×k`, `op(B)` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Learnable `k×k` convolution with "same" zero padding and a bias per output channel.
/// Weights are laid out `[out][in][ky][kx]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn zeros(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "odd kernels only");
        Self {
            in_ch,
            out_ch,
            kernel,
            weight: vec![0.0; out_ch * in_ch * kernel * kernel],
            bias: vec![0.0; out_ch],
        }
    }

    pub fn fan_in(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }
}

fn im2col(x: &Tensor, k: usize) -> Vec<f64> {
    let (c, h, w) = x.shape();
    let hw = h * w;
    let r = (k / 2) as isize;
    let mut col = vec![0.0; c * k * k * hw];
    for ci in 0..c {
        let plane = &x.data[ci * hw..(ci + 1) * hw];
        for v in 0..k {
            for u in 0..k {
                let row = &mut col[((ci * k + v) * k + u) * hw..][..hw];
                let dy = v as isize - r;
                let dx = u as isize - r;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    let dst = &mut row[y * w..][..w];
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                    for xo in x_lo..x_hi {
                        dst[xo] = src[(xo as isize + dx) as usize];
                    }
                }
            }
        }
    }
    col
}

fn col2im(col: &[f64], c: usize, h: usize, w: usize, k: usize) -> Tensor {
    let hw = h * w;
    let r = (k / 2) as isize;
    let mut out = Tensor::zeros(c, h, w);
    for ci in 0..c {
        let plane = &mut out.data[ci * hw..(ci + 1) * hw];
        for v in 0..k {
            for u in 0..k {
                let row = &col[((ci * k + v) * k + u) * hw..][..hw];
                let dy = v as isize - r;
                let dx = u as isize - r;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..][..w];
                    let src = &row[y * w..][..w];
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                    for xo in x_lo..x_hi {
                        dst[(xo as isize + dx) as usize] += src[xo];
                    }
                }
            }
        }
    }
    out
}

pub fn conv_forward(x: &Tensor, conv: &Conv2d) -> Result<Tensor> {
    if x.c != conv.in_ch {
        return Err(Error::ShapeMismatch(format!(
            "conv expects {} input channels, got {}",
            conv.in_ch, x.c
        )));
    }
    let hw = x.h * x.w;
    let mut out = Tensor::zeros(conv.out_ch, x.h, x.w);
    for (o, b) in conv.bias.iter().enumerate() {
        out.data[o * hw..(o + 1) * hw].fill(*b);
    }
    if conv.kernel == 1 {
        gemm(conv.out_ch, conv.in_ch, hw, &conv.weight, false, &x.data, false, &mut out.data, 1.0);
    } else {
        let col = im2col(x, conv.kernel);
        gemm(conv.out_ch, conv.fan_in(), hw, &conv.weight, false, &col, false, &mut out.data, 1.0);
    }
    Ok(out)
}

/// Returns `(dx, dweight, dbias)`; `dx` is skipped unless `need_dx`.
pub fn conv_backward(
    x: &Tensor,
    conv: &Conv2d,
    dy: &Tensor,
    need_dx: bool,
) -> (Option<Tensor>, Vec<f64>, Vec<f64>) {
    let hw = x.h * x.w;
    let fan_in = conv.fan_in();
    let mut dw = vec![0.0; conv.weight.len()];
    let db: Vec<f64> = dy.data.chunks_exact(hw).map(|r| r.iter().sum()).collect();
    if conv.kernel == 1 {
        gemm(conv.out_ch, hw, fan_in, &dy.data, false, &x.data, true, &mut dw, 0.0);
        if !need_dx {
            return (None, dw, db);
        }
        let mut dx = Tensor::zeros(x.c, x.h, x.w);
        gemm(fan_in, conv.out_ch, hw, &conv.weight, true, &dy.data, false, &mut dx.data, 0.0);
        (Some(dx), dw, db)
    } else {
        let col = im2col(x, conv.kernel);
        gemm(conv.out_ch, hw, fan_in, &dy.data, false, &col, true, &mut dw, 0.0);
        if !need_dx {
            return (None, dw, db);
        }
        let mut dcol = vec![0.0; fan_in * hw];
        gemm(fan_in, conv.out_ch, hw, &conv.weight, true, &dy.data, false, &mut dcol, 0.0);
        (Some(col2im(&dcol, x.c, x.h, x.w, conv.kernel)), dw, db)
    }
}

pub fn relu(x: &Tensor) -> Tensor {
    map(x, |v| v.max(0.0))
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        c: x.c,
        h: x.h,
        w: x.w,
        data: x.data.iter().map(|&v| f(v)).collect(),
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    map(x, |v| 1.0 / (1.0 + (-v).exp()))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.same_shape(b)?;
    let mut out = a.clone();
    out.add_assign(b);
    Ok(out)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.same_shape(b)?;
    Ok(Tensor {
        c: a.c,
        h: a.h,
        w: a.w,
        data: a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect(),
    })
}

pub fn slice_channels(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    if start + len > x.c || len == 0 {
        return Err(Error::ShapeMismatch(format!(
            "channel slice {start}..{} of {}",
            start + len,
            x.c
        )));
    }
    let hw = x.h * x.w;
    Ok(Tensor {
        c: len,
        h: x.h,
        w: x.w,
        data: x.data[start * hw..(start + len) * hw].to_vec(),
    })
}

pub fn concat_channels(xs: &[&Tensor]) -> Result<Tensor> {
    let first = xs
        .first()
        .ok_or_else(|| Error::ShapeMismatch("concat of nothing".into()))?;
    let (h, w) = (first.h, first.w);
    if xs.iter().any(|t| t.h != h || t.w != w) {
        return Err(Error::ShapeMismatch("concat spatial sizes differ".into()));
    }
    let mut data = Vec::with_capacity(xs.iter().map(|t| t.len()).sum());
    for t in xs {
        data.extend_from_slice(&t.data);
    }
    Ok(Tensor {
        c: xs.iter().map(|t| t.c).sum(),
        h,
        w,
        data,
    })
}

fn check_even(x: &Tensor) -> Result<()> {
    if !x.h.is_multiple_of(2) || !x.w.is_multiple_of(2) || x.h == 0 || x.w == 0 {
        return Err(Error::ShapeMismatch(format!(
            "2x2 pooling needs even spatial dims, got {}x{}",
            x.h, x.w
        )));
    }
    Ok(())
}

/// Non-overlapping 2×2 mean.
pub fn avg_pool_2x(x: &Tensor) -> Result<Tensor> {
    check_even(x)?;
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.c, oh, ow);
    for c in 0..x.c {
        let src = &x.data[c * x.h * x.w..];
        for y in 0..oh {
            for xo in 0..ow {
                let i = 2 * y * x.w + 2 * xo;
                out.data[(c * oh + y) * ow + xo] =
                    (src[i] + src[i + 1] + src[i + x.w] + src[i + x.w + 1]) * 0.25;
            }
        }
    }
    Ok(out)
}

pub(crate) fn avg_pool_2x_backward(dy: &Tensor, h: usize, w: usize) -> Tensor {
    let mut dx = Tensor::zeros(dy.c, h, w);
    for c in 0..dy.c {
        for y in 0..dy.h {
            for xo in 0..dy.w {
                let g = dy.data[(c * dy.h + y) * dy.w + xo] * 0.25;
                let i = c * h * w + 2 * y * w + 2 * xo;
                dx.data[i] = g;
                dx.data[i + 1] = g;
                dx.data[i + w] = g;
                dx.data[i + w + 1] = g;
            }
        }
    }
    dx
}

/// Non-overlapping 2×2 max; also returns the flat source index of each maximum
/// (first in scan order on ties). A trailing odd row or column is dropped.
pub fn max_pool_2x(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    if x.h < 2 || x.w < 2 {
        return Err(Error::ShapeMismatch(format!(
            "2x2 max pooling needs at least 2x2, got {}x{}",
            x.h, x.w
        )));
    }
    let (oh, ow) = (x.h / 2, x.w / 2);
    let mut out = Tensor::zeros(x.c, oh, ow);
    let mut arg = vec![0; x.c * oh * ow];
    for c in 0..x.c {
        for y in 0..oh {
            for xo in 0..ow {
                let base = c * x.h * x.w + 2 * y * x.w + 2 * xo;
                let mut best = base;
                for cand in [base + 1, base + x.w, base + x.w + 1] {
                    if x.data[cand] > x.data[best] {
                        best = cand;
                    }
                }
                let o = (c * oh + y) * ow + xo;
                out.data[o] = x.data[best];
                arg[o] = best;
            }
        }
    }
    Ok((out, arg))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsampleMode {
    Bilinear,
    Nearest,
}

/// Source taps `(i0, i1, w0, w1)` for each output index of a ×2 resize along one axis
/// (half-pixel centers, edge clamped).
fn upsample_taps(n: usize, mode: UpsampleMode) -> Vec<(usize, usize, f64, f64)> {
    (0..2 * n)
        .map(|o| match mode {
            UpsampleMode::Nearest => (o / 2, o / 2, 1.0, 0.0),
            UpsampleMode::Bilinear => {
                let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(n - 1);
                let i1 = (i0 + 1).min(n - 1);
                let l = src - i0 as f64;
                (i0, i1, 1.0 - l, l)
            }
        })
        .collect()
}

pub fn upsample_2x(x: &Tensor, mode: UpsampleMode) -> Tensor {
    let (oh, ow) = (2 * x.h, 2 * x.w);
    let ty = upsample_taps(x.h, mode);
    let tx = upsample_taps(x.w, mode);
    let mut out = Tensor::zeros(x.c, oh, ow);
    for c in 0..x.c {
        let src = &x.data[c * x.h * x.w..][..x.h * x.w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let top = wx0 * src[y0 * x.w + x0] + wx1 * src[y0 * x.w + x1];
                let bottom = wx0 * src[y1 * x.w + x0] + wx1 * src[y1 * x.w + x1];
                out.data[(c * oh + oy) * ow + ox] = wy0 * top + wy1 * bottom;
            }
        }
    }
    out
}

pub(crate) fn upsample_2x_backward(dy: &Tensor, h: usize, w: usize, mode: UpsampleMode) -> Tensor {
    let ty = upsample_taps(h, mode);
    let tx = upsample_taps(w, mode);
    let mut dx = Tensor::zeros(dy.c, h, w);
    for c in 0..dy.c {
        let dst = &mut dx.data[c * h * w..][..h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in tx.iter().enumerate() {
                let g = dy.data[(c * dy.h + oy) * dy.w + ox];
                dst[y0 * w + x0] += g * wy0 * wx0;
                dst[y0 * w + x1] += g * wy0 * wx1;
                dst[y1 * w + x0] += g * wy1 * wx0;
                dst[y1 * w + x1] += g * wy1 * wx1;
            }
        }
    }
    dx
}
