//! Monte-Carlo dropout sampling and the per-pixel variance prior.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{save_image, Image};
use crate::network::{ForwardMode, Network};
use crate::rng::{derive_seed, SeededRng};
use crate::tensor::Tensor;

pub const DEFAULT_SAMPLES: usize = 10;

/// `S` stochastic predictions for one input; pass `i` used seed `seeds[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct McSampleSet {
    pub samples: Vec<Tensor>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// One variance per channel; the map has the prediction's channel count.
    #[default]
    PerChannel,
    /// Variance averaged over channels; a single-channel map.
    ChannelMean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyMap {
    pub values: Tensor,
    pub reduction: Reduction,
}

/// Runs `S` dropout-active forward passes of `net` on `y`. Pass `i` draws its
/// masks from `derive_seed(seed, [i])`, so results do not depend on scheduling.
pub fn mc_forward_samples(net: &Network, y: &Tensor, samples: usize, seed: u64) -> Result<McSampleSet> {
    if samples < 2 {
        return Err(Error::InvalidConfig(format!(
            "at least 2 Monte-Carlo samples are needed, got {samples}"
        )));
    }
    if !net.spec.dropout_everywhere {
        return Err(Error::InvalidNetwork(format!(
            "{} has no dropout to sample",
            net.spec.name
        )));
    }
    let seeds: Vec<u64> = (0..samples as u64).map(|i| derive_seed(seed, &[i])).collect();
    let samples = seeds
        .par_iter()
        .map(|&s| net.forward(y, ForwardMode::EvalMcDropout, &mut SeededRng::new(s)))
        .collect::<Result<Vec<_>>>()?;
    Ok(McSampleSet { samples, seeds })
}

fn check_samples(set: &McSampleSet) -> Result<()> {
    let first = set
        .samples
        .first()
        .ok_or_else(|| Error::InvalidConfig("empty sample set".into()))?;
    if set.samples.iter().any(|s| s.shape() != first.shape()) {
        return Err(Error::ShapeMismatch("samples differ in shape".into()));
    }
    Ok(())
}

/// Population variance over samples, per element.
///
/// Each element's samples are sorted before a Welford pass, which makes the
/// result independent of sample order and exactly zero for identical samples.
pub fn variance_map(set: &McSampleSet, reduction: Reduction) -> Result<UncertaintyMap> {
    check_samples(set)?;
    let (c, h, w) = set.samples[0].shape();
    let n = set.samples.len();
    let mut column = vec![0.0; n];
    let mut var = Tensor::zeros(c, h, w);
    for (i, out) in var.data_mut().iter_mut().enumerate() {
        for (slot, s) in column.iter_mut().zip(&set.samples) {
            *slot = s.data()[i];
        }
        column.sort_by(f64::total_cmp);
        let (mut mean, mut m2) = (0.0, 0.0);
        for (k, &v) in column.iter().enumerate() {
            let delta = v - mean;
            mean += delta / (k + 1) as f64;
            m2 += delta * (v - mean);
        }
        *out = (m2 / n as f64).max(0.0);
    }
    let values = match reduction {
        Reduction::PerChannel => var,
        Reduction::ChannelMean => {
            let plane = h * w;
            let data = (0..plane)
                .map(|p| (0..c).map(|ch| var.data()[ch * plane + p]).sum::<f64>() / c as f64)
                .collect();
            Tensor::from_vec(1, h, w, data)?
        }
    };
    Ok(UncertaintyMap { values, reduction })
}

/// Elementwise mean of the samples.
pub fn mean_prediction(set: &McSampleSet) -> Result<Tensor> {
    check_samples(set)?;
    let (c, h, w) = set.samples[0].shape();
    let mut out = Tensor::zeros(c, h, w);
    for s in &set.samples {
        out.add_assign(s);
    }
    let n = set.samples.len() as f64;
    for v in out.data_mut() {
        *v /= n;
    }
    Ok(out)
}

/// The prior `d` for `y` plus the MC mean prediction.
pub fn estimate_prior(
    net: &Network,
    y: &Tensor,
    samples: usize,
    seed: u64,
    reduction: Reduction,
) -> Result<(UncertaintyMap, Tensor)> {
    let set = mc_forward_samples(net, y, samples, seed)?;
    Ok((variance_map(&set, reduction)?, mean_prediction(&set)?))
}

const MAP_MAGIC: &[u8; 8] = b"DTRBUMAP";
const MAP_VERSION: u32 = 1;

impl UncertaintyMap {
    /// Raw `f32` dump: magic, version, `c h w` as u32, reduction byte, then
    /// channel-planar values, all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let (c, h, w) = self.values.shape();
        let mut out = Vec::with_capacity(25 + 4 * self.values.len());
        out.extend_from_slice(MAP_MAGIC);
        out.extend_from_slice(&MAP_VERSION.to_le_bytes());
        for d in [c, h, w] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.push(match self.reduction {
            Reduction::PerChannel => 0,
            Reduction::ChannelMean => 1,
        });
        for v in self.values.data() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::InvalidImage(format!("uncertainty map: {m}"));
        if bytes.len() < 25 || &bytes[..8] != MAP_MAGIC {
            return Err(bad("bad magic"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        if word(8) != MAP_VERSION {
            return Err(bad("unsupported version"));
        }
        let (c, h, w) = (word(12) as usize, word(16) as usize, word(20) as usize);
        let reduction = match bytes[24] {
            0 => Reduction::PerChannel,
            1 => Reduction::ChannelMean,
            _ => return Err(bad("unknown reduction")),
        };
        let body = &bytes[25..];
        if body.len() != 4 * c * h * w {
            return Err(bad("size does not match header"));
        }
        let data = body
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
            .collect();
        Ok(Self {
            values: Tensor::from_vec(c, h, w, data)?,
            reduction,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Grayscale view: channel mean, min-max normalized to `[0, 1]`.
    /// A constant map renders black.
    pub fn preview(&self) -> Result<Image> {
        let (c, h, w) = self.values.shape();
        let plane = h * w;
        let mean: Vec<f64> = (0..plane)
            .map(|p| (0..c).map(|ch| self.values.data()[ch * plane + p]).sum::<f64>() / c as f64)
            .collect();
        let lo = mean.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        let data = mean
            .iter()
            .map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 })
            .collect();
        Image::from_clamped(h, w, 1, data)
    }

    pub fn save_preview(&self, path: impl AsRef<Path>) -> Result<()> {
        save_image(&self.preview()?, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::build_prior_spec;
    use crate::tensor::UpsampleMode;

    fn set(values: &[&[f64]]) -> McSampleSet {
        McSampleSet {
            samples: values
                .iter()
                .map(|v| Tensor::from_vec(1, 1, v.len(), v.to_vec()).unwrap())
                .collect(),
            seeds: (0..values.len() as u64).collect(),
        }
    }

    #[test]
    fn two_point_variance() {
        let m = variance_map(&set(&[&[0.0, 0.3], &[2.0, 0.3]]), Reduction::PerChannel).unwrap();
        assert_eq!(m.values.data(), &[1.0, 0.0]);
    }

    #[test]
    fn identical_samples_give_exact_zero() {
        let v = [0.1, 0.7, 1.0 / 3.0];
        let m = variance_map(&set(&[&v, &v, &v, &v, &v]), Reduction::PerChannel).unwrap();
        assert!(m.values.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn channel_mean_reduction() {
        let a = Tensor::from_vec(2, 1, 1, vec![0.0, 0.0]).unwrap();
        let b = Tensor::from_vec(2, 1, 1, vec![2.0, 0.0]).unwrap();
        let s = McSampleSet {
            samples: vec![a, b],
            seeds: vec![0, 1],
        };
        let m = variance_map(&s, Reduction::ChannelMean).unwrap();
        assert_eq!(m.values.shape(), (1, 1, 1));
        assert_eq!(m.values.data(), &[0.5]);
    }

    #[test]
    fn mc_sampling_contract() {
        let net = Network::init(build_prior_spec(0.1, UpsampleMode::Bilinear), 1).unwrap();
        let y = Tensor::filled(3, 8, 8, 0.4);
        assert!(mc_forward_samples(&net, &y, 1, 0).is_err());
        let a = mc_forward_samples(&net, &y, 3, 5).unwrap();
        let b = mc_forward_samples(&net, &y, 3, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.samples[0], a.samples[1]);
        let (d, mean) = estimate_prior(&net, &y, 3, 5, Reduction::PerChannel).unwrap();
        assert_eq!(d.values.shape(), y.shape());
        assert_eq!(mean.shape(), y.shape());
        assert!(d.values.data().iter().any(|&v| v > 0.0));
    }

    #[test]
    fn zero_rate_gives_zero_map() {
        let net = Network::init(build_prior_spec(0.0, UpsampleMode::Bilinear), 1).unwrap();
        let y = Tensor::filled(3, 8, 8, 0.4);
        let (d, _) = estimate_prior(&net, &y, 4, 2, Reduction::PerChannel).unwrap();
        assert!(d.values.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn storage_round_trip_and_preview() {
        let dir = tempfile::tempdir().unwrap();
        let m = variance_map(&set(&[&[0.0, 0.5, 1.0], &[0.25, 0.5, 0.0]]), Reduction::PerChannel).unwrap();
        let p = dir.path().join("d.bin");
        m.save(&p).unwrap();
        assert_eq!(UncertaintyMap::load(&p).unwrap(), m);
        let img = m.preview().unwrap();
        assert_eq!(img.data(), &[0.0625, 0.0, 1.0]);
        m.save_preview(dir.path().join("d.png")).unwrap();
        assert!(UncertaintyMap::from_bytes(b"garbage").is_err());
    }
}
