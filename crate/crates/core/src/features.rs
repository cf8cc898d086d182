//! Feature extractors for the perceptual loss and the deep-feature distance.
//!
//! [`ConvDescriptor`] is a small VGG-style stack: per stage, 3×3 conv + ReLU
//! layers followed by a 2×2 max pool. Features are read after a chosen pool.
//! Weights are either drawn from a seed or loaded from a weights file, so
//! pretrained descriptors can be dropped in without code changes.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{conv_arrays, convs_from_arrays, decode_container, encode_container};
use crate::error::{Error, Result};
use crate::graph::{Eager, Graph, NodeId, Tape};
use crate::network::NamedConv;
use crate::rng::SeededRng;
use crate::tensor::{Conv2d, Tensor};

pub trait FeatureExtractor: Send + Sync + fmt::Debug {
    /// Stable identifier echoed in configs and reports.
    fn id(&self) -> String;
    fn features(&self, x: &Tensor) -> Result<Tensor>;
    /// Same computation recorded on `tape`, with frozen weights.
    fn features_on_tape<'p>(&'p self, tape: &mut Tape<'p>, x: NodeId) -> Result<NodeId>;
}

/// φ(x) = x. Turns the perceptual term into a plain MSE.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityExtractor;

impl FeatureExtractor for IdentityExtractor {
    fn id(&self) -> String {
        "identity".into()
    }

    fn features(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.clone())
    }

    fn features_on_tape<'p>(&'p self, _tape: &mut Tape<'p>, x: NodeId) -> Result<NodeId> {
        Ok(x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DescriptorLayout {
    pub in_channels: usize,
    /// Output widths of the 3×3 convs in each stage; every stage ends in a max pool.
    pub stages: Vec<Vec<usize>>,
    /// Per-channel input normalization `(x − mean) / std`.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Default for DescriptorLayout {
    fn default() -> Self {
        Self {
            in_channels: 3,
            stages: vec![vec![16], vec![32], vec![64], vec![64], vec![64]],
            mean: vec![0.485, 0.456, 0.406],
            std: vec![0.229, 0.224, 0.225],
        }
    }
}

impl DescriptorLayout {
    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("descriptor layout: {m}")));
        if self.in_channels == 0 || self.stages.is_empty() {
            return bad("needs input channels and at least one stage".into());
        }
        if self.stages.iter().any(|s| s.is_empty() || s.contains(&0)) {
            return bad("every stage needs at least one conv of non-zero width".into());
        }
        if self.mean.len() != self.in_channels || self.std.len() != self.in_channels {
            return bad("mean/std length must equal the input channels".into());
        }
        if self.std.iter().any(|s| !(s.is_finite() && *s > 0.0)) || self.mean.iter().any(|m| !m.is_finite()) {
            return bad("std must be positive and mean finite".into());
        }
        Ok(())
    }

    fn conv_shapes(&self) -> Vec<(usize, usize)> {
        let mut cin = self.in_channels;
        let mut out = Vec::new();
        for stage in &self.stages {
            for &w in stage {
                out.push((cin, w));
                cin = w;
            }
        }
        out
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightsHeader {
    kind: String,
    layout: DescriptorLayout,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvDescriptor {
    layout: DescriptorLayout,
    /// Normalization expressed as a diagonal 1×1 conv.
    norm: Conv2d,
    convs: Vec<Conv2d>,
    /// Features are read after this many pools.
    tap: usize,
    origin: String,
}

impl ConvDescriptor {
    /// He-uniform weights and zero biases drawn from `seed`.
    pub fn random(layout: DescriptorLayout, seed: u64) -> Result<Self> {
        layout.validate()?;
        let mut rng = SeededRng::new(seed);
        let convs = layout
            .conv_shapes()
            .into_iter()
            .map(|(cin, cout)| {
                let mut c = Conv2d::zeros(cin, cout, 3);
                let bound = (6.0 / c.fan_in() as f64).sqrt();
                for w in &mut c.weight {
                    *w = rng.uniform_range(-bound, bound) as f32 as f64;
                }
                c
            })
            .collect();
        Self::assemble(layout, convs, format!("random:{seed}"))
    }

    fn assemble(layout: DescriptorLayout, convs: Vec<Conv2d>, origin: String) -> Result<Self> {
        layout.validate()?;
        let shapes = layout.conv_shapes();
        if convs.len() != shapes.len()
            || convs
                .iter()
                .zip(&shapes)
                .any(|(c, &(i, o))| c.in_ch != i || c.out_ch != o || c.kernel != 3)
        {
            return Err(Error::InvalidConfig(
                "descriptor weights do not match the layout".into(),
            ));
        }
        let n = layout.in_channels;
        let mut norm = Conv2d::zeros(n, n, 1);
        for c in 0..n {
            norm.weight[c * n + c] = 1.0 / layout.std[c];
            norm.bias[c] = -layout.mean[c] / layout.std[c];
        }
        let tap = layout.stages.len();
        Ok(Self {
            layout,
            norm,
            convs,
            tap,
            origin,
        })
    }

    /// The default random descriptor tapped after its third pool, as used by
    /// the perceptual loss.
    pub fn default_perceptual(seed: u64) -> Result<Self> {
        Self::random(DescriptorLayout::default(), seed)?.with_tap(3)
    }

    /// The default random descriptor tapped after its last pool.
    pub fn default_deep(seed: u64) -> Result<Self> {
        Self::random(DescriptorLayout::default(), seed)
    }

    pub fn with_tap(mut self, pools: usize) -> Result<Self> {
        if pools == 0 || pools > self.layout.stages.len() {
            return Err(Error::InvalidConfig(format!(
                "descriptor tap must be in 1..={}, got {pools}",
                self.layout.stages.len()
            )));
        }
        self.tap = pools;
        Ok(self)
    }

    pub fn tap(&self) -> usize {
        self.tap
    }

    pub fn layout(&self) -> &DescriptorLayout {
        &self.layout
    }

    /// Smallest side length that survives every pool up to the tap.
    pub fn min_side(&self) -> usize {
        1 << self.tap
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let header = WeightsHeader {
            kind: "descriptor".into(),
            layout: self.layout.clone(),
        };
        let named: Vec<NamedConv> = self
            .convs
            .iter()
            .enumerate()
            .map(|(i, c)| NamedConv {
                name: format!("{i:02}"),
                conv: c.clone(),
            })
            .collect();
        let bytes = encode_container(
            &serde_json::to_string(&header).expect("header serializes"),
            &conv_arrays("conv.", &named),
        );
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    /// Loads weights written by [`ConvDescriptor::save`]; tapped at the last pool.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let wrap = |e: Error| Error::Checkpoint(format!("{}: {e}", path.display()));
        let (header, arrays) = decode_container(&bytes).map_err(wrap)?;
        let header: WeightsHeader = serde_json::from_str(&header)
            .map_err(|e| wrap(Error::Checkpoint(format!("bad header: {e}"))))?;
        if header.kind != "descriptor" {
            return Err(wrap(Error::Checkpoint(format!(
                "expected descriptor weights, found {}",
                header.kind
            ))));
        }
        let convs = convs_from_arrays("conv.", &arrays)
            .map_err(wrap)?
            .into_iter()
            .map(|n| n.conv)
            .collect();
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::assemble(header.layout, convs, format!("file:{name}")).map_err(wrap)
    }

    fn run<'p, G: Graph<'p>>(&'p self, g: &mut G, x: G::Node) -> Result<G::Node> {
        let (c, h, w) = g.value(&x).shape();
        if c != self.layout.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "descriptor expects {} channels, got {c}",
                self.layout.in_channels
            )));
        }
        if h < self.min_side() || w < self.min_side() {
            return Err(Error::ShapeMismatch(format!(
                "descriptor tapped after {} pools needs at least {}x{}, got {h}x{w}",
                self.tap,
                self.min_side(),
                self.min_side()
            )));
        }
        let mut x = g.conv(&x, &self.norm, None)?;
        let mut convs = self.convs.iter();
        for stage in &self.layout.stages[..self.tap] {
            for _ in stage {
                let conv = convs.next().expect("layout validated");
                x = g.conv(&x, conv, None)?;
                x = g.relu(&x)?;
            }
            x = g.max_pool_2x(&x)?;
        }
        Ok(x)
    }
}

impl FeatureExtractor for ConvDescriptor {
    fn id(&self) -> String {
        format!("descriptor[{}]@pool{}", self.origin, self.tap)
    }

    fn features(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Eager;
        let node = g.input(x.clone());
        let out = self.run(&mut g, node)?;
        Ok(std::sync::Arc::try_unwrap(out).unwrap_or_else(|a| (*a).clone()))
    }

    fn features_on_tape<'p>(&'p self, tape: &mut Tape<'p>, x: NodeId) -> Result<NodeId> {
        self.run(tape, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor {
        let data = (0..c * h * w).map(|i| (i % 17) as f64 / 17.0).collect();
        Tensor::from_vec(c, h, w, data).unwrap()
    }

    #[test]
    fn tap_shapes() {
        let d = ConvDescriptor::default_perceptual(1).unwrap();
        assert_eq!(d.features(&ramp(3, 64, 64)).unwrap().shape(), (64, 8, 8));
        let deep = ConvDescriptor::default_deep(1).unwrap();
        assert_eq!(deep.features(&ramp(3, 64, 48)).unwrap().shape(), (64, 2, 1));
        assert!(deep.features(&ramp(3, 16, 64)).is_err());
        assert!(d.features(&ramp(1, 64, 64)).is_err());
    }

    #[test]
    fn eager_and_tape_agree() {
        let d = ConvDescriptor::default_perceptual(4).unwrap();
        let x = ramp(3, 16, 16);
        let mut tape = Tape::new(0);
        let n = tape.leaf(x.clone());
        let f = d.features_on_tape(&mut tape, n).unwrap();
        assert_eq!(tape.get(f), &d.features(&x).unwrap());
    }

    #[test]
    fn weights_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("desc.bin");
        let d = ConvDescriptor::random(DescriptorLayout::default(), 9).unwrap();
        d.save(&p).unwrap();
        let back = ConvDescriptor::load(&p).unwrap();
        let x = ramp(3, 32, 32);
        assert_eq!(back.features(&x).unwrap(), d.features(&x).unwrap());
        assert!(back.id().contains("desc.bin"));
    }

    #[test]
    fn normalization_is_applied() {
        let layout = DescriptorLayout {
            in_channels: 1,
            stages: vec![vec![1]],
            mean: vec![0.5],
            std: vec![0.25],
        };
        let mut d = ConvDescriptor::random(layout, 0).unwrap();
        d.convs[0] = Conv2d::zeros(1, 1, 3);
        d.convs[0].weight[4] = 1.0;
        let x = Tensor::filled(1, 2, 2, 0.75);
        assert_eq!(d.features(&x).unwrap().data(), &[1.0]);
    }

    #[test]
    fn bad_tap_rejected() {
        assert!(ConvDescriptor::default_deep(0).unwrap().with_tap(6).is_err());
        assert!(ConvDescriptor::default_deep(0).unwrap().with_tap(0).is_err());
    }
}
