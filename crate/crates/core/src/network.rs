//! Layer specifications, parameters, and differentiable execution of the two
//! restoration networks.
//!
//! Both networks are UNet-style stacks of Res2Blocks with two 2×2 average-pool
//! downsamples and two ×2 upsamples, ending in a sigmoid so outputs lie in
//! `[0, 1]`. The prior network applies inverted dropout after every
//! parametric layer except the last when a stochastic [`ForwardMode`] is used.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ConvGrad, Eager, Graph, NodeId, Tape};
use crate::rng::SeededRng;
use crate::tensor::{Conv2d, Tensor, UpsampleMode};

/// Default number of Res2Block scale groups.
pub const DEFAULT_SCALE: usize = 4;
pub const DEFAULT_DROPOUT_RATE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Res2Block {
        in_ch: usize,
        out_ch: usize,
        scale: usize,
    },
    Conv3x3 {
        in_ch: usize,
        out_ch: usize,
    },
    Downsample,
    Upsample,
}

impl Layer {
    /// Res2Block whose scale is the largest divisor of `out_ch` not above [`DEFAULT_SCALE`].
    pub fn res2(in_ch: usize, out_ch: usize) -> Self {
        let scale = (1..=DEFAULT_SCALE)
            .rev()
            .find(|s| out_ch.is_multiple_of(*s))
            .unwrap_or(1);
        Layer::Res2Block {
            in_ch,
            out_ch,
            scale,
        }
    }

    fn is_parametric(&self) -> bool {
        matches!(self, Layer::Res2Block { .. } | Layer::Conv3x3 { .. })
    }

    fn channels(&self) -> Option<(usize, usize)> {
        match *self {
            Layer::Res2Block { in_ch, out_ch, .. } | Layer::Conv3x3 { in_ch, out_ch } => {
                Some((in_ch, out_ch))
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Train,
    EvalDeterministic,
    EvalMcDropout,
}

impl ForwardMode {
    fn stochastic(self) -> bool {
        !matches!(self, ForwardMode::EvalDeterministic)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    pub layers: Vec<Layer>,
    pub dropout_rate: f64,
    pub dropout_everywhere: bool,
    pub upsample: UpsampleMode,
}

/// Prior (uncertainty) network:
/// `R2(3,64) ↓ R2(64,64) ↓ R2(64,64)×5 ↑ R2(64,64) ↑ R2(64,16) R2(16,3)`.
pub fn build_prior_spec(dropout_rate: f64, upsample: UpsampleMode) -> NetworkSpec {
    use Layer::*;
    let mut layers = vec![Layer::res2(3, 64), Downsample, Layer::res2(64, 64), Downsample];
    layers.extend(std::iter::repeat_n(Layer::res2(64, 64), 5));
    layers.extend([
        Upsample,
        Layer::res2(64, 64),
        Upsample,
        Layer::res2(64, 16),
        Layer::res2(16, 3),
    ]);
    NetworkSpec {
        name: "prior".into(),
        layers,
        dropout_rate,
        dropout_everywhere: true,
        upsample,
    }
}

/// Restoration network over `y ⊕ d`:
/// `Conv3(3+p,16) R2(16,64) ↓ R2(64,64) ↓ R2(64,64)×5 ↑ R2(64,64) ↑ R2(64,3)`.
pub fn build_restoration_spec(prior_channels: usize, upsample: UpsampleMode) -> Result<NetworkSpec> {
    use Layer::*;
    if prior_channels != 1 && prior_channels != 3 {
        return Err(Error::InvalidConfig(format!(
            "prior_channels must be 1 or 3, got {prior_channels}"
        )));
    }
    let mut layers = vec![
        Conv3x3 {
            in_ch: 3 + prior_channels,
            out_ch: 16,
        },
        Layer::res2(16, 64),
        Downsample,
        Layer::res2(64, 64),
        Downsample,
    ];
    layers.extend(std::iter::repeat_n(Layer::res2(64, 64), 5));
    layers.extend([Upsample, Layer::res2(64, 64), Upsample, Layer::res2(64, 3)]);
    Ok(NetworkSpec {
        name: "restoration".into(),
        layers,
        dropout_rate: 0.0,
        dropout_everywhere: false,
        upsample,
    })
}

impl NetworkSpec {
    /// Checks channel chaining, Res2Block divisibility, balanced resampling and the dropout rate.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidNetwork(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        let mut channels: Option<usize> = None;
        let mut depth: i64 = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                Layer::Res2Block { out_ch, scale, .. } => {
                    if scale == 0 || out_ch % scale != 0 {
                        return Err(Error::InvalidNetwork(format!(
                            "layer {i}: {out_ch} channels not divisible by scale {scale}"
                        )));
                    }
                }
                Layer::Downsample => depth += 1,
                Layer::Upsample => {
                    depth -= 1;
                    if depth < 0 {
                        return Err(Error::InvalidNetwork(format!(
                            "layer {i}: upsample without matching downsample"
                        )));
                    }
                }
                Layer::Conv3x3 { .. } => {}
            }
            if let Some((cin, cout)) = layer.channels() {
                if cin == 0 || cout == 0 {
                    return Err(Error::InvalidNetwork(format!("layer {i}: zero channels")));
                }
                if let Some(prev) = channels {
                    if prev != cin {
                        return Err(Error::InvalidNetwork(format!(
                            "layer {i} consumes {cin} channels but receives {prev}"
                        )));
                    }
                }
                channels = Some(cout);
            }
        }
        if channels.is_none() {
            return Err(Error::InvalidNetwork("no parametric layers".into()));
        }
        if depth != 0 {
            return Err(Error::InvalidNetwork(
                "downsample and upsample counts differ".into(),
            ));
        }
        Ok(())
    }

    pub fn in_channels(&self) -> usize {
        self.layers.iter().find_map(Layer::channels).map(|c| c.0).unwrap_or(0)
    }

    pub fn out_channels(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(Layer::channels)
            .map(|c| c.1)
            .unwrap_or(0)
    }

    /// Spatial dims must be divisible by this.
    pub fn spatial_multiple(&self) -> usize {
        1 << self.layers.iter().filter(|l| matches!(l, Layer::Downsample)).count()
    }

    /// Canonical textual form stored in checkpoints.
    pub fn descriptor(&self) -> String {
        serde_json::to_string(self).expect("spec serializes")
    }

    pub fn from_descriptor(text: &str) -> Result<Self> {
        serde_json::from_str(text)
            .map_err(|e| Error::Checkpoint(format!("bad network descriptor: {e}")))
    }

    pub fn check_input(&self, x: &Tensor) -> Result<()> {
        let (c, h, w) = x.shape();
        if c != self.in_channels() {
            return Err(Error::ShapeMismatch(format!(
                "{} expects {} input channels, got {c}",
                self.name,
                self.in_channels()
            )));
        }
        let m = self.spatial_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::ShapeMismatch(format!(
                "{} needs spatial dims divisible by {m}, got {h}x{w}",
                self.name
            )));
        }
        Ok(())
    }
}

/// One named convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedConv {
    pub name: String,
    pub conv: Conv2d,
}

/// Every learnable array of a network, in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterStore {
    convs: Vec<NamedConv>,
}

/// Shapes `(name, in, out, kernel)` of every convolution `spec` needs, in order.
fn conv_layout(spec: &NetworkSpec) -> Vec<(String, usize, usize, usize)> {
    let mut out = Vec::new();
    for (i, layer) in spec.layers.iter().enumerate() {
        match *layer {
            Layer::Res2Block {
                in_ch,
                out_ch,
                scale,
            } => {
                let width = out_ch / scale;
                out.push((format!("{i:02}.entry"), in_ch, out_ch, 1));
                for j in 1..scale {
                    out.push((format!("{i:02}.group{j}"), width, width, 3));
                }
                out.push((format!("{i:02}.exit"), out_ch, out_ch, 1));
                if in_ch != out_ch {
                    out.push((format!("{i:02}.shortcut"), in_ch, out_ch, 1));
                }
            }
            Layer::Conv3x3 { in_ch, out_ch } => {
                out.push((format!("{i:02}.conv"), in_ch, out_ch, 3));
            }
            Layer::Downsample | Layer::Upsample => {}
        }
    }
    out
}

/// Rounds to the nearest `f32`, the storage precision of checkpoints.
#[inline]
pub(crate) fn to_storage(v: f64) -> f64 {
    v as f32 as f64
}

impl ParameterStore {
    /// Fan-in-scaled uniform init `U(−1/√fan_in, 1/√fan_in)` for weights and biases,
    /// drawn in layout order from `seed`.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = SeededRng::new(seed);
        let convs = conv_layout(spec)
            .into_iter()
            .map(|(name, cin, cout, k)| {
                let mut conv = Conv2d::zeros(cin, cout, k);
                let bound = 1.0 / (conv.fan_in() as f64).sqrt();
                for w in conv.weight.iter_mut().chain(conv.bias.iter_mut()) {
                    *w = to_storage(rng.uniform_range(-bound, bound));
                }
                NamedConv { name, conv }
            })
            .collect();
        Ok(Self { convs })
    }

    pub fn zeros(spec: &NetworkSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            convs: conv_layout(spec)
                .into_iter()
                .map(|(name, cin, cout, k)| NamedConv {
                    name,
                    conv: Conv2d::zeros(cin, cout, k),
                })
                .collect(),
        })
    }

    pub fn convs(&self) -> &[NamedConv] {
        &self.convs
    }

    pub fn convs_mut(&mut self) -> &mut [NamedConv] {
        &mut self.convs
    }

    pub fn get(&self, name: &str) -> Option<&Conv2d> {
        self.convs.iter().find(|c| c.name == name).map(|c| &c.conv)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Conv2d> {
        self.convs
            .iter_mut()
            .find(|c| c.name == name)
            .map(|c| &mut c.conv)
    }

    /// `(array name, values)` for every weight and bias array.
    pub fn arrays(&self) -> impl Iterator<Item = (String, &[f64])> {
        self.convs.iter().flat_map(|c| {
            [
                (format!("{}.weight", c.name), c.conv.weight.as_slice()),
                (format!("{}.bias", c.name), c.conv.bias.as_slice()),
            ]
        })
    }

    pub fn arrays_mut(&mut self) -> impl Iterator<Item = &mut Vec<f64>> {
        self.convs
            .iter_mut()
            .flat_map(|c| [&mut c.conv.weight, &mut c.conv.bias])
    }

    pub fn num_params(&self) -> usize {
        self.convs
            .iter()
            .map(|c| c.conv.weight.len() + c.conv.bias.len())
            .sum()
    }

    /// Mutable access by flat index over [`ParameterStore::arrays`] order.
    pub fn flat_mut(&mut self, mut index: usize) -> &mut f64 {
        for arr in self.arrays_mut() {
            if index < arr.len() {
                return &mut arr[index];
            }
            index -= arr.len();
        }
        panic!("parameter index out of range");
    }

    /// Checks that every array matches the layout `spec` requires.
    pub fn check_against(&self, spec: &NetworkSpec) -> Result<()> {
        let layout = conv_layout(spec);
        if layout.len() != self.convs.len() {
            return Err(Error::InvalidNetwork(format!(
                "spec needs {} convolutions, store has {}",
                layout.len(),
                self.convs.len()
            )));
        }
        for ((name, cin, cout, k), have) in layout.iter().zip(&self.convs) {
            let c = &have.conv;
            if *name != have.name || c.in_ch != *cin || c.out_ch != *cout || c.kernel != *k {
                return Err(Error::InvalidNetwork(format!(
                    "parameter {} does not match spec entry {name} ({cin}->{cout}, {k}x{k})",
                    have.name
                )));
            }
        }
        Ok(())
    }

    pub(crate) fn from_convs(convs: Vec<NamedConv>) -> Self {
        Self { convs }
    }
}

/// Gradients laid out exactly like a [`ParameterStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientStore {
    grads: Vec<ConvGrad>,
}

impl GradientStore {
    pub fn zeros_like(params: &ParameterStore) -> Self {
        Self {
            grads: params
                .convs
                .iter()
                .map(|c| ConvGrad::zeros_like(&c.conv))
                .collect(),
        }
    }

    /// Every entry set to `value`.
    pub fn filled(params: &ParameterStore, value: f64) -> Self {
        let mut g = Self::zeros_like(params);
        for cg in &mut g.grads {
            cg.weight.fill(value);
            cg.bias.fill(value);
        }
        g
    }

    pub fn arrays(&self) -> impl Iterator<Item = &[f64]> {
        self.grads
            .iter()
            .flat_map(|g| [g.weight.as_slice(), g.bias.as_slice()])
    }

    pub fn flat(&self, mut index: usize) -> f64 {
        for arr in self.arrays() {
            if index < arr.len() {
                return arr[index];
            }
            index -= arr.len();
        }
        panic!("gradient index out of range");
    }

    pub fn conv_grads(&self) -> &[ConvGrad] {
        &self.grads
    }

    pub fn is_finite(&self) -> bool {
        self.arrays().all(|a| a.iter().all(|v| v.is_finite()))
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &GradientStore, scale: f64) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.weight.iter_mut().zip(&b.weight).for_each(|(x, y)| *x += scale * y);
            a.bias.iter_mut().zip(&b.bias).for_each(|(x, y)| *x += scale * y);
        }
    }
}

/// Spec plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub spec: NetworkSpec,
    pub params: ParameterStore,
}

/// Scalar loss root plus any extra scalar nodes whose values should be reported.
pub struct LossGraph {
    pub total: NodeId,
    pub terms: Vec<NodeId>,
}

#[derive(Debug, Clone)]
pub struct GradOutcome {
    pub loss: f64,
    pub terms: Vec<f64>,
    pub output: Tensor,
    pub grads: GradientStore,
}

fn dropout_mask(shape: (usize, usize, usize), rate: f64, rng: &mut SeededRng) -> Tensor {
    let (c, h, w) = shape;
    let keep = 1.0 / (1.0 - rate);
    let data = (0..c * h * w)
        .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
        .collect();
    Tensor::from_vec(c, h, w, data).expect("mask shape")
}

fn res2block<'p, G: Graph<'p>>(
    g: &mut G,
    x: &G::Node,
    convs: &'p [NamedConv],
    first_slot: usize,
    trainable: bool,
    (in_ch, out_ch, scale): (usize, usize, usize),
) -> Result<(G::Node, usize)> {
    let mut slot = first_slot;
    let mut next = |g: &mut G, input: &G::Node| -> Result<G::Node> {
        let conv = &convs[slot].conv;
        let s = trainable.then_some(slot);
        slot += 1;
        g.conv(input, conv, s)
    };
    let entry = next(g, x)?;
    let h = g.relu(&entry)?;
    let width = out_ch / scale;
    let mut ys = Vec::with_capacity(scale);
    ys.push(g.slice_channels(&h, 0, width)?);
    for j in 1..scale {
        let part = g.slice_channels(&h, j * width, width)?;
        let mixed = g.add(&part, &ys[j - 1])?;
        let conv = next(g, &mixed)?;
        ys.push(g.relu(&conv)?);
    }
    let cat = g.concat_channels(&ys)?;
    let body = next(g, &cat)?;
    let shortcut = if in_ch != out_ch { next(g, x)? } else { x.clone() };
    let out = g.add(&shortcut, &body)?;
    Ok((out, slot))
}

/// Runs `spec` on graph `g`. Parameter gradients are routed to slots only when `trainable`.
pub fn run_network<'p, G: Graph<'p>>(
    net: &'p Network,
    g: &mut G,
    input: G::Node,
    mode: ForwardMode,
    rng: &mut SeededRng,
    trainable: bool,
) -> Result<G::Node> {
    let spec = &net.spec;
    spec.check_input(g.value(&input))?;
    let convs = net.params.convs();
    let last_parametric = spec.layers.iter().rposition(Layer::is_parametric);
    let use_dropout = spec.dropout_everywhere && mode.stochastic() && spec.dropout_rate > 0.0;
    let mut x = input;
    let mut slot = 0;
    for (i, layer) in spec.layers.iter().enumerate() {
        x = match *layer {
            Layer::Res2Block {
                in_ch,
                out_ch,
                scale,
            } => {
                let (out, next) =
                    res2block(g, &x, convs, slot, trainable, (in_ch, out_ch, scale))?;
                slot = next;
                out
            }
            Layer::Conv3x3 { .. } => {
                let out = g.conv(&x, &convs[slot].conv, trainable.then_some(slot))?;
                slot += 1;
                g.relu(&out)?
            }
            Layer::Downsample => g.avg_pool_2x(&x)?,
            Layer::Upsample => g.upsample_2x(&x, spec.upsample)?,
        };
        if use_dropout && layer.is_parametric() && Some(i) != last_parametric {
            let mask = dropout_mask(g.value(&x).shape(), spec.dropout_rate, rng);
            x = g.mul_mask(&x, mask)?;
        }
    }
    g.sigmoid(&x)
}

impl Network {
    pub fn new(spec: NetworkSpec, params: ParameterStore) -> Result<Self> {
        spec.validate()?;
        params.check_against(&spec)?;
        Ok(Self { spec, params })
    }

    pub fn init(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let params = ParameterStore::init(&spec, seed)?;
        Ok(Self { spec, params })
    }

    /// Inference without recording. `rng` is consumed only in stochastic modes.
    pub fn forward(&self, input: &Tensor, mode: ForwardMode, rng: &mut SeededRng) -> Result<Tensor> {
        let mut g = Eager;
        let x = g.input(input.clone());
        let out = run_network(self, &mut g, x, mode, rng, false)?;
        Ok(std::sync::Arc::try_unwrap(out).unwrap_or_else(|a| (*a).clone()))
    }

    /// One forward and reverse pass. Dropout masks drawn during the forward
    /// pass are the ones differentiated through.
    pub fn compute_gradients<'p>(
        &'p self,
        input: &Tensor,
        mode: ForwardMode,
        rng: &mut SeededRng,
        loss: impl FnOnce(&mut Tape<'p>, NodeId) -> Result<LossGraph>,
    ) -> Result<GradOutcome> {
        let mut tape = Tape::new(self.params.convs().len());
        let x = tape.constant(input.clone());
        let out = run_network(self, &mut tape, x, mode, rng, true)?;
        let output = tape.get(out).clone();
        let graph = loss(&mut tape, out)?;
        let loss_value = tape.get(graph.total).item();
        if !loss_value.is_finite() {
            return Err(Error::NonFinite(format!("loss is {loss_value}")));
        }
        let terms = graph.terms.iter().map(|t| tape.get(*t).item()).collect();
        let slots = tape.backward(graph.total)?.take_slots();
        let grads = GradientStore {
            grads: slots
                .into_iter()
                .zip(self.params.convs())
                .map(|(g, c)| g.unwrap_or_else(|| ConvGrad::zeros_like(&c.conv)))
                .collect(),
        };
        Ok(GradOutcome {
            loss: loss_value,
            terms,
            output,
            grads,
        })
    }
}
