//! Execution backends for layer code.
//!
//! Network and feature-extractor code is written once against [`Graph`].
//! [`Eager`] evaluates immediately and keeps nothing; [`Tape`] records every
//! operation so [`Tape::backward`] can run reverse-mode differentiation.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{self, Conv2d, Tensor, UpsampleMode};

pub trait Graph<'p> {
    type Node: Clone;

    fn value<'n>(&'n self, node: &'n Self::Node) -> &'n Tensor;

    /// `slot` names the parameter-gradient destination; `None` for frozen weights.
    fn conv(&mut self, x: &Self::Node, conv: &'p Conv2d, slot: Option<usize>) -> Result<Self::Node>;
    fn relu(&mut self, x: &Self::Node) -> Result<Self::Node>;
    fn sigmoid(&mut self, x: &Self::Node) -> Result<Self::Node>;
    fn add(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node>;
    fn slice_channels(&mut self, x: &Self::Node, start: usize, len: usize) -> Result<Self::Node>;
    fn concat_channels(&mut self, xs: &[Self::Node]) -> Result<Self::Node>;
    fn avg_pool_2x(&mut self, x: &Self::Node) -> Result<Self::Node>;
    fn max_pool_2x(&mut self, x: &Self::Node) -> Result<Self::Node>;
    fn upsample_2x(&mut self, x: &Self::Node, mode: UpsampleMode) -> Result<Self::Node>;
    /// Elementwise product with a constant mask.
    fn mul_mask(&mut self, x: &Self::Node, mask: Tensor) -> Result<Self::Node>;
}

/// Immediate evaluation without recording.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

impl Eager {
    pub fn input(&self, t: Tensor) -> Arc<Tensor> {
        Arc::new(t)
    }
}

impl<'p> Graph<'p> for Eager {
    type Node = Arc<Tensor>;

    fn value<'n>(&'n self, node: &'n Self::Node) -> &'n Tensor {
        node
    }

    fn conv(&mut self, x: &Self::Node, conv: &'p Conv2d, _slot: Option<usize>) -> Result<Self::Node> {
        Ok(Arc::new(tensor::conv_forward(x, conv)?))
    }

    fn relu(&mut self, x: &Self::Node) -> Result<Self::Node> {
        Ok(Arc::new(tensor::relu(x)))
    }

    fn sigmoid(&mut self, x: &Self::Node) -> Result<Self::Node> {
        Ok(Arc::new(tensor::sigmoid(x)))
    }

    fn add(&mut self, a: &Self::Node, b: &Self::Node) -> Result<Self::Node> {
        Ok(Arc::new(tensor::add(a, b)?))
    }

    fn slice_channels(&mut self, x: &Self::Node, start: usize, len: usize) -> Result<Self::Node> {
        if start == 0 && len == x.channels() {
            return Ok(x.clone());
        }
        Ok(Arc::new(tensor::slice_channels(x, start, len)?))
    }

    fn concat_channels(&mut self, xs: &[Self::Node]) -> Result<Self::Node> {
        if xs.len() == 1 {
            return Ok(xs[0].clone());
        }
        let refs: Vec<&Tensor> = xs.iter().map(|t| t.as_ref()).collect();
        Ok(Arc::new(tensor::concat_channels(&refs)?))
    }

    fn avg_pool_2x(&mut self, x: &Self::Node) -> Result<Self::Node> {
        Ok(Arc::new(tensor::avg_pool_2x(x)?))
    }

    fn max_pool_2x(&mut self, x: &Self::Node) -> Result<Self::Node> {
        Ok(Arc::new(tensor::max_pool_2x(x)?.0))
    }

    fn upsample_2x(&mut self, x: &Self::Node, mode: UpsampleMode) -> Result<Self::Node> {
        Ok(Arc::new(tensor::upsample_2x(x, mode)))
    }

    fn mul_mask(&mut self, x: &Self::Node, mask: Tensor) -> Result<Self::Node> {
        Ok(Arc::new(tensor::mul(x, &mask)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op<'p> {
    Leaf,
    Constant,
    Conv {
        x: NodeId,
        conv: &'p Conv2d,
        slot: Option<usize>,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Add(NodeId, NodeId),
    Slice {
        x: NodeId,
        start: usize,
    },
    Concat(Vec<NodeId>),
    AvgPool(NodeId),
    MaxPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    Upsample {
        x: NodeId,
        mode: UpsampleMode,
    },
    Mask {
        x: NodeId,
        mask: Tensor,
    },
    MeanAbsDiff(NodeId, NodeId),
    MeanSqDiff(NodeId, NodeId),
    WeightedSum(Vec<(NodeId, f64)>),
    DotConst {
        x: NodeId,
        weights: Tensor,
    },
}

/// Gradient of one convolution's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvGrad {
    pub fn zeros_like(conv: &Conv2d) -> Self {
        Self {
            weight: vec![0.0; conv.weight.len()],
            bias: vec![0.0; conv.bias.len()],
        }
    }
}

/// Output of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    slots: Vec<Option<ConvGrad>>,
}

impl Gradients {
    /// Gradient with respect to a [`Tape::leaf`] node, `None` if it did not influence the root.
    pub fn wrt(&self, node: NodeId) -> Option<&Tensor> {
        self.nodes.get(node.0).and_then(Option::as_ref)
    }

    pub fn take_slots(self) -> Vec<Option<ConvGrad>> {
        self.slots
    }
}

struct Entry<'p> {
    value: Tensor,
    op: Op<'p>,
}

/// Recording graph for reverse-mode differentiation.
pub struct Tape<'p> {
    nodes: Vec<Entry<'p>>,
    n_slots: usize,
}

impl<'p> Tape<'p> {
    /// `n_slots` is the number of parameter-gradient destinations.
    pub fn new(n_slots: usize) -> Self {
        Self {
            nodes: Vec::new(),
            n_slots,
        }
    }

    fn push(&mut self, value: Tensor, op: Op<'p>) -> NodeId {
        self.nodes.push(Entry { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn val(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Constant)
    }

    pub fn get(&self, id: NodeId) -> &Tensor {
        self.val(id)
    }

    /// Scalar `mean |a − b|`.
    pub fn mean_abs_diff(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.val(a), self.val(b));
        check_same(va, vb)?;
        let s: f64 = va.data().iter().zip(vb.data()).map(|(x, y)| (x - y).abs()).sum();
        let v = s / va.len() as f64;
        Ok(self.push(Tensor::scalar(v), Op::MeanAbsDiff(a, b)))
    }

    /// Scalar `mean (a − b)²`.
    pub fn mean_sq_diff(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.val(a), self.val(b));
        check_same(va, vb)?;
        let s: f64 = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let v = s / va.len() as f64;
        Ok(self.push(Tensor::scalar(v), Op::MeanSqDiff(a, b)))
    }

    /// Scalar `Σ wᵢ·sᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> Result<NodeId> {
        let mut v = 0.0;
        for &(id, w) in terms {
            let t = self.val(id);
            if t.len() != 1 {
                return Err(Error::ShapeMismatch("weighted_sum takes scalars".into()));
            }
            v += w * t.item();
        }
        Ok(self.push(Tensor::scalar(v), Op::WeightedSum(terms.to_vec())))
    }

    /// Scalar `Σ x ⊙ weights`.
    pub fn dot_const(&mut self, x: NodeId, weights: Tensor) -> Result<NodeId> {
        let vx = self.val(x);
        check_same(vx, &weights)?;
        let v: f64 = vx.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        Ok(self.push(Tensor::scalar(v), Op::DotConst { x, weights }))
    }

    /// Reverse sweep from scalar `root`.
    pub fn backward(self, root: NodeId) -> Result<Gradients> {
        let root_val = self.val(root);
        if root_val.len() != 1 {
            return Err(Error::ShapeMismatch("backward root must be a scalar".into()));
        }
        if !root_val.item().is_finite() {
            return Err(Error::NonFinite(format!("loss is {}", root_val.item())));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut slots: Vec<Option<ConvGrad>> = (0..self.n_slots).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));

        fn acc(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
            match &mut grads[id.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=root.0).rev() {
            let entry = &self.nodes[idx];
            let g = match &entry.op {
                Op::Leaf | Op::Constant => continue,
                _ => match grads[idx].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            match &entry.op {
                Op::Leaf | Op::Constant => unreachable!(),
                Op::Conv { x, conv, slot } => {
                    let need_dx = !matches!(self.nodes[x.0].op, Op::Constant);
                    let (dx, dw, db) = tensor::conv_backward(self.val(*x), conv, &g, need_dx);
                    if let Some(s) = slot {
                        match &mut slots[*s] {
                            Some(cg) => {
                                cg.weight.iter_mut().zip(&dw).for_each(|(a, b)| *a += b);
                                cg.bias.iter_mut().zip(&db).for_each(|(a, b)| *a += b);
                            }
                            empty @ None => {
                                *empty = Some(ConvGrad {
                                    weight: dw,
                                    bias: db,
                                })
                            }
                        }
                    }
                    if let Some(dx) = dx {
                        acc(&mut grads, *x, dx);
                    }
                }
                Op::Relu(x) => {
                    let mut dx = g;
                    for (d, v) in dx.data_mut().iter_mut().zip(self.val(*x).data()) {
                        if *v <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Sigmoid(x) => {
                    let mut dx = g;
                    for (d, y) in dx.data_mut().iter_mut().zip(entry.value.data()) {
                        *d *= y * (1.0 - y);
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Slice { x, start } => {
                    let src = self.val(*x);
                    let hw = src.height() * src.width();
                    let mut dx = Tensor::zeros(src.channels(), src.height(), src.width());
                    dx.data_mut()[start * hw..start * hw + g.len()].copy_from_slice(g.data());
                    acc(&mut grads, *x, dx);
                }
                Op::Concat(xs) => {
                    let mut offset = 0;
                    for x in xs {
                        let n = self.val(*x).len();
                        let (c, h, w) = self.val(*x).shape();
                        let part = Tensor::from_vec(c, h, w, g.data()[offset..offset + n].to_vec())?;
                        offset += n;
                        acc(&mut grads, *x, part);
                    }
                }
                Op::AvgPool(x) => {
                    let src = self.val(*x);
                    let dx = tensor::avg_pool_2x_backward(&g, src.height(), src.width());
                    acc(&mut grads, *x, dx);
                }
                Op::MaxPool { x, argmax } => {
                    let (c, h, w) = self.val(*x).shape();
                    let mut dx = Tensor::zeros(c, h, w);
                    for (gv, &src) in g.data().iter().zip(argmax) {
                        dx.data_mut()[src] += gv;
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Upsample { x, mode } => {
                    let src = self.val(*x);
                    let dx = tensor::upsample_2x_backward(&g, src.height(), src.width(), *mode);
                    acc(&mut grads, *x, dx);
                }
                Op::Mask { x, mask } => {
                    acc(&mut grads, *x, tensor::mul(&g, mask)?);
                }
                Op::MeanAbsDiff(a, b) => {
                    let (va, vb) = (self.val(*a), self.val(*b));
                    let scale = g.item() / va.len() as f64;
                    let da: Vec<f64> = va
                        .data()
                        .iter()
                        .zip(vb.data())
                        .map(|(x, y)| {
                            let d = x - y;
                            if d > 0.0 {
                                scale
                            } else if d < 0.0 {
                                -scale
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    push_pair(&mut grads, va, *a, *b, da, &self.nodes)?;
                }
                Op::MeanSqDiff(a, b) => {
                    let (va, vb) = (self.val(*a), self.val(*b));
                    let scale = 2.0 * g.item() / va.len() as f64;
                    let da: Vec<f64> = va
                        .data()
                        .iter()
                        .zip(vb.data())
                        .map(|(x, y)| scale * (x - y))
                        .collect();
                    push_pair(&mut grads, va, *a, *b, da, &self.nodes)?;
                }
                Op::WeightedSum(terms) => {
                    for &(id, w) in terms {
                        acc(&mut grads, id, Tensor::scalar(w * g.item()));
                    }
                }
                Op::DotConst { x, weights } => {
                    let mut dx = weights.clone();
                    dx.data_mut().iter_mut().for_each(|v| *v *= g.item());
                    acc(&mut grads, *x, dx);
                }
            }
        }

        fn push_pair(
            grads: &mut [Option<Tensor>],
            va: &Tensor,
            a: NodeId,
            b: NodeId,
            da: Vec<f64>,
            nodes: &[Entry<'_>],
        ) -> Result<()> {
            let (c, h, w) = va.shape();
            if !matches!(nodes[b.0].op, Op::Constant) {
                let db: Vec<f64> = da.iter().map(|v| -v).collect();
                acc(grads, b, Tensor::from_vec(c, h, w, db)?);
            }
            acc(grads, a, Tensor::from_vec(c, h, w, da)?);
            Ok(())
        }

        // Only leaves keep their gradients; intermediates were consumed above.
        Ok(Gradients {
            nodes: grads,
            slots,
        })
    }
}

fn check_same(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl<'p> Graph<'p> for Tape<'p> {
    type Node = NodeId;

    fn value<'n>(&'n self, node: &'n Self::Node) -> &'n Tensor {
        self.val(*node)
    }

    fn conv(&mut self, x: &NodeId, conv: &'p Conv2d, slot: Option<usize>) -> Result<NodeId> {
        if let Some(s) = slot {
            if s >= self.n_slots {
                return Err(Error::InvalidNetwork(format!("gradient slot {s} out of range")));
            }
        }
        let v = tensor::conv_forward(self.val(*x), conv)?;
        Ok(self.push(v, Op::Conv { x: *x, conv, slot }))
    }

    fn relu(&mut self, x: &NodeId) -> Result<NodeId> {
        let v = tensor::relu(self.val(*x));
        Ok(self.push(v, Op::Relu(*x)))
    }

    fn sigmoid(&mut self, x: &NodeId) -> Result<NodeId> {
        let v = tensor::sigmoid(self.val(*x));
        Ok(self.push(v, Op::Sigmoid(*x)))
    }

    fn add(&mut self, a: &NodeId, b: &NodeId) -> Result<NodeId> {
        let v = tensor::add(self.val(*a), self.val(*b))?;
        Ok(self.push(v, Op::Add(*a, *b)))
    }

    fn slice_channels(&mut self, x: &NodeId, start: usize, len: usize) -> Result<NodeId> {
        if start == 0 && len == self.val(*x).channels() {
            return Ok(*x);
        }
        let v = tensor::slice_channels(self.val(*x), start, len)?;
        Ok(self.push(v, Op::Slice { x: *x, start }))
    }

    fn concat_channels(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.len() == 1 {
            return Ok(xs[0]);
        }
        let refs: Vec<&Tensor> = xs.iter().map(|id| self.val(*id)).collect();
        let v = tensor::concat_channels(&refs)?;
        Ok(self.push(v, Op::Concat(xs.to_vec())))
    }

    fn avg_pool_2x(&mut self, x: &NodeId) -> Result<NodeId> {
        let v = tensor::avg_pool_2x(self.val(*x))?;
        Ok(self.push(v, Op::AvgPool(*x)))
    }

    fn max_pool_2x(&mut self, x: &NodeId) -> Result<NodeId> {
        let (v, argmax) = tensor::max_pool_2x(self.val(*x))?;
        Ok(self.push(v, Op::MaxPool { x: *x, argmax }))
    }

    fn upsample_2x(&mut self, x: &NodeId, mode: UpsampleMode) -> Result<NodeId> {
        let v = tensor::upsample_2x(self.val(*x), mode);
        Ok(self.push(v, Op::Upsample { x: *x, mode }))
    }

    fn mul_mask(&mut self, x: &NodeId, mask: Tensor) -> Result<NodeId> {
        let v = tensor::mul(self.val(*x), &mask)?;
        Ok(self.push(v, Op::Mask { x: *x, mask }))
    }
}
