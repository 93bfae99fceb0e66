//! Tensor-valued computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in execution order, so the node list is always a
//! topological order and the backward pass is a single reverse sweep.
//! Every op's forward is a pure function of its inputs and recorded
//! attributes, which lets [`Graph::replay`] recompute the whole graph
//! after a leaf value changes (used by the finite-difference checker).

use crate::autodiff::kernels::{self, ConvGeometry};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

/// Statistics used by a batch-norm node.
#[derive(Debug, Clone)]
pub enum BnStats<T> {
    /// Normalize with the statistics of the current batch.
    Batch,
    /// Normalize with fixed (running) statistics.
    Fixed { mean: Vec<T>, var: Vec<T> },
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(NodeId, NodeId),
    ScaleConst(NodeId, T),
    Reshape(NodeId),
    Permute(NodeId, Vec<usize>),
    Act(NodeId, Activation),
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Conv2d {
        x: NodeId,
        k: NodeId,
        stride: usize,
        padding: usize,
    },
    Bmm {
        a: NodeId,
        b: NodeId,
        trans_b: bool,
    },
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: T,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: T,
        stats: BnStats<T>,
    },
    SpatialMean(NodeId),
    SpatialMax(NodeId),
    SpatialStd(NodeId),
    SpatialProject(NodeId, Vec<T>),
    TokenMean(NodeId),
    ChannelScale {
        x: NodeId,
        w: NodeId,
    },
    TokenScale {
        x: NodeId,
        w: NodeId,
    },
    Concat(Vec<NodeId>),
    Fuse {
        weights: NodeId,
        inputs: Vec<NodeId>,
    },
    Sum(NodeId),
    Dot(NodeId, Tensor<T>),
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::ScaleConst(..) => "scale",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::Act(_, Activation::Relu) => "relu",
            Op::Act(_, Activation::Sigmoid) => "sigmoid",
            Op::Linear { .. } => "linear",
            Op::Conv2d { .. } => "conv2d",
            Op::Bmm { .. } => "bmm",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layernorm",
            Op::BatchNorm { .. } => "batchnorm",
            Op::SpatialMean(..) => "gap",
            Op::SpatialMax(..) => "spatial_max",
            Op::SpatialStd(..) => "spatial_std",
            Op::SpatialProject(..) => "spatial_project",
            Op::TokenMean(..) => "token_mean",
            Op::ChannelScale { .. } => "channel_scale",
            Op::TokenScale { .. } => "token_scale",
            Op::Concat(..) => "concat",
            Op::Fuse { .. } => "fuse",
            Op::Sum(..) => "sum",
            Op::Dot(..) => "dot",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![*a, *b],
            Op::ScaleConst(x, _)
            | Op::Reshape(x)
            | Op::Permute(x, _)
            | Op::Act(x, _)
            | Op::Softmax(x)
            | Op::SpatialMean(x)
            | Op::SpatialMax(x)
            | Op::SpatialStd(x)
            | Op::SpatialProject(x, _)
            | Op::TokenMean(x)
            | Op::Sum(x)
            | Op::Dot(x, _) => vec![*x],
            Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::Conv2d { x, k, .. } => vec![*x, *k],
            Op::Bmm { a, b, .. } => vec![*a, *b],
            Op::LayerNorm { x, gamma, beta, .. } | Op::BatchNorm { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Op::ChannelScale { x, w } | Op::TokenScale { x, w } => vec![*x, *w],
            Op::Concat(xs) => xs.clone(),
            Op::Fuse { weights, inputs } => {
                let mut v = vec![*weights];
                v.extend(inputs.iter().copied());
                v
            }
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    requires_grad: bool,
    // reshape target, kept so replays reproduce it
    shape: Vec<usize>,
    // ReLU mask or spatial-max winners held fixed during replays
    frozen: Option<Vec<usize>>,
}

/// Append-only computation graph.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Gradient of the last `backward` loss with respect to `id`.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Leaf)
    }

    /// Adds a leaf. Leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        let shape = value.shape().to_vec();
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            requires_grad,
            shape,
            frozen: None,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn param(&mut self, value: Tensor<T>) -> Result<NodeId> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<NodeId> {
        self.leaf(value, false)
    }

    /// Overwrites a leaf's value. Call [`Graph::replay`] afterwards to
    /// propagate the change.
    pub fn set_leaf_value(&mut self, id: NodeId, value: Tensor<T>) -> Result<()> {
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(Error::config("only leaves can be overwritten"));
        }
        node.value.expect_same_shape(&value)?;
        node.value = value;
        Ok(())
    }

    /// Pins every ReLU mask and spatial-max winner to its current value.
    /// Replays then evaluate the smooth piece the graph is on now, whose
    /// derivative at the current point is the true one; finite differences
    /// across a kink stop mixing two pieces.
    pub fn freeze_kinks(&mut self) {
        for i in 0..self.nodes.len() {
            let frozen = match &self.nodes[i].op {
                Op::Act(x, Activation::Relu) => Some(self.v(*x).data().iter().map(|&v| usize::from(v > T::zero())).collect()),
                Op::SpatialMax(x) => spatial_layout(self.v(*x)).ok().map(|(_, _, inner)| self.v(*x).data().chunks(inner).map(argmax).collect()),
                _ => None,
            };
            self.nodes[i].frozen = frozen;
        }
    }

    pub fn thaw_kinks(&mut self) {
        for node in &mut self.nodes {
            node.frozen = None;
        }
    }

    /// Recomputes every non-leaf node in order.
    pub fn replay(&mut self) -> Result<()> {
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let node = &self.nodes[i];
            let value = match (&node.op, &node.frozen) {
                (Op::Act(x, Activation::Relu), Some(mask)) => {
                    let data = self.v(*x).data().iter().zip(mask).map(|(&v, &m)| if m == 1 { v } else { T::zero() }).collect();
                    Tensor::new(self.v(*x).shape(), data)?
                }
                (Op::SpatialMax(x), Some(winners)) => {
                    let (n, c, inner) = spatial_layout(self.v(*x))?;
                    let data = self.v(*x).data().chunks(inner).zip(winners).map(|(s, &w)| s[w]).collect();
                    Tensor::new(&[n, c], data)?
                }
                (op, _) => self.eval(op, &node.shape)?,
            };
            self.nodes[i].value = value;
        }
        Ok(())
    }

    fn push(&mut self, op: Op<T>, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.eval(&op, &shape)?;
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            shape,
            frozen: None,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    fn v(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    // ----- op constructors -------------------------------------------------

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b), vec![])
    }

    pub fn scale(&mut self, x: NodeId, factor: T) -> Result<NodeId> {
        self.push(Op::ScaleConst(x, factor), vec![])
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.push(Op::Reshape(x), shape.to_vec())
    }

    pub fn permute(&mut self, x: NodeId, axes: &[usize]) -> Result<NodeId> {
        self.push(Op::Permute(x, axes.to_vec()), vec![])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Act(x, Activation::Relu), vec![])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Act(x, Activation::Sigmoid), vec![])
    }

    pub fn activation(&mut self, x: NodeId, kind: Activation) -> Result<NodeId> {
        self.push(Op::Act(x, kind), vec![])
    }

    /// `x · wᵀ + b` with `x: [M, Din]`, `w: [Dout, Din]`, `b: [Dout]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        self.push(Op::Linear { x, w, b }, vec![])
    }

    /// Direct cross-correlation, `x: [N,Cin,H,W]`, `k: [Cout,Cin,kh,kw]`.
    pub fn conv2d(&mut self, x: NodeId, k: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        self.push(
            Op::Conv2d {
                x,
                k,
                stride,
                padding,
            },
            vec![],
        )
    }

    /// Batched matmul `a: [B,M,K]` with `b: [B,K,N]` (or `[B,N,K]` when
    /// `trans_b`).
    pub fn bmm(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> Result<NodeId> {
        self.push(Op::Bmm { a, b, trans_b }, vec![])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Softmax(x), vec![])
    }

    /// Layer norm over the last axis.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: T) -> Result<NodeId> {
        self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            },
            vec![],
        )
    }

    /// Batch norm over axis 1 of `[N, C, ...]`.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: T,
        stats: BnStats<T>,
    ) -> Result<NodeId> {
        self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                eps,
                stats,
            },
            vec![],
        )
    }

    /// Global average pooling `[N,C,H,W] -> [N,C]`.
    pub fn gap(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::SpatialMean(x), vec![])
    }

    pub fn spatial_max(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::SpatialMax(x), vec![])
    }

    /// Population standard deviation per channel.
    pub fn spatial_std(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::SpatialStd(x), vec![])
    }

    /// `out[n,c] = Σ_j weights[j] · x[n,c,j]` over the flattened spatial grid.
    pub fn spatial_project(&mut self, x: NodeId, weights: Vec<T>) -> Result<NodeId> {
        self.push(Op::SpatialProject(x, weights), vec![])
    }

    /// Mean over the token axis, `[N,T,D] -> [N,D]`.
    pub fn token_mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::TokenMean(x), vec![])
    }

    /// Multiplies each channel map of `x: [N,C,...]` by `w: [N,C]`.
    pub fn channel_scale(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        self.push(Op::ChannelScale { x, w }, vec![])
    }

    /// Multiplies `x: [N,T,D]` by `w: [N,D]` broadcast over tokens.
    pub fn token_scale(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        self.push(Op::TokenScale { x, w }, vec![])
    }

    /// Concatenates `[N, D_i]` tensors along axis 1.
    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        self.push(Op::Concat(xs.to_vec()), vec![])
    }

    /// `Σ_i weights[i] · inputs[i]` with `weights: [n]`.
    pub fn fuse(&mut self, weights: NodeId, inputs: &[NodeId]) -> Result<NodeId> {
        self.push(
            Op::Fuse {
                weights,
                inputs: inputs.to_vec(),
            },
            vec![],
        )
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Sum(x), vec![])
    }

    /// Scalar `Σ x ⊙ w` against a constant tensor.
    pub fn dot(&mut self, x: NodeId, w: Tensor<T>) -> Result<NodeId> {
        self.push(Op::Dot(x, w), vec![])
    }

    /// Mean softmax cross-entropy of `logits: [N,K]`.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.push(
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            vec![],
        )
    }

    // ----- forward ---------------------------------------------------------

    fn eval(&self, op: &Op<T>, reshape: &[usize]) -> Result<Tensor<T>> {
        let out = match op {
            Op::Leaf => unreachable!("leaves are not evaluated"),
            Op::Add(a, b) => self.v(*a).zip_map(self.v(*b), |p, q| p + q)?,
            Op::ScaleConst(x, f) => self.v(*x).map(|p| p * *f),
            Op::Reshape(x) => self.v(*x).reshape(reshape)?,
            Op::Permute(x, axes) => permute(self.v(*x), axes)?,
            Op::Act(x, Activation::Relu) => self.v(*x).map(|p| if p > T::zero() { p } else { T::zero() }),
            Op::Act(x, Activation::Sigmoid) => self.v(*x).map(sigmoid),
            Op::Linear { x, w, b } => linear_forward(self.v(*x), self.v(*w), b.map(|b| self.v(b)))?,
            Op::Conv2d {
                x,
                k,
                stride,
                padding,
            } => {
                let g = conv_geometry(self.v(*x), self.v(*k), *stride, *padding)?;
                let mut out = Tensor::zeros(&[g.batch, g.out_channels, g.out_h(), g.out_w()]);
                kernels::conv2d_forward(&g, self.v(*x).data(), self.v(*k).data(), out.data_mut());
                out
            }
            Op::Bmm { a, b, trans_b } => {
                let (batch, m, k, n) = bmm_dims(self.v(*a), self.v(*b), *trans_b)?;
                let mut out = Tensor::zeros(&[batch, m, n]);
                kernels::bmm(batch, m, k, n, self.v(*a).data(), self.v(*b).data(), *trans_b, out.data_mut());
                out
            }
            Op::Softmax(x) => softmax_last(self.v(*x))?,
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = self.v(*x);
                let d = *xv.shape().last().ok_or_else(|| Error::shape("layernorm on scalar"))?;
                check_vec(self.v(*gamma), d, "layernorm gamma")?;
                check_vec(self.v(*beta), d, "layernorm beta")?;
                let (gd, bd) = (self.v(*gamma).data(), self.v(*beta).data());
                let mut out = xv.clone();
                for row in out.data_mut().chunks_mut(d) {
                    let (mu, rstd) = row_moments(row, *eps);
                    for (j, v) in row.iter_mut().enumerate() {
                        *v = (*v - mu) * rstd * gd[j] + bd[j];
                    }
                }
                out
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                eps,
                stats,
            } => {
                let xv = self.v(*x);
                let (outer, c, inner) = channel_layout(xv)?;
                check_vec(self.v(*gamma), c, "batchnorm gamma")?;
                check_vec(self.v(*beta), c, "batchnorm beta")?;
                let (mean, var) = match stats {
                    BnStats::Batch => {
                        if outer * inner < 2 {
                            return Err(Error::DegenerateVariance(outer * inner));
                        }
                        kernels::channel_moments(xv.data(), outer, c, inner)
                    }
                    BnStats::Fixed { mean, var } => {
                        if mean.len() != c || var.len() != c {
                            return Err(Error::shape("batchnorm running stats width"));
                        }
                        (mean.clone(), var.clone())
                    }
                };
                let (gd, bd) = (self.v(*gamma).data(), self.v(*beta).data());
                let mut out = xv.clone();
                let data = out.data_mut();
                for o in 0..outer {
                    for ch in 0..c {
                        let rstd = (var[ch] + *eps).sqrt().recip();
                        for v in &mut data[(o * c + ch) * inner..][..inner] {
                            *v = (*v - mean[ch]) * rstd * gd[ch] + bd[ch];
                        }
                    }
                }
                out
            }
            Op::SpatialMean(x) => {
                let (n, c, inner) = spatial_layout(self.v(*x))?;
                let scale = T::one() / T::of(inner as f64);
                reduce_spatial(self.v(*x), n, c, inner, |s| s.iter().copied().sum::<T>() * scale)
            }
            Op::SpatialMax(x) => {
                let (n, c, inner) = spatial_layout(self.v(*x))?;
                reduce_spatial(self.v(*x), n, c, inner, |s| s[argmax(s)])
            }
            Op::SpatialStd(x) => {
                let (n, c, inner) = spatial_layout(self.v(*x))?;
                reduce_spatial(self.v(*x), n, c, inner, |s| population_std(s).1)
            }
            Op::SpatialProject(x, w) => {
                let (n, c, inner) = spatial_layout(self.v(*x))?;
                if w.len() != inner {
                    return Err(Error::shape(format!(
                        "projection basis has {} entries for a {}-element grid",
                        w.len(),
                        inner
                    )));
                }
                reduce_spatial(self.v(*x), n, c, inner, |s| {
                    s.iter().zip(w).map(|(&a, &b)| a * b).sum()
                })
            }
            Op::TokenMean(x) => {
                let xv = self.v(*x);
                let [n, t, d] = dims3(xv, "token_mean")?;
                let scale = T::one() / T::of(t as f64);
                let mut out = Tensor::zeros(&[n, d]);
                let od = out.data_mut();
                for i in 0..n {
                    for tok in 0..t {
                        for j in 0..d {
                            od[i * d + j] = od[i * d + j] + xv.data()[(i * t + tok) * d + j];
                        }
                    }
                }
                od.iter_mut().for_each(|v| *v = *v * scale);
                out
            }
            Op::ChannelScale { x, w } => {
                let (xv, wv) = (self.v(*x), self.v(*w));
                let (n, c, inner) = spatial_layout(xv)?;
                if wv.shape() != [n, c] {
                    return Err(Error::shape(format!(
                        "channel weights {:?} do not match features {:?}",
                        wv.shape(),
                        xv.shape()
                    )));
                }
                let mut out = xv.clone();
                for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
                    let s = wv.data()[i];
                    chunk.iter_mut().for_each(|v| *v = *v * s);
                }
                out
            }
            Op::TokenScale { x, w } => {
                let (xv, wv) = (self.v(*x), self.v(*w));
                let [n, t, d] = dims3(xv, "token_scale")?;
                if wv.shape() != [n, d] {
                    return Err(Error::shape(format!(
                        "token weights {:?} do not match features {:?}",
                        wv.shape(),
                        xv.shape()
                    )));
                }
                let mut out = xv.clone();
                let od = out.data_mut();
                for i in 0..n {
                    for tok in 0..t {
                        for j in 0..d {
                            od[(i * t + tok) * d + j] = od[(i * t + tok) * d + j] * wv.data()[i * d + j];
                        }
                    }
                }
                out
            }
            Op::Concat(xs) => {
                if xs.is_empty() {
                    return Err(Error::shape("concat of nothing"));
                }
                let n = self.v(xs[0]).shape().first().copied().unwrap_or(0);
                let mut widths = Vec::with_capacity(xs.len());
                for &x in xs {
                    let s = self.v(x).shape();
                    if s.len() != 2 || s[0] != n {
                        return Err(Error::shape(format!("concat expects [N, D] inputs, got {s:?}")));
                    }
                    widths.push(s[1]);
                }
                let total: usize = widths.iter().sum();
                let mut data = Vec::with_capacity(n * total);
                for row in 0..n {
                    for (&x, &w) in xs.iter().zip(&widths) {
                        data.extend_from_slice(&self.v(x).data()[row * w..(row + 1) * w]);
                    }
                }
                Tensor::new(&[n, total], data)?
            }
            Op::Fuse { weights, inputs } => {
                let f = self.v(*weights);
                if f.shape() != [inputs.len()] || inputs.is_empty() {
                    return Err(Error::shape(format!(
                        "fusion weights {:?} for {} branches",
                        f.shape(),
                        inputs.len()
                    )));
                }
                let mut out = self.v(inputs[0]).map(|v| v * f.data()[0]);
                for (i, &x) in inputs.iter().enumerate().skip(1) {
                    let fi = f.data()[i];
                    let xv = self.v(x);
                    xv.expect_same_shape(&out)?;
                    for (o, &v) in out.data_mut().iter_mut().zip(xv.data()) {
                        *o = *o + fi * v;
                    }
                }
                out
            }
            Op::Sum(x) => Tensor::scalar(self.v(*x).sum()),
            Op::Dot(x, w) => {
                let xv = self.v(*x);
                xv.expect_same_shape(w)?;
                Tensor::scalar(xv.data().iter().zip(w.data()).map(|(&a, &b)| a * b).sum())
            }
            Op::CrossEntropy { logits, labels } => {
                let lv = self.v(*logits);
                let (n, k) = match lv.shape() {
                    [n, k] => (*n, *k),
                    s => return Err(Error::shape(format!("cross entropy expects [N,K], got {s:?}"))),
                };
                if labels.len() != n || labels.iter().any(|&l| l >= k) || n == 0 {
                    return Err(Error::shape("labels do not match logits"));
                }
                let p = softmax_last(lv)?;
                let total: T = labels
                    .iter()
                    .enumerate()
                    .map(|(i, &l)| -p.data()[i * k + l].max(T::min_positive_value()).ln())
                    .sum();
                Tensor::scalar(total / T::of(n as f64))
            }
        };
        if !out.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        Ok(out)
    }

    // ----- backward --------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Gradients are stored for every
    /// node that depends on a `requires_grad` leaf.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let shape = self.v(loss).shape().to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(Tensor::full(&shape, T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                self.grads[i] = Some(g);
                continue;
            }
            let contributions = self.backward_op(i, &g)?;
            self.grads[i] = Some(g);
            for (id, c) in contributions {
                if !self.nodes[id.0].requires_grad {
                    continue;
                }
                match &mut self.grads[id.0] {
                    Some(acc) => acc.add_assign(&c),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        Ok(())
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn backward_op(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(NodeId, Tensor<T>)>> {
        let node = &self.nodes[i];
        let y = &node.value;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::ScaleConst(x, f) => out.push((*x, g.map(|v| v * *f))),
            Op::Reshape(x) => out.push((*x, g.reshape(self.v(*x).shape())?)),
            Op::Permute(x, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                out.push((*x, permute(g, &inverse)?));
            }
            Op::Act(x, Activation::Relu) => {
                let xv = self.v(*x);
                out.push((*x, g.zip_map(xv, |d, p| if p > T::zero() { d } else { T::zero() })?));
            }
            Op::Act(x, Activation::Sigmoid) => {
                out.push((*x, g.zip_map(y, |d, s| d * s * (T::one() - s))?));
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.v(*x), self.v(*w));
                let (m, din) = (xv.dim(0), xv.dim(1));
                let dout = wv.dim(0);
                let gd = g.data();
                if self.wants(*x) {
                    let mut dx = Tensor::zeros(&[m, din]);
                    let d = dx.data_mut();
                    for r in 0..m {
                        for o in 0..dout {
                            let gv = gd[r * dout + o];
                            for c in 0..din {
                                d[r * din + c] = d[r * din + c] + gv * wv.data()[o * din + c];
                            }
                        }
                    }
                    out.push((*x, dx));
                }
                if self.wants(*w) {
                    let mut dw = Tensor::zeros(&[dout, din]);
                    let d = dw.data_mut();
                    for r in 0..m {
                        for o in 0..dout {
                            let gv = gd[r * dout + o];
                            for c in 0..din {
                                d[o * din + c] = d[o * din + c] + gv * xv.data()[r * din + c];
                            }
                        }
                    }
                    out.push((*w, dw));
                }
                if let Some(b) = b {
                    let mut db = Tensor::zeros(&[dout]);
                    for r in 0..m {
                        for o in 0..dout {
                            db.data_mut()[o] = db.data()[o] + gd[r * dout + o];
                        }
                    }
                    out.push((*b, db));
                }
            }
            Op::Conv2d {
                x,
                k,
                stride,
                padding,
            } => {
                let (xv, kv) = (self.v(*x), self.v(*k));
                let geo = conv_geometry(xv, kv, *stride, *padding)?;
                let mut dx = self.wants(*x).then(|| Tensor::zeros(xv.shape()));
                let mut dk = self.wants(*k).then(|| Tensor::zeros(kv.shape()));
                kernels::conv2d_backward(
                    &geo,
                    xv.data(),
                    kv.data(),
                    g.data(),
                    dx.as_mut().map(|t| t.data_mut()),
                    dk.as_mut().map(|t| t.data_mut()),
                );
                out.extend(dx.map(|t| (*x, t)));
                out.extend(dk.map(|t| (*k, t)));
            }
            Op::Bmm { a, b, trans_b } => {
                let (av, bv) = (self.v(*a), self.v(*b));
                let (batch, m, k, n) = bmm_dims(av, bv, *trans_b)?;
                if self.wants(*a) {
                    // da = g · bᵀ  (or g · b when b was transposed)
                    let mut da = Tensor::zeros(av.shape());
                    kernels::bmm(batch, m, n, k, g.data(), bv.data(), !*trans_b, da.data_mut());
                    out.push((*a, da));
                }
                if self.wants(*b) {
                    let at = permute(av, &[0, 2, 1])?;
                    let mut db = Tensor::zeros(bv.shape());
                    if *trans_b {
                        // db = gᵀ · a
                        let gt = permute(g, &[0, 2, 1])?;
                        kernels::bmm(batch, n, m, k, gt.data(), av.data(), false, db.data_mut());
                    } else {
                        kernels::bmm(batch, k, m, n, at.data(), g.data(), false, db.data_mut());
                    }
                    out.push((*b, db));
                }
            }
            Op::Softmax(x) => {
                let d = *y.shape().last().unwrap_or(&1);
                let mut dx = g.clone();
                for (row, (yr, gr)) in dx
                    .data_mut()
                    .chunks_mut(d)
                    .zip(y.data().chunks(d).zip(g.data().chunks(d)))
                {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        row[j] = yr[j] * (gr[j] - dot);
                    }
                }
                out.push((*x, dx));
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = self.v(*x);
                let d = *xv.shape().last().unwrap_or(&1);
                let gd = self.v(*gamma).data();
                let mut dx = Tensor::zeros(xv.shape());
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                let inv_d = T::one() / T::of(d as f64);
                for ((xr, gr), dr) in xv
                    .data()
                    .chunks(d)
                    .zip(g.data().chunks(d))
                    .zip(dx.data_mut().chunks_mut(d))
                {
                    let (mu, rstd) = row_moments(xr, *eps);
                    let mut sum_dh = T::zero();
                    let mut sum_dh_h = T::zero();
                    for j in 0..d {
                        let h = (xr[j] - mu) * rstd;
                        let dh = gr[j] * gd[j];
                        sum_dh = sum_dh + dh;
                        sum_dh_h = sum_dh_h + dh * h;
                        dgamma[j] = dgamma[j] + gr[j] * h;
                        dbeta[j] = dbeta[j] + gr[j];
                    }
                    for j in 0..d {
                        let h = (xr[j] - mu) * rstd;
                        let dh = gr[j] * gd[j];
                        dr[j] = rstd * (dh - inv_d * sum_dh - h * inv_d * sum_dh_h);
                    }
                }
                out.push((*x, dx));
                out.push((*gamma, Tensor::new(&[d], dgamma)?));
                out.push((*beta, Tensor::new(&[d], dbeta)?));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                eps,
                stats,
            } => {
                let xv = self.v(*x);
                let (outer, c, inner) = channel_layout(xv)?;
                let (mean, var) = match stats {
                    BnStats::Batch => kernels::channel_moments(xv.data(), outer, c, inner),
                    BnStats::Fixed { mean, var } => (mean.clone(), var.clone()),
                };
                let gd = self.v(*gamma).data();
                let mut dx = Tensor::zeros(xv.shape());
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let count = T::of((outer * inner) as f64);
                for ch in 0..c {
                    let rstd = (var[ch] + *eps).sqrt().recip();
                    let mut sum_dh = T::zero();
                    let mut sum_dh_h = T::zero();
                    for o in 0..outer {
                        let base = (o * c + ch) * inner;
                        for j in base..base + inner {
                            let h = (xv.data()[j] - mean[ch]) * rstd;
                            let gv = g.data()[j];
                            dgamma[ch] = dgamma[ch] + gv * h;
                            dbeta[ch] = dbeta[ch] + gv;
                            sum_dh = sum_dh + gv * gd[ch];
                            sum_dh_h = sum_dh_h + gv * gd[ch] * h;
                        }
                    }
                    let batch_stats = matches!(stats, BnStats::Batch);
                    for o in 0..outer {
                        let base = (o * c + ch) * inner;
                        for j in base..base + inner {
                            let dh = g.data()[j] * gd[ch];
                            dx.data_mut()[j] = if batch_stats {
                                let h = (xv.data()[j] - mean[ch]) * rstd;
                                rstd * (dh - sum_dh / count - h * sum_dh_h / count)
                            } else {
                                dh * rstd
                            };
                        }
                    }
                }
                out.push((*x, dx));
                out.push((*gamma, Tensor::new(&[c], dgamma)?));
                out.push((*beta, Tensor::new(&[c], dbeta)?));
            }
            Op::SpatialMean(x) => {
                let xv = self.v(*x);
                let (_, _, inner) = spatial_layout(xv)?;
                let scale = T::one() / T::of(inner as f64);
                out.push((*x, expand_spatial(xv.shape(), g, inner, |_, gv| gv * scale)));
            }
            Op::SpatialMax(x) => {
                let xv = self.v(*x);
                let (_, _, inner) = spatial_layout(xv)?;
                let mut dx = Tensor::zeros(xv.shape());
                for (i, (chunk, dchunk)) in xv
                    .data()
                    .chunks(inner)
                    .zip(dx.data_mut().chunks_mut(inner))
                    .enumerate()
                {
                    dchunk[argmax(chunk)] = g.data()[i];
                }
                out.push((*x, dx));
            }
            Op::SpatialStd(x) => {
                let xv = self.v(*x);
                let (_, _, inner) = spatial_layout(xv)?;
                let m = T::of(inner as f64);
                let mut dx = Tensor::zeros(xv.shape());
                for (i, (chunk, dchunk)) in xv
                    .data()
                    .chunks(inner)
                    .zip(dx.data_mut().chunks_mut(inner))
                    .enumerate()
                {
                    let (mu, sd) = population_std(chunk);
                    if sd > T::zero() {
                        for (d, &v) in dchunk.iter_mut().zip(chunk) {
                            *d = g.data()[i] * (v - mu) / (m * sd);
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::SpatialProject(x, w) => {
                let xv = self.v(*x);
                let (_, _, inner) = spatial_layout(xv)?;
                out.push((*x, expand_spatial(xv.shape(), g, inner, |j, gv| gv * w[j])));
            }
            Op::TokenMean(x) => {
                let xv = self.v(*x);
                let [n, t, d] = dims3(xv, "token_mean")?;
                let scale = T::one() / T::of(t as f64);
                let mut dx = Tensor::zeros(xv.shape());
                for i in 0..n {
                    for tok in 0..t {
                        for j in 0..d {
                            dx.data_mut()[(i * t + tok) * d + j] = g.data()[i * d + j] * scale;
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::ChannelScale { x, w } => {
                let (xv, wv) = (self.v(*x), self.v(*w));
                let (_, _, inner) = spatial_layout(xv)?;
                if self.wants(*x) {
                    let mut dx = g.clone();
                    for (i, chunk) in dx.data_mut().chunks_mut(inner).enumerate() {
                        let s = wv.data()[i];
                        chunk.iter_mut().for_each(|v| *v = *v * s);
                    }
                    out.push((*x, dx));
                }
                if self.wants(*w) {
                    let dw: Vec<T> = xv
                        .data()
                        .chunks(inner)
                        .zip(g.data().chunks(inner))
                        .map(|(xc, gc)| xc.iter().zip(gc).map(|(&a, &b)| a * b).sum())
                        .collect();
                    out.push((*w, Tensor::new(wv.shape(), dw)?));
                }
            }
            Op::TokenScale { x, w } => {
                let (xv, wv) = (self.v(*x), self.v(*w));
                let [n, t, d] = dims3(xv, "token_scale")?;
                let mut dx = Tensor::zeros(xv.shape());
                let mut dw = Tensor::zeros(wv.shape());
                for i in 0..n {
                    for tok in 0..t {
                        for j in 0..d {
                            let idx = (i * t + tok) * d + j;
                            dx.data_mut()[idx] = g.data()[idx] * wv.data()[i * d + j];
                            dw.data_mut()[i * d + j] = dw.data()[i * d + j] + g.data()[idx] * xv.data()[idx];
                        }
                    }
                }
                out.push((*x, dx));
                out.push((*w, dw));
            }
            Op::Concat(xs) => {
                let n = y.dim(0);
                let total = y.dim(1);
                let mut offset = 0;
                for &x in xs {
                    let w = self.v(x).dim(1);
                    let mut dx = Vec::with_capacity(n * w);
                    for row in 0..n {
                        dx.extend_from_slice(&g.data()[row * total + offset..][..w]);
                    }
                    out.push((x, Tensor::new(&[n, w], dx)?));
                    offset += w;
                }
            }
            Op::Fuse { weights, inputs } => {
                let f = self.v(*weights);
                let mut df = Vec::with_capacity(inputs.len());
                for (i, &x) in inputs.iter().enumerate() {
                    let xv = self.v(x);
                    df.push(xv.data().iter().zip(g.data()).map(|(&a, &b)| a * b).sum());
                    let fi = f.data()[i];
                    out.push((x, g.map(|v| v * fi)));
                }
                out.push((*weights, Tensor::new(&[inputs.len()], df)?));
            }
            Op::Sum(x) => {
                let s = g.item();
                out.push((*x, Tensor::full(self.v(*x).shape(), s)));
            }
            Op::Dot(x, w) => {
                let s = g.item();
                out.push((*x, w.map(|v| v * s)));
            }
            Op::CrossEntropy { logits, labels } => {
                let lv = self.v(*logits);
                let k = lv.dim(1);
                let n = T::of(labels.len() as f64);
                let mut p = softmax_last(lv)?;
                for (i, &l) in labels.iter().enumerate() {
                    p.data_mut()[i * k + l] = p.data()[i * k + l] - T::one();
                }
                let s = g.item() / n;
                out.push((*logits, p.map(|v| v * s)));
            }
        }
        Ok(out)
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Index of the first maximum.
fn argmax<T: Real>(s: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in s.iter().enumerate() {
        if v > s[best] {
            best = i;
        }
    }
    best
}

fn population_std<T: Real>(s: &[T]) -> (T, T) {
    let m = T::of(s.len() as f64);
    let mu = s.iter().copied().sum::<T>() / m;
    let var = s.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / m;
    (mu, var.sqrt())
}

fn row_moments<T: Real>(row: &[T], eps: T) -> (T, T) {
    let d = T::of(row.len() as f64);
    let mu = row.iter().copied().sum::<T>() / d;
    let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / d;
    (mu, (var + eps).sqrt().recip())
}

fn check_vec<T: Real>(t: &Tensor<T>, len: usize, what: &str) -> Result<()> {
    if t.shape() != [len] {
        return Err(Error::shape(format!("{what} has shape {:?}, expected [{len}]", t.shape())));
    }
    Ok(())
}

fn dims3<T: Real>(t: &Tensor<T>, what: &str) -> Result<[usize; 3]> {
    match t.shape() {
        [a, b, c] => Ok([*a, *b, *c]),
        s => Err(Error::shape(format!("{what} expects [N,T,D], got {s:?}"))),
    }
}

/// `(outer, channels, inner)` for batch norm over axis 1.
fn channel_layout<T: Real>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if x.ndim() < 2 {
        return Err(Error::shape(format!("batchnorm expects [N,C,...], got {:?}", x.shape())));
    }
    Ok((x.dim(0), x.dim(1), x.shape()[2..].iter().product()))
}

/// `(N, C, H*W)` for spatial reductions; the spatial grid must be non-empty.
fn spatial_layout<T: Real>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if x.ndim() < 3 {
        return Err(Error::shape(format!("expected [N,C,H,W], got {:?}", x.shape())));
    }
    let inner: usize = x.shape()[2..].iter().product();
    if inner == 0 {
        return Err(Error::shape(format!("empty spatial extent in {:?}", x.shape())));
    }
    Ok((x.dim(0), x.dim(1), inner))
}

fn reduce_spatial<T: Real>(x: &Tensor<T>, n: usize, c: usize, inner: usize, f: impl Fn(&[T]) -> T) -> Tensor<T> {
    let data = x.data().chunks(inner).map(f).collect();
    Tensor::new(&[n, c], data).expect("reduction shape")
}

fn expand_spatial<T: Real>(
    shape: &[usize],
    g: &Tensor<T>,
    inner: usize,
    f: impl Fn(usize, T) -> T,
) -> Tensor<T> {
    let mut dx = Tensor::zeros(shape);
    for (i, chunk) in dx.data_mut().chunks_mut(inner).enumerate() {
        let gv = g.data()[i];
        for (j, v) in chunk.iter_mut().enumerate() {
            *v = f(j, gv);
        }
    }
    dx
}

fn linear_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (m, din) = match x.shape() {
        [m, d] => (*m, *d),
        s => return Err(Error::shape(format!("linear input must be [N, Din], got {s:?}"))),
    };
    let dout = match w.shape() {
        [o, d] if *d == din => *o,
        s => {
            return Err(Error::shape(format!(
                "linear weight {s:?} does not accept input width {din}"
            )))
        }
    };
    if let Some(b) = b {
        check_vec(b, dout, "linear bias")?;
    }
    let mut out = Tensor::zeros(&[m, dout]);
    let od = out.data_mut();
    for r in 0..m {
        let xr = &x.data()[r * din..(r + 1) * din];
        for o in 0..dout {
            let wr = &w.data()[o * din..(o + 1) * din];
            let mut acc: T = xr.iter().zip(wr).map(|(&a, &b)| a * b).sum();
            if let Some(b) = b {
                acc = acc + b.data()[o];
            }
            od[r * dout + o] = acc;
        }
    }
    Ok(out)
}

fn conv_geometry<T: Real>(x: &Tensor<T>, k: &Tensor<T>, stride: usize, padding: usize) -> Result<ConvGeometry> {
    let [n, cin, h, w] = match x.shape() {
        [a, b, c, d] => [*a, *b, *c, *d],
        s => return Err(Error::shape(format!("conv2d input must be [N,C,H,W], got {s:?}"))),
    };
    let [cout, kcin, kh, kw] = match k.shape() {
        [a, b, c, d] => [*a, *b, *c, *d],
        s => return Err(Error::shape(format!("conv2d kernel must be [Cout,Cin,kh,kw], got {s:?}"))),
    };
    if kcin != cin {
        return Err(Error::shape(format!("conv2d kernel expects {kcin} input channels, got {cin}")));
    }
    if stride == 0 {
        return Err(Error::shape("conv2d stride must be positive"));
    }
    let g = ConvGeometry {
        batch: n,
        in_channels: cin,
        out_channels: cout,
        height: h,
        width: w,
        kernel_h: kh,
        kernel_w: kw,
        stride,
        padding,
    };
    if kernels::conv_out_extent(h, kh, stride, padding).is_none()
        || kernels::conv_out_extent(w, kw, stride, padding).is_none()
    {
        return Err(Error::shape(format!(
            "conv2d kernel {kh}x{kw} does not fit a {h}x{w} input with padding {padding}"
        )));
    }
    Ok(g)
}

fn bmm_dims<T: Real>(a: &Tensor<T>, b: &Tensor<T>, trans_b: bool) -> Result<(usize, usize, usize, usize)> {
    match (a.shape(), b.shape()) {
        ([ba, m, k], [bb, p, q]) if ba == bb => {
            let (kb, n) = if trans_b { (*q, *p) } else { (*p, *q) };
            if kb != *k {
                return Err(Error::shape(format!("bmm inner extents {k} vs {kb}")));
            }
            Ok((*ba, *m, *k, n))
        }
        (sa, sb) => Err(Error::shape(format!("bmm shapes {sa:?} and {sb:?}"))),
    }
}

fn softmax_last<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let d = *x.shape().last().ok_or_else(|| Error::shape("softmax on scalar"))?;
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            s = s + *v;
        }
        row.iter_mut().for_each(|v| *v = *v / s);
    }
    Ok(out)
}

fn permute<T: Real>(x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let nd = x.ndim();
    let mut seen = vec![false; nd];
    if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
        return Err(Error::shape(format!("invalid permutation {axes:?} for rank {nd}")));
    }
    let in_shape = x.shape();
    let mut in_strides = vec![1; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut data = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; nd];
    for _ in 0..x.len() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        data.push(x.data()[off]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::new(&out_shape, data)
}
