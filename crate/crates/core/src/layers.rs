//! Parameterized layers used by the attention modules and blocks.

use serde::{Deserialize, Serialize};

use crate::autodiff::{BnStats, NodeId};
use crate::error::Result;
use crate::param::{BufferId, Mode, ParamId, ParamRole, ParamStore, Session};
use crate::tensor::{Real, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Bias-free 2D convolution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Conv2d {
    pub weight: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        let weight = store.add_uniform(
            format!("{name}.weight"),
            ParamRole::ConvWeight,
            &[out_channels, in_channels, kernel, kernel],
            in_channels * kernel * kernel,
        );
        Self {
            weight,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn forward<T: Real>(&self, sess: &mut Session<'_, T>, x: NodeId) -> Result<NodeId> {
        let w = sess.param(self.weight)?;
        sess.graph.conv2d(x, w, self.stride, self.padding)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.weight]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, in_features: usize, out_features: usize, bias: bool) -> Self {
        Self::with_role(store, name, in_features, out_features, bias, ParamRole::LinearWeight)
    }

    pub fn with_role<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
        role: ParamRole,
    ) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), role, &[out_features, in_features], in_features);
        let bias = bias.then(|| store.add_uniform(format!("{name}.bias"), ParamRole::LinearBias, &[out_features], in_features));
        Self {
            weight,
            bias,
            in_features,
            out_features,
        }
    }

    pub fn forward<T: Real>(&self, sess: &mut Session<'_, T>, x: NodeId) -> Result<NodeId> {
        let w = sess.param(self.weight)?;
        let b = self.bias.map(|b| sess.param(b)).transpose()?;
        sess.graph.linear(x, w, b)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = vec![self.weight];
        v.extend(self.bias);
        v
    }
}

/// Batch norm over axis 1 (eps 1e-5, momentum 0.1).
///
/// When `identity` is set the layer passes its input through untouched;
/// its parameters still exist and are counted.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: BufferId,
    pub channels: usize,
    pub identity: bool,
}

impl BatchNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), ParamRole::NormGamma, Tensor::ones(&[channels]));
        let beta = store.add(format!("{name}.beta"), ParamRole::NormBeta, Tensor::zeros(&[channels]));
        let stats = store.add_buffer(channels);
        Self {
            gamma,
            beta,
            stats,
            channels,
            identity: false,
        }
    }

    pub fn forward<T: Real>(&self, sess: &mut Session<'_, T>, x: NodeId) -> Result<NodeId> {
        if self.identity {
            return Ok(x);
        }
        let gamma = sess.param(self.gamma)?;
        let beta = sess.param(self.beta)?;
        let eps = T::of(BN_EPS);
        match sess.mode() {
            Mode::Eval => {
                let rs = sess.store().buffer(self.stats);
                let stats = BnStats::Fixed {
                    mean: rs.mean.clone(),
                    var: rs.var.clone(),
                };
                sess.graph.batch_norm(x, gamma, beta, eps, stats)
            }
            Mode::Train => {
                let y = sess.graph.batch_norm(x, gamma, beta, eps, BnStats::Batch)?;
                self.update_running(sess, x);
                Ok(y)
            }
        }
    }

    fn update_running<T: Real>(&self, sess: &mut Session<'_, T>, x: NodeId) {
        let xv = sess.graph.value(x);
        let outer = xv.dim(0);
        let c = xv.dim(1);
        let inner: usize = xv.shape()[2..].iter().product();
        let (mean, var) = crate::autodiff::kernels::channel_moments(xv.data(), outer, c, inner);
        let m = (outer * inner) as f64;
        let unbias = T::of(m / (m - 1.0));
        let mom = T::of(BN_MOMENTUM);
        let keep = T::one() - mom;
        let rs = sess.store_mut().buffer_mut(self.stats);
        for ch in 0..c {
            rs.mean[ch] = keep * rs.mean[ch] + mom * mean[ch];
            rs.var[ch] = keep * rs.var[ch] + mom * var[ch] * unbias;
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, width: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), ParamRole::NormGamma, Tensor::ones(&[width])),
            beta: store.add(format!("{name}.beta"), ParamRole::NormBeta, Tensor::zeros(&[width])),
        }
    }

    pub fn forward<T: Real>(&self, sess: &mut Session<'_, T>, x: NodeId) -> Result<NodeId> {
        let g = sess.param(self.gamma)?;
        let b = sess.param(self.beta)?;
        crate::autodiff::nn::layer_norm(&mut sess.graph, x, g, b)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }
}

/// Total number of scalars across `ids`.
pub fn numel<T: Real>(store: &ParamStore<T>, ids: &[ParamId]) -> usize {
    ids.iter().map(|&id| store.value(id).len()).sum()
}
