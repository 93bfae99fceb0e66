//! Channel attention: SE and the two bridge-attention variants.
//!
//! Every variant splits into an integration step (pool each tapped
//! feature map, project it to the fused width `C_n/r`, combine) and a
//! generation step (`σ(W2 · ReLU(·))`, with a batch norm in front for
//! BAv2). The weights `ω ∈ (0,1)^{C_n}` rescale the adjacent layer's
//! output channel-wise.

pub mod bridge;
pub mod count;
pub mod pooling;
pub mod se;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::NodeId;
use crate::blocks::sources::BridgeSourceConfig;
use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore, Session};
use crate::tensor::Real;

pub use bridge::{BridgeModule, BridgeVariant};
pub use count::{attention_param_count, Counting};
pub use pooling::{PoolingKind, PoolingStrategy};
pub use se::SeModule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Se,
    Bav1,
    Bav2,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Se => "se",
            Variant::Bav1 => "bav1",
            Variant::Bav2 => "bav2",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "se" => Ok(Variant::Se),
            "bav1" | "v1" | "ba" => Ok(Variant::Bav1),
            "bav2" | "v2" => Ok(Variant::Bav2),
            other => Err(Error::config(format!("unknown attention variant {other:?}"))),
        }
    }
}

/// Parses `none` as `None`, anything else as a [`Variant`].
pub fn parse_optional_variant(s: &str) -> Result<Option<Variant>> {
    if s.eq_ignore_ascii_case("none") {
        Ok(None)
    } else {
        s.parse().map(Some)
    }
}

/// Attention attached to a block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub variant: Variant,
    pub reduction: usize,
    #[serde(default)]
    pub pooling: PoolingStrategy,
    /// Bridge taps; `None` means every conv of the current block.
    /// Ignored by SE, which only sees the adjacent layer.
    #[serde(default)]
    pub sources: Option<BridgeSourceConfig>,
}

impl AttentionConfig {
    pub fn new(variant: Variant, reduction: usize) -> Self {
        Self {
            variant,
            reduction,
            pooling: PoolingStrategy::avg(),
            sources: None,
        }
    }

    pub fn with_pooling(mut self, pooling: PoolingStrategy) -> Self {
        self.pooling = pooling;
        self
    }

    pub fn with_sources(mut self, sources: BridgeSourceConfig) -> Self {
        self.sources = Some(sources);
        self
    }
}

/// Fused width `C_n / r`; `r` must divide `C_n`.
pub fn reduced_width(channels: usize, reduction: usize) -> Result<usize> {
    if reduction == 0 || !channels.is_multiple_of(reduction) || channels < reduction {
        return Err(Error::config(format!(
            "reduction ratio {reduction} does not divide {channels} channels"
        )));
    }
    Ok(channels / reduction)
}

/// Graph handles produced by one attention evaluation.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// Per-branch squeezed features `S_i`, each `[N, C_n/r]`.
    pub squeezed: Vec<NodeId>,
    /// Integrated feature `S`.
    pub fused: NodeId,
    /// Attention weights `ω`, `[N, C_n]`.
    pub omega: NodeId,
}

/// A channel attention module of any variant.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum ChannelAttention {
    Se(SeModule),
    Bridge(BridgeModule),
}

impl ChannelAttention {
    /// Builds the module for taps of the given channel widths. The last
    /// entry of `branch_widths` is ignored by SE.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &AttentionConfig,
        branch_widths: &[usize],
        out_channels: usize,
    ) -> Result<Self> {
        Ok(match cfg.variant {
            Variant::Se => ChannelAttention::Se(SeModule::new(store, name, out_channels, cfg.reduction, cfg.pooling)?),
            Variant::Bav1 | Variant::Bav2 => {
                let v = if cfg.variant == Variant::Bav1 {
                    BridgeVariant::V1
                } else {
                    BridgeVariant::V2
                };
                ChannelAttention::Bridge(BridgeModule::new(
                    store,
                    name,
                    branch_widths,
                    out_channels,
                    cfg.reduction,
                    v,
                    cfg.pooling,
                )?)
            }
        })
    }

    pub fn variant(&self) -> Variant {
        match self {
            ChannelAttention::Se(_) => Variant::Se,
            ChannelAttention::Bridge(b) => match b.variant {
                BridgeVariant::V1 => Variant::Bav1,
                BridgeVariant::V2 => Variant::Bav2,
            },
        }
    }

    pub fn branches(&self) -> usize {
        match self {
            ChannelAttention::Se(_) => 1,
            ChannelAttention::Bridge(b) => b.branches(),
        }
    }

    /// Attention from spatial feature maps `[N, C_i, H_i, W_i]`. SE uses
    /// only the last tap.
    pub fn forward<T: Real>(&self, sess: &mut Session<'_, T>, taps: &[NodeId]) -> Result<AttentionOutput> {
        match self {
            ChannelAttention::Se(se) => {
                let x = *taps.last().ok_or_else(|| Error::config("attention needs at least one tap"))?;
                se.forward_traced(sess, x)
            }
            ChannelAttention::Bridge(b) => b.forward(sess, taps),
        }
    }

    /// Attention from already pooled statistics `[N, k·C_i]`.
    pub fn forward_pooled<T: Real>(&self, sess: &mut Session<'_, T>, pooled: &[NodeId]) -> Result<AttentionOutput> {
        match self {
            ChannelAttention::Se(se) => {
                let z = *pooled.last().ok_or_else(|| Error::config("attention needs at least one tap"))?;
                se.forward_from_pooled(sess, z)
            }
            ChannelAttention::Bridge(b) => b.forward_pooled(sess, pooled),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        match self {
            ChannelAttention::Se(se) => se.params(),
            ChannelAttention::Bridge(b) => b.params(),
        }
    }

    /// Sets every batch norm inside the module to pass-through.
    pub fn freeze_norms_identity(&mut self) {
        if let ChannelAttention::Bridge(b) = self {
            b.freeze_norms_identity();
        }
    }
}
