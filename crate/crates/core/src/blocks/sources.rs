//! Which feature maps feed a block's bridge attention.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionOutput;
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Real;

/// A tap point inside the current block or its predecessor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapPoint {
    /// Previous block's last conv output (before rescaling).
    PrevConv3,
    /// Previous block's output after the residual add.
    PrevEnd,
    /// Previous block's attention weights, as a `[N, C, 1, 1]` map.
    PrevAttn,
    CurrConv1,
    CurrConv2,
    /// The current block's last conv, whose output is rescaled.
    #[serde(alias = "curr_conv3")]
    Adjacent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TapType {
    ConvOutput,
    AttentionWeights,
}

impl TapPoint {
    pub fn tap_type(self) -> TapType {
        match self {
            TapPoint::PrevAttn => TapType::AttentionWeights,
            _ => TapType::ConvOutput,
        }
    }

    pub fn needs_predecessor(self) -> bool {
        matches!(self, TapPoint::PrevConv3 | TapPoint::PrevEnd | TapPoint::PrevAttn)
    }

    pub fn label(self) -> &'static str {
        match self {
            TapPoint::PrevConv3 => "prev_conv3",
            TapPoint::PrevEnd => "prev_end",
            TapPoint::PrevAttn => "prev_attn",
            TapPoint::CurrConv1 => "curr_conv1",
            TapPoint::CurrConv2 => "curr_conv2",
            TapPoint::Adjacent => "adjacent",
        }
    }
}

impl fmt::Display for TapPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for TapPoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "prev_conv3" => TapPoint::PrevConv3,
            "prev_end" => TapPoint::PrevEnd,
            "prev_attn" => TapPoint::PrevAttn,
            "curr_conv1" => TapPoint::CurrConv1,
            "curr_conv2" => TapPoint::CurrConv2,
            "adjacent" | "curr_conv3" => TapPoint::Adjacent,
            other => return Err(Error::config(format!("unknown tap point {other:?}"))),
        })
    }
}

/// Ordered list of bridge taps. The adjacent layer is always present
/// and unique taps are required.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<TapPoint>", into = "Vec<TapPoint>")]
pub struct BridgeSourceConfig {
    sources: Vec<TapPoint>,
}

impl BridgeSourceConfig {
    pub fn new(sources: Vec<TapPoint>) -> Result<Self> {
        if !sources.contains(&TapPoint::Adjacent) {
            return Err(Error::config("bridge sources must include the adjacent layer"));
        }
        for (i, s) in sources.iter().enumerate() {
            if sources[..i].contains(s) {
                return Err(Error::config(format!("duplicate bridge source {s}")));
            }
        }
        Ok(Self { sources })
    }

    pub fn adjacent_only() -> Self {
        Self {
            sources: vec![TapPoint::Adjacent],
        }
    }

    /// Every conv of the current block: `n = 2` for basic, `n = 3` for
    /// bottleneck blocks.
    pub fn current_convs(convs: usize) -> Self {
        let sources = match convs {
            2 => vec![TapPoint::CurrConv1, TapPoint::Adjacent],
            _ => vec![TapPoint::CurrConv1, TapPoint::CurrConv2, TapPoint::Adjacent],
        };
        Self { sources }
    }

    /// The six previous-feature configurations compared in the ablation,
    /// each paired with a short label.
    pub fn ablation_set() -> Vec<(&'static str, Self)> {
        use TapPoint::*;
        let mk = |v: Vec<TapPoint>| Self { sources: v };
        vec![
            ("attn:prev_conv3", mk(vec![PrevAttn, Adjacent])),
            ("conv:prev_conv3", mk(vec![PrevConv3, Adjacent])),
            ("conv:prev_end", mk(vec![PrevEnd, Adjacent])),
            ("conv:curr_conv1", mk(vec![CurrConv1, Adjacent])),
            ("conv:curr_conv2", mk(vec![CurrConv2, Adjacent])),
            ("conv:curr_conv1&2", mk(vec![CurrConv1, CurrConv2, Adjacent])),
        ]
    }

    pub fn sources(&self) -> &[TapPoint] {
        &self.sources
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn needs_predecessor(&self) -> bool {
        self.sources.iter().any(|t| t.needs_predecessor())
    }
}

impl TryFrom<Vec<TapPoint>> for BridgeSourceConfig {
    type Error = Error;

    fn try_from(v: Vec<TapPoint>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<BridgeSourceConfig> for Vec<TapPoint> {
    fn from(c: BridgeSourceConfig) -> Self {
        c.sources
    }
}

impl FromStr for BridgeSourceConfig {
    type Err = Error;

    /// Comma-separated tap names, e.g. `curr_conv1,adjacent`.
    fn from_str(s: &str) -> Result<Self> {
        let taps = s
            .split(',')
            .map(|t| t.trim().parse())
            .collect::<Result<Vec<TapPoint>>>()?;
        Self::new(taps)
    }
}

/// Feature maps recorded while a conv block runs.
#[derive(Debug, Clone)]
pub struct BlockTrace {
    pub conv1: NodeId,
    /// Middle conv of a bottleneck block; absent for basic blocks.
    pub conv2: Option<NodeId>,
    /// Last conv output before rescaling.
    pub adjacent: NodeId,
    /// Output after the residual add and ReLU.
    pub end: NodeId,
    pub attention: Option<AttentionOutput>,
    pub out_channels: usize,
}

/// Collects the tensors named by `cfg` in declared order. Attention
/// taps come back as `[N, C, 1, 1]` maps so they pool like features.
pub fn bridge_tap<T: Real>(
    graph: &mut Graph<T>,
    current: &BlockTrace,
    prev: Option<&BlockTrace>,
    cfg: &BridgeSourceConfig,
) -> Result<Vec<NodeId>> {
    let need_prev = |tap: TapPoint| -> Result<&BlockTrace> {
        prev.ok_or_else(|| Error::config(format!("tap {tap} requested on a block with no predecessor")))
    };
    cfg.sources()
        .iter()
        .map(|&tap| match tap {
            TapPoint::Adjacent => Ok(current.adjacent),
            TapPoint::CurrConv1 => Ok(current.conv1),
            TapPoint::CurrConv2 => current
                .conv2
                .ok_or_else(|| Error::config("curr_conv2 is the adjacent layer of a basic block; use adjacent")),
            TapPoint::PrevConv3 => Ok(need_prev(tap)?.adjacent),
            TapPoint::PrevEnd => Ok(need_prev(tap)?.end),
            TapPoint::PrevAttn => {
                let p = need_prev(tap)?;
                let omega = p
                    .attention
                    .as_ref()
                    .ok_or_else(|| Error::config("prev_attn requested but the previous block has no attention"))?
                    .omega;
                let shape = graph.shape(omega).to_vec();
                graph.reshape(omega, &[shape[0], shape[1], 1, 1])
            }
        })
        .collect()
}
