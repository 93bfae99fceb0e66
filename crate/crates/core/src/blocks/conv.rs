//! Basic and bottleneck residual blocks with optional channel attention
//! applied to the last conv's output before the residual add.

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, ChannelAttention, Variant};
use crate::autodiff::NodeId;
use crate::blocks::sources::{bridge_tap, BlockTrace, BridgeSourceConfig, TapPoint};
use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Conv2d};
use crate::param::{ParamId, ParamStore, Session};
use crate::tensor::{Real, Tensor};

pub const BOTTLENECK_EXPANSION: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvBlockKind {
    Basic,
    Bottleneck,
}

impl ConvBlockKind {
    pub fn convs(self) -> usize {
        match self {
            ConvBlockKind::Basic => 2,
            ConvBlockKind::Bottleneck => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvBlockSpec {
    pub kind: ConvBlockKind,
    pub in_channels: usize,
    /// Bottleneck: the reduced width `C_mid`. Basic: the output width.
    pub width: usize,
    pub stride: usize,
    pub attention: Option<AttentionConfig>,
}

impl ConvBlockSpec {
    pub fn new(kind: ConvBlockKind, in_channels: usize, width: usize, stride: usize) -> Self {
        Self {
            kind,
            in_channels,
            width,
            stride,
            attention: None,
        }
    }

    pub fn with_attention(mut self, cfg: AttentionConfig) -> Self {
        self.attention = Some(cfg);
        self
    }

    pub fn out_channels(&self) -> usize {
        match self.kind {
            ConvBlockKind::Basic => self.width,
            ConvBlockKind::Bottleneck => BOTTLENECK_EXPANSION * self.width,
        }
    }

    /// Output widths of each conv, in order.
    pub fn conv_widths(&self) -> Vec<usize> {
        match self.kind {
            ConvBlockKind::Basic => vec![self.width, self.width],
            ConvBlockKind::Bottleneck => vec![self.width, self.width, self.out_channels()],
        }
    }

    pub fn has_downsample(&self) -> bool {
        self.stride != 1 || self.in_channels != self.out_channels()
    }

    /// Effective bridge sources (SE always sees the adjacent layer only).
    pub fn resolved_sources(&self) -> Option<BridgeSourceConfig> {
        let cfg = self.attention.as_ref()?;
        Some(match cfg.variant {
            Variant::Se => BridgeSourceConfig::adjacent_only(),
            _ => cfg
                .sources
                .clone()
                .unwrap_or_else(|| BridgeSourceConfig::current_convs(self.kind.convs())),
        })
    }

    /// Channel width of every tap, given the predecessor's output width.
    pub fn tap_widths(&self, prev_out: Option<usize>) -> Result<Vec<usize>> {
        let Some(sources) = self.resolved_sources() else {
            return Ok(Vec::new());
        };
        let convs = self.conv_widths();
        sources
            .sources()
            .iter()
            .map(|&t| match t {
                TapPoint::Adjacent => Ok(self.out_channels()),
                TapPoint::CurrConv1 => Ok(convs[0]),
                TapPoint::CurrConv2 if self.kind == ConvBlockKind::Bottleneck => Ok(convs[1]),
                TapPoint::CurrConv2 => Err(Error::config("curr_conv2 is the adjacent layer of a basic block; use adjacent")),
                TapPoint::PrevConv3 | TapPoint::PrevEnd | TapPoint::PrevAttn => {
                    prev_out.ok_or_else(|| Error::config(format!("tap {t} requested on a block with no predecessor")))
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ConvBn {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), cin, cout, k, stride, k / 2),
            bn: BatchNorm::new(store, &format!("{name}.bn"), cout),
        }
    }

    fn forward<T: Real>(&self, sess: &mut Session<'_, T>, x: NodeId) -> Result<NodeId> {
        let y = self.conv.forward(sess, x)?;
        self.bn.forward(sess, y)
    }

    fn params(&self) -> Vec<ParamId> {
        let mut v = self.conv.params();
        v.extend(self.bn.params());
        v
    }
}

/// A residual block. With `bypass_attention` set, `ω` is replaced by
/// ones before rescaling, which reproduces the attention-free block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvBlock {
    pub spec: ConvBlockSpec,
    stages: Vec<ConvBn>,
    shortcut: Option<ConvBn>,
    pub attention: Option<ChannelAttention>,
    sources: Option<BridgeSourceConfig>,
    pub bypass_attention: bool,
}

impl ConvBlock {
    /// `prev_out` is the predecessor's output width, needed only when the
    /// bridge taps the previous block.
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, spec: ConvBlockSpec, prev_out: Option<usize>) -> Result<Self> {
        if spec.in_channels == 0 || spec.width == 0 || spec.stride == 0 {
            return Err(Error::config("block widths and stride must be positive"));
        }
        let cin = spec.in_channels;
        let w = spec.width;
        let stages = match spec.kind {
            ConvBlockKind::Basic => vec![
                ConvBn::new(store, &format!("{name}.c1"), cin, w, 3, spec.stride),
                ConvBn::new(store, &format!("{name}.c2"), w, w, 3, 1),
            ],
            ConvBlockKind::Bottleneck => vec![
                ConvBn::new(store, &format!("{name}.c1"), cin, w, 1, 1),
                ConvBn::new(store, &format!("{name}.c2"), w, w, 3, spec.stride),
                ConvBn::new(store, &format!("{name}.c3"), w, spec.out_channels(), 1, 1),
            ],
        };
        let shortcut = spec
            .has_downsample()
            .then(|| ConvBn::new(store, &format!("{name}.down"), cin, spec.out_channels(), 1, spec.stride));
        let sources = spec.resolved_sources();
        let attention = match &spec.attention {
            Some(cfg) => {
                let widths = spec.tap_widths(prev_out)?;
                Some(ChannelAttention::new(store, &format!("{name}.attn"), cfg, &widths, spec.out_channels())?)
            }
            None => None,
        };
        Ok(Self {
            spec,
            stages,
            shortcut,
            attention,
            sources,
            bypass_attention: false,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.spec.out_channels()
    }

    pub fn sources(&self) -> Option<&BridgeSourceConfig> {
        self.sources.as_ref()
    }

    pub fn forward<T: Real>(
        &self,
        sess: &mut Session<'_, T>,
        x: NodeId,
        prev: Option<&BlockTrace>,
    ) -> Result<(NodeId, BlockTrace)> {
        let in_c = sess.graph.shape(x).get(1).copied().unwrap_or(0);
        if in_c != self.spec.in_channels {
            return Err(Error::shape(format!(
                "block expects {} input channels, got {in_c}",
                self.spec.in_channels
            )));
        }
        let last = self.stages.len() - 1;
        let mut maps = Vec::with_capacity(self.stages.len());
        let mut h = x;
        for (i, stage) in self.stages.iter().enumerate() {
            h = stage.forward(sess, h)?;
            if i != last {
                h = sess.graph.relu(h)?;
            }
            maps.push(h);
        }
        let mut trace = BlockTrace {
            conv1: maps[0],
            conv2: (self.spec.kind == ConvBlockKind::Bottleneck).then(|| maps[1]),
            adjacent: maps[last],
            end: maps[last],
            attention: None,
            out_channels: self.out_channels(),
        };
        let mut residual = maps[last];
        if let (Some(attn), Some(sources)) = (&self.attention, &self.sources) {
            let taps = bridge_tap(&mut sess.graph, &trace, prev, sources)?;
            let out = attn.forward(sess, &taps)?;
            let omega = if self.bypass_attention {
                let shape = sess.graph.shape(out.omega).to_vec();
                sess.input(Tensor::ones(&shape))?
            } else {
                out.omega
            };
            residual = sess.graph.channel_scale(residual, omega)?;
            trace.attention = Some(out);
        }
        let shortcut = match &self.shortcut {
            Some(sc) => sc.forward(sess, x)?,
            None => x,
        };
        let sum = sess.graph.add(residual, shortcut)?;
        let y = sess.graph.relu(sum)?;
        trace.end = y;
        Ok((y, trace))
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.backbone_params();
        if let Some(a) = &self.attention {
            v.extend(a.params());
        }
        v
    }

    /// Everything except the attention module.
    pub fn backbone_params(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = self.stages.iter().flat_map(|s| s.params()).collect();
        if let Some(sc) = &self.shortcut {
            v.extend(sc.params());
        }
        v
    }

    /// Conv and BN of stage `i` (0-based), for tests that pin weights.
    pub fn stage_params(&self, i: usize) -> (ParamId, ParamId, ParamId) {
        let s = &self.stages[i];
        (s.conv.weight, s.bn.gamma, s.bn.beta)
    }
}
