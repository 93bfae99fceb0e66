//! Desk-scale models: a small residual conv net and a two-block
//! transformer over 8×8 patches.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, AttentionOutput, PoolingStrategy, Variant};
use crate::autodiff::NodeId;
use crate::blocks::{BridgeSourceConfig, ConvBlock, ConvBlockKind, ConvBlockSpec, Integration, TransformerBlock, TransformerBlockSpec, TransformerStage};
use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Conv2d, LayerNorm, Linear};
use crate::param::{ParamId, ParamStore, Session};
use crate::tensor::Real;

pub const PATCH: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Stem, 2 to 4 residual blocks, pooled linear head.
    ToyConv,
    /// `ToyConv` fixed at four bottleneck blocks.
    Toy4,
    ToyTransformer,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::ToyConv => "toy_conv",
            ModelKind::Toy4 => "toy4",
            ModelKind::ToyTransformer => "toy_transformer",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy_conv" | "toy" => Ok(ModelKind::ToyConv),
            "toy4" => Ok(ModelKind::Toy4),
            "toy_transformer" | "transformer" => Ok(ModelKind::ToyTransformer),
            other => Err(Error::config(format!("unknown model {other:?}"))),
        }
    }
}

/// Architecture knobs shared by both toy families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Residual blocks of the conv net (ignored by `toy4` and the transformer).
    pub blocks: usize,
    pub block_kind: ConvBlockKind,
    pub stem_channels: usize,
    /// Bottleneck mid width, or the basic block width.
    pub width: usize,
    pub dim: usize,
    pub heads: usize,
    pub attention: Option<AttentionConfig>,
    /// Transformer placement of the attention.
    pub integration: Integration,
    pub classes: usize,
}

impl ModelConfig {
    pub fn toy_conv(blocks: usize, attention: Option<AttentionConfig>, classes: usize) -> Self {
        Self {
            kind: ModelKind::ToyConv,
            blocks,
            block_kind: ConvBlockKind::Bottleneck,
            stem_channels: 16,
            width: 8,
            dim: 32,
            heads: 2,
            attention,
            integration: Integration::None,
            classes,
        }
    }

    pub fn toy4(attention: Option<AttentionConfig>, classes: usize) -> Self {
        Self {
            kind: ModelKind::Toy4,
            blocks: 4,
            ..Self::toy_conv(4, attention, classes)
        }
    }

    pub fn toy_transformer(integration: Integration, attention: Option<AttentionConfig>, classes: usize) -> Self {
        Self {
            kind: ModelKind::ToyTransformer,
            integration,
            ..Self::toy_conv(2, attention, classes)
        }
    }
}

/// Logits plus the attention evaluations of every block that has one.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub logits: NodeId,
    pub attention: Vec<AttentionOutput>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyConvNet {
    stem: Conv2d,
    stem_bn: BatchNorm,
    pub blocks: Vec<ConvBlock>,
    head: Linear,
}

impl ToyConvNet {
    /// Blocks at odd positions halve the resolution. A bridge config that
    /// needs a predecessor is applied from the second block on; the first
    /// block taps its own convs.
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &ModelConfig) -> Result<Self> {
        let count = match cfg.kind {
            ModelKind::Toy4 => 4,
            _ => cfg.blocks,
        };
        if !(2..=4).contains(&count) {
            return Err(Error::config(format!("the toy conv net has 2 to 4 blocks, got {count}")));
        }
        let stem = Conv2d::new(store, "stem.conv", 3, cfg.stem_channels, 3, 1, 1);
        let stem_bn = BatchNorm::new(store, "stem.bn", cfg.stem_channels);
        let mut blocks = Vec::with_capacity(count);
        let mut cin = cfg.stem_channels;
        let mut prev_out = None;
        for i in 0..count {
            let mut spec = ConvBlockSpec::new(cfg.block_kind, cin, cfg.width, if i % 2 == 1 { 2 } else { 1 });
            if let Some(a) = &cfg.attention {
                let mut a = a.clone();
                if i == 0 && a.sources.as_ref().is_some_and(BridgeSourceConfig::needs_predecessor) {
                    a.sources = None;
                }
                spec = spec.with_attention(a);
            }
            let block = ConvBlock::new(store, &format!("block{i}"), spec, prev_out)?;
            cin = block.out_channels();
            prev_out = Some(cin);
            blocks.push(block);
        }
        let head = Linear::new(store, "head", cin, cfg.classes, true);
        Ok(Self { stem, stem_bn, blocks, head })
    }

    pub fn forward<T: Real>(&self, sess: &mut Session<'_, T>, x: NodeId) -> Result<ModelOutput> {
        let h = self.stem.forward(sess, x)?;
        let h = self.stem_bn.forward(sess, h)?;
        let mut h = sess.graph.relu(h)?;
        let mut prev = None;
        let mut attention = Vec::new();
        for block in &self.blocks {
            let (y, trace) = block.forward(sess, h, prev.as_ref())?;
            if let Some(a) = &trace.attention {
                attention.push(a.clone());
            }
            h = y;
            prev = Some(trace);
        }
        let pooled = sess.graph.gap(h)?;
        let logits = self.head.forward(sess, pooled)?;
        Ok(ModelOutput { logits, attention })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.stem.params();
        v.extend(self.stem_bn.params());
        for b in &self.blocks {
            v.extend(b.params());
        }
        v.extend(self.head.params());
        v
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
enum TransformerBody {
    Blocks(Vec<TransformerBlock>),
    Stage(TransformerStage),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyTransformer {
    patch: Conv2d,
    body: TransformerBody,
    norm: LayerNorm,
    head: Linear,
}

impl ToyTransformer {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &ModelConfig) -> Result<Self> {
        let patch = Conv2d::new(store, "patch", 3, cfg.dim, PATCH, PATCH, 0);
        let body = match cfg.integration {
            Integration::BaStage => {
                let a = cfg.attention.as_ref().ok_or_else(|| Error::config("ba_stage needs an attention config"))?;
                TransformerBody::Stage(TransformerStage::new(store, "stage", cfg.dim, cfg.heads, Some(a))?)
            }
            integration => {
                let blocks = (0..2)
                    .map(|i| {
                        let spec = match (integration, &cfg.attention) {
                            (Integration::None, _) => TransformerBlockSpec::new(cfg.dim, cfg.heads),
                            (i, Some(a)) => TransformerBlockSpec::new(cfg.dim, cfg.heads).with_integration(i, a.clone()),
                            (i, None) => return Err(Error::config(format!("{i} needs an attention config"))),
                        };
                        TransformerBlock::new(store, &format!("block{i}"), spec)
                    })
                    .collect::<Result<Vec<_>>>()?;
                TransformerBody::Blocks(blocks)
            }
        };
        let norm = LayerNorm::new(store, "norm", cfg.dim);
        let head = Linear::new(store, "head", cfg.dim, cfg.classes, true);
        Ok(Self { patch, body, norm, head })
    }

    pub fn forward<T: Real>(&self, sess: &mut Session<'_, T>, x: NodeId) -> Result<ModelOutput> {
        let p = self.patch.forward(sess, x)?;
        let (n, d, h, w) = match sess.graph.shape(p) {
            [n, d, h, w] => (*n, *d, *h, *w),
            s => return Err(Error::shape(format!("patch embedding produced {s:?}"))),
        };
        let flat = sess.graph.reshape(p, &[n, d, h * w])?;
        let mut tokens = sess.graph.permute(flat, &[0, 2, 1])?;
        let mut attention = Vec::new();
        match &self.body {
            TransformerBody::Blocks(blocks) => {
                for b in blocks {
                    let (y, trace) = b.forward(sess, tokens)?;
                    attention.extend(trace.attention);
                    tokens = y;
                }
            }
            TransformerBody::Stage(stage) => {
                let (y, a) = stage.forward(sess, tokens)?;
                attention.extend(a);
                tokens = y;
            }
        }
        let normed = self.norm.forward(sess, tokens)?;
        let pooled = sess.graph.token_mean(normed)?;
        let logits = self.head.forward(sess, pooled)?;
        Ok(ModelOutput { logits, attention })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.patch.params();
        match &self.body {
            TransformerBody::Blocks(b) => b.iter().for_each(|b| v.extend(b.params())),
            TransformerBody::Stage(s) => v.extend(s.params()),
        }
        v.extend(self.norm.params());
        v.extend(self.head.params());
        v
    }

    pub fn null_gradient_params(&self) -> Vec<ParamId> {
        match &self.body {
            TransformerBody::Blocks(b) => b.iter().flat_map(|b| b.null_gradient_params()).collect(),
            TransformerBody::Stage(s) => s.null_gradient_params(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum ToyModel {
    Conv(ToyConvNet),
    Transformer(ToyTransformer),
}

impl ToyModel {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &ModelConfig) -> Result<Self> {
        Ok(match cfg.kind {
            ModelKind::ToyConv | ModelKind::Toy4 => ToyModel::Conv(ToyConvNet::new(store, cfg)?),
            ModelKind::ToyTransformer => ToyModel::Transformer(ToyTransformer::new(store, cfg)?),
        })
    }

    pub fn forward<T: Real>(&self, sess: &mut Session<'_, T>, x: NodeId) -> Result<ModelOutput> {
        match self {
            ToyModel::Conv(m) => m.forward(sess, x),
            ToyModel::Transformer(m) => m.forward(sess, x),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        match self {
            ToyModel::Conv(m) => m.params(),
            ToyModel::Transformer(m) => m.params(),
        }
    }

    /// Parameters whose gradient is identically zero by construction.
    pub fn null_gradient_params(&self) -> Vec<ParamId> {
        match self {
            ToyModel::Conv(_) => Vec::new(),
            ToyModel::Transformer(m) => m.null_gradient_params(),
        }
    }

    /// Forces `ω ≡ 1` in every attention module.
    pub fn set_bypass(&mut self, on: bool) {
        match self {
            ToyModel::Conv(m) => m.blocks.iter_mut().for_each(|b| b.bypass_attention = on),
            ToyModel::Transformer(m) => match &mut m.body {
                TransformerBody::Blocks(b) => b.iter_mut().for_each(|b| b.bypass_attention = on),
                TransformerBody::Stage(s) => s.bypass_attention = on,
            },
        }
    }
}

/// Attention config from the flat knobs of a training config.
pub fn attention_config(variant: Option<Variant>, reduction: usize, pooling: PoolingStrategy, sources: Option<BridgeSourceConfig>) -> Option<AttentionConfig> {
    variant.map(|v| AttentionConfig {
        variant: v,
        reduction,
        pooling,
        sources,
    })
}
