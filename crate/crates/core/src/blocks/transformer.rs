//! Pre-norm transformer blocks with channel attention in the MLP path.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, AttentionOutput, ChannelAttention, Variant};
use crate::autodiff::nn::{mhsa, token_linear, MhsaNodes};
use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::layers::LayerNorm;
use crate::param::{ParamId, ParamRole, ParamStore, Session};
use crate::tensor::{Real, Tensor};

/// Where attention sits in (or around) a transformer block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integration {
    None,
    /// Bridge over FC1 and FC2, rescaling FC2.
    BaMlp,
    /// SE on FC2 only.
    SeMlp,
    /// Bridge over the attention sublayer and the MLP output.
    BaBlock,
    /// Bridge over two consecutive blocks; lives in [`TransformerStage`].
    BaStage,
}

impl Integration {
    pub const ALL: [Integration; 5] = [
        Integration::None,
        Integration::BaMlp,
        Integration::SeMlp,
        Integration::BaBlock,
        Integration::BaStage,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Integration::None => "none",
            Integration::BaMlp => "ba_mlp",
            Integration::SeMlp => "se_mlp",
            Integration::BaBlock => "ba_block",
            Integration::BaStage => "ba_stage",
        }
    }
}

impl fmt::Display for Integration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Integration {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Integration::ALL
            .into_iter()
            .find(|i| i.label() == s)
            .ok_or_else(|| Error::config(format!("unknown transformer integration {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerBlockSpec {
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub integration: Integration,
    pub attention: Option<AttentionConfig>,
}

impl TransformerBlockSpec {
    pub fn new(dim: usize, heads: usize) -> Self {
        Self {
            dim,
            heads,
            mlp_ratio: 4,
            integration: Integration::None,
            attention: None,
        }
    }

    pub fn with_integration(mut self, integration: Integration, attention: AttentionConfig) -> Self {
        self.integration = integration;
        self.attention = Some(attention);
        self
    }

    pub fn hidden(&self) -> usize {
        self.mlp_ratio * self.dim
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "width {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::config("mlp ratio must be positive"));
        }
        match (self.integration, &self.attention) {
            (Integration::BaStage, _) => Err(Error::config(
                "ba_stage pairs two blocks; build it with TransformerStage",
            )),
            (Integration::None, Some(_)) => Err(Error::config("attention config given without an integration")),
            (Integration::None, None) => Ok(()),
            (_, None) => Err(Error::config(format!("integration {} needs an attention config", self.integration))),
            (_, Some(_)) => Ok(()),
        }
    }
}

/// Multi-head self-attention with biased `[D, D]` projections.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mhsa {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub heads: usize,
}

impl Mhsa {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize, heads: usize) -> Self {
        let mut proj = |p: &str| {
            let w = store.add_uniform(format!("{name}.{p}.weight"), ParamRole::LinearWeight, &[dim, dim], dim);
            let b = store.add_uniform(format!("{name}.{p}.bias"), ParamRole::LinearBias, &[dim], dim);
            (w, b)
        };
        let (wq, bq) = proj("q");
        let (wk, bk) = proj("k");
        let (wv, bv) = proj("v");
        let (wo, bo) = proj("o");
        Self {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            heads,
        }
    }

    pub fn forward<T: Real>(&self, sess: &mut Session<'_, T>, x: NodeId) -> Result<NodeId> {
        let nodes = MhsaNodes {
            wq: sess.param(self.wq)?,
            bq: sess.param(self.bq)?,
            wk: sess.param(self.wk)?,
            bk: sess.param(self.bk)?,
            wv: sess.param(self.wv)?,
            bv: sess.param(self.bv)?,
            wo: sess.param(self.wo)?,
            bo: sess.param(self.bo)?,
        };
        mhsa(&mut sess.graph, x, &nodes, self.heads)
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo]
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TokenLinear {
    weight: ParamId,
    bias: ParamId,
}

impl TokenLinear {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, din: usize, dout: usize) -> Self {
        Self {
            weight: store.add_uniform(format!("{name}.weight"), ParamRole::LinearWeight, &[dout, din], din),
            bias: store.add_uniform(format!("{name}.bias"), ParamRole::LinearBias, &[dout], din),
        }
    }

    fn forward<T: Real>(&self, sess: &mut Session<'_, T>, x: NodeId) -> Result<NodeId> {
        let w = sess.param(self.weight)?;
        let b = sess.param(self.bias)?;
        token_linear(&mut sess.graph, x, w, Some(b))
    }
}

/// Views `[N, T, D]` as a `[N, D, T, 1]` map so channel pooling runs
/// over tokens; average pooling then equals the token mean.
pub fn tokens_as_map<T: Real>(g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
    let (n, t, d) = match g.shape(x) {
        [n, t, d] => (*n, *t, *d),
        s => return Err(Error::shape(format!("expected [N,T,D] tokens, got {s:?}"))),
    };
    let p = g.permute(x, &[0, 2, 1])?;
    g.reshape(p, &[n, d, t, 1])
}

/// Intermediate tensors of one transformer block evaluation.
#[derive(Debug, Clone)]
pub struct TransformerTrace {
    /// `MHSA(LN(X))`, before the residual add.
    pub attn_out: NodeId,
    /// FC1 output after ReLU, `[N, T, 4D]`.
    pub fc1: NodeId,
    /// FC2 output before rescaling.
    pub fc2: NodeId,
    pub end: NodeId,
    pub attention: Option<AttentionOutput>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformerBlock {
    pub spec: TransformerBlockSpec,
    ln1: LayerNorm,
    attn: Mhsa,
    ln2: LayerNorm,
    fc1: TokenLinear,
    fc2: TokenLinear,
    pub attention: Option<ChannelAttention>,
    pub bypass_attention: bool,
}

impl TransformerBlock {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, spec: TransformerBlockSpec) -> Result<Self> {
        spec.validate()?;
        let d = spec.dim;
        let ln1 = LayerNorm::new(store, &format!("{name}.ln1"), d);
        let attn = Mhsa::new(store, &format!("{name}.mhsa"), d, spec.heads);
        let ln2 = LayerNorm::new(store, &format!("{name}.ln2"), d);
        let fc1 = TokenLinear::new(store, &format!("{name}.fc1"), d, spec.hidden());
        let fc2 = TokenLinear::new(store, &format!("{name}.fc2"), spec.hidden(), d);
        let attention = match (spec.integration, &spec.attention) {
            (Integration::None, _) | (_, None) => None,
            (integration, Some(cfg)) => {
                let (cfg, widths) = match integration {
                    Integration::BaMlp => (cfg.clone(), vec![spec.hidden(), d]),
                    Integration::BaBlock => (cfg.clone(), vec![d, d]),
                    _ => (
                        AttentionConfig {
                            variant: Variant::Se,
                            sources: None,
                            ..cfg.clone()
                        },
                        vec![d],
                    ),
                };
                Some(ChannelAttention::new(store, &format!("{name}.ca"), &cfg, &widths, d)?)
            }
        };
        Ok(Self {
            spec,
            ln1,
            attn,
            ln2,
            fc1,
            fc2,
            attention,
            bypass_attention: false,
        })
    }

    pub fn forward<T: Real>(&self, sess: &mut Session<'_, T>, x: NodeId) -> Result<(NodeId, TransformerTrace)> {
        match sess.graph.shape(x) {
            [_, _, d] if *d == self.spec.dim => {}
            s => {
                return Err(Error::shape(format!(
                    "transformer block expects [N,T,{}], got {s:?}",
                    self.spec.dim
                )))
            }
        }
        let h = self.ln1.forward(sess, x)?;
        let attn_out = self.attn.forward(sess, h)?;
        let x1 = sess.graph.add(x, attn_out)?;
        let h = self.ln2.forward(sess, x1)?;
        let h = self.fc1.forward(sess, h)?;
        let fc1 = sess.graph.relu(h)?;
        let fc2 = self.fc2.forward(sess, fc1)?;
        let mut mlp_out = fc2;
        let mut attention = None;
        if let Some(att) = &self.attention {
            let taps = match self.spec.integration {
                Integration::BaMlp => vec![fc1, fc2],
                Integration::BaBlock => vec![attn_out, fc2],
                _ => vec![fc2],
            };
            let maps = taps
                .into_iter()
                .map(|t| tokens_as_map(&mut sess.graph, t))
                .collect::<Result<Vec<_>>>()?;
            let out = att.forward(sess, &maps)?;
            let omega = if self.bypass_attention {
                let shape = sess.graph.shape(out.omega).to_vec();
                sess.input(Tensor::ones(&shape))?
            } else {
                out.omega
            };
            mlp_out = sess.graph.token_scale(fc2, omega)?;
            attention = Some(out);
        }
        let y = sess.graph.add(x1, mlp_out)?;
        Ok((
            y,
            TransformerTrace {
                attn_out,
                fc1,
                fc2,
                end: y,
                attention,
            },
        ))
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.backbone_params();
        if let Some(a) = &self.attention {
            v.extend(a.params());
        }
        v
    }

    /// Parameters whose gradient is identically zero by construction: the
    /// key bias shifts every score of a query equally, which softmax
    /// cancels.
    pub fn null_gradient_params(&self) -> Vec<ParamId> {
        vec![self.attn.bk]
    }

    pub fn backbone_params(&self) -> Vec<ParamId> {
        let mut v = self.ln1.params();
        v.extend(self.attn.params());
        v.extend(self.ln2.params());
        v.extend([self.fc1.weight, self.fc1.bias, self.fc2.weight, self.fc2.bias]);
        v
    }
}

/// Two plain transformer blocks with an optional bridge over their
/// outputs that rescales the second block's output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformerStage {
    pub blocks: [TransformerBlock; 2],
    pub attention: Option<ChannelAttention>,
    pub bypass_attention: bool,
}

impl TransformerStage {
    /// `attention` set builds the ba_stage variant.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        attention: Option<&AttentionConfig>,
    ) -> Result<Self> {
        let spec = TransformerBlockSpec::new(dim, heads);
        let b0 = TransformerBlock::new(store, &format!("{name}.0"), spec.clone())?;
        let b1 = TransformerBlock::new(store, &format!("{name}.1"), spec)?;
        let attention = attention
            .map(|cfg| ChannelAttention::new(store, &format!("{name}.ca"), cfg, &[dim, dim], dim))
            .transpose()?;
        Ok(Self {
            blocks: [b0, b1],
            attention,
            bypass_attention: false,
        })
    }

    pub fn forward<T: Real>(&self, sess: &mut Session<'_, T>, x: NodeId) -> Result<(NodeId, Option<AttentionOutput>)> {
        let (y0, _) = self.blocks[0].forward(sess, x)?;
        let (y1, _) = self.blocks[1].forward(sess, y0)?;
        let Some(att) = &self.attention else {
            return Ok((y1, None));
        };
        let m0 = tokens_as_map(&mut sess.graph, y0)?;
        let m1 = tokens_as_map(&mut sess.graph, y1)?;
        let out = att.forward(sess, &[m0, m1])?;
        let omega = if self.bypass_attention {
            let shape = sess.graph.shape(out.omega).to_vec();
            sess.input(Tensor::ones(&shape))?
        } else {
            out.omega
        };
        let y = sess.graph.token_scale(y1, omega)?;
        Ok((y, Some(out)))
    }

    pub fn null_gradient_params(&self) -> Vec<ParamId> {
        self.blocks.iter().flat_map(|b| b.null_gradient_params()).collect()
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = self.blocks.iter().flat_map(|b| b.params()).collect();
        if let Some(a) = &self.attention {
            v.extend(a.params());
        }
        v
    }
}
