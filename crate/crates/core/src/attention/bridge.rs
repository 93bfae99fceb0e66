//! Bridge attention (BAv1 / BAv2).
//!
//! Each tapped layer `X_i` is pooled and projected by its own `W_{1,i}`
//! to the shared width `C_n/r`, giving `S_i`. BAv1 normalizes every
//! `S_i` with its own batch norm and sums them. BAv2 replaces that with
//! `n` learnable scalars, `S = Σ f_i S_i`, and moves a single batch norm
//! into the generation step: `ω = σ(W2 · ReLU(BN(S)))`.

use serde::{Deserialize, Serialize};

use crate::attention::{reduced_width, AttentionOutput, PoolingStrategy};
use crate::autodiff::NodeId;
use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Linear};
use crate::param::{ParamId, ParamRole, ParamStore, Session};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BridgeVariant {
    V1,
    V2,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BridgeModule {
    pub variant: BridgeVariant,
    /// `W_{1,i}: [C_n/r, k·C_i]`, one per branch.
    pub branch_proj: Vec<Linear>,
    /// BAv2 fusion scalars `f: [n]`.
    pub fusion: Option<ParamId>,
    /// BAv1 per-branch batch norms over `C_n/r`.
    pub branch_bn: Vec<BatchNorm>,
    /// BAv2 generation batch norm over `C_n/r`.
    pub gen_bn: Option<BatchNorm>,
    pub w2: Linear,
    pub branch_widths: Vec<usize>,
    pub out_channels: usize,
    pub reduction: usize,
    pub pooling: PoolingStrategy,
}

impl BridgeModule {
    /// `branch_widths` lists `C_i` for every tap in order; `out_channels`
    /// is `C_n`, the width of the rescaled layer.
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        branch_widths: &[usize],
        out_channels: usize,
        reduction: usize,
        variant: BridgeVariant,
        pooling: PoolingStrategy,
    ) -> Result<Self> {
        if branch_widths.is_empty() {
            return Err(Error::config("bridge attention needs at least one branch"));
        }
        let fused = reduced_width(out_channels, reduction)?;
        let stats = pooling.stats_per_channel();
        let n = branch_widths.len();
        let branch_proj = branch_widths
            .iter()
            .enumerate()
            .map(|(i, &c)| Linear::with_role(store, &format!("{name}.w1_{}", i + 1), stats * c, fused, false, ParamRole::Projection))
            .collect();
        let (fusion, branch_bn, gen_bn) = match variant {
            BridgeVariant::V1 => {
                let bns = (0..n).map(|i| BatchNorm::new(store, &format!("{name}.bn_{}", i + 1), fused)).collect();
                (None, bns, None)
            }
            BridgeVariant::V2 => {
                let f = store.add(
                    format!("{name}.fusion"),
                    ParamRole::Fusion,
                    Tensor::full(&[n], T::one() / T::of(n as f64)),
                );
                (Some(f), Vec::new(), Some(BatchNorm::new(store, &format!("{name}.gen_bn"), fused)))
            }
        };
        let w2 = Linear::with_role(store, &format!("{name}.w2"), fused, out_channels, false, ParamRole::Expansion);
        Ok(Self {
            variant,
            branch_proj,
            fusion,
            branch_bn,
            gen_bn,
            w2,
            branch_widths: branch_widths.to_vec(),
            out_channels,
            reduction,
            pooling,
        })
    }

    pub fn branches(&self) -> usize {
        self.branch_proj.len()
    }

    pub fn fused_width(&self) -> usize {
        self.out_channels / self.reduction
    }

    /// Integration from spatial maps: pool, project, fuse.
    pub fn integrate<T: Real>(&self, sess: &mut Session<'_, T>, taps: &[NodeId]) -> Result<(Vec<NodeId>, NodeId)> {
        self.check_branches(taps.len())?;
        let pooled = taps
            .iter()
            .map(|&x| self.pooling.pool(&mut sess.graph, x))
            .collect::<Result<Vec<_>>>()?;
        self.integrate_pooled(sess, &pooled)
    }

    /// Integration from pooled statistics `[N, k·C_i]`.
    pub fn integrate_pooled<T: Real>(&self, sess: &mut Session<'_, T>, pooled: &[NodeId]) -> Result<(Vec<NodeId>, NodeId)> {
        self.check_branches(pooled.len())?;
        let squeezed = self
            .branch_proj
            .iter()
            .zip(pooled)
            .map(|(w1, &z)| w1.forward(sess, z))
            .collect::<Result<Vec<_>>>()?;
        let fused = match self.variant {
            BridgeVariant::V2 => {
                let f = sess.param(self.fusion.expect("v2 has fusion weights"))?;
                sess.graph.fuse(f, &squeezed)?
            }
            BridgeVariant::V1 => {
                let mut acc: Option<NodeId> = None;
                for (bn, &s) in self.branch_bn.iter().zip(&squeezed) {
                    let y = bn.forward(sess, s)?;
                    acc = Some(match acc {
                        None => y,
                        Some(a) => sess.graph.add(a, y)?,
                    });
                }
                acc.expect("at least one branch")
            }
        };
        Ok((squeezed, fused))
    }

    /// Generation: `σ(W2 · ReLU(BN(S)))` for BAv2, `σ(W2 · ReLU(S))` for BAv1.
    pub fn generate<T: Real>(&self, sess: &mut Session<'_, T>, fused: NodeId) -> Result<NodeId> {
        let width = sess.graph.shape(fused).get(1).copied().unwrap_or(0);
        if width != self.fused_width() {
            return Err(Error::shape(format!(
                "integrated feature has width {width}, expected {}",
                self.fused_width()
            )));
        }
        let s = match &self.gen_bn {
            Some(bn) => bn.forward(sess, fused)?,
            None => fused,
        };
        let h = sess.graph.relu(s)?;
        let logits = self.w2.forward(sess, h)?;
        sess.graph.sigmoid(logits)
    }

    pub fn forward<T: Real>(&self, sess: &mut Session<'_, T>, taps: &[NodeId]) -> Result<AttentionOutput> {
        let (squeezed, fused) = self.integrate(sess, taps)?;
        let omega = self.generate(sess, fused)?;
        Ok(AttentionOutput { squeezed, fused, omega })
    }

    pub fn forward_pooled<T: Real>(&self, sess: &mut Session<'_, T>, pooled: &[NodeId]) -> Result<AttentionOutput> {
        let (squeezed, fused) = self.integrate_pooled(sess, pooled)?;
        let omega = self.generate(sess, fused)?;
        Ok(AttentionOutput { squeezed, fused, omega })
    }

    fn check_branches(&self, got: usize) -> Result<()> {
        if got != self.branches() {
            return Err(Error::config(format!(
                "bridge attention has {} branches but received {got} inputs",
                self.branches()
            )));
        }
        Ok(())
    }

    pub fn freeze_norms_identity(&mut self) {
        for bn in self.branch_bn.iter_mut().chain(self.gen_bn.as_mut()) {
            bn.identity = true;
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v: Vec<ParamId> = self.branch_proj.iter().flat_map(|l| l.params()).collect();
        v.extend(self.fusion);
        for bn in &self.branch_bn {
            v.extend(bn.params());
        }
        if let Some(bn) = &self.gen_bn {
            v.extend(bn.params());
        }
        v.extend(self.w2.params());
        v
    }
}
