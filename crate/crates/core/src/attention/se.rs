use serde::{Deserialize, Serialize};

use crate::attention::{reduced_width, AttentionOutput, PoolingStrategy};
use crate::autodiff::NodeId;
use crate::error::Result;
use crate::layers::Linear;
use crate::param::{ParamId, ParamRole, ParamStore, Session};
use crate::tensor::Real;

/// Squeeze-and-excitation: `ω = σ(W2 · ReLU(W1 · pool(X)))`, no biases.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeModule {
    pub w1: Linear,
    pub w2: Linear,
    pub channels: usize,
    pub reduction: usize,
    pub pooling: PoolingStrategy,
}

impl SeModule {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        reduction: usize,
        pooling: PoolingStrategy,
    ) -> Result<Self> {
        let hidden = reduced_width(channels, reduction)?;
        let stats = pooling.stats_per_channel();
        let w1 = Linear::with_role(store, &format!("{name}.w1"), stats * channels, hidden, false, ParamRole::Projection);
        let w2 = Linear::with_role(store, &format!("{name}.w2"), hidden, channels, false, ParamRole::Expansion);
        Ok(Self {
            w1,
            w2,
            channels,
            reduction,
            pooling,
        })
    }

    pub fn forward<T: Real>(&self, sess: &mut Session<'_, T>, x: NodeId) -> Result<NodeId> {
        Ok(self.forward_traced(sess, x)?.omega)
    }

    pub fn forward_traced<T: Real>(&self, sess: &mut Session<'_, T>, x: NodeId) -> Result<AttentionOutput> {
        let z = self.pooling.pool(&mut sess.graph, x)?;
        self.forward_from_pooled(sess, z)
    }

    pub fn forward_from_pooled<T: Real>(&self, sess: &mut Session<'_, T>, z: NodeId) -> Result<AttentionOutput> {
        let s = self.w1.forward(sess, z)?;
        let h = sess.graph.relu(s)?;
        let logits = self.w2.forward(sess, h)?;
        let omega = sess.graph.sigmoid(logits)?;
        Ok(AttentionOutput {
            squeezed: vec![s],
            fused: s,
            omega,
        })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.w1.params();
        v.extend(self.w2.params());
        v
    }
}
