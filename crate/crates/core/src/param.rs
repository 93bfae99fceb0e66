//! Parameter storage and the per-forward session that binds parameters
//! into a graph.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::Result;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BufferId(usize);

/// What a learnable tensor is for. Used by the counting code to
/// separate convention-dependent terms (BN affine, fusion scalars) from
/// weight matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamRole {
    ConvWeight,
    LinearWeight,
    LinearBias,
    NormGamma,
    NormBeta,
    /// Branch squeeze projection `W_{1,i}` (or SE's `W1`).
    Projection,
    /// Excitation matrix `W2`.
    Expansion,
    /// Scalar branch weights of the adaptive fusion.
    Fusion,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Param<T> {
    pub name: String,
    pub role: ParamRole,
    pub value: Tensor<T>,
}

/// Non-learnable batch-norm running statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Owns every parameter and buffer of a model, plus the seeded RNG used
/// to initialize them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    buffers: Vec<RunningStats<T>>,
    #[serde(skip, default = "default_rng")]
    rng: ChaCha8Rng,
}

fn default_rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0)
}

impl<T: Real> ParamStore<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            params: Vec::new(),
            buffers: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, role: ParamRole, value: Tensor<T>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            role,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    /// Fan-in scaled uniform initialization, bound `1/sqrt(fan_in)`.
    pub fn add_uniform(&mut self, name: impl Into<String>, role: ParamRole, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let value = Tensor::uniform(shape, bound, &mut self.rng);
        self.add(name, role, value)
    }

    pub fn add_buffer(&mut self, channels: usize) -> BufferId {
        self.buffers.push(RunningStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        });
        BufferId(self.buffers.len() - 1)
    }

    pub fn buffer_ids(&self) -> impl Iterator<Item = BufferId> {
        (0..self.buffers.len()).map(BufferId)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        self.params[id.0].value.expect_same_shape(&value)?;
        self.params[id.0].value = value;
        Ok(())
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn buffer(&self, id: BufferId) -> &RunningStats<T> {
        &self.buffers[id.0]
    }

    pub fn buffer_mut(&mut self, id: BufferId) -> &mut RunningStats<T> {
        &mut self.buffers[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of learnable scalars.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Copies values (and the matching buffers are left alone) for every
    /// parameter whose name and shape match one in `other`. Returns the
    /// number of tensors copied.
    pub fn copy_matching_from(&mut self, other: &ParamStore<T>) -> usize {
        let mut copied = 0;
        for p in &mut self.params {
            if let Some(q) = other.params.iter().find(|q| q.name == p.name) {
                if q.value.shape() == p.value.shape() {
                    p.value = q.value.clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    role: p.role,
                    value: p.value.cast(),
                })
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|b| RunningStats {
                    mean: b.mean.iter().map(|v| U::of(v.f64())).collect(),
                    var: b.var.iter().map(|v| U::of(v.f64())).collect(),
                })
                .collect(),
            rng: self.rng.clone(),
        }
    }
}

/// One forward pass: a fresh graph plus lazily bound parameter leaves.
pub struct Session<'a, T: Real> {
    pub graph: Graph<T>,
    store: &'a mut ParamStore<T>,
    bound: HashMap<ParamId, NodeId>,
    order: Vec<ParamId>,
    mode: Mode,
}

impl<'a, T: Real> Session<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, mode: Mode) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: HashMap::new(),
            order: Vec::new(),
            mode,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        self.store
    }

    /// Graph leaf for a parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Result<NodeId> {
        if let Some(&n) = self.bound.get(&id) {
            return Ok(n);
        }
        let node = self.graph.param(self.store.value(id).clone())?;
        self.bound.insert(id, node);
        self.order.push(id);
        Ok(node)
    }

    pub fn input(&mut self, value: Tensor<T>) -> Result<NodeId> {
        self.graph.constant(value)
    }

    /// An input leaf that receives gradients.
    pub fn input_var(&mut self, value: Tensor<T>) -> Result<NodeId> {
        self.graph.param(value)
    }

    /// Parameters bound so far, in first-use order.
    pub fn bound_params(&self) -> Vec<(ParamId, NodeId)> {
        self.order.iter().map(|id| (*id, self.bound[id])).collect()
    }

    pub fn param_grads(&self) -> Vec<(ParamId, Tensor<T>)> {
        self.order
            .iter()
            .filter_map(|id| {
                let node = self.bound[id];
                self.graph.grad(node).map(|g| (*id, g.clone()))
            })
            .collect()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        self.graph.value(id)
    }
}
