//! Training, evaluation and checkpoints for the toy models.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{PoolingStrategy, Variant};
use crate::blocks::{BridgeSourceConfig, Integration};
use crate::error::{Error, Result};
use crate::harness::data::{load_cifar10, synth_dataset, Dataset};
use crate::harness::models::{attention_config, ModelConfig, ModelKind, ToyModel};
use crate::harness::optim::{Optimizer, OptimizerKind};
use crate::param::{Mode, ParamStore, Session};
use crate::tensor::Real;

/// Selects 32- or 64-bit training.
pub const PRECISION_ENV: &str = "BRIDGE_ATTN_PRECISION";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    /// Reads [`PRECISION_ENV`], falling back to `default` when unset.
    pub fn from_env(default: Precision) -> Result<Self> {
        match std::env::var(PRECISION_ENV) {
            Err(_) => Ok(default),
            Ok(v) => match v.trim() {
                "f32" | "32" => Ok(Precision::F32),
                "f64" | "64" => Ok(Precision::F64),
                other => Err(Error::config(format!("{PRECISION_ENV} must be f32 or f64, got {other:?}"))),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Synthetic,
    Cifar10,
}

mod variant_or_none {
    use serde::{Deserialize, Deserializer, Serializer};

    use crate::attention::{parse_optional_variant, Variant};

    pub fn serialize<S: Serializer>(v: &Option<Variant>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(v) => s.serialize_str(&v.to_string()),
            None => s.serialize_str("none"),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Variant>, D::Error> {
        let s = String::deserialize(d)?;
        parse_optional_variant(&s).map_err(serde::de::Error::custom)
    }
}

/// Flat training configuration; JSON files use these field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub blocks: usize,
    #[serde(with = "variant_or_none")]
    pub attention: Option<Variant>,
    pub r: usize,
    pub pooling: PoolingStrategy,
    pub sources: Option<BridgeSourceConfig>,
    pub integration: Integration,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub dataset: DatasetKind,
    /// CIFAR-10 training batch file or directory.
    pub data_path: Option<PathBuf>,
    /// CIFAR-10 evaluation batch file; synthetic runs draw a fresh set.
    pub eval_path: Option<PathBuf>,
    pub samples: usize,
    pub classes: usize,
    pub image_size: usize,
    pub bypass_attention: bool,
    /// Ends training after the first epoch whose train accuracy reaches this.
    pub stop_at_acc: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::ToyConv,
            blocks: 2,
            attention: Some(Variant::Bav2),
            r: 4,
            pooling: PoolingStrategy::avg(),
            sources: None,
            integration: Integration::BaMlp,
            optimizer: OptimizerKind::Sgd,
            lr: 0.01,
            epochs: 50,
            batch_size: 32,
            seed: 0,
            dataset: DatasetKind::Synthetic,
            data_path: None,
            eval_path: None,
            samples: 256,
            classes: 4,
            image_size: 16,
            bypass_attention: false,
            stop_at_acc: None,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config("batch size must be at least 2 while batch norm trains"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config(format!("learning rate must be finite and non-negative, got {}", self.lr)));
        }
        if let Some(t) = self.stop_at_acc {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::config(format!("stop_at_acc must lie in (0, 1], got {t}")));
            }
        }
        if self.dataset == DatasetKind::Cifar10 && self.data_path.is_none() {
            return Err(Error::config("cifar10 runs need data_path"));
        }
        if self.model == ModelKind::ToyTransformer && self.attention.is_none() && self.integration != Integration::None {
            return Err(Error::config(format!("integration {} needs an attention variant", self.integration)));
        }
        if self.model == ModelKind::ToyTransformer && !self.image_size.is_multiple_of(crate::harness::models::PATCH) {
            return Err(Error::config("transformer inputs must be a multiple of the 8-pixel patch"));
        }
        Ok(())
    }

    pub fn model_config(&self, classes: usize) -> ModelConfig {
        let attention = attention_config(self.attention, self.r, self.pooling, self.sources.clone());
        match self.model {
            ModelKind::ToyConv => ModelConfig::toy_conv(self.blocks, attention, classes),
            ModelKind::Toy4 => ModelConfig::toy4(attention, classes),
            ModelKind::ToyTransformer => {
                let integration = if attention.is_none() { Integration::None } else { self.integration };
                ModelConfig::toy_transformer(integration, attention, classes)
            }
        }
    }

    /// Training and evaluation sets.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        match self.dataset {
            DatasetKind::Synthetic => Ok((
                synth_dataset(self.seed, self.samples, self.classes, self.image_size)?,
                synth_dataset(self.seed.wrapping_add(1), self.samples, self.classes, self.image_size)?,
            )),
            DatasetKind::Cifar10 => {
                let path = self.data_path.as_ref().ok_or_else(|| Error::config("cifar10 runs need data_path"))?;
                let train = load_cifar10(path)?;
                let eval = match &self.eval_path {
                    Some(p) => load_cifar10(p)?,
                    None => train.clone(),
                };
                Ok((train, eval))
            }
        }
    }

    /// A model with freshly initialized parameters.
    pub fn build<T: Real>(&self, classes: usize) -> Result<(ToyModel, ParamStore<T>)> {
        let mut store = ParamStore::new(self.seed);
        let mut model = ToyModel::new(&mut store, &self.model_config(classes))?;
        model.set_bypass(self.bypass_attention);
        Ok((model, store))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub acc: f64,
}

/// `epoch,loss,acc` lines with a header.
pub fn metrics_csv(log: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,loss,acc\n");
    for m in log {
        out.push_str(&format!("{},{:.6},{:.4}\n", m.epoch, m.loss, m.acc));
    }
    out
}

#[derive(Debug, Clone)]
pub struct Trained<T> {
    pub model: ToyModel,
    pub store: ParamStore<T>,
    pub classes: usize,
    pub log: Vec<EpochMetrics>,
    pub eval_acc: f64,
}

/// Splits a shuffled index list into batches, folding a trailing
/// single sample into the previous batch so batch norm can train.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let n = order.len();
        out.pop();
        let start = (out.len() - 1) * size;
        *out.last_mut().expect("at least one batch") = &order[start..n];
    }
    out
}

fn argmax<T: Real>(row: &[T]) -> usize {
    // strict comparison keeps the lowest index on ties
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Argmax class per row of `[N, K]` logits.
pub fn predictions<T: Real>(logits: &[T], classes: usize) -> Vec<usize> {
    logits.chunks(classes).map(argmax).collect()
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged { epoch, loss: f64::NAN },
        other => other,
    }
}

pub fn train<T: Real>(cfg: &TrainConfig) -> Result<Trained<T>> {
    cfg.validate()?;
    let (train_set, eval_set) = cfg.datasets()?;
    train_on(cfg, &train_set, &eval_set)
}

pub fn train_on<T: Real>(cfg: &TrainConfig, train_set: &Dataset, eval_set: &Dataset) -> Result<Trained<T>> {
    cfg.validate()?;
    let (model, mut store) = cfg.build::<T>(train_set.classes())?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0);
        for idx in batches(&order, cfg.batch_size) {
            let (images, labels) = train_set.batch::<T>(idx);
            let mut sess = Session::new(&mut store, Mode::Train);
            let step = (|| -> Result<_> {
                let x = sess.input(images)?;
                let out = model.forward(&mut sess, x)?;
                let loss = sess.graph.cross_entropy(out.logits, &labels)?;
                sess.graph.backward(loss)?;
                Ok((out.logits, loss))
            })();
            let (logits, loss) = step.map_err(|e| diverged(epoch, e))?;
            let l = sess.value(loss).item().f64();
            if !l.is_finite() {
                return Err(Error::Diverged { epoch, loss: l });
            }
            loss_sum += l * idx.len() as f64;
            let preds = predictions(sess.value(logits).data(), train_set.classes());
            correct += preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
            let grads = sess.param_grads();
            drop(sess);
            opt.step(&mut store, &grads)?;
        }
        let n = train_set.len() as f64;
        let acc = correct as f64 / n;
        log.push(EpochMetrics {
            epoch,
            loss: loss_sum / n,
            acc,
        });
        if cfg.stop_at_acc.is_some_and(|t| acc >= t) {
            break;
        }
    }
    let eval_acc = evaluate(&model, &mut store, eval_set, cfg.batch_size.max(64))?;
    Ok(Trained {
        model,
        store,
        classes: train_set.classes(),
        log,
        eval_acc,
    })
}

/// Top-1 accuracy in eval mode; ties go to the lowest class index.
pub fn evaluate<T: Real>(model: &ToyModel, store: &mut ParamStore<T>, data: &Dataset, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::config("cannot evaluate on an empty dataset"));
    }
    let order: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0;
    for idx in order.chunks(batch_size.max(1)) {
        let (images, labels) = data.batch::<T>(idx);
        let mut sess = Session::new(store, Mode::Eval);
        let x = sess.input(images)?;
        let out = model.forward(&mut sess, x)?;
        let preds = predictions(sess.value(out.logits).data(), data.classes());
        correct += preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// A trained model's configuration and weights, stored at 64-bit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub classes: usize,
    pub store: ParamStore<f64>,
}

impl Checkpoint {
    pub fn new<T: Real>(config: &TrainConfig, classes: usize, store: &ParamStore<T>) -> Self {
        Self {
            config: config.clone(),
            classes,
            store: store.cast(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// Rebuilds the model and checks the stored weights fit it.
    pub fn restore(&self) -> Result<(ToyModel, ParamStore<f64>)> {
        let (model, fresh) = self.config.build::<f64>(self.classes)?;
        let fits = fresh.len() == self.store.len()
            && fresh.iter().zip(self.store.iter()).all(|((_, a), (_, b))| a.name == b.name && a.value.shape() == b.value.shape());
        if !fits {
            return Err(Error::Format("checkpoint weights do not match its configuration".into()));
        }
        Ok((model, self.store.clone()))
    }
}
