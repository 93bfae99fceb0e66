//! Toy-scale ablations over pooling, bridge sources and transformer
//! integration. Rows carry metrics only; no ordering is asserted.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, PoolingStrategy, Variant};
use crate::autodiff::{grad_check, GradCheckConfig, NodeId};
use crate::blocks::{BridgeSourceConfig, ConvBlock, ConvBlockKind, ConvBlockSpec, Integration};
use crate::error::Result;
use crate::harness::models::ModelKind;
use crate::harness::suites::{jitter_params, probe_loss, randomize_running_stats, CONV_PATH_THRESHOLD};
use crate::harness::train::{train, TrainConfig};
use crate::param::{Mode, ParamStore, Session};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRow {
    pub label: String,
    pub final_loss: f64,
    pub train_acc: f64,
    pub eval_acc: f64,
}

impl TrainRow {
    /// Finite loss and accuracies inside `[0, 1]`.
    pub fn is_valid(&self) -> bool {
        self.final_loss.is_finite() && (0.0..=1.0).contains(&self.train_acc) && (0.0..=1.0).contains(&self.eval_acc)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceRow {
    pub label: String,
    pub branches: usize,
    pub out_shape: Vec<usize>,
    pub shape_ok: bool,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Settings shared by the training ablations: small enough to finish in
/// seconds, long enough for the metrics to move.
pub fn short_run(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 5,
        samples: 128,
        seed,
        ..TrainConfig::default()
    }
}

fn train_row(label: String, cfg: &TrainConfig) -> Result<TrainRow> {
    let t = train::<f64>(cfg)?;
    let last = t.log.last().copied();
    Ok(TrainRow {
        label,
        final_loss: last.map_or(f64::NAN, |m| m.loss),
        train_acc: last.map_or(0.0, |m| m.acc),
        eval_acc: t.eval_acc,
    })
}

/// The four pooling strategies under one seed on the toy conv net.
pub fn pooling(base: &TrainConfig) -> Result<Vec<TrainRow>> {
    [PoolingStrategy::avg(), PoolingStrategy::avg_max(), PoolingStrategy::avg_std(), PoolingStrategy::dct(4)]
        .into_iter()
        .map(|p| {
            let label = p.to_string();
            let cfg = TrainConfig {
                model: ModelKind::ToyConv,
                attention: Some(base.attention.unwrap_or(Variant::Bav2)),
                pooling: p,
                ..base.clone()
            };
            train_row(label, &cfg)
        })
        .collect()
}

/// The toy transformer without attention and with each placement.
pub fn integration(base: &TrainConfig) -> Result<Vec<TrainRow>> {
    [Integration::None, Integration::BaMlp, Integration::SeMlp, Integration::BaBlock, Integration::BaStage]
        .into_iter()
        .map(|i| {
            let cfg = TrainConfig {
                model: ModelKind::ToyTransformer,
                attention: (i != Integration::None).then_some(Variant::Bav2),
                integration: i,
                ..base.clone()
            };
            train_row(i.to_string(), &cfg)
        })
        .collect()
}

/// Every source configuration on a two-block bottleneck chain: the second
/// block's output shape and a gradient check over both blocks.
pub fn sources(seed: u64) -> Result<Vec<SourceRow>> {
    let input = [2, 16, 5, 5];
    BridgeSourceConfig::ablation_set()
        .into_iter()
        .enumerate()
        .map(|(i, (label, sources))| {
            let sd = seed + 10 * i as u64;
            let mut store = ParamStore::<f64>::new(sd);
            let first = ConvBlockSpec::new(ConvBlockKind::Bottleneck, 16, 8, 1).with_attention(AttentionConfig::new(Variant::Bav2, 4));
            let b0 = ConvBlock::new(&mut store, "b0", first, None)?;
            let second = ConvBlockSpec::new(ConvBlockKind::Bottleneck, b0.out_channels(), 8, 1)
                .with_attention(AttentionConfig::new(Variant::Bav2, 4).with_sources(sources.clone()));
            let b1 = ConvBlock::new(&mut store, "b1", second, Some(b0.out_channels()))?;
            randomize_running_stats(&mut store, sd + 1);
            let mut all = b0.params();
            all.extend(b1.params());
            jitter_params(&mut store, &all, sd + 2);

            let mut sess = Session::new(&mut store, Mode::Eval);
            let x = sess.input_var(Tensor::randn(&input, 1.0, &mut ChaCha8Rng::seed_from_u64(sd + 3)))?;
            let (y0, t0) = b0.forward(&mut sess, x, None)?;
            let (y1, _) = b1.forward(&mut sess, y0, Some(&t0))?;
            let out_shape = sess.graph.shape(y1).to_vec();
            let shape_ok = out_shape == [input[0], b1.out_channels(), input[2], input[3]];
            let loss = probe_loss(&mut sess.graph, y1, sd + 4)?;
            let mut wrt: Vec<NodeId> = sess.bound_params().into_iter().map(|(_, n)| n).collect();
            wrt.push(x);
            let report = grad_check(&mut sess.graph, loss, &wrt, &GradCheckConfig::default())?;
            Ok(SourceRow {
                label: label.to_string(),
                branches: sources.len(),
                out_shape,
                shape_ok,
                max_rel_error: report.max_rel_error,
                passed: shape_ok && report.coords_checked > 0 && report.max_rel_error < CONV_PATH_THRESHOLD,
            })
        })
        .collect()
}

pub fn train_table(title: &str, rows: &[TrainRow]) -> String {
    let mut out = format!("{title}\n{:<14} {:>10} {:>9} {:>9}\n", "config", "loss", "train", "eval");
    for r in rows {
        out.push_str(&format!("{:<14} {:>10.6} {:>9.4} {:>9.4}\n", r.label, r.final_loss, r.train_acc, r.eval_acc));
    }
    out
}

pub fn source_table(rows: &[SourceRow]) -> String {
    let mut out = format!("sources\n{:<18} {:>8} {:>16} {:>12} {:>6}\n", "config", "branches", "shape", "max_rel_err", "ok");
    for r in rows {
        let shape = format!("{:?}", r.out_shape);
        let ok = if r.passed { "PASS" } else { "FAIL" };
        out.push_str(&format!("{:<18} {:>8} {:>16} {:>12.3e} {:>6}\n", r.label, r.branches, shape, r.max_rel_error, ok));
    }
    out
}
