//! Gradient-check suites over every op and composite module, at 64-bit
//! with eval-mode batch norm unless a case says otherwise.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, ChannelAttention, PoolingStrategy, Variant};
use crate::autodiff::nn::{mhsa, MhsaNodes};
use crate::autodiff::{grad_check, BnStats, GradCheckConfig, Graph, NodeId};
use crate::blocks::{ConvBlock, ConvBlockKind, ConvBlockSpec, Integration, TransformerBlock, TransformerBlockSpec, TransformerStage};
use crate::error::{Error, Result};
use crate::param::{Mode, ParamId, ParamStore, Session};
use crate::tensor::Tensor;

pub const CONV_PATH_THRESHOLD: f64 = 1e-6;
pub const TRANSFORMER_THRESHOLD: f64 = 1e-5;
/// Absolute bounds for parameters whose gradient is zero by construction.
pub const NULL_ANALYTIC_BOUND: f64 = 1e-14;
pub const NULL_NUMERIC_BOUND: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Ops,
    Attention,
    Blocks,
    Transformer,
    All,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "ops" => Suite::Ops,
            "attention" => Suite::Attention,
            "blocks" => Suite::Blocks,
            "transformer" => Suite::Transformer,
            "all" => Suite::All,
            other => return Err(Error::config(format!("unknown gradcheck suite {other:?}"))),
        })
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Ops => "ops",
            Suite::Attention => "attention",
            Suite::Blocks => "blocks",
            Suite::Transformer => "transformer",
            Suite::All => "all",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub suite: String,
    pub name: String,
    pub threshold: f64,
    pub max_rel_error: f64,
    pub coords: usize,
    /// Largest absolute gradient, analytic or numeric, over parameters
    /// that are zero by construction.
    pub null_abs: Option<f64>,
    pub passed: bool,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

fn uniform(shape: &[usize], bound: f64, seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, bound, &mut rng(seed))
}

/// `Σ (out − out₀) ⊙ R` with `out₀` held constant and `|R| ∈ [0.5, 1.5]`.
/// The gradient equals that of `Σ out ⊙ R`, but the loss value sits near
/// zero, which keeps central differences clear of rounding in a large sum.
pub fn probe_loss(g: &mut Graph<f64>, out: NodeId, seed: u64) -> Result<NodeId> {
    let shape = g.shape(out).to_vec();
    let r = uniform(&shape, 1.0, seed ^ 0x5eed).map(|u| u.signum() * (0.5 + u.abs()));
    let base = g.constant(g.value(out).map(|v| -v))?;
    let centered = g.add(out, base)?;
    g.dot(centered, r)
}

/// Running statistics away from `(0, 1)` so eval-mode norms are real
/// affine maps.
pub fn randomize_running_stats(store: &mut ParamStore<f64>, seed: u64) {
    let ids: Vec<_> = store.buffer_ids().collect();
    for (i, id) in ids.into_iter().enumerate() {
        let c = store.buffer(id).mean.len();
        let mean = randn(&[c], seed + 2 * i as u64).map(|v| 0.3 * v);
        let var = uniform(&[c], 0.5, seed + 2 * i as u64 + 1).map(|v| v + 1.0);
        let st = store.buffer_mut(id);
        st.mean = mean.into_data();
        st.var = var.into_data();
    }
}

/// Uniform noise in `[-0.3, 0.3]` on every listed parameter, so norm
/// affines and fusion weights leave their initial values.
pub fn jitter_params(store: &mut ParamStore<f64>, ids: &[ParamId], seed: u64) {
    for &id in ids {
        let noise = uniform(store.value(id).shape(), 0.3, seed.wrapping_mul(7919) + id.index() as u64);
        let v = store.value(id).zip_map(&noise, |a, b| a + b).expect("same shape");
        store.value_mut(id).data_mut().copy_from_slice(v.data());
    }
}

struct Case {
    suite: Suite,
    name: String,
    threshold: f64,
    check: GradCheckConfig,
}

impl Case {
    fn new(suite: Suite, name: impl Into<String>, threshold: f64, check: &GradCheckConfig) -> Self {
        Self {
            suite,
            name: name.into(),
            threshold,
            check: check.clone(),
        }
    }

    /// Checks `wrt` relatively and `null` absolutely.
    fn finish(self, g: &mut Graph<f64>, out: NodeId, wrt: &[NodeId], null: &[NodeId], seed: u64) -> Result<CaseResult> {
        let loss = probe_loss(g, out, seed)?;
        let report = grad_check(g, loss, wrt, &self.check)?;
        let mut null_abs = None;
        let mut null_ok = true;
        if !null.is_empty() {
            let r = grad_check(g, loss, null, &self.check)?;
            let analytic = null
                .iter()
                .filter_map(|&n| g.grad(n))
                .flat_map(|t| t.data().iter().map(|v| v.abs()))
                .fold(0.0, f64::max);
            let numeric = r.worst.map_or(0.0, |w| w.numeric.abs());
            null_ok = analytic < NULL_ANALYTIC_BOUND && numeric < NULL_NUMERIC_BOUND;
            null_abs = Some(analytic.max(numeric));
        }
        Ok(CaseResult {
            suite: self.suite.to_string(),
            name: self.name,
            threshold: self.threshold,
            max_rel_error: report.max_rel_error,
            coords: report.coords_checked,
            null_abs,
            passed: report.max_rel_error < self.threshold && null_ok && report.coords_checked > 0,
        })
    }
}

fn session_wrt(sess: &Session<'_, f64>, null: &[ParamId], extra: &[NodeId]) -> (Vec<NodeId>, Vec<NodeId>) {
    let (mut keep, mut zero) = (Vec::new(), Vec::new());
    for (id, node) in sess.bound_params() {
        if null.contains(&id) {
            zero.push(node);
        } else {
            keep.push(node);
        }
    }
    keep.extend_from_slice(extra);
    (keep, zero)
}

fn ops(seed: u64, check: &GradCheckConfig) -> Result<Vec<CaseResult>> {
    let s = Suite::Ops;
    let mut out = Vec::new();

    let mut g = Graph::new();
    let x = g.param(randn(&[2, 3, 5, 5], seed))?;
    let y = g.gap(x)?;
    out.push(Case::new(s, "gap", CONV_PATH_THRESHOLD, check).finish(&mut g, y, &[x], &[], seed + 1)?);

    let mut g = Graph::new();
    let x = g.param(randn(&[4, 8], seed + 2))?;
    let w = g.param(uniform(&[3, 8], 0.35, seed + 3))?;
    let b = g.param(randn(&[3], seed + 4))?;
    let y = g.linear(x, w, Some(b))?;
    out.push(Case::new(s, "linear", 1e-7, check).finish(&mut g, y, &[x, w, b], &[], seed + 5)?);

    for stride in [1, 2] {
        let mut g = Graph::new();
        let x = g.param(randn(&[2, 3, 8, 8], seed + 6))?;
        let k = g.param(uniform(&[4, 3, 3, 3], 0.2, seed + 7))?;
        let y = g.conv2d(x, k, stride, 1)?;
        out.push(Case::new(s, format!("conv2d_s{stride}"), CONV_PATH_THRESHOLD, check).finish(&mut g, y, &[x, k], &[], seed + 8)?);
    }

    let mut g = Graph::new();
    let x = g.param(randn(&[8, 16], seed + 9))?;
    let gamma = g.param(uniform(&[16], 1.0, seed + 10).map(|v| v + 1.5))?;
    let beta = g.param(randn(&[16], seed + 11))?;
    let y = g.batch_norm(x, gamma, beta, 1e-5, BnStats::Batch)?;
    out.push(Case::new(s, "batchnorm_train", CONV_PATH_THRESHOLD, check).finish(&mut g, y, &[x, gamma, beta], &[], seed + 12)?);

    let mut g = Graph::new();
    let x = g.param(randn(&[3, 4, 3, 3], seed + 13))?;
    let gamma = g.param(randn(&[4], seed + 14))?;
    let beta = g.param(randn(&[4], seed + 15))?;
    let stats = BnStats::Fixed {
        mean: randn(&[4], seed + 16).map(|v| 0.3 * v).into_data(),
        var: uniform(&[4], 0.5, seed + 17).map(|v| v + 1.0).into_data(),
    };
    let y = g.batch_norm(x, gamma, beta, 1e-5, stats)?;
    out.push(Case::new(s, "batchnorm_eval", CONV_PATH_THRESHOLD, check).finish(&mut g, y, &[x, gamma, beta], &[], seed + 18)?);

    let mut g = Graph::new();
    let x = g.param(randn(&[4, 8], seed + 19).map(|v| if v.abs() < 0.05 { 0.5 } else { v }))?;
    let r = g.relu(x)?;
    let sg = g.sigmoid(r)?;
    out.push(Case::new(s, "relu_sigmoid", 1e-7, check).finish(&mut g, sg, &[x], &[], seed + 20)?);

    let mut g = Graph::new();
    let x = g.param(randn(&[2, 3, 4, 4], seed + 21))?;
    let w = g.param(uniform(&[2, 3], 1.0, seed + 22))?;
    let y = g.channel_scale(x, w)?;
    out.push(Case::new(s, "channel_scale", 1e-7, check).finish(&mut g, y, &[x, w], &[], seed + 23)?);

    let mut g = Graph::new();
    let x = g.param(randn(&[2, 4, 8], seed + 24))?;
    let bound = 1.0 / 8f64.sqrt();
    let mut p = |i: u64, shape: &[usize]| g.param(uniform(shape, bound, seed + 25 + i));
    let nodes = MhsaNodes {
        wq: p(0, &[8, 8])?,
        bq: p(1, &[8])?,
        wk: p(2, &[8, 8])?,
        bk: p(3, &[8])?,
        wv: p(4, &[8, 8])?,
        bv: p(5, &[8])?,
        wo: p(6, &[8, 8])?,
        bo: p(7, &[8])?,
    };
    let y = mhsa(&mut g, x, &nodes, 2)?;
    let n = nodes;
    out.push(Case::new(s, "mhsa", TRANSFORMER_THRESHOLD, check).finish(&mut g, y, &[x, n.wq, n.bq, n.wk, n.wv, n.bv, n.wo, n.bo], &[n.bk], seed + 33)?);

    let mut g = Graph::new();
    let x = g.param(randn(&[2, 3, 8], seed + 34))?;
    let gamma = g.param(uniform(&[8], 0.5, seed + 35).map(|v| v + 1.0))?;
    let beta = g.param(randn(&[8], seed + 36))?;
    let y = g.layer_norm(x, gamma, beta, 1e-5)?;
    out.push(Case::new(s, "layer_norm", CONV_PATH_THRESHOLD, check).finish(&mut g, y, &[x, gamma, beta], &[], seed + 37)?);

    let mut g = Graph::new();
    let x = g.param(randn(&[2, 3, 5], seed + 38))?;
    let y = g.softmax(x)?;
    out.push(Case::new(s, "softmax", CONV_PATH_THRESHOLD, check).finish(&mut g, y, &[x], &[], seed + 39)?);

    for pooling in [PoolingStrategy::avg_max(), PoolingStrategy::avg_std(), PoolingStrategy::dct(4)] {
        let mut g = Graph::new();
        let x = g.param(randn(&[2, 3, 4, 4], seed + 40))?;
        let y = pooling.pool(&mut g, x)?;
        out.push(Case::new(s, format!("pool_{pooling}"), CONV_PATH_THRESHOLD, check).finish(&mut g, y, &[x], &[], seed + 41)?);
    }

    let mut g = Graph::new();
    let a = g.param(randn(&[2, 3, 4], seed + 42))?;
    let b = g.param(randn(&[2, 3, 4], seed + 43))?;
    let y = g.add(a, b)?;
    let y = g.scale(y, 0.7)?;
    let y = g.permute(y, &[0, 2, 1])?;
    let y = g.reshape(y, &[2, 12])?;
    out.push(Case::new(s, "add_scale_permute_reshape", 1e-7, check).finish(&mut g, y, &[a, b], &[], seed + 44)?);

    for trans_b in [false, true] {
        let mut g = Graph::new();
        let a = g.param(randn(&[2, 3, 4], seed + 45))?;
        let b = g.param(randn(if trans_b { &[2, 5, 4] } else { &[2, 4, 5] }, seed + 46))?;
        let y = g.bmm(a, b, trans_b)?;
        let name = if trans_b { "bmm_trans" } else { "bmm" };
        out.push(Case::new(s, name, 1e-7, check).finish(&mut g, y, &[a, b], &[], seed + 47)?);
    }

    let mut g = Graph::new();
    let x = g.param(randn(&[2, 3, 4], seed + 48))?;
    let m = g.token_mean(x)?;
    let w = g.sigmoid(m)?;
    let y = g.token_scale(x, w)?;
    out.push(Case::new(s, "token_mean_scale", CONV_PATH_THRESHOLD, check).finish(&mut g, y, &[x], &[], seed + 49)?);

    let mut g = Graph::new();
    let xs = (0..3).map(|i| g.param(randn(&[2, 4], seed + 50 + i))).collect::<Result<Vec<_>>>()?;
    let f = g.param(randn(&[3], seed + 53))?;
    let fused = g.fuse(f, &xs)?;
    let y = g.concat(&[xs[0], fused, xs[2]])?;
    let mut wrt = xs.clone();
    wrt.push(f);
    out.push(Case::new(s, "concat_fuse", 1e-7, check).finish(&mut g, y, &wrt, &[], seed + 54)?);

    let mut g = Graph::new();
    let x = g.param(randn(&[4, 5], seed + 55))?;
    let ce = g.cross_entropy(x, &[0, 3, 4, 3])?;
    let total = g.sum(x)?;
    let y = g.add(ce, total)?;
    out.push(Case::new(s, "cross_entropy_sum", CONV_PATH_THRESHOLD, check).finish(&mut g, y, &[x], &[], seed + 56)?);
    Ok(out)
}

fn attention(seed: u64, check: &GradCheckConfig) -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    let mut k = 0;
    for v in [Variant::Se, Variant::Bav1, Variant::Bav2] {
        for pooling in [PoolingStrategy::avg(), PoolingStrategy::avg_max(), PoolingStrategy::avg_std(), PoolingStrategy::dct(4)] {
            k += 1;
            let sd = seed + 100 * k;
            let cfg = AttentionConfig::new(v, 4).with_pooling(pooling);
            let widths = [8, 16, 16];
            let mut store = ParamStore::<f64>::new(sd);
            let m = ChannelAttention::new(&mut store, "m", &cfg, &widths, 16)?;
            randomize_running_stats(&mut store, sd + 1);
            jitter_params(&mut store, &m.params(), sd + 2);
            let mut sess = Session::new(&mut store, Mode::Eval);
            let xs = widths
                .iter()
                .enumerate()
                .map(|(i, &c)| sess.input_var(randn(&[2, c, 4, 4], sd + 50 + i as u64)))
                .collect::<Result<Vec<_>>>()?;
            let att = m.forward(&mut sess, &xs)?;
            let last = *xs.last().expect("three taps");
            let y = sess.graph.channel_scale(last, att.omega)?;
            let (wrt, _) = session_wrt(&sess, &[], &xs);
            let case = Case::new(Suite::Attention, format!("{v}_{pooling}"), CONV_PATH_THRESHOLD, check);
            out.push(case.finish(&mut sess.graph, y, &wrt, &[], sd + 99)?);
        }
    }
    Ok(out)
}

fn blocks(seed: u64, check: &GradCheckConfig) -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    let shapes = [
        (ConvBlockKind::Bottleneck, 16, 8, 1, [2, 16, 6, 6]),
        (ConvBlockKind::Basic, 8, 16, 2, [2, 8, 6, 6]),
    ];
    for (bi, (kind, cin, width, stride, xshape)) in shapes.into_iter().enumerate() {
        for (vi, v) in [None, Some(Variant::Se), Some(Variant::Bav1), Some(Variant::Bav2)].into_iter().enumerate() {
            let sd = seed + 1000 + 100 * (4 * bi + vi) as u64;
            let mut spec = ConvBlockSpec::new(kind, cin, width, stride);
            if let Some(v) = v {
                spec = spec.with_attention(AttentionConfig::new(v, 4));
            }
            let mut store = ParamStore::<f64>::new(sd);
            let block = ConvBlock::new(&mut store, "b", spec, None)?;
            randomize_running_stats(&mut store, sd + 1);
            jitter_params(&mut store, &block.params(), sd + 2);
            let mut sess = Session::new(&mut store, Mode::Eval);
            let x = sess.input_var(randn(&xshape, sd + 3))?;
            let (y, _) = block.forward(&mut sess, x, None)?;
            let (wrt, _) = session_wrt(&sess, &[], &[x]);
            let label = v.map_or_else(|| "plain".to_string(), |v| v.to_string());
            let kind = match kind {
                ConvBlockKind::Basic => "basic",
                ConvBlockKind::Bottleneck => "bottleneck",
            };
            let case = Case::new(Suite::Blocks, format!("{kind}_{label}"), CONV_PATH_THRESHOLD, check);
            out.push(case.finish(&mut sess.graph, y, &wrt, &[], sd + 4)?);
        }
    }
    Ok(out)
}

fn transformer(seed: u64, check: &GradCheckConfig) -> Result<Vec<CaseResult>> {
    let mut out = Vec::new();
    for (i, integration) in [Integration::BaMlp, Integration::SeMlp, Integration::BaBlock, Integration::BaStage].into_iter().enumerate() {
        let sd = seed + 5000 + 100 * i as u64;
        let cfg = AttentionConfig::new(Variant::Bav2, 4);
        let mut store = ParamStore::<f64>::new(sd);
        enum Body {
            Block(TransformerBlock),
            Stage(TransformerStage),
        }
        let body = match integration {
            Integration::BaStage => Body::Stage(TransformerStage::new(&mut store, "s", 16, 2, Some(&cfg))?),
            other => Body::Block(TransformerBlock::new(&mut store, "t", TransformerBlockSpec::new(16, 2).with_integration(other, cfg))?),
        };
        let (params, null) = match &body {
            Body::Block(b) => (b.params(), b.null_gradient_params()),
            Body::Stage(s) => (s.params(), s.null_gradient_params()),
        };
        randomize_running_stats(&mut store, sd + 1);
        jitter_params(&mut store, &params, sd + 2);
        let mut sess = Session::new(&mut store, Mode::Eval);
        let x = sess.input_var(randn(&[2, 4, 16], sd + 3))?;
        let y = match &body {
            Body::Block(b) => b.forward(&mut sess, x)?.0,
            Body::Stage(s) => s.forward(&mut sess, x)?.0,
        };
        let (wrt, zero) = session_wrt(&sess, &null, &[x]);
        let case = Case::new(Suite::Transformer, integration.label(), TRANSFORMER_THRESHOLD, check);
        out.push(case.finish(&mut sess.graph, y, &wrt, &zero, sd + 4)?);
    }
    Ok(out)
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<Vec<CaseResult>> {
    run_suite_with(suite, seed, &GradCheckConfig::default())
}

pub fn run_suite_with(suite: Suite, seed: u64, check: &GradCheckConfig) -> Result<Vec<CaseResult>> {
    Ok(match suite {
        Suite::Ops => ops(seed, check)?,
        Suite::Attention => attention(seed, check)?,
        Suite::Blocks => blocks(seed, check)?,
        Suite::Transformer => transformer(seed, check)?,
        Suite::All => {
            let mut all = ops(seed, check)?;
            all.extend(attention(seed, check)?);
            all.extend(blocks(seed, check)?);
            all.extend(transformer(seed, check)?);
            all
        }
    })
}
