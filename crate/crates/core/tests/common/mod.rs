#![allow(dead_code)]

use bridge_attn::autodiff::{grad_check, GradCheckConfig, Graph, NodeId};
use bridge_attn::param::{ParamId, ParamStore};
use bridge_attn::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

pub fn uniform(shape: &[usize], bound: f64, seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, bound, &mut rng(seed))
}

/// Scalar loss `Σ (out − out₀) ⊙ R`, where `out₀` is the value at the
/// current point (held constant) and `R` has random sign and magnitude in
/// `[0.5, 1.5]`.
///
/// Centering keeps the loss near zero so the central difference is not
/// swamped by rounding of a large loss value; the gradient is unchanged.
/// Bounding `|R|` away from zero keeps every output coordinate in play.
pub fn probe_loss(g: &mut Graph<f64>, out: NodeId, seed: u64) -> NodeId {
    let shape = g.shape(out).to_vec();
    let r = uniform(&shape, 1.0, seed ^ 0x5eed).map(|u| u.signum() * (0.5 + u.abs()));
    let base = g.value(out).map(|v| -v);
    let base = g.constant(base).unwrap();
    let centered = g.add(out, base).unwrap();
    g.dot(centered, r).unwrap()
}

pub fn check(g: &mut Graph<f64>, loss: NodeId, wrt: &[NodeId]) -> f64 {
    let report = grad_check(g, loss, wrt, &GradCheckConfig::default()).unwrap();
    assert!(report.coords_checked > 0);
    report.max_rel_error
}

pub fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len(), "length mismatch");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y} (tol {tol})");
    }
}

/// Non-trivial running statistics so eval-mode norms are real affine maps.
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

/// Adds uniform noise in `[-0.3, 0.3]` so norm affines and fusion weights
/// leave their special initial values.
pub fn jitter_params(store: &mut ParamStore<f64>, ids: &[ParamId], seed: u64) {
    for &id in ids {
        let v = store.value(id).clone();
        let noise = uniform(v.shape(), 0.3, seed.wrapping_mul(7919) + id.index() as u64);
        store.set_value(id, v.zip_map(&noise, |a, b| a + b).unwrap()).unwrap();
    }
}
