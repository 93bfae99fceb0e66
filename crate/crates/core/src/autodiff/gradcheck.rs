//! Central-difference gradient checking against the reverse-mode sweep.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};

/// Central-difference stencil.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(θ+h) - f(θ-h)) / 2h`, truncation error `O(h²)`.
    ThreePoint,
    /// `(f(θ-2h) - 8f(θ-h) + 8f(θ+h) - f(θ+2h)) / 12h`, truncation error
    /// `O(h⁴)`. The larger step it tolerates keeps rounding in `f` from
    /// dominating small derivatives.
    FivePoint,
}

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Step `h` of the central difference.
    pub eps: f64,
    pub stencil: Stencil,
    /// Coordinates checked per tensor; smaller tensors are checked in full.
    pub coords_per_param: usize,
    /// Seed for coordinate sampling.
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            stencil: Stencil::FivePoint,
            coords_per_param: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorstCoordinate {
    pub node: NodeId,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    pub worst: Option<WorstCoordinate>,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Compares the gradients of scalar `loss` with respect to each leaf in
/// `wrt` against a central difference.
///
/// ReLU masks and spatial-max winners are frozen at `θ` while the stencil
/// is evaluated, so a step that would cross a kink still differentiates
/// the piece `θ` lies on.
///
/// The graph is replayed for every perturbation and restored to its
/// original values before returning.
pub fn grad_check(
    graph: &mut Graph<f64>,
    loss: NodeId,
    wrt: &[NodeId],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    if graph.value(loss).len() != 1 {
        return Err(Error::NonScalarLoss(graph.value(loss).shape().to_vec()));
    }
    if wrt.iter().any(|&id| !graph.is_leaf(id)) {
        return Err(Error::config("gradients can only be checked against leaves"));
    }
    graph.backward(loss)?;
    let analytic: Vec<Vec<f64>> = wrt
        .iter()
        .map(|&id| match graph.grad(id) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; graph.value(id).len()],
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: 0,
        worst: None,
    };
    graph.freeze_kinks();
    for (&id, grads) in wrt.iter().zip(&analytic) {
        let original = graph.value(id).clone();
        let len = original.len();
        let coords: Vec<usize> = if len <= cfg.coords_per_param {
            (0..len).collect()
        } else {
            let mut c = sample(&mut rng, len, cfg.coords_per_param).into_vec();
            c.sort_unstable();
            c
        };
        for index in coords {
            let offsets: &[(f64, f64)] = match cfg.stencil {
                Stencil::ThreePoint => &[(1.0, 0.5), (-1.0, -0.5)],
                Stencil::FivePoint => &[(2.0, -1.0 / 12.0), (1.0, 8.0 / 12.0), (-1.0, -8.0 / 12.0), (-2.0, 1.0 / 12.0)],
            };
            let mut numeric = 0.0;
            for &(k, weight) in offsets {
                let mut probe = original.clone();
                probe.data_mut()[index] = original.data()[index] + k * cfg.eps;
                graph.set_leaf_value(id, probe)?;
                graph.replay()?;
                numeric += weight * graph.value(loss).item();
            }
            let numeric = numeric / cfg.eps;
            let err = relative_error(grads[index], numeric);
            report.coords_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some(WorstCoordinate {
                    node: id,
                    index,
                    analytic: grads[index],
                    numeric,
                });
            }
        }
        graph.set_leaf_value(id, original)?;
    }
    graph.thaw_kinks();
    graph.replay()?;
    Ok(report)
}
