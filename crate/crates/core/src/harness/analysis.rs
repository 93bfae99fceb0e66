//! Feature-importance matrices from a model's attention traces.

use crate::cka::{BlockFeatures, CkaMatrix, FeatureBatch};
use crate::error::{Error, Result};
use crate::harness::data::Dataset;
use crate::harness::models::ToyModel;
use crate::param::{Mode, ParamStore, Session};

/// Runs the first `m` samples through `model` in eval mode and scores
/// every branch feature `S_i` of every attention block against that
/// block's `ω`.
pub fn importance_matrix(model: &ToyModel, store: &mut ParamStore<f64>, data: &Dataset, m: usize) -> Result<CkaMatrix> {
    if m < 2 || m > data.len() {
        return Err(Error::config(format!("need 2 <= m <= {} samples, got {m}", data.len())));
    }
    // per block: one row buffer per branch, then ω
    let mut rows: Vec<(Vec<(usize, Vec<f64>)>, (usize, Vec<f64>))> = Vec::new();
    let order: Vec<usize> = (0..m).collect();
    for idx in order.chunks(64) {
        let (images, _) = data.batch::<f64>(idx);
        let mut sess = Session::new(store, Mode::Eval);
        let x = sess.input(images)?;
        let out = model.forward(&mut sess, x)?;
        if out.attention.is_empty() {
            return Err(Error::config("model has no attention blocks"));
        }
        if rows.is_empty() {
            rows = out
                .attention
                .iter()
                .map(|a| {
                    let branches = a.squeezed.iter().map(|&s| (sess.graph.shape(s)[1], Vec::new())).collect();
                    (branches, (sess.graph.shape(a.omega)[1], Vec::new()))
                })
                .collect();
        }
        for (a, (branches, omega)) in out.attention.iter().zip(rows.iter_mut()) {
            for (&s, (_, buf)) in a.squeezed.iter().zip(branches.iter_mut()) {
                buf.extend_from_slice(sess.value(s).data());
            }
            omega.1.extend_from_slice(sess.value(a.omega).data());
        }
    }
    let blocks = rows
        .into_iter()
        .map(|(branches, (oc, omega))| {
            Ok(BlockFeatures {
                branches: branches.into_iter().map(|(c, v)| FeatureBatch::new(m, c, v)).collect::<Result<_>>()?,
                omega: FeatureBatch::new(m, oc, omega)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    CkaMatrix::from_features(&blocks)
}
