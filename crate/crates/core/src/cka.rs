//! Linear-kernel centered kernel alignment.
//!
//! `hsic(K, L) = tr(K·H·L·H) / (m−1)²` with `H = I − 11ᵀ/m`, and
//! `cka(K, L) = hsic(K, L) / √(hsic(K, K)·hsic(L, L))`. Features are not
//! centered before the Gram product; centering happens inside `hsic`.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `m` samples of a `d`-dimensional feature, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBatch {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl FeatureBatch {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows < 2 {
            return Err(Error::config(format!("need at least 2 samples, got {rows}")));
        }
        if cols == 0 || values.len() != rows * cols {
            return Err(Error::shape(format!("{} values for a {rows}x{cols} batch", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "feature batch" });
        }
        Ok(Self { rows, cols, values })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }
}

/// Square symmetric matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Gram {
    size: usize,
    values: Vec<f64>,
}

impl Gram {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size + j]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Wraps an arbitrary square matrix; symmetry is checked to 1e-12
    /// relative to the largest entry.
    pub fn from_values(size: usize, values: Vec<f64>) -> Result<Self> {
        if size < 2 || values.len() != size * size {
            return Err(Error::shape(format!("{} values for a {size}x{size} kernel", values.len())));
        }
        let scale = values.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
        for i in 0..size {
            for j in 0..i {
                if (values[i * size + j] - values[j * size + i]).abs() > 1e-12 * scale {
                    return Err(Error::config("kernel matrix is not symmetric"));
                }
            }
        }
        Ok(Self { size, values })
    }

    /// `H·K·H`: subtract row and column means, add back the grand mean.
    fn centered(&self) -> Vec<f64> {
        let m = self.size;
        let row_means: Vec<f64> = (0..m).map(|i| self.values[i * m..(i + 1) * m].iter().sum::<f64>() / m as f64).collect();
        let grand = row_means.iter().sum::<f64>() / m as f64;
        let mut out = self.values.clone();
        for i in 0..m {
            for j in 0..m {
                // K is symmetric, so column means equal row means
                out[i * m + j] += grand - row_means[i] - row_means[j];
            }
        }
        out
    }
}

/// `K = X·Xᵀ`.
pub fn gram(x: &FeatureBatch) -> Gram {
    let m = x.rows;
    let mut values = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..=i {
            let v: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| a * b).sum();
            values[i * m + j] = v;
            values[j * m + i] = v;
        }
    }
    Gram { size: m, values }
}

fn check_sizes(k: &Gram, l: &Gram) -> Result<()> {
    if k.size != l.size {
        return Err(Error::shape(format!("kernel sizes differ: {} vs {}", k.size, l.size)));
    }
    Ok(())
}

/// Biased HSIC estimator `tr(KHLH)/(m−1)²`.
pub fn hsic(k: &Gram, l: &Gram) -> Result<f64> {
    check_sizes(k, l)?;
    let m = k.size as f64;
    // tr(KHLH) = <HKH, L>_F since H is symmetric and idempotent
    let hkh = k.centered();
    let t: f64 = hkh.iter().zip(&l.values).map(|(a, b)| a * b).sum();
    Ok(t / ((m - 1.0) * (m - 1.0)))
}

/// Self-similarity `hsic(K, K)`, rejecting kernels that centering
/// annihilates (constant features).
fn self_hsic(k: &Gram, which: &str) -> Result<f64> {
    let m = k.size as f64;
    let hkh = k.centered();
    let energy: f64 = hkh.iter().map(|v| v * v).sum();
    let scale: f64 = k.values.iter().map(|v| v * v).sum();
    if !(energy > 1e-20 * scale) {
        return Err(Error::Degenerate(format!("{which} kernel has no variance after centering")));
    }
    Ok(energy / ((m - 1.0) * (m - 1.0)))
}

/// CKA in `[0, 1]`. Rounding can push the raw ratio a few ulps past the
/// bounds; the result is clamped.
pub fn cka(k: &Gram, l: &Gram) -> Result<f64> {
    check_sizes(k, l)?;
    let kk = self_hsic(k, "first")?;
    let ll = self_hsic(l, "second")?;
    let kl = hsic(k, l)?;
    Ok((kl / (kk * ll).sqrt()).clamp(0.0, 1.0))
}

/// CKA between two feature batches with matching sample counts.
pub fn feature_cka(x: &FeatureBatch, y: &FeatureBatch) -> Result<f64> {
    cka(&gram(x), &gram(y))
}

/// Per-block branch features `S_i` and the attention weights `ω`.
#[derive(Debug, Clone)]
pub struct BlockFeatures {
    pub branches: Vec<FeatureBatch>,
    pub omega: FeatureBatch,
}

/// Blocks × branches grid of `CKA(S_i, ω)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CkaMatrix {
    pub blocks: Vec<String>,
    pub branches: Vec<String>,
    pub scores: Vec<Vec<f64>>,
}

impl CkaMatrix {
    pub fn from_features(blocks: &[BlockFeatures]) -> Result<Self> {
        let n = blocks.first().map(|b| b.branches.len()).ok_or_else(|| Error::config("no attention blocks to analyse"))?;
        let mut scores = Vec::with_capacity(blocks.len());
        for (i, b) in blocks.iter().enumerate() {
            if b.branches.len() != n {
                return Err(Error::config(format!("block {} has {} branches, expected {n}", i + 1, b.branches.len())));
            }
            let omega = gram(&b.omega);
            let row = b.branches.iter().map(|s| cka(&gram(s), &omega)).collect::<Result<Vec<_>>>()?;
            scores.push(row);
        }
        Ok(Self {
            blocks: (1..=blocks.len()).map(|i| format!("B{i}")).collect(),
            branches: (1..=n).map(|i| format!("S{i}")).collect(),
            scores,
        })
    }

    pub fn in_unit_range(&self) -> bool {
        self.scores.iter().flatten().all(|v| (0.0..=1.0).contains(v))
    }

    /// `block,S1..Sn` header, one row per block.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let fmt_err = |e: csv::Error| Error::Format(e.to_string());
        let mut header = vec!["block".to_string()];
        header.extend(self.branches.iter().cloned());
        w.write_record(&header).map_err(fmt_err)?;
        for (label, row) in self.blocks.iter().zip(&self.scores) {
            let mut rec = vec![label.clone()];
            rec.extend(row.iter().map(|v| format!("{v:.6}")));
            w.write_record(&rec).map_err(fmt_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> FeatureBatch {
        let v = (0..rows * cols).map(|k| f(k / cols, k % cols)).collect();
        FeatureBatch::new(rows, cols, v).unwrap()
    }

    #[test]
    fn identity_and_ones() {
        let k = gram(&batch(4, 4, |i, j| (i == j) as u8 as f64));
        assert!(k.values().iter().enumerate().all(|(x, &v)| v == ((x / 4 == x % 4) as u8 as f64)));
        let k = gram(&batch(3, 1, |_, _| 1.0));
        assert!(k.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn constant_features_are_degenerate() {
        let c = gram(&batch(5, 2, |_, j| j as f64 + 1.0));
        let y = gram(&batch(5, 2, |i, j| (i * 3 + j) as f64 % 4.0));
        assert!(hsic(&c, &y).unwrap().abs() < 1e-12);
        assert!(matches!(cka(&c, &y), Err(Error::Degenerate(_))));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(FeatureBatch::new(1, 3, vec![0.0; 3]).is_err());
        assert!(FeatureBatch::new(2, 2, vec![0.0, f64::NAN, 1.0, 2.0]).is_err());
        let a = gram(&batch(3, 2, |i, j| (i + j) as f64));
        let b = gram(&batch(4, 2, |i, j| (i * j) as f64));
        assert!(hsic(&a, &b).is_err());
        assert!(Gram::from_values(2, vec![1.0, 2.0, 3.0, 1.0]).is_err());
    }

    #[test]
    fn csv_layout() {
        let m = CkaMatrix {
            blocks: vec!["B1".into(), "B2".into()],
            branches: vec!["S1".into(), "S2".into()],
            scores: vec![vec![0.5, 1.0], vec![0.0, 0.25]],
        };
        assert_eq!(m.to_csv_string().unwrap(), "block,S1,S2\nB1,0.500000,1.000000\nB2,0.000000,0.250000\n");
    }
}
