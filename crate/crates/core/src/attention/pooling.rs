//! Channel statistics used by the squeeze step.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Real;

pub const DEFAULT_DCT_COMPONENTS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingKind {
    Avg,
    AvgMax,
    AvgStd,
    Dct,
}

/// How a feature map `[N, C, H, W]` is squeezed to per-channel statistics.
///
/// Two-statistic kinds produce `[N, 2C]` (`[mean | max]` or `[mean | std]`)
/// and the following projection is widened to match.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PoolingStrategy {
    pub kind: PoolingKind,
    /// Number of lowest-frequency DCT-II bases (zig-zag order) for `Dct`.
    pub dct_components: usize,
}

impl Default for PoolingStrategy {
    fn default() -> Self {
        Self::avg()
    }
}

impl PoolingStrategy {
    pub const ALL: [PoolingKind; 4] = [PoolingKind::Avg, PoolingKind::AvgMax, PoolingKind::AvgStd, PoolingKind::Dct];

    pub fn avg() -> Self {
        Self::of(PoolingKind::Avg)
    }

    pub fn avg_max() -> Self {
        Self::of(PoolingKind::AvgMax)
    }

    pub fn avg_std() -> Self {
        Self::of(PoolingKind::AvgStd)
    }

    pub fn dct(components: usize) -> Self {
        Self {
            kind: PoolingKind::Dct,
            dct_components: components,
        }
    }

    pub fn of(kind: PoolingKind) -> Self {
        Self {
            kind,
            dct_components: DEFAULT_DCT_COMPONENTS,
        }
    }

    /// Statistics produced per channel.
    pub fn stats_per_channel(&self) -> usize {
        match self.kind {
            PoolingKind::Avg | PoolingKind::Dct => 1,
            PoolingKind::AvgMax | PoolingKind::AvgStd => 2,
        }
    }

    pub fn pool<T: Real>(&self, g: &mut Graph<T>, x: NodeId) -> Result<NodeId> {
        match self.kind {
            PoolingKind::Avg => g.gap(x),
            PoolingKind::AvgMax => {
                let a = g.gap(x)?;
                let m = g.spatial_max(x)?;
                g.concat(&[a, m])
            }
            PoolingKind::AvgStd => {
                let a = g.gap(x)?;
                let s = g.spatial_std(x)?;
                g.concat(&[a, s])
            }
            PoolingKind::Dct => {
                let shape = g.shape(x).to_vec();
                if shape.len() != 4 {
                    return Err(Error::shape(format!("dct pooling expects [N,C,H,W], got {shape:?}")));
                }
                let summed = summed_dct_basis(shape[2], shape[3], self.dct_components)?;
                g.spatial_project(x, summed.into_iter().map(T::of).collect())
            }
        }
    }
}

impl fmt::Display for PoolingStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            PoolingKind::Avg => write!(f, "avg"),
            PoolingKind::AvgMax => write!(f, "avg_max"),
            PoolingKind::AvgStd => write!(f, "avg_std"),
            PoolingKind::Dct if self.dct_components == DEFAULT_DCT_COMPONENTS => write!(f, "dct"),
            PoolingKind::Dct => write!(f, "dct:{}", self.dct_components),
        }
    }
}

impl FromStr for PoolingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (head, k) = match s.split_once(':') {
            Some((h, k)) => (
                h,
                Some(k.parse::<usize>().map_err(|_| Error::config(format!("bad dct component count in {s:?}")))?),
            ),
            None => (s, None),
        };
        let kind = match head {
            "avg" => PoolingKind::Avg,
            "avg_max" | "avgmax" => PoolingKind::AvgMax,
            "avg_std" | "avgstd" => PoolingKind::AvgStd,
            "dct" => PoolingKind::Dct,
            other => return Err(Error::config(format!("unknown pooling strategy {other:?}"))),
        };
        match (kind, k) {
            (PoolingKind::Dct, Some(k)) => Ok(Self::dct(k)),
            (_, Some(_)) => Err(Error::config(format!("only dct takes a component count: {s:?}"))),
            (kind, None) => Ok(Self::of(kind)),
        }
    }
}

impl TryFrom<String> for PoolingStrategy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<PoolingStrategy> for String {
    fn from(p: PoolingStrategy) -> String {
        p.to_string()
    }
}

/// JPEG-style zig-zag order over an `h x w` frequency grid.
pub fn zigzag(h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(h * w);
    for s in 0..(h + w).saturating_sub(1) {
        let rows: Vec<usize> = (0..=s).filter(|&u| u < h && s - u < w).collect();
        if s % 2 == 0 {
            out.extend(rows.iter().rev().map(|&u| (u, s - u)));
        } else {
            out.extend(rows.iter().map(|&u| (u, s - u)));
        }
    }
    out
}

/// Orthonormal 2D DCT-II basis image for frequency `(u, v)` on an
/// `h x w` grid, row-major.
pub fn dct_basis_image(h: usize, w: usize, u: usize, v: usize) -> Vec<f64> {
    let alpha = |f: usize, n: usize| if f == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
    let (au, av) = (alpha(u, h), alpha(v, w));
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        let cu = (PI * (2 * i + 1) as f64 * u as f64 / (2 * h) as f64).cos();
        for j in 0..w {
            let cv = (PI * (2 * j + 1) as f64 * v as f64 / (2 * w) as f64).cos();
            out.push(au * av * cu * cv);
        }
    }
    out
}

/// The `k` lowest-frequency basis images.
pub fn dct_bases(h: usize, w: usize, k: usize) -> Result<Vec<Vec<f64>>> {
    if k == 0 || k > h * w {
        return Err(Error::config(format!(
            "dct needs 1..={} components on a {h}x{w} map, got {k}",
            h * w
        )));
    }
    Ok(zigzag(h, w)
        .into_iter()
        .take(k)
        .map(|(u, v)| dct_basis_image(h, w, u, v))
        .collect())
}

fn summed_dct_basis(h: usize, w: usize, k: usize) -> Result<Vec<f64>> {
    let bases = dct_bases(h, w, k)?;
    let mut sum = vec![0.0; h * w];
    for b in &bases {
        for (s, v) in sum.iter_mut().zip(b) {
            *s += v;
        }
    }
    Ok(sum)
}

/// Projections of one `h x w` map onto its `k` lowest-frequency bases.
pub fn dct_coefficients(map: &[f64], h: usize, w: usize, k: usize) -> Result<Vec<f64>> {
    if map.len() != h * w {
        return Err(Error::shape(format!("map has {} values for a {h}x{w} grid", map.len())));
    }
    Ok(dct_bases(h, w, k)?
        .iter()
        .map(|b| b.iter().zip(map).map(|(a, x)| a * x).sum())
        .collect())
}
