//! Closed-form parameter and operation counts for attention modules.

use serde::{Deserialize, Serialize};

use crate::attention::{reduced_width, ChannelAttention, Variant};
use crate::error::{Error, Result};
use crate::param::{ParamRole, ParamStore};
use crate::tensor::Real;

/// Parameter-counting convention.
///
/// `Paper` reports only the integration/generation extras that separate
/// the variants: fusion scalars plus one parameter per BN channel.
/// `Actual` counts every learnable scalar, with two per BN channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Counting {
    Paper,
    Actual,
}

/// Extras under `Paper` counting: `0` for SE, `n·C_n/r` for BAv1,
/// `n + C_n/r` for BAv2.
pub fn paper_extra_params(variant: Variant, branches: usize, out_channels: usize, reduction: usize) -> Result<usize> {
    let fused = reduced_width(out_channels, reduction)?;
    if branches == 0 {
        return Err(Error::config("attention needs at least one branch"));
    }
    Ok(match variant {
        Variant::Se => 0,
        Variant::Bav1 => branches * fused,
        Variant::Bav2 => branches + fused,
    })
}

/// Parameters of one attention module whose taps have widths
/// `branch_widths` (the adjacent layer last) and which rescales
/// `out_channels` channels. `stats_per_channel` widens the projections
/// for two-statistic pooling.
pub fn attention_param_count(
    variant: Variant,
    branch_widths: &[usize],
    out_channels: usize,
    reduction: usize,
    stats_per_channel: usize,
    counting: Counting,
) -> Result<usize> {
    let n = match variant {
        Variant::Se => 1,
        _ => branch_widths.len(),
    };
    if counting == Counting::Paper {
        return paper_extra_params(variant, n, out_channels, reduction);
    }
    let fused = reduced_width(out_channels, reduction)?;
    let expansion = fused * out_channels;
    Ok(match variant {
        Variant::Se => stats_per_channel * out_channels * fused + expansion,
        Variant::Bav1 | Variant::Bav2 => {
            if branch_widths.is_empty() {
                return Err(Error::config("attention needs at least one branch"));
            }
            let projections: usize = branch_widths.iter().map(|c| stats_per_channel * c * fused).sum();
            let extras = match variant {
                Variant::Bav1 => 2 * n * fused,
                _ => n + 2 * fused,
            };
            projections + expansion + extras
        }
    })
}

/// Counts an instantiated module by enumerating its parameter tensors.
pub fn enumerate_params<T: Real>(module: &ChannelAttention, store: &ParamStore<T>, counting: Counting) -> usize {
    module
        .params()
        .into_iter()
        .map(|id| {
            let p = store.get(id);
            match counting {
                Counting::Actual => p.value.len(),
                Counting::Paper => match p.role {
                    ParamRole::Fusion | ParamRole::NormGamma => p.value.len(),
                    _ => 0,
                },
            }
        })
        .sum()
}

/// A tapped feature map `(channels, height, width)`.
pub type TapShape = (usize, usize, usize);

/// Operations of one attention evaluation (per sample): multiply-adds
/// for the projections, one op per element for pooling, normalization,
/// activations and the final rescale.
pub fn attention_flops(
    variant: Variant,
    taps: &[TapShape],
    out_channels: usize,
    out_spatial: usize,
    reduction: usize,
    stats_per_channel: usize,
) -> Result<u64> {
    let fused = reduced_width(out_channels, reduction)? as u64;
    let taps: &[TapShape] = match variant {
        Variant::Se => taps.last().map(std::slice::from_ref).unwrap_or(&[]),
        _ => taps,
    };
    if taps.is_empty() {
        return Err(Error::config("attention needs at least one tap"));
    }
    let s = stats_per_channel as u64;
    let n = taps.len() as u64;
    let c_n = out_channels as u64;
    let pooling: u64 = taps.iter().map(|&(c, h, w)| s * (c * h * w) as u64).sum();
    let projections: u64 = taps.iter().map(|&(c, _, _)| s * c as u64 * fused).sum();
    let integration = match variant {
        Variant::Se => 0,
        Variant::Bav1 => n * fused + (n - 1) * fused,
        Variant::Bav2 => n * fused + fused,
    };
    let generation = fused + fused * c_n + c_n;
    let rescale = c_n * out_spatial as u64;
    Ok(pooling + projections + integration + generation + rescale)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_arithmetic() {
        assert_eq!(paper_extra_params(Variant::Bav1, 3, 256, 16).unwrap(), 48);
        assert_eq!(paper_extra_params(Variant::Bav2, 3, 256, 16).unwrap(), 19);
        assert_eq!(paper_extra_params(Variant::Bav2, 2, 64, 16).unwrap(), 6);
        assert_eq!(paper_extra_params(Variant::Se, 1, 64, 16).unwrap(), 0);
        assert!(paper_extra_params(Variant::Bav2, 3, 100, 16).is_err());
    }

    #[test]
    fn single_branch_projection_matches_se() {
        let c = 128;
        let se = attention_param_count(Variant::Se, &[c], c, 16, 1, Counting::Actual).unwrap();
        for v in [Variant::Bav1, Variant::Bav2] {
            let ba = attention_param_count(v, &[c], c, 16, 1, Counting::Actual).unwrap();
            let extras = match v {
                Variant::Bav1 => 2 * (c / 16),
                _ => 1 + 2 * (c / 16),
            };
            assert_eq!(ba - extras, se);
        }
    }

    #[test]
    fn bottleneck_actual_count() {
        let widths = [64, 64, 256];
        let proj: usize = widths.iter().map(|c| c * 16).sum();
        let v2 = attention_param_count(Variant::Bav2, &widths, 256, 16, 1, Counting::Actual).unwrap();
        assert_eq!(v2, proj + 16 * 256 + 3 + 32);
        let v1 = attention_param_count(Variant::Bav1, &widths, 256, 16, 1, Counting::Actual).unwrap();
        assert_eq!(v1, proj + 16 * 256 + 3 * 32);
    }
}
