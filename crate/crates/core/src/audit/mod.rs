//! Symbolic ResNet descriptions and closed-form parameter/FLOP counts.
//!
//! Nothing here allocates weights. Counts follow the multiply-accumulate
//! convention: a conv costs `Cout·Cin·k²·H'·W'`, a linear `Din·Dout`, and
//! batch norm, ReLU, pooling, the residual add and the attention rescale
//! cost one op per element.

pub mod reference;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::count::{attention_flops, attention_param_count, TapShape};
use crate::attention::{reduced_width, AttentionConfig, Counting, Variant};
use crate::blocks::{ConvBlockKind, ConvBlockSpec, TapPoint};
use crate::error::{Error, Result};

pub use reference::{ReferenceCell, ReferenceTable};

pub const PARAMS_TOLERANCE_PCT: f64 = 0.5;
pub const FLOPS_TOLERANCE_PCT: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backbone {
    Resnet18,
    Resnet34,
    Resnet50,
    Resnet101,
}

impl Backbone {
    pub const ALL: [Backbone; 4] = [Backbone::Resnet18, Backbone::Resnet34, Backbone::Resnet50, Backbone::Resnet101];

    pub fn name(self) -> &'static str {
        match self {
            Backbone::Resnet18 => "resnet18",
            Backbone::Resnet34 => "resnet34",
            Backbone::Resnet50 => "resnet50",
            Backbone::Resnet101 => "resnet101",
        }
    }

    fn plan(self) -> (ConvBlockKind, [usize; 4]) {
        match self {
            Backbone::Resnet18 => (ConvBlockKind::Basic, [2, 2, 2, 2]),
            Backbone::Resnet34 => (ConvBlockKind::Basic, [3, 4, 6, 3]),
            Backbone::Resnet50 => (ConvBlockKind::Bottleneck, [3, 4, 6, 3]),
            Backbone::Resnet101 => (ConvBlockKind::Bottleneck, [3, 4, 23, 3]),
        }
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Backbone::ALL
            .into_iter()
            .find(|b| b.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown backbone {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StemSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pool_kernel: usize,
    pub pool_stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub kind: ConvBlockKind,
    pub blocks: usize,
    pub width: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub in_features: usize,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub backbone: Backbone,
    pub input_size: usize,
    pub stem: StemSpec,
    pub stages: Vec<StageSpec>,
    pub attention: Option<AttentionConfig>,
    pub head: HeadSpec,
}

/// One block of a resolved architecture, with the context the counts need.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockPlan {
    pub stage: usize,
    pub spec: ConvBlockSpec,
    /// Output width of the preceding block, if any.
    pub prev_out: Option<usize>,
    /// Spatial extent of the block input.
    pub input_hw: (usize, usize),
}

fn out_extent(x: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (x + 2 * padding - kernel) / stride + 1
}

impl ArchSpec {
    pub fn block_count(&self) -> usize {
        self.stages.iter().map(|s| s.blocks).sum()
    }

    fn stem_out_hw(&self) -> ((usize, usize), (usize, usize)) {
        let s = &self.stem;
        let conv = out_extent(self.input_size, s.kernel, s.stride, s.kernel / 2);
        let pool = out_extent(conv, s.pool_kernel, s.pool_stride, s.pool_kernel / 2);
        ((conv, conv), (pool, pool))
    }

    /// Every block in execution order.
    pub fn blocks(&self) -> Vec<BlockPlan> {
        let mut out = Vec::with_capacity(self.block_count());
        let (_, mut hw) = self.stem_out_hw();
        let mut cin = self.stem.out_channels;
        let mut prev_out = None;
        for (si, stage) in self.stages.iter().enumerate() {
            for bi in 0..stage.blocks {
                let stride = if bi == 0 { stage.stride } else { 1 };
                let mut spec = ConvBlockSpec::new(stage.kind, cin, stage.width, stride);
                spec.attention = self.attention.clone();
                let next = spec.out_channels();
                out.push(BlockPlan {
                    stage: si,
                    spec,
                    prev_out,
                    input_hw: hw,
                });
                hw = (out_extent(hw.0, 3, stride, 1), out_extent(hw.1, 3, stride, 1));
                cin = next;
                prev_out = Some(next);
            }
        }
        out
    }
}

/// Resolves a standard ImageNet ResNet with the given attention in every
/// block. BAv1/BAv2 tap every conv of the block.
pub fn build_arch(backbone: Backbone, attention: Option<Variant>, reduction: usize) -> Result<ArchSpec> {
    build_arch_with(backbone, attention.map(|v| AttentionConfig::new(v, reduction)))
}

pub fn build_arch_with(backbone: Backbone, attention: Option<AttentionConfig>) -> Result<ArchSpec> {
    let (kind, counts) = backbone.plan();
    let widths = [64, 128, 256, 512];
    let stages: Vec<StageSpec> = counts
        .iter()
        .zip(widths)
        .enumerate()
        .map(|(i, (&blocks, width))| StageSpec {
            kind,
            blocks,
            width,
            stride: if i == 0 { 1 } else { 2 },
        })
        .collect();
    let last = ConvBlockSpec::new(kind, widths[3], widths[3], 1).out_channels();
    let arch = ArchSpec {
        backbone,
        input_size: 224,
        stem: StemSpec {
            in_channels: 3,
            out_channels: 64,
            kernel: 7,
            stride: 2,
            pool_kernel: 3,
            pool_stride: 2,
        },
        stages,
        attention,
        head: HeadSpec {
            in_features: last,
            classes: 1000,
        },
    };
    if let Some(cfg) = &arch.attention {
        for b in arch.blocks() {
            reduced_width(b.spec.out_channels(), cfg.reduction)?;
            b.spec.tap_widths(b.prev_out)?;
        }
    }
    Ok(arch)
}

/// Counts for one residual block.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockCount {
    /// Every learnable scalar, attention included.
    pub params: u64,
    pub flops: u64,
    pub attention_params: u64,
    /// Attention extras under `Counting::Paper`.
    pub attention_params_paper: u64,
    pub attention_flops: u64,
}

fn tap_shapes(spec: &ConvBlockSpec, prev_out: Option<usize>, input_hw: (usize, usize), out_hw: (usize, usize)) -> Result<Vec<TapShape>> {
    let Some(sources) = spec.resolved_sources() else {
        return Ok(Vec::new());
    };
    let widths = spec.tap_widths(prev_out)?;
    let conv1_hw = match spec.kind {
        ConvBlockKind::Bottleneck => input_hw,
        ConvBlockKind::Basic => out_hw,
    };
    Ok(sources
        .sources()
        .iter()
        .zip(widths)
        .map(|(&t, c)| match t {
            TapPoint::CurrConv1 => (c, conv1_hw.0, conv1_hw.1),
            TapPoint::PrevConv3 | TapPoint::PrevEnd => (c, input_hw.0, input_hw.1),
            TapPoint::PrevAttn => (c, 1, 1),
            TapPoint::CurrConv2 | TapPoint::Adjacent => (c, out_hw.0, out_hw.1),
        })
        .collect())
}

/// Closed-form counts for one block whose input is `input_hw`.
pub fn count_block(spec: &ConvBlockSpec, prev_out: Option<usize>, input_hw: (usize, usize)) -> Result<BlockCount> {
    let (h, w) = input_hw;
    let out_hw = (out_extent(h, 3, spec.stride, 1), out_extent(w, 3, spec.stride, 1));
    let out_px = (out_hw.0 * out_hw.1) as u64;
    let in_px = (h * w) as u64;
    let cout = spec.out_channels() as u64;

    // (cin, cout, kernel, output pixels, followed by ReLU)
    let convs: Vec<(usize, usize, usize, u64, bool)> = match spec.kind {
        ConvBlockKind::Basic => vec![
            (spec.in_channels, spec.width, 3, out_px, true),
            (spec.width, spec.width, 3, out_px, false),
        ],
        ConvBlockKind::Bottleneck => vec![
            (spec.in_channels, spec.width, 1, in_px, true),
            (spec.width, spec.width, 3, out_px, true),
            (spec.width, spec.out_channels(), 1, out_px, false),
        ],
    };
    let mut c = BlockCount::default();
    let mut conv_bn = |cin: usize, co: usize, k: usize, px: u64, relu: bool| {
        let (cin, co, k) = (cin as u64, co as u64, k as u64);
        c.params += cin * co * k * k + 2 * co;
        c.flops += cin * co * k * k * px + co * px * if relu { 2 } else { 1 };
    };
    for &(cin, co, k, px, relu) in &convs {
        conv_bn(cin, co, k, px, relu);
    }
    if spec.has_downsample() {
        conv_bn(spec.in_channels, spec.out_channels(), 1, out_px, false);
    }
    // residual add and the final ReLU
    c.flops += 2 * cout * out_px;

    if let Some(cfg) = &spec.attention {
        let taps = tap_shapes(spec, prev_out, input_hw, out_hw)?;
        let widths: Vec<usize> = taps.iter().map(|t| t.0).collect();
        let stats = cfg.pooling.stats_per_channel();
        let co = spec.out_channels();
        let actual = attention_param_count(cfg.variant, &widths, co, cfg.reduction, stats, Counting::Actual)?;
        let paper = attention_param_count(cfg.variant, &widths, co, cfg.reduction, stats, Counting::Paper)?;
        let flops = attention_flops(cfg.variant, &taps, co, out_hw.0 * out_hw.1, cfg.reduction, stats)?;
        c.attention_params = actual as u64;
        c.attention_params_paper = paper as u64;
        c.attention_flops = flops;
        c.params += c.attention_params;
        c.flops += flops;
    }
    Ok(c)
}

/// One row of the per-stage breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub name: String,
    pub blocks: usize,
    pub params: u64,
    pub flops: u64,
    pub attention_params: u64,
    pub attention_params_paper: u64,
    pub attention_flops: u64,
}

impl StageReport {
    fn empty(name: &str, blocks: usize) -> Self {
        Self {
            name: name.to_string(),
            blocks,
            params: 0,
            flops: 0,
            attention_params: 0,
            attention_params_paper: 0,
            attention_flops: 0,
        }
    }
}

/// Stem, one row per stage, then the head.
pub fn breakdown(arch: &ArchSpec) -> Result<Vec<StageReport>> {
    let s = &arch.stem;
    let ((ch, cw), _) = arch.stem_out_hw();
    let stem_px = (ch * cw) as u64;
    let (cin, cout, k) = (s.in_channels as u64, s.out_channels as u64, s.kernel as u64);
    let mut stem = StageReport::empty("stem", 0);
    stem.params = cin * cout * k * k + 2 * cout;
    // conv, BN, ReLU, then max pooling over the activation
    stem.flops = cin * cout * k * k * stem_px + 3 * cout * stem_px;

    let mut rows = vec![stem];
    rows.extend(arch.stages.iter().enumerate().map(|(i, st)| StageReport::empty(&format!("stage{}", i + 1), st.blocks)));
    let mut last_hw = (0, 0);
    for plan in arch.blocks() {
        let c = count_block(&plan.spec, plan.prev_out, plan.input_hw)?;
        let row = &mut rows[plan.stage + 1];
        row.params += c.params;
        row.flops += c.flops;
        row.attention_params += c.attention_params;
        row.attention_params_paper += c.attention_params_paper;
        row.attention_flops += c.attention_flops;
        let stride = plan.spec.stride;
        last_hw = (out_extent(plan.input_hw.0, 3, stride, 1), out_extent(plan.input_hw.1, 3, stride, 1));
    }

    let (din, classes) = (arch.head.in_features as u64, arch.head.classes as u64);
    let mut head = StageReport::empty("head", 0);
    head.params = din * classes + classes;
    head.flops = din * (last_hw.0 * last_hw.1) as u64 + din * classes;
    rows.push(head);
    Ok(rows)
}

pub fn count_params(arch: &ArchSpec) -> Result<u64> {
    Ok(breakdown(arch)?.iter().map(|r| r.params).sum())
}

pub fn count_flops(arch: &ArchSpec) -> Result<u64> {
    Ok(breakdown(arch)?.iter().map(|r| r.flops).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CheckStatus {
    Pass,
    Fail,
    NoReference,
}

impl CheckStatus {
    fn of(delta_pct: Option<f64>, tolerance_pct: f64) -> Self {
        match delta_pct {
            None => CheckStatus::NoReference,
            Some(d) if d.abs() <= tolerance_pct => CheckStatus::Pass,
            Some(_) => CheckStatus::Fail,
        }
    }
}

impl fmt::Display for CheckStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CheckStatus::Pass => "PASS",
            CheckStatus::Fail => "FAIL",
            CheckStatus::NoReference => "NO_REFERENCE",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionOverhead {
    /// Every learnable scalar of the attention modules.
    pub params: u64,
    /// Extras under `Counting::Paper`.
    pub params_paper: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub arch: String,
    pub attention: String,
    pub r: Option<usize>,
    pub input_size: usize,
    pub params_total: u64,
    pub flops_total: u64,
    pub params_paper_ref: Option<u64>,
    /// Signed relative deviation of `params_total` from the reference, in percent.
    pub delta_pct: Option<f64>,
    pub params_status: CheckStatus,
    pub flops_paper_ref: Option<u64>,
    pub flops_delta_pct: Option<f64>,
    pub flops_status: CheckStatus,
    pub per_stage: Vec<StageReport>,
    pub attention_overhead: AttentionOverhead,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.params_status != CheckStatus::Fail && self.flops_status != CheckStatus::Fail
    }

    /// Totals and overhead equal the sums of the per-stage rows.
    pub fn is_additive(&self) -> bool {
        let sum = |f: fn(&StageReport) -> u64| self.per_stage.iter().map(f).sum::<u64>();
        sum(|r| r.params) == self.params_total
            && sum(|r| r.flops) == self.flops_total
            && sum(|r| r.attention_params) == self.attention_overhead.params
            && sum(|r| r.attention_params_paper) == self.attention_overhead.params_paper
            && sum(|r| r.attention_flops) == self.attention_overhead.flops
    }
}

fn pct(value: u64, reference: u64) -> f64 {
    (value as f64 - reference as f64) / reference as f64 * 100.0
}

pub fn audit_report(arch: &ArchSpec, table: &ReferenceTable) -> Result<AuditReport> {
    let per_stage = breakdown(arch)?;
    let params_total = per_stage.iter().map(|r| r.params).sum();
    let flops_total = per_stage.iter().map(|r| r.flops).sum();
    let attention_overhead = AttentionOverhead {
        params: per_stage.iter().map(|r| r.attention_params).sum(),
        params_paper: per_stage.iter().map(|r| r.attention_params_paper).sum(),
        flops: per_stage.iter().map(|r| r.attention_flops).sum(),
    };
    let variant = arch.attention.as_ref().map(|a| a.variant);
    let cell = table.lookup(arch.backbone, variant);
    let params_paper_ref = cell.map(|c| (c.params_millions * 1e6).round() as u64);
    let flops_paper_ref = cell.map(|c| (c.flops_g * 1e9).round() as u64);
    let delta_pct = params_paper_ref.map(|r| pct(params_total, r));
    let flops_delta_pct = flops_paper_ref.map(|r| pct(flops_total, r));
    let report = AuditReport {
        arch: arch.backbone.to_string(),
        attention: variant.map_or_else(|| "none".to_string(), |v| v.to_string()),
        r: arch.attention.as_ref().map(|a| a.reduction),
        input_size: arch.input_size,
        params_total,
        flops_total,
        params_paper_ref,
        delta_pct,
        params_status: CheckStatus::of(delta_pct, PARAMS_TOLERANCE_PCT),
        flops_paper_ref,
        flops_delta_pct,
        flops_status: CheckStatus::of(flops_delta_pct, FLOPS_TOLERANCE_PCT),
        per_stage,
        attention_overhead,
    };
    debug_assert!(report.is_additive());
    Ok(report)
}
