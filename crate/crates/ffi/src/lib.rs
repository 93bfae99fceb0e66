//! C interface: parameter/FLOPs audits, attention weights for caller
//! supplied feature maps, and linear CKA.
//!
//! Every fallible call returns a [`BaStatus`]. On failure the message is
//! kept per thread and read back with [`ba_last_error_message`]. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use bridge_attn::attention::{parse_optional_variant, AttentionConfig, ChannelAttention, PoolingStrategy};
use bridge_attn::audit::{audit_report, build_arch_with, AuditReport, ReferenceTable};
use bridge_attn::cka::{feature_cka, FeatureBatch};
use bridge_attn::param::{Mode, ParamStore, Session};
use bridge_attn::{Error, Tensor};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    NonFinite = 4,
    Degenerate = 5,
    BufferTooSmall = 6,
    Internal = 7,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn fail(status: BaStatus, msg: impl Into<String>) -> BaStatus {
    set_error(msg);
    status
}

fn from_error(e: Error) -> BaStatus {
    let status = match &e {
        Error::Shape(_) => BaStatus::Shape,
        Error::NonFinite { .. } | Error::Diverged { .. } => BaStatus::NonFinite,
        Error::Degenerate(_) | Error::DegenerateVariance(_) => BaStatus::Degenerate,
        Error::Io(_) => BaStatus::Internal,
        _ => BaStatus::InvalidArgument,
    };
    fail(status, e.to_string())
}

/// Runs `f`, turning panics into `Internal`.
fn guard(f: impl FnOnce() -> BaStatus) -> BaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(BaStatus::Internal, "panic inside bridge_attn"),
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, BaStatus> {
    if p.is_null() {
        return Err(fail(BaStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(BaStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// Message of the last failed call on this thread, or null. Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ba_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

#[no_mangle]
pub extern "C" fn ba_clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ba_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// A finished audit of one architecture.
pub struct BaAudit {
    report: AuditReport,
}

fn attention_config(variant: &str, r: u32, pooling: &str) -> bridge_attn::Result<Option<AttentionConfig>> {
    let pooling: PoolingStrategy = pooling.parse()?;
    Ok(parse_optional_variant(variant)?.map(|v| AttentionConfig::new(v, r as usize).with_pooling(pooling)))
}

/// Audits `arch` ("resnet18" .. "resnet101") with `attention` ("none",
/// "se", "bav1", "bav2") at reduction `r` and average pooling.
///
/// # Safety
/// `arch` and `attention` must be NUL-terminated strings; `out` must be a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ba_audit_new(arch: *const c_char, attention: *const c_char, r: u32, out: *mut *mut BaAudit) -> BaStatus {
    guard(|| {
        if out.is_null() {
            return fail(BaStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        let (arch, attention) = match (str_arg(arch, "arch"), str_arg(attention, "attention")) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        let report = (|| {
            let cfg = attention_config(attention, r, "avg")?;
            audit_report(&build_arch_with(arch.parse()?, cfg)?, &ReferenceTable::builtin())
        })();
        match report {
            Ok(report) => {
                *out = Box::into_raw(Box::new(BaAudit { report }));
                BaStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// # Safety
/// `audit` must come from [`ba_audit_new`] or be null.
#[no_mangle]
pub unsafe extern "C" fn ba_audit_free(audit: *mut BaAudit) {
    if !audit.is_null() {
        drop(Box::from_raw(audit));
    }
}

/// Learnable parameters of the whole network; 0 for a null handle.
///
/// # Safety
/// `audit` must come from [`ba_audit_new`] or be null.
#[no_mangle]
pub unsafe extern "C" fn ba_audit_params(audit: *const BaAudit) -> u64 {
    audit.as_ref().map_or(0, |a| a.report.params_total)
}

/// Multiply-accumulates of one forward pass; 0 for a null handle.
///
/// # Safety
/// `audit` must come from [`ba_audit_new`] or be null.
#[no_mangle]
pub unsafe extern "C" fn ba_audit_flops(audit: *const BaAudit) -> u64 {
    audit.as_ref().map_or(0, |a| a.report.flops_total)
}

/// Attention extras under the `paper` counting mode (fusion scalars plus
/// one parameter per BN channel).
///
/// # Safety
/// `audit` must come from [`ba_audit_new`] or be null.
#[no_mangle]
pub unsafe extern "C" fn ba_audit_attention_params_paper(audit: *const BaAudit) -> u64 {
    audit.as_ref().map_or(0, |a| a.report.attention_overhead.params_paper)
}

/// True when neither count misses its reference cell.
///
/// # Safety
/// `audit` must come from [`ba_audit_new`] or be null.
#[no_mangle]
pub unsafe extern "C" fn ba_audit_passed(audit: *const BaAudit) -> bool {
    audit.as_ref().is_some_and(|a| a.report.passed())
}

/// Writes the JSON report plus a NUL into `buf`. `needed` receives the
/// size including the NUL, so a call with `cap == 0` sizes the buffer.
///
/// # Safety
/// `audit` must come from [`ba_audit_new`]; `buf` must hold `cap` bytes
/// (or be null when `cap == 0`); `needed` may be null.
#[no_mangle]
pub unsafe extern "C" fn ba_audit_json(audit: *const BaAudit, buf: *mut c_char, cap: usize, needed: *mut usize) -> BaStatus {
    guard(|| {
        let Some(a) = audit.as_ref() else {
            return fail(BaStatus::NullPointer, "audit is null");
        };
        let json = match serde_json::to_string(&a.report) {
            Ok(j) => j,
            Err(e) => return from_error(e.into()),
        };
        let n = json.len() + 1;
        if !needed.is_null() {
            *needed = n;
        }
        if cap < n {
            return fail(BaStatus::BufferTooSmall, format!("report needs {n} bytes, buffer has {cap}"));
        }
        if buf.is_null() {
            return fail(BaStatus::NullPointer, "buf is null");
        }
        ptr::copy_nonoverlapping(json.as_ptr(), buf.cast::<u8>(), json.len());
        *buf.add(json.len()) = 0;
        BaStatus::Ok
    })
}

/// An attention module with its own seeded parameters, run in eval mode.
pub struct BaAttention {
    module: ChannelAttention,
    store: ParamStore<f64>,
    widths: Vec<usize>,
    out_channels: usize,
}

/// Builds `variant` ("se", "bav1", "bav2") for `n_branches` taps of the
/// given widths; the last tap has `out_channels` channels and is the one
/// SE reads. `pooling` is "avg", "avg_max", "avg_std" or "dct:k".
///
/// # Safety
/// Strings must be NUL-terminated; `widths` must hold `n_branches` values;
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ba_attention_new(
    variant: *const c_char,
    pooling: *const c_char,
    widths: *const usize,
    n_branches: usize,
    out_channels: usize,
    r: u32,
    seed: u64,
    out: *mut *mut BaAttention,
) -> BaStatus {
    guard(|| {
        if out.is_null() || widths.is_null() {
            return fail(BaStatus::NullPointer, "out or widths is null");
        }
        *out = ptr::null_mut();
        let (variant, pooling) = match (str_arg(variant, "variant"), str_arg(pooling, "pooling")) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        if n_branches == 0 {
            return fail(BaStatus::InvalidArgument, "need at least one branch");
        }
        let widths = std::slice::from_raw_parts(widths, n_branches).to_vec();
        if widths.last() != Some(&out_channels) {
            return fail(BaStatus::Shape, format!("last branch has {} channels, out_channels is {out_channels}", widths[n_branches - 1]));
        }
        let built = (|| {
            let cfg = attention_config(variant, r, pooling)?.ok_or_else(|| Error::Config("attention variant \"none\" has no module".into()))?;
            let mut store = ParamStore::<f64>::new(seed);
            let module = ChannelAttention::new(&mut store, "attn", &cfg, &widths, out_channels)?;
            Ok::<_, Error>((module, store))
        })();
        match built {
            Ok((module, store)) => {
                *out = Box::into_raw(Box::new(BaAttention {
                    module,
                    store,
                    widths,
                    out_channels,
                }));
                BaStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// # Safety
/// `attn` must come from [`ba_attention_new`] or be null.
#[no_mangle]
pub unsafe extern "C" fn ba_attention_free(attn: *mut BaAttention) {
    if !attn.is_null() {
        drop(Box::from_raw(attn));
    }
}

/// Learnable scalars of the module.
///
/// # Safety
/// `attn` must come from [`ba_attention_new`] or be null.
#[no_mangle]
pub unsafe extern "C" fn ba_attention_param_count(attn: *const BaAttention) -> usize {
    attn.as_ref().map_or(0, |a| a.store.numel())
}

/// Computes `ω` for a batch of `n` samples. Branch `i` is a contiguous
/// `[n, widths[i], heights[i], widths_px[i]]` array at `inputs[i]`; `omega`
/// receives `n × out_channels` values, row-major.
///
/// # Safety
/// `inputs`, `heights` and `widths_px` must hold one entry per branch, each
/// input must hold its full array, and `omega` must hold `omega_len` values.
#[no_mangle]
pub unsafe extern "C" fn ba_attention_forward(
    attn: *mut BaAttention,
    inputs: *const *const f64,
    n: usize,
    heights: *const usize,
    widths_px: *const usize,
    omega: *mut f64,
    omega_len: usize,
) -> BaStatus {
    guard(|| {
        let Some(a) = attn.as_mut() else {
            return fail(BaStatus::NullPointer, "attention handle is null");
        };
        if inputs.is_null() || heights.is_null() || widths_px.is_null() || omega.is_null() {
            return fail(BaStatus::NullPointer, "inputs, heights, widths_px or omega is null");
        }
        let k = a.widths.len();
        if omega_len != n * a.out_channels {
            return fail(BaStatus::BufferTooSmall, format!("omega needs {} values, got {omega_len}", n * a.out_channels));
        }
        let (ptrs, hs, ws) = (
            std::slice::from_raw_parts(inputs, k),
            std::slice::from_raw_parts(heights, k),
            std::slice::from_raw_parts(widths_px, k),
        );
        let mut tensors = Vec::with_capacity(k);
        for i in 0..k {
            if ptrs[i].is_null() {
                return fail(BaStatus::NullPointer, format!("input {i} is null"));
            }
            let shape = [n, a.widths[i], hs[i], ws[i]];
            let data = std::slice::from_raw_parts(ptrs[i], shape.iter().product()).to_vec();
            match Tensor::new(&shape, data) {
                Ok(t) => tensors.push(t),
                Err(e) => return from_error(e),
            }
        }
        let result = (|| {
            let mut sess = Session::new(&mut a.store, Mode::Eval);
            let taps = tensors.into_iter().map(|t| sess.input(t)).collect::<bridge_attn::Result<Vec<_>>>()?;
            let att = a.module.forward(&mut sess, &taps)?;
            Ok::<_, Error>(sess.value(att.omega).data().to_vec())
        })();
        match result {
            Ok(w) => {
                ptr::copy_nonoverlapping(w.as_ptr(), omega, omega_len);
                BaStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Linear CKA between feature batches `x: [rows, x_cols]` and
/// `y: [rows, y_cols]`, both row-major.
///
/// # Safety
/// `x` and `y` must hold `rows × x_cols` and `rows × y_cols` values;
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ba_cka(x: *const f64, y: *const f64, rows: usize, x_cols: usize, y_cols: usize, out: *mut f64) -> BaStatus {
    guard(|| {
        if x.is_null() || y.is_null() || out.is_null() {
            return fail(BaStatus::NullPointer, "x, y or out is null");
        }
        let xs = std::slice::from_raw_parts(x, rows * x_cols).to_vec();
        let ys = std::slice::from_raw_parts(y, rows * y_cols).to_vec();
        let score = FeatureBatch::new(rows, x_cols, xs).and_then(|fx| feature_cka(&fx, &FeatureBatch::new(rows, y_cols, ys)?));
        match score {
            Ok(v) => {
                *out = v;
                BaStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}
