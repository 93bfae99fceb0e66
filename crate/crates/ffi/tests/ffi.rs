use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use bridge_attn::attention::{AttentionConfig, ChannelAttention, Variant};
use bridge_attn::audit::{audit_report, build_arch, Backbone, ReferenceTable};
use bridge_attn::param::{Mode, ParamStore, Session};
use bridge_attn::Tensor;
use bridge_attn_ffi::*;

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = ba_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn audit(arch: &str, attn: &str) -> Result<*mut BaAudit, BaStatus> {
    let mut h = ptr::null_mut();
    let s = unsafe { ba_audit_new(cstr(arch).as_ptr(), cstr(attn).as_ptr(), 16, &mut h) };
    if s == BaStatus::Ok {
        Ok(h)
    } else {
        assert!(h.is_null());
        Err(s)
    }
}

#[test]
fn audit_handle_matches_library() {
    let h = audit("resnet50", "bav2").unwrap();
    let want = audit_report(&build_arch(Backbone::Resnet50, Some(Variant::Bav2), 16).unwrap(), &ReferenceTable::builtin()).unwrap();
    unsafe {
        assert_eq!(ba_audit_params(h), 28_702_648);
        assert_eq!(ba_audit_flops(h), want.flops_total);
        assert_eq!(ba_audit_attention_params_paper(h), want.attention_overhead.params_paper);
        assert!(ba_audit_passed(h));

        let mut needed = 0;
        assert_eq!(ba_audit_json(h, ptr::null_mut(), 0, &mut needed), BaStatus::BufferTooSmall);
        let mut small = vec![0 as std::ffi::c_char; needed - 1];
        assert_eq!(ba_audit_json(h, small.as_mut_ptr(), small.len(), ptr::null_mut()), BaStatus::BufferTooSmall);
        let mut buf = vec![0 as std::ffi::c_char; needed];
        assert_eq!(ba_audit_json(h, buf.as_mut_ptr(), buf.len(), ptr::null_mut()), BaStatus::Ok);
        let text = CStr::from_ptr(buf.as_ptr()).to_str().unwrap();
        assert_eq!(serde_json::from_str::<serde_json::Value>(text).unwrap(), serde_json::to_value(&want).unwrap());
        ba_audit_free(h);
    }
}

#[test]
fn bad_arguments_report_status_and_message() {
    assert_eq!(audit("resnet7", "none").unwrap_err(), BaStatus::InvalidArgument);
    assert!(last_error().contains("resnet7"));
    assert_eq!(audit("resnet50", "cbam").unwrap_err(), BaStatus::InvalidArgument);
    unsafe {
        assert_eq!(ba_audit_new(ptr::null(), cstr("se").as_ptr(), 16, &mut ptr::null_mut()), BaStatus::NullPointer);
        assert_eq!(ba_audit_new(cstr("resnet50").as_ptr(), cstr("se").as_ptr(), 16, ptr::null_mut()), BaStatus::NullPointer);
        assert_eq!(ba_audit_params(ptr::null()), 0);
        assert!(!ba_audit_passed(ptr::null()));
        ba_audit_free(ptr::null_mut());
        ba_attention_free(ptr::null_mut());
    }
    ba_clear_error();
    assert!(ba_last_error_message().is_null());
    let v = unsafe { CStr::from_ptr(ba_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

fn attention(variant: &str, widths: &[usize], out: usize, seed: u64) -> Result<*mut BaAttention, BaStatus> {
    let mut h = ptr::null_mut();
    let s = unsafe { ba_attention_new(cstr(variant).as_ptr(), cstr("avg").as_ptr(), widths.as_ptr(), widths.len(), out, 4, seed, &mut h) };
    if s == BaStatus::Ok {
        Ok(h)
    } else {
        Err(s)
    }
}

#[test]
fn attention_forward_matches_library() {
    let widths = [8, 16, 16];
    let sizes = [6usize, 3, 3];
    let n = 3;
    let inputs: Vec<Tensor<f64>> = widths
        .iter()
        .zip(sizes)
        .enumerate()
        .map(|(i, (&c, s))| Tensor::new(&[n, c, s, s], (0..n * c * s * s).map(|k| ((k * 37 + i * 11) % 23) as f64 / 23.0 - 0.5).collect()).unwrap())
        .collect();
    for (name, variant) in [("se", Variant::Se), ("bav1", Variant::Bav1), ("bav2", Variant::Bav2)] {
        let h = attention(name, &widths, 16, 5).unwrap();
        let ptrs: Vec<*const f64> = inputs.iter().map(|t| t.data().as_ptr()).collect();
        let mut omega = vec![0.0; n * 16];
        let s = unsafe { ba_attention_forward(h, ptrs.as_ptr(), n, sizes.as_ptr(), sizes.as_ptr(), omega.as_mut_ptr(), omega.len()) };
        assert_eq!(s, BaStatus::Ok, "{name}: {}", last_error());

        let mut store = ParamStore::<f64>::new(5);
        let m = ChannelAttention::new(&mut store, "attn", &AttentionConfig::new(variant, 4), &widths, 16).unwrap();
        assert_eq!(unsafe { ba_attention_param_count(h) }, store.numel());
        let mut sess = Session::new(&mut store, Mode::Eval);
        let taps: Vec<_> = inputs.iter().map(|t| sess.input(t.clone()).unwrap()).collect();
        let out = m.forward(&mut sess, &taps).unwrap();
        assert_eq!(sess.value(out.omega).data(), &omega[..], "{name}");
        assert!(omega.iter().all(|&w| w > 0.0 && w < 1.0));

        let mut short = vec![0.0; n * 16 - 1];
        let s = unsafe { ba_attention_forward(h, ptrs.as_ptr(), n, sizes.as_ptr(), sizes.as_ptr(), short.as_mut_ptr(), short.len()) };
        assert_eq!(s, BaStatus::BufferTooSmall);
        unsafe { ba_attention_free(h) };
    }
    assert_eq!(attention("bav2", &[8, 16], 32, 0).unwrap_err(), BaStatus::Shape);
    assert_eq!(attention("none", &[16], 16, 0).unwrap_err(), BaStatus::InvalidArgument);
    assert_eq!(attention("bav2", &[], 16, 0).unwrap_err(), BaStatus::InvalidArgument);
}

#[test]
fn cka_entry_point() {
    let rows = 10;
    let x: Vec<f64> = (0..rows * 3).map(|k| ((k * 13) % 17) as f64).collect();
    let scaled: Vec<f64> = x.iter().map(|v| -2.5 * v).collect();
    let mut out = f64::NAN;
    unsafe {
        assert_eq!(ba_cka(x.as_ptr(), scaled.as_ptr(), rows, 3, 3, &mut out), BaStatus::Ok);
        assert!((out - 1.0).abs() < 1e-12);
        let constant = vec![1.0; rows * 2];
        assert_eq!(ba_cka(x.as_ptr(), constant.as_ptr(), rows, 3, 2, &mut out), BaStatus::Degenerate);
        assert_eq!(ba_cka(ptr::null(), x.as_ptr(), rows, 3, 3, &mut out), BaStatus::NullPointer);
    }
}

fn compiler() -> Option<&'static str> {
    ["cc", "clang", "gcc"].into_iter().find(|c| Command::new(c).arg("--version").output().is_ok_and(|o| o.status.success()))
}

fn include_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include")
}

#[test]
fn header_compiles_as_c_and_cpp() {
    let Some(cc) = compiler() else {
        eprintln!("no C compiler found; header check skipped");
        return;
    };
    let smoke = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/smoke.c");
    let dir = tempfile::tempdir().unwrap();
    let c = Command::new(cc)
        .args(["-std=c99", "-Wall", "-Wextra", "-Werror", "-c", "-o"])
        .arg(dir.path().join("smoke.o"))
        .arg("-I")
        .arg(include_dir())
        .arg(&smoke)
        .output()
        .unwrap();
    assert!(c.status.success(), "{}", String::from_utf8_lossy(&c.stderr));
    let cpp = Command::new(cc)
        .args(["-x", "c++", "-fsyntax-only", "-Wall", "-Werror", "-I"])
        .arg(include_dir())
        .arg(&smoke)
        .output()
        .unwrap();
    assert!(cpp.status.success(), "{}", String::from_utf8_lossy(&cpp.stderr));

    // link against the static library next to this test binary when cargo built one
    let exe = std::env::current_exe().unwrap();
    let lib = exe.parent().and_then(Path::parent).unwrap().join("libbridge_attn_ffi.a");
    if !lib.exists() {
        eprintln!("{} not found; link check skipped", lib.display());
        return;
    }
    let bin = dir.path().join("smoke");
    let link = Command::new(cc)
        .arg(dir.path().join("smoke.o"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .output()
        .unwrap();
    assert!(link.status.success(), "{}", String::from_utf8_lossy(&link.stderr));
    let run = Command::new(&bin).output().unwrap();
    assert!(run.status.success());
    let text = String::from_utf8(run.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("28702648 4133818224 1 0"));
    let (status, w) = lines.next().unwrap().split_once(' ').unwrap();
    assert_eq!(status, "0");
    let w: f64 = w.parse().unwrap();
    assert!(w > 0.0 && w < 1.0);
}
