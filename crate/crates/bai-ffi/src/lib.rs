//! C bindings for the checkpoint, merge, oracle-reward, and detector core.
//!
//! Conventions:
//! - Every fallible call returns a [`BaiStatus`]; `BAI_STATUS_OK` (0) means
//!   success. The nonzero codes mirror the CLI's exit codes, plus
//!   `BAI_STATUS_USAGE` (1) for contract violations at the boundary itself
//!   (null pointers, non-UTF-8 strings, undersized buffers).
//! - On any failure, [`bai_last_error`] returns a thread-local, NUL-terminated
//!   description. The pointer stays valid until the next failing call on the
//!   same thread.
//! - Checkpoints travel as opaque [`BaiCheckpoint`] handles. Every handle
//!   produced by a load or merge call is owned by the caller and must be
//!   released with [`bai_checkpoint_free`] exactly once.
//! - No function stores the pointers it is given; inputs are read during the
//!   call only. Handles are immutable after creation, so sharing one across
//!   threads for concurrent reads is safe.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::slice;

use bai_core::analysis::{detect_collapse, detect_hockey_stick};
use bai_core::merge::{bai_merge, merge_linear};
use bai_core::store::{checksum, load_checkpoint, save_checkpoint};
use bai_core::synth::oracle_reward;
use bai_core::tensor::Checkpoint;
use bai_core::Error;

/// Call outcome. Values above `BAI_STATUS_OK` match the CLI exit codes for
/// the same failure families.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaiStatus {
    Ok = 0,
    /// The call itself was malformed: null pointer, non-UTF-8 string, or an
    /// output buffer too small for the result.
    Usage = 1,
    /// Invalid configuration or parameters (includes weight-sum violations).
    Config = 2,
    /// Malformed or incompatible data (bad container bytes, mismatched
    /// tensor sets, series too short for a detector).
    Data = 3,
    /// Non-finite values where finiteness is required.
    Numeric = 4,
    /// Filesystem failure.
    Io = 5,
}

/// An in-memory checkpoint: named tensors plus string metadata.
pub struct BaiCheckpoint {
    inner: Checkpoint,
}

/// Sequence-length collapse verdict; see `bai_detect_collapse`.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct BaiCollapseReport {
    pub collapsed: bool,
    /// True when an onset step was found (always true when `collapsed` is).
    pub has_onset: bool,
    /// Meaningful only when `has_onset` is true.
    pub onset_step: usize,
    /// Minimum of the smoothed series (from the onset on, when collapsed).
    pub trough_value: f64,
}

/// Decline-trough-recovery verdict; see `bai_detect_hockey_stick`.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct BaiHockeyStickReport {
    pub shaped: bool,
    /// Step of the smoothed global minimum (first occurrence on ties).
    pub min_step: usize,
    pub initial: f64,
    pub trough: f64,
    pub final_value: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    // Interior NULs cannot come from our error formatting, but never panic
    // across the boundary over one.
    let c = CString::new(msg.replace('\0', "?")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn fail(status: BaiStatus, msg: &str) -> BaiStatus {
    set_error(msg);
    status
}

fn fail_with(err: &Error) -> BaiStatus {
    let status = match err.exit_code() {
        2 => BaiStatus::Config,
        3 => BaiStatus::Data,
        4 => BaiStatus::Numeric,
        _ => BaiStatus::Io,
    };
    fail(status, &err.to_string())
}

/// # Safety
/// `ptr` must be null or a NUL-terminated C string valid for reads.
unsafe fn str_arg<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, BaiStatus> {
    if ptr.is_null() {
        return Err(fail(BaiStatus::Usage, &format!("{what} is null")));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| fail(BaiStatus::Usage, &format!("{what} is not valid UTF-8")))
}

fn out_arg<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, BaiStatus> {
    // Safety: caller contract; checked for null here.
    unsafe { ptr.as_mut() }.ok_or_else(|| fail(BaiStatus::Usage, &format!("{what} is null")))
}

fn ckpt_arg<'a>(ptr: *const BaiCheckpoint, what: &str) -> Result<&'a Checkpoint, BaiStatus> {
    // Safety: caller contract; checked for null here.
    match unsafe { ptr.as_ref() } {
        Some(h) => Ok(&h.inner),
        None => Err(fail(BaiStatus::Usage, &format!("{what} is null"))),
    }
}

/// # Safety
/// `ptr` must be null or valid for `len` reads.
unsafe fn slice_arg<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], BaiStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(fail(BaiStatus::Usage, &format!("{what} is null with nonzero length")));
    }
    Ok(slice::from_raw_parts(ptr, len))
}

fn give(out: &mut *mut BaiCheckpoint, ckpt: Checkpoint) -> BaiStatus {
    *out = Box::into_raw(Box::new(BaiCheckpoint { inner: ckpt }));
    BaiStatus::Ok
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bai_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Description of the most recent failure on this thread (empty string if
/// none). Valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn bai_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Load a checkpoint container from `path` into a fresh handle at `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn bai_checkpoint_load(
    path: *const c_char,
    out: *mut *mut BaiCheckpoint,
) -> BaiStatus {
    let out = match out_arg(out, "out") {
        Ok(v) => v,
        Err(s) => return s,
    };
    let path = match str_arg(path, "path") {
        Ok(v) => v,
        Err(s) => return s,
    };
    match load_checkpoint(Path::new(path)) {
        Ok(ckpt) => give(out, ckpt),
        Err(e) => fail_with(&e),
    }
}

/// Write `ckpt` to `path` in the canonical container format.
///
/// # Safety
/// `ckpt` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn bai_checkpoint_save(
    ckpt: *const BaiCheckpoint,
    path: *const c_char,
) -> BaiStatus {
    let ckpt = match ckpt_arg(ckpt, "ckpt") {
        Ok(v) => v,
        Err(s) => return s,
    };
    let path = match str_arg(path, "path") {
        Ok(v) => v,
        Err(s) => return s,
    };
    match save_checkpoint(ckpt, Path::new(path)) {
        Ok(()) => BaiStatus::Ok,
        Err(e) => fail_with(&e),
    }
}

/// Release a handle. Passing null is a no-op; passing the same handle twice
/// is undefined behavior.
///
/// # Safety
/// `ckpt` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bai_checkpoint_free(ckpt: *mut BaiCheckpoint) {
    if !ckpt.is_null() {
        drop(Box::from_raw(ckpt));
    }
}

/// Number of tensors in the checkpoint.
///
/// # Safety
/// `ckpt` must be a live handle; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn bai_checkpoint_n_tensors(
    ckpt: *const BaiCheckpoint,
    out: *mut usize,
) -> BaiStatus {
    let out = match out_arg(out, "out") {
        Ok(v) => v,
        Err(s) => return s,
    };
    match ckpt_arg(ckpt, "ckpt") {
        Ok(c) => {
            *out = c.n_tensors();
            BaiStatus::Ok
        }
        Err(s) => s,
    }
}

/// Hex SHA-256 of the checkpoint's canonical container bytes, written as a
/// NUL-terminated string into `buf` (needs at least 65 bytes).
///
/// # Safety
/// `ckpt` must be a live handle; `buf` valid for `buflen` writes.
#[no_mangle]
pub unsafe extern "C" fn bai_checkpoint_digest(
    ckpt: *const BaiCheckpoint,
    buf: *mut c_char,
    buflen: usize,
) -> BaiStatus {
    let ckpt = match ckpt_arg(ckpt, "ckpt") {
        Ok(v) => v,
        Err(s) => return s,
    };
    if buf.is_null() {
        return fail(BaiStatus::Usage, "buf is null");
    }
    let hex = match checksum(ckpt) {
        Ok(h) => h,
        Err(e) => return fail_with(&e),
    };
    if buflen < hex.len() + 1 {
        return fail(
            BaiStatus::Usage,
            &format!("digest buffer needs {} bytes, got {buflen}", hex.len() + 1),
        );
    }
    let dst = slice::from_raw_parts_mut(buf as *mut u8, hex.len() + 1);
    dst[..hex.len()].copy_from_slice(hex.as_bytes());
    dst[hex.len()] = 0;
    BaiStatus::Ok
}

/// Weighted combination of `n` checkpoints: `Σ weights[i] · ckpts[i]`.
/// Weights must sum to 1 within 1e-6 — they are never silently renormalized —
/// and all checkpoints must carry identical tensor sets. The result holds the
/// merged tensors and provenance metadata; write it to `*out`.
///
/// # Safety
/// `ckpts` must point to `n` live handles, `weights` to `n` doubles, and
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn bai_merge_linear(
    ckpts: *const *const BaiCheckpoint,
    weights: *const f64,
    n: usize,
    out: *mut *mut BaiCheckpoint,
) -> BaiStatus {
    let out = match out_arg(out, "out") {
        Ok(v) => v,
        Err(s) => return s,
    };
    let handles = match slice_arg(ckpts, n, "ckpts") {
        Ok(v) => v,
        Err(s) => return s,
    };
    let weights = match slice_arg(weights, n, "weights") {
        Ok(v) => v,
        Err(s) => return s,
    };
    let mut pairs = Vec::with_capacity(n);
    for (i, (&h, &w)) in handles.iter().zip(weights).enumerate() {
        match ckpt_arg(h, &format!("ckpts[{i}]")) {
            Ok(c) => pairs.push((c, w)),
            Err(s) => return s,
        }
    }
    match merge_linear(&pairs) {
        Ok(ckpt) => give(out, ckpt),
        Err(e) => fail_with(&e),
    }
}

/// Second-stage interpolation toward a base model:
/// `alpha · base + (1 − alpha) · merged`, with `alpha` in [0, 1].
///
/// # Safety
/// `base` and `merged` must be live handles; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn bai_merge_balanced(
    base: *const BaiCheckpoint,
    merged: *const BaiCheckpoint,
    alpha: f64,
    out: *mut *mut BaiCheckpoint,
) -> BaiStatus {
    let out = match out_arg(out, "out") {
        Ok(v) => v,
        Err(s) => return s,
    };
    let base = match ckpt_arg(base, "base") {
        Ok(v) => v,
        Err(s) => return s,
    };
    let merged = match ckpt_arg(merged, "merged") {
        Ok(v) => v,
        Err(s) => return s,
    };
    match bai_merge(base, merged, alpha) {
        Ok(ckpt) => give(out, ckpt),
        Err(e) => fail_with(&e),
    }
}

/// Ground-truth episode score, independent of any learned model: +1 for a
/// correct answer digit after the last answer marker, +0.2 · min(len, 40)/40
/// length bonus, −0.3 if any token repeats 8+ times consecutively.
/// `prompt` must be a well-formed 4-token task prompt.
///
/// # Safety
/// `prompt` and `response` must be valid for their stated lengths; `out`
/// valid for writes.
#[no_mangle]
pub unsafe extern "C" fn bai_oracle_reward(
    prompt: *const u32,
    prompt_len: usize,
    response: *const u32,
    response_len: usize,
    out: *mut f64,
) -> BaiStatus {
    let out = match out_arg(out, "out") {
        Ok(v) => v,
        Err(s) => return s,
    };
    let prompt = match slice_arg(prompt, prompt_len, "prompt") {
        Ok(v) => v,
        Err(s) => return s,
    };
    let response = match slice_arg(response, response_len, "response") {
        Ok(v) => v,
        Err(s) => return s,
    };
    match oracle_reward(prompt, response) {
        Ok(r) => {
            *out = r;
            BaiStatus::Ok
        }
        Err(e) => fail_with(&e),
    }
}

/// Sequence-length collapse detector. Smooths `series` with a centered
/// radius-2 moving average, then reports a collapse when the smoothed value
/// falls below `drop_frac · initial` within the first `window_steps` steps
/// and never exceeds `recovery_frac · initial` afterwards.
///
/// # Safety
/// `series` must be valid for `len` reads; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn bai_detect_collapse(
    series: *const f64,
    len: usize,
    drop_frac: f64,
    window_steps: usize,
    recovery_frac: f64,
    out: *mut BaiCollapseReport,
) -> BaiStatus {
    let out = match out_arg(out, "out") {
        Ok(v) => v,
        Err(s) => return s,
    };
    let series = match slice_arg(series, len, "series") {
        Ok(v) => v,
        Err(s) => return s,
    };
    match detect_collapse(series, drop_frac, window_steps, recovery_frac) {
        Ok(r) => {
            *out = BaiCollapseReport {
                collapsed: r.collapsed,
                has_onset: r.onset_step.is_some(),
                onset_step: r.onset_step.unwrap_or(0),
                trough_value: r.trough_value,
            };
            BaiStatus::Ok
        }
        Err(e) => fail_with(&e),
    }
}

/// Decline-trough-recovery detector on a reward series. Smooths with a
/// centered moving average of `smooth_radius`, then reports the shape when
/// the global minimum sits strictly after the start, at least
/// `margin_frac · (smoothed range)` below the initial value, with the final
/// value at least that margin above the trough. Needs more than
/// `2 · smooth_radius + 1` points.
///
/// # Safety
/// `series` must be valid for `len` reads; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn bai_detect_hockey_stick(
    series: *const f64,
    len: usize,
    smooth_radius: usize,
    margin_frac: f64,
    out: *mut BaiHockeyStickReport,
) -> BaiStatus {
    let out = match out_arg(out, "out") {
        Ok(v) => v,
        Err(s) => return s,
    };
    let series = match slice_arg(series, len, "series") {
        Ok(v) => v,
        Err(s) => return s,
    };
    match detect_hockey_stick(series, smooth_radius, margin_frac) {
        Ok(r) => {
            *out = BaiHockeyStickReport {
                shaped: r.shaped,
                min_step: r.min_step,
                initial: r.initial,
                trough: r.trough,
                final_value: r.final_value,
            };
            BaiStatus::Ok
        }
        Err(e) => fail_with(&e),
    }
}

// ---------------------------------------------------------------------------
// tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;
    use std::ffi::CString;
    use std::ptr;

    use bai_core::tensor::Tensor;

    fn fixture(scale: f64) -> Checkpoint {
        let mut meta = BTreeMap::new();
        meta.insert("arch".to_string(), "test".to_string());
        meta.insert("vocab".to_string(), "8".to_string());
        let mut c = Checkpoint::new(meta);
        c.insert(Tensor::f64("w", vec![2, 2], vec![scale, 2.0 * scale, 3.0 * scale, 4.0 * scale]))
            .unwrap();
        c.insert(Tensor::f32("b", vec![2], vec![scale as f32, -1.0])).unwrap();
        c
    }

    fn handle(c: Checkpoint) -> *mut BaiCheckpoint {
        Box::into_raw(Box::new(BaiCheckpoint { inner: c }))
    }

    fn last_error() -> String {
        unsafe { CStr::from_ptr(bai_last_error()) }.to_str().unwrap().to_string()
    }

    fn digest_of(h: *const BaiCheckpoint) -> String {
        let mut buf = [0i8; 65];
        let st = unsafe { bai_checkpoint_digest(h, buf.as_mut_ptr() as *mut c_char, buf.len()) };
        assert_eq!(st, BaiStatus::Ok);
        unsafe { CStr::from_ptr(buf.as_ptr() as *const c_char) }.to_str().unwrap().to_string()
    }

    // ------------------------------------------------------ status plumbing

    #[test]
    fn version_is_a_static_string() {
        let v = unsafe { CStr::from_ptr(bai_version()) }.to_str().unwrap();
        assert_eq!(v, env!("CARGO_PKG_VERSION"));
    }

    #[test]
    fn null_arguments_are_usage_errors_with_messages() {
        let mut out: *mut BaiCheckpoint = ptr::null_mut();
        let st = unsafe { bai_checkpoint_load(ptr::null(), &mut out) };
        assert_eq!(st, BaiStatus::Usage);
        assert_eq!(last_error(), "path is null");

        let path = CString::new("x.ckpt").unwrap();
        let st = unsafe { bai_checkpoint_load(path.as_ptr(), ptr::null_mut()) };
        assert_eq!(st, BaiStatus::Usage);

        let st = unsafe { bai_checkpoint_save(ptr::null(), path.as_ptr()) };
        assert_eq!(st, BaiStatus::Usage);
        assert_eq!(last_error(), "ckpt is null");

        // freeing null is a defined no-op
        unsafe { bai_checkpoint_free(ptr::null_mut()) };
    }

    #[test]
    fn load_missing_file_is_io_with_path_in_message() {
        let path = CString::new("/nonexistent/definitely/missing.ckpt").unwrap();
        let mut out: *mut BaiCheckpoint = ptr::null_mut();
        let st = unsafe { bai_checkpoint_load(path.as_ptr(), &mut out) };
        assert_eq!(st, BaiStatus::Io);
        assert!(out.is_null());
        assert!(last_error().contains("missing.ckpt"), "{}", last_error());
    }

    // -------------------------------------------------------- save and load

    #[test]
    fn save_load_digest_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let cpath = CString::new(path.to_str().unwrap()).unwrap();

        let h = handle(fixture(1.0));
        let st = unsafe { bai_checkpoint_save(h, cpath.as_ptr()) };
        assert_eq!(st, BaiStatus::Ok);

        let mut reloaded: *mut BaiCheckpoint = ptr::null_mut();
        let st = unsafe { bai_checkpoint_load(cpath.as_ptr(), &mut reloaded) };
        assert_eq!(st, BaiStatus::Ok);

        // digest via the boundary == checksum computed natively
        let native = checksum(&fixture(1.0)).unwrap();
        assert_eq!(digest_of(h), native);
        assert_eq!(digest_of(reloaded), native);

        let mut n = 0usize;
        assert_eq!(unsafe { bai_checkpoint_n_tensors(reloaded, &mut n) }, BaiStatus::Ok);
        assert_eq!(n, 2);

        let mut tiny = [0i8; 10];
        let st = unsafe { bai_checkpoint_digest(h, tiny.as_mut_ptr() as *mut c_char, tiny.len()) };
        assert_eq!(st, BaiStatus::Usage);
        assert!(last_error().contains("65 bytes"), "{}", last_error());

        unsafe {
            bai_checkpoint_free(h);
            bai_checkpoint_free(reloaded);
        }
    }

    // --------------------------------------------------------------- merges

    #[test]
    fn merge_linear_matches_native_and_rejects_bad_weight_sums() {
        let a = handle(fixture(1.0));
        let b = handle(fixture(3.0));
        let handles = [a as *const BaiCheckpoint, b as *const BaiCheckpoint];

        let mut out: *mut BaiCheckpoint = ptr::null_mut();
        let st = unsafe { bai_merge_linear(handles.as_ptr(), [0.5, 0.5].as_ptr(), 2, &mut out) };
        assert_eq!(st, BaiStatus::Ok);
        let native = merge_linear(&[(&fixture(1.0), 0.5), (&fixture(3.0), 0.5)]).unwrap();
        assert_eq!(digest_of(out), checksum(&native).unwrap());
        unsafe { bai_checkpoint_free(out) };

        // Σw = 0.9 → config error, never silently renormalized
        let mut out: *mut BaiCheckpoint = ptr::null_mut();
        let st = unsafe { bai_merge_linear(handles.as_ptr(), [0.5, 0.4].as_ptr(), 2, &mut out) };
        assert_eq!(st, BaiStatus::Config);
        assert!(out.is_null());
        assert!(last_error().contains("sum to 1"), "{}", last_error());

        unsafe {
            bai_checkpoint_free(a);
            bai_checkpoint_free(b);
        }
    }

    #[test]
    fn merge_balanced_endpoints_reproduce_the_inputs() {
        let base = handle(fixture(1.0));
        let sft = handle(fixture(5.0));

        // alpha=1 keeps the base tensors; alpha=0 keeps the sft tensors.
        for (alpha, want) in [(1.0, fixture(1.0)), (0.0, fixture(5.0))] {
            let mut out: *mut BaiCheckpoint = ptr::null_mut();
            let st = unsafe { bai_merge_balanced(base, sft, alpha, &mut out) };
            assert_eq!(st, BaiStatus::Ok);
            let got = unsafe { &(*out).inner };
            for (name, t) in want.iter() {
                let g = got.get(name).unwrap();
                for i in 0..t.len() {
                    assert_eq!(g.get(i), t.get(i), "{name}[{i}] at alpha {alpha}");
                }
            }
            unsafe { bai_checkpoint_free(out) };
        }

        let mut out: *mut BaiCheckpoint = ptr::null_mut();
        let st = unsafe { bai_merge_balanced(base, sft, 1.5, &mut out) };
        assert_eq!(st, BaiStatus::Config);

        unsafe {
            bai_checkpoint_free(base);
            bai_checkpoint_free(sft);
        }
    }

    // ------------------------------------------------------- oracle scoring

    #[test]
    fn oracle_reward_matches_native_scoring() {
        // BOS D2 D3 D4 → answer (2+3+4)%10 = 9; response ANS D9 EOS
        let prompt: [u32; 4] = [1, 6, 7, 8];
        let response: [u32; 3] = [3, 13, 2];
        let mut got = 0.0f64;
        let st = unsafe {
            bai_oracle_reward(prompt.as_ptr(), 4, response.as_ptr(), 3, &mut got)
        };
        assert_eq!(st, BaiStatus::Ok);
        assert_eq!(got, oracle_reward(&prompt, &response).unwrap());

        // malformed prompt → data error through the boundary
        let bad: [u32; 4] = [0, 0, 0, 0];
        let st = unsafe { bai_oracle_reward(bad.as_ptr(), 4, response.as_ptr(), 3, &mut got) };
        assert_eq!(st, BaiStatus::Data);
    }

    // ------------------------------------------------------------ detectors

    #[test]
    fn detectors_agree_with_native_verdicts() {
        // 30 steps: drop from 50 to 4 by step 5, stay low → collapse. The
        // radius-2 smoothing puts the initial at (50+40+25)/3 = 38.33 and the
        // first smoothed value under half of that at step 3.
        let mut lens = vec![50.0, 40.0, 25.0, 12.0, 6.0];
        lens.extend(std::iter::repeat(4.0).take(25));
        let mut rep = BaiCollapseReport {
            collapsed: false,
            has_onset: false,
            onset_step: 0,
            trough_value: 0.0,
        };
        let st = unsafe {
            bai_detect_collapse(lens.as_ptr(), lens.len(), 0.5, 6, 0.75, &mut rep)
        };
        assert_eq!(st, BaiStatus::Ok);
        let native = detect_collapse(&lens, 0.5, 6, 0.75).unwrap();
        assert_eq!(rep.collapsed, native.collapsed);
        assert_eq!(rep.has_onset, native.onset_step.is_some());
        assert_eq!(rep.onset_step, native.onset_step.unwrap());
        assert_eq!(rep.trough_value, native.trough_value);
        assert!(rep.collapsed);

        // v-shaped rewards → hockey stick fires
        let rw: Vec<f64> = (0..20).map(|i| (i as f64 - 8.0).abs()).collect();
        let mut hs = BaiHockeyStickReport {
            shaped: false,
            min_step: 0,
            initial: 0.0,
            trough: 0.0,
            final_value: 0.0,
        };
        let st = unsafe { bai_detect_hockey_stick(rw.as_ptr(), rw.len(), 2, 0.05, &mut hs) };
        assert_eq!(st, BaiStatus::Ok);
        let native = detect_hockey_stick(&rw, 2, 0.05).unwrap();
        assert_eq!(hs.shaped, native.shaped);
        assert_eq!(hs.min_step, native.min_step);
        assert_eq!(hs.trough, native.trough);
        assert!(hs.shaped);

        // too-short series surfaces as a data error
        let st = unsafe { bai_detect_hockey_stick(rw.as_ptr(), 4, 2, 0.05, &mut hs) };
        assert_eq!(st, BaiStatus::Data);
        assert!(last_error().contains("too short"), "{}", last_error());
    }

    // ------------------------------------------------------------ artifacts

    #[test]
    fn generated_header_declares_the_full_surface() {
        let header = include_str!("../include/bai.h");
        for symbol in [
            "bai_version",
            "bai_last_error",
            "bai_checkpoint_load",
            "bai_checkpoint_save",
            "bai_checkpoint_free",
            "bai_checkpoint_n_tensors",
            "bai_checkpoint_digest",
            "bai_merge_linear",
            "bai_merge_balanced",
            "bai_oracle_reward",
            "bai_detect_collapse",
            "bai_detect_hockey_stick",
            "BaiStatus",
            "BaiCheckpoint",
            "BaiCollapseReport",
            "BaiHockeyStickReport",
        ] {
            assert!(header.contains(symbol), "header is missing {symbol}");
        }
    }
}
