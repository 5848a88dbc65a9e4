//! C ABI over the laboratory's checkpoint, evaluation, training, and
//! identity-check entry points. All functions return an `ItroStatus` code;
//! on failure a thread-local message is retrievable with
//! `itro_last_error_message`. Handles are opaque and must be released with
//! their matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::ptr;

use itro_lab::harness::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use itro_lab::harness::config::parse_config;
use itro_lab::harness::oracle_check::run_oracle_check;
use itro_lab::harness::run::run_training;
use itro_lab::metrics::{eval_accuracy, Decode};
use itro_lab::policy::Context;
use itro_lab::tasks::{all_instances, Token};
use itro_lab::trainer::derived_rng;
use itro_lab::LabError;

/// Result codes for every entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ItroStatus {
    /// Success.
    Ok = 0,
    /// A pointer argument was null or a value argument was out of range.
    InvalidArgument = 1,
    /// String argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// File could not be read or written.
    Io = 3,
    /// Configuration or checkpoint text failed to parse or validate.
    Parse = 4,
    /// The operation itself failed; see itro_last_error_message.
    Runtime = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<Vec<u8>>) {
    let msg = CString::new(msg).unwrap_or_else(|_| CString::new("invalid error text").unwrap());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(msg));
}

fn fail(err: &LabError) -> ItroStatus {
    set_error(err.to_string());
    match err {
        LabError::Io(_) => ItroStatus::Io,
        LabError::Config { .. } | LabError::Checkpoint(_) => ItroStatus::Parse,
        LabError::InvalidParameter(_) => ItroStatus::InvalidArgument,
        _ => ItroStatus::Runtime,
    }
}

fn invalid(msg: &str) -> ItroStatus {
    set_error(msg);
    ItroStatus::InvalidArgument
}

unsafe fn read_str<'a>(ptr: *const c_char) -> Result<&'a str, ItroStatus> {
    if ptr.is_null() {
        return Err(invalid("null string argument"));
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("string argument is not valid UTF-8");
        ItroStatus::InvalidUtf8
    })
}

/// Message describing the most recent failure on this thread, or null if the
/// last call succeeded. The pointer is valid until the next failing call on
/// the same thread.
#[no_mangle]
pub extern "C" fn itro_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| {
        slot.borrow()
            .as_ref()
            .map_or(ptr::null(), |msg| msg.as_ptr())
    })
}

/// Opaque handle to a loaded policy checkpoint and its task description.
pub struct ItroCheckpoint {
    inner: Checkpoint,
}

/// Load a text checkpoint from `path` into a new handle.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn itro_checkpoint_load(
    path: *const c_char,
    out: *mut *mut ItroCheckpoint,
) -> ItroStatus {
    if out.is_null() {
        return invalid("null output pointer");
    }
    let path = match read_str(path) {
        Ok(s) => s,
        Err(code) => return code,
    };
    match load_checkpoint(Path::new(path), None) {
        Ok(inner) => {
            *out = Box::into_raw(Box::new(ItroCheckpoint { inner }));
            ItroStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Write the handle's policy back out as a text checkpoint.
///
/// # Safety
/// `handle` must come from `itro_checkpoint_load` and not yet be freed;
/// `path` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn itro_checkpoint_save(
    handle: *const ItroCheckpoint,
    path: *const c_char,
) -> ItroStatus {
    let Some(ck) = handle.as_ref() else {
        return invalid("null checkpoint handle");
    };
    let path = match read_str(path) {
        Ok(s) => s,
        Err(code) => return code,
    };
    let c = &ck.inner;
    match save_checkpoint(&c.policy, &c.task, c.arch, c.window, Path::new(path)) {
        Ok(()) => ItroStatus::Ok,
        Err(e) => fail(&e),
    }
}

/// Release a checkpoint handle. Null is ignored.
///
/// # Safety
/// `handle` must come from `itro_checkpoint_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn itro_checkpoint_free(handle: *mut ItroCheckpoint) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Number of policy parameters behind the handle.
///
/// # Safety
/// `handle` must be a live checkpoint handle; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn itro_checkpoint_n_params(
    handle: *const ItroCheckpoint,
    out: *mut usize,
) -> ItroStatus {
    let Some(ck) = handle.as_ref() else {
        return invalid("null checkpoint handle");
    };
    if out.is_null() {
        return invalid("null output pointer");
    }
    *out = ck.inner.policy.n_params();
    ItroStatus::Ok
}

/// Log-probability the policy assigns to rationale `z` given query `x`,
/// conditioning on the answer as well when `conditioned` is nonzero.
///
/// # Safety
/// `handle` must be live; `x`/`z` must point to `x_len`/`z_len` readable
/// elements; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn itro_rationale_logprob(
    handle: *const ItroCheckpoint,
    x: *const usize,
    x_len: usize,
    z: *const usize,
    z_len: usize,
    out: *mut f64,
) -> ItroStatus {
    let Some(ck) = handle.as_ref() else {
        return invalid("null checkpoint handle");
    };
    if (x.is_null() && x_len > 0) || (z.is_null() && z_len > 0) || out.is_null() {
        return invalid("null buffer argument");
    }
    let x: Vec<Token> = std::slice::from_raw_parts(x, x_len).to_vec();
    let z: Vec<Token> = std::slice::from_raw_parts(z, z_len).to_vec();
    match ck.inner.policy.logprob(&Context::query(&x), &z) {
        Ok(lp) => {
            *out = lp;
            ItroStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Greedy-decoding accuracy of the checkpoint over its full query family.
///
/// # Safety
/// `handle` must be live and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn itro_greedy_accuracy(
    handle: *const ItroCheckpoint,
    out: *mut f64,
) -> ItroStatus {
    let Some(ck) = handle.as_ref() else {
        return invalid("null checkpoint handle");
    };
    if out.is_null() {
        return invalid("null output pointer");
    }
    let c = &ck.inner;
    let vocab = c.task.vocab();
    let instances = all_instances(&c.task);
    let mut rng = derived_rng(0, 0, 0);
    match eval_accuracy(
        &c.policy,
        &instances,
        &vocab,
        Decode::Greedy,
        c.task.t_max,
        &mut rng,
    ) {
        Ok(acc) => {
            *out = acc;
            ItroStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Parse `config_text`, train to completion under `output_dir`, and report
/// the final greedy accuracy.
///
/// # Safety
/// Both strings must be valid NUL-terminated strings; `out_final_accuracy`
/// may be null if the caller does not need the value.
#[no_mangle]
pub unsafe extern "C" fn itro_train(
    config_text: *const c_char,
    output_dir: *const c_char,
    out_final_accuracy: *mut f64,
) -> ItroStatus {
    let config_text = match read_str(config_text) {
        Ok(s) => s,
        Err(code) => return code,
    };
    let output_dir = match read_str(output_dir) {
        Ok(s) => s,
        Err(code) => return code,
    };
    let cfg = match parse_config(config_text) {
        Ok(cfg) => cfg,
        Err(e) => return fail(&e),
    };
    match run_training(&cfg, Path::new(output_dir)) {
        Ok(report) => {
            if !out_final_accuracy.is_null() {
                *out_final_accuracy = report.final_accuracy;
            }
            ItroStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

/// Run the exact-identity battery for `config_text`. Sets `*out_all_pass` to
/// 1 when every identity holds within tolerance, 0 otherwise.
///
/// # Safety
/// `config_text` must be a valid NUL-terminated string and `out_all_pass` a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn itro_oracle_check(
    config_text: *const c_char,
    out_all_pass: *mut i32,
) -> ItroStatus {
    let config_text = match read_str(config_text) {
        Ok(s) => s,
        Err(code) => return code,
    };
    if out_all_pass.is_null() {
        return invalid("null output pointer");
    }
    let cfg = match parse_config(config_text) {
        Ok(cfg) => cfg,
        Err(e) => return fail(&e),
    };
    match run_oracle_check(&cfg) {
        Ok((_, all_pass)) => {
            *out_all_pass = all_pass as i32;
            ItroStatus::Ok
        }
        Err(e) => fail(&e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ffi::CString;

    fn cstr(s: &str) -> CString {
        CString::new(s).unwrap()
    }

    const SMALL_CFG: &str = "task.base = 2\ntask.chain_length = 1\ntask.t_max = 3\nsteps = 5\nbatch_size = 4\neval_every = 5\nseed = 2\noracle.pairs = 5\n";

    #[test]
    fn train_load_eval_round_trip() {
        let dir = tempfile::tempdir();
        let dir = match dir {
            Ok(d) => d,
            Err(e) => panic!("tempdir: {e}"),
        };
        let out = cstr(dir.path().to_str().unwrap());
        let cfg = cstr(SMALL_CFG);
        let mut acc = f64::NAN;
        let status = unsafe { itro_train(cfg.as_ptr(), out.as_ptr(), &mut acc) };
        assert_eq!(status, ItroStatus::Ok);
        assert!(acc.is_finite());

        let ck_path = cstr(dir.path().join("checkpoint_final.txt").to_str().unwrap());
        let mut handle: *mut ItroCheckpoint = std::ptr::null_mut();
        let status = unsafe { itro_checkpoint_load(ck_path.as_ptr(), &mut handle) };
        assert_eq!(status, ItroStatus::Ok);
        assert!(!handle.is_null());

        let mut n = 0usize;
        assert_eq!(
            unsafe { itro_checkpoint_n_params(handle, &mut n) },
            ItroStatus::Ok
        );
        assert!(n > 0);

        let mut greedy = f64::NAN;
        assert_eq!(
            unsafe { itro_greedy_accuracy(handle, &mut greedy) },
            ItroStatus::Ok
        );
        assert_eq!(greedy, acc);

        // logprob of a one-digit rationale plus EOS under query [0, EQ]
        let x = [0usize, 3];
        let z = [1usize, 6];
        let mut lp = f64::NAN;
        let status = unsafe {
            itro_rationale_logprob(handle, x.as_ptr(), x.len(), z.as_ptr(), z.len(), &mut lp)
        };
        assert_eq!(status, ItroStatus::Ok);
        assert!(lp < 0.0);

        // save back out and reload bit-exactly
        let copy_path = cstr(dir.path().join("copy.txt").to_str().unwrap());
        assert_eq!(
            unsafe { itro_checkpoint_save(handle, copy_path.as_ptr()) },
            ItroStatus::Ok
        );
        let mut handle2: *mut ItroCheckpoint = std::ptr::null_mut();
        assert_eq!(
            unsafe { itro_checkpoint_load(copy_path.as_ptr(), &mut handle2) },
            ItroStatus::Ok
        );
        unsafe {
            assert_eq!((*handle).inner.policy.params, (*handle2).inner.policy.params);
            itro_checkpoint_free(handle);
            itro_checkpoint_free(handle2);
        }
    }

    #[test]
    fn errors_set_codes_and_messages() {
        let mut handle: *mut ItroCheckpoint = std::ptr::null_mut();
        let missing = cstr("/nonexistent/checkpoint.txt");
        let status = unsafe { itro_checkpoint_load(missing.as_ptr(), &mut handle) };
        assert_eq!(status, ItroStatus::Io);
        let msg = itro_last_error_message();
        assert!(!msg.is_null());
        let text = unsafe { CStr::from_ptr(msg) }.to_str().unwrap();
        assert!(!text.is_empty());

        let status = unsafe { itro_checkpoint_load(std::ptr::null(), &mut handle) };
        assert_eq!(status, ItroStatus::InvalidArgument);

        let bad_cfg = cstr("itro.n = 0");
        let mut pass = -1;
        let status = unsafe { itro_oracle_check(bad_cfg.as_ptr(), &mut pass) };
        assert_eq!(status, ItroStatus::InvalidArgument);

        // null handle is rejected, not dereferenced
        let mut n = 0usize;
        assert_eq!(
            unsafe { itro_checkpoint_n_params(std::ptr::null(), &mut n) },
            ItroStatus::InvalidArgument
        );
    }

    #[test]
    fn oracle_check_passes_through() {
        let cfg = cstr(SMALL_CFG);
        let mut pass = 0;
        let status = unsafe { itro_oracle_check(cfg.as_ptr(), &mut pass) };
        assert_eq!(status, ItroStatus::Ok);
        assert_eq!(pass, 1);
    }

    #[test]
    fn generated_header_covers_the_surface() {
        let header = include_str!("../include/itro_lab.h");
        for symbol in [
            "itro_checkpoint_load",
            "itro_checkpoint_save",
            "itro_checkpoint_free",
            "itro_checkpoint_n_params",
            "itro_rationale_logprob",
            "itro_greedy_accuracy",
            "itro_train",
            "itro_oracle_check",
            "itro_last_error_message",
            "ItroStatus",
            "ItroCheckpoint",
        ] {
            assert!(header.contains(symbol), "header is missing {symbol}");
        }
    }
}
