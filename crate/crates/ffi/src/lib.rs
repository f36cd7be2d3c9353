//! C interface to multichannel separation.
//!
//! Handles are opaque and owned by the caller, who releases them with the
//! matching `_free` function. Every fallible call returns a [`CgmmStatus`];
//! on failure a message is kept per thread and read back with
//! [`cgmm_last_error_message`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use cgmmsep::cli::Config;
use cgmmsep::em::EmInit;
use cgmmsep::pipeline::{separate, separate_directional, Separation};
use cgmmsep::signal::Waveform;
use cgmmsep::sim::si_sdr;
use cgmmsep::Error;
use ndarray::Array2;

/// Result of a call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CgmmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidConfig = 3,
    Dimension = 4,
    Numeric = 5,
    Io = 6,
    Checkpoint = 7,
    Panic = 8,
}

/// A validated configuration ready to separate recordings.
pub struct CgmmSeparator {
    config: Config,
}

/// Separated sources, DoA estimates and the EM objective trace.
pub struct CgmmResult {
    sources: Vec<Vec<f64>>,
    doa_deg: Vec<f64>,
    objective: Vec<f64>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).ok());
}

fn status_of(e: &Error) -> CgmmStatus {
    match e {
        Error::InvalidConfig(_) | Error::ConfigMismatch(_) => CgmmStatus::InvalidConfig,
        Error::Dimension(_) | Error::InputTooShort { .. } => CgmmStatus::Dimension,
        Error::Numeric(_) | Error::DegenerateInput(_) | Error::SingularDistance(_) => CgmmStatus::Numeric,
        Error::Io { .. } | Error::Wav { .. } | Error::Format { .. } => CgmmStatus::Io,
        Error::Checkpoint(_) => CgmmStatus::Checkpoint,
        Error::InvalidReference(_) => CgmmStatus::InvalidArgument,
    }
}

/// Runs `f`, converting errors and panics into a status and a stored message.
fn guard(f: impl FnOnce() -> Result<(), (CgmmStatus, String)>) -> CgmmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            CgmmStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            CgmmStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (CgmmStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (CgmmStatus, String) {
    (CgmmStatus::NullPointer, format!("{what} is null"))
}

/// Message of the last failed call on this thread, or null when the last
/// call succeeded. The pointer stays valid until the next call on the thread.
#[no_mangle]
pub extern "C" fn cgmm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cgmm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a separator from TOML configuration text; null selects the
/// defaults (four-microphone 8 cm circle, 72 directions, two sources).
///
/// # Safety
/// `config_toml` is null or a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cgmm_separator_new(
    config_toml: *const c_char,
    out: *mut *mut CgmmSeparator,
) -> CgmmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let config = if config_toml.is_null() {
            Config::default()
        } else {
            let text = CStr::from_ptr(config_toml).to_str().map_err(|_| {
                (
                    CgmmStatus::InvalidArgument,
                    "configuration is not UTF-8".to_string(),
                )
            })?;
            Config::from_toml(text).map_err(lib_err)?
        };
        *out = Box::into_raw(Box::new(CgmmSeparator { config }));
        Ok(())
    })
}

/// # Safety
/// `sep` is null or came from [`cgmm_separator_new`] and is not used again.
#[no_mangle]
pub unsafe extern "C" fn cgmm_separator_free(sep: *mut CgmmSeparator) {
    if !sep.is_null() {
        drop(Box::from_raw(sep));
    }
}

/// Number of microphones the separator expects.
///
/// # Safety
/// `sep` is null or a live separator.
#[no_mangle]
pub unsafe extern "C" fn cgmm_separator_n_channels(sep: *const CgmmSeparator) -> usize {
    sep.as_ref().map_or(0, |s| s.config.geometry.mic_positions.len())
}

/// Separates a recording given channel-major samples
/// (`samples[m * n_samples + n]`). With `directional` nonzero the
/// over-complete directional initialization is used, otherwise a single
/// directional EM run.
///
/// # Safety
/// `sep` is a live separator, `samples` points to `n_channels * n_samples`
/// doubles and `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cgmm_separate(
    sep: *const CgmmSeparator,
    samples: *const f64,
    n_channels: usize,
    n_samples: usize,
    sample_rate: u32,
    directional: i32,
    out: *mut *mut CgmmResult,
) -> CgmmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let sep = sep.as_ref().ok_or_else(|| null("separator"))?;
        if samples.is_null() {
            return Err(null("samples"));
        }
        let total = n_channels
            .checked_mul(n_samples)
            .ok_or_else(|| (CgmmStatus::InvalidArgument, "sample count overflows".to_string()))?;
        let data = std::slice::from_raw_parts(samples, total).to_vec();
        let arr = Array2::from_shape_vec((n_channels, n_samples), data)
            .map_err(|e| (CgmmStatus::Dimension, e.to_string()))?;
        let mix = Waveform::new(arr, sample_rate).map_err(lib_err)?;
        let cfg = sep.config.separator().map_err(lib_err)?;
        let result: Separation = if directional != 0 {
            separate_directional(&mix, &cfg, sep.config.em.directional_classes)
        } else {
            separate(&mix, &cfg, EmInit::Directional)
        }
        .map_err(lib_err)?;
        let doa_deg = result
            .em
            .ew
            .argmax()
            .into_iter()
            .map(|d| cfg.grid.azimuth(d))
            .collect();
        *out = Box::into_raw(Box::new(CgmmResult {
            sources: result.sources.iter().map(|w| w.channel(0).to_vec()).collect(),
            doa_deg,
            objective: result.em.elbo_trace,
        }));
        Ok(())
    })
}

/// # Safety
/// `res` is null or came from [`cgmm_separate`] and is not used again.
#[no_mangle]
pub unsafe extern "C" fn cgmm_result_free(res: *mut CgmmResult) {
    if !res.is_null() {
        drop(Box::from_raw(res));
    }
}

/// # Safety
/// `res` is null or a live result.
#[no_mangle]
pub unsafe extern "C" fn cgmm_result_n_sources(res: *const CgmmResult) -> usize {
    res.as_ref().map_or(0, |r| r.sources.len())
}

/// Length in samples of every separated source.
///
/// # Safety
/// `res` is null or a live result.
#[no_mangle]
pub unsafe extern "C" fn cgmm_result_n_samples(res: *const CgmmResult) -> usize {
    res.as_ref().and_then(|r| r.sources.first()).map_or(0, Vec::len)
}

/// # Safety
/// `res` is null or a live result.
#[no_mangle]
pub unsafe extern "C" fn cgmm_result_n_iterations(res: *const CgmmResult) -> usize {
    res.as_ref().map_or(0, |r| r.objective.len())
}

/// Copies source `k` into `buf`, which holds `len` doubles;
/// `len` must equal [`cgmm_result_n_samples`].
///
/// # Safety
/// `res` is a live result and `buf` points to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn cgmm_result_copy_source(
    res: *const CgmmResult,
    k: usize,
    buf: *mut f64,
    len: usize,
) -> CgmmStatus {
    guard(|| {
        let r = res.as_ref().ok_or_else(|| null("result"))?;
        let src = r.sources.get(k).ok_or_else(|| {
            (
                CgmmStatus::InvalidArgument,
                format!("source {k} of {}", r.sources.len()),
            )
        })?;
        copy_out(src, buf, len)
    })
}

/// Copies the per-iteration EM objective into `buf` (`len` must equal
/// [`cgmm_result_n_iterations`]).
///
/// # Safety
/// `res` is a live result and `buf` points to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn cgmm_result_copy_objective(
    res: *const CgmmResult,
    buf: *mut f64,
    len: usize,
) -> CgmmStatus {
    guard(|| {
        let r = res.as_ref().ok_or_else(|| null("result"))?;
        copy_out(&r.objective, buf, len)
    })
}

/// Most probable azimuth of source `k`, degrees.
///
/// # Safety
/// `res` is a live result and `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cgmm_result_doa(res: *const CgmmResult, k: usize, out: *mut f64) -> CgmmStatus {
    guard(|| {
        let r = res.as_ref().ok_or_else(|| null("result"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = *r.doa_deg.get(k).ok_or_else(|| {
            (
                CgmmStatus::InvalidArgument,
                format!("source {k} of {}", r.doa_deg.len()),
            )
        })?;
        Ok(())
    })
}

/// Scale-invariant SDR in dB of `estimate` against `reference`.
///
/// # Safety
/// Both arrays hold `len` doubles and `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn cgmm_si_sdr(
    estimate: *const f64,
    reference: *const f64,
    len: usize,
    out: *mut f64,
) -> CgmmStatus {
    guard(|| {
        if estimate.is_null() || reference.is_null() {
            return Err(null("signal"));
        }
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let e = std::slice::from_raw_parts(estimate, len);
        let r = std::slice::from_raw_parts(reference, len);
        *out = si_sdr(e, r).map_err(lib_err)?;
        Ok(())
    })
}

unsafe fn copy_out(src: &[f64], buf: *mut f64, len: usize) -> Result<(), (CgmmStatus, String)> {
    if buf.is_null() {
        return Err(null("buffer"));
    }
    if len != src.len() {
        return Err((
            CgmmStatus::Dimension,
            format!("buffer holds {len} values, {} needed", src.len()),
        ));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), buf, len);
    Ok(())
}
