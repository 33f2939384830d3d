//! C ABI for the aequiv evaluation library.
//!
//! Every function returns an [`AequivStatus`] and writes its result through
//! an out-pointer. On failure, `aequiv_last_error()` returns a message for
//! the calling thread, valid until that thread's next call. Strings are
//! NUL-terminated UTF-8. Calibration models are opaque handles created by
//! `aequiv_calibration_model_new` and released by
//! `aequiv_calibration_model_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use aequiv::conformal::{p_value, CalibrationModel};
use aequiv::lexical::{exact_match_any, token_f1, NormalizationProfile};
use aequiv::stats::{clopper_pearson_upper, spearman};

/// Result code of every exported function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AequivStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Panic = 4,
}

/// Text normalization applied before token comparison.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AequivProfile {
    /// Lowercase and strip punctuation.
    Simple = 0,
    /// Also drop the articles a, an, the.
    SquadOfficial = 1,
}

impl From<AequivProfile> for NormalizationProfile {
    fn from(p: AequivProfile) -> Self {
        match p {
            AequivProfile::Simple => NormalizationProfile::SIMPLE,
            AequivProfile::SquadOfficial => NormalizationProfile::SQUAD_OFFICIAL,
        }
    }
}

/// Opaque calibration model.
pub struct AequivCalibrationModel {
    inner: CalibrationModel,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Failure(AequivStatus, String);

impl Failure {
    fn null(what: &str) -> Self {
        Failure(AequivStatus::NullPointer, format!("{what} is null"))
    }

    fn arg(msg: impl ToString) -> Self {
        Failure(AequivStatus::InvalidArgument, msg.to_string())
    }
}

/// Run `f`, record its error, and turn panics into [`AequivStatus::Panic`].
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> AequivStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AequivStatus::Ok,
        Ok(Err(Failure(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            AequivStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(AequivStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn write<T>(out: *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::null("output pointer"));
    }
    out.write(value);
    Ok(())
}

/// Message for the last failed call on this thread, or null if none.
#[no_mangle]
pub extern "C" fn aequiv_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Token F1 between a candidate and a reference answer.
///
/// # Safety
/// `candidate` and `reference` must be NUL-terminated strings; `out` must
/// be writable.
#[no_mangle]
pub unsafe extern "C" fn aequiv_token_f1(
    candidate: *const c_char,
    reference: *const c_char,
    profile: AequivProfile,
    out: *mut f64,
) -> AequivStatus {
    guard(|| {
        let c = text(candidate, "candidate")?;
        let r = text(reference, "reference")?;
        write(out, token_f1(c, r, profile.into()))
    })
}

/// Whether the candidate equals any of `n_references` references after
/// normalization.
///
/// # Safety
/// `references` must point to `n_references` NUL-terminated strings; `out`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn aequiv_exact_match(
    candidate: *const c_char,
    references: *const *const c_char,
    n_references: usize,
    profile: AequivProfile,
    out: *mut bool,
) -> AequivStatus {
    guard(|| {
        let c = text(candidate, "candidate")?;
        let refs = slice(references, n_references, "references")?
            .iter()
            .map(|&r| text(r, "reference"))
            .collect::<Result<Vec<_>, _>>()?;
        write(out, exact_match_any(c, refs, profile.into()))
    })
}

/// Spearman's rank correlation of two equal-length arrays.
///
/// # Safety
/// `x` and `y` must each point to `n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aequiv_spearman(x: *const f64, y: *const f64, n: usize, out: *mut f64) -> AequivStatus {
    guard(|| {
        let x = slice(x, n, "x")?;
        let y = slice(y, n, "y")?;
        write(out, spearman(x, y).map_err(Failure::arg)?)
    })
}

/// One-sided Clopper-Pearson upper bound on a rate after `k` events in `m`
/// trials, at confidence `1 - gamma`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aequiv_clopper_pearson_upper(k: u64, m: u64, gamma: f64, out: *mut f64) -> AequivStatus {
    guard(|| write(out, clopper_pearson_upper(k, m, gamma).map_err(Failure::arg)?))
}

/// Conformal p-value of nonconformity `s` against `n` calibration scores
/// (any order).
///
/// # Safety
/// `calibration` must point to `n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn aequiv_p_value(s: f64, calibration: *const f64, n: usize, out: *mut f64) -> AequivStatus {
    guard(|| {
        let cal = slice(calibration, n, "calibration")?;
        if cal.is_empty() {
            return Err(Failure::arg("calibration scores are empty"));
        }
        if cal.iter().any(|v| v.is_nan()) || s.is_nan() {
            return Err(Failure::arg("NaN score"));
        }
        let mut sorted = cal.to_vec();
        sorted.sort_by(f64::total_cmp);
        write(out, p_value(s, &sorted))
    })
}

/// Build a model from `n` calibration scores (nonconformities, `+inf`
/// allowed) and a correction factor in (0, 1]; use 1 for exact admission.
///
/// # Safety
/// `scores` must point to `n` doubles; `out` must be writable. The handle
/// must be released with `aequiv_calibration_model_free`.
#[no_mangle]
pub unsafe extern "C" fn aequiv_calibration_model_new(
    scores: *const f64,
    n: usize,
    correction: f64,
    out: *mut *mut AequivCalibrationModel,
) -> AequivStatus {
    guard(|| {
        let scores = slice(scores, n, "scores")?;
        if scores.is_empty() {
            return Err(Failure::arg("calibration scores are empty"));
        }
        let inner = CalibrationModel::with_correction(scores.to_vec(), correction).map_err(Failure::arg)?;
        write(out, Box::into_raw(Box::new(AequivCalibrationModel { inner })))
    })
}

/// Release a model. Null is ignored.
///
/// # Safety
/// `model` must come from `aequiv_calibration_model_new` and not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn aequiv_calibration_model_free(model: *mut AequivCalibrationModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Mark which of `n` candidates (by model score) enter the prediction set
/// for target accuracy `target`: `included[i]` is set to 1 or 0.
///
/// # Safety
/// `model` must be a live handle; `scores` must point to `n` doubles and
/// `included` to `n` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn aequiv_predict_set(
    model: *const AequivCalibrationModel,
    scores: *const f64,
    n: usize,
    target: f64,
    included: *mut u8,
) -> AequivStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| Failure::null("model"))?;
        let scores = slice(scores, n, "scores")?;
        if n > 0 && included.is_null() {
            return Err(Failure::null("included"));
        }
        let flags = scores
            .iter()
            .map(|&s| model.inner.includes(s, target).map_err(Failure::arg))
            .collect::<Result<Vec<_>, _>>()?;
        for (i, f) in flags.into_iter().enumerate() {
            included.add(i).write(u8::from(f));
        }
        Ok(())
    })
}
