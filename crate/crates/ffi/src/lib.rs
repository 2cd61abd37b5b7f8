//! C ABI for linequal: load a trained model and score lines, apply or fit
//! Platt scaling, segment long lines, and compute Cohen's kappa.
//!
//! Every fallible function returns an [`LqStatus`]. On failure a message
//! is kept per thread and can be read with [`lq_last_error_message`].
//! Handles are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use linequal::calibration::{apply_platt, clean_probability, fit_platt, PlattFile, PlattParams};
use linequal::classifier::BaselineModel;
use linequal::corpus::segment_line;
use linequal::taxonomy::{Category, NUM_CATEGORIES};

/// Number of quality categories; prediction buffers hold this many doubles.
pub const LQ_NUM_CATEGORIES: usize = 9;

const _: () = assert!(LQ_NUM_CATEGORIES == NUM_CATEGORIES);

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LqStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Parse = 4,
    InvalidArgument = 5,
    Internal = 6,
}

/// Platt scaling parameters: p = 1 / (1 + exp(-(a * s + b))).
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LqPlattParams {
    pub a: f64,
    pub b: f64,
}

impl From<LqPlattParams> for PlattParams {
    fn from(p: LqPlattParams) -> Self {
        PlattParams { a: p.a, b: p.b }
    }
}

/// A trained baseline classifier.
pub struct LqModel {
    inner: BaselineModel,
}

/// An owned list of strings.
pub struct LqStringList {
    items: Vec<CString>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Failure(LqStatus, String);

impl Failure {
    fn new(status: LqStatus, msg: impl Into<String>) -> Self {
        Self(status, msg.into())
    }
}

/// Run `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> LqStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LqStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            LqStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::new(LqStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Failure::new(LqStatus::InvalidUtf8, format!("{name}: {e}")))
}

fn non_null<T>(p: *const T, name: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure::new(LqStatus::NullPointer, format!("{name} is null")))
    } else {
        Ok(())
    }
}

/// Message describing the last failure on this thread, or null. Valid
/// until the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn lq_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn lq_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Display name of category `index` (0 is Clean), or null when out of range.
#[no_mangle]
pub extern "C" fn lq_category_name(index: usize) -> *const c_char {
    const NAMES: [&str; NUM_CATEGORIES] = [
        "Clean\0",
        "Formatting, Style & Errors\0",
        "Bibliographical & Citation References\0",
        "Promotional & Spam Content\0",
        "Contact & Identification Information\0",
        "Navigation & Interface Elements\0",
        "Technical Specifications & Metadata\0",
        "Legal & Administrative Content\0",
        "Offensive or Inappropriate Content\0",
    ];
    NAMES.get(index).map_or(ptr::null(), |s| s.as_ptr().cast())
}

/// Load a model directory written by `linequal train`.
///
/// # Safety
/// `dir` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lq_model_load(dir: *const c_char, out: *mut *mut LqModel) -> LqStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let dir = str_arg(dir, "dir")?;
        let inner = BaselineModel::load(Path::new(dir)).map_err(|e| {
            let status = match e {
                linequal::classifier::ModelError::Io { .. } => LqStatus::Io,
                _ => LqStatus::Parse,
            };
            Failure::new(status, e.to_string())
        })?;
        *out = Box::into_raw(Box::new(LqModel { inner }));
        Ok(())
    })
}

/// Release a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`lq_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lq_model_free(model: *mut LqModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Class probabilities of `text`, written to `out[0..LQ_NUM_CATEGORIES]`.
///
/// # Safety
/// `model` must be live, `text` a valid C string, and `out` must point to
/// at least `LQ_NUM_CATEGORIES` doubles.
#[no_mangle]
pub unsafe extern "C" fn lq_model_predict(
    model: *const LqModel,
    text: *const c_char,
    out: *mut f64,
) -> LqStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        let text = str_arg(text, "text")?;
        let dist = (*model).inner.predict_distribution(text);
        ptr::copy_nonoverlapping(dist.0.as_ptr(), out, NUM_CATEGORIES);
        Ok(())
    })
}

/// Quality score of `text`: the Clean probability, Platt-scaled when
/// `platt` is not null.
///
/// # Safety
/// `model` must be live, `text` a valid C string, `platt` null or valid,
/// and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lq_model_quality_score(
    model: *const LqModel,
    platt: *const LqPlattParams,
    text: *const c_char,
    out: *mut f64,
) -> LqStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        let text = str_arg(text, "text")?;
        let p = clean_probability(&(*model).inner.predict_distribution(text));
        *out = if platt.is_null() {
            p
        } else {
            apply_platt(&(*platt).into(), p)
        };
        Ok(())
    })
}

/// Read Platt parameters from a file written by `linequal calibrate`.
///
/// # Safety
/// `path` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lq_platt_load(path: *const c_char, out: *mut LqPlattParams) -> LqStatus {
    guard(|| {
        non_null(out, "out")?;
        let path = str_arg(path, "path")?;
        let file = PlattFile::load(Path::new(path)).map_err(|e| Failure::new(LqStatus::Parse, e.to_string()))?;
        *out = LqPlattParams { a: file.a, b: file.b };
        Ok(())
    })
}

/// Calibrated probability for raw score `s`.
#[no_mangle]
pub extern "C" fn lq_platt_apply(params: LqPlattParams, s: f64) -> f64 {
    apply_platt(&params.into(), s)
}

/// Fit Platt parameters to `n` scores with binary labels (nonzero = positive).
///
/// # Safety
/// `scores` and `labels` must point to `n` elements; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn lq_platt_fit(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    out: *mut LqPlattParams,
) -> LqStatus {
    guard(|| {
        non_null(scores, "scores")?;
        non_null(labels, "labels")?;
        non_null(out, "out")?;
        let scores = std::slice::from_raw_parts(scores, n);
        let labels: Vec<bool> = std::slice::from_raw_parts(labels, n).iter().map(|l| *l != 0).collect();
        let p = fit_platt(scores, &labels).map_err(|e| Failure::new(LqStatus::InvalidArgument, e.to_string()))?;
        *out = LqPlattParams { a: p.a, b: p.b };
        Ok(())
    })
}

/// Split `text` into segments of at most `max_len` characters.
///
/// # Safety
/// `text` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn lq_segment_line(
    text: *const c_char,
    max_len: usize,
    out: *mut *mut LqStringList,
) -> LqStatus {
    guard(|| {
        non_null(out, "out")?;
        *out = ptr::null_mut();
        let text = str_arg(text, "text")?;
        if max_len == 0 {
            return Err(Failure::new(LqStatus::InvalidArgument, "max_len must be at least 1"));
        }
        let items = segment_line(text, max_len)
            .into_iter()
            .map(|s| CString::new(s.text).expect("input had no interior nul"))
            .collect();
        *out = Box::into_raw(Box::new(LqStringList { items }));
        Ok(())
    })
}

/// Number of strings in `list`; 0 for null.
///
/// # Safety
/// `list` must be null or live.
#[no_mangle]
pub unsafe extern "C" fn lq_string_list_len(list: *const LqStringList) -> usize {
    if list.is_null() {
        0
    } else {
        let list = &*list;
        list.items.len()
    }
}

/// String `index` of `list`, or null when out of range. Owned by the list.
///
/// # Safety
/// `list` must be null or live.
#[no_mangle]
pub unsafe extern "C" fn lq_string_list_get(list: *const LqStringList, index: usize) -> *const c_char {
    if list.is_null() {
        return ptr::null();
    }
    let list = &*list;
    list.items.get(index).map_or(ptr::null(), |s| s.as_ptr())
}

/// Release a string list. Null is ignored.
///
/// # Safety
/// `list` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn lq_string_list_free(list: *mut LqStringList) {
    if !list.is_null() {
        drop(Box::from_raw(list));
    }
}

/// Cohen's kappa between two label sequences of length `n`.
///
/// # Safety
/// `a` and `b` must each point to `n` valid C strings; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn lq_cohens_kappa(
    a: *const *const c_char,
    b: *const *const c_char,
    n: usize,
    out: *mut f64,
) -> LqStatus {
    guard(|| {
        non_null(a, "a")?;
        non_null(b, "b")?;
        non_null(out, "out")?;
        let read = |p: *const *const c_char, name: &str| -> Result<Vec<&str>, Failure> {
            std::slice::from_raw_parts(p, n)
                .iter()
                .enumerate()
                .map(|(i, s)| str_arg(*s, &format!("{name}[{i}]")))
                .collect()
        };
        let (a, b) = (read(a, "a")?, read(b, "b")?);
        *out = linequal::agreement::cohens_kappa(&a, &b)
            .map_err(|e| Failure::new(LqStatus::InvalidArgument, e.to_string()))?;
        Ok(())
    })
}

/// Index of the category named `name` (case-insensitive), or -1.
///
/// # Safety
/// `name` must be null or a valid C string.
#[no_mangle]
pub unsafe extern "C" fn lq_category_index(name: *const c_char) -> i32 {
    if name.is_null() {
        return -1;
    }
    CStr::from_ptr(name)
        .to_str()
        .ok()
        .and_then(|s| s.parse::<Category>().ok())
        .map_or(-1, |c| c.index() as i32)
}
