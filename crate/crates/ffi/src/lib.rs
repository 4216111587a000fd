//! C ABI over `rankheads`.
//!
//! Every fallible function returns an [`RhStatus`] and writes results through
//! out-pointers. On failure a message is kept per thread and can be read with
//! [`rh_last_error_message`]. Handles are opaque and must be released with
//! their `_free` function. Matrices are passed row-major.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use nalgebra::{DMatrix, DVector};
use rankheads::attention::{attend, AttentionKind, SoftmaxHead};
use rankheads::constructions::full_rank_nearest;
use rankheads::montecarlo::{close_pair_probability, edge_probability, majority_accuracy, McEstimate};
use rankheads::spectral::{lower_bound, LowerBoundQuery, SpectralTable};
use rankheads::trainer::{train, TrainConfig, TrainReport};
use rankheads::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RhStatus {
    Ok = 0,
    InvalidArgument = 1,
    NullPointer = 2,
    Shape = 3,
    Quadrature = 4,
    Diverged = 5,
    Numeric = 6,
    Panic = 7,
}

/// Monte Carlo mean with its standard error.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RhEstimate {
    pub mean: f64,
    /// Named to avoid the C `stderr` macro.
    pub std_error: f64,
    pub n: u64,
    pub seed: u64,
}

impl From<McEstimate> for RhEstimate {
    fn from(e: McEstimate) -> Self {
        Self { mean: e.mean, std_error: e.stderr, n: e.n as u64, seed: e.seed }
    }
}

/// Ultraspherical coefficient table.
pub struct RhSpectralTable(SpectralTable);

/// One attention head.
pub struct RhHead(SoftmaxHead);

/// Result of a training run.
pub struct RhTrainReport {
    report: TrainReport,
    json: String,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

struct Fail(RhStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Shape(_) => RhStatus::Shape,
            Error::Quadrature { .. } => RhStatus::Quadrature,
            Error::NonFinite { .. } => RhStatus::Diverged,
            Error::Tie(..) | Error::Degenerate(_) | Error::Contract(_) => RhStatus::Numeric,
            _ => RhStatus::InvalidArgument,
        };
        Fail(status, e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(RhStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> RhStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            RhStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            RhStatus::Panic
        }
    }
}

unsafe fn write_out<T>(out: *mut T, value: T, what: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Library version as a NUL-terminated string with static lifetime.
#[no_mangle]
pub extern "C" fn rh_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Length in bytes of the calling thread's last error message, without the NUL.
#[no_mangle]
pub extern "C" fn rh_last_error_length() -> usize {
    LAST_ERROR.with(|e| e.borrow().len())
}

/// Copies the last error message into `buf` (truncated, always NUL-terminated
/// when `len > 0`). Returns the number of bytes copied, excluding the NUL.
///
/// # Safety
/// `buf` must be valid for `len` bytes or null.
#[no_mangle]
pub unsafe extern "C" fn rh_last_error_message(buf: *mut c_char, len: usize) -> usize {
    if buf.is_null() || len == 0 {
        return 0;
    }
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let n = msg.len().min(len - 1);
        ptr::copy_nonoverlapping(msg.as_ptr().cast(), buf, n);
        *buf.add(n) = 0;
        n
    })
}

/// Builds the table for degrees `0..=l_max` in dimension `d >= 3`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rh_spectral_table_new(d: usize, l_max: usize, out: *mut *mut RhSpectralTable) -> RhStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let t = SpectralTable::build(d, l_max)?;
        write_out(out, Box::into_raw(Box::new(RhSpectralTable(t))), "out")
    })
}

/// # Safety
/// `table` must come from [`rh_spectral_table_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rh_spectral_table_free(table: *mut RhSpectralTable) {
    if !table.is_null() {
        drop(Box::from_raw(table));
    }
}

unsafe fn table_ref<'a>(t: *const RhSpectralTable) -> Result<&'a SpectralTable, Fail> {
    t.as_ref().map(|t| &t.0).ok_or_else(|| null("table"))
}

/// Coefficient fields selectable by [`rh_spectral_table_get`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RhSpectralField {
    /// Harmonic dimension `N(d, l)`.
    Dim = 0,
    /// Squared norm of `P_l`.
    Pnorm2 = 1,
    /// Normalized coefficient of `sign`.
    Eta = 2,
    /// Normalized coefficient of `arcsin`.
    Alpha = 3,
}

/// # Safety
/// `table` must be a live handle, `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rh_spectral_table_get(
    table: *const RhSpectralTable,
    l: usize,
    field: RhSpectralField,
    out: *mut f64,
) -> RhStatus {
    guard(|| {
        let t = table_ref(table)?;
        let r = t
            .records
            .get(l)
            .ok_or_else(|| Fail(RhStatus::InvalidArgument, format!("degree {l} exceeds l_max {}", t.l_max)))?;
        let v = match field {
            RhSpectralField::Dim => r.n,
            RhSpectralField::Pnorm2 => r.pnorm2,
            RhSpectralField::Eta => r.eta,
            RhSpectralField::Alpha => r.alpha,
        };
        write_out(out, v, "out")
    })
}

/// Truncated `u(t)` over the table's odd degrees.
///
/// # Safety
/// `table` must be a live handle, `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rh_spectral_table_u_measure(table: *const RhSpectralTable, t: f64, out: *mut f64) -> RhStatus {
    guard(|| {
        let v = table_ref(table)?.u_measure(t)?;
        write_out(out, v, "out")
    })
}

/// Lower bound for `h` heads of rank `r`, summed over odd degrees `<= l_max`.
///
/// # Safety
/// `table` must be a live handle, `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rh_lower_bound(
    table: *const RhSpectralTable,
    r: usize,
    h: f64,
    l_max: usize,
    clamp_negative: bool,
    out: *mut f64,
) -> RhStatus {
    guard(|| {
        let t = table_ref(table)?;
        let q = LowerBoundQuery { d: t.d, r, h, l_max, clamp_negative };
        let v = lower_bound(t, &q)?.value;
        write_out(out, v, "out")
    })
}

/// Head from row-major `d x r` matrices `K, Q, V, O`.
///
/// # Safety
/// Each matrix pointer must be valid for `d * r` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn rh_head_new(
    d: usize,
    r: usize,
    k: *const f64,
    q: *const f64,
    v: *const f64,
    o: *const f64,
    temperature: f64,
    out: *mut *mut RhHead,
) -> RhStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let len = d.checked_mul(r).ok_or_else(|| Fail(RhStatus::InvalidArgument, "d * r overflows".into()))?;
        let m = |p, name| Ok::<_, Fail>(DMatrix::from_row_slice(d, r, slice(p, len, name)?));
        let head = SoftmaxHead::new(m(k, "k")?, m(q, "q")?, m(v, "v")?, m(o, "o")?, temperature)?;
        write_out(out, Box::into_raw(Box::new(RhHead(head))), "out")
    })
}

/// Full-rank identity head selecting the nearest target.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rh_head_full_rank_nearest(d: usize, temperature: f64, out: *mut *mut RhHead) -> RhStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let head = full_rank_nearest(d, temperature)?;
        write_out(out, Box::into_raw(Box::new(RhHead(head))), "out")
    })
}

/// # Safety
/// `head` must come from a constructor and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rh_head_free(head: *mut RhHead) {
    if !head.is_null() {
        drop(Box::from_raw(head));
    }
}

/// Attends from source `y` (length `d`) over targets `x` (row-major `d x n`)
/// and writes the `d` outputs to `out`. `hardmax` selects the lowest-index
/// top score instead of softmax.
///
/// # Safety
/// `x` must hold `d * n` doubles, `y` and `out` `d` doubles each.
#[no_mangle]
pub unsafe extern "C" fn rh_head_attend(
    head: *const RhHead,
    x: *const f64,
    n: usize,
    y: *const f64,
    hardmax: bool,
    out: *mut f64,
) -> RhStatus {
    guard(|| {
        let h = head.as_ref().map(|h| &h.0).ok_or_else(|| null("head"))?;
        let d = h.d();
        let xs = slice(x, d * n, "x")?;
        let ys = slice(y, d, "y")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let kind = if hardmax { AttentionKind::HARDMAX } else { AttentionKind::SOFTMAX };
        let res = attend(h, &DMatrix::from_row_slice(d, n, xs), &DMatrix::from_column_slice(d, 1, ys), kind)?;
        std::slice::from_raw_parts_mut(out, d).copy_from_slice(res.as_slice());
        Ok(())
    })
}

/// Probability that `|<x1 - x2, y>| <= eps` for independent uniform unit vectors.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rh_close_pair_probability(
    d: usize,
    eps: f64,
    n: usize,
    seed: u64,
    out: *mut RhEstimate,
) -> RhStatus {
    guard(|| write_out(out, close_pair_probability(d, eps, n, seed)?.into(), "out"))
}

/// Probability that a random rank-one head picks the nearest of `x1, x2`.
///
/// # Safety
/// `x1`, `x2`, `y` must each hold `d` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn rh_edge_probability(
    d: usize,
    x1: *const f64,
    x2: *const f64,
    y: *const f64,
    n: usize,
    seed: u64,
    out: *mut RhEstimate,
) -> RhStatus {
    guard(|| {
        let v = |p, name| Ok::<_, Fail>(DVector::from_column_slice(slice(p, d, name)?));
        let e = edge_probability(d, &v(x1, "x1")?, &v(x2, "x2")?, &v(y, "y")?, n, seed)?;
        write_out(out, e.into(), "out")
    })
}

/// Squared error of the mode of `h` random rank-one voters on orthonormal pairs.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rh_majority_accuracy(
    d: usize,
    h: usize,
    n: usize,
    seed: u64,
    out: *mut RhEstimate,
) -> RhStatus {
    guard(|| write_out(out, majority_accuracy(d, h, n, seed)?.into(), "out"))
}

/// Trains from a JSON config (missing fields take defaults). A run that
/// diverges still yields a report and returns `RH_STATUS_DIVERGED`.
///
/// # Safety
/// `config_json` must be a NUL-terminated string; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn rh_train_json(config_json: *const c_char, out: *mut *mut RhTrainReport) -> RhStatus {
    let mut diverged = false;
    let status = guard(|| {
        if config_json.is_null() {
            return Err(null("config_json"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let text = CStr::from_ptr(config_json)
            .to_str()
            .map_err(|_| Fail(RhStatus::InvalidArgument, "config is not UTF-8".into()))?;
        let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| {
            Fail(RhStatus::InvalidArgument, format!("config line {} column {}: {e}", e.line(), e.column()))
        })?;
        let report = train(&cfg)?;
        diverged = report.diverged.is_some();
        let json = serde_json::to_string(&report).map_err(|e| Fail(RhStatus::Numeric, e.to_string()))?;
        write_out(out, Box::into_raw(Box::new(RhTrainReport { report, json })), "out")
    });
    if status == RhStatus::Ok && diverged {
        set_error("training diverged".into());
        return RhStatus::Diverged;
    }
    status
}

/// Final evaluation on fresh samples; `RH_STATUS_DIVERGED` if the run diverged.
///
/// # Safety
/// `report` must be a live handle, `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn rh_train_report_final_mse(report: *const RhTrainReport, out: *mut RhEstimate) -> RhStatus {
    guard(|| {
        let r = report.as_ref().ok_or_else(|| null("report"))?;
        let e = r.report.final_eval.ok_or_else(|| Fail(RhStatus::Diverged, "run diverged; no evaluation".into()))?;
        write_out(out, e.into(), "out")
    })
}

/// Copies the report as JSON into `buf` (NUL-terminated, truncated to
/// `len - 1` bytes). Returns the full JSON length so callers can size `buf`.
///
/// # Safety
/// `report` must be a live handle; `buf` must be valid for `len` bytes or null.
#[no_mangle]
pub unsafe extern "C" fn rh_train_report_json(report: *const RhTrainReport, buf: *mut c_char, len: usize) -> usize {
    let Some(r) = report.as_ref() else { return 0 };
    if !buf.is_null() && len > 0 {
        let n = r.json.len().min(len - 1);
        ptr::copy_nonoverlapping(r.json.as_ptr().cast(), buf, n);
        *buf.add(n) = 0;
    }
    r.json.len()
}

/// # Safety
/// `report` must come from [`rh_train_json`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rh_train_report_free(report: *mut RhTrainReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}
