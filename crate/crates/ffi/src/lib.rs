//! C ABI for `uqcascade`.
//!
//! Tables, policies and traces are opaque handles created and freed through
//! this API. Every fallible call returns a [`UqcStatus`]; on failure
//! [`uqc_last_error`] describes the most recent error on the calling thread.
//! Panics are caught at the boundary and reported as `UQC_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use uqcascade::calibrate::PolicyFile;
use uqcascade::cascade::{run_cascade, CascadePolicy, CascadeTrace, ExitRule};
use uqcascade::metrics::{aurc, auroc, rc_curve, EvalOutcome, Loss};
use uqcascade::scoretab::{Domain, ScoreTable, ScoreTableError};
use uqcascade::synth::{generate, SynthSpec};
use uqcascade::uncertainty::{prefix_evaluate, Combine, ScoreKind, ScoreMethod};
use uqcascade::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UqcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Data = 4,
    Unsatisfiable = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// Uncertainty score and prefix combination.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UqcScore {
    /// Negative MSP of the mean softmax.
    NegMspPredictive = 0,
    /// Mean of the members' negative MSP.
    NegMspMemberMean = 1,
    /// Mean of the members' energies.
    EnergyMemberMean = 2,
}

impl UqcScore {
    fn method(self) -> ScoreMethod {
        match self {
            UqcScore::NegMspPredictive => ScoreMethod::neg_msp(),
            UqcScore::NegMspMemberMean => {
                ScoreMethod::new(ScoreKind::NegMsp, Combine::MemberMean).expect("valid combination")
            }
            UqcScore::EnergyMemberMean => ScoreMethod::energy(),
        }
    }
}

/// Opaque score table.
pub struct UqcTable(ScoreTable);

/// Opaque exit policy.
pub struct UqcPolicy(CascadePolicy);

/// Opaque cascade trace.
pub struct UqcTrace(CascadeTrace);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(UqcStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } | Error::Table(ScoreTableError::Io { .. }) => UqcStatus::Io,
            Error::Unsatisfiable(_) => UqcStatus::Unsatisfiable,
            Error::InvalidArgument(_) | Error::InvalidPolicy(_) | Error::PolicyFile { .. } | Error::Uncertainty(_) => {
                UqcStatus::InvalidArgument
            }
            _ => UqcStatus::Data,
        };
        Failure(status, e.to_string())
    }
}

impl From<ScoreTableError> for Failure {
    fn from(e: ScoreTableError) -> Self {
        Error::from(e).into()
    }
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> UqcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => UqcStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside uqcascade".into());
            UqcStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(UqcStatus::NullPointer, format!("{what} is NULL"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(UqcStatus::InvalidArgument, msg.into())
}

unsafe fn path_arg(path: *const c_char) -> Result<PathBuf, Failure> {
    if path.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(path)
        .to_str()
        .map_err(|_| invalid("path is not UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a, T>(data: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if data.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(data, len))
}

unsafe fn out_slice<'a, T>(data: *mut T, len: usize, need: usize, what: &str) -> Result<Option<&'a mut [T]>, Failure> {
    if data.is_null() {
        return Ok(None);
    }
    if len < need {
        return Err(Failure(
            UqcStatus::BufferTooSmall,
            format!("{what} holds {len} elements, need {need}"),
        ));
    }
    Ok(Some(slice::from_raw_parts_mut(data, need)))
}

unsafe fn handle<'a, T>(h: *const T, what: &str) -> Result<&'a T, Failure> {
    h.as_ref().ok_or_else(|| null(what))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("output handle"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Message for the last failed call on this thread, or NULL. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn uqc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn uqc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a table from a UQC1 binary or CSV file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn uqc_table_read(path: *const c_char, out: *mut *mut UqcTable) -> UqcStatus {
    guard(|| {
        let table = ScoreTable::load(path_arg(path)?)?;
        put(out, UqcTable(table))
    })
}

/// Parses a table from an in-memory UQC1 image.
///
/// # Safety
/// `data` must point to `len` readable bytes and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn uqc_table_from_bytes(data: *const u8, len: usize, out: *mut *mut UqcTable) -> UqcStatus {
    guard(|| {
        let table = ScoreTable::from_bytes(slice_arg(data, len, "data")?)?;
        put(out, UqcTable(table))
    })
}

/// Generates a synthetic table with `n_stages` stages of unit cost.
/// `signal` holds one strictly increasing evidence scale per stage.
///
/// # Safety
/// `signal` must point to `n_stages` values and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn uqc_table_synth(
    n_classes: usize,
    n_id: usize,
    n_ood: usize,
    signal: *const f64,
    n_stages: usize,
    sigma: f64,
    rho: f64,
    seed: u64,
    out: *mut *mut UqcTable,
) -> UqcStatus {
    guard(|| {
        let signal = slice_arg(signal, n_stages, "signal")?.to_vec();
        let spec = SynthSpec {
            n_classes,
            n_id,
            n_ood,
            stage_cost: vec![1.0; signal.len()],
            signal,
            sigma,
            rho,
            seed,
            ..SynthSpec::default()
        };
        put(out, UqcTable(generate(&spec)?))
    })
}

/// Writes the table as a UQC1 file.
///
/// # Safety
/// `table` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn uqc_table_write(table: *const UqcTable, path: *const c_char) -> UqcStatus {
    guard(|| {
        let t = handle(table, "table")?;
        t.0.write_binary(path_arg(path)?)?;
        Ok(())
    })
}

/// # Safety
/// `table` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn uqc_table_free(table: *mut UqcTable) {
    if !table.is_null() {
        drop(Box::from_raw(table));
    }
}

/// Sample, class and stage counts. Any output pointer may be NULL.
///
/// # Safety
/// `table` must be a live handle; non-NULL outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn uqc_table_dims(
    table: *const UqcTable,
    n_samples: *mut usize,
    n_classes: *mut usize,
    n_stages: *mut usize,
) -> UqcStatus {
    guard(|| {
        let t = &handle(table, "table")?.0;
        for (p, v) in [
            (n_samples, t.n_samples()),
            (n_classes, t.n_classes()),
            (n_stages, t.n_stages()),
        ] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Labels (`-1` for OOD) and domain flags (0 ID, 1 OOD). Either output may
/// be NULL; otherwise it must hold at least `n_samples` elements.
///
/// # Safety
/// `table` must be a live handle; outputs must hold `len` elements.
#[no_mangle]
pub unsafe extern "C" fn uqc_table_labels(
    table: *const UqcTable,
    labels: *mut i32,
    domains: *mut u8,
    len: usize,
) -> UqcStatus {
    guard(|| {
        let t = &handle(table, "table")?.0;
        let n = t.n_samples();
        if let Some(out) = out_slice(labels, len, n, "labels")? {
            out.copy_from_slice(t.labels());
        }
        if let Some(out) = out_slice(domains, len, n, "domains")? {
            for (o, d) in out.iter_mut().zip(t.domain()) {
                *o = u8::from(*d == Domain::Ood);
            }
        }
        Ok(())
    })
}

/// Uncertainty and prediction of the ensemble of stages `1..=prefix_len`.
/// Either output may be NULL.
///
/// # Safety
/// `table` must be a live handle; outputs must hold `len` elements.
#[no_mangle]
pub unsafe extern "C" fn uqc_prefix_evaluate(
    table: *const UqcTable,
    score: UqcScore,
    prefix_len: usize,
    uncertainty: *mut f64,
    prediction: *mut u32,
    len: usize,
) -> UqcStatus {
    guard(|| {
        let t = &handle(table, "table")?.0;
        let out = prefix_evaluate(t, score.method(), prefix_len).map_err(Error::from)?;
        if let Some(buf) = out_slice(uncertainty, len, t.n_samples(), "uncertainty")? {
            buf.copy_from_slice(&out.uncertainty);
        }
        if let Some(buf) = out_slice(prediction, len, t.n_samples(), "prediction")? {
            buf.copy_from_slice(&out.prediction);
        }
        Ok(())
    })
}

/// Builds a window policy: exit `m` stops a sample whose uncertainty lies
/// outside `[lo[m], hi[m]]`. Use -INFINITY/INFINITY for open sides and
/// `lo = hi = INFINITY` for an exit that stops everything.
///
/// # Safety
/// `lo` and `hi` must hold `n_exits` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn uqc_policy_windows(
    score: UqcScore,
    lo: *const f64,
    hi: *const f64,
    n_exits: usize,
    out: *mut *mut UqcPolicy,
) -> UqcStatus {
    guard(|| {
        let (lo, hi) = (slice_arg(lo, n_exits, "lo")?, slice_arg(hi, n_exits, "hi")?);
        let rules = lo
            .iter()
            .zip(hi)
            .map(|(&l, &h)| ExitRule::window(l, h))
            .collect::<Result<Vec<_>, _>>()?;
        put(out, UqcPolicy(CascadePolicy::new(rules, score.method())?))
    })
}

/// Reads a policy file written by `uqcascade calibrate`. Its windows are
/// used as stored.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn uqc_policy_read(path: *const c_char, out: *mut *mut UqcPolicy) -> UqcStatus {
    guard(|| {
        let policy = PolicyFile::read(path_arg(path)?)?;
        put(out, UqcPolicy(policy.cascade_policy()?))
    })
}

/// # Safety
/// `policy` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn uqc_policy_free(policy: *mut UqcPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// Runs the cascade over every sample of `table`.
///
/// # Safety
/// `table` and `policy` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn uqc_cascade_run(
    table: *const UqcTable,
    policy: *const UqcPolicy,
    out: *mut *mut UqcTrace,
) -> UqcStatus {
    guard(|| {
        let t = &handle(table, "table")?.0;
        let p = &handle(policy, "policy")?.0;
        put(out, UqcTrace(run_cascade(t, p)?))
    })
}

/// # Safety
/// `trace` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn uqc_trace_free(trace: *mut UqcTrace) {
    if !trace.is_null() {
        drop(Box::from_raw(trace));
    }
}

/// Number of samples in the trace, or 0 for NULL.
///
/// # Safety
/// `trace` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn uqc_trace_len(trace: *const UqcTrace) -> usize {
    trace.as_ref().map_or(0, |t| t.0.len())
}

/// Mean cost per sample, or NaN for NULL.
///
/// # Safety
/// `trace` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn uqc_trace_avg_cost(trace: *const UqcTrace) -> f64 {
    trace.as_ref().map_or(f64::NAN, |t| t.0.avg_cost)
}

/// Copies per-sample exit stage (1-based), final uncertainty and final
/// prediction. Any output may be NULL.
///
/// # Safety
/// `trace` must be a live handle; outputs must hold `len` elements.
#[no_mangle]
pub unsafe extern "C" fn uqc_trace_copy(
    trace: *const UqcTrace,
    exit_stage: *mut u32,
    uncertainty: *mut f64,
    prediction: *mut u32,
    len: usize,
) -> UqcStatus {
    guard(|| {
        let t = &handle(trace, "trace")?.0;
        let n = t.len();
        if let Some(buf) = out_slice(exit_stage, len, n, "exit_stage")? {
            buf.copy_from_slice(&t.exit_stage);
        }
        if let Some(buf) = out_slice(uncertainty, len, n, "uncertainty")? {
            buf.copy_from_slice(&t.final_uncertainty);
        }
        if let Some(buf) = out_slice(prediction, len, n, "prediction")? {
            buf.copy_from_slice(&t.final_prediction);
        }
        Ok(())
    })
}

/// Probability that a random OOD sample is more uncertain than a random ID
/// sample, ties counting one half. Returned as a fraction.
///
/// # Safety
/// `id` and `ood` must hold `n_id` and `n_ood` values; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn uqc_auroc(
    id: *const f64,
    n_id: usize,
    ood: *const f64,
    n_ood: usize,
    out: *mut f64,
) -> UqcStatus {
    guard(|| {
        let v = auroc(slice_arg(id, n_id, "id")?, slice_arg(ood, n_ood, "ood")?)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = v;
        Ok(())
    })
}

/// Area under the risk-coverage curve of samples with uncertainty `u` and
/// 0/1 error flags `wrong`. Returned as a fraction.
///
/// # Safety
/// `u` and `wrong` must hold `n` values; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn uqc_aurc(u: *const f64, wrong: *const u8, n: usize, out: *mut f64) -> UqcStatus {
    guard(|| {
        let u = slice_arg(u, n, "u")?.to_vec();
        let label = slice_arg(wrong, n, "wrong")?
            .iter()
            .map(|&w| i32::from(w != 0))
            .collect();
        let outcome = EvalOutcome::new(u, vec![0; n], label, vec![Domain::Id; n], 1.0)?;
        let v = aurc(&rc_curve(&outcome, Loss::Selective)?);
        if out.is_null() {
            return Err(null("out"));
        }
        *out = v;
        Ok(())
    })
}
