//! C ABI over the shapdistill pipeline.
//!
//! Every fallible function returns an [`SdStatus`]; on failure the message
//! is available from [`sd_last_error`] on the same thread until the next
//! call. Objects are opaque handles released with their `_free` function.
//! Strings are NUL-terminated UTF-8 paths.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use shapdistill::cacs::{self, Acpb};
use shapdistill::calibration::{self, DistillConfig, Guidance};
use shapdistill::haga::HagaGrid;
use shapdistill::knowledge_base::{KnowledgeBase, RetrievalConfig, Tier};
use shapdistill::prediction::{predict_voted, PredictConfig};
use shapdistill::schema::{self, FeatureKind, Label, SampleRecord};
use shapdistill::{Error, StubPolicy};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SdStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Parse = 4,
    InvalidInput = 5,
    Policy = 6,
    Retrieval = 7,
    Store = 8,
    Panic = 99,
}

/// Guidance category of a reward.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SdGuidance {
    Over = 0,
    Under = 1,
    Acceptable = 2,
    Contradicts = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SdTier {
    Intersection = 0,
    Majority = 1,
    Global = 2,
    Unsupported = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SdReward {
    pub diff: f64,
    pub alignment: f64,
    pub score: f64,
    pub guidance: i32,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SdDistillSummary {
    pub total: usize,
    pub converged: usize,
    pub unconverged: usize,
    pub stored: usize,
    pub failed: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SdPrediction {
    pub probability: f64,
    /// 0 healthy, 1 unhealthy.
    pub classification: u8,
    pub healthy_votes: usize,
    pub unhealthy_votes: usize,
    /// [`SdTier`] of the first majority run.
    pub tier: i32,
    pub precedents: usize,
}

/// Opaque contribution probability base.
pub struct SdAcpb(Acpb);

/// Opaque case store.
pub struct SdStore(KnowledgeBase);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("NUL bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(e: &Error) -> SdStatus {
    match e {
        Error::Io { .. } => SdStatus::Io,
        Error::Parse { .. } | Error::MissingColumn { .. } | Error::Schema(_) => SdStatus::Parse,
        Error::Policy { .. } | Error::Vote { .. } => SdStatus::Policy,
        Error::EmptyStore | Error::NoPrecedents | Error::Embedding(_) => SdStatus::Retrieval,
        Error::Checksum { .. } | Error::StoreVersion { .. } | Error::Unconverged(_) => {
            SdStatus::Store
        }
        _ => SdStatus::InvalidInput,
    }
}

struct Fail(SdStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

/// Runs `f`, recording any error or panic for [`sd_last_error`].
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SdStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SdStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            SdStatus::Panic
        }
    }
}

fn null(name: &str) -> Fail {
    Fail(SdStatus::NullArgument, format!("`{name}` is null"))
}

unsafe fn path_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        Fail(
            SdStatus::InvalidUtf8,
            format!("`{name}` is not valid UTF-8"),
        )
    })
}

unsafe fn slice_arg<'a>(p: *const f64, n: usize, name: &str) -> Result<&'a [f64], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn out_arg<'a, T>(p: *mut T, name: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(name))
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn sd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

#[no_mangle]
pub extern "C" fn sd_sigmoid(x: f64) -> f64 {
    cacs::sigmoid(x)
}

/// `sigmoid(base_value + mean_shap) - sigmoid(base_value)`.
#[no_mangle]
pub extern "C" fn sd_contribution_probability(base_value: f64, mean_shap: f64) -> f64 {
    cacs::contribution_probability(base_value, mean_shap)
}

/// Interval midpoint of `value` on a grid of spacing `step`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sd_assign_interval(
    value: f64,
    step: f64,
    integer_kind: bool,
    out: *mut f64,
) -> SdStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let kind = if integer_kind {
            FeatureKind::Integer
        } else {
            FeatureKind::Continuous
        };
        *out = HagaGrid::new(step)?.assign(value, kind)?;
        Ok(())
    })
}

/// `0.5 + sum(c_i * w_i)` clamped to [0, 1].
///
/// # Safety
/// `contributions` and `weights` must point to `n` doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sd_infer_probability(
    contributions: *const f64,
    weights: *const f64,
    n: usize,
    out: *mut f64,
) -> SdStatus {
    guard(|| {
        let c = slice_arg(contributions, n, "contributions")?;
        let w = slice_arg(weights, n, "weights")?;
        let out = out_arg(out, "out")?;
        let raw = 0.5 + c.iter().zip(w).map(|(c, w)| c * w).sum::<f64>();
        *out = raw.clamp(0.0, 1.0);
        Ok(())
    })
}

/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sd_compute_reward(
    teacher_prob: f64,
    infer_prob: f64,
    out: *mut SdReward,
) -> SdStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        if !(teacher_prob > 0.0 && teacher_prob <= 1.0) {
            return Err(Fail(
                SdStatus::InvalidInput,
                format!("teacher probability must lie in (0, 1], got {teacher_prob}"),
            ));
        }
        let r = calibration::compute_reward(teacher_prob, infer_prob);
        *out = SdReward {
            diff: r.diff,
            alignment: r.alignment,
            score: r.score,
            guidance: match r.guidance {
                Guidance::Over => SdGuidance::Over,
                Guidance::Under => SdGuidance::Under,
                Guidance::Acceptable => SdGuidance::Acceptable,
                Guidance::Contradicts => SdGuidance::Contradicts,
            } as i32,
        };
        Ok(())
    })
}

/// Builds a base from a schema file and matrix file.
///
/// # Safety
/// Paths must be NUL-terminated; `out` must be valid. Release the handle
/// with [`sd_acpb_free`].
#[no_mangle]
pub unsafe extern "C" fn sd_acpb_extract(
    schema_path: *const c_char,
    matrix_path: *const c_char,
    step: f64,
    out: *mut *mut SdAcpb,
) -> SdStatus {
    guard(|| {
        let s = path_arg(schema_path, "schema_path")?;
        let m = path_arg(matrix_path, "matrix_path")?;
        let out = out_arg(out, "out")?;
        let schema = schema::load_schema(s)?;
        let matrix = schema::load_matrix(m, &schema)?;
        let acpb = cacs::extract(&matrix, HagaGrid::new(step)?)?;
        *out = Box::into_raw(Box::new(SdAcpb(acpb)));
        Ok(())
    })
}

/// # Safety
/// `path` must be NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sd_acpb_read(path: *const c_char, out: *mut *mut SdAcpb) -> SdStatus {
    guard(|| {
        let p = path_arg(path, "path")?;
        let out = out_arg(out, "out")?;
        *out = Box::into_raw(Box::new(SdAcpb(cacs::read_acpb(p)?)));
        Ok(())
    })
}

/// # Safety
/// `acpb` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn sd_acpb_write(acpb: *const SdAcpb, path: *const c_char) -> SdStatus {
    guard(|| {
        let a = acpb.as_ref().ok_or_else(|| null("acpb"))?;
        cacs::write_acpb(path_arg(path, "path")?, &a.0)?;
        Ok(())
    })
}

/// Number of features, or 0 for a null handle.
///
/// # Safety
/// `acpb` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn sd_acpb_feature_count(acpb: *const SdAcpb) -> usize {
    acpb.as_ref().map_or(0, |a| a.0.features.len())
}

/// # Safety
/// `acpb` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sd_acpb_free(acpb: *mut SdAcpb) {
    if !acpb.is_null() {
        drop(Box::from_raw(acpb));
    }
}

/// Calibrates every row of the matrix with the deterministic stub policy
/// and returns the resulting store. `max_iters` 0 means the default.
///
/// # Safety
/// `acpb` must come from this library; `matrix_path` NUL-terminated;
/// `out_store` valid; `out_summary` may be null.
#[no_mangle]
pub unsafe extern "C" fn sd_distill_stub(
    acpb: *const SdAcpb,
    matrix_path: *const c_char,
    damping: f64,
    epsilon: f64,
    max_iters: usize,
    out_store: *mut *mut SdStore,
    out_summary: *mut SdDistillSummary,
) -> SdStatus {
    guard(|| {
        let a = &acpb.as_ref().ok_or_else(|| null("acpb"))?.0;
        let m = path_arg(matrix_path, "matrix_path")?;
        let out_store = out_arg(out_store, "out_store")?;
        let policy =
            StubPolicy::new(damping).map_err(|e| Fail(SdStatus::InvalidInput, e.to_string()))?;
        let matrix = schema::load_matrix(m, &a.schema)?;
        let mut config = DistillConfig {
            epsilon,
            ..Default::default()
        };
        if max_iters > 0 {
            config.max_iters = max_iters;
        }
        let store = KnowledgeBase::for_cohort(&matrix, RetrievalConfig::default());
        let s = calibration::distill_cohort(&matrix, a, &policy, &config, &store)?;
        if let Some(out) = out_summary.as_mut() {
            *out = SdDistillSummary {
                total: s.total,
                converged: s.converged,
                unconverged: s.unconverged,
                stored: s.stored,
                failed: s.failed.len(),
            };
        }
        *out_store = Box::into_raw(Box::new(SdStore(store)));
        Ok(())
    })
}

/// # Safety
/// `path` must be NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sd_store_open(path: *const c_char, out: *mut *mut SdStore) -> SdStatus {
    guard(|| {
        let p = path_arg(path, "path")?;
        let out = out_arg(out, "out")?;
        *out = Box::into_raw(Box::new(SdStore(KnowledgeBase::open(p)?)));
        Ok(())
    })
}

/// # Safety
/// `store` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn sd_store_persist(store: *const SdStore, path: *const c_char) -> SdStatus {
    guard(|| {
        let s = store.as_ref().ok_or_else(|| null("store"))?;
        s.0.persist(path_arg(path, "path")?)?;
        Ok(())
    })
}

/// Number of stored cases, or 0 for a null handle.
///
/// # Safety
/// `store` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn sd_store_len(store: *const SdStore) -> usize {
    store.as_ref().map_or(0, |s| s.0.len())
}

/// # Safety
/// `store` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sd_store_free(store: *mut SdStore) {
    if !store.is_null() {
        drop(Box::from_raw(store));
    }
}

/// Voted prediction for one case given as raw feature values, using the
/// stub policy and default retrieval settings.
///
/// # Safety
/// Handles must come from this library; `values` must point to `n`
/// doubles; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sd_predict_stub(
    acpb: *const SdAcpb,
    store: *const SdStore,
    values: *const f64,
    n: usize,
    runs: usize,
    damping: f64,
    out: *mut SdPrediction,
) -> SdStatus {
    guard(|| {
        let a = &acpb.as_ref().ok_or_else(|| null("acpb"))?.0;
        let s = &store.as_ref().ok_or_else(|| null("store"))?.0;
        let values = slice_arg(values, n, "values")?;
        let out = out_arg(out, "out")?;
        a.schema
            .check_values(values)
            .map_err(|(_, m)| Fail(SdStatus::InvalidInput, m))?;
        let policy =
            StubPolicy::new(damping).map_err(|e| Fail(SdStatus::InvalidInput, e.to_string()))?;
        let config = PredictConfig {
            runs,
            ..Default::default()
        };
        let case = SampleRecord::unlabeled("case", values.to_vec());
        let v = predict_voted(&case, a, s, &policy, &config)?;
        let rep = v.representative();
        *out = SdPrediction {
            probability: v.probability,
            classification: v.classification.code(),
            healthy_votes: v.tally.healthy,
            unhealthy_votes: v.tally.unhealthy,
            tier: match rep.retrieved.tier {
                Tier::Intersection => SdTier::Intersection,
                Tier::Majority => SdTier::Majority,
                Tier::Global => SdTier::Global,
                Tier::Unsupported => SdTier::Unsupported,
            } as i32,
            precedents: rep.retrieved.candidates.len(),
        };
        debug_assert_eq!(Label::from_probability(v.probability), v.classification);
        Ok(())
    })
}
