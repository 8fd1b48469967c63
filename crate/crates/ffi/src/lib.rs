//! C ABI over the `covbias` library.
//!
//! Datasets and models are opaque heap handles released with their `_free`
//! function. Every fallible call returns a [`CovbiasStatus`]; on failure the
//! message is available from [`covbias_last_error`] on the same thread.
//! Output arrays are caller-allocated and their length is passed in and
//! checked. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::slice;

use covbias::impute::{ImputationKind, ImputationStrategy};
use covbias::metrics::{self, Measure};
use covbias::model::{self, ModelParams};
use covbias::tds;
use covbias::tiles::Dataset;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovbiasStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    LengthMismatch = 3,
    Io = 4,
    Format = 5,
    Model = 6,
    Metrics = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovbiasImputation {
    Zero = 0,
    Median = 1,
    PixelSample = 2,
    NoiseAugmented = 3,
}

impl From<CovbiasImputation> for ImputationKind {
    fn from(k: CovbiasImputation) -> Self {
        match k {
            CovbiasImputation::Zero => ImputationKind::Zero,
            CovbiasImputation::Median => ImputationKind::Median,
            CovbiasImputation::PixelSample => ImputationKind::PixelSample,
            CovbiasImputation::NoiseAugmented => ImputationKind::NoiseAugmented,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovbiasMeasureKind {
    Value = 0,
    Undefined = 1,
    Infinite = 2,
}

/// A metric value; `value` is meaningful only for `Value`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CovbiasMeasure {
    pub kind: CovbiasMeasureKind,
    pub value: f64,
}

impl From<Measure> for CovbiasMeasure {
    fn from(m: Measure) -> Self {
        match m {
            Measure::Value(value) => Self {
                kind: CovbiasMeasureKind::Value,
                value,
            },
            Measure::Undefined => Self {
                kind: CovbiasMeasureKind::Undefined,
                value: f64::NAN,
            },
            Measure::Infinite => Self {
                kind: CovbiasMeasureKind::Infinite,
                value: f64::INFINITY,
            },
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CovbiasConfusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

/// Opaque dataset handle.
pub struct CovbiasDataset(Dataset);

/// Opaque model handle.
pub struct CovbiasModel {
    params: ModelParams,
    imputation: ImputationStrategy,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(CovbiasStatus, String);

impl Failure {
    fn new(status: CovbiasStatus, msg: impl Into<String>) -> Self {
        Self(status, msg.into())
    }
}

impl From<tds::TdsError> for Failure {
    fn from(e: tds::TdsError) -> Self {
        let status = match e {
            tds::TdsError::Io { .. } => CovbiasStatus::Io,
            _ => CovbiasStatus::Format,
        };
        Self(status, e.to_string())
    }
}

impl From<model::ModelError> for Failure {
    fn from(e: model::ModelError) -> Self {
        Self(CovbiasStatus::Model, e.to_string())
    }
}

impl From<metrics::MetricsError> for Failure {
    fn from(e: metrics::MetricsError) -> Self {
        let status = match e {
            metrics::MetricsError::LengthMismatch(_) => CovbiasStatus::LengthMismatch,
            _ => CovbiasStatus::Metrics,
        };
        Self(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CovbiasStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CovbiasStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            CovbiasStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure::new(CovbiasStatus::NullPointer, "path is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| Failure::new(CovbiasStatus::InvalidArgument, "path is not UTF-8"))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref()
        .ok_or_else(|| Failure::new(CovbiasStatus::NullPointer, format!("{what} is null")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut()
        .ok_or_else(|| Failure::new(CovbiasStatus::NullPointer, format!("{what} is null")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::new(CovbiasStatus::NullPointer, format!("{what} is null")));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn out_slice<'a, T>(p: *mut T, len: usize, want: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len != want {
        return Err(Failure::new(
            CovbiasStatus::LengthMismatch,
            format!("{what} has length {len}, expected {want}"),
        ));
    }
    if want == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure::new(CovbiasStatus::NullPointer, format!("{what} is null")));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn covbias_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn covbias_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Load a `.tds` dataset from its manifest path.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn covbias_dataset_load(path: *const c_char, out: *mut *mut CovbiasDataset) -> CovbiasStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let ds = tds::load_dataset(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(CovbiasDataset(ds)));
        Ok(())
    })
}

/// # Safety
/// `ds` must come from [`covbias_dataset_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn covbias_dataset_free(ds: *mut CovbiasDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Number of tiles, 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn covbias_dataset_len(ds: *const CovbiasDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.len())
}

/// # Safety
/// `ds` must be a live handle; the out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn covbias_dataset_shape(
    ds: *const CovbiasDataset,
    channels: *mut usize,
    height: *mut usize,
    width: *mut usize,
) -> CovbiasStatus {
    guard(|| {
        let (c, h, w) = ref_arg(ds, "dataset")?.0.shape();
        *out_arg(channels, "channels")? = c;
        *out_arg(height, "height")? = h;
        *out_arg(width, "width")? = w;
        Ok(())
    })
}

/// Coverage of every tile; `len` must equal the dataset length.
///
/// # Safety
/// `ds` must be a live handle and `out` point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn covbias_dataset_coverages(ds: *const CovbiasDataset, out: *mut f64, len: usize) -> CovbiasStatus {
    guard(|| {
        let ds = &ref_arg(ds, "dataset")?.0;
        out_slice(out, len, ds.len(), "out")?.copy_from_slice(&ds.coverages());
        Ok(())
    })
}

/// Labels as 1 (plume), 0 (none) or -1 (unlabeled).
///
/// # Safety
/// `ds` must be a live handle and `out` point to `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn covbias_dataset_labels(ds: *const CovbiasDataset, out: *mut i8, len: usize) -> CovbiasStatus {
    guard(|| {
        let ds = &ref_arg(ds, "dataset")?.0;
        let out = out_slice(out, len, ds.len(), "out")?;
        for (o, t) in out.iter_mut().zip(ds.tiles()) {
            *o = t.label().map_or(-1, i8::from);
        }
        Ok(())
    })
}

/// Load a checkpoint. The imputation recorded with it (zero when absent)
/// becomes the model's default.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn covbias_model_load(path: *const c_char, out: *mut *mut CovbiasModel) -> CovbiasStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let (params, cfg) = model::load_checkpoint(&path_arg(path)?)?;
        let imputation = cfg.map_or(ImputationStrategy::new(ImputationKind::Zero), |c| c.imputation);
        *out = Box::into_raw(Box::new(CovbiasModel { params, imputation }));
        Ok(())
    })
}

/// # Safety
/// `m` must come from [`covbias_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn covbias_model_free(m: *mut CovbiasModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Number of parameters, 0 for a null handle.
///
/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn covbias_model_param_count(m: *const CovbiasModel) -> usize {
    m.as_ref().map_or(0, |m| m.params.len())
}

/// Impute every tile with the model's recorded strategy and score it.
///
/// # Safety
/// Handles must be live and `out` point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn covbias_model_score(
    m: *const CovbiasModel,
    ds: *const CovbiasDataset,
    seed: u64,
    out: *mut f64,
    len: usize,
) -> CovbiasStatus {
    guard(|| {
        let m = ref_arg(m, "model")?;
        score(m, ref_arg(ds, "dataset")?, m.imputation, seed, out, len)
    })
}

/// [`covbias_model_score`] with an explicit imputation strategy.
///
/// # Safety
/// Handles must be live and `out` point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn covbias_model_score_with(
    m: *const CovbiasModel,
    ds: *const CovbiasDataset,
    imputation: CovbiasImputation,
    noise_scale: f64,
    seed: u64,
    out: *mut f64,
    len: usize,
) -> CovbiasStatus {
    guard(|| {
        if !(noise_scale >= 0.0 && noise_scale.is_finite()) {
            return Err(Failure::new(CovbiasStatus::InvalidArgument, "noise_scale must be non-negative"));
        }
        let strategy = ImputationStrategy {
            kind: imputation.into(),
            noise_scale,
        };
        score(ref_arg(m, "model")?, ref_arg(ds, "dataset")?, strategy, seed, out, len)
    })
}

unsafe fn score(
    m: &CovbiasModel,
    ds: &CovbiasDataset,
    strategy: ImputationStrategy,
    seed: u64,
    out: *mut f64,
    len: usize,
) -> Result<(), Failure> {
    let out = out_slice(out, len, ds.0.len(), "out")?;
    for (o, x) in out.iter_mut().zip(model::prepare_inputs(ds.0.tiles(), strategy, seed)) {
        *o = model::forward(&m.params, &x)?;
    }
    Ok(())
}

/// Scores at or above `threshold` count as flagged.
///
/// # Safety
/// `scores` must point to `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn covbias_count_flags(scores: *const f64, n: usize, threshold: f64, out: *mut usize) -> CovbiasStatus {
    guard(|| {
        let scores = slice_arg(scores, n, "scores")?;
        *out_arg(out, "out")? = metrics::count_flags(scores, threshold);
        Ok(())
    })
}

unsafe fn labels_arg(labels: *const u8, n: usize) -> Result<Vec<bool>, Failure> {
    Ok(slice_arg(labels, n, "labels")?.iter().map(|&l| l != 0).collect())
}

/// Confusion counts for labels given as 0/1 bytes.
///
/// # Safety
/// `scores` and `labels` must point to `n` elements.
#[no_mangle]
pub unsafe extern "C" fn covbias_confusion(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    threshold: f64,
    out: *mut CovbiasConfusion,
) -> CovbiasStatus {
    guard(|| {
        let c = metrics::confusion(slice_arg(scores, n, "scores")?, &labels_arg(labels, n)?, threshold)?;
        *out_arg(out, "out")? = CovbiasConfusion {
            tp: c.tp,
            fp: c.fp,
            tn: c.tn,
            fn_: c.fn_,
        };
        Ok(())
    })
}

fn counts(c: &CovbiasConfusion) -> metrics::ConfusionCounts {
    metrics::ConfusionCounts {
        tp: c.tp,
        fp: c.fp,
        tn: c.tn,
        fn_: c.fn_,
    }
}

/// Balanced accuracy, precision and recall of a confusion matrix.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn covbias_classification_metrics(
    c: *const CovbiasConfusion,
    bacc: *mut CovbiasMeasure,
    precision: *mut CovbiasMeasure,
    recall: *mut CovbiasMeasure,
) -> CovbiasStatus {
    guard(|| {
        let c = counts(ref_arg(c, "confusion")?);
        *out_arg(bacc, "bacc")? = metrics::balanced_accuracy(&c).into();
        *out_arg(precision, "precision")? = metrics::precision(&c).into();
        *out_arg(recall, "recall")? = metrics::recall(&c).into();
        Ok(())
    })
}

/// ΔFPR and ΔTPR (low-coverage minus high-coverage group).
///
/// # Safety
/// Input arrays must hold `n` elements; out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn covbias_delta_rates(
    scores: *const f64,
    labels: *const u8,
    coverages: *const f64,
    n: usize,
    threshold: f64,
    coverage_split: f64,
    delta_fpr: *mut CovbiasMeasure,
    delta_tpr: *mut CovbiasMeasure,
) -> CovbiasStatus {
    guard(|| {
        let (f, t) = metrics::delta_rates(
            slice_arg(scores, n, "scores")?,
            &labels_arg(labels, n)?,
            slice_arg(coverages, n, "coverages")?,
            threshold,
            coverage_split,
        )?;
        *out_arg(delta_fpr, "delta_fpr")? = f.into();
        *out_arg(delta_tpr, "delta_tpr")? = t.into();
        Ok(())
    })
}

/// Ratio of the larger to the smaller group flag rate.
///
/// # Safety
/// Input arrays must hold `n` elements; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn covbias_parity(
    scores: *const f64,
    coverages: *const f64,
    n: usize,
    threshold: f64,
    coverage_split: f64,
    out: *mut CovbiasMeasure,
) -> CovbiasStatus {
    guard(|| {
        let p = metrics::parity(
            slice_arg(scores, n, "scores")?,
            slice_arg(coverages, n, "coverages")?,
            threshold,
            coverage_split,
        )?;
        *out_arg(out, "out")? = p.into();
        Ok(())
    })
}
