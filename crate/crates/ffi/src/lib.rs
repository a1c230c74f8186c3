// SPDX-License-Identifier: MIT OR Apache-2.0

//! C ABI over the `superact` engine.
//!
//! Every entry point returns an [`SaStatus`]. On failure a message is kept in
//! thread-local storage and can be read with [`sa_last_error`]. Archives are
//! exposed as an opaque handle that the caller releases with
//! [`sa_archive_free`]. Panics never cross the boundary; they map to
//! [`SaStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use superact::archive::{read_archive, EmbeddingArchive};
use superact::attribution::{kernel_shap_attribution, Aggregation, ShapConfig, TokenGame};
use superact::detection::{calibrate_superactivator, superactivator_threshold, LayerInput};
use superact::distributions::empirical_quantile;
use superact::error::Error;
use superact::numeric::{dot, stream};

/// Result code of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidArchive = 3,
    Io = 4,
    DimensionMismatch = 5,
    NoPositiveSamples = 6,
    UnknownConcept = 7,
    Internal = 8,
    Panic = 9,
}

/// Opaque handle to a validated archive.
pub struct SaArchive {
    inner: EmbeddingArchive,
}

/// A calibrated SuperActivator detector. `layer_index` indexes the layer
/// arrays passed to [`sa_calibrate_superactivator`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaDetector {
    pub layer_index: usize,
    pub delta: f64,
    pub tau: f64,
    pub calibration_f1: f64,
}

/// Token-score aggregation inside the attribution objective.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SaAggregation {
    Mean = 0,
    Max = 1,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SaStatus {
    match e {
        Error::Archive { .. } => SaStatus::InvalidArchive,
        Error::Io { .. } => SaStatus::Io,
        Error::DimensionMismatch { .. } => SaStatus::DimensionMismatch,
        Error::NoPositiveSamples(_) => SaStatus::NoPositiveSamples,
        Error::UnknownConcept(_) => SaStatus::UnknownConcept,
        Error::Empty(_) | Error::InvalidArgument(_) | Error::Config(_) | Error::DegenerateSplit { .. } => {
            SaStatus::InvalidArgument
        }
        _ => SaStatus::Internal,
    }
}

struct Fail(SaStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(SaStatus::NullPointer, format!("`{what}` is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(SaStatus::InvalidArgument, msg.into())
}

/// Runs `f`, recording any failure or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SaStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SaStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside superact".into());
            SaStatus::Panic
        }
    }
}

/// # Safety
/// `p` must be null or point to `n` readable values.
unsafe fn slice_arg<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, n))
}

/// # Safety
/// `p` must be null or a NUL-terminated string.
unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("`{what}` is not UTF-8")))
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn sa_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Opens and validates the archive directory `dir`.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn sa_archive_open(dir: *const c_char, out: *mut *mut SaArchive) -> SaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let dir = str_arg(dir, "dir")?;
        let inner = read_archive(Path::new(dir))?;
        *out = Box::into_raw(Box::new(SaArchive { inner }));
        Ok(())
    })
}

/// Releases a handle from [`sa_archive_open`]. Null is a no-op.
///
/// # Safety
/// `archive` must be null or an unreleased handle.
#[no_mangle]
pub unsafe extern "C" fn sa_archive_free(archive: *mut SaArchive) {
    if !archive.is_null() {
        drop(Box::from_raw(archive));
    }
}

/// # Safety
/// `archive` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sa_archive_dim(archive: *const SaArchive, out: *mut usize) -> SaStatus {
    guard(|| {
        let a = archive.as_ref().ok_or_else(|| null("archive"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = a.inner.dim();
        Ok(())
    })
}

/// # Safety
/// `archive` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sa_archive_num_samples(archive: *const SaArchive, out: *mut usize) -> SaStatus {
    guard(|| {
        let a = archive.as_ref().ok_or_else(|| null("archive"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = a.inner.samples().len();
        Ok(())
    })
}

/// Nearest-rank `q`-quantile of `n` scores.
///
/// # Safety
/// `scores` must hold `n` values and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn sa_empirical_quantile(scores: *const f64, n: usize, q: f64, out: *mut f64) -> SaStatus {
    guard(|| {
        let s = slice_arg(scores, n, "scores")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = empirical_quantile(s, q)?;
        Ok(())
    })
}

/// Threshold keeping the top `delta` fraction of in-concept scores.
///
/// # Safety
/// `scores` must hold `n` values and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn sa_superactivator_threshold(scores: *const f64, n: usize, delta: f64, out: *mut f64) -> SaStatus {
    guard(|| {
        let s = slice_arg(scores, n, "scores")?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = superactivator_threshold(s, delta)?;
        Ok(())
    })
}

/// Selects the layer and sparsity level with the best validation F1.
/// `archives[i]` is paired with concept vector `vectors[i]`, each of length
/// that archive's dimension.
///
/// # Safety
/// `archives` and `vectors` must hold `n_layers` valid pointers,
/// `concept_id` must be a NUL-terminated string, `delta_grid` must hold
/// `n_grid` values and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn sa_calibrate_superactivator(
    archives: *const *const SaArchive,
    vectors: *const *const f64,
    n_layers: usize,
    concept_id: *const c_char,
    delta_grid: *const f64,
    n_grid: usize,
    out: *mut SaDetector,
) -> SaStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        if n_layers == 0 {
            return Err(invalid("no layers given"));
        }
        let handles = slice_arg(archives, n_layers, "archives")?;
        let vecs = slice_arg(vectors, n_layers, "vectors")?;
        let concept = str_arg(concept_id, "concept_id")?;
        let grid = slice_arg(delta_grid, n_grid, "delta_grid")?;
        let mut layers = Vec::with_capacity(n_layers);
        for (h, v) in handles.iter().zip(vecs) {
            let a = &h.as_ref().ok_or_else(|| null("archives[i]"))?.inner;
            let v = slice_arg(*v, a.dim(), "vectors[i]")?;
            layers.push(LayerInput::new(a, v));
        }
        let det = calibrate_superactivator(&layers, concept, grid)?;
        let layer_index = layers
            .iter()
            .position(|l| l.archive.layer_tag() == det.layer_tag)
            .ok_or_else(|| Fail(SaStatus::Internal, "calibrated layer not among inputs".into()))?;
        *out = SaDetector {
            layer_index,
            delta: det.delta.unwrap_or(f64::NAN),
            tau: det.tau,
            calibration_f1: det.calibration_f1,
        };
        Ok(())
    })
}

/// KernelSHAP values of the token game `f(M) = agg_i [M_i] <z_i, target>`
/// for a row-major `n_tokens x dim` token matrix. Uses full enumeration
/// when `2^n - 2 <= n_perturb`, sampling seeded by `seed` otherwise.
///
/// # Safety
/// `tokens` must hold `n_tokens * dim` values, `target` `dim` values and
/// `out_phi` must have room for `n_tokens` values.
#[no_mangle]
pub unsafe extern "C" fn sa_kernel_shap(
    tokens: *const f64,
    n_tokens: usize,
    dim: usize,
    target: *const f64,
    aggregation: SaAggregation,
    n_perturb: usize,
    seed: u64,
    out_phi: *mut f64,
) -> SaStatus {
    guard(|| {
        if n_tokens == 0 || dim == 0 {
            return Err(invalid("need at least one token and one dimension"));
        }
        let len = n_tokens.checked_mul(dim).ok_or_else(|| invalid("token matrix too large"))?;
        let z = slice_arg(tokens, len, "tokens")?;
        let t = slice_arg(target, dim, "target")?;
        if out_phi.is_null() {
            return Err(null("out_phi"));
        }
        let alignments: Vec<f64> = z.chunks_exact(dim).map(|row| dot(row, t)).collect();
        let agg = match aggregation {
            SaAggregation::Mean => Aggregation::Mean,
            SaAggregation::Max => Aggregation::Max,
        };
        let game = TokenGame::from_alignments(alignments, agg);
        let mut rng = stream(seed, &["ffi-kernel-shap"]);
        let fit = kernel_shap_attribution(&game, &ShapConfig { n_perturb }, &mut rng)?;
        slice::from_raw_parts_mut(out_phi, n_tokens).copy_from_slice(&fit.scores);
        Ok(())
    })
}
