//! C interface to a trained run: routing, weighted next-token selection,
//! random projection and end-to-end answering of new prompts.
//!
//! Every fallible call returns an [`ElreaStatus`]. On failure the message
//! is kept per thread and read with [`elrea_last_error_message`]. Handles
//! are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use elrea_core::ensemble::ensemble_next_token;
use elrea_core::gradfeat::{project_rows, ProjectionSpec};
use elrea_core::model::linalg::norm;
use elrea_core::pipeline::{Deployment, PipelineConfig, Run};
use elrea_core::router::{route, RoutingWeights};
use elrea_core::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElreaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Config = 4,
    Dimension = 5,
    Weights = 6,
    Checkpoint = 7,
    MissingStage = 8,
    HashMismatch = 9,
    Panic = 10,
    Other = 11,
}

/// Projection matrix generator for one seed and shape.
pub struct ElreaProjector {
    spec: ProjectionSpec,
}

/// A finished run opened for inference.
pub struct ElreaModel {
    inner: Deployment,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> ElreaStatus {
    match e {
        Error::Io { .. } => ElreaStatus::Io,
        Error::Config(_) | Error::UnknownFamily(_) => ElreaStatus::Config,
        Error::Dimension { .. } => ElreaStatus::Dimension,
        Error::Weights(_) => ElreaStatus::Weights,
        Error::Checkpoint(_) => ElreaStatus::Checkpoint,
        Error::MissingStage { .. } => ElreaStatus::MissingStage,
        Error::HashMismatch { .. } => ElreaStatus::HashMismatch,
        Error::UnknownSymbol(_) | Error::OverLength { .. } | Error::ZeroDirection => {
            ElreaStatus::InvalidArgument
        }
        _ => ElreaStatus::Other,
    }
}

/// Runs `f`, recording any error or panic for `elrea_last_error_message`.
fn guard(f: impl FnOnce() -> Result<(), (ElreaStatus, String)>) -> ElreaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            ElreaStatus::Ok
        }
        Ok(Err((s, msg))) => {
            set_error(&msg);
            s
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&msg);
            ElreaStatus::Panic
        }
    }
}

fn core(e: Error) -> (ElreaStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (ElreaStatus, String) {
    (ElreaStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> (ElreaStatus, String) {
    (ElreaStatus::InvalidArgument, msg.into())
}

unsafe fn slice_in<'a, T>(
    p: *const T,
    n: usize,
    what: &str,
) -> Result<&'a [T], (ElreaStatus, String)> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, n))
}

unsafe fn str_in<'a>(p: *const c_char, what: &str) -> Result<&'a str, (ElreaStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn write_weights(w: &RoutingWeights, weights_out: *mut f64, base_out: *mut f64) {
    ptr::copy_nonoverlapping(w.cluster.as_ptr(), weights_out, w.cluster.len());
    *base_out = w.base;
}

/// Message for the last failed call on this thread; empty after a
/// successful call. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn elrea_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Routing weights for one direction against `n_clusters` centroids, each
/// `dim` long and stored row by row. Inputs are normalized here. A zero
/// direction gets uniform cluster weights and a base weight of 1.
///
/// # Safety
/// `direction` holds `dim` values, `centroids` holds `n_clusters * dim`,
/// `weights_out` has room for `n_clusters` and `base_out` for one.
#[no_mangle]
pub unsafe extern "C" fn elrea_route(
    direction: *const f64,
    dim: usize,
    centroids: *const f64,
    n_clusters: usize,
    weights_out: *mut f64,
    base_out: *mut f64,
) -> ElreaStatus {
    guard(|| {
        if dim == 0 {
            return Err(invalid("dim must be positive"));
        }
        let d = slice_in(direction, dim, "direction")?;
        let flat = slice_in(centroids, n_clusters * dim, "centroids")?;
        if (weights_out.is_null() && n_clusters > 0) || base_out.is_null() {
            return Err(null("output"));
        }
        let unit = |v: &[f64], what: &str| {
            let n = norm(v);
            if n > 0.0 && n.is_finite() {
                Ok(v.iter().map(|x| x / n).collect::<Vec<f64>>())
            } else {
                Err(invalid(format!("{what} has zero or non-finite norm")))
            }
        };
        let cs = flat
            .chunks(dim)
            .enumerate()
            .map(|(i, c)| unit(c, &format!("centroid {i}")))
            .collect::<Result<Vec<_>, _>>()?;
        let w = match unit(d, "direction") {
            Ok(u) => route(&u, &cs).map_err(core)?,
            Err(_) if norm(d) == 0.0 => RoutingWeights::featureless(n_clusters),
            Err(e) => return Err(e),
        };
        write_weights(&w, weights_out, base_out);
        Ok(())
    })
}

/// Argmax of the weighted sum of `n_rows` logit rows of length `vocab`
/// (ties to the lowest id).
///
/// # Safety
/// `logits` holds `n_rows * vocab` values and `weights` holds `n_rows`.
#[no_mangle]
pub unsafe extern "C" fn elrea_ensemble_next_token(
    logits: *const f64,
    n_rows: usize,
    vocab: usize,
    weights: *const f64,
    token_out: *mut u32,
) -> ElreaStatus {
    guard(|| {
        if vocab == 0 || n_rows == 0 {
            return Err(invalid("n_rows and vocab must be positive"));
        }
        let l = slice_in(logits, n_rows * vocab, "logits")?;
        let w = slice_in(weights, n_rows, "weights")?;
        if token_out.is_null() {
            return Err(null("token_out"));
        }
        let rows: Vec<&[f64]> = l.chunks(vocab).collect();
        *token_out = ensemble_next_token(&rows, w).map_err(core)?;
        Ok(())
    })
}

/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn elrea_projector_new(
    seed: u64,
    source_dim: usize,
    d_proj: usize,
    out: *mut *mut ElreaProjector,
) -> ElreaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let spec = ProjectionSpec::new(seed, d_proj, source_dim).map_err(core)?;
        *out = Box::into_raw(Box::new(ElreaProjector { spec }));
        Ok(())
    })
}

/// Projects `n_rows` rows of `source_dim` values; writes `n_rows * d_proj`.
///
/// # Safety
/// `p` comes from `elrea_projector_new`; buffers have the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn elrea_projector_project(
    p: *const ElreaProjector,
    rows: *const f64,
    n_rows: usize,
    out: *mut f64,
) -> ElreaStatus {
    guard(|| {
        let p = p.as_ref().ok_or_else(|| null("projector"))?;
        let x = slice_in(rows, n_rows * p.spec.source_dim, "rows")?;
        if out.is_null() && n_rows > 0 {
            return Err(null("out"));
        }
        let y = project_rows(x, n_rows, &p.spec).map_err(core)?;
        ptr::copy_nonoverlapping(y.as_ptr(), out, y.len());
        Ok(())
    })
}

/// # Safety
/// `p` is null or came from `elrea_projector_new` and is not used again.
#[no_mangle]
pub unsafe extern "C" fn elrea_projector_free(p: *mut ElreaProjector) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Opens a finished run. `config_path` may be null for the default
/// configuration; `run_dir`, when not null, replaces the configured one.
///
/// # Safety
/// String arguments are null or NUL-terminated; `out` is a valid slot.
#[no_mangle]
pub unsafe extern "C" fn elrea_model_open(
    config_path: *const c_char,
    run_dir: *const c_char,
    out: *mut *mut ElreaModel,
) -> ElreaStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let mut config = if config_path.is_null() {
            PipelineConfig::default()
        } else {
            PipelineConfig::load(&PathBuf::from(str_in(config_path, "config_path")?))
                .map_err(core)?
        };
        if !run_dir.is_null() {
            config.run_dir = PathBuf::from(str_in(run_dir, "run_dir")?);
        }
        let inner = Deployment::open(&Run::new(config)).map_err(core)?;
        *out = Box::into_raw(Box::new(ElreaModel { inner }));
        Ok(())
    })
}

/// Number of experts C; routing outputs hold this many cluster weights.
///
/// # Safety
/// `m` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn elrea_model_n_experts(m: *const ElreaModel) -> usize {
    m.as_ref().map_or(0, |m| m.inner.n_experts())
}

/// # Safety
/// `m` is a live handle, `instruction` is NUL-terminated, `weights_out`
/// has room for `elrea_model_n_experts(m)` values.
#[no_mangle]
pub unsafe extern "C" fn elrea_model_route(
    m: *const ElreaModel,
    instruction: *const c_char,
    weights_out: *mut f64,
    base_out: *mut f64,
) -> ElreaStatus {
    guard(|| {
        let m = m.as_ref().ok_or_else(|| null("model"))?;
        let text = str_in(instruction, "instruction")?;
        if (weights_out.is_null() && m.inner.n_experts() > 0) || base_out.is_null() {
            return Err(null("output"));
        }
        let (w, _) = m.inner.route(text).map_err(core)?;
        write_weights(&w, weights_out, base_out);
        Ok(())
    })
}

/// Routes and decodes `instruction`. `top_k` of 0 keeps every expert.
/// The generated text is returned in `text_out` and must be released with
/// `elrea_string_free`.
///
/// # Safety
/// `m` is a live handle, `instruction` is NUL-terminated, `text_out` is a
/// valid slot.
#[no_mangle]
pub unsafe extern "C" fn elrea_model_generate(
    m: *const ElreaModel,
    instruction: *const c_char,
    top_k: usize,
    text_out: *mut *mut c_char,
) -> ElreaStatus {
    guard(|| {
        let m = m.as_ref().ok_or_else(|| null("model"))?;
        let text = str_in(instruction, "instruction")?;
        if text_out.is_null() {
            return Err(null("text_out"));
        }
        let a = m
            .inner
            .answer(text, (top_k > 0).then_some(top_k))
            .map_err(core)?;
        let c = CString::new(a.generation).map_err(|_| invalid("generation contains NUL"))?;
        *text_out = c.into_raw();
        Ok(())
    })
}

/// # Safety
/// `m` is null or a live handle that is not used again.
#[no_mangle]
pub unsafe extern "C" fn elrea_model_free(m: *mut ElreaModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// # Safety
/// `s` is null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn elrea_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
