//! C ABI for vbrnn models.
//!
//! Every function returns a [`VbrnnStatus`]; on failure a message is kept per
//! thread and can be read with [`vbrnn_last_error`]. Models are opaque
//! [`VbrnnModel`] handles released with [`vbrnn_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use vbrnn::model::{ModelConfig, VisibleKind, VisibleTrajectory};
use vbrnn::numkit::{RngState, Vector};
use vbrnn::objectives::{self, McNoise, ObjectiveId};
use vbrnn::oracle::{self, EnumerationBudget, NoiseGrid};
use vbrnn::trainer::{self, Checkpoint, OptimizerKind, OptimizerState};
use vbrnn::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VbrnnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    Io = 4,
    Checkpoint = 5,
    Numeric = 6,
    BudgetExceeded = 7,
    Panic = 8,
}

/// Values accepted by the `objective` arguments.
#[repr(u32)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VbrnnObjective {
    Loglik = 0,
    StepParticle = 1,
    SequenceParticle = 2,
    NoisyElbo = 3,
}

/// Values accepted by the `visible_kind` argument of [`vbrnn_model_new`].
#[repr(u32)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VbrnnVisibleKind {
    Categorical = 0,
    Gaussian = 1,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct VbrnnGapReport {
    pub step_form: f64,
    pub sequence_form: f64,
    pub gap: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct VbrnnJensenReport {
    pub exact_loglik: f64,
    pub exact_elbo: f64,
    pub gap: f64,
}

/// Opaque model handle.
pub struct VbrnnModel {
    ckpt: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(err: &Error) -> VbrnnStatus {
    match err {
        Error::DimensionMismatch { .. } | Error::EmptyInput(_) => VbrnnStatus::DimensionMismatch,
        Error::NonFinite(_) | Error::NumericAbort { .. } => VbrnnStatus::Numeric,
        Error::BudgetExceeded { .. } => VbrnnStatus::BudgetExceeded,
        Error::Checkpoint(_) => VbrnnStatus::Checkpoint,
        Error::Io(_) => VbrnnStatus::Io,
        _ => VbrnnStatus::InvalidArgument,
    }
}

struct Failure(VbrnnStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(VbrnnStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(VbrnnStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> VbrnnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            VbrnnStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            VbrnnStatus::Panic
        }
    }
}

unsafe fn model_ref<'a>(m: *const VbrnnModel) -> Result<&'a VbrnnModel, Failure> {
    m.as_ref().ok_or_else(|| null("model"))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| invalid("path is not UTF-8"))?;
    Ok(PathBuf::from(s))
}

fn objective_of(code: u32) -> Result<ObjectiveId, Failure> {
    match code {
        0 => Ok(ObjectiveId::Loglik),
        1 => Ok(ObjectiveId::StepParticle),
        2 => Ok(ObjectiveId::SequenceParticle),
        3 => Ok(ObjectiveId::NoisyElbo),
        _ => Err(invalid(format!("unknown objective code {code}"))),
    }
}

unsafe fn tokens_arg(tokens: *const usize, len: usize) -> Result<VisibleTrajectory, Failure> {
    Ok(VisibleTrajectory::tokens(slice(tokens, len, "tokens")?.to_vec())?)
}

unsafe fn reals_arg(values: *const f64, t_len: usize, dim: usize) -> Result<VisibleTrajectory, Failure> {
    let n = t_len.checked_mul(dim).ok_or_else(|| invalid("t_len * dim overflows"))?;
    let v = slice(values, n, "values")?;
    let steps = v
        .chunks(dim.max(1))
        .map(|c| Vector::new(c.to_vec()))
        .collect::<vbrnn::Result<Vec<_>>>()?;
    Ok(VisibleTrajectory::reals(dim, steps)?)
}

fn noise_for(model: &VbrnnModel, objective: ObjectiveId, t_len: usize, seed: u64, n_mc: usize) -> Option<McNoise> {
    (objective == ObjectiveId::NoisyElbo).then(|| {
        McNoise::draw(&mut RngState::new(seed), n_mc.max(1), t_len, model.ckpt.model.hidden_dim())
    })
}

/// Message for the most recent failure on this thread; empty after a
/// success. The pointer is valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn vbrnn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Creates a model with seeded initial parameters. `sigma` is the shared
/// transition noise scale (0 for deterministic dynamics).
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn vbrnn_model_new(
    visible_kind: u32,
    width: usize,
    hidden_dim: usize,
    n_particles: usize,
    sigma: f64,
    seed: u64,
    out: *mut *mut VbrnnModel,
) -> VbrnnStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let visible = match visible_kind {
            0 => VisibleKind::Categorical { vocab: width },
            1 => VisibleKind::Gaussian { dim: width },
            k => return Err(invalid(format!("unknown visible kind {k}"))),
        };
        let cfg = ModelConfig::new(visible, hidden_dim, n_particles).with_sigma(sigma);
        let root = RngState::new(seed);
        let model = trainer::init_params(&cfg, &mut root.substream(0))?;
        let n = model.params.n_scalars();
        let ckpt = Checkpoint {
            model,
            optimizer: OptimizerState::new(OptimizerKind::Adam, n),
            rng: root.substream(1),
            epoch: 0,
            best_valid: f64::NEG_INFINITY,
            stale_evals: 0,
            seed,
        };
        *out = Box::into_raw(Box::new(VbrnnModel { ckpt }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vbrnn_model_free(model: *mut VbrnnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vbrnn_model_load(path: *const c_char, out: *mut *mut VbrnnModel) -> VbrnnStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ckpt = trainer::load_checkpoint(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(VbrnnModel { ckpt }));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn vbrnn_model_save(model: *const VbrnnModel, path: *const c_char) -> VbrnnStatus {
    guard(|| {
        let m = model_ref(model)?;
        trainer::save_checkpoint(&m.ckpt, &path_arg(path)?)?;
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vbrnn_model_n_params(model: *const VbrnnModel, out: *mut usize) -> VbrnnStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = m.ckpt.model.params.n_scalars();
        Ok(())
    })
}

/// Copies the flattened parameters into `buf`, which must hold exactly
/// `vbrnn_model_n_params` values.
///
/// # Safety
/// `buf` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn vbrnn_model_get_params(model: *const VbrnnModel, buf: *mut f64, len: usize) -> VbrnnStatus {
    guard(|| {
        let m = model_ref(model)?;
        let flat = m.ckpt.model.params.to_flat();
        if len != flat.len() {
            return Err(Failure(
                VbrnnStatus::DimensionMismatch,
                format!("buffer holds {len} values, model has {}", flat.len()),
            ));
        }
        if buf.is_null() {
            return Err(null("buf"));
        }
        ptr::copy_nonoverlapping(flat.as_ptr(), buf, len);
        Ok(())
    })
}

/// # Safety
/// `buf` must point to `len` readable doubles.
#[no_mangle]
pub unsafe extern "C" fn vbrnn_model_set_params(model: *mut VbrnnModel, buf: *const f64, len: usize) -> VbrnnStatus {
    guard(|| {
        let m = model.as_mut().ok_or_else(|| null("model"))?;
        let values = slice(buf, len, "buf")?;
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Failure(VbrnnStatus::Numeric, format!("non-finite value at index {i}")));
        }
        m.ckpt.model.params.set_flat(values)?;
        Ok(())
    })
}

/// Objective value for one token sequence. `seed` and `n_mc` select the
/// Monte-Carlo noise of the noisy bound and are ignored otherwise.
///
/// # Safety
/// `tokens` must point to `len` values; `out_value` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vbrnn_objective_tokens(
    model: *const VbrnnModel,
    objective: u32,
    tokens: *const usize,
    len: usize,
    seed: u64,
    n_mc: usize,
    out_value: *mut f64,
) -> VbrnnStatus {
    guard(|| {
        let m = model_ref(model)?;
        let x = tokens_arg(tokens, len)?;
        objective_value(m, objective, &x, seed, n_mc, out_value)
    })
}

/// Objective value for one real-valued sequence stored step-major
/// (`t_len` rows of `dim` values).
///
/// # Safety
/// `values` must point to `t_len * dim` values; `out_value` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vbrnn_objective_reals(
    model: *const VbrnnModel,
    objective: u32,
    values: *const f64,
    t_len: usize,
    dim: usize,
    seed: u64,
    n_mc: usize,
    out_value: *mut f64,
) -> VbrnnStatus {
    guard(|| {
        let m = model_ref(model)?;
        let x = reals_arg(values, t_len, dim)?;
        objective_value(m, objective, &x, seed, n_mc, out_value)
    })
}

unsafe fn objective_value(
    m: &VbrnnModel,
    objective: u32,
    x: &VisibleTrajectory,
    seed: u64,
    n_mc: usize,
    out_value: *mut f64,
) -> Result<(), Failure> {
    if out_value.is_null() {
        return Err(null("out_value"));
    }
    let obj = objective_of(objective)?;
    let noise = noise_for(m, obj, x.len(), seed, n_mc);
    *out_value = objectives::evaluate(obj, &m.ckpt.model, x, noise.as_ref())?.value;
    Ok(())
}

/// Step-form and sequence-form particle objectives and their difference.
///
/// # Safety
/// `tokens` must point to `len` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vbrnn_gap_report_tokens(
    model: *const VbrnnModel,
    tokens: *const usize,
    len: usize,
    out: *mut VbrnnGapReport,
) -> VbrnnStatus {
    guard(|| {
        let m = model_ref(model)?;
        let x = tokens_arg(tokens, len)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let g = objectives::objective_gap_report(&m.ckpt.model, &x)?;
        *out = VbrnnGapReport {
            step_form: g.step_form,
            sequence_form: g.sequence_form,
            gap: g.gap,
        };
        Ok(())
    })
}

/// Exact log-likelihood and bound by enumerating a `grid_size`-point noise
/// grid (1, 2 or 3) with the default path budget.
///
/// # Safety
/// `tokens` must point to `len` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn vbrnn_exact_jensen_tokens(
    model: *const VbrnnModel,
    tokens: *const usize,
    len: usize,
    grid_size: usize,
    out: *mut VbrnnJensenReport,
) -> VbrnnStatus {
    guard(|| {
        let m = model_ref(model)?;
        let x = tokens_arg(tokens, len)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let grid = NoiseGrid::with_size(grid_size)?;
        let r = oracle::jensen_gap_report(&m.ckpt.model, &x, &grid, &EnumerationBudget::default())?;
        *out = VbrnnJensenReport {
            exact_loglik: r.exact_loglik,
            exact_elbo: r.exact_elbo,
            gap: r.gap,
        };
        Ok(())
    })
}

/// Gradient of the objective with respect to the flattened parameters,
/// written to `grad` (`vbrnn_model_n_params` values). `out_value` may be
/// null.
///
/// # Safety
/// `tokens` must point to `len` values and `grad` to `grad_len` writable
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn vbrnn_gradient_tokens(
    model: *const VbrnnModel,
    objective: u32,
    tokens: *const usize,
    len: usize,
    seed: u64,
    n_mc: usize,
    grad: *mut f64,
    grad_len: usize,
    out_value: *mut f64,
) -> VbrnnStatus {
    guard(|| {
        let m = model_ref(model)?;
        let x = tokens_arg(tokens, len)?;
        let obj = objective_of(objective)?;
        let n = m.ckpt.model.params.n_scalars();
        if grad_len != n {
            return Err(Failure(
                VbrnnStatus::DimensionMismatch,
                format!("gradient buffer holds {grad_len} values, model has {n}"),
            ));
        }
        if grad.is_null() {
            return Err(null("grad"));
        }
        let noise = noise_for(m, obj, x.len(), seed, n_mc);
        let g = vbrnn::grad::backprop(obj, &m.ckpt.model, &x, noise.as_ref())?;
        let flat = g.grads.to_flat();
        ptr::copy_nonoverlapping(flat.as_ptr(), grad, n);
        if !out_value.is_null() {
            *out_value = g.value;
        }
        Ok(())
    })
}
