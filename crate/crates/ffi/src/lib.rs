//! C ABI over `augicl-core`.
//!
//! Objects cross the boundary as opaque handles created by `*_sample`,
//! `*_build`, `*_load` or `*_from_json` and released with the matching
//! `*_free`. Every fallible call returns an [`AugiclStatus`]; on failure the
//! message is available from [`augicl_last_error`] on the same thread.
//! Matrices are caller-owned, column-major `double` buffers.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use nalgebra::DMatrix;

use augicl_core::attention::{build_em_transformer, cot_rollout, load_params, save_params, TransformerParams};
use augicl_core::em::{predict_labels, reference_rollout, EtaSchedule, RefMode};
use augicl_core::prompt::{encode_instance, MeanEstimates, TokenLayout};
use augicl_core::rng::{Domain, SeedTree};
use augicl_core::task::{generate_instance, TaskDims, TaskInstance};
use augicl_core::trainer::{cot_loss, cot_loss_grad, teacher_targets};
use augicl_core::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugiclStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    LayoutMismatch = 3,
    NumericalOverflow = 4,
    Format = 5,
    Io = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

/// Reference trajectory kind for [`augicl_reference_rollout`] and the loss calls.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AugiclRefMode {
    EmpiricalEm = 0,
    FixedTruth = 1,
}

/// Opaque task instance.
pub struct AugiclInstance {
    inner: TaskInstance,
}

/// Opaque transformer parameters.
pub struct AugiclTransformer {
    inner: TransformerParams,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

struct Failure(AugiclStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Parameter(_) | Error::Config(_) | Error::Index(_) | Error::Block(_) => AugiclStatus::InvalidArgument,
            Error::Layout(_) => AugiclStatus::LayoutMismatch,
            Error::NumericalOverflow { .. } | Error::Diverged { .. } => AugiclStatus::NumericalOverflow,
            Error::Format(_) | Error::Json(_) | Error::Csv(_) => AugiclStatus::Format,
            Error::Io(_) => AugiclStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn fail(status: AugiclStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> AugiclStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            AugiclStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("panic inside augicl");
            AugiclStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| fail(AugiclStatus::NullPointer, format!("{what} is null")))
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(AugiclStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(AugiclStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn read_matrix(p: *const f64, rows: usize, cols: usize, what: &str) -> Result<DMatrix<f64>, Failure> {
    if p.is_null() {
        return Err(fail(AugiclStatus::NullPointer, format!("{what} is null")));
    }
    Ok(DMatrix::from_column_slice(rows, cols, std::slice::from_raw_parts(p, rows * cols)))
}

unsafe fn write_out<'a, T>(p: *mut T, len: usize, need: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if p.is_null() {
        return Err(fail(AugiclStatus::NullPointer, format!("{what} is null")));
    }
    if len < need {
        return Err(fail(
            AugiclStatus::BufferTooSmall,
            format!("{what} holds {len} values, {need} needed"),
        ));
    }
    Ok(std::slice::from_raw_parts_mut(p, need))
}

unsafe fn store<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(fail(AugiclStatus::NullPointer, "output handle pointer is null"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

fn schedule(alpha: f64, t_prime: f64) -> Result<EtaSchedule, Failure> {
    Ok(EtaSchedule::new(alpha, t_prime)?)
}

fn ref_mode(mode: AugiclRefMode) -> RefMode {
    match mode {
        AugiclRefMode::EmpiricalEm => RefMode::EmpiricalEm,
        AugiclRefMode::FixedTruth => RefMode::FixedTruth,
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn augicl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, empty after a success.
/// Valid until the next augicl call on the same thread.
#[no_mangle]
pub extern "C" fn augicl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Draw an instance from the `(seed)` instance stream.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn augicl_instance_sample(
    dim: usize,
    classes: usize,
    n_labeled: usize,
    n_unlabeled: usize,
    sigma2: f64,
    seed: u64,
    out: *mut *mut AugiclInstance,
) -> AugiclStatus {
    guard(|| {
        let dims = TaskDims {
            dim,
            classes,
            n_labeled,
            n_unlabeled,
            sigma2,
        };
        let inner = generate_instance(&SeedTree::new(seed), Domain::Instance, &[0], &dims)?;
        store(out, AugiclInstance { inner })
    })
}

/// Parse an instance from its JSON form.
///
/// # Safety
/// `json` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn augicl_instance_from_json(json: *const c_char, out: *mut *mut AugiclInstance) -> AugiclStatus {
    guard(|| {
        let inner = TaskInstance::from_json(read_str(json, "json")?)?;
        store(out, AugiclInstance { inner })
    })
}

/// Serialize an instance. Release the string with [`augicl_string_free`].
///
/// # Safety
/// `inst` must come from this library; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn augicl_instance_to_json(inst: *const AugiclInstance, out: *mut *mut c_char) -> AugiclStatus {
    guard(|| {
        let text = deref(inst, "instance")?.inner.to_json()?;
        if out.is_null() {
            return Err(fail(AugiclStatus::NullPointer, "output string pointer is null"));
        }
        *out = CString::new(text).map_err(|e| fail(AugiclStatus::Format, e.to_string()))?.into_raw();
        Ok(())
    })
}

/// Shape of an instance. Any output pointer may be null.
///
/// # Safety
/// `inst` must come from this library.
#[no_mangle]
pub unsafe extern "C" fn augicl_instance_dims(
    inst: *const AugiclInstance,
    dim: *mut usize,
    classes: *mut usize,
    n_labeled: *mut usize,
    n_unlabeled: *mut usize,
) -> AugiclStatus {
    guard(|| {
        let i = &deref(inst, "instance")?.inner;
        for (p, v) in [
            (dim, i.dim()),
            (classes, i.classes()),
            (n_labeled, i.n_labeled()),
            (n_unlabeled, i.n_unlabeled()),
        ] {
            if let Some(p) = p.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Copy the true class means (`d x C`, column-major) into `buf`.
///
/// # Safety
/// `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn augicl_instance_true_means(inst: *const AugiclInstance, buf: *mut f64, len: usize) -> AugiclStatus {
    guard(|| {
        let m = deref(inst, "instance")?.inner.means.as_matrix();
        write_out(buf, len, m.len(), "means buffer")?.copy_from_slice(m.as_slice());
        Ok(())
    })
}

/// # Safety
/// `inst` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn augicl_instance_free(inst: *mut AugiclInstance) {
    if !inst.is_null() {
        drop(Box::from_raw(inst));
    }
}

/// # Safety
/// `s` must come from this library. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn augicl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Build the EM transformer for prompts with `n_labeled` labeled and
/// `n_unlabeled` unlabeled samples. `w` is `d x d`, column-major.
///
/// # Safety
/// `w` must hold `dim * dim` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn augicl_transformer_build(
    dim: usize,
    classes: usize,
    w: *const f64,
    beta: f64,
    alpha: f64,
    t_prime: f64,
    n_labeled: usize,
    n_unlabeled: usize,
    out: *mut *mut AugiclTransformer,
) -> AugiclStatus {
    guard(|| {
        let layout = TokenLayout::new(dim, classes)?;
        let w = read_matrix(w, dim, dim, "w")?;
        let inner = build_em_transformer(&layout, &w, beta, &schedule(alpha, t_prime)?, n_labeled, n_unlabeled)?;
        store(out, AugiclTransformer { inner })
    })
}

/// Load parameters saved by `augicl train`/`sweep` or [`augicl_transformer_save`].
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn augicl_transformer_load(path: *const c_char, out: *mut *mut AugiclTransformer) -> AugiclStatus {
    guard(|| {
        let inner = load_params(Path::new(read_str(path, "path")?))?;
        store(out, AugiclTransformer { inner })
    })
}

/// # Safety
/// `t` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn augicl_transformer_save(t: *const AugiclTransformer, path: *const c_char) -> AugiclStatus {
    guard(|| Ok(save_params(&deref(t, "transformer")?.inner, Path::new(read_str(path, "path")?))?))
}

/// # Safety
/// `t` must come from this library and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn augicl_transformer_free(t: *mut AugiclTransformer) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

fn copy_steps(steps: &[MeanEstimates], buf: &mut [f64]) {
    let mut off = 0;
    for s in steps {
        let m = s.as_matrix().as_slice();
        buf[off..off + m.len()].copy_from_slice(m);
        off += m.len();
    }
}

/// Run `t_steps` CoT steps and write the `t_steps + 1` mean estimates
/// (`d x C` each, column-major, step 0 first) into `buf`.
///
/// # Safety
/// Handles must come from this library; `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn augicl_cot_rollout(
    t: *const AugiclTransformer,
    inst: *const AugiclInstance,
    t_steps: usize,
    buf: *mut f64,
    len: usize,
) -> AugiclStatus {
    guard(|| {
        let params = &deref(t, "transformer")?.inner;
        let inst = &deref(inst, "instance")?.inner;
        let state = encode_instance(inst, &params.layout)?;
        let (traj, _) = cot_rollout(params, &state, t_steps)?;
        let need = traj.steps.len() * inst.dim() * inst.classes();
        copy_steps(&traj.steps, write_out(buf, len, need, "trajectory buffer")?);
        Ok(())
    })
}

/// Reference EM trajectory in the same layout as [`augicl_cot_rollout`].
///
/// # Safety
/// `inst` must come from this library; `buf` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn augicl_reference_rollout(
    inst: *const AugiclInstance,
    t_steps: usize,
    alpha: f64,
    t_prime: f64,
    mode: AugiclRefMode,
    buf: *mut f64,
    len: usize,
) -> AugiclStatus {
    guard(|| {
        let inst = &deref(inst, "instance")?.inner;
        let traj = reference_rollout(inst, t_steps, &schedule(alpha, t_prime)?, ref_mode(mode))?;
        let need = traj.steps.len() * inst.dim() * inst.classes();
        copy_steps(&traj.steps, write_out(buf, len, need, "trajectory buffer")?);
        Ok(())
    })
}

/// Nearest-mean labels of the unlabeled samples given `d x C` estimates.
///
/// # Safety
/// `means` must hold `d * C` doubles; `labels` must hold `len` entries.
#[no_mangle]
pub unsafe extern "C" fn augicl_predict_labels(
    inst: *const AugiclInstance,
    means: *const f64,
    labels: *mut usize,
    len: usize,
) -> AugiclStatus {
    guard(|| {
        let inst = &deref(inst, "instance")?.inner;
        let m = MeanEstimates::new(read_matrix(means, inst.dim(), inst.classes(), "means")?);
        let pred = predict_labels(&inst.unlabeled_x, &m);
        let out = write_out(labels, len, pred.len(), "label buffer")?;
        for (o, p) in out.iter_mut().zip(pred) {
            *o = p.class;
        }
        Ok(())
    })
}

/// Teacher-forced CoT loss of `w` against a `t_steps` reference trajectory.
///
/// # Safety
/// `w` must hold `d * d` doubles; `loss` must be writable.
#[no_mangle]
pub unsafe extern "C" fn augicl_cot_loss(
    inst: *const AugiclInstance,
    w: *const f64,
    t_steps: usize,
    alpha: f64,
    t_prime: f64,
    mode: AugiclRefMode,
    loss: *mut f64,
) -> AugiclStatus {
    guard(|| {
        let inst = &deref(inst, "instance")?.inner;
        let w = read_matrix(w, inst.dim(), inst.dim(), "w")?;
        let reference = reference_rollout(inst, t_steps, &schedule(alpha, t_prime)?, ref_mode(mode))?;
        let value = cot_loss(&w, inst, &reference, &teacher_targets(inst, &reference))?;
        *write_out(loss, 1, 1, "loss")?.first_mut().expect("one slot") = value;
        Ok(())
    })
}

/// Gradient of [`augicl_cot_loss`] with respect to `w` (`d x d`, column-major).
///
/// # Safety
/// `w` must hold `d * d` doubles; `grad` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn augicl_cot_loss_grad(
    inst: *const AugiclInstance,
    w: *const f64,
    t_steps: usize,
    alpha: f64,
    t_prime: f64,
    mode: AugiclRefMode,
    grad: *mut f64,
    len: usize,
) -> AugiclStatus {
    guard(|| {
        let inst = &deref(inst, "instance")?.inner;
        let w = read_matrix(w, inst.dim(), inst.dim(), "w")?;
        let reference = reference_rollout(inst, t_steps, &schedule(alpha, t_prime)?, ref_mode(mode))?;
        let g = cot_loss_grad(&w, inst, &reference, &teacher_targets(inst, &reference))?;
        write_out(grad, len, g.len(), "gradient buffer")?.copy_from_slice(g.as_slice());
        Ok(())
    })
}
