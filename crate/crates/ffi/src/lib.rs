//! C ABI over the `repulsor` crate.
//!
//! Every object crosses the boundary as an opaque pointer created by a
//! `*_new`/`*_load`/`*_parse` function and released by the matching
//! `*_free`. Fallible calls return an [`RplStatus`]; on failure
//! [`rpl_last_error`] describes what went wrong on the calling thread.
//! Panics never unwind into C and are reported as `RPL_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use repulsor::harness::{train, Checkpoint, RunConfig, TrainedModel, Trainer};
use repulsor::repulsor::{dispersive_loss_bank, dispersive_loss_inbatch, MemoryBank};
use repulsor::sampler::SamplerConfig;
use repulsor::{Error, Tape, Tensor};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RplStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Dimension = 3,
    Shape = 4,
    Domain = 5,
    Index = 6,
    Config = 7,
    Precondition = 8,
    Format = 9,
    Io = 10,
    BufferTooSmall = 11,
    Panic = 12,
}

/// Pass as `class_id` to cycle through all classes.
pub const RPL_CLASS_CYCLE: i64 = -1;
/// Pass as `class_id` for unconditional samples.
pub const RPL_CLASS_NULL: i64 = -2;

/// Parsed run configuration.
pub struct RplConfig(RunConfig);
/// A training run in progress.
pub struct RplTrainer(Trainer);
/// A trained model that can sample and be saved.
pub struct RplModel(TrainedModel);
/// A FIFO memory bank of unit vectors.
pub struct RplBank(MemoryBank);

/// Mean losses of one training step.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RplStepStats {
    pub loss_diff: f64,
    pub loss_disp: f64,
    pub loss_total: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

enum Fail {
    Null(&'static str),
    Utf8(&'static str),
    Buffer { need: usize, have: usize },
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn record(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|s| *s.borrow_mut() = c);
}

fn status_of(e: &Error) -> RplStatus {
    match e {
        Error::Dimension { .. } => RplStatus::Dimension,
        Error::Shape(_) => RplStatus::Shape,
        Error::Domain(_) => RplStatus::Domain,
        Error::Index(_) => RplStatus::Index,
        Error::Config(_) => RplStatus::Config,
        Error::Precondition(_) => RplStatus::Precondition,
        Error::Format(_) => RplStatus::Format,
        Error::Io(_) => RplStatus::Io,
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> RplStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            record(String::new());
            RplStatus::Ok
        }
        Ok(Err(Fail::Null(what))) => {
            record(format!("null pointer passed as {what}"));
            RplStatus::NullPointer
        }
        Ok(Err(Fail::Utf8(what))) => {
            record(format!("{what} is not valid UTF-8"));
            RplStatus::InvalidUtf8
        }
        Ok(Err(Fail::Buffer { need, have })) => {
            record(format!("output buffer holds {have} values, {need} needed"));
            RplStatus::BufferTooSmall
        }
        Ok(Err(Fail::Lib(e))) => {
            record(e.to_string());
            status_of(&e)
        }
        Err(_) => {
            record("internal panic".into());
            RplStatus::Panic
        }
    }
}

unsafe fn cstr_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail::Utf8(what))
}

unsafe fn obj<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn obj_mut<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

unsafe fn put<T>(out: *mut *mut T, v: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::Null("out"));
    }
    *out = Box::into_raw(Box::new(v));
    Ok(())
}

unsafe fn matrix(p: *const f64, rows: usize, cols: usize) -> Result<Tensor, Fail> {
    if p.is_null() {
        return Err(Fail::Null("z"));
    }
    let n = rows.checked_mul(cols).ok_or(Error::Config("matrix size overflows".into()))?;
    Ok(Tensor::matrix(rows, cols, std::slice::from_raw_parts(p, n).to_vec())?)
}

unsafe fn drop_box<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn rpl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the most recent failure on this thread; empty after a success.
///
/// The pointer stays valid until the next call into this library on the
/// same thread.
#[no_mangle]
pub extern "C" fn rpl_last_error() -> *const c_char {
    LAST_ERROR.with(|s| s.borrow().as_ptr())
}

/// Parse configuration text in `section.key = value` form.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn rpl_config_parse(text: *const c_char, out: *mut *mut RplConfig) -> RplStatus {
    guard(|| put(out, RplConfig(RunConfig::from_text(cstr_arg(text, "text")?)?)))
}

/// Read and parse a configuration file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn rpl_config_load(path: *const c_char, out: *mut *mut RplConfig) -> RplStatus {
    guard(|| put(out, RplConfig(RunConfig::load(Path::new(cstr_arg(path, "path")?))?)))
}

/// # Safety
/// `cfg` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rpl_config_free(cfg: *mut RplConfig) {
    drop_box(cfg)
}

/// Batch size of a configuration, or 0 for a null pointer.
///
/// # Safety
/// `cfg` must be null or a live configuration.
#[no_mangle]
pub unsafe extern "C" fn rpl_config_batch_size(cfg: *const RplConfig) -> usize {
    cfg.as_ref().map_or(0, |c| c.0.batch_size)
}

/// Train to completion, writing the metrics CSV and checkpoint to the given paths.
///
/// # Safety
/// `cfg` must be live; both paths must be NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn rpl_train(
    cfg: *const RplConfig,
    metrics_path: *const c_char,
    checkpoint_path: *const c_char,
) -> RplStatus {
    guard(|| {
        let cfg = obj(cfg, "cfg")?;
        let mp = cstr_arg(metrics_path, "metrics_path")?;
        let cp = cstr_arg(checkpoint_path, "checkpoint_path")?;
        let out = train(cfg.0.clone())?;
        out.log.save(Path::new(mp))?;
        out.checkpoint.save(Path::new(cp))?;
        Ok(())
    })
}

/// Start a training run; the configuration is copied.
///
/// # Safety
/// `cfg` must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rpl_trainer_new(cfg: *const RplConfig, out: *mut *mut RplTrainer) -> RplStatus {
    guard(|| put(out, RplTrainer(Trainer::new(obj(cfg, "cfg")?.0.clone())?)))
}

/// Run one optimization step; `stats` may be null.
///
/// # Safety
/// `trainer` must be live; `stats` null or writable.
#[no_mangle]
pub unsafe extern "C" fn rpl_trainer_step(trainer: *mut RplTrainer, stats: *mut RplStepStats) -> RplStatus {
    guard(|| {
        let s = obj_mut(trainer, "trainer")?.0.step()?;
        if let Some(o) = stats.as_mut() {
            *o = RplStepStats { loss_diff: s.loss_diff, loss_disp: s.loss_disp, loss_total: s.loss_total };
        }
        Ok(())
    })
}

/// Completed optimization steps, or 0 for a null pointer.
///
/// # Safety
/// `trainer` must be null or live.
#[no_mangle]
pub unsafe extern "C" fn rpl_trainer_steps_done(trainer: *const RplTrainer) -> u64 {
    trainer.as_ref().map_or(0, |t| t.0.steps_done() as u64)
}

/// Copy the current parameters into a new model.
///
/// # Safety
/// `trainer` must be live and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rpl_trainer_snapshot(trainer: *const RplTrainer, out: *mut *mut RplModel) -> RplStatus {
    guard(|| put(out, RplModel(obj(trainer, "trainer")?.0.snapshot())))
}

/// # Safety
/// `trainer` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rpl_trainer_free(trainer: *mut RplTrainer) {
    drop_box(trainer)
}

/// Load a model from a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn rpl_model_load(path: *const c_char, out: *mut *mut RplModel) -> RplStatus {
    guard(|| {
        let ck = Checkpoint::load(Path::new(cstr_arg(path, "path")?))?;
        put(out, RplModel(TrainedModel::from_checkpoint(&ck)?))
    })
}

/// Write a model as a checkpoint file.
///
/// # Safety
/// `model` must be live and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn rpl_model_save(model: *const RplModel, path: *const c_char) -> RplStatus {
    guard(|| Ok(obj(model, "model")?.0.to_checkpoint().save(Path::new(cstr_arg(path, "path")?))?))
}

/// Data dimension of a model, or 0 for a null pointer.
///
/// # Safety
/// `model` must be null or live.
#[no_mangle]
pub unsafe extern "C" fn rpl_model_data_dim(model: *const RplModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.data_dim())
}

/// Number of data classes, or 0 for a null pointer.
///
/// # Safety
/// `model` must be null or live.
#[no_mangle]
pub unsafe extern "C" fn rpl_model_n_classes(model: *const RplModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.n_classes())
}

/// Draw `n` samples into `out` as row-major `n × data_dim` values.
///
/// `class_id` is a class index, `RPL_CLASS_CYCLE` or `RPL_CLASS_NULL`.
///
/// # Safety
/// `model` must be live and `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn rpl_model_sample(
    model: *const RplModel,
    n: usize,
    class_id: i64,
    guidance_w: f64,
    steps: usize,
    seed: u64,
    out: *mut f64,
    out_len: usize,
) -> RplStatus {
    guard(|| {
        let m = &obj(model, "model")?.0;
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let need = n.saturating_mul(m.data_dim());
        if out_len < need {
            return Err(Fail::Buffer { need, have: out_len });
        }
        let k = m.n_classes();
        let classes: Vec<usize> = match class_id {
            RPL_CLASS_CYCLE => (0..n).map(|i| i % k).collect(),
            RPL_CLASS_NULL => vec![m.denoiser.null_class(); n],
            c if c >= 0 && (c as usize) < k => vec![c as usize; n],
            c => return Err(Error::Index(format!("class id {c} outside 0..{k}")).into()),
        };
        let x = m.generate(&SamplerConfig { steps, guidance_w }, &classes, seed)?;
        std::slice::from_raw_parts_mut(out, need).copy_from_slice(x.data());
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rpl_model_free(model: *mut RplModel) {
    drop_box(model)
}

/// Empty bank of `capacity` slots of dimension `dim`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rpl_bank_new(capacity: usize, dim: usize, out: *mut *mut RplBank) -> RplStatus {
    guard(|| put(out, RplBank(MemoryBank::new(capacity, dim)?)))
}

/// Enqueue `rows` unit vectors stored row-major in `z`.
///
/// # Safety
/// `bank` must be live and `z` must hold `rows × dim` doubles.
#[no_mangle]
pub unsafe extern "C" fn rpl_bank_enqueue(bank: *mut RplBank, z: *const f64, rows: usize) -> RplStatus {
    guard(|| {
        let b = &mut obj_mut(bank, "bank")?.0;
        let dim = b.dim();
        b.enqueue(&matrix(z, rows, dim)?)?;
        Ok(())
    })
}

/// Number of valid entries, or 0 for a null pointer.
///
/// # Safety
/// `bank` must be null or live.
#[no_mangle]
pub unsafe extern "C" fn rpl_bank_len(bank: *const RplBank) -> usize {
    bank.as_ref().map_or(0, |b| b.0.filled())
}

/// Copy valid entries, oldest first, into `out`.
///
/// # Safety
/// `bank` must be live and `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn rpl_bank_entries(bank: *const RplBank, out: *mut f64, out_len: usize) -> RplStatus {
    guard(|| {
        let b = &obj(bank, "bank")?.0;
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let need = b.filled() * b.dim();
        if out_len < need {
            return Err(Fail::Buffer { need, have: out_len });
        }
        let dst = std::slice::from_raw_parts_mut(out, need);
        for (chunk, row) in dst.chunks_exact_mut(b.dim()).zip(b.oldest_first()) {
            chunk.copy_from_slice(&row);
        }
        Ok(())
    })
}

/// # Safety
/// `bank` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rpl_bank_free(bank: *mut RplBank) {
    drop_box(bank)
}

unsafe fn loss_with_grad(
    z: *const f64,
    rows: usize,
    dim: usize,
    loss: *mut f64,
    grad: *mut f64,
    f: impl FnOnce(&mut Tape, repulsor::Var) -> repulsor::Result<repulsor::Var>,
) -> Result<(), Fail> {
    if loss.is_null() {
        return Err(Fail::Null("loss"));
    }
    let zt = matrix(z, rows, dim)?;
    let mut tape = Tape::new();
    let zv = tape.leaf(zt, !grad.is_null());
    let l = f(&mut tape, zv)?;
    *loss = tape.value(l).item()?;
    if !grad.is_null() {
        tape.backward(l)?;
        let g = tape.grad(zv).expect("requested gradient");
        std::slice::from_raw_parts_mut(grad, rows * dim).copy_from_slice(g.data());
    }
    Ok(())
}

/// Dispersive loss of `rows × bank_dim` points `z` against the bank entries.
/// When `grad` is non-null it receives the gradient with respect to `z`.
///
/// # Safety
/// `bank` must be live, `z` and `grad` (if non-null) must hold
/// `rows × bank_dim` doubles, `loss` must be writable.
#[no_mangle]
pub unsafe extern "C" fn rpl_dispersive_loss_bank(
    z: *const f64,
    rows: usize,
    bank: *const RplBank,
    tau: f64,
    loss: *mut f64,
    grad: *mut f64,
) -> RplStatus {
    guard(|| {
        let b = &obj(bank, "bank")?.0;
        loss_with_grad(z, rows, b.dim(), loss, grad, |tape, zv| {
            let m = b.leaf(tape, false)?;
            dispersive_loss_bank(tape, zv, m, tau)
        })
    })
}

/// In-batch dispersive loss over all ordered pairs of `rows × dim` points.
///
/// # Safety
/// `z` and `grad` (if non-null) must hold `rows × dim` doubles and `loss`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn rpl_dispersive_loss_inbatch(
    z: *const f64,
    rows: usize,
    dim: usize,
    tau: f64,
    loss: *mut f64,
    grad: *mut f64,
) -> RplStatus {
    guard(|| loss_with_grad(z, rows, dim, loss, grad, |tape, zv| dispersive_loss_inbatch(tape, zv, tau)))
}
