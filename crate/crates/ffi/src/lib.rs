//! C ABI over `meme-core`.
//!
//! Every fallible function returns a [`MemeStatus`]; on failure the message
//! is available from [`meme_last_error_message`] on the same thread until the
//! next failing call. Handles are opaque and released with their `_free`
//! function. Tensors cross the boundary as contiguous row-major `float`
//! buffers in NCHW order.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::ptr;

use meme_core::cli::RunConfig;
use meme_core::experts::{MultiExpertConfig, Paging, SampleOptions, SamplerKind};
use meme_core::iunet::Denoiser;
use meme_core::numerics::Tensor;
use meme_core::pipeline::{load_denoiser, sample_run};
use meme_core::schedule::DiffusionSchedule;
use meme_core::spectral::{fft2_log_amplitude, half_diagonal_profile};
use meme_core::Error;

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MemeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    OutOfRange = 4,
    Format = 5,
    Config = 6,
    MissingExpert = 7,
    Numerical = 8,
    Io = 9,
    Panic = 10,
}

/// Sampler selector for [`MemeSampleParams`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MemeSampler {
    Ddpm = 0,
    Ddim = 1,
}

/// Generation settings for [`meme_run_sample`].
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct MemeSampleParams {
    pub sampler: MemeSampler,
    /// Network evaluations; DDPM requires the schedule length.
    pub steps: usize,
    pub eta: f64,
    pub count: usize,
    pub seed: u64,
    /// Experts held in memory at once; 0 or at least the expert count keeps
    /// all of them resident.
    pub resident_experts: usize,
}

/// A noise schedule.
pub struct MemeSchedule(DiffusionSchedule);

/// One trained expert network.
pub struct MemeDenoiser(Denoiser);

/// A trained run directory with its configuration.
pub struct MemeRun {
    dir: PathBuf,
    config: MultiExpertConfig,
    image_shape: Vec<usize>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> MemeStatus {
    match e {
        Error::Shape { .. } => MemeStatus::Shape,
        Error::OutOfRange { .. } => MemeStatus::OutOfRange,
        Error::Format { .. } | Error::Json(_) => MemeStatus::Format,
        Error::Config(_) => MemeStatus::Config,
        Error::MissingExpert { .. } => MemeStatus::MissingExpert,
        Error::NonFinite { .. } | Error::NumericalAbort { .. } => MemeStatus::Numerical,
        Error::Io { .. } => MemeStatus::Io,
        _ => MemeStatus::InvalidArgument,
    }
}

struct Fail(MemeStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(MemeStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(MemeStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MemeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MemeStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            MemeStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn handle<'a, T>(h: *const T, what: &str) -> Result<&'a T, Fail> {
    h.as_ref().ok_or_else(|| null(what))
}

unsafe fn out_slice<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn in_slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn put<T>(out: *mut T, value: T, what: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(value);
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn meme_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn meme_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Forgets the last error message.
#[no_mangle]
pub extern "C" fn meme_clear_last_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

/// Linear β schedule from `beta_start` to `beta_end` over `steps` steps.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn meme_schedule_linear(
    steps: usize,
    beta_start: f64,
    beta_end: f64,
    out: *mut *mut MemeSchedule,
) -> MemeStatus {
    guard(|| {
        let s = DiffusionSchedule::linear(steps, beta_start, beta_end)?;
        put(out, Box::into_raw(Box::new(MemeSchedule(s))), "out")
    })
}

/// # Safety
/// `schedule` must come from [`meme_schedule_linear`] or be NULL.
#[no_mangle]
pub unsafe extern "C" fn meme_schedule_free(schedule: *mut MemeSchedule) {
    if !schedule.is_null() {
        drop(Box::from_raw(schedule));
    }
}

/// Number of diffusion steps; 0 for a NULL handle.
///
/// # Safety
/// `schedule` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn meme_schedule_steps(schedule: *const MemeSchedule) -> usize {
    schedule.as_ref().map_or(0, |s| s.0.steps())
}

/// ᾱ_t.
///
/// # Safety
/// `schedule` must be a live handle; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn meme_schedule_alpha_bar(schedule: *const MemeSchedule, t: usize, out: *mut f64) -> MemeStatus {
    guard(|| {
        let s = &handle(schedule, "schedule")?.0;
        s.check_t(t)?;
        put(out, s.alpha_bar()[t], "out")
    })
}

/// Loads a checkpoint directory.
///
/// # Safety
/// `dir` must be a NUL-terminated path; `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn meme_denoiser_load(dir: *const c_char, out: *mut *mut MemeDenoiser) -> MemeStatus {
    guard(|| {
        let (model, _) = load_denoiser(&path_arg(dir, "dir")?)?;
        put(out, Box::into_raw(Box::new(MemeDenoiser(model))), "out")
    })
}

/// # Safety
/// `model` must come from [`meme_denoiser_load`] or be NULL.
#[no_mangle]
pub unsafe extern "C" fn meme_denoiser_free(model: *mut MemeDenoiser) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Total trainable scalars; 0 for a NULL handle.
///
/// # Safety
/// `model` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn meme_denoiser_num_parameters(model: *const MemeDenoiser) -> usize {
    model.as_ref().map_or(0, |m| m.0.num_parameters())
}

/// ε prediction for a batch `x_t` of shape `[n, c, h, w]` at per-item
/// time-steps `ts[0..n]`; writes `n·c·h·w` floats to `out`.
///
/// # Safety
/// `x_t` and `out` must hold `n·c·h·w` floats and `ts` must hold `n` entries.
#[no_mangle]
pub unsafe extern "C" fn meme_denoiser_predict_eps(
    model: *const MemeDenoiser,
    x_t: *const f32,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    ts: *const usize,
    out: *mut f32,
) -> MemeStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        let len = n * c * h * w;
        let x = Tensor::new(&[n, c, h, w], in_slice(x_t, len, "x_t")?.to_vec())?;
        let ts = in_slice(ts, n, "ts")?;
        let eps = m.denoise_batch(&x, ts)?;
        out_slice(out, len, "out")?.copy_from_slice(eps.data());
        Ok(())
    })
}

/// Opens a run directory written by `meme train`. `config` may be NULL to use
/// the copy stored in the run directory.
///
/// # Safety
/// `run_dir` (and `config` when not NULL) must be NUL-terminated paths; `out`
/// a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn meme_run_open(
    run_dir: *const c_char,
    config: *const c_char,
    out: *mut *mut MemeRun,
) -> MemeStatus {
    guard(|| {
        let dir = path_arg(run_dir, "run_dir")?;
        let cfg_path = if config.is_null() {
            dir.join("config.json")
        } else {
            path_arg(config, "config")?
        };
        let cfg = RunConfig::load(&cfg_path)?;
        let run = MemeRun {
            config: cfg.multi_expert()?,
            image_shape: cfg.image_shape(),
            dir,
        };
        put(out, Box::into_raw(Box::new(run)), "out")
    })
}

/// # Safety
/// `run` must come from [`meme_run_open`] or be NULL.
#[no_mangle]
pub unsafe extern "C" fn meme_run_free(run: *mut MemeRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}

/// Number of experts; 0 for a NULL handle.
///
/// # Safety
/// `run` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn meme_run_num_experts(run: *const MemeRun) -> usize {
    run.as_ref().map_or(0, |r| r.config.num_experts())
}

/// Writes the `[C, H, W]` image shape to `out[0..3]`.
///
/// # Safety
/// `run` must be a live handle; `out` must hold 3 entries.
#[no_mangle]
pub unsafe extern "C" fn meme_run_image_shape(run: *const MemeRun, out: *mut usize) -> MemeStatus {
    guard(|| {
        let r = handle(run, "run")?;
        out_slice(out, 3, "out")?.copy_from_slice(&r.image_shape);
        Ok(())
    })
}

/// Generates `params.count` images into `out`, which must hold
/// `out_len = count·C·H·W` floats.
///
/// # Safety
/// `run` must be a live handle, `params` a valid pointer and `out` must hold
/// `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn meme_run_sample(
    run: *const MemeRun,
    params: *const MemeSampleParams,
    out: *mut f32,
    out_len: usize,
) -> MemeStatus {
    guard(|| {
        let r = handle(run, "run")?;
        let p = *handle(params, "params")?;
        let need = p.count * r.image_shape.iter().product::<usize>();
        if out_len != need {
            return Err(invalid(format!("out_len is {out_len}, {need} floats required")));
        }
        let opts = SampleOptions {
            sampler: match p.sampler {
                MemeSampler::Ddpm => SamplerKind::Ddpm,
                MemeSampler::Ddim => SamplerKind::Ddim,
            },
            steps: p.steps,
            eta: p.eta,
            count: p.count,
            seed: p.seed,
            image_shape: r.image_shape.clone(),
            chunk: None,
        };
        let paging = if p.resident_experts == 0 || p.resident_experts >= r.config.num_experts() {
            Paging::Resident
        } else {
            Paging::Sequential {
                spool_dir: r.dir.join(format!(".spool-{}", std::process::id())),
            }
        };
        let result = sample_run(&r.dir, &r.config, &opts, &paging);
        if let Paging::Sequential { spool_dir } = &paging {
            let _ = std::fs::remove_dir_all(spool_dir);
        }
        out_slice(out, out_len, "out")?.copy_from_slice(result?.data());
        Ok(())
    })
}

/// Half-diagonal Δ log-amplitude profile of one square `h × h` plane with a
/// power-of-two side. Writes `h/2 + 1` entries to `freq` and `delta`.
///
/// # Safety
/// `plane` must hold `h·w` floats; `freq` and `delta` must hold `len` entries.
#[no_mangle]
pub unsafe extern "C" fn meme_spectral_profile(
    plane: *const f32,
    h: usize,
    w: usize,
    freq: *mut f64,
    delta: *mut f64,
    len: usize,
) -> MemeStatus {
    guard(|| {
        let x = Tensor::new(&[h, w], in_slice(plane, h * w, "plane")?.to_vec())?;
        let profile = half_diagonal_profile(&fft2_log_amplitude(&x)?)?;
        if len != profile.len() {
            return Err(invalid(format!("len is {len}, profile has {} points", profile.len())));
        }
        out_slice(freq, len, "freq")?.copy_from_slice(&profile.freq);
        out_slice(delta, len, "delta")?.copy_from_slice(&profile.delta_log_amp);
        Ok(())
    })
}

#[doc(hidden)]
pub fn header_path() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/include/meme.h"))
}
