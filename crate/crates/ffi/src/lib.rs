//! C interface to the pose regressor, rotation metric and cost model.
//!
//! Every fallible call returns a [`PaStatus`]. On failure a description is
//! kept per thread and can be read with [`pa_last_error_message`].
//! Handles returned by `*_load` must be released with the matching
//! `*_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use poseadapt::cli::{Category, CliError};
use poseadapt::dataset_io::{CropMode, RgbImage};
use poseadapt::evaluator::{rotation_angle_deg, CheckpointModel, PoseEstimator};

/// Result codes. Values 3 to 5 match the command-line exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Config = 4,
    Numeric = 5,
    Panic = 6,
}

/// Loaded checkpoint ready for single-image inference.
pub struct PaModel {
    inner: CheckpointModel,
}

/// Camera-to-world pose: translation in metres and a unit quaternion
/// `(w, x, y, z)` with `w >= 0`.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PaPose {
    pub t: [f64; 3],
    pub q: [f64; 4],
}

/// Whole-network costs for a batch of one.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PaCostSummary {
    pub flops: u64,
    pub params: u64,
    pub activations: u64,
    pub bytes: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn fail(status: PaStatus, msg: impl Into<String>) -> PaStatus {
    set_error(msg);
    status
}

fn from_cli(e: CliError) -> PaStatus {
    let status = match e.category() {
        Category::Io => PaStatus::Io,
        Category::Numeric => PaStatus::Numeric,
        Category::Config => PaStatus::Config,
        Category::Usage => PaStatus::InvalidArgument,
    };
    fail(status, e.to_string())
}

fn guard(f: impl FnOnce() -> PaStatus) -> PaStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => {
            if s == PaStatus::Ok {
                set_error("");
            }
            s
        }
        Err(_) => fail(PaStatus::Panic, "internal panic"),
    }
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, PaStatus> {
    if p.is_null() {
        return Err(fail(PaStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(PaStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pa_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Length in bytes of the last error message on this thread, without the
/// terminating NUL.
#[no_mangle]
pub extern "C" fn pa_last_error_length() -> usize {
    LAST_ERROR.with(|e| e.borrow().len())
}

/// Copies the last error message into `buf` (truncated to `len - 1` bytes
/// and NUL-terminated). Returns the full message length.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn pa_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Loads a checkpoint file. On success `*out` receives a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pa_model_load(path: *const c_char, out: *mut *mut PaModel) -> PaStatus {
    guard(|| {
        if out.is_null() {
            return fail(PaStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        let path = match c_str(path, "path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        let ckpt = match poseadapt::model::Checkpoint::load(Path::new(path)) {
            Ok(c) => c,
            Err(poseadapt::model::ModelError::Io(e)) => return fail(PaStatus::Io, format!("{path}: {e}")),
            Err(e) => return from_cli(e.into()),
        };
        match CheckpointModel::new(&ckpt) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(PaModel { inner }));
                PaStatus::Ok
            }
            Err(e) => from_cli(e.into()),
        }
    })
}

/// Releases a handle from [`pa_model_load`]. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pa_model_free(model: *mut PaModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Network input extent and latent width of a loaded model.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn pa_model_info(model: *const PaModel, input_h: *mut usize, input_w: *mut usize, latent_dim: *mut usize) -> PaStatus {
    guard(|| {
        if model.is_null() || input_h.is_null() || input_w.is_null() || latent_dim.is_null() {
            return fail(PaStatus::NullPointer, "null argument");
        }
        let cfg = (*model).inner.net.config();
        *input_h = cfg.input_size[0];
        *input_w = cfg.input_size[1];
        *latent_dim = cfg.latent_dim;
        PaStatus::Ok
    })
}

/// Predicts the pose of one interleaved 8-bit RGB image of any size at
/// least as large as the model's crop. The image is resized and centre
/// cropped as during evaluation.
///
/// # Safety
/// `rgb` must point to `height * width * 3` bytes; `model` and `out` must
/// be valid.
#[no_mangle]
pub unsafe extern "C" fn pa_model_predict_rgb(model: *const PaModel, rgb: *const u8, height: usize, width: usize, out: *mut PaPose) -> PaStatus {
    guard(|| {
        if model.is_null() || rgb.is_null() || out.is_null() {
            return fail(PaStatus::NullPointer, "null argument");
        }
        if height == 0 || width == 0 {
            return fail(PaStatus::InvalidArgument, "empty image");
        }
        let m = &(*model).inner;
        let img = RgbImage {
            height,
            width,
            data: std::slice::from_raw_parts(rgb, height * width * 3).to_vec(),
        };
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let x = match m.preprocess().apply(&img, CropMode::Eval, &mut rng, "input") {
            Ok((x, _)) => x,
            Err(e) => return from_cli(e.into()),
        };
        match m.net.predict(&m.params, &x) {
            Ok(p) => {
                *out = PaPose { t: p[0].t, q: p[0].q };
                PaStatus::Ok
            }
            Err(e) => from_cli(e.into()),
        }
    })
}

/// Geodesic angle in degrees between two unit quaternions `(w, x, y, z)`.
///
/// # Safety
/// `q_pred` and `q_gt` must point to 4 doubles, `out` to one.
#[no_mangle]
pub unsafe extern "C" fn pa_rotation_angle_deg(q_pred: *const f64, q_gt: *const f64, out: *mut f64) -> PaStatus {
    guard(|| {
        if q_pred.is_null() || q_gt.is_null() || out.is_null() {
            return fail(PaStatus::NullPointer, "null argument");
        }
        let a: [f64; 4] = *q_pred.cast();
        let b: [f64; 4] = *q_gt.cast();
        match rotation_angle_deg(&a, &b) {
            Ok(v) => {
                *out = v;
                PaStatus::Ok
            }
            Err(e) => fail(PaStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Analytic costs of a built-in architecture: `mobilenetv3-large`,
/// `mobilenetv3-small` or `desk-small`.
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn pa_profile_named(name: *const c_char, out: *mut PaCostSummary) -> PaStatus {
    guard(|| {
        if out.is_null() {
            return fail(PaStatus::NullPointer, "out is null");
        }
        let name = match c_str(name, "name") {
            Ok(n) => n,
            Err(s) => return s,
        };
        match poseadapt::complexity_profiler::profile_named(name) {
            Ok(p) => {
                let t = p.total();
                *out = PaCostSummary {
                    flops: t.flops,
                    params: t.params,
                    activations: t.activations,
                    bytes: t.bytes,
                };
                PaStatus::Ok
            }
            Err(e) => fail(PaStatus::InvalidArgument, e.to_string()),
        }
    })
}
