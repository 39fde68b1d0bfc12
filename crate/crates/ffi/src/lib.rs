//! C ABI over the segmentation engine.
//!
//! Every fallible function returns a [`SegStatus`]; on failure the message is
//! kept per thread and read with [`seg_last_error_message`]. Models are opaque
//! [`SegModel`] handles released with [`seg_model_free`]. No function unwinds
//! across the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use segnet::data::{generate_phantom_cohort, rv1, window_ct, WindowSpec};
use segnet::layers::Mode;
use segnet::metrics::{metrics_from_counts, ConfusionCounts};
use segnet::tensor::{Graph, Tensor};
use segnet::trainer::Checkpoint;
use segnet::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Data = 4,
    Checkpoint = 5,
    Io = 6,
    Diverged = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// Confusion counts of a binary segmentation.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SegCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

/// Derived metrics; an undefined value is NaN.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SegMetrics {
    pub dice: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub ppv: f64,
}

/// Loaded checkpoint ready for eval-mode inference.
pub struct SegModel {
    checkpoint: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn status_of(e: &Error) -> SegStatus {
    match e {
        Error::ShapeMismatch { .. } | Error::InvalidShape { .. } | Error::InvalidAxis { .. } => {
            SegStatus::ShapeMismatch
        }
        Error::InvalidArgument(_) | Error::Graph(_) | Error::NonFinite { .. } => SegStatus::InvalidArgument,
        Error::Data(_) => SegStatus::Data,
        Error::Checkpoint(_) => SegStatus::Checkpoint,
        Error::Io { .. } | Error::Json { .. } => SegStatus::Io,
        Error::Diverged { .. } => SegStatus::Diverged,
    }
}

/// Run `f`, mapping errors and panics to a status and the last-error message.
fn guard(f: impl FnOnce() -> Result<(), SegStatus>) -> SegStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            SegStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("internal panic");
            SegStatus::Panic
        }
    }
}

fn fail(e: Error) -> SegStatus {
    set_error(e.to_string());
    status_of(&e)
}

fn null(what: &str) -> SegStatus {
    set_error(format!("{what} is null"));
    SegStatus::NullPointer
}

/// # Safety
/// `p` must be null or a NUL-terminated string.
unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, SegStatus> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = unsafe { CStr::from_ptr(p) }.to_str().map_err(|_| {
        set_error(format!("{what} is not UTF-8"));
        SegStatus::InvalidArgument
    })?;
    Ok(PathBuf::from(s))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn seg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copy the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length without the NUL; 0
/// when there is no error.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn seg_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else {
            if !buf.is_null() && len > 0 {
                unsafe { *buf = 0 };
            }
            return 0;
        };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            unsafe {
                ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), n);
                *buf.add(n) = 0;
            }
        }
        bytes.len()
    })
}

/// Load a checkpoint file; on success `*out` owns a new handle.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` valid for writing.
#[no_mangle]
pub unsafe extern "C" fn seg_model_load(path: *const c_char, out: *mut *mut SegModel) -> SegStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let path = unsafe { path_arg(path, "path") }?;
        let checkpoint = Checkpoint::load(&path).map_err(fail)?;
        unsafe { *out = Box::into_raw(Box::new(SegModel { checkpoint })) };
        Ok(())
    })
}

/// Release a handle from [`seg_model_load`]; null is ignored.
///
/// # Safety
/// `model` must be null or a live handle not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn seg_model_free(model: *mut SegModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Input channels the model expects (1 for CT or PET, 2 for PET/CT), or 0
/// for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn seg_model_in_channels(model: *const SegModel) -> usize {
    match unsafe { model.as_ref() } {
        Some(m) => m.checkpoint.config.unet.in_channels,
        None => 0,
    }
}

/// Spatial sizes passed to [`seg_model_predict`] must be multiples of this;
/// 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn seg_model_size_multiple(model: *const SegModel) -> usize {
    match unsafe { model.as_ref() } {
        Some(m) => m.checkpoint.config.unet.size_multiple(),
        None => 0,
    }
}

/// Eval-mode foreground probabilities for `n` preprocessed slices.
/// `input` is `(n, c, h, w)` row-major; `out` receives `(n, h, w)`.
///
/// # Safety
/// `model` must be a live handle, `input` valid for `n*c*h*w` floats and
/// `out` valid for `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn seg_model_predict(
    model: *mut SegModel,
    input: *const f32,
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    out: *mut f32,
    out_len: usize,
) -> SegStatus {
    guard(|| {
        let model = unsafe { model.as_mut() }.ok_or_else(|| null("model"))?;
        if input.is_null() {
            return Err(null("input"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let total = n
            .checked_mul(c)
            .and_then(|v| v.checked_mul(h))
            .and_then(|v| v.checked_mul(w))
            .filter(|&v| v > 0)
            .ok_or_else(|| fail(Error::InvalidArgument("empty or overflowing input shape".into())))?;
        if out_len < n * h * w {
            set_error(format!("output holds {out_len} floats, {} needed", n * h * w));
            return Err(SegStatus::BufferTooSmall);
        }
        let data = unsafe { std::slice::from_raw_parts(input, total) }.to_vec();
        let x = Tensor::new(vec![n, c, h, w], data).map_err(fail)?;
        let mut g = Graph::new();
        let xv = g.constant(x).map_err(fail)?;
        let p = model.checkpoint.model.forward(&mut g, xv, Mode::Eval).map_err(fail)?;
        let probs = g.value(p).map_err(fail)?.data();
        unsafe { ptr::copy_nonoverlapping(probs.as_ptr(), out, probs.len()) };
        Ok(())
    })
}

/// Window `n` HU values into `[0, 1]`.
///
/// # Safety
/// `hu` and `out` must be valid for `n` floats.
#[no_mangle]
pub unsafe extern "C" fn seg_window_ct(hu: *const f32, n: usize, center: f64, width: f64, out: *mut f32) -> SegStatus {
    guard(|| {
        if hu.is_null() || out.is_null() {
            return Err(null("buffer"));
        }
        let window = WindowSpec::new(center, width).map_err(fail)?;
        let values = window_ct(unsafe { std::slice::from_raw_parts(hu, n) }, window).map_err(fail)?;
        unsafe { ptr::copy_nonoverlapping(values.as_ptr(), out, n) };
        Ok(())
    })
}

/// Voxelwise confusion counts of two binary masks of length `n`.
///
/// # Safety
/// `pred` and `truth` must be valid for `n` bytes; `out` valid for writing.
#[no_mangle]
pub unsafe extern "C" fn seg_confusion(pred: *const u8, truth: *const u8, n: usize, out: *mut SegCounts) -> SegStatus {
    guard(|| {
        if pred.is_null() || truth.is_null() || out.is_null() {
            return Err(null("buffer"));
        }
        let (p, t) = unsafe { (std::slice::from_raw_parts(pred, n), std::slice::from_raw_parts(truth, n)) };
        let mut c = SegCounts::default();
        for (&a, &b) in p.iter().zip(t) {
            match (a, b) {
                (1, 1) => c.tp += 1,
                (1, 0) => c.fp += 1,
                (0, 1) => c.fn_ += 1,
                (0, 0) => c.tn += 1,
                _ => return Err(fail(Error::InvalidArgument("masks must be binary".into()))),
            }
        }
        unsafe { *out = c };
        Ok(())
    })
}

/// Dice, sensitivity, specificity and PPV of `counts`.
///
/// # Safety
/// `counts` must be readable and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn seg_metrics(counts: *const SegCounts, out: *mut SegMetrics) -> SegStatus {
    guard(|| {
        let c = unsafe { counts.as_ref() }.ok_or_else(|| null("counts"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let v = metrics_from_counts(&ConfusionCounts {
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
            tn: c.tn,
        });
        let nan = |x: Option<f64>| x.unwrap_or(f64::NAN);
        unsafe {
            *out = SegMetrics {
                dice: nan(v.dice),
                sensitivity: nan(v.sensitivity),
                specificity: nan(v.specificity),
                ppv: nan(v.ppv),
            }
        };
        Ok(())
    })
}

/// Write a synthetic cohort of `patients` volumes of `d x h x w` to `out_dir`.
///
/// # Safety
/// `out_dir` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn seg_phantom_write(
    out_dir: *const c_char,
    patients: usize,
    d: usize,
    h: usize,
    w: usize,
    seed: u64,
) -> SegStatus {
    guard(|| {
        let dir = unsafe { path_arg(out_dir, "out_dir") }?;
        let cohort = generate_phantom_cohort(patients, [d, h, w], seed).map_err(fail)?;
        rv1::write_cohort(&dir, &cohort).map_err(fail)
    })
}
