//! C interface to the bfpcnn classifier.
//!
//! Every function returns a [`BfpcnnStatus`]. On failure a message is kept
//! per thread and can be read with [`bfpcnn_last_error`]. Models live behind
//! an opaque [`BfpcnnModel`] handle released with [`bfpcnn_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use bfpcnn::cli::{prepare_image, spec_for_checkpoint, RunSpec, CLASS_NAMES};
use bfpcnn::model::{load_checkpoint, save_checkpoint, ModelGraph};
use bfpcnn::preprocess::{preprocess_pipeline, GrayImage};
use bfpcnn::train::{compute_metrics, ConfusionMatrix};
use bfpcnn::{Error, Tensor};

/// Outcome of a call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BfpcnnStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    Io = 3,
    BadCheckpoint = 4,
    ShapeMismatch = 5,
    BufferTooSmall = 6,
    Failed = 7,
    Panic = 8,
}

/// A built or loaded model.
pub struct BfpcnnModel {
    graph: ModelGraph,
}

/// Aggregate scores of a confusion matrix.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BfpcnnMetrics {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub micro_precision: f64,
    pub micro_recall: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(BfpcnnStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io(_) | Error::MissingClassDir(_) | Error::UnreadableImage { .. } => BfpcnnStatus::Io,
            Error::BadMagic(_) | Error::VersionMismatch(_) | Error::TruncatedFile | Error::ShapeConflict(_) => BfpcnnStatus::BadCheckpoint,
            Error::ShapeMismatch(_) | Error::ShapeUnderflow { .. } | Error::DimMismatch(_) | Error::LengthMismatch(..) => BfpcnnStatus::ShapeMismatch,
            Error::InvalidArgument(_) | Error::Config(_) | Error::EvenWindow(_) | Error::ZeroDim(_) | Error::EmptyMatrix => {
                BfpcnnStatus::InvalidArgument
            }
            _ => BfpcnnStatus::Failed,
        };
        Failure(status, e.to_string())
    }
}

fn fail<T>(status: BfpcnnStatus, msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure(status, msg.into()))
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nuls replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

/// Run `f`, record any failure and turn panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> BfpcnnStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BfpcnnStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
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
            BfpcnnStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return fail(BfpcnnStatus::NullArgument, format!("{what} is null"));
    }
    match CStr::from_ptr(p).to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => fail(BfpcnnStatus::InvalidArgument, format!("{what} is not UTF-8")),
    }
}

unsafe fn image_arg(pixels: *const u8, height: usize, width: usize) -> Result<GrayImage, Failure> {
    if pixels.is_null() {
        return fail(BfpcnnStatus::NullArgument, "pixels is null");
    }
    let n = height.checked_mul(width).ok_or_else(|| Failure(BfpcnnStatus::InvalidArgument, "image size overflows".into()))?;
    Ok(GrayImage::new(height, width, std::slice::from_raw_parts(pixels, n).to_vec())?)
}

fn store_model(out: *mut *mut BfpcnnModel, graph: ModelGraph) {
    unsafe { *out = Box::into_raw(Box::new(BfpcnnModel { graph })) };
}

fn model_ref<'a>(model: *const BfpcnnModel) -> Result<&'a BfpcnnModel, Failure> {
    if model.is_null() {
        return fail(BfpcnnStatus::NullArgument, "model is null");
    }
    Ok(unsafe { &*model })
}

/// Message of the last failed call on this thread, or null. The pointer stays
/// valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn bfpcnn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Name of class `index`, or null when out of range. Static storage.
#[no_mangle]
pub extern "C" fn bfpcnn_class_name(index: usize) -> *const c_char {
    const NAMES: [&CStr; 4] = [c"MildDemented", c"ModerateDemented", c"NonDemented", c"VeryMildDemented"];
    debug_assert!(NAMES.iter().zip(CLASS_NAMES).all(|(c, r)| c.to_bytes() == r.as_bytes()));
    NAMES.get(index).map_or(ptr::null(), |c| c.as_ptr())
}

/// Number of output classes.
#[no_mangle]
pub extern "C" fn bfpcnn_class_count() -> usize {
    CLASS_NAMES.len()
}

/// Build a freshly initialized model. `config` holds `key = value` lines and
/// may be null for the defaults.
///
/// # Safety
/// `config` is null or a nul-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn bfpcnn_model_new(config: *const c_char, out: *mut *mut BfpcnnModel) -> BfpcnnStatus {
    guard(|| {
        if out.is_null() {
            return fail(BfpcnnStatus::NullArgument, "out is null");
        }
        let mut spec = RunSpec::default();
        if !config.is_null() {
            let text = CStr::from_ptr(config).to_str().map_err(|_| Failure(BfpcnnStatus::InvalidArgument, "config is not UTF-8".into()))?;
            spec.apply_text(text)?;
        }
        spec.validate()?;
        store_model(out, ModelGraph::build(&spec.model)?);
        Ok(())
    })
}

/// Load a checkpoint. The architecture comes from `config_path` when given,
/// else from `config.txt` beside the checkpoint, else the defaults.
///
/// # Safety
/// `ckpt_path` is a nul-terminated string, `config_path` is null or one, and
/// `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn bfpcnn_model_load(ckpt_path: *const c_char, config_path: *const c_char, out: *mut *mut BfpcnnModel) -> BfpcnnStatus {
    guard(|| {
        if out.is_null() {
            return fail(BfpcnnStatus::NullArgument, "out is null");
        }
        let ckpt = path_arg(ckpt_path, "ckpt_path")?;
        let config = if config_path.is_null() { None } else { Some(path_arg(config_path, "config_path")?) };
        let spec = spec_for_checkpoint(&ckpt, config.as_deref())?;
        spec.validate()?;
        store_model(out, load_checkpoint(&ckpt, &spec.model)?);
        Ok(())
    })
}

/// Write the model's parameters to `path`.
///
/// # Safety
/// `model` comes from this library; `path` is a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn bfpcnn_model_save(model: *const BfpcnnModel, path: *const c_char) -> BfpcnnStatus {
    guard(|| {
        let model = model_ref(model)?;
        save_checkpoint(&model.graph, &path_arg(path, "path")?)?;
        Ok(())
    })
}

/// Release a model. Null is ignored.
///
/// # Safety
/// `model` is null or came from this library and is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn bfpcnn_model_free(model: *mut BfpcnnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Trainable parameter count, or 0 for a null model.
///
/// # Safety
/// `model` is null or came from this library.
#[no_mangle]
pub unsafe extern "C" fn bfpcnn_model_param_count(model: *const BfpcnnModel) -> usize {
    model.as_ref().map_or(0, |m| m.graph.param_count())
}

/// Side length of the square input the model expects, or 0 for a null model.
///
/// # Safety
/// `model` is null or came from this library.
#[no_mangle]
pub unsafe extern "C" fn bfpcnn_model_input_size(model: *const BfpcnnModel) -> usize {
    model.as_ref().map_or(0, |m| m.graph.config().input_size)
}

/// Class probabilities for one grayscale image of any size. The image is
/// resized to the model input and scaled to [0, 1]; `probs` receives
/// `bfpcnn_class_count()` values.
///
/// # Safety
/// `pixels` holds `height * width` bytes, row-major; `probs` holds
/// `probs_len` floats.
#[no_mangle]
pub unsafe extern "C" fn bfpcnn_model_predict(
    model: *const BfpcnnModel,
    pixels: *const u8,
    height: usize,
    width: usize,
    probs: *mut f32,
    probs_len: usize,
) -> BfpcnnStatus {
    guard(|| {
        let model = model_ref(model)?;
        let img = image_arg(pixels, height, width)?;
        if probs.is_null() {
            return fail(BfpcnnStatus::NullArgument, "probs is null");
        }
        let classes = model.graph.config().class_count;
        if probs_len < classes {
            return fail(BfpcnnStatus::BufferTooSmall, format!("probs holds {probs_len}, need {classes}"));
        }
        let size = model.graph.config().input_size;
        let input = Tensor::new(&[1, 1, size, size], prepare_image(&img, size)?)?;
        let p = model.graph.predict(&input)?;
        std::slice::from_raw_parts_mut(probs, classes).copy_from_slice(p.data());
        Ok(())
    })
}

/// Equalize, median-filter with an odd `window` and resize to
/// `target x target`. `out` receives `target * target` values in [0, 1].
///
/// # Safety
/// `pixels` holds `height * width` bytes; `out` holds `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn bfpcnn_preprocess(
    pixels: *const u8,
    height: usize,
    width: usize,
    target: usize,
    window: usize,
    out: *mut f32,
    out_len: usize,
) -> BfpcnnStatus {
    guard(|| {
        let img = image_arg(pixels, height, width)?;
        if out.is_null() {
            return fail(BfpcnnStatus::NullArgument, "out is null");
        }
        let need = target.saturating_mul(target);
        if out_len < need {
            return fail(BfpcnnStatus::BufferTooSmall, format!("out holds {out_len}, need {need}"));
        }
        let values = preprocess_pipeline(&img, target, window)?;
        std::slice::from_raw_parts_mut(out, need).copy_from_slice(values.values());
        Ok(())
    })
}

/// Scores of a `classes x classes` confusion matrix given row-major with rows
/// as true classes. Each of `precision`, `recall` and `f1` may be null or
/// hold `classes` doubles for the per-class values.
///
/// # Safety
/// `counts` holds `classes * classes` values; `out` is writable; the
/// per-class buffers are null or hold `classes` doubles.
#[no_mangle]
pub unsafe extern "C" fn bfpcnn_metrics(
    counts: *const u64,
    classes: usize,
    out: *mut BfpcnnMetrics,
    precision: *mut f64,
    recall: *mut f64,
    f1: *mut f64,
) -> BfpcnnStatus {
    guard(|| {
        if counts.is_null() || out.is_null() {
            return fail(BfpcnnStatus::NullArgument, "counts and out must not be null");
        }
        if classes == 0 {
            return fail(BfpcnnStatus::InvalidArgument, "classes must be positive");
        }
        let flat = std::slice::from_raw_parts(counts, classes * classes);
        let rows: Vec<Vec<u64>> = flat.chunks(classes).map(<[u64]>::to_vec).collect();
        let m = compute_metrics(&ConfusionMatrix::from_counts(&rows)?)?;
        *out = BfpcnnMetrics {
            accuracy: m.accuracy,
            macro_precision: m.macro_precision,
            macro_recall: m.macro_recall,
            macro_f1: m.macro_f1,
            micro_precision: m.micro_precision,
            micro_recall: m.micro_recall,
        };
        for (dst, src) in [(precision, &m.precision), (recall, &m.recall), (f1, &m.f1)] {
            if !dst.is_null() {
                std::slice::from_raw_parts_mut(dst, classes).copy_from_slice(src);
            }
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_kinds_map_to_statuses() {
        let s = |e: Error| Failure::from(e).0;
        assert_eq!(s(Error::BadMagic(*b"NOPE")), BfpcnnStatus::BadCheckpoint);
        assert_eq!(s(Error::TruncatedFile), BfpcnnStatus::BadCheckpoint);
        assert_eq!(s(Error::ShapeMismatch("x".into())), BfpcnnStatus::ShapeMismatch);
        assert_eq!(s(Error::EvenWindow(2)), BfpcnnStatus::InvalidArgument);
        assert_eq!(s(Error::NoTape), BfpcnnStatus::Failed);
    }

    #[test]
    fn panics_become_a_status() {
        assert_eq!(guard(|| panic!("boom")), BfpcnnStatus::Panic);
        let msg = unsafe { CStr::from_ptr(bfpcnn_last_error()) };
        assert!(msg.to_str().unwrap().contains("boom"));
        assert_eq!(guard(|| Ok(())), BfpcnnStatus::Ok);
        assert!(bfpcnn_last_error().is_null());
    }

    #[test]
    fn class_names_follow_the_core_order() {
        for (i, name) in CLASS_NAMES.iter().enumerate() {
            assert_eq!(unsafe { CStr::from_ptr(bfpcnn_class_name(i)) }.to_str().unwrap(), *name);
        }
        assert!(bfpcnn_class_name(4).is_null());
    }
}
