//! C ABI over the adaptation pipeline: load checkpoints, push images through
//! the learned backward transform, classify, score datasets.
//!
//! Conventions: handles are opaque pointers owned by the caller and released
//! with the matching `_free` (NULL is a no-op); fallible calls return an
//! [`UnshiftStatus`] and write results through out-pointers, which are left
//! untouched on failure; after a non-OK status the thread-local message from
//! [`unshift_last_error_message`] describes what went wrong. Pixel buffers
//! are row-major CHW `float` in [0, 1].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use ndarray::Array3;
use unshift::adapt::transform_and_classify;
use unshift::datasets::LabeledDataset;
use unshift::models::{
    load_classifier, load_transform_net, Classifier, TransformNet, EVAL_BATCH,
};
use unshift::shiftgen::read_shifted_dataset;
use unshift::{Error, ImageTensor};

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnshiftStatus {
    Ok = 0,
    /// A pointer, shape or value argument was unusable.
    InvalidArgument = 1,
    /// The filesystem said no.
    Io = 2,
    /// A checkpoint was missing, corrupt or mismatched.
    Checkpoint = 3,
    /// A dataset directory was missing, corrupt or mismatched.
    Dataset = 4,
    /// A bug on this side of the boundary (includes caught panics).
    Internal = 5,
}

/// Frozen classifier plus its checkpoint metadata.
pub struct UnshiftClassifier {
    inner: Classifier,
}

/// Trained transformation network.
pub struct UnshiftTransformNet {
    inner: TransformNet,
}

/// Labeled image set read from a shifted-dataset directory.
pub struct UnshiftDataset {
    inner: LabeledDataset,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

type CallResult<T> = std::result::Result<T, (UnshiftStatus, String)>;

fn set_error(msg: &str) {
    let owned = CString::new(msg.replace('\0', "?")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = owned);
}

fn guard(body: impl FnOnce() -> CallResult<()>) -> UnshiftStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => UnshiftStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("panic inside unshift-ffi");
            UnshiftStatus::Internal
        }
    }
}

fn fail<T>(e: Error) -> CallResult<T> {
    let status = match &e {
        Error::InvalidParameter(_) | Error::ShapeMismatch(_) | Error::Config(_) => {
            UnshiftStatus::InvalidArgument
        }
        Error::Io { .. } => UnshiftStatus::Io,
        Error::Checkpoint(_) => UnshiftStatus::Checkpoint,
        Error::InvalidDataset(_) | Error::UnknownDataset(_) | Error::Fetch(_) => {
            UnshiftStatus::Dataset
        }
    };
    Err((status, e.to_string()))
}

fn invalid<T>(msg: impl Into<String>) -> CallResult<T> {
    Err((UnshiftStatus::InvalidArgument, msg.into()))
}

unsafe fn path_arg<'a>(p: *const c_char, what: &str) -> CallResult<&'a Path> {
    if p.is_null() {
        return invalid(format!("{what} is NULL"));
    }
    match CStr::from_ptr(p).to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => invalid(format!("{what} is not valid UTF-8")),
    }
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> CallResult<&'a T> {
    if p.is_null() {
        return invalid(format!("{what} handle is NULL"));
    }
    Ok(&*p)
}

unsafe fn handle_mut<'a, T>(p: *mut T, what: &str) -> CallResult<&'a mut T> {
    if p.is_null() {
        return invalid(format!("{what} handle is NULL"));
    }
    Ok(&mut *p)
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> CallResult<&'a mut T> {
    if p.is_null() {
        return invalid(format!("{what} out-pointer is NULL"));
    }
    Ok(&mut *p)
}

unsafe fn image_arg(
    pixels: *const f32,
    channels: usize,
    height: usize,
    width: usize,
) -> CallResult<ImageTensor> {
    if pixels.is_null() {
        return invalid("pixels is NULL");
    }
    let len = channels
        .checked_mul(height)
        .and_then(|n| n.checked_mul(width))
        .filter(|&n| n > 0);
    let Some(len) = len else {
        return invalid(format!("bad image shape {channels}x{height}x{width}"));
    };
    let data = std::slice::from_raw_parts(pixels, len).to_vec();
    let arr = Array3::from_shape_vec((channels, height, width), data)
        .expect("length matches shape by construction");
    match ImageTensor::new(arr) {
        Ok(img) => Ok(img),
        Err(e) => fail(e),
    }
}

fn predict_chunked(model: &mut Classifier, images: &[ImageTensor]) -> Vec<usize> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_BATCH) {
        let refs: Vec<&ImageTensor> = chunk.iter().collect();
        out.extend(model.predict(&refs));
    }
    out
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn unshift_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message for the most recent failure on this thread. The pointer stays
/// valid until the next failing call on the same thread. Empty string if
/// nothing failed yet.
#[no_mangle]
pub extern "C" fn unshift_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a classifier checkpoint directory into `*out`.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn unshift_classifier_load(
    dir: *const c_char,
    out: *mut *mut UnshiftClassifier,
) -> UnshiftStatus {
    guard(|| {
        let dir = path_arg(dir, "dir")?;
        let slot = out_ptr(out, "out")?;
        match load_classifier(dir) {
            Ok((inner, _meta)) => {
                *slot = Box::into_raw(Box::new(UnshiftClassifier { inner }));
                Ok(())
            }
            Err(e) => fail(e),
        }
    })
}

/// Releases a classifier handle. NULL is a no-op.
///
/// # Safety
/// `h` must come from [`unshift_classifier_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn unshift_classifier_free(h: *mut UnshiftClassifier) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Number of classes the classifier separates.
///
/// # Safety
/// `h` must be a live classifier handle.
#[no_mangle]
pub unsafe extern "C" fn unshift_classifier_num_classes(h: *const UnshiftClassifier) -> usize {
    if h.is_null() {
        return 0;
    }
    (*h).inner.num_classes
}

/// Loads a transformation-net checkpoint directory into `*out`.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn unshift_tnet_load(
    dir: *const c_char,
    out: *mut *mut UnshiftTransformNet,
) -> UnshiftStatus {
    guard(|| {
        let dir = path_arg(dir, "dir")?;
        let slot = out_ptr(out, "out")?;
        match load_transform_net(dir) {
            Ok((inner, _meta)) => {
                *slot = Box::into_raw(Box::new(UnshiftTransformNet { inner }));
                Ok(())
            }
            Err(e) => fail(e),
        }
    })
}

/// Releases a transformation-net handle. NULL is a no-op.
///
/// # Safety
/// `h` must come from [`unshift_tnet_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn unshift_tnet_free(h: *mut UnshiftTransformNet) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Opens a shifted-dataset directory (as written by `unshift make-shift`).
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn unshift_dataset_open(
    dir: *const c_char,
    out: *mut *mut UnshiftDataset,
) -> UnshiftStatus {
    guard(|| {
        let dir = path_arg(dir, "dir")?;
        let slot = out_ptr(out, "out")?;
        match read_shifted_dataset(dir) {
            Ok((inner, _manifest)) => {
                *slot = Box::into_raw(Box::new(UnshiftDataset { inner }));
                Ok(())
            }
            Err(e) => fail(e),
        }
    })
}

/// Releases a dataset handle. NULL is a no-op.
///
/// # Safety
/// `h` must come from [`unshift_dataset_open`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn unshift_dataset_free(h: *mut UnshiftDataset) {
    if !h.is_null() {
        drop(Box::from_raw(h));
    }
}

/// Number of images in the dataset; 0 for NULL.
///
/// # Safety
/// `h` must be a live dataset handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn unshift_dataset_len(h: *const UnshiftDataset) -> usize {
    if h.is_null() {
        return 0;
    }
    (*h).inner.len()
}

/// Writes the dataset's image shape into `*channels`, `*height`, `*width`.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn unshift_dataset_shape(
    h: *const UnshiftDataset,
    channels: *mut usize,
    height: *mut usize,
    width: *mut usize,
) -> UnshiftStatus {
    guard(|| {
        let ds = handle(h, "dataset")?;
        let (c_out, h_out, w_out) = (
            out_ptr(channels, "channels")?,
            out_ptr(height, "height")?,
            out_ptr(width, "width")?,
        );
        let (c, ht, w) = ds.inner.image_shape();
        *c_out = c;
        *h_out = ht;
        *w_out = w;
        Ok(())
    })
}

/// Writes the class label of image `index` into `*out`.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn unshift_dataset_label(
    h: *const UnshiftDataset,
    index: usize,
    out: *mut usize,
) -> UnshiftStatus {
    guard(|| {
        let ds = handle(h, "dataset")?;
        let slot = out_ptr(out, "out")?;
        match ds.inner.labels().get(index) {
            Some(&label) => {
                *slot = label;
                Ok(())
            }
            None => invalid(format!(
                "index {index} out of range for {} images",
                ds.inner.len()
            )),
        }
    })
}

/// Copies image `index` into `pixels` (CHW floats; `len` must equal
/// channels*height*width).
///
/// # Safety
/// `pixels` must point to at least `len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn unshift_dataset_copy_image(
    h: *const UnshiftDataset,
    index: usize,
    pixels: *mut f32,
    len: usize,
) -> UnshiftStatus {
    guard(|| {
        let ds = handle(h, "dataset")?;
        if pixels.is_null() {
            return invalid("pixels is NULL");
        }
        if index >= ds.inner.len() {
            return invalid(format!(
                "index {index} out of range for {} images",
                ds.inner.len()
            ));
        }
        let img = ds.inner.image(index).data();
        if len != img.len() {
            return invalid(format!("buffer holds {len} floats, image needs {}", img.len()));
        }
        let out = std::slice::from_raw_parts_mut(pixels, len);
        for (dst, &src) in out.iter_mut().zip(img.iter()) {
            *dst = src;
        }
        Ok(())
    })
}

/// Classifies one raw image; the winning class index lands in `*out_class`.
///
/// # Safety
/// `pixels` must point to channels*height*width readable floats.
#[no_mangle]
pub unsafe extern "C" fn unshift_classify(
    model: *mut UnshiftClassifier,
    pixels: *const f32,
    channels: usize,
    height: usize,
    width: usize,
    out_class: *mut usize,
) -> UnshiftStatus {
    guard(|| {
        let model = handle_mut(model, "classifier")?;
        let slot = out_ptr(out_class, "out_class")?;
        let img = image_arg(pixels, channels, height, width)?;
        *slot = model.inner.predict(&[&img])[0];
        Ok(())
    })
}

/// Predicts backward-transform parameters for one raw image. `out_params`
/// receives (rotation degrees, brightness, contrast).
///
/// # Safety
/// `pixels` must point to channels*height*width readable floats and
/// `out_params` to 3 writable doubles.
#[no_mangle]
pub unsafe extern "C" fn unshift_predict_params(
    net: *mut UnshiftTransformNet,
    pixels: *const f32,
    channels: usize,
    height: usize,
    width: usize,
    out_params: *mut f64,
) -> UnshiftStatus {
    guard(|| {
        let net = handle_mut(net, "transform net")?;
        if out_params.is_null() {
            return invalid("out_params is NULL");
        }
        let img = image_arg(pixels, channels, height, width)?;
        let p = net.inner.predict_params(&[&img])[0];
        let out = std::slice::from_raw_parts_mut(out_params, 3);
        out[0] = p.rotation_deg as f64;
        out[1] = p.brightness as f64;
        out[2] = p.contrast as f64;
        Ok(())
    })
}

/// Classifies one raw image after the learned backward transform. The class
/// lands in `*out_class`; when non-NULL, `out_params` receives the applied
/// (rotation degrees, brightness, contrast).
///
/// # Safety
/// `pixels` must point to channels*height*width readable floats;
/// `out_params`, when non-NULL, to 3 writable doubles.
#[no_mangle]
pub unsafe extern "C" fn unshift_adapt_classify(
    model: *mut UnshiftClassifier,
    net: *mut UnshiftTransformNet,
    pixels: *const f32,
    channels: usize,
    height: usize,
    width: usize,
    out_class: *mut usize,
    out_params: *mut f64,
) -> UnshiftStatus {
    guard(|| {
        let model = handle_mut(model, "classifier")?;
        let net = handle_mut(net, "transform net")?;
        let slot = out_ptr(out_class, "out_class")?;
        let img = image_arg(pixels, channels, height, width)?;
        let (preds, params) =
            match transform_and_classify(&mut net.inner, &[img], &mut model.inner) {
                Ok(r) => r,
                Err(e) => return fail(e),
            };
        *slot = preds[0];
        if !out_params.is_null() {
            let out = std::slice::from_raw_parts_mut(out_params, 3);
            out[0] = params[0].rotation_deg as f64;
            out[1] = params[0].brightness as f64;
            out[2] = params[0].contrast as f64;
        }
        Ok(())
    })
}

/// Accuracy of `model` on the dataset, through the backward transform when
/// `net` is non-NULL. Lands in `*out_accuracy`.
///
/// # Safety
/// `model` and `ds` must be live handles; `net` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn unshift_dataset_accuracy(
    model: *mut UnshiftClassifier,
    net: *mut UnshiftTransformNet,
    ds: *const UnshiftDataset,
    out_accuracy: *mut f64,
) -> UnshiftStatus {
    guard(|| {
        let model = handle_mut(model, "classifier")?;
        let ds = handle(ds, "dataset")?;
        let slot = out_ptr(out_accuracy, "out_accuracy")?;
        let predictions = if net.is_null() {
            predict_chunked(&mut model.inner, ds.inner.images())
        } else {
            let net = handle_mut(net, "transform net")?;
            match transform_and_classify(&mut net.inner, ds.inner.images(), &mut model.inner) {
                Ok((preds, _)) => preds,
                Err(e) => return fail(e),
            }
        };
        let correct = predictions
            .iter()
            .zip(ds.inner.labels())
            .filter(|(p, l)| p == l)
            .count();
        *slot = correct as f64 / ds.inner.len() as f64;
        Ok(())
    })
}
