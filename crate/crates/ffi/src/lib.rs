//! C interface to a trained rainseg checkpoint and the rainfall quantizer.
//!
//! Every fallible call returns an [`RsStatus`]. On failure a message is kept
//! per thread and can be read with [`rs_last_error`]. Grids cross the
//! boundary as flat row-major buffers: inputs are `[C][H][W]` floats, labels
//! one byte per cell with 255 marking nodata.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use rainseg::datagrid::{quantize_precip, ChannelInfo, GridStack, LpaScheme, RasterGrid};
use rainseg::model::Checkpoint;
use rainseg::pipeline::{normalized_patches, stats_from_checkpoint};
use rainseg::trainer::predict_patches;
use rainseg::Error;

/// Label value for nodata cells.
pub const RS_NODATA: u8 = 255;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    NonFinite = 5,
    Internal = 6,
}

/// Opaque handle to a loaded checkpoint.
pub struct RsModel {
    ck: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> RsStatus {
    match e {
        Error::Io { .. } => RsStatus::Io,
        Error::Format { .. } | Error::Truncated { .. } | Error::Json(_) => RsStatus::Format,
        Error::NonFinite { .. } => RsStatus::NonFinite,
        Error::Autodiff(_) => RsStatus::Internal,
        _ => RsStatus::InvalidArgument,
    }
}

/// Runs `f`, turning errors and panics into a status plus a stored message.
fn guard(f: impl FnOnce() -> Result<(), (RsStatus, String)>) -> RsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RsStatus::Ok,
        Ok(Err((s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            RsStatus::Internal
        }
    }
}

fn fail(e: Error) -> (RsStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (RsStatus, String) {
    (RsStatus::NullPointer, format!("{what} is null"))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (RsStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (RsStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// Message for the last failed call on this thread, or null if none.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn rs_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint file. On success `*out` owns a handle to release with
/// [`rs_model_free`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn rs_model_load(path: *const c_char, out: *mut *mut RsModel) -> RsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = c_str(path, "path")?;
        let ck = Checkpoint::load(path).map_err(fail)?;
        stats_from_checkpoint(&ck).map_err(fail)?;
        *out = Box::into_raw(Box::new(RsModel { ck }));
        Ok(())
    })
}

/// Releases a handle from [`rs_model_load`]. Null is ignored.
///
/// # Safety
/// `model` must come from `rs_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn rs_model_free(model: *mut RsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Reports the input channel count, class count and patch size the model expects.
///
/// # Safety
/// `model` must be a live handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn rs_model_info(
    model: *const RsModel,
    in_channels: *mut usize,
    num_classes: *mut usize,
    patch_size: *mut usize,
) -> RsStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if in_channels.is_null() || num_classes.is_null() || patch_size.is_null() {
            return Err(null("out pointer"));
        }
        let cfg = &m.ck.model.config;
        *in_channels = cfg.in_channels;
        *num_classes = cfg.num_classes;
        *patch_size = cfg.patch_size;
        Ok(())
    })
}

/// Predicts a class per cell for a `channels x height x width` grid.
///
/// `mask` may be null, in which case a cell is valid when all its channel
/// values are finite. Invalid cells get [`RS_NODATA`] in `out_labels`, which
/// must hold `height * width` bytes.
///
/// # Safety
/// `values` must hold `channels * height * width` floats and `mask`, when not
/// null, `height * width` bytes.
#[no_mangle]
pub unsafe extern "C" fn rs_model_predict(
    model: *mut RsModel,
    values: *const f32,
    mask: *const u8,
    channels: usize,
    height: usize,
    width: usize,
    out_labels: *mut u8,
) -> RsStatus {
    guard(|| {
        let m = model.as_mut().ok_or_else(|| null("model"))?;
        if values.is_null() {
            return Err(null("values"));
        }
        if out_labels.is_null() {
            return Err(null("out_labels"));
        }
        let cfg = &m.ck.model.config;
        if channels != cfg.in_channels {
            return Err((
                RsStatus::InvalidArgument,
                format!("model expects {} channels, got {channels}", cfg.in_channels),
            ));
        }
        let cells = height
            .checked_mul(width)
            .filter(|&n| n > 0 && n.checked_mul(channels).is_some())
            .ok_or_else(|| (RsStatus::InvalidArgument, format!("bad grid extent {height}x{width}")))?;
        let values = slice::from_raw_parts(values, cells * channels).to_vec();
        let mask: Vec<bool> = if mask.is_null() {
            (0..cells)
                .map(|i| (0..channels).all(|c| values[c * cells + i].is_finite()))
                .collect()
        } else {
            slice::from_raw_parts(mask, cells).iter().map(|&b| b != 0).collect()
        };
        let stack = GridStack {
            height,
            width,
            channels: (0..channels)
                .map(|c| ChannelInfo { modality: format!("c{c}"), month: 0 })
                .collect(),
            values,
            mask,
        };
        let stats = stats_from_checkpoint(&m.ck).map_err(fail)?;
        let z = m.ck.model.config.patch_size;
        let classes = m.ck.model.config.num_classes as u8;
        let patches = normalized_patches(&stack, None, z, &stats).map_err(fail)?;
        let all: Vec<usize> = (0..patches.len()).collect();
        let pred = predict_patches(&mut m.ck.model, &patches, &all, 16).map_err(fail)?;
        let map = patches.untile(&pred, classes).map_err(fail)?;
        slice::from_raw_parts_mut(out_labels, cells).copy_from_slice(&map.labels);
        Ok(())
    })
}

/// Maps seasonal rainfall totals (mm) to rainfall classes using a built-in
/// region scheme such as `"Kerala"`. NaN totals become [`RS_NODATA`].
///
/// # Safety
/// `rain_mm` must hold `len` floats, `out_labels` `len` bytes and `region`
/// must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn rs_quantize(
    rain_mm: *const f32,
    len: usize,
    region: *const c_char,
    out_labels: *mut u8,
) -> RsStatus {
    guard(|| {
        if rain_mm.is_null() {
            return Err(null("rain_mm"));
        }
        if out_labels.is_null() {
            return Err(null("out_labels"));
        }
        let scheme = LpaScheme::builtin(c_str(region, "region")?).map_err(fail)?;
        let rain = slice::from_raw_parts(rain_mm, len).to_vec();
        let grid = RasterGrid::from_values(1, len, 1, rain).map_err(fail)?;
        let labels = quantize_precip(&grid, &scheme).map_err(fail)?;
        slice::from_raw_parts_mut(out_labels, len).copy_from_slice(&labels.labels);
        Ok(())
    })
}
