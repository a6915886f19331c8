//! C ABI for gazekit.
//!
//! Every fallible call returns a [`GkStatus`]; on failure the message is
//! available from [`gk_last_error_message`] on the same thread. Handles are
//! opaque and must be released with their `_free` function. Strings handed
//! out by the library are released with [`gk_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use gazekit::hha::{encode_hha, DepthMap, HhaConfig, HhaImage};
use gazekit::metrics::{self, MetricConfig};
use gazekit::prompt::{self, PromptConfig};
use gazekit::{Error, GazePoint, ImageSize, NormBox, PixelBox, Prediction};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GkStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidInput = 3,
    Format = 4,
    Io = 5,
    MalformedResponse = 6,
    UndefinedMetric = 7,
    Config = 8,
    OutOfRange = 9,
    Panic = 10,
}

/// Box in normalized bins, each coordinate in `[0, 999]`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GkNormBox {
    pub x1: u32,
    pub y1: u32,
    pub x2: u32,
    pub y2: u32,
}

/// Box in pixels.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GkPixelBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

/// Encoded HHA image.
pub struct GkHha {
    inner: HhaImage,
}

/// Parsed model response.
pub struct GkPrediction {
    inner: Prediction,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(e: &Error) -> GkStatus {
    match e {
        Error::InvalidInput(_) => GkStatus::InvalidInput,
        Error::Format { .. } => GkStatus::Format,
        Error::Io { .. } => GkStatus::Io,
        Error::MalformedResponse { .. } => GkStatus::MalformedResponse,
        Error::UndefinedMetric(_) => GkStatus::UndefinedMetric,
        Error::Config(_) => GkStatus::Config,
    }
}

fn fail(status: GkStatus, msg: impl Into<String>) -> GkStatus {
    set_error(msg);
    status
}

fn from_error(e: Error) -> GkStatus {
    fail(status_of(&e), e.to_string())
}

/// Run `f`, turning panics into `GkStatus::Panic`.
fn guard(f: impl FnOnce() -> GkStatus) -> GkStatus {
    clear_error();
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| fail(GkStatus::Panic, "internal panic"))
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, GkStatus> {
    if p.is_null() {
        return Err(fail(GkStatus::NullPointer, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(GkStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

fn to_c_string(s: String) -> Result<*mut c_char, GkStatus> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| fail(GkStatus::InvalidInput, "string contains a NUL byte"))
}

macro_rules! try_gk {
    ($e:expr) => {
        match $e {
            Ok(v) => v,
            Err(s) => return s,
        }
    };
}

/// Message for the last failed call on this thread, or NULL. Valid until
/// the next gazekit call on the same thread.
#[no_mangle]
pub extern "C" fn gk_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gk_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn gk_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

// ---------------------------------------------------------------------------
// HHA
// ---------------------------------------------------------------------------

/// Encode a row-major depth map with the default settings.
///
/// # Safety
/// `depth` must point to `width * height` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gk_hha_encode(
    depth: *const f64,
    width: u32,
    height: u32,
    out: *mut *mut GkHha,
) -> GkStatus {
    guard(|| {
        if depth.is_null() || out.is_null() {
            return fail(GkStatus::NullPointer, "depth and out must be non-null");
        }
        *out = ptr::null_mut();
        let size = try_gk!(ImageSize::new(width, height).map_err(from_error));
        let values = std::slice::from_raw_parts(depth, size.pixel_count()).to_vec();
        let map = try_gk!(DepthMap::new(size, values).map_err(from_error));
        let hha = try_gk!(encode_hha(&map, &HhaConfig::default()).map_err(from_error));
        *out = Box::into_raw(Box::new(GkHha { inner: hha }));
        GkStatus::Ok
    })
}

/// # Safety
/// `hha` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn gk_hha_width(hha: *const GkHha) -> u32 {
    hha.as_ref().map_or(0, |h| h.inner.size().width)
}

/// # Safety
/// `hha` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn gk_hha_height(hha: *const GkHha) -> u32 {
    hha.as_ref().map_or(0, |h| h.inner.size().height)
}

/// Copy interleaved RGB bytes (disparity, height, angle) into `buf`, which
/// must hold `3 * width * height` bytes.
///
/// # Safety
/// `buf` must point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn gk_hha_rgb(hha: *const GkHha, buf: *mut u8, len: usize) -> GkStatus {
    guard(|| {
        let Some(h) = hha.as_ref() else {
            return fail(GkStatus::NullPointer, "hha is null");
        };
        if buf.is_null() {
            return fail(GkStatus::NullPointer, "buf is null");
        }
        let rgb = h.inner.to_rgb8();
        if len < rgb.len() {
            return fail(
                GkStatus::OutOfRange,
                format!("buffer holds {len} bytes, need {}", rgb.len()),
            );
        }
        ptr::copy_nonoverlapping(rgb.as_ptr(), buf, rgb.len());
        GkStatus::Ok
    })
}

/// # Safety
/// `hha` must come from [`gk_hha_encode`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn gk_hha_free(hha: *mut GkHha) {
    if !hha.is_null() {
        drop(Box::from_raw(hha));
    }
}

// ---------------------------------------------------------------------------
// Token codec
// ---------------------------------------------------------------------------

/// Render a box with the default tokens.
///
/// # Safety
/// `out` must be writable; free the result with [`gk_string_free`].
#[no_mangle]
pub unsafe extern "C" fn gk_serialize_box(b: GkNormBox, out: *mut *mut c_char) -> GkStatus {
    guard(|| {
        if out.is_null() {
            return fail(GkStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        let nb = try_gk!(NormBox::new(b.x1, b.y1, b.x2, b.y2).map_err(from_error));
        *out = try_gk!(to_c_string(prompt::serialize_box(
            &nb,
            &PromptConfig::default()
        )));
        GkStatus::Ok
    })
}

/// Parse a model response. On `MalformedResponse`, `error_offset` (if not
/// NULL) receives the byte offset of the problem.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gk_parse_response(
    text: *const c_char,
    out: *mut *mut GkPrediction,
    error_offset: *mut usize,
) -> GkStatus {
    guard(|| {
        if out.is_null() {
            return fail(GkStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        let text = try_gk!(str_arg(text, "text"));
        match prompt::parse_response(text, &PromptConfig::default()) {
            Ok(p) => {
                *out = Box::into_raw(Box::new(GkPrediction { inner: p }));
                GkStatus::Ok
            }
            Err(e) => {
                if let (Error::MalformedResponse { offset, .. }, Some(o)) =
                    (&e, error_offset.as_mut())
                {
                    *o = *offset;
                }
                from_error(e)
            }
        }
    })
}

/// # Safety
/// `pred` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn gk_prediction_box_count(pred: *const GkPrediction) -> usize {
    pred.as_ref().map_or(0, |p| p.inner.boxes.len())
}

/// # Safety
/// `pred` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gk_prediction_box(
    pred: *const GkPrediction,
    index: usize,
    out: *mut GkNormBox,
) -> GkStatus {
    guard(|| {
        let (Some(p), Some(o)) = (pred.as_ref(), out.as_mut()) else {
            return fail(GkStatus::NullPointer, "pred and out must be non-null");
        };
        let Some(b) = p.inner.boxes.get(index) else {
            return fail(
                GkStatus::OutOfRange,
                format!("box {index} of {}", p.inner.boxes.len()),
            );
        };
        *o = GkNormBox {
            x1: b.x1,
            y1: b.y1,
            x2: b.x2,
            y2: b.y2,
        };
        GkStatus::Ok
    })
}

/// # Safety
/// `pred` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn gk_prediction_out_of_frame(pred: *const GkPrediction) -> bool {
    pred.as_ref().is_some_and(|p| p.inner.out_of_frame)
}

/// Object class as a new string, or NULL when the response names none.
///
/// # Safety
/// `pred` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn gk_prediction_class(pred: *const GkPrediction) -> *mut c_char {
    pred.as_ref()
        .and_then(|p| p.inner.class_label.clone())
        .and_then(|c| CString::new(c).ok())
        .map_or(ptr::null_mut(), CString::into_raw)
}

/// The prediction as one JSON line.
///
/// # Safety
/// `pred` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gk_prediction_to_json(
    pred: *const GkPrediction,
    out: *mut *mut c_char,
) -> GkStatus {
    guard(|| {
        let (Some(p), false) = (pred.as_ref(), out.is_null()) else {
            return fail(GkStatus::NullPointer, "pred and out must be non-null");
        };
        let json = serde_json::to_string(&p.inner).expect("prediction serializes");
        *out = try_gk!(to_c_string(json));
        GkStatus::Ok
    })
}

/// # Safety
/// `pred` must come from [`gk_parse_response`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn gk_prediction_free(pred: *mut GkPrediction) {
    if !pred.is_null() {
        drop(Box::from_raw(pred));
    }
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Intersection over union of two pixel boxes; negative on invalid boxes.
#[no_mangle]
pub extern "C" fn gk_iou(a: GkPixelBox, b: GkPixelBox) -> f64 {
    let conv = |g: GkPixelBox| PixelBox::new(g.x1, g.y1, g.x2, g.y2);
    match (conv(a), conv(b)) {
        (Ok(a), Ok(b)) => gazekit::assign::iou(&a, &b),
        (Err(e), _) | (_, Err(e)) => {
            set_error(e.to_string());
            -1.0
        }
    }
}

/// AUC of a `grid x grid` row-major heatmap against `n_points` normalized
/// points given as `x0, y0, x1, y1, ...`.
///
/// # Safety
/// `heatmap` must hold `grid * grid` doubles, `points_xy` `2 * n_points`.
#[no_mangle]
pub unsafe extern "C" fn gk_auc(
    heatmap: *const f64,
    grid: u32,
    points_xy: *const f64,
    n_points: usize,
    out: *mut f64,
) -> GkStatus {
    guard(|| {
        if heatmap.is_null() || points_xy.is_null() || out.is_null() {
            return fail(
                GkStatus::NullPointer,
                "heatmap, points_xy and out must be non-null",
            );
        }
        let heat = std::slice::from_raw_parts(heatmap, (grid as usize).pow(2));
        let raw = std::slice::from_raw_parts(points_xy, 2 * n_points);
        let pts: Vec<GazePoint> = try_gk!(raw
            .chunks_exact(2)
            .map(|c| GazePoint::new(c[0], c[1]))
            .collect::<Result<_, _>>()
            .map_err(from_error));
        *out = try_gk!(metrics::auc(heat, grid, &pts).map_err(from_error));
        GkStatus::Ok
    })
}

/// Evaluate a predictions JSONL file against an annotations JSONL file
/// with default settings; `out` receives the report as JSON.
///
/// # Safety
/// Paths must be NUL-terminated strings; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gk_evaluate_files(
    predictions: *const c_char,
    annotations: *const c_char,
    out: *mut *mut c_char,
) -> GkStatus {
    guard(|| {
        if out.is_null() {
            return fail(GkStatus::NullPointer, "out is null");
        }
        *out = ptr::null_mut();
        let pp = try_gk!(str_arg(predictions, "predictions"));
        let ap = try_gk!(str_arg(annotations, "annotations"));
        let (preds, _) =
            try_gk!(gazekit::ingest::read_predictions(Path::new(pp)).map_err(from_error));
        let load = try_gk!(gazekit::ingest::load_annotations(Path::new(ap)).map_err(from_error));
        let eval = metrics::evaluate(
            &preds,
            &load.manifest,
            &MetricConfig::default(),
            &PromptConfig::default(),
        );
        let json = serde_json::to_string(&eval.report).expect("report serializes");
        *out = try_gk!(to_c_string(json));
        GkStatus::Ok
    })
}
