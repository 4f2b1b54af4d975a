//! C ABI over the `sammese` crate.
//!
//! Every fallible function returns an [`SmStatus`]; on failure the message is
//! kept per thread and read back with [`sm_last_error`]. Models are opaque
//! handles created by `sm_model_*` constructors and released with
//! [`sm_model_free`]. A handle must not be used from two threads at once.
//!
//! Images cross the boundary as row-major interleaved `u8` buffers
//! (`height * width * channels`), masks and saliency maps as row-major `f64`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use sammese::checkpoint;
use sammese::cli::to_native;
use sammese::config::RunConfig;
use sammese::data_io::{self, SamplePair};
use sammese::metrics;
use sammese::model::Sammese;
use sammese::params::{ParameterRegistry, Tag};
use sammese::prompt_gen::{derive_geometric, GeometricParams};
use sammese::{Error, Tensor};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Io = 4,
    Checkpoint = 5,
    Shape = 6,
    Data = 7,
    Panic = 8,
}

/// Opaque model handle.
pub struct SmModel {
    reg: ParameterRegistry,
    model: Sammese,
}

/// One derived box prompt, inclusive pixel bounds.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct SmBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

/// One derived foreground point.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct SmPoint {
    pub x: usize,
    pub y: usize,
}

/// Scores of one prediction against its ground truth.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct SmMetrics {
    pub mae: f64,
    pub f_beta_max: f64,
    pub f_beta_mean: f64,
    pub s_measure: f64,
    pub e_measure_max: f64,
    pub e_measure_mean: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SmStatus {
    match e {
        Error::Config(_) => SmStatus::Config,
        Error::Io { .. } | Error::Image { .. } => SmStatus::Io,
        Error::Checkpoint(_) | Error::Json(_) => SmStatus::Checkpoint,
        Error::Shape(_) => SmStatus::Shape,
        Error::Invalid(_) => SmStatus::InvalidArgument,
        Error::Dataset(_) | Error::Orphan { .. } | Error::NonFinite(_) => SmStatus::Data,
    }
}

struct Fail(SmStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            SmStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal panic: {msg}"));
            SmStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(SmStatus::NullPointer, format!("`{what}` is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(SmStatus::InvalidArgument, msg.into())
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("`{what}` is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn model_arg<'a>(m: *const SmModel) -> Result<&'a SmModel, Fail> {
    m.as_ref().ok_or_else(|| null("model"))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Last error message on this thread, or null after a successful call. The
/// pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn sm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Build a freshly initialised model from config text (`key = value` lines).
///
/// # Safety
/// `config` must be a NUL-terminated string or null; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sm_model_from_config(config: *const c_char, out: *mut *mut SmModel) -> SmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = std::ptr::null_mut();
        let mut cfg = RunConfig::default();
        cfg.apply_text(str_arg(config, "config")?)?;
        cfg.validate()?;
        let (reg, model) = Sammese::build(&cfg)?;
        *out = Box::into_raw(Box::new(SmModel { reg, model }));
        Ok(())
    })
}

/// Load a model from a checkpoint written by `sammese train`.
///
/// # Safety
/// `path` must be a NUL-terminated string or null; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sm_model_load(path: *const c_char, out: *mut *mut SmModel) -> SmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = std::ptr::null_mut();
        let (reg, model, _) = checkpoint::restore(Path::new(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(SmModel { reg, model }));
        Ok(())
    })
}

/// Write the model's parameters to a checkpoint.
///
/// # Safety
/// `model` must come from a constructor here; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sm_model_save(model: *const SmModel, path: *const c_char) -> SmStatus {
    guard(|| {
        let m = model_arg(model)?;
        checkpoint::save(Path::new(str_arg(path, "path")?), &m.reg, &m.model.cfg, 0)?;
        Ok(())
    })
}

/// Release a model. Null is ignored.
///
/// # Safety
/// `model` must come from a constructor here and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sm_model_free(model: *mut SmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of learnable scalars.
///
/// # Safety
/// `model` must come from a constructor here; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sm_model_trainable_count(model: *const SmModel, out: *mut usize) -> SmStatus {
    guard(|| {
        *out_arg(out, "out")? = model_arg(model)?.reg.count(Tag::Trainable);
        Ok(())
    })
}

/// Side length of the model's square input.
///
/// # Safety
/// `model` must come from a constructor here; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sm_model_input_size(model: *const SmModel, out: *mut usize) -> SmStatus {
    guard(|| {
        *out_arg(out, "out")? = model_arg(model)?.model.cfg.large_size;
        Ok(())
    })
}

fn planes(buf: &[u8], h: usize, w: usize, channels: usize) -> Result<Tensor, Fail> {
    if channels != 1 && channels != 3 {
        return Err(invalid(format!("channels must be 1 or 3, got {channels}")));
    }
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        let c = if channels == 1 { 0 } else { c };
        buf[p * channels + c] as f64 / 255.0
    }))
}

/// Saliency map for one RGB / auxiliary pair, written at the input size.
///
/// `rgb` holds `height * width * 3` bytes, `aux` holds
/// `height * width * aux_channels` bytes (1 or 3), and `out` receives
/// `height * width` probabilities.
///
/// # Safety
/// Buffers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn sm_model_predict(
    model: *const SmModel,
    rgb: *const u8,
    aux: *const u8,
    aux_channels: usize,
    width: usize,
    height: usize,
    out: *mut f64,
) -> SmStatus {
    guard(|| {
        let m = model_arg(model)?;
        if width == 0 || height == 0 {
            return Err(invalid("empty image"));
        }
        let n = width * height;
        let rgb = planes(slice_arg(rgb, n * 3, "rgb")?, height, width, 3)?;
        let aux = planes(slice_arg(aux, n * aux_channels, "aux")?, height, width, aux_channels)?;
        if out.is_null() {
            return Err(null("out"));
        }
        let pair = SamplePair {
            id: "ffi".into(),
            rgb,
            aux,
            gt: Tensor::zeros(&[height, width]),
        };
        let pred = m.model.predict(&m.reg, &data_io::preprocess(&pair, &m.model.cfg)?)?;
        let map = to_native(&pred.main, height, width)?;
        std::slice::from_raw_parts_mut(out, n).copy_from_slice(map.data());
        Ok(())
    })
}

fn map_pair(pred: &[f64], gt: &[f64], h: usize, w: usize) -> Result<(Tensor, Tensor), Fail> {
    if pred.iter().chain(gt).any(|v| !v.is_finite()) {
        return Err(Fail(SmStatus::Data, "non-finite value in map".into()));
    }
    Ok((Tensor::new(&[h, w], pred.to_vec())?, Tensor::new(&[h, w], gt.to_vec())?))
}

/// Score a saliency map in `[0, 1]` against a binary ground truth.
///
/// # Safety
/// `pred` and `gt` must hold `height * width` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sm_evaluate(
    pred: *const f64,
    gt: *const f64,
    width: usize,
    height: usize,
    out: *mut SmMetrics,
) -> SmStatus {
    guard(|| {
        if width == 0 || height == 0 {
            return Err(invalid("empty map"));
        }
        let n = width * height;
        let (m, g) = map_pair(slice_arg(pred, n, "pred")?, slice_arg(gt, n, "gt")?, height, width)?;
        let r = metrics::evaluate_pair("ffi", &m, &g);
        *out_arg(out, "out")? = SmMetrics {
            mae: r.mae,
            f_beta_max: r.f_beta_max,
            f_beta_mean: r.f_beta_mean,
            s_measure: r.s_measure,
            e_measure_max: r.e_measure_max,
            e_measure_mean: r.e_measure_mean,
        };
        Ok(())
    })
}

/// Boxes and points derived from a coarse map.
///
/// At most `box_cap` boxes and `point_cap` points are written; the full
/// counts go to `n_boxes` and `n_points`, so a call with zero capacities
/// sizes the buffers.
///
/// # Safety
/// `coarse` must hold `height * width` values; `boxes` / `points` must hold
/// their capacities (or be null when the capacity is 0).
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn sm_derive_prompts(
    coarse: *const f64,
    width: usize,
    height: usize,
    threshold: f64,
    min_area_fraction: f64,
    max_points: usize,
    boxes: *mut SmBox,
    box_cap: usize,
    n_boxes: *mut usize,
    points: *mut SmPoint,
    point_cap: usize,
    n_points: *mut usize,
) -> SmStatus {
    guard(|| {
        if width == 0 || height == 0 {
            return Err(invalid("empty map"));
        }
        let map = slice_arg(coarse, width * height, "coarse")?;
        let t = Tensor::new(&[height, width], map.to_vec())?;
        let params = GeometricParams {
            threshold,
            min_area_fraction,
            max_points,
            mask_size: None,
            ..GeometricParams::default()
        };
        let p = derive_geometric(&t, &params);
        *out_arg(n_boxes, "n_boxes")? = p.boxes.len();
        *out_arg(n_points, "n_points")? = p.points.len();
        if box_cap > 0 {
            let dst = std::slice::from_raw_parts_mut(boxes.as_mut().ok_or_else(|| null("boxes"))?, box_cap);
            for (d, b) in dst.iter_mut().zip(&p.boxes) {
                *d = SmBox {
                    x_min: b.x_min,
                    y_min: b.y_min,
                    x_max: b.x_max,
                    y_max: b.y_max,
                };
            }
        }
        if point_cap > 0 {
            let dst = std::slice::from_raw_parts_mut(points.as_mut().ok_or_else(|| null("points"))?, point_cap);
            for (d, q) in dst.iter_mut().zip(&p.points) {
                *d = SmPoint { x: q.x, y: q.y };
            }
        }
        Ok(())
    })
}
