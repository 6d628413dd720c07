//! C interface to coseg-core.
//!
//! Every fallible call returns a [`CosegStatus`]; on failure the message is
//! available from [`coseg_last_error`] on the same thread until the next
//! failing call. Images are row-major `double` arrays, masks row-major
//! `uint8_t` arrays holding 0 or 1.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use coseg_core::crf::{refine_probability, CrfParams};
use coseg_core::grabcut::{GrabcutConfig, Point, RecistAnnotation, Segment};
use coseg_core::metrics::{evaluate_case, AvdMode};
use coseg_core::nn::{checkpoint, CosegNet, Tensor};
use coseg_core::pipeline::{weak_mask, PipelineConfig};
use coseg_core::{BinaryMask, Error, ImageGrid, SeededRng};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CosegStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    Io = 4,
    Config = 5,
    Panic = 6,
    Other = 7,
}

fn status_of(e: &Error) -> CosegStatus {
    match e {
        Error::AnnotationOutOfBounds(_)
        | Error::DegenerateRecist(_)
        | Error::InvalidTrimap(_)
        | Error::InsufficientSamples { .. }
        | Error::InvalidArgument(_)
        | Error::EmptyMask
        | Error::Empty(_) => CosegStatus::InvalidArgument,
        Error::ShapeMismatch { .. } | Error::DimensionMismatch(_) | Error::CrfTooLarge { .. } => CosegStatus::DimensionMismatch,
        Error::Io { .. } | Error::Image { .. } | Error::MissingArtifact { .. } | Error::Csv(_) | Error::Json(_) => CosegStatus::Io,
        Error::Config(_) | Error::Checkpoint(_) => CosegStatus::Config,
        _ => CosegStatus::Other,
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: CosegStatus, msg: impl Into<String>) -> CosegStatus {
    set_error(msg.into());
    status
}

/// Runs `f`, turning errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), CosegStatus>) -> CosegStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CosegStatus::Ok,
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p.downcast_ref::<&str>().map(|s| s.to_string()).or_else(|| p.downcast_ref::<String>().cloned());
            fail(CosegStatus::Panic, format!("panic: {}", msg.unwrap_or_else(|| "unknown".into())))
        }
    }
}

trait OrStatus<T> {
    fn status(self) -> Result<T, CosegStatus>;
}

impl<T> OrStatus<T> for coseg_core::Result<T> {
    fn status(self) -> Result<T, CosegStatus> {
        self.map_err(|e| fail(status_of(&e), e.to_string()))
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), CosegStatus> {
    if p.is_null() {
        Err(fail(CosegStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

unsafe fn path_arg<'a>(p: *const c_char, what: &str) -> Result<&'a Path, CosegStatus> {
    non_null(p, what)?;
    CStr::from_ptr(p).to_str().map(Path::new).map_err(|_| fail(CosegStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

fn pixels(width: usize, height: usize) -> Result<usize, CosegStatus> {
    match width.checked_mul(height) {
        Some(n) if n > 0 => Ok(n),
        _ => Err(fail(CosegStatus::InvalidArgument, format!("invalid image size {width}x{height}"))),
    }
}

unsafe fn image_arg(data: *const f64, width: usize, height: usize) -> Result<ImageGrid, CosegStatus> {
    non_null(data, "image")?;
    let n = pixels(width, height)?;
    ImageGrid::new(width, height, std::slice::from_raw_parts(data, n).to_vec()).status()
}

unsafe fn mask_arg(data: *const u8, width: usize, height: usize, what: &str) -> Result<BinaryMask, CosegStatus> {
    non_null(data, what)?;
    let n = pixels(width, height)?;
    let labels = std::slice::from_raw_parts(data, n).iter().map(|&v| (v != 0) as u8).collect();
    BinaryMask::new(width, height, labels).status()
}

unsafe fn write_mask(mask: &BinaryMask, out: *mut u8) {
    ptr::copy_nonoverlapping(mask.labels().as_ptr(), out, mask.labels().len());
}

/// Message of the last failed call on this thread, or null. The pointer is
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn coseg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn coseg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Trained co-segmentation network.
pub struct CosegModel {
    net: CosegNet,
    size: usize,
}

/// Loads a model from a pipeline config file (for the network layout and
/// input size) and a checkpoint written by `coseg train`.
///
/// # Safety
/// `config_path` and `checkpoint_path` must be NUL-terminated strings and
/// `out` must point to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn coseg_model_load(config_path: *const c_char, checkpoint_path: *const c_char, out: *mut *mut CosegModel) -> CosegStatus {
    guard(|| {
        non_null(out, "out")?;
        let cfg = PipelineConfig::load(path_arg(config_path, "config_path")?).status()?;
        let entries = checkpoint::load(path_arg(checkpoint_path, "checkpoint_path")?).status()?;
        let mut net = CosegNet::new(cfg.network.clone(), &mut SeededRng::new(0)).status()?;
        net.params_mut().load(&entries).status()?;
        *out = Box::into_raw(Box::new(CosegModel { net, size: cfg.preprocess.size }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`coseg_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn coseg_model_free(model: *mut CosegModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Side length of the square inputs the model expects, or 0 for null.
///
/// # Safety
/// `model` must be null or a live model.
#[no_mangle]
pub unsafe extern "C" fn coseg_model_input_size(model: *const CosegModel) -> usize {
    model.as_ref().map_or(0, |m| m.size)
}

/// Foreground probabilities for a pair of preprocessed `size x size`
/// images. Outputs hold `size * size` values each.
///
/// # Safety
/// All pointers must be valid for `size * size` elements.
#[no_mangle]
pub unsafe extern "C" fn coseg_model_predict_pair(
    model: *const CosegModel,
    image_a: *const f64,
    image_b: *const f64,
    size: usize,
    out_a: *mut f64,
    out_b: *mut f64,
) -> CosegStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out_a, "out_a")?;
        non_null(out_b, "out_b")?;
        let m = &*model;
        if size != m.size {
            return Err(fail(CosegStatus::DimensionMismatch, format!("model expects {0}x{0} inputs, got {size}x{size}", m.size)));
        }
        let a = image_arg(image_a, size, size)?;
        let b = image_arg(image_b, size, size)?;
        let ta = Tensor::new(vec![1, 1, size, size], a.into_data()).status()?;
        let tb = Tensor::new(vec![1, 1, size, size], b.into_data()).status()?;
        let (pa, pb) = m.net.predict_pair(&ta, &tb).status()?;
        ptr::copy_nonoverlapping(pa.data().as_ptr(), out_a, size * size);
        ptr::copy_nonoverlapping(pb.data().as_ptr(), out_b, size * size);
        Ok(())
    })
}

/// GrabCut mask from a RECIST cross. `recist` holds the major axis
/// endpoints followed by the minor axis endpoints as
/// `x11, y11, x12, y12, x21, y21, x22, y22`. GrabCut runs on the endpoint
/// box grown by `margin` pixels with default settings; the margin must
/// exceed the 20 pixel box expansion so that definite background exists.
///
/// # Safety
/// `image` and `out_mask` must be valid for `width * height` elements and
/// `recist` for 8.
#[no_mangle]
pub unsafe extern "C" fn coseg_grabcut(
    image: *const f64,
    width: usize,
    height: usize,
    recist: *const f64,
    margin: usize,
    seed: u64,
    out_mask: *mut u8,
) -> CosegStatus {
    guard(|| {
        non_null(recist, "recist")?;
        non_null(out_mask, "out_mask")?;
        let img = image_arg(image, width, height)?;
        let r = std::slice::from_raw_parts(recist, 8);
        let ann = RecistAnnotation::new(
            "ffi",
            Segment::new(Point::new(r[0], r[1]), Point::new(r[2], r[3])),
            Segment::new(Point::new(r[4], r[5]), Point::new(r[6], r[7])),
        )
        .status()?;
        let mask = weak_mask(&img, &ann, &GrabcutConfig::default(), margin, &mut SeededRng::new(seed)).status()?;
        write_mask(&mask, out_mask);
        Ok(())
    })
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosegCrfParams {
    pub w_app: f64,
    pub w_smooth: f64,
    pub theta_alpha: f64,
    pub theta_beta: f64,
    pub theta_gamma: f64,
    pub iterations: usize,
}

impl From<CosegCrfParams> for CrfParams {
    fn from(p: CosegCrfParams) -> Self {
        CrfParams { w_app: p.w_app, w_smooth: p.w_smooth, theta_alpha: p.theta_alpha, theta_beta: p.theta_beta, theta_gamma: p.theta_gamma, iterations: p.iterations }
    }
}

#[no_mangle]
pub extern "C" fn coseg_crf_default_params() -> CosegCrfParams {
    let p = CrfParams::default();
    CosegCrfParams { w_app: p.w_app, w_smooth: p.w_smooth, theta_alpha: p.theta_alpha, theta_beta: p.theta_beta, theta_gamma: p.theta_gamma, iterations: p.iterations }
}

/// Dense CRF refinement of a foreground probability map. `image` should be
/// scaled to [0, 1]. Null `params` selects the defaults.
///
/// # Safety
/// `image`, `prob` and `out_mask` must be valid for `width * height`
/// elements; `params` must be null or valid.
#[no_mangle]
pub unsafe extern "C" fn coseg_crf_refine(
    image: *const f64,
    prob: *const f64,
    width: usize,
    height: usize,
    params: *const CosegCrfParams,
    out_mask: *mut u8,
) -> CosegStatus {
    guard(|| {
        non_null(out_mask, "out_mask")?;
        let img = image_arg(image, width, height)?;
        let p = image_arg(prob, width, height)?;
        let params: CrfParams = params.as_ref().map_or_else(CrfParams::default, |p| (*p).into());
        let out = refine_probability(&img, &p, &params).status()?;
        write_mask(&out.mask, out_mask);
        Ok(())
    })
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CosegMetrics {
    pub recall: f64,
    pub precision: f64,
    pub dice: f64,
    pub volumetric_similarity: f64,
    /// Averaged Hausdorff distance in pixels; NaN when either mask is empty.
    pub avd: f64,
}

/// Scores `pred` against `gt`.
///
/// # Safety
/// `pred` and `gt` must be valid for `width * height` elements and `out`
/// for one struct.
#[no_mangle]
pub unsafe extern "C" fn coseg_evaluate(pred: *const u8, gt: *const u8, width: usize, height: usize, out: *mut CosegMetrics) -> CosegStatus {
    guard(|| {
        non_null(out, "out")?;
        let p = mask_arg(pred, width, height, "pred")?;
        let g = mask_arg(gt, width, height, "gt")?;
        let m = evaluate_case("ffi", &p, &g, AvdMode::Max).status()?;
        *out = CosegMetrics { recall: m.recall, precision: m.precision, dice: m.dice, volumetric_similarity: m.vs, avd: m.avd.unwrap_or(f64::NAN) };
        Ok(())
    })
}
