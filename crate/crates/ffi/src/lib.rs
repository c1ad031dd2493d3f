//! C ABI over the polarnet library.
//!
//! Every fallible function returns a `PnStatus`. On failure the message is
//! available from `pn_last_error` on the same thread until the next failing
//! call. Buffers are caller-owned; lengths are element counts.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use polarnet::data::metrics;
use polarnet::explain::{self, Target};
use polarnet::grid::PriorMatrix;
use polarnet::net::{projection_name, PolarNetModel};
use polarnet::polar::{self, CartesianImage, Laterality, PolarParams};
use polarnet::tensor::Tensor;
use polarnet::Error;

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    BufferTooSmall = 4,
    Data = 5,
    Numeric = 6,
    Panic = 7,
}

/// Opaque model handle.
pub struct PnModel {
    model: PolarNetModel,
    prior: Option<PriorMatrix>,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct PnModelInfo {
    pub branches: usize,
    pub theta: usize,
    pub r: usize,
    pub classes: usize,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct PnMetrics {
    pub acc: f64,
    pub auroc: f64,
    pub kappa: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Fail(PnStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Dimension(_) => PnStatus::Dimension,
            Error::Parameter(_) | Error::Config(_) => PnStatus::InvalidArgument,
            Error::NonFinite(_) | Error::Autodiff(_) => PnStatus::Numeric,
            _ => PnStatus::Data,
        };
        Fail(status, e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(PnStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PnStatus::Ok,
        Ok(Err(Fail(s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            PnStatus::Panic
        }
    }
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

fn need(have: usize, want: usize, what: &str) -> Result<(), Fail> {
    if have < want {
        return Err(Fail(PnStatus::BufferTooSmall, format!("{what} holds {have}, needs {want}")));
    }
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or NULL.
#[no_mangle]
pub extern "C" fn pn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Polar resampling of a single-channel row-major image in `[0, 1]`.
///
/// `laterality`: 0 unknown, 1 OD, 2 OS (mirrored before sampling).
/// `start_angle` is in radians. Writes `theta * r` values, rows are angles.
///
/// # Safety
/// `pixels` must hold `width * height` floats and `out` `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn pn_to_polar(
    pixels: *const f32,
    width: usize,
    height: usize,
    center_u: f64,
    center_v: f64,
    laterality: i32,
    theta: usize,
    r: usize,
    start_angle: f64,
    out: *mut f32,
    out_len: usize,
    out_radius: *mut f64,
) -> PnStatus {
    guard(|| {
        let lat = match laterality {
            0 => Laterality::Unknown,
            1 => Laterality::Od,
            2 => Laterality::Os,
            other => return Err(Fail(PnStatus::InvalidArgument, format!("laterality code {other}"))),
        };
        let px = slice(pixels, width * height, "pixels")?.to_vec();
        let img = CartesianImage::new(width, height, 1, px, (center_u, center_v), lat)?;
        let (img, _) = polar::normalize_laterality(&img);
        let params = PolarParams { theta_samples: theta, r_samples: r, start_angle, radius_override: None };
        let p = polar::to_polar(&img, &params)?;
        need(out_len, p.pixels.len(), "out")?;
        slice_mut(out, out_len, "out")?[..p.pixels.len()].copy_from_slice(&p.pixels);
        if !out_radius.is_null() {
            *out_radius = p.radius;
        }
        Ok(())
    })
}

/// Loads a checkpoint written by `polarnet train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn pn_model_load(path: *const c_char, out: *mut *mut PnModel) -> PnStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let p = CStr::from_ptr(path).to_str().map_err(|e| Fail(PnStatus::InvalidArgument, e.to_string()))?;
        let model = PolarNetModel::load(Path::new(p))?;
        *out = Box::into_raw(Box::new(PnModel { model, prior: None }));
        Ok(())
    })
}

/// Releases a handle. NULL is ignored.
///
/// # Safety
/// `model` must come from `pn_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn pn_model_free(model: *mut PnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn pn_model_info(model: *const PnModel, out: *mut PnModelInfo) -> PnStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let c = &m.model.config;
        *out = PnModelInfo { branches: c.branches, theta: c.input_size.0, r: c.input_size.1, classes: c.classes };
        Ok(())
    })
}

/// Sets the per-branch 4×2 region prior (`branches * 8` floats, quadrant
/// major, inner ring first). NULL clears it.
///
/// # Safety
/// `weights` must hold `len` floats.
#[no_mangle]
pub unsafe extern "C" fn pn_model_set_prior(model: *mut PnModel, weights: *const f32, len: usize) -> PnStatus {
    guard(|| {
        let m = model.as_mut().ok_or_else(|| null("model"))?;
        if weights.is_null() {
            m.prior = None;
            return Ok(());
        }
        let branches = m.model.config.branches;
        if len != branches * 8 {
            return Err(Fail(PnStatus::Dimension, format!("prior needs {} values, got {len}", branches * 8)));
        }
        let w = slice(weights, len, "weights")?;
        let mut projections = BTreeMap::new();
        for b in 0..branches {
            let mut mat = [[0.0f32; 2]; 4];
            for (q, row) in mat.iter_mut().enumerate() {
                row.copy_from_slice(&w[b * 8 + q * 2..b * 8 + q * 2 + 2]);
            }
            projections.insert(projection_name(&m.model.config, b), mat);
        }
        let prior = PriorMatrix { projections };
        prior.validate()?;
        m.prior = Some(prior);
        Ok(())
    })
}

fn split_inputs(m: &PnModel, inputs: &[f32], batch: usize) -> Result<Vec<Tensor>, Fail> {
    let c = &m.model.config;
    let (h, w) = c.input_size;
    let per = h * w * c.in_channels;
    (0..c.branches)
        .map(|b| {
            let mut data = Vec::with_capacity(batch * per);
            for n in 0..batch {
                let off = (n * c.branches + b) * per;
                data.extend_from_slice(&inputs[off..off + per]);
            }
            Tensor::new(vec![batch, c.in_channels, h, w], data).map_err(Fail::from)
        })
        .collect()
}

fn input_len(m: &PnModel, batch: usize) -> usize {
    let c = &m.model.config;
    batch * c.branches * c.in_channels * c.input_size.0 * c.input_size.1
}

/// Class probabilities for `batch` samples. `inputs` is laid out as
/// `[batch][branch][theta][r]`; `out` receives `batch * classes` values.
///
/// # Safety
/// Buffers must hold the stated number of floats.
#[no_mangle]
pub unsafe extern "C" fn pn_model_predict(
    model: *const PnModel,
    inputs: *const f32,
    batch: usize,
    out: *mut f32,
    out_len: usize,
) -> PnStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if batch == 0 {
            return Err(Fail(PnStatus::InvalidArgument, "batch is zero".into()));
        }
        let x = slice(inputs, input_len(m, batch), "inputs")?;
        let probs = m.model.predict(&split_inputs(m, x, batch)?, m.prior.as_ref())?;
        need(out_len, probs.numel(), "out")?;
        slice_mut(out, out_len, "out")?[..probs.numel()].copy_from_slice(probs.data());
        Ok(())
    })
}

/// Grad-CAM region importance averaged over the batch. `target` is a class
/// index, or -1 for each sample's predicted class. `out_matrices` receives
/// `branches * 8` values in branch order; `out_centers` (nullable) receives
/// one centre-disk value per branch.
///
/// # Safety
/// Buffers must hold the stated number of floats.
#[no_mangle]
pub unsafe extern "C" fn pn_model_explain(
    model: *const PnModel,
    inputs: *const f32,
    batch: usize,
    target: i32,
    out_matrices: *mut f32,
    out_len: usize,
    out_centers: *mut f32,
) -> PnStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if batch == 0 {
            return Err(Fail(PnStatus::InvalidArgument, "batch is zero".into()));
        }
        let target = match target {
            -1 => Target::Predicted,
            t if t >= 0 && (t as usize) < m.model.config.classes => Target::Class(t as usize),
            t => return Err(Fail(PnStatus::InvalidArgument, format!("target {t}"))),
        };
        let branches = m.model.config.branches;
        need(out_len, branches * 8, "out_matrices")?;
        let x = slice(inputs, input_len(m, batch), "inputs")?;
        let cams = explain::model_cams(&m.model, &split_inputs(m, x, batch)?, target, m.prior.as_ref())?;
        let per = (0..batch).map(|b| explain::sample_importance(&m.model, &cams, b, target)).collect::<polarnet::Result<Vec<_>>>()?;
        let agg = explain::aggregate(&per)?;
        let dst = slice_mut(out_matrices, out_len, "out_matrices")?;
        for b in 0..branches {
            let name = projection_name(&m.model.config, b);
            for q in 0..4 {
                dst[b * 8 + q * 2..b * 8 + q * 2 + 2].copy_from_slice(&agg.projections[&name][q]);
            }
            if !out_centers.is_null() {
                *out_centers.add(b) = agg.centers.get(&name).copied().unwrap_or(0.0);
            }
        }
        Ok(())
    })
}

/// Accuracy, AUROC and Cohen's kappa at threshold 0.5. Labels are 0 or 1,
/// scores are positive-class probabilities.
///
/// # Safety
/// `labels` and `scores` must hold `n` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn pn_metrics(labels: *const u8, scores: *const f64, n: usize, out: *mut PnMetrics) -> PnStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let y: Vec<usize> = slice(labels, n, "labels")?.iter().map(|&v| v as usize).collect();
        let s = slice(scores, n, "scores")?;
        let mm = metrics::metrics(&y, s)?;
        *out = PnMetrics { acc: mm.acc, auroc: mm.auroc, kappa: mm.kappa };
        Ok(())
    })
}
