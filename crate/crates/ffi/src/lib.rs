//! C ABI for the graphsr library.
//!
//! Conventions:
//! - every function that can fail returns a [`GsrStatus`]; `GSR_STATUS_OK`
//!   is zero
//! - on failure a human-readable message is stored per thread and can be
//!   read with [`gsr_last_error_message`]
//! - solutions are returned as opaque handles that must be released with
//!   [`gsr_solution_free`]
//! - image buffers are row-major; multi-channel guide buffers are planar
//!   (channel-major: index `c*h*w + i*w + j`)

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use graphsr::image::bicubic_upsample;
use graphsr::solver::{default_max_iter, forward_solve, DEFAULT_REL_TOL};
use graphsr::{
    build_box_downsampler, colour_features, compute_affinities, layer_gradcheck, net_forward,
    AffinityScale, ConvNetParams, Error, GuideImage, SourceImage,
};

/// Status codes returned by every fallible entry point.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum GsrStatus {
    /// Success.
    GsrStatusOk = 0,
    /// A required pointer argument was null.
    GsrStatusNullPointer = 1,
    /// An argument was out of range or inconsistent (sizes, scale, lambda).
    GsrStatusInvalidArgument = 2,
    /// A file could not be read or parsed.
    GsrStatusIo = 3,
    /// The solver broke down or produced non-finite values.
    GsrStatusNumerical = 4,
}

/// Opaque result of a solve: the high-resolution depth map plus solver
/// statistics. Free with [`gsr_solution_free`].
pub struct GsrSolution {
    height: usize,
    width: usize,
    data: Vec<f64>,
    valid: Vec<u8>,
    iterations: usize,
    residual: f64,
    converged: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().map(|c| if c == '\0' { ' ' } else { c }).collect();
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(sanitized).unwrap());
}

fn status_for(err: &Error) -> GsrStatus {
    match err {
        Error::Io(_) | Error::MalformedHeader(_) | Error::TruncatedPayload { .. }
        | Error::UnsupportedMaxval(_) | Error::InvalidParamsFile(_) => GsrStatus::GsrStatusIo,
        Error::NumericalBreakdown(_) | Error::NonFinite(_) | Error::Divergence => {
            GsrStatus::GsrStatusNumerical
        }
        _ => GsrStatus::GsrStatusInvalidArgument,
    }
}

fn fail(err: Error) -> GsrStatus {
    let st = status_for(&err);
    set_error(&err.to_string());
    st
}

/// Runs `f`, converting errors and panics into status codes.
fn guarded(f: impl FnOnce() -> Result<GsrStatus, Error>) -> GsrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(st)) => st,
        Ok(Err(e)) => fail(e),
        Err(_) => {
            set_error("internal panic");
            GsrStatus::GsrStatusNumerical
        }
    }
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn gsr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message describing the most recent error on the calling thread. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn gsr_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Solves guided depth super-resolution.
///
/// - `guide`: planar `channels x guide_height x guide_width` buffer,
///   values expected in [0, 1]
/// - `source`: `source_height x source_width` low-resolution depth
/// - `source_mask`: optional (may be null) `source_height x source_width`
///   buffer, zero marking invalid source pixels
/// - `scale`: upsampling factor; guide dimensions must equal source
///   dimensions times `scale`
/// - `rel_tol <= 0` and `max_iter == 0` select the library defaults
/// - `params_path`: optional path to a trained feature-network parameter
///   file; null selects hand-crafted colour features
/// - `out`: receives a handle that must be freed with [`gsr_solution_free`]
///
/// # Safety
/// Pointers must be null or valid for the stated extents; `params_path`
/// must be null or a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn gsr_solve_depth(
    guide: *const f64,
    channels: usize,
    guide_height: usize,
    guide_width: usize,
    source: *const f64,
    source_mask: *const u8,
    source_height: usize,
    source_width: usize,
    scale: usize,
    lambda: f64,
    rel_tol: f64,
    max_iter: usize,
    params_path: *const c_char,
    out: *mut *mut GsrSolution,
) -> GsrStatus {
    if guide.is_null() || source.is_null() || out.is_null() {
        set_error("null pointer argument");
        return GsrStatus::GsrStatusNullPointer;
    }
    let guide_buf = std::slice::from_raw_parts(guide, channels * guide_height * guide_width);
    let src_buf = std::slice::from_raw_parts(source, source_height * source_width);
    let mask_buf = if source_mask.is_null() {
        None
    } else {
        Some(std::slice::from_raw_parts(source_mask, source_height * source_width))
    };
    let params_path = if params_path.is_null() {
        None
    } else {
        match CStr::from_ptr(params_path).to_str() {
            Ok(s) => Some(s.to_owned()),
            Err(_) => {
                set_error("params_path is not valid UTF-8");
                return GsrStatus::GsrStatusInvalidArgument;
            }
        }
    };
    guarded(|| {
        let sol = solve_impl(
            guide_buf,
            channels,
            guide_height,
            guide_width,
            src_buf,
            mask_buf,
            source_height,
            source_width,
            scale,
            lambda,
            rel_tol,
            max_iter,
            params_path.as_deref(),
        )?;
        *out = Box::into_raw(Box::new(sol));
        Ok(GsrStatus::GsrStatusOk)
    })
}

#[allow(clippy::too_many_arguments)]
fn solve_impl(
    guide_buf: &[f64],
    channels: usize,
    guide_height: usize,
    guide_width: usize,
    src_buf: &[f64],
    mask_buf: Option<&[u8]>,
    source_height: usize,
    source_width: usize,
    scale: usize,
    lambda: f64,
    rel_tol: f64,
    max_iter: usize,
    params_path: Option<&str>,
) -> Result<GsrSolution, Error> {
    if scale == 0 {
        return Err(Error::InvalidArgument("scale must be positive".into()));
    }
    if guide_height != source_height * scale || guide_width != source_width * scale {
        return Err(Error::DimensionMismatch(format!(
            "guide {guide_height}x{guide_width} vs source {source_height}x{source_width} at scale {scale}"
        )));
    }
    let guide = GuideImage::new(guide_height, guide_width, channels, guide_buf.to_vec())?;
    let valid = match mask_buf {
        Some(m) => m.iter().map(|&v| v != 0).collect(),
        None => vec![true; source_height * source_width],
    };
    // force invalid entries to a finite placeholder so callers may pass
    // NaN under masked pixels
    let mut data = src_buf.to_vec();
    for (d, &ok) in data.iter_mut().zip(&valid) {
        if !ok {
            *d = 0.0;
        }
    }
    let source = SourceImage::new(source_height, source_width, data, valid)?;

    let s_up = bicubic_upsample(&source, scale)?;
    let (features, raw_mu) = match params_path {
        None => (colour_features(&guide, &s_up)?, 0.0),
        Some(p) => {
            let params = ConvNetParams::load(Path::new(p))?;
            let input = graphsr::features::assemble_input(&guide, &s_up)?;
            let (f, _) = net_forward(&params, &input)?;
            (f, params.raw_mu)
        }
    };
    let graph = compute_affinities(&features, AffinityScale::new(raw_mu))?;

    let mut tvalid = vec![false; guide_height * guide_width];
    for i in 0..guide_height {
        for j in 0..guide_width {
            tvalid[i * guide_width + j] = source.valid[(i / scale) * source_width + j / scale];
        }
    }
    let down = build_box_downsampler(guide_height, guide_width, scale, Some(&tvalid))?;
    let tol = if rel_tol > 0.0 { rel_tol } else { DEFAULT_REL_TOL };
    let iters = if max_iter > 0 { max_iter } else { default_max_iter(guide_height * guide_width) };
    let (y, report) = forward_solve(&graph, &down, &source, lambda, Some(&s_up), tol, iters)?;

    Ok(GsrSolution {
        height: y.height,
        width: y.width,
        data: y.data,
        valid: y.valid.iter().map(|&v| v as u8).collect(),
        iterations: report.iterations,
        residual: report.final_residual_norm,
        converged: report.converged,
    })
}

/// Height of the solved depth map, or 0 for a null handle.
#[no_mangle]
pub extern "C" fn gsr_solution_height(sol: *const GsrSolution) -> usize {
    unsafe { sol.as_ref() }.map_or(0, |s| s.height)
}

/// Width of the solved depth map, or 0 for a null handle.
#[no_mangle]
pub extern "C" fn gsr_solution_width(sol: *const GsrSolution) -> usize {
    unsafe { sol.as_ref() }.map_or(0, |s| s.width)
}

/// Number of conjugate-gradient iterations used.
#[no_mangle]
pub extern "C" fn gsr_solution_iterations(sol: *const GsrSolution) -> usize {
    unsafe { sol.as_ref() }.map_or(0, |s| s.iterations)
}

/// Final relative residual norm of the solve.
#[no_mangle]
pub extern "C" fn gsr_solution_residual(sol: *const GsrSolution) -> f64 {
    unsafe { sol.as_ref() }.map_or(f64::NAN, |s| s.residual)
}

/// Nonzero if the solver reached its tolerance within the iteration cap.
#[no_mangle]
pub extern "C" fn gsr_solution_converged(sol: *const GsrSolution) -> u8 {
    unsafe { sol.as_ref() }.map_or(0, |s| s.converged as u8)
}

/// Copies the depth map into `out` (`height * width` doubles, row-major).
///
/// # Safety
/// `out` must be valid for `height * width` doubles.
#[no_mangle]
pub unsafe extern "C" fn gsr_solution_copy_depth(
    sol: *const GsrSolution,
    out: *mut f64,
) -> GsrStatus {
    let Some(s) = sol.as_ref() else {
        set_error("null solution handle");
        return GsrStatus::GsrStatusNullPointer;
    };
    if out.is_null() {
        set_error("null output buffer");
        return GsrStatus::GsrStatusNullPointer;
    }
    std::slice::from_raw_parts_mut(out, s.data.len()).copy_from_slice(&s.data);
    GsrStatus::GsrStatusOk
}

/// Copies the validity mask into `out` (`height * width` bytes, nonzero =
/// valid).
///
/// # Safety
/// `out` must be valid for `height * width` bytes.
#[no_mangle]
pub unsafe extern "C" fn gsr_solution_copy_mask(
    sol: *const GsrSolution,
    out: *mut u8,
) -> GsrStatus {
    let Some(s) = sol.as_ref() else {
        set_error("null solution handle");
        return GsrStatus::GsrStatusNullPointer;
    };
    if out.is_null() {
        set_error("null output buffer");
        return GsrStatus::GsrStatusNullPointer;
    }
    std::slice::from_raw_parts_mut(out, s.valid.len()).copy_from_slice(&s.valid);
    GsrStatus::GsrStatusOk
}

/// Releases a solution handle. Null is a no-op.
#[no_mangle]
pub extern "C" fn gsr_solution_free(sol: *mut GsrSolution) {
    if !sol.is_null() {
        drop(unsafe { Box::from_raw(sol) });
    }
}

/// Runs the finite-difference gradient check on a random instance and
/// writes the worst relative error to `max_rel_err` (may be null).
/// Returns `GSR_STATUS_NUMERICAL` if the check exceeds `bound`.
///
/// # Safety
/// `max_rel_err` must be null or valid for one double.
#[no_mangle]
pub unsafe extern "C" fn gsr_gradcheck(
    seed: u64,
    height: usize,
    width: usize,
    scale: usize,
    lambda: f64,
    bound: f64,
    max_rel_err: *mut f64,
) -> GsrStatus {
    guarded(|| {
        let report = layer_gradcheck(seed, height, width, scale, lambda)?;
        let worst = report
            .max_rel_err_edges
            .max(report.max_rel_err_mu)
            .max(report.max_rel_err_source);
        if !max_rel_err.is_null() {
            *max_rel_err = worst;
        }
        if report.passes(bound) {
            Ok(GsrStatus::GsrStatusOk)
        } else {
            Err(Error::NumericalBreakdown(format!(
                "gradient check failed: max relative error {worst:.3e} > {bound:.3e}"
            )))
        }
    })
}
