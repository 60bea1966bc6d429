//! C ABI over `brepler_core`.
//!
//! Every function returns a [`BreplerStatus`]. On failure the message is kept
//! per thread and can be read with [`brepler_last_error`]. Handles are opaque
//! and owned by the caller; release them with the matching `_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use brepler_core::brep::{parse_brep, serialize_brep, BRepModel, Vec3};
use brepler_core::metrics::{is_success, match_primitives};
use brepler_core::modifier::{edit, EditOptions, ModifierParams};
use brepler_core::render::{BBox2D, Viewpoint};
use brepler_core::validity::{validity_report, ValidityReport};
use brepler_core::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BreplerStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Parse = 3,
    InvalidArgument = 4,
    Io = 5,
    Edit = 6,
    Truncated = 7,
    Panic = 99,
}

/// Opaque model handle.
pub struct BreplerModel {
    inner: BRepModel,
}

/// Opaque modifier-weights handle.
pub struct BreplerParams {
    inner: ModifierParams,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BreplerValidity {
    pub manifold: bool,
    pub closed: bool,
    pub self_intersection_free: bool,
    pub valid: bool,
}

impl From<&ValidityReport> for BreplerValidity {
    fn from(r: &ValidityReport) -> Self {
        Self {
            manifold: r.manifold,
            closed: r.closed,
            self_intersection_free: r.self_intersection_free,
            valid: r.valid,
        }
    }
}

/// Precision, recall and F1 per primitive type, faces then edges then vertices.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BreplerMatch {
    pub precision: [f64; 3],
    pub recall: [f64; 3],
    pub f1: [f64; 3],
    pub success: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> BreplerStatus {
    match e {
        Error::Syntax { .. } | Error::Reference(_) | Error::Invariant { .. } => BreplerStatus::Parse,
        Error::Io(_) => BreplerStatus::Io,
        Error::Truncated { .. } => BreplerStatus::Truncated,
        Error::Checkpoint(_) | Error::Dimension(_) | Error::Config(_) | Error::DegenerateExtent { .. } => {
            BreplerStatus::InvalidArgument
        }
        _ => BreplerStatus::Edit,
    }
}

struct Fail(BreplerStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> BreplerStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => BreplerStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("panic inside brepler".into());
            BreplerStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail(BreplerStatus::NullArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(BreplerStatus::InvalidUtf8, format!("{name} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, name: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| Fail(BreplerStatus::NullArgument, format!("{name} is null")))
}

fn out_arg<T>(p: *mut T, name: &str) -> Result<(), Fail> {
    if p.is_null() {
        return Err(Fail(BreplerStatus::NullArgument, format!("{name} is null")));
    }
    Ok(())
}

/// Last error message on this thread, or null. Valid until the next failing call.
#[no_mangle]
pub extern "C" fn brepler_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Parses `.brj` text into a new model handle.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn brepler_model_parse(text: *const c_char, out: *mut *mut BreplerModel) -> BreplerStatus {
    guard(|| {
        out_arg(out, "out")?;
        let model = parse_brep(str_arg(text, "text")?)?;
        *out = Box::into_raw(Box::new(BreplerModel { inner: model }));
        Ok(())
    })
}

/// Canonical `.brj` text; free it with [`brepler_string_free`].
///
/// # Safety
/// `model` must come from this library and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn brepler_model_serialize(model: *const BreplerModel, out: *mut *mut c_char) -> BreplerStatus {
    guard(|| {
        out_arg(out, "out")?;
        let m = ref_arg(model, "model")?;
        let text = CString::new(serialize_brep(&m.inner)).map_err(|e| Fail(BreplerStatus::Edit, e.to_string()))?;
        *out = text.into_raw();
        Ok(())
    })
}

/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn brepler_model_face_count(model: *const BreplerModel, out: *mut usize) -> BreplerStatus {
    guard(|| {
        out_arg(out, "out")?;
        *out = ref_arg(model, "model")?.inner.face_count();
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library (or be null) and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn brepler_model_free(model: *mut BreplerModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `s` must come from this library (or be null) and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn brepler_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// # Safety
/// `model` and `out` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn brepler_model_validity(model: *const BreplerModel, out: *mut BreplerValidity) -> BreplerStatus {
    guard(|| {
        out_arg(out, "out")?;
        *out = (&validity_report(&ref_arg(model, "model")?.inner)).into();
        Ok(())
    })
}

/// Chamfer-threshold matching of `pred` against `gt`.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn brepler_match(pred: *const BreplerModel, gt: *const BreplerModel, threshold: f64, out: *mut BreplerMatch) -> BreplerStatus {
    guard(|| {
        out_arg(out, "out")?;
        let (p, g) = (&ref_arg(pred, "pred")?.inner, &ref_arg(gt, "gt")?.inner);
        if !(threshold > 0.0 && threshold.is_finite()) {
            return Err(Fail(BreplerStatus::InvalidArgument, format!("threshold {threshold}")));
        }
        let m = match_primitives(p, g, threshold);
        let s = [m.faces, m.edges, m.vertices];
        *out = BreplerMatch {
            precision: s.map(|x| x.precision),
            recall: s.map(|x| x.recall),
            f1: s.map(|x| x.f1),
            success: is_success(p, g),
        };
        Ok(())
    })
}

/// Loads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn brepler_params_load(path: *const c_char, out: *mut *mut BreplerParams) -> BreplerStatus {
    guard(|| {
        out_arg(out, "out")?;
        let path = str_arg(path, "path")?;
        let file = std::fs::File::open(path).map_err(Error::from)?;
        let params = ModifierParams::read_checkpoint(file)?;
        *out = Box::into_raw(Box::new(BreplerParams { inner: params }));
        Ok(())
    })
}

/// # Safety
/// `params` must come from this library (or be null) and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn brepler_params_free(params: *mut BreplerParams) {
    if !params.is_null() {
        drop(Box::from_raw(params));
    }
}

/// Edits `model` as seen from `view_dir[3]` inside `bbox[4]`
/// (`x_min, y_min, x_max, y_max`, normalized) following `instruct`.
/// `report` may be null.
///
/// # Safety
/// Arrays must hold 3 and 4 doubles; other pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn brepler_edit(
    model: *const BreplerModel,
    params: *const BreplerParams,
    view_dir: *const f64,
    bbox: *const f64,
    instruct: *const c_char,
    out: *mut *mut BreplerModel,
    report: *mut BreplerValidity,
) -> BreplerStatus {
    guard(|| {
        out_arg(out, "out")?;
        let m = ref_arg(model, "model")?;
        let p = ref_arg(params, "params")?;
        let d = std::slice::from_raw_parts(ref_arg(view_dir, "view_dir")?, 3);
        let b = std::slice::from_raw_parts(ref_arg(bbox, "bbox")?, 4);
        let text = str_arg(instruct, "instruct")?;
        let view = Viewpoint::from_direction(Vec3::new(d[0], d[1], d[2]), 0)?;
        let bbox = BBox2D::new(b[0], b[1], b[2], b[3])?;
        let o = edit(&m.inner, &view, &bbox, text, &p.inner, &EditOptions::default())?;
        if !report.is_null() {
            *report = (&o.report).into();
        }
        *out = Box::into_raw(Box::new(BreplerModel { inner: o.model }));
        Ok(())
    })
}
