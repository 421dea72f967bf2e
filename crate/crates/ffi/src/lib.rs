//! C interface to the qckit library.
//!
//! Every fallible function returns a [`QcStatus`]; on failure the message is
//! available from [`qc_last_error`] on the same thread. Objects are opaque
//! handles created by `*_load` / `*_new` functions and released with the
//! matching `*_free`. Passing a null handle to `*_free` is a no-op.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::sync::Arc;

use qckit::compression::{Autoencoder, Checkpoint};
use qckit::data::FieldSeries;
use qckit::index_map::{build_index_map_bucketed, IndexMap, OpCounter};
use qckit::mesh::{uniform_grid, Mesh};
use qckit::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Config = 5,
    Shape = 6,
    UnsupportedMesh = 7,
    Training = 8,
    Internal = 9,
    Panic = 10,
}

/// Opaque point cloud.
pub struct QcMesh(Arc<Mesh>);

/// Opaque support map between two meshes.
pub struct QcMap(IndexMap);

/// Opaque time series of fields.
pub struct QcSeries(FieldSeries);

/// Opaque trained autoencoder.
pub struct QcModel(Autoencoder);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> QcStatus {
    match e {
        Error::Io(_) => QcStatus::Io,
        Error::Format(_) => QcStatus::Format,
        Error::Config(_) => QcStatus::Config,
        Error::Shape(_) => QcStatus::Shape,
        Error::UnsupportedMesh(_) => QcStatus::UnsupportedMesh,
        Error::Training(_) => QcStatus::Training,
        _ => QcStatus::Internal,
    }
}

fn fail(status: QcStatus, msg: impl Into<String>) -> QcStatus {
    set_error(msg.into());
    status
}

/// Runs `f`, turning library errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), QcStatus>) -> QcStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => QcStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(QcStatus::Panic, "panic inside qckit"),
    }
}

fn lib<T>(r: qckit::Result<T>) -> Result<T, QcStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, QcStatus> {
    if p.is_null() {
        return Err(fail(QcStatus::NullPointer, "path is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| fail(QcStatus::InvalidArgument, "path is not valid UTF-8"))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, QcStatus> {
    p.as_ref().ok_or_else(|| fail(QcStatus::NullPointer, format!("{what} handle is null")))
}

unsafe fn out_ptr<T>(p: *mut *mut T) -> Result<&'static mut *mut T, QcStatus> {
    p.as_mut().ok_or_else(|| fail(QcStatus::NullPointer, "output pointer is null"))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], QcStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(QcStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_out<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], QcStatus> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(fail(QcStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// Message of the most recent failure on this thread, or null. The pointer
/// stays valid until the next qckit call on this thread.
#[no_mangle]
pub extern "C" fn qc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn qc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn qc_mesh_load(path: *const c_char, out: *mut *mut QcMesh) -> QcStatus {
    guard(|| {
        let out = out_ptr(out)?;
        let mesh = lib(Mesh::load(path_arg(path)?))?;
        *out = Box::into_raw(Box::new(QcMesh(Arc::new(mesh))));
        Ok(())
    })
}

/// Uniform grid with `n_per_dim` points per axis on `[0, extent]^dim`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn qc_mesh_uniform_grid(
    dim: usize,
    n_per_dim: usize,
    extent: f64,
    out: *mut *mut QcMesh,
) -> QcStatus {
    guard(|| {
        let out = out_ptr(out)?;
        let mesh = lib(uniform_grid(dim, n_per_dim, extent))?;
        *out = Box::into_raw(Box::new(QcMesh(Arc::new(mesh))));
        Ok(())
    })
}

/// Number of points, or 0 for a null handle.
///
/// # Safety
/// `mesh` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn qc_mesh_len(mesh: *const QcMesh) -> usize {
    mesh.as_ref().map_or(0, |m| m.0.len())
}

/// Spatial dimension, or 0 for a null handle.
///
/// # Safety
/// `mesh` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn qc_mesh_dim(mesh: *const QcMesh) -> usize {
    mesh.as_ref().map_or(0, |m| m.0.dim())
}

/// # Safety
/// `mesh` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn qc_mesh_free(mesh: *mut QcMesh) {
    if !mesh.is_null() {
        drop(Box::from_raw(mesh));
    }
}

/// Support map of all input points within `alpha` of each output point.
///
/// # Safety
/// Handles must be live and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn qc_map_build(
    input: *const QcMesh,
    output: *const QcMesh,
    alpha: f64,
    out: *mut *mut QcMap,
) -> QcStatus {
    guard(|| {
        let out = out_ptr(out)?;
        let (i, o) = (handle(input, "input mesh")?, handle(output, "output mesh")?);
        let map = lib(build_index_map_bucketed(&i.0, &o.0, alpha, &OpCounter::new()))?;
        *out = Box::into_raw(Box::new(QcMap(map)));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn qc_map_load(path: *const c_char, out: *mut *mut QcMap) -> QcStatus {
    guard(|| {
        let out = out_ptr(out)?;
        let map = lib(IndexMap::load(path_arg(path)?))?;
        *out = Box::into_raw(Box::new(QcMap(map)));
        Ok(())
    })
}

/// # Safety
/// `map` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn qc_map_save(map: *const QcMap, path: *const c_char) -> QcStatus {
    guard(|| {
        let map = handle(map, "map")?;
        lib(map.0.save(path_arg(path)?))
    })
}

/// Total number of (output, input) pairs, or 0 for a null handle.
///
/// # Safety
/// `map` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn qc_map_nnz(map: *const QcMap) -> usize {
    map.as_ref().map_or(0, |m| m.0.nnz())
}

/// # Safety
/// `map` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn qc_map_free(map: *mut QcMap) {
    if !map.is_null() {
        drop(Box::from_raw(map));
    }
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn qc_series_load(path: *const c_char, out: *mut *mut QcSeries) -> QcStatus {
    guard(|| {
        let out = out_ptr(out)?;
        let s = lib(FieldSeries::load(path_arg(path)?))?;
        *out = Box::into_raw(Box::new(QcSeries(s)));
        Ok(())
    })
}

/// Number of time samples, or 0 for a null handle.
///
/// # Safety
/// `series` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn qc_series_samples(series: *const QcSeries) -> usize {
    series.as_ref().map_or(0, |s| s.0.samples())
}

/// Values per sample (channels times points), or 0 for a null handle.
///
/// # Safety
/// `series` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn qc_series_sample_len(series: *const QcSeries) -> usize {
    series.as_ref().map_or(0, |s| s.0.sample_len())
}

/// Copies sample `t` into `out`, which must hold exactly
/// `qc_series_sample_len` values.
///
/// # Safety
/// `series` must be a live handle and `out` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn qc_series_sample(series: *const QcSeries, t: usize, out: *mut f64, len: usize) -> QcStatus {
    guard(|| {
        let s = &handle(series, "series")?.0;
        if t >= s.samples() {
            return Err(fail(QcStatus::InvalidArgument, format!("sample {t} out of range for {}", s.samples())));
        }
        if len != s.sample_len() {
            return Err(fail(QcStatus::Shape, format!("buffer holds {len} values, sample has {}", s.sample_len())));
        }
        slice_out(out, len, "output buffer")?.copy_from_slice(s.sample(t));
        Ok(())
    })
}

/// # Safety
/// `series` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn qc_series_free(series: *mut QcSeries) {
    if !series.is_null() {
        drop(Box::from_raw(series));
    }
}

/// Loads a trained model from a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn qc_model_load(path: *const c_char, out: *mut *mut QcModel) -> QcStatus {
    guard(|| {
        let out = out_ptr(out)?;
        let ckpt = lib(Checkpoint::load(path_arg(path)?))?;
        let model = lib(ckpt.to_model(None))?;
        *out = Box::into_raw(Box::new(QcModel(model)));
        Ok(())
    })
}

/// Latent dimension, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn qc_model_latent_dim(model: *const QcModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.latent_dim())
}

/// Values per input sample (channels times mesh points), or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn qc_model_sample_len(model: *const QcModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.channels() * m.0.mesh().len())
}

/// Encodes one sample of `sample_len` values into `code_len` latent values.
///
/// # Safety
/// `model` must be a live handle; `sample` valid for `sample_len` reads and
/// `code` for `code_len` writes.
#[no_mangle]
pub unsafe extern "C" fn qc_model_encode(
    model: *const QcModel,
    sample: *const f64,
    sample_len: usize,
    code: *mut f64,
    code_len: usize,
) -> QcStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        if code_len != m.latent_dim() {
            return Err(fail(QcStatus::Shape, format!("code buffer holds {code_len} values, latent dimension is {}", m.latent_dim())));
        }
        let z = lib(m.encode(slice_arg(sample, sample_len, "sample")?))?;
        slice_out(code, code_len, "code buffer")?.copy_from_slice(&z);
        Ok(())
    })
}

/// Decodes `code_len` latent values into a sample of `sample_len` values.
///
/// # Safety
/// `model` must be a live handle; `code` valid for `code_len` reads and
/// `sample` for `sample_len` writes.
#[no_mangle]
pub unsafe extern "C" fn qc_model_decode(
    model: *const QcModel,
    code: *const f64,
    code_len: usize,
    sample: *mut f64,
    sample_len: usize,
) -> QcStatus {
    guard(|| {
        let m = &handle(model, "model")?.0;
        let want = m.channels() * m.mesh().len();
        if sample_len != want {
            return Err(fail(QcStatus::Shape, format!("sample buffer holds {sample_len} values, model produces {want}")));
        }
        let x = lib(m.decode(slice_arg(code, code_len, "code")?))?;
        slice_out(sample, sample_len, "sample buffer")?.copy_from_slice(&x);
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn qc_model_free(model: *mut QcModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
