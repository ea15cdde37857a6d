//! C ABI for the fovx library: opaque handles, integer status codes, and a
//! per-thread last-error message. All paths are NUL-terminated UTF-8.
//!
//! Status codes mirror the CLI exit codes: 0 success, 1 I/O failure,
//! 2 configuration error, 3 data/format error, 4 invalid argument (null
//! pointer or non-UTF-8 string).

use std::cell::RefCell;
use std::ffi::{c_char, c_double, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use fovx_core::dwi::{
    read_affine_text, read_gradient_table, read_nifti, write_gradient_table, write_nifti_4d,
    IDENTITY_AFFINE,
};
use fovx_core::fov::{compute_acquired_mask, estimate_cutoff_thickness, CutSide, Mask3D};
use fovx_core::model::{impute_study, load_bundle, ModelBundle};
use fovx_core::FovxError;

pub const FOVX_OK: c_int = 0;
pub const FOVX_ERR_IO: c_int = 1;
pub const FOVX_ERR_CONFIG: c_int = 2;
pub const FOVX_ERR_DATA: c_int = 3;
pub const FOVX_ERR_ARGUMENT: c_int = 4;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(sanitized).unwrap());
}

fn code_of(e: &FovxError) -> c_int {
    e.exit_code() as c_int
}

/// Opaque handle to a loaded model bundle.
pub struct FovxBundle {
    inner: ModelBundle,
}

unsafe fn path_arg<'a>(ptr: *const c_char) -> Result<&'a Path, c_int> {
    if ptr.is_null() {
        set_error("null path argument");
        return Err(FOVX_ERR_ARGUMENT);
    }
    match unsafe { CStr::from_ptr(ptr) }.to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => {
            set_error("path is not valid UTF-8");
            Err(FOVX_ERR_ARGUMENT)
        }
    }
}

fn guard<F: FnOnce() -> c_int>(f: F) -> c_int {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(code) => code,
        Err(_) => {
            set_error("internal panic");
            FOVX_ERR_IO
        }
    }
}

/// Message describing the most recent failure on this thread. The pointer
/// stays valid until the next fovx call on the same thread.
#[no_mangle]
pub extern "C" fn fovx_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn fovx_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Load a trained bundle directory. On success writes the handle through
/// `out` and returns FOVX_OK; the handle must be released with
/// `fovx_bundle_free`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fovx_bundle_load(
    path: *const c_char,
    out: *mut *mut FovxBundle,
) -> c_int {
    guard(|| {
        if out.is_null() {
            set_error("null output handle");
            return FOVX_ERR_ARGUMENT;
        }
        let path = match unsafe { path_arg(path) } {
            Ok(p) => p,
            Err(c) => return c,
        };
        match load_bundle(path) {
            Ok(inner) => {
                unsafe { *out = Box::into_raw(Box::new(FovxBundle { inner })) };
                FOVX_OK
            }
            Err(e) => {
                set_error(&e.to_string());
                code_of(&e)
            }
        }
    })
}

/// Release a bundle handle. Null is a no-op.
///
/// # Safety
/// `bundle` must be a handle from `fovx_bundle_load`, released at most once.
#[no_mangle]
pub unsafe extern "C" fn fovx_bundle_free(bundle: *mut FovxBundle) {
    if !bundle.is_null() {
        drop(unsafe { Box::from_raw(bundle) });
    }
}

/// Number of generator networks in the bundle (always 4 for a valid bundle).
///
/// # Safety
/// `bundle` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn fovx_bundle_generator_count(bundle: *const FovxBundle) -> c_int {
    if bundle.is_null() {
        set_error("null bundle handle");
        return -1;
    }
    unsafe { &*bundle }.inner.generators.len() as c_int
}

/// Impute the missing slices of one study, file to file.
///
/// `affine_path` may be null for an identity DWI->T1 registration. The
/// imputed study is written to `out_dwi_path`; the gradient table is
/// unchanged, so no bval/bvec outputs are produced.
///
/// # Safety
/// `bundle` must be a live handle; all path arguments follow `fovx_bundle_load`.
#[no_mangle]
pub unsafe extern "C" fn fovx_impute_files(
    bundle: *const FovxBundle,
    dwi_path: *const c_char,
    bval_path: *const c_char,
    bvec_path: *const c_char,
    t1_path: *const c_char,
    affine_path: *const c_char,
    out_dwi_path: *const c_char,
) -> c_int {
    guard(|| {
        if bundle.is_null() {
            set_error("null bundle handle");
            return FOVX_ERR_ARGUMENT;
        }
        let bundle = unsafe { &*bundle };
        let (dwi, bval, bvec, t1, out) = match (|| {
            Ok::<_, c_int>((
                unsafe { path_arg(dwi_path) }?,
                unsafe { path_arg(bval_path) }?,
                unsafe { path_arg(bvec_path) }?,
                unsafe { path_arg(t1_path) }?,
                unsafe { path_arg(out_dwi_path) }?,
            ))
        })() {
            Ok(t) => t,
            Err(c) => return c,
        };
        let result = (|| {
            let study = read_nifti(dwi)?.into_4d()?;
            let gradient = read_gradient_table(bval, bvec, 50.0)?;
            let study = study.with_gradient(gradient)?;
            let t1 = read_nifti(t1)?.into_3d()?;
            let affine = if affine_path.is_null() {
                IDENTITY_AFFINE
            } else {
                match unsafe { path_arg(affine_path) } {
                    Ok(p) => read_affine_text(p)?,
                    Err(_) => return Err(FovxError::Config("invalid affine path".into())),
                }
            };
            let imputed = impute_study(&study, &t1, &affine, &bundle.inner)?;
            write_nifti_4d(&imputed, out)?;
            write_gradient_table(
                &imputed.gradient,
                out.with_extension("").with_extension("bval"),
                out.with_extension("").with_extension("bvec"),
            )?;
            Ok(())
        })();
        match result {
            Ok(()) => FOVX_OK,
            Err(e) => {
                set_error(&e.to_string());
                code_of(&e)
            }
        }
    })
}

/// Estimate the missing-slab thickness of a study against a binary brain
/// mask. Writes the thickness in mm through `out_mm` and the side through
/// `out_side` (0 none, 1 top, 2 bottom).
///
/// # Safety
/// Path arguments follow `fovx_bundle_load`; `out_mm` and `out_side` must be
/// valid pointers.
#[no_mangle]
pub unsafe extern "C" fn fovx_estimate_cutoff(
    dwi_path: *const c_char,
    brain_mask_path: *const c_char,
    out_mm: *mut c_double,
    out_side: *mut c_int,
) -> c_int {
    guard(|| {
        if out_mm.is_null() || out_side.is_null() {
            set_error("null output pointer");
            return FOVX_ERR_ARGUMENT;
        }
        let (dwi, mask) = match (|| {
            Ok::<_, c_int>((unsafe { path_arg(dwi_path) }?, unsafe { path_arg(brain_mask_path) }?))
        })() {
            Ok(t) => t,
            Err(c) => return c,
        };
        let result = (|| {
            let study = read_nifti(dwi)?.into_4d()?;
            let brain = Mask3D::from_volume(&read_nifti(mask)?.into_3d()?)?;
            let acquired = compute_acquired_mask(&study);
            estimate_cutoff_thickness(&acquired, &brain)
        })();
        match result {
            Ok((mm, side)) => {
                unsafe {
                    *out_mm = mm;
                    *out_side = match side {
                        CutSide::None => 0,
                        CutSide::Top => 1,
                        CutSide::Bottom => 2,
                    };
                }
                FOVX_OK
            }
            Err(e) => {
                set_error(&e.to_string());
                code_of(&e)
            }
        }
    })
}
