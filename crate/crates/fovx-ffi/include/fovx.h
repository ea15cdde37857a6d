#ifndef FOVX_H
#define FOVX_H

/* Generated by cbindgen from fovx-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

#define FOVX_OK 0

#define FOVX_ERR_IO 1

#define FOVX_ERR_CONFIG 2

#define FOVX_ERR_DATA 3

#define FOVX_ERR_ARGUMENT 4

/**
 * Opaque handle to a loaded model bundle.
 */
typedef struct FovxBundle FovxBundle;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent failure on this thread. The pointer
 * stays valid until the next fovx call on the same thread.
 */
const char *fovx_last_error(void);

/**
 * Library version as a static string.
 */
const char *fovx_version(void);

/**
 * Load a trained bundle directory. On success writes the handle through
 * `out` and returns FOVX_OK; the handle must be released with
 * `fovx_bundle_free`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
int fovx_bundle_load(const char *path, struct FovxBundle **out);

/**
 * Release a bundle handle. Null is a no-op.
 *
 * # Safety
 * `bundle` must be a handle from `fovx_bundle_load`, released at most once.
 */
void fovx_bundle_free(struct FovxBundle *bundle);

/**
 * Number of generator networks in the bundle (always 4 for a valid bundle).
 *
 * # Safety
 * `bundle` must be a live handle.
 */
int fovx_bundle_generator_count(const struct FovxBundle *bundle);

/**
 * Impute the missing slices of one study, file to file.
 *
 * `affine_path` may be null for an identity DWI->T1 registration. The
 * imputed study is written to `out_dwi_path`; the gradient table is
 * unchanged, so no bval/bvec outputs are produced.
 *
 * # Safety
 * `bundle` must be a live handle; all path arguments follow `fovx_bundle_load`.
 */
int fovx_impute_files(const struct FovxBundle *bundle,
                      const char *dwi_path,
                      const char *bval_path,
                      const char *bvec_path,
                      const char *t1_path,
                      const char *affine_path,
                      const char *out_dwi_path);

/**
 * Estimate the missing-slab thickness of a study against a binary brain
 * mask. Writes the thickness in mm through `out_mm` and the side through
 * `out_side` (0 none, 1 top, 2 bottom).
 *
 * # Safety
 * Path arguments follow `fovx_bundle_load`; `out_mm` and `out_side` must be
 * valid pointers.
 */
int fovx_estimate_cutoff(const char *dwi_path,
                         const char *brain_mask_path,
                         double *out_mm,
                         int *out_side);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FOVX_H */
