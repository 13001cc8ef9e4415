#ifndef CDM_H
#define CDM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes shared by every entry point.
 */
typedef enum CdmStatus {
  CdmOk = 0,
  CdmErrIo = 1,
  CdmErrInvalid = 2,
  CdmErrOrder = 3,
  CdmErrNullArgument = 4,
} CdmStatus;

/**
 * Opaque handle to a loaded checkpoint.
 */
typedef struct CdmCheckpoint CdmCheckpoint;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the most recent error message on this thread into `buf` (NUL
 * terminated, truncated to `cap` bytes). Returns the full message length.
 *
 * # Safety
 * `buf` must point to `cap` writable bytes, or be null (length query).
 */
uintptr_t cdm_last_error(char *buf, uintptr_t cap);

/**
 * Load a checkpoint file into a new handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be a valid pointer.
 */
enum CdmStatus cdm_checkpoint_load(const char *path, struct CdmCheckpoint **out);

/**
 * Release a handle. Null is a no-op.
 *
 * # Safety
 * `handle` must have come from `cdm_checkpoint_load` and not be freed twice.
 */
void cdm_checkpoint_free(struct CdmCheckpoint *handle);

/**
 * Side length of the square images this checkpoint was trained on, or 0
 * for a null handle.
 *
 * # Safety
 * `handle` must be a live handle or null.
 */
uint32_t cdm_checkpoint_image_size(const struct CdmCheckpoint *handle);

/**
 * 1 if all three training stages are present, else 0.
 *
 * # Safety
 * `handle` must be a live handle or null.
 */
int32_t cdm_checkpoint_is_complete(const struct CdmCheckpoint *handle);

/**
 * Synthesize the two target modalities from the two source modalities.
 *
 * `source` holds T1 then T2, each `size*size` row-major floats in [0,1];
 * `out` receives T1c then T2f in the same layout. Deterministic in `seed`.
 *
 * # Safety
 * `source` and `out` must each point to `2*size*size` readable/writable
 * floats for the handle's image size.
 */
enum CdmStatus cdm_synthesize(const struct CdmCheckpoint *handle,
                              const float *source,
                              uint64_t seed,
                              float *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CDM_H */
