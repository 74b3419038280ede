#ifndef DROPATTN_H
#define DROPATTN_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Rescale mode applied after masking.
 */
typedef enum {
  DaRescale_Normalized = 0,
  DaRescale_Inverse = 1,
} DaRescale;

/**
 * Status codes returned by every FFI entry point.
 */
typedef enum {
  DaStatus_Ok = 0,
  DaStatus_NullPointer = 1,
  DaStatus_InvalidArgument = 2,
  DaStatus_NumericError = 3,
} DaStatus;

/**
 * DropAttention variant selector.
 */
typedef enum {
  DaVariant_Column = 0,
  DaVariant_Element = 1,
} DaVariant;

/**
 * Opaque deterministic RNG stream.
 */
typedef struct DaRng DaRng;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *dropattn_version(void);

/**
 * Create an RNG stream from a seed. Identical seeds replay identical masks.
 *
 * # Safety
 * `out` must be a valid pointer to a `DaRng*` slot.
 */
DaStatus dropattn_rng_new(uint64_t seed, DaRng **out);

/**
 * Destroy an RNG handle. Passing NULL is a no-op.
 *
 * # Safety
 * `rng` must be NULL or a handle returned by `dropattn_rng_new` that has
 * not been freed already.
 */
void dropattn_rng_free(DaRng *rng);

/**
 * Sample a len×len keep/drop mask (1 = keep) for the given variant into
 * `out_mask`, which must hold len·len bytes.
 *
 * # Safety
 * `rng` must be a live handle and `out_mask` must point to len·len
 * writable bytes.
 */
DaStatus dropattn_mask_sample(DaRng *rng,
                              uintptr_t len,
                              DaVariant variant,
                              float p,
                              uintptr_t w,
                              uint8_t *out_mask);

/**
 * Apply DropAttention to a row-stochastic len×len matrix. With
 * `training = false` the input is copied through unchanged, matching
 * inference pass-through.
 *
 * # Safety
 * `rng` must be a live handle; `lambda` and `out` must each point to
 * len·len readable/writable floats.
 */
DaStatus dropattn_apply(DaRng *rng,
                        const float *lambda,
                        uintptr_t len,
                        DaVariant variant,
                        float p,
                        uintptr_t w,
                        DaRescale rescale,
                        bool training,
                        float *out);

/**
 * Shannon entropy of one attention row (natural log, 0·ln 0 = 0).
 *
 * # Safety
 * `row` must point to `len` readable floats and `out` to a writable double.
 */
DaStatus dropattn_entropy(const float *row, uintptr_t len, double *out);

/**
 * Head-overlap (Div) score over a heads×len row-major matrix of per-head
 * attention rows for one query.
 *
 * # Safety
 * `rows` must point to heads·len readable floats and `out` to a writable
 * double.
 */
DaStatus dropattn_div(const float *rows, uintptr_t heads, uintptr_t len, double *out);

/**
 * Mean pairwise cosine similarity (Disagreement) over a heads×len matrix.
 *
 * # Safety
 * `rows` must point to heads·len readable floats and `out` to a writable
 * double.
 */
DaStatus dropattn_disagreement(const float *rows, uintptr_t heads, uintptr_t len, double *out);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* DROPATTN_H */
