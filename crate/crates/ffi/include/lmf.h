#ifndef LMF_H
#define LMF_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LmfStatus {
  LMF_STATUS_OK = 0,
  LMF_STATUS_NULL_POINTER = 1,
  LMF_STATUS_INVALID_ARGUMENT = 2,
  LMF_STATUS_SHAPE = 3,
  LMF_STATUS_PARSE = 4,
  LMF_STATUS_CHECKSUM = 5,
  LMF_STATUS_UNSUPPORTED_VERSION = 6,
  LMF_STATUS_INVALID_MODEL = 7,
  LMF_STATUS_IO = 8,
  LMF_STATUS_NUMERIC = 9,
  LMF_STATUS_OVERFLOW = 10,
  LMF_STATUS_PANIC = 11,
} LmfStatus;

typedef enum LmfDecoderKind {
  LMF_DECODER_KIND_VANILLA = 0,
  LMF_DECODER_KIND_C2F = 1,
  LMF_DECODER_KIND_LMF = 2,
} LmfDecoderKind;

typedef enum LmfDimsPreset {
  LMF_DIMS_PRESET_LIIF = 0,
  LMF_DIMS_PRESET_LM_LIIF = 1,
} LmfDimsPreset;

typedef struct LmfImage LmfImage;

typedef struct LmfModel LmfModel;

typedef struct LmfTable LmfTable;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *lmf_last_error_message(void);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum LmfStatus lmf_model_load(const char *path, struct LmfModel **out);

/**
 * # Safety
 * `model` must be NULL or a handle from [`lmf_model_load`].
 */
void lmf_model_free(struct LmfModel *model);

/**
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum LmfStatus lmf_model_kind(const struct LmfModel *model, enum LmfDecoderKind *out);

/**
 * Copy `height * width * channels` interleaved values into a new image.
 *
 * # Safety
 * `data` must point to that many doubles and `out` be writable.
 */
enum LmfStatus lmf_image_new(size_t height,
                             size_t width,
                             size_t channels,
                             const double *data,
                             struct LmfImage **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum LmfStatus lmf_image_read_pnm(const char *path, struct LmfImage **out);

/**
 * Values are clamped to [0, 1] and written with 8 bits per sample.
 *
 * # Safety
 * `image` must be a live handle and `path` a NUL-terminated string.
 */
enum LmfStatus lmf_image_write_pnm(const struct LmfImage *image, const char *path);

/**
 * Any of the output pointers may be NULL.
 *
 * # Safety
 * `image` must be a live handle.
 */
enum LmfStatus lmf_image_dims(const struct LmfImage *image,
                              size_t *height,
                              size_t *width,
                              size_t *channels);

/**
 * Borrowed pointer to the interleaved row-major values, or NULL.
 *
 * # Safety
 * `image` must be NULL or a live handle; the pointer dies with the image.
 */
const double *lmf_image_data(const struct LmfImage *image);

/**
 * # Safety
 * `image` must be NULL or a handle from this library.
 */
void lmf_image_free(struct LmfImage *image);

/**
 * Full render at scale `scale`. `decoder_macs` (nullable) receives the
 * latent plus render linear-layer multiply-accumulates.
 *
 * # Safety
 * Handles must be live, `out` writable.
 */
enum LmfStatus lmf_upsample(const struct LmfModel *model,
                            const struct LmfImage *image,
                            double scale,
                            struct LmfImage **out,
                            uint64_t *decoder_macs);

/**
 * # Safety
 * `path` must be a NUL-terminated string and `out` writable.
 */
enum LmfStatus lmf_table_load(const char *path, struct LmfTable **out);

/**
 * # Safety
 * `table` must be NULL or a handle from [`lmf_table_load`].
 */
void lmf_table_free(struct LmfTable *table);

/**
 * Multi-scale render driven by `table`. Both counters are nullable.
 *
 * # Safety
 * Handles must be live, `out` writable.
 */
enum LmfStatus lmf_cmsr(const struct LmfModel *model,
                        const struct LmfTable *table,
                        const struct LmfImage *image,
                        double scale,
                        struct LmfImage **out,
                        uint64_t *rendered_pixels,
                        uint64_t *decoder_macs);

/**
 * Closed-form decoder MACs for an `h x w` input at scale `scale`.
 * `preset` is an [`LmfDimsPreset`] value.
 *
 * # Safety
 * `out` must be writable.
 */
enum LmfStatus lmf_macs(int32_t preset, size_t h, size_t w, double scale, uint64_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LMF_H */
