#ifndef CCSD_H
#define CCSD_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum CcsdStatus {
  CCSD_STATUS_OK = 0,
  CCSD_STATUS_NULL_POINTER = 1,
  CCSD_STATUS_INVALID_ARGUMENT = 2,
  CCSD_STATUS_CONFIG = 3,
  CCSD_STATUS_IO = 4,
  CCSD_STATUS_FORMAT = 5,
  CCSD_STATUS_INCOMPATIBLE = 6,
  CCSD_STATUS_BUFFER_TOO_SMALL = 7,
  CCSD_STATUS_RUNTIME = 8,
  CCSD_STATUS_PANIC = 9,
} CcsdStatus;

/**
 * Training configuration handle.
 */
typedef struct CcsdConfig CcsdConfig;

/**
 * Network handle (single precision).
 */
typedef struct CcsdModel CcsdModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *ccsd_version(void);

/**
 * Message of the last failed call on this thread, or NULL. Valid until the
 * next call into the library from the same thread.
 */
const char *ccsd_last_error_message(void);

/**
 * Default configuration.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum CcsdStatus ccsd_config_new(struct CcsdConfig **out);

/**
 * Defaults overlaid with a `key = value` config file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CcsdStatus ccsd_config_load(const char *path, struct CcsdConfig **out);

/**
 * Sets one dotted key.
 *
 * # Safety
 * `cfg` must come from this library; `key` and `value` must be NUL-terminated.
 */
enum CcsdStatus ccsd_config_set(struct CcsdConfig *cfg, const char *key, const char *value);

/**
 * Copies the value of `key` into `buf` (NUL-terminated). `needed` receives
 * the required size including the terminator; when `cap` is too small the
 * call returns `BufferTooSmall` and leaves `buf` untouched.
 *
 * # Safety
 * `buf` must hold `cap` bytes (or be NULL with `cap == 0`); `needed` must be valid.
 */
enum CcsdStatus ccsd_config_get(const struct CcsdConfig *cfg,
                                const char *key,
                                char *buf,
                                size_t cap,
                                size_t *needed);

/**
 * # Safety
 * `cfg` must come from this library or be NULL; it must not be used afterwards.
 */
void ccsd_config_free(struct CcsdConfig *cfg);

/**
 * Freshly initialized network for the `net.*` keys of `cfg`.
 *
 * # Safety
 * `cfg` must come from this library and `out` must be valid.
 */
enum CcsdStatus ccsd_model_new(const struct CcsdConfig *cfg, uint64_t seed, struct CcsdModel **out);

/**
 * Loads a checkpoint written by training (the `.meta` sidecar must sit next to it).
 *
 * # Safety
 * `path` must be NUL-terminated and `out` valid.
 */
enum CcsdStatus ccsd_model_load(const char *path, struct CcsdModel **out);

/**
 * Number of modalities and voxels per modality volume.
 *
 * # Safety
 * `model` must come from this library; the out pointers must be valid.
 */
enum CcsdStatus ccsd_model_shape(const struct CcsdModel *model,
                                 size_t *n_modalities,
                                 size_t *voxels);

/**
 * Segments one case. `volumes` holds `n_modalities * voxels` values,
 * modality-major, each volume in depth/height/width order. Modalities whose
 * bit is clear in `combo_bits` are treated as missing. `labels` receives
 * `voxels` class indices.
 *
 * # Safety
 * `volumes` and `labels` must hold `volumes_len` and `labels_len` elements.
 */
enum CcsdStatus ccsd_model_segment(const struct CcsdModel *model,
                                   const float *volumes,
                                   size_t volumes_len,
                                   uint32_t combo_bits,
                                   uint8_t *labels,
                                   size_t labels_len);

/**
 * # Safety
 * `model` must come from this library or be NULL; it must not be used afterwards.
 */
void ccsd_model_free(struct CcsdModel *model);

/**
 * Trains on generated phantoms and writes the run directory `out_dir`
 * (record, log, checkpoint, table and curve files). `mean_dice` receives the
 * test mean Dice over every combination and region.
 *
 * # Safety
 * `cfg` must come from this library, `out_dir` be NUL-terminated, `mean_dice` valid.
 */
enum CcsdStatus ccsd_train(const struct CcsdConfig *cfg, const char *out_dir, double *mean_dice);

/**
 * Writes the bitmasks of every non-empty combination of `n` modalities in
 * canonical order (size, then bitmask). `count` receives `2^n - 1`.
 *
 * # Safety
 * `bits` must hold `cap` elements (or be NULL with `cap == 0`); `count` must be valid.
 */
enum CcsdStatus ccsd_enumerate_combos(size_t n, uint32_t *bits, size_t cap, size_t *count);

/**
 * Dice overlap of two binary masks (non-zero bytes are foreground).
 *
 * # Safety
 * `pred` and `gt` must hold `len` bytes; `out` must be valid.
 */
enum CcsdStatus ccsd_dice(const uint8_t *pred, const uint8_t *gt, size_t len, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CCSD_H */
