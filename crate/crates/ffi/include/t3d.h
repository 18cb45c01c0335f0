#ifndef T3D_H
#define T3D_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes. Values 2 to 5 match the command-line exit codes.
typedef enum T3dStatus {
  T3D_STATUS_OK = 0,
  T3D_STATUS_INTERNAL = 1,
  // Invalid config, spec, prompt set or argument value.
  T3D_STATUS_CONFIG = 2,
  // File missing, unreadable or malformed.
  T3D_STATUS_IO = 3,
  // Training produced a non-finite loss.
  T3D_STATUS_DIVERGED = 4,
  // Checkpoint does not match the config.
  T3D_STATUS_MISMATCH = 5,
  // Null pointer, bad UTF-8 or a too-small output buffer.
  T3D_STATUS_INVALID_ARGUMENT = 6,
} T3dStatus;

// Parsed run configuration.
typedef struct T3dConfig T3dConfig;

// Trained encoders plus the vocabulary and preprocessing of their config.
typedef struct T3dModel T3dModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *t3d_version(void);

// Message of the last failed call on this thread, or null after a success.
// The pointer stays valid until the next call on the same thread.
const char *t3d_last_error_message(void);

// Loads a JSON run config and applies `n_overrides` `key=value` strings.
//
// # Safety
// `path` must be a NUL-terminated string; `overrides` must point to
// `n_overrides` NUL-terminated strings (or be null when zero); `out` must be
// writable. The handle is freed with [`t3d_config_free`].
enum T3dStatus t3d_config_load(const char *path,
                               const char *const *overrides,
                               size_t n_overrides,
                               struct T3dConfig **out);

// # Safety
// `config` must come from [`t3d_config_load`] and not be used afterwards.
void t3d_config_free(struct T3dConfig *config);

// Writes `n` synthetic phantoms to `out_dir`. `spec_path` may be null for
// the built-in spec; `seed` is used only when `has_seed` is nonzero.
//
// # Safety
// String arguments must be NUL-terminated or, for `spec_path`, null.
enum T3dStatus t3d_synth(const char *spec_path,
                         const char *out_dir,
                         size_t n,
                         uint64_t seed,
                         int32_t has_seed);

// Pretrains under `config`, optionally resuming from `resume_path` (may be
// null) and stopping once `stop_after` total steps have run (0 for no limit).
// `steps_out` (may be null) receives the final step count.
//
// # Safety
// `config` must be a live handle; string arguments NUL-terminated or null.
enum T3dStatus t3d_pretrain(const struct T3dConfig *config,
                            const char *resume_path,
                            uint64_t stop_after,
                            uint64_t *steps_out);

// Evaluates `checkpoint` on `task` (`zeroshot`, `retrieval` or `probe`) and
// writes the JSON report to `report_path`.
//
// # Safety
// `config` must be a live handle; string arguments NUL-terminated.
enum T3dStatus t3d_eval(const struct T3dConfig *config,
                        const char *task,
                        const char *checkpoint,
                        const char *report_path);

// Loads the encoders from `checkpoint`, checked against `config`, together
// with the vocabulary of the config's corpus.
//
// # Safety
// `config` must be a live handle, `checkpoint` NUL-terminated and `out`
// writable. The handle is freed with [`t3d_model_free`].
enum T3dStatus t3d_model_load(const struct T3dConfig *config,
                              const char *checkpoint,
                              struct T3dModel **out);

// # Safety
// `model` must come from [`t3d_model_load`] and not be used afterwards.
void t3d_model_free(struct T3dModel *model);

// Width of the shared embedding space, or 0 for a null handle.
//
// # Safety
// `model` must be a live handle or null.
size_t t3d_model_embedding_dim(const struct T3dModel *model);

// Writes the unit-norm report embedding of `text` into `out[0..dim]`.
//
// # Safety
// `model` must be a live handle, `text` NUL-terminated and `out` valid for
// `len` doubles.
enum T3dStatus t3d_embed_text(const struct T3dModel *model,
                              const char *text,
                              double *out,
                              size_t len);

// Reads a volume file, applies the config's preprocessing and writes its
// unit-norm embedding into `out[0..dim]`.
//
// # Safety
// `model` must be a live handle, `volume_path` NUL-terminated and `out`
// valid for `len` doubles.
enum T3dStatus t3d_embed_volume(const struct T3dModel *model,
                                const char *volume_path,
                                double *out,
                                size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* T3D_H */
