/* C ABI for the rtfq switchable quantized network library. */

#ifndef RTFQ_H
#define RTFQ_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Outcome of a C API call. Anything other than `Ok` leaves a message in
// the thread-local error slot.
typedef enum RtfqStatus {
  // The call succeeded and all out-parameters were written.
  RTFQ_STATUS_OK = 0,
  // A required pointer argument was null.
  RTFQ_STATUS_NULL_POINTER = 1,
  // An argument violated a documented precondition.
  RTFQ_STATUS_INVALID_ARGUMENT = 2,
  // A structured file (dataset, checkpoint) failed to parse.
  RTFQ_STATUS_PARSE_ERROR = 3,
  // A run configuration was rejected.
  RTFQ_STATUS_CONFIG_ERROR = 4,
  // The operating system reported an I/O failure.
  RTFQ_STATUS_IO_ERROR = 5,
  // A computation produced a non-finite value.
  RTFQ_STATUS_NUMERIC_ERROR = 6,
  // A string argument was not valid UTF-8.
  RTFQ_STATUS_UTF8_ERROR = 7,
} RtfqStatus;

// Opaque parsed run description.
//
// Create with [`rtfq_config_parse`] or [`rtfq_config_load`], destroy with
// [`rtfq_config_free`].
typedef struct RtfqConfig RtfqConfig;

// Opaque source/target dataset pair.
//
// Generated pairs keep the held-out target labels for evaluation; datasets
// loaded from disk carry labels only if the files do. Create with
// [`rtfq_data_prepare`], destroy with [`rtfq_data_free`].
typedef struct RtfqData RtfqData;

// Opaque teacher/student trainer over one elastic network.
//
// Create with [`rtfq_trainer_new`] or [`rtfq_trainer_load`], destroy with
// [`rtfq_trainer_free`].
typedef struct RtfqTrainer RtfqTrainer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string. Never null; do not
// free.
const char *rtfq_version(void);

// Message from the most recent failing call on this thread, as a
// NUL-terminated UTF-8 string. Empty before any failure. The pointer stays
// valid until the next failing call on the same thread; do not free it.
const char *rtfq_last_error_message(void);

// Release a string returned by this library (currently only
// [`rtfq_plan_json`]). Null is ignored.
//
// # Safety
//
// `s` must be a pointer previously returned by this library and not yet
// freed, or null.
void rtfq_string_free(char *s);

// Constant scaling the step gradient for a tensor of `len` values:
// `1 / sqrt(len * upper)` where `upper` is the top of the code range.
//
// # Safety
//
// `out` must point to one writable float.
enum RtfqStatus rtfq_grad_scale(size_t len,
                                uint32_t bits,
                                bool is_signed,
                                bool narrow_unsigned,
                                float *out);

// Fake-quantize `len` values: divide by `step`, clamp to the code range
// chosen by `bits`/`is_signed`/`narrow_unsigned`, round ties to even, and
// rescale. `narrow_unsigned` restricts the unsigned range to
// `[0, 2^(bits-1)]` and is ignored when `is_signed` is set. In-place
// operation (`out == values`) is allowed.
//
// # Safety
//
// `values` must point to `len` readable floats and `out` to `len` writable
// floats (either may be null when `len == 0`).
enum RtfqStatus rtfq_quantize(const float *values,
                              size_t len,
                              float step,
                              uint32_t bits,
                              bool is_signed,
                              bool narrow_unsigned,
                              float *out);

// Straight-through gradients of the fake-quantizer: writes `∂L/∂values`
// (zero where the input clamped) and the scalar `∂L/∂step` accumulated over
// all positions and scaled by `grad_scale`.
//
// # Safety
//
// `values` and `upstream` must each point to `len` readable floats,
// `grad_values` to `len` writable floats, and `grad_step` to one writable
// float. The float buffers may be null only when `len == 0`.
enum RtfqStatus rtfq_quantize_backward(const float *values,
                                       size_t len,
                                       float step,
                                       uint32_t bits,
                                       bool is_signed,
                                       bool narrow_unsigned,
                                       float grad_scale,
                                       const float *upstream,
                                       float *grad_values,
                                       float *grad_step);

// Parse a run configuration from `key = value` text (same format the `rtfq`
// command-line tool reads). On success `*out` owns the new handle.
//
// # Safety
//
// `text` must be a NUL-terminated string and `out` a writable pointer slot.
enum RtfqStatus rtfq_config_parse(const char *text, struct RtfqConfig **out);

// Load a run configuration from a file. On success `*out` owns the new
// handle.
//
// # Safety
//
// `path` must be a NUL-terminated string and `out` a writable pointer slot.
enum RtfqStatus rtfq_config_load(const char *path, struct RtfqConfig **out);

// Override the run seed, equivalent to the `RTFQ_SEED` environment variable
// of the command-line tool.
//
// # Safety
//
// `config` must be a live handle from this library.
enum RtfqStatus rtfq_config_set_seed(struct RtfqConfig *config, uint64_t seed);

// Destroy a configuration handle. Null is ignored.
//
// # Safety
//
// `config` must be a handle from this library, not yet freed, or null.
void rtfq_config_free(struct RtfqConfig *config);

// Cost table and budget partition for the configuration grid, as a JSON
// document (`axis`, `configs`, `budgets` — the same content the `plan`
// subcommand writes). On success `*out` owns a NUL-terminated string; free
// it with [`rtfq_string_free`].
//
// # Safety
//
// `config` must be a live handle and `out` a writable pointer slot.
enum RtfqStatus rtfq_plan_json(const struct RtfqConfig *config, char **out);

// Build the source/target dataset pair the configuration describes: loaded
// from `source_path`/`target_path` when both are set, otherwise generated
// from the seed. On success `*out` owns the new handle.
//
// # Safety
//
// `config` must be a live handle and `out` a writable pointer slot.
enum RtfqStatus rtfq_data_prepare(const struct RtfqConfig *config, struct RtfqData **out);

// Destroy a dataset handle. Null is ignored.
//
// # Safety
//
// `data` must be a handle from this library, not yet freed, or null.
void rtfq_data_free(struct RtfqData *data);

// Build a fresh trainer (elastic network, teacher copy, optimizer) from a
// configuration. On success `*out` owns the new handle.
//
// # Safety
//
// `config` must be a live handle and `out` a writable pointer slot.
enum RtfqStatus rtfq_trainer_new(const struct RtfqConfig *config, struct RtfqTrainer **out);

// Destroy a trainer handle. Null is ignored.
//
// # Safety
//
// `trainer` must be a handle from this library, not yet freed, or null.
void rtfq_trainer_free(struct RtfqTrainer *trainer);

// Run `epochs` passes of labeled source warmup with the given batch size.
// At the end the teacher is a bit-exact copy of the student.
//
// # Safety
//
// `trainer` and `data` must be live handles from this library.
enum RtfqStatus rtfq_trainer_warmup(struct RtfqTrainer *trainer,
                                    const struct RtfqData *data,
                                    uint64_t epochs,
                                    size_t batch);

// Run `epochs` passes of adaptation, pairing labeled source batches with
// unlabeled target batches. Requires a completed warmup.
//
// # Safety
//
// `trainer` and `data` must be live handles from this library.
enum RtfqStatus rtfq_trainer_adapt(struct RtfqTrainer *trainer,
                                   const struct RtfqData *data,
                                   uint64_t epochs,
                                   size_t batch);

// Top-1 accuracy of the student at one configuration (`width`,
// `resolution`, `bits`), evaluated on the target split when
// `target_domain` is set and on the source split otherwise. Fails with
// `InvalidArgument` when the requested split carries no labels.
//
// # Safety
//
// `trainer` and `data` must be live handles and `out_accuracy` a writable
// pointer to one double.
enum RtfqStatus rtfq_trainer_evaluate(const struct RtfqTrainer *trainer,
                                      const struct RtfqData *data,
                                      double width,
                                      uint32_t resolution,
                                      uint32_t bits,
                                      bool target_domain,
                                      size_t batch,
                                      double *out_accuracy);

// Number of optimizer steps taken over the trainer's lifetime.
//
// # Safety
//
// `trainer` must be a live handle and `out` a writable pointer to one
// 64-bit integer.
enum RtfqStatus rtfq_trainer_global_step(const struct RtfqTrainer *trainer, uint64_t *out);

// Write the full trainer state (both networks, optimizer moments, RNG,
// phase counters) to a checkpoint file. A later [`rtfq_trainer_load`]
// resumes bit-exactly.
//
// # Safety
//
// `trainer` must be a live handle and `path` a NUL-terminated string.
enum RtfqStatus rtfq_trainer_save(const struct RtfqTrainer *trainer, const char *path);

// Restore a trainer from a checkpoint file. On success `*out` owns the new
// handle.
//
// # Safety
//
// `path` must be a NUL-terminated string and `out` a writable pointer slot.
enum RtfqStatus rtfq_trainer_load(const char *path, struct RtfqTrainer **out);

// Extract the student's width-1.0 view as a plain (non-switchable,
// unquantized) network — conv and head weights plus source-domain
// batch-norm state — and write it to a file.
//
// # Safety
//
// `trainer` must be a live handle and `path` a NUL-terminated string.
enum RtfqStatus rtfq_trainer_export_plain(const struct RtfqTrainer *trainer, const char *path);

// Seed the trainer from a plain-weights file: the student inherits the
// weights (quantizer steps re-derived from them) and the teacher becomes a
// bit-exact copy of the student.
//
// # Safety
//
// `trainer` must be a live handle and `path` a NUL-terminated string.
enum RtfqStatus rtfq_trainer_import_plain(struct RtfqTrainer *trainer, const char *path);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RTFQ_H */
