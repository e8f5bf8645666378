#ifndef REPULSOR_H
#define REPULSOR_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Pass as `class_id` to cycle through all classes.
 */
#define RPL_CLASS_CYCLE -1

/*
 Pass as `class_id` for unconditional samples.
 */
#define RPL_CLASS_NULL -2

/*
 Result code of every fallible call.
 */
typedef enum RplStatus {
  RPL_STATUS_OK = 0,
  RPL_STATUS_NULL_POINTER = 1,
  RPL_STATUS_INVALID_UTF8 = 2,
  RPL_STATUS_DIMENSION = 3,
  RPL_STATUS_SHAPE = 4,
  RPL_STATUS_DOMAIN = 5,
  RPL_STATUS_INDEX = 6,
  RPL_STATUS_CONFIG = 7,
  RPL_STATUS_PRECONDITION = 8,
  RPL_STATUS_FORMAT = 9,
  RPL_STATUS_IO = 10,
  RPL_STATUS_BUFFER_TOO_SMALL = 11,
  RPL_STATUS_PANIC = 12,
} RplStatus;

/*
 A FIFO memory bank of unit vectors.
 */
typedef struct RplBank RplBank;

/*
 Parsed run configuration.
 */
typedef struct RplConfig RplConfig;

/*
 A trained model that can sample and be saved.
 */
typedef struct RplModel RplModel;

/*
 A training run in progress.
 */
typedef struct RplTrainer RplTrainer;

/*
 Mean losses of one training step.
 */
typedef struct RplStepStats {
  double loss_diff;
  double loss_disp;
  double loss_total;
} RplStepStats;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Library version as a static NUL-terminated string.
 */
const char *rpl_version(void);

/*
 Message for the most recent failure on this thread; empty after a success.

 The pointer stays valid until the next call into this library on the
 same thread.
 */
const char *rpl_last_error(void);

/*
 Parse configuration text in `section.key = value` form.

 # Safety
 `text` must be a NUL-terminated string and `out` a writable pointer.
 */
enum RplStatus rpl_config_parse(const char *text, struct RplConfig **out);

/*
 Read and parse a configuration file.

 # Safety
 `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum RplStatus rpl_config_load(const char *path, struct RplConfig **out);

/*
 # Safety
 `cfg` must come from this library and not be used afterwards.
 */
void rpl_config_free(struct RplConfig *cfg);

/*
 Batch size of a configuration, or 0 for a null pointer.

 # Safety
 `cfg` must be null or a live configuration.
 */
size_t rpl_config_batch_size(const struct RplConfig *cfg);

/*
 Train to completion, writing the metrics CSV and checkpoint to the given paths.

 # Safety
 `cfg` must be live; both paths must be NUL-terminated strings.
 */
enum RplStatus rpl_train(const struct RplConfig *cfg,
                         const char *metrics_path,
                         const char *checkpoint_path);

/*
 Start a training run; the configuration is copied.

 # Safety
 `cfg` must be live and `out` writable.
 */
enum RplStatus rpl_trainer_new(const struct RplConfig *cfg, struct RplTrainer **out);

/*
 Run one optimization step; `stats` may be null.

 # Safety
 `trainer` must be live; `stats` null or writable.
 */
enum RplStatus rpl_trainer_step(struct RplTrainer *trainer, struct RplStepStats *stats);

/*
 Completed optimization steps, or 0 for a null pointer.

 # Safety
 `trainer` must be null or live.
 */
uint64_t rpl_trainer_steps_done(const struct RplTrainer *trainer);

/*
 Copy the current parameters into a new model.

 # Safety
 `trainer` must be live and `out` writable.
 */
enum RplStatus rpl_trainer_snapshot(const struct RplTrainer *trainer, struct RplModel **out);

/*
 # Safety
 `trainer` must come from this library and not be used afterwards.
 */
void rpl_trainer_free(struct RplTrainer *trainer);

/*
 Load a model from a checkpoint file.

 # Safety
 `path` must be a NUL-terminated string and `out` writable.
 */
enum RplStatus rpl_model_load(const char *path, struct RplModel **out);

/*
 Write a model as a checkpoint file.

 # Safety
 `model` must be live and `path` a NUL-terminated string.
 */
enum RplStatus rpl_model_save(const struct RplModel *model, const char *path);

/*
 Data dimension of a model, or 0 for a null pointer.

 # Safety
 `model` must be null or live.
 */
size_t rpl_model_data_dim(const struct RplModel *model);

/*
 Number of data classes, or 0 for a null pointer.

 # Safety
 `model` must be null or live.
 */
size_t rpl_model_n_classes(const struct RplModel *model);

/*
 Draw `n` samples into `out` as row-major `n × data_dim` values.

 `class_id` is a class index, `RPL_CLASS_CYCLE` or `RPL_CLASS_NULL`.

 # Safety
 `model` must be live and `out` must hold `out_len` doubles.
 */
enum RplStatus rpl_model_sample(const struct RplModel *model,
                                size_t n,
                                int64_t class_id,
                                double guidance_w,
                                size_t steps,
                                uint64_t seed,
                                double *out,
                                size_t out_len);

/*
 # Safety
 `model` must come from this library and not be used afterwards.
 */
void rpl_model_free(struct RplModel *model);

/*
 Empty bank of `capacity` slots of dimension `dim`.

 # Safety
 `out` must be writable.
 */
enum RplStatus rpl_bank_new(size_t capacity, size_t dim, struct RplBank **out);

/*
 Enqueue `rows` unit vectors stored row-major in `z`.

 # Safety
 `bank` must be live and `z` must hold `rows × dim` doubles.
 */
enum RplStatus rpl_bank_enqueue(struct RplBank *bank, const double *z, size_t rows);

/*
 Number of valid entries, or 0 for a null pointer.

 # Safety
 `bank` must be null or live.
 */
size_t rpl_bank_len(const struct RplBank *bank);

/*
 Copy valid entries, oldest first, into `out`.

 # Safety
 `bank` must be live and `out` must hold `out_len` doubles.
 */
enum RplStatus rpl_bank_entries(const struct RplBank *bank, double *out, size_t out_len);

/*
 # Safety
 `bank` must come from this library and not be used afterwards.
 */
void rpl_bank_free(struct RplBank *bank);

/*
 Dispersive loss of `rows × bank_dim` points `z` against the bank entries.
 When `grad` is non-null it receives the gradient with respect to `z`.

 # Safety
 `bank` must be live, `z` and `grad` (if non-null) must hold
 `rows × bank_dim` doubles, `loss` must be writable.
 */
enum RplStatus rpl_dispersive_loss_bank(const double *z,
                                        size_t rows,
                                        const struct RplBank *bank,
                                        double tau,
                                        double *loss,
                                        double *grad);

/*
 In-batch dispersive loss over all ordered pairs of `rows × dim` points.

 # Safety
 `z` and `grad` (if non-null) must hold `rows × dim` doubles and `loss`
 must be writable.
 */
enum RplStatus rpl_dispersive_loss_inbatch(const double *z,
                                           size_t rows,
                                           size_t dim,
                                           double tau,
                                           double *loss,
                                           double *grad);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* REPULSOR_H */
