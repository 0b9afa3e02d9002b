#ifndef DKAFT_H
#define DKAFT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes. Values 1 to 3 match the command-line exit codes.
typedef enum DkaftStatus {
  Ok = 0,
  // Invalid configuration or arguments.
  Config = 1,
  // Invalid or unreadable input data.
  Data = 2,
  // Numerical failure.
  Numeric = 3,
  // A required pointer was null or a string was not UTF-8.
  InvalidArgument = 4,
  // The library panicked; the call had no effect on its outputs.
  Panic = 5,
} DkaftStatus;

// Opaque collection of patient records.
typedef struct DkaftDataset DkaftDataset;

// Opaque trained model.
typedef struct DkaftModel DkaftModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL. The pointer is
// valid until the next library call on the same thread.
const char *dkaft_last_error(void);

// Load a JSON Lines dataset.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum DkaftStatus dkaft_dataset_load(const char *path, struct DkaftDataset **out);

// Number of records, or 0 for NULL.
//
// # Safety
// `data` must be NULL or a live handle.
uintptr_t dkaft_dataset_len(const struct DkaftDataset *data);

// # Safety
// `data` must be NULL or a handle not yet freed.
void dkaft_dataset_free(struct DkaftDataset *data);

// Train a model. `config` holds `key = value` lines in the configuration
// file format and may be NULL for defaults.
//
// # Safety
// `train` and `val` must be live handles, `config` NULL or a NUL-terminated
// string, and `out` a valid pointer.
enum DkaftStatus dkaft_model_train(const char *config,
                                   const struct DkaftDataset *train,
                                   const struct DkaftDataset *val,
                                   struct DkaftModel **out);

// Load a model checkpoint.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum DkaftStatus dkaft_model_load(const char *path, struct DkaftModel **out);

// Write a model checkpoint.
//
// # Safety
// `model` must be a live handle and `path` a NUL-terminated string.
enum DkaftStatus dkaft_model_save(const struct DkaftModel *model, const char *path);

// Predict log-time distributions for every record of `data`. Each output
// array must hold `len` doubles and `len` must equal the dataset length.
// Any output pointer may be NULL to skip that quantity.
//
// # Safety
// Handles must be live and non-NULL output arrays writable for `len` doubles.
enum DkaftStatus dkaft_model_predict(const struct DkaftModel *model,
                                     const struct DkaftDataset *data,
                                     double *mu,
                                     double *sigma_f2,
                                     double *sigma_obs2,
                                     uintptr_t len);

// # Safety
// `model` must be NULL or a handle not yet freed.
void dkaft_model_free(struct DkaftModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DKAFT_H */
