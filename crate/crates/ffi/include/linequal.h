#ifndef LINEQUAL_H
#define LINEQUAL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Number of quality categories; prediction buffers hold this many doubles.
#define LQ_NUM_CATEGORIES 9

typedef enum LqStatus {
  LQ_STATUS_OK = 0,
  LQ_STATUS_NULL_POINTER = 1,
  LQ_STATUS_INVALID_UTF8 = 2,
  LQ_STATUS_IO = 3,
  LQ_STATUS_PARSE = 4,
  LQ_STATUS_INVALID_ARGUMENT = 5,
  LQ_STATUS_INTERNAL = 6,
} LqStatus;

// A trained baseline classifier.
typedef struct LqModel LqModel;

// An owned list of strings.
typedef struct LqStringList LqStringList;

// Platt scaling parameters: p = 1 / (1 + exp(-(a * s + b))).
typedef struct LqPlattParams {
  double a;
  double b;
} LqPlattParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message describing the last failure on this thread, or null. Valid
// until the next call into this library from the same thread.
const char *lq_last_error_message(void);

// Library version as a static string.
const char *lq_version(void);

// Display name of category `index` (0 is Clean), or null when out of range.
const char *lq_category_name(size_t index);

// Load a model directory written by `linequal train`.
//
// # Safety
// `dir` must be a valid C string and `out` a valid pointer.
enum LqStatus lq_model_load(const char *dir, struct LqModel **out);

// Release a model. Null is ignored.
//
// # Safety
// `model` must come from [`lq_model_load`] and not be used afterwards.
void lq_model_free(struct LqModel *model);

// Class probabilities of `text`, written to `out[0..LQ_NUM_CATEGORIES]`.
//
// # Safety
// `model` must be live, `text` a valid C string, and `out` must point to
// at least `LQ_NUM_CATEGORIES` doubles.
enum LqStatus lq_model_predict(const struct LqModel *model, const char *text, double *out);

// Quality score of `text`: the Clean probability, Platt-scaled when
// `platt` is not null.
//
// # Safety
// `model` must be live, `text` a valid C string, `platt` null or valid,
// and `out` a valid pointer.
enum LqStatus lq_model_quality_score(const struct LqModel *model,
                                     const struct LqPlattParams *platt,
                                     const char *text,
                                     double *out);

// Read Platt parameters from a file written by `linequal calibrate`.
//
// # Safety
// `path` must be a valid C string and `out` a valid pointer.
enum LqStatus lq_platt_load(const char *path, struct LqPlattParams *out);

// Calibrated probability for raw score `s`.
double lq_platt_apply(struct LqPlattParams params, double s);

// Fit Platt parameters to `n` scores with binary labels (nonzero = positive).
//
// # Safety
// `scores` and `labels` must point to `n` elements; `out` must be valid.
enum LqStatus lq_platt_fit(const double *scores,
                           const uint8_t *labels,
                           size_t n,
                           struct LqPlattParams *out);

// Split `text` into segments of at most `max_len` characters.
//
// # Safety
// `text` must be a valid C string and `out` a valid pointer.
enum LqStatus lq_segment_line(const char *text, size_t max_len, struct LqStringList **out);

// Number of strings in `list`; 0 for null.
//
// # Safety
// `list` must be null or live.
size_t lq_string_list_len(const struct LqStringList *list);

// String `index` of `list`, or null when out of range. Owned by the list.
//
// # Safety
// `list` must be null or live.
const char *lq_string_list_get(const struct LqStringList *list, size_t index);

// Release a string list. Null is ignored.
//
// # Safety
// `list` must come from this library and not be used afterwards.
void lq_string_list_free(struct LqStringList *list);

// Cohen's kappa between two label sequences of length `n`.
//
// # Safety
// `a` and `b` must each point to `n` valid C strings; `out` must be valid.
enum LqStatus lq_cohens_kappa(const char *const *a, const char *const *b, size_t n, double *out);

// Index of the category named `name` (case-insensitive), or -1.
//
// # Safety
// `name` must be null or a valid C string.
int32_t lq_category_index(const char *name);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LINEQUAL_H */
