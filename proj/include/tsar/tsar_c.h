#ifndef TSAR_C_H
#define TSAR_C_H

/* C interface to the tsar library.
 *
 * Objects are opaque handles created by tsar_*_create/load functions and
 * released with the matching tsar_*_free. Every fallible call returns a
 * tsar_status; on failure tsar_last_error() describes the cause for the
 * calling thread. Strings returned through char** are owned by the caller and
 * released with tsar_string_free. Configurations and results travel as JSON
 * text; unknown keys are rejected. */

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define TSAR_API __declspec(dllexport)
#else
#define TSAR_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum tsar_status {
  TSAR_OK = 0,
  TSAR_ERR_SHAPE = 1,
  TSAR_ERR_NUMERIC = 2,
  TSAR_ERR_CONFIG = 3,
  TSAR_ERR_IO = 4,
  TSAR_ERR_FORMAT = 5,
  TSAR_ERR_INVALID_ARGUMENT = 6,
  TSAR_ERR_INSUFFICIENT_DETAIL = 7,
  TSAR_ERR_INTERNAL = 8
} tsar_status;

typedef struct tsar_dataset tsar_dataset;
typedef struct tsar_model tsar_model;
typedef struct tsar_trace tsar_trace;

TSAR_API const char* tsar_version(void);
TSAR_API const char* tsar_status_name(tsar_status s);
TSAR_API const char* tsar_last_error(void);
TSAR_API void tsar_string_free(char* s);

/* Datasets.
 * synthetic config keys: classes, per_class, style ("strokes"|"blobs"),
 *   noise, channels, height, width, train_per_class, test_per_class.
 * folder config keys: channels, height, width, resize ("bilinear"|"nearest"),
 *   min_per_class, train_per_class, test_per_class, classes (keep the first
 *   n classes in folder order; 0 keeps all). */
TSAR_API tsar_status tsar_dataset_synthetic(const char* config_json, uint64_t seed, tsar_dataset** out);
TSAR_API tsar_status tsar_dataset_load_folder(const char* path, const char* config_json, tsar_dataset** out);
/* Class names, sizes, image shape, splits, excluded classes, linear probe. */
TSAR_API tsar_status tsar_dataset_info(const tsar_dataset* ds, int probe_train, char** info_json);
/* One PNG per image under dir/<class>/<index>.png. */
TSAR_API tsar_status tsar_dataset_write_png(const tsar_dataset* ds, const char* dir);
TSAR_API void tsar_dataset_free(tsar_dataset* ds);

/* Models.
 * mode: "grow" | "sculpt" | "custom_bias=<b>" | "anml" | "oml" | "scratch".
 * preset: "tiny" | "paper". */
TSAR_API tsar_status tsar_model_create(const char* preset, const char* mode, int64_t num_classes, uint64_t seed,
                                       tsar_model** out);
TSAR_API tsar_status tsar_model_load(const char* path, tsar_model** out);
/* run_config_json is embedded verbatim; f32 != 0 stores single precision. */
TSAR_API tsar_status tsar_model_save(const tsar_model* m, const char* path, const char* run_config_json, int f32);
/* Architecture, mode, parameter count, stored run config. */
TSAR_API tsar_status tsar_model_info(const tsar_model* m, char** info_json);
TSAR_API tsar_status tsar_model_mean_gate(const tsar_model* m, const tsar_dataset* ds, int probe, uint64_t seed,
                                          double* mean);
TSAR_API void tsar_model_free(tsar_model* m);

/* Meta-training in place. config keys: iterations, inner_lr, outer_lr,
 * order ("first"|"second"), inner, retention_same, retention_other,
 * probe_size, seed. on_record receives one JSON object per iteration and may
 * be NULL. */
typedef void (*tsar_record_fn)(const char* record_json, void* user);
TSAR_API tsar_status tsar_meta_train(tsar_model* m, const tsar_dataset* ds, const char* config_json,
                                     tsar_record_fn on_record, void* user, char** summary_json);

/* Domain transfer on a copy of the model. config keys: num_tasks,
 * images_per_task, validation_per_class, lr, seed, treatment ("normal"|
 * "enhancing"|"diminishing"|"mixed"|"fixed"|"reservoir"), detail
 * ("summary"|"tracked"|"full"), tracked_lo, tracked_hi, max_tracked, and
 * annotate (any JSON, copied into the result and the trace metadata). When
 * trace_path is non-NULL the regulation trace is written there. The fresh
 * class-prediction head is initialized from seed + 1. */
TSAR_API tsar_status tsar_transfer(const tsar_model* m, const tsar_dataset* ds, const char* config_json,
                                   const char* trace_path, char** result_json);
/* Transfer per distinct lr; result lists every row and the chosen lr. */
TSAR_API tsar_status tsar_lr_grid_search(const tsar_model* m, const tsar_dataset* ds, const char* config_json,
                                         const double* grid, size_t n, char** result_json);
/* Leave-one-out KNN accuracy of regulator encodings against class labels. */
TSAR_API tsar_status tsar_encoding_cluster_check(const tsar_model* m, const tsar_dataset* ds, int per_class,
                                                 int reduce_dims, int k, char** result_json);

/* Traces. */
TSAR_API tsar_status tsar_trace_read(const char* path, tsar_trace** out);
/* kind: "modular" | "random"; config keys: synapses, tasks, per_task. */
TSAR_API tsar_status tsar_trace_synthetic(const char* kind, const char* config_json, uint64_t seed, tsar_trace** out);
TSAR_API tsar_status tsar_trace_write(const tsar_trace* t, const char* path);
TSAR_API tsar_status tsar_trace_info(const tsar_trace* t, char** info_json);
TSAR_API void tsar_trace_free(tsar_trace* t);

/* Runs one analysis over one or more traces.
 * analysis: "modularity" | "timelag" | "spikes" | "powerlaw" | "cp-signs" |
 *   "class-nodes" | "activity-oracle".
 * options keys: layer (name), thresholds (array), lo, hi, bins, top_fraction,
 *   horizon.
 * The result is {"files": {name: csv text}, "summary": {...}}. A trace
 * without enough detail yields TSAR_ERR_INSUFFICIENT_DETAIL. */
TSAR_API tsar_status tsar_analyze(const tsar_trace* const* traces, size_t n, const char* analysis,
                                  const char* options_json, char** result_json);

/* Statistics over plain samples. test: "mann-whitney" | "sign" | "bootstrap"
 * | "pearson" | "spearman". b may be NULL for "bootstrap". */
TSAR_API tsar_status tsar_stats(const char* test, const double* a, size_t na, const double* b, size_t nb,
                                char** result_json);

/* Gradient and meta-gradient checks. instances: random cases per primitive.
 * f32 != 0 rounds inputs and losses to single precision and uses the relaxed
 * thresholds. fault: primitive whose backward is corrupted for the run
 * (only "conv2d" is wired), or NULL. *passed is 1 when every check is within
 * tolerance. */
TSAR_API tsar_status tsar_gradcheck(int instances, uint64_t seed, int f32, const char* fault, int* passed,
                                    char** report_json);

#ifdef __cplusplus
}
#endif

#endif
