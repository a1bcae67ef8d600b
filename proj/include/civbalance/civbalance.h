#ifndef CIVBALANCE_H
#define CIVBALANCE_H

/* C interface to the civbalance library.
 *
 * Every object is an opaque handle released by its matching *_free call.
 * Functions that can fail return a civb_status; on failure the message is
 * available from civb_last_error() on the same thread until the next failing
 * call. Output pointers are only written on success unless noted. */

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define CIVB_API __declspec(dllexport)
#else
#define CIVB_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum civb_status {
  CIVB_OK = 0,
  CIVB_ERR_CONFIG = 1,
  CIVB_ERR_SHAPE = 2,
  CIVB_ERR_NUMERIC = 3,
  CIVB_ERR_CONVERGENCE = 4,
  CIVB_ERR_DEGENERATE_GROUP = 5,
  CIVB_ERR_INGESTION = 6,
  CIVB_ERR_IO = 7,
  CIVB_ERR_ARGUMENT = 8,
  CIVB_ERR_EXPERIMENT = 9,
  CIVB_ERR_NULL_POINTER = 10,
  CIVB_ERR_INTERNAL = 11
} civb_status;

typedef struct civb_dataset civb_dataset;
typedef struct civb_config civb_config;
typedef struct civb_result civb_result;
typedef struct civb_experiment civb_experiment;
typedef struct civb_report civb_report;

CIVB_API const char* civb_version(void);
CIVB_API const char* civb_status_name(civb_status status);
CIVB_API const char* civb_last_error(void);

/* Seed of replication r under a base seed, as used by experiments. */
CIVB_API uint64_t civb_replication_seed(uint64_t base_seed, size_t r);

/* Datasets ----------------------------------------------------------------*/

CIVB_API civb_status civb_dataset_synthetic(size_t p, size_t q, size_t n, uint64_t seed, double noise_sd,
                                            civb_dataset** out);
/* drop_columns: comma separated names removed before ingestion, or NULL. */
CIVB_API civb_status civb_dataset_semi_synthetic(const char* table_path, const char* drop_columns, size_t p,
                                                 size_t q, uint64_t seed, double noise_sd, civb_dataset** out);
CIVB_API civb_status civb_dataset_load(const char* manifest_path, civb_dataset** out);
/* Writes <stem>.csv, <stem>.truth.csv and <stem>.json into dir. The manifest
 * path is copied into buf (NUL terminated, truncated to cap) and its full
 * length stored in *needed when needed is not NULL. */
CIVB_API civb_status civb_dataset_save(const civb_dataset* d, const char* dir, const char* stem, char* buf,
                                       size_t cap, size_t* needed);
CIVB_API size_t civb_dataset_rows(const civb_dataset* d);
CIVB_API size_t civb_dataset_dim(const civb_dataset* d);
/* "Syn-4-4" style name; empty for loaded data without a name. */
CIVB_API const char* civb_dataset_name(const civb_dataset* d);
/* CIVB_ERR_ARGUMENT when the dataset carries no ground truth. */
CIVB_API civb_status civb_dataset_true_ace(const civb_dataset* d, double* out);
/* Copies column "C_<j>", "S", "W", "Y", "Y1" or "Y0" into out[0..len). */
CIVB_API civb_status civb_dataset_column(const civb_dataset* d, const char* name, double* out, size_t len);
/* split: "0.7,0.3" or "0.63,0.27,0.10". val may be NULL; it is set to NULL
 * when the split has no validation part. */
CIVB_API civb_status civb_dataset_split(const civb_dataset* d, const char* split, uint64_t seed,
                                        civb_dataset** train, civb_dataset** val, civb_dataset** test);
CIVB_API void civb_dataset_free(civb_dataset* d);

/* Training configuration ------------------------------------------------*/

/* Defaults: civ_lr 0.05, treat_lr 0.05, outcome_lr 0.0005, epochs 300,
 * alpha 0.1, beta 0.1, ablation full. */
CIVB_API civb_config* civb_config_new(void);
CIVB_API civb_config* civb_config_clone(const civb_config* cfg);
/* Keys: civ_lr, treat_lr, outcome_lr, epochs, alpha, beta, l2_lambda,
 * repr_dim, hidden_dims ("32,32"), seed, ablation (full | no_civ_balance |
 * no_balance), batch_size, balance_rows, patience, min_delta,
 * sinkhorn_epsilon, sinkhorn_max_iter, sinkhorn_tol, resample_s_hat
 * (true | false). */
CIVB_API civb_status civb_config_set(civb_config* cfg, const char* key, const char* value);
CIVB_API civb_status civb_config_get(const civb_config* cfg, const char* key, char* buf, size_t cap,
                                     size_t* needed);
CIVB_API void civb_config_free(civb_config* cfg);

/* Single runs -----------------------------------------------------------*/

typedef struct civb_estimate {
  double ace;        /* on the training rows */
  double ace_test;   /* on the test rows when has_test */
  int has_test;
  double within_error;
  int has_within_error;
  double out_error;
  int has_out_error;
  double loss_s;
  double loss_w;
  double loss_y;
  double ipm_s;
  double ipm_w;
  size_t epochs_civ;
  size_t epochs_treat;
  size_t epochs_outcome;
  size_t warning_count;
} civb_estimate;

/* test and val may be NULL. */
CIVB_API civb_status civb_run(const civb_dataset* train, const civb_dataset* test, const civb_dataset* val,
                              const civb_config* cfg, civb_result** out);
CIVB_API civb_status civb_result_estimate(const civb_result* r, civb_estimate* out);
/* NULL when i is out of range. */
CIVB_API const char* civb_result_warning(const civb_result* r, size_t i);
CIVB_API void civb_result_free(civb_result* r);

/* Experiments -----------------------------------------------------------*/

CIVB_API civb_experiment* civb_experiment_new(void);
CIVB_API civb_status civb_experiment_set_synthetic(civb_experiment* e, size_t p, size_t q, size_t n,
                                                   double noise_sd);
CIVB_API civb_status civb_experiment_set_semi_synthetic(civb_experiment* e, const char* table_path,
                                                        const char* drop_columns, size_t p, size_t q,
                                                        double noise_sd);
CIVB_API civb_status civb_experiment_set_dataset(civb_experiment* e, const char* manifest_path);
/* Comma separated ablation names. */
CIVB_API civb_status civb_experiment_set_methods(civb_experiment* e, const char* methods);
/* Keys: replications, split, base_seed, threads. */
CIVB_API civb_status civb_experiment_set(civb_experiment* e, const char* key, const char* value);
CIVB_API civb_status civb_experiment_set_config(civb_experiment* e, const civb_config* cfg);
CIVB_API void civb_experiment_free(civb_experiment* e);

/* On CIVB_ERR_EXPERIMENT (too many failed replications) *out still receives
 * the partial report. */
CIVB_API civb_status civb_experiment_run(const civb_experiment* e, civb_report** out);
CIVB_API civb_status civb_experiment_sweep(const civb_experiment* e, const double* grid, size_t len,
                                           civb_report** out);

typedef struct civb_report_row {
  const char* setting; /* owned by the report */
  const char* method;
  double alpha;
  double beta;
  size_t completed;
  size_t failed;
  double within_mean;
  double within_std;
  double out_mean;
  double out_std;
  int std_degenerate;
} civb_report_row;

CIVB_API civb_status civb_report_set_kind(civb_report* r, const char* kind);
CIVB_API size_t civb_report_rows(const civb_report* r);
CIVB_API civb_status civb_report_row_at(const civb_report* r, size_t i, civb_report_row* out);
/* Raw per-replication out-of-sample errors of row i; NaN marks a failed
 * replication. */
CIVB_API civb_status civb_report_out_errors(const civb_report* r, size_t i, double* out, size_t len);
/* Text owned by the report, valid until it is freed. */
CIVB_API const char* civb_report_json(const civb_report* r);
CIVB_API const char* civb_report_summary(const civb_report* r);
CIVB_API civb_status civb_report_write(const civb_report* r, const char* path);
CIVB_API civb_status civb_report_read(const char* path, civb_report** out);
CIVB_API void civb_report_free(civb_report* r);

#ifdef __cplusplus
}
#endif

#endif /* CIVBALANCE_H */
