/* Copyright (C) 2026 The vlcb Authors
 * SPDX-License-Identifier: Apache-2.0 */

/* C interface of libvlcb. Objects are opaque handles; every fallible call
 * returns a vlcb_status and leaves a message in vlcb_last_error(). Strings
 * returned through char** are owned by the caller (vlcb_string_free). */

#ifndef VLCB_VLCB_H
#define VLCB_VLCB_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define VLCB_API __declspec(dllexport)
#else
#define VLCB_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum vlcb_status {
    VLCB_OK = 0,
    VLCB_E_INVALID_CONFIG = 1,
    VLCB_E_INVALID_ARGUMENT = 2,
    VLCB_E_SEQUENCE_TOO_LONG = 3,
    VLCB_E_UNKNOWN_TASK_KIND = 4,
    VLCB_E_EMPTY_TEXT_SPAN = 5,
    VLCB_E_CONFIG = 6,
    VLCB_E_SHAPE_MISMATCH = 7,
    VLCB_E_MISSING_BASELINE = 8,
    VLCB_E_NUMERIC = 9,
    VLCB_E_IO = 10,
    VLCB_E_FORMAT = 11,
    VLCB_E_INTERNAL = 12
} vlcb_status;

typedef struct vlcb_model vlcb_model;
typedef struct vlcb_task vlcb_task;
typedef struct vlcb_trace vlcb_trace;

VLCB_API const char* vlcb_version(void);
VLCB_API const char* vlcb_status_name(vlcb_status status);
/* Message of the last failed call on this thread ("" if none). */
VLCB_API const char* vlcb_last_error(void);
VLCB_API void vlcb_string_free(char* s);

/* ---- models ---- */

typedef struct vlcb_model_config {
    int num_layers;
    int num_heads;
    int head_dim;
    int vocab_size;
    uint64_t seed;
    int max_seq_len;
} vlcb_model_config;

VLCB_API void vlcb_model_config_default(vlcb_model_config* cfg);
VLCB_API vlcb_status vlcb_model_create(const vlcb_model_config* cfg, vlcb_model** out);
/* Applies a parameter-compression policy record ({"method": "WANDA", ...}). */
VLCB_API vlcb_status vlcb_model_compress(const vlcb_model* model, const char* param_policy_json, vlcb_model** out);
/* Same, and writes the compressed-model file to `path`. */
VLCB_API vlcb_status vlcb_model_compress_to_file(const vlcb_model* model, const char* param_policy_json,
                                                 const char* path);
VLCB_API vlcb_status vlcb_model_load_compressed(const char* path, vlcb_model** out);
/* FNV-1a over all weights; equal checksums mean equal weights. */
VLCB_API vlcb_status vlcb_model_checksum(const vlcb_model* model, uint64_t* out);
VLCB_API void vlcb_model_destroy(vlcb_model* model);

/* ---- tasks ---- */

/* kind: "NEEDLE", "COPY" or "COUNT". l_t < 0 selects the kind default. */
VLCB_API vlcb_status vlcb_task_create(const vlcb_model* model, const char* kind, int l_v, int l_t, uint64_t seed,
                                      vlcb_task** out);
VLCB_API vlcb_status vlcb_task_info(const vlcb_task* task, int* l_v, int* l, int* expected_token);
VLCB_API void vlcb_task_destroy(vlcb_task* task);

typedef struct vlcb_generation {
    int first_token;
    int correct;
    uint64_t ttft_ops;
    uint64_t decode_ops;
    uint64_t retained_cache_entries;
} vlcb_generation;

/* Runs one task. policy_json is a token or kv policy record as used in run
 * specs, or NULL for the uncompressed model; budget overrides its budget. */
VLCB_API vlcb_status vlcb_run_task(const vlcb_model* model, const vlcb_task* task, const char* policy_json,
                                   double budget, int decode_steps, vlcb_generation* out);
/* Greedy token ids of the run above; *out_tokens is freed with vlcb_tokens_free. */
VLCB_API vlcb_status vlcb_run_task_tokens(const vlcb_model* model, const vlcb_task* task, const char* policy_json,
                                          double budget, int decode_steps, int** out_tokens, size_t* n_tokens);
VLCB_API void vlcb_tokens_free(int* tokens);

/* ---- traces ---- */

VLCB_API vlcb_status vlcb_trace_capture(const vlcb_model* model, const vlcb_task* task, vlcb_trace** out);
VLCB_API vlcb_status vlcb_trace_save(const vlcb_trace* trace, const char* path, int float64);
VLCB_API vlcb_status vlcb_trace_load(const char* path, vlcb_trace** out);
VLCB_API vlcb_status vlcb_trace_dims(const vlcb_trace* trace, int* num_layers, int* num_heads, int* l_v, int* l);
/* Attention row `row` of (layer, head); `out` holds at least `row + 1` values. */
VLCB_API vlcb_status vlcb_trace_row(const vlcb_trace* trace, int layer, int head, int row, double* out);
/* Applies a kv policy record to the trace; writes the replay report JSON.
 * budget > 0 overrides the record's budget. */
VLCB_API vlcb_status vlcb_trace_replay(const vlcb_trace* trace, const char* kv_policy_json, double budget,
                                       char** out_json);
VLCB_API void vlcb_trace_destroy(vlcb_trace* trace);

/* ---- metrics ---- */

typedef struct vlcb_eval_record {
    const char* method;
    const char* model;
    const char* benchmark;
    double em;
    double em_base;
    const char* const* predictions;
    const char* const* predictions_base;
    size_t n_predictions;
    double t;
    double t_base;
    double ttft;
    double ttft_base;
    double decode;
    double decode_base;
} vlcb_eval_record;

typedef enum vlcb_agreement { VLCB_AGREE_EXACT = 0, VLCB_AGREE_F1 = 1 } vlcb_agreement;

VLCB_API vlcb_status vlcb_overall_performance(const vlcb_eval_record* records, size_t n, double* out);
VLCB_API vlcb_status vlcb_generalization(const vlcb_eval_record* records, size_t n, double* out);
VLCB_API vlcb_status vlcb_loyalty(const vlcb_eval_record* records, size_t n, vlcb_agreement agreement, double* out);
VLCB_API vlcb_status vlcb_efficiency(const vlcb_eval_record* records, size_t n, double* oe, double* ttft_speedup,
                                     double* decode_speedup);

/* ---- harness ---- */

typedef void (*vlcb_progress_fn)(const char* line, void* user);

typedef struct vlcb_run_options {
    int has_seed;
    uint64_t seed;
    int jobs;               /* 0: keep the spec value */
    const double* budgets;  /* NULL: keep the spec value */
    size_t n_budgets;
    const char* out_dir;    /* NULL: spec, then $VLCB_OUT_ROOT/<name>, then ./runs/<name> */
} vlcb_run_options;

typedef struct vlcb_run_summary {
    size_t records;
    int failed_cells;
    char* archive_dir;  /* caller frees */
} vlcb_run_summary;

VLCB_API void vlcb_run_options_default(vlcb_run_options* opts);
/* Validates a spec file and writes its canonical JSON (all defaults filled). */
VLCB_API vlcb_status vlcb_spec_canonical(const char* spec_path, const vlcb_run_options* opts, char** out_json);
VLCB_API vlcb_status vlcb_harness_run(const char* spec_path, const vlcb_run_options* opts, vlcb_progress_fn progress,
                                      void* user, vlcb_run_summary* out);
/* Writes report.json, ratios.csv and pareto.csv; out_dir NULL means the archive. */
VLCB_API vlcb_status vlcb_harness_report(const char* archive_dir, const char* out_dir, char** out_json,
                                         int* n_diagnostics);
VLCB_API vlcb_status vlcb_harness_export_traces(const char* spec_path, const vlcb_run_options* opts, int samples,
                                                int float64, const char* out_dir, char** out_paths_json);

#ifdef __cplusplus
}
#endif

#endif /* VLCB_VLCB_H */
