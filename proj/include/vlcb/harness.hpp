// Copyright (C) 2026 The vlcb Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "vlcb/kv_compress.hpp"
#include "vlcb/metrics.hpp"
#include "vlcb/param_compress.hpp"
#include "vlcb/simcore.hpp"
#include "vlcb/token_prune.hpp"

namespace vlcb {

inline constexpr const char* kBaselineMethod = "ORIGINAL";

struct ModelSpec {
    std::string id = "toy";
    ModelConfig config;
};

struct TaskSpec {
    std::string benchmark;
    TaskKind kind = TaskKind::NeedleRetrieval;
    TaskParams params;
    int samples = 20;
};

enum class PolicyFamily { Token, Kv, Param };
enum class TokenMethod { FastV, VisionZip, PruMerge };

const char* family_name(PolicyFamily f);
const char* token_method_name(TokenMethod m);
TokenMethod parse_token_method(const std::string& s);

struct PolicySpec {
    std::string label;
    PolicyFamily family = PolicyFamily::Kv;
    TokenMethod token_method = TokenMethod::FastV;
    FastVSpec fastv;                // layer / variant / sink_fraction
    double divisor = 6.4;           // VisionZip
    KvPolicySpec kv;
    ParamSpec param;
    std::vector<double> budgets;    // empty: the run's budget list
};

struct RunSpec {
    std::string name = "run";
    std::uint64_t seed = 1;
    int jobs = 1;
    std::string output;
    int decode_steps = 1;
    bool wallclock = false;
    std::vector<ModelSpec> models;
    std::vector<TaskSpec> tasks;
    std::vector<PolicySpec> policies;
    std::vector<double> budgets = {0.01, 0.05, 0.10, 0.20, 0.40};
};

RunSpec parse_runspec(const nlohmann::json& j);
RunSpec load_runspec(const std::string& path);
/// Canonical form: every default filled in, stable key order.
nlohmann::json to_json(const RunSpec& spec);
std::string spec_hash(const RunSpec& spec);

nlohmann::json to_json(const PolicySpec& p);
PolicySpec parse_policy(const nlohmann::json& j);

/// "<label>@<budget>" for budgeted families, the label otherwise.
std::string method_id(const PolicySpec& p, double budget);

/// One (method, model, benchmark) cell of the archive.
struct CellRecord {
    std::string method;
    std::string family;  // baseline / token / kv / param
    std::string label;
    std::string model;
    std::string benchmark;
    double budget = 1.0;
    std::string status = "ok";
    std::string error;
    int samples = 0;
    int correct = 0;
    double score = 0.0;  // accuracy in [0, 1]
    std::vector<std::string> predictions;
    std::vector<std::string> expected;
    double ttft = 0.0;    // summed over samples (MACs or seconds)
    double decode = 0.0;
    double total = 0.0;
    double retained_cache_entries = 0.0;  // mean per sample
    int dropped_merge_rows = 0;            // samples whose modality merge dropped rows
};

nlohmann::json to_json(const CellRecord& r);
CellRecord record_from_json(const nlohmann::json& j);

struct RunResult {
    std::vector<CellRecord> records;
    std::vector<std::string> log;
    int failed_cells = 0;
};

/// Executes the grid. Failures are recorded per cell; the run continues.
RunResult run(const RunSpec& spec, const std::function<void(const std::string&)>& progress = {});

std::string prediction_text(const std::vector<int>& tokens);

/// Prefill under a token-prune policy at `budget` (TTFT includes any
/// scoring surcharge).
PrefillResult token_prefill(const Model& model, const TaskInstance& task, const PolicySpec& policy, double budget);

struct TaskRun {
    GenerationResult generation;
    std::uint64_t ttft_ops = 0;
    bool correct = false;
};

/// One task under a token or kv policy (nullptr: uncompressed). Parameter
/// policies are applied to the model instead (compress_model).
TaskRun run_task(const Model& model, const TaskInstance& task, const PolicySpec* policy, double budget,
                 int decode_steps);

/// Seed of sample `sample` of task `task_index` under run seed `run_seed`.
std::uint64_t task_seed(std::uint64_t run_seed, std::size_t task_index, int sample);

/// Writes records.jsonl, metadata.json, run.log into `dir`.
void write_archive(const std::string& dir, const RunSpec& spec, const RunResult& result);
std::vector<CellRecord> read_records(const std::string& path);

struct ReportOutput {
    MetricReport metrics;
    std::vector<std::string> diagnostics;
    nlohmann::json json;
    std::string ratios_csv;
    std::string pareto_csv;
};

ReportOutput report(const std::vector<CellRecord>& records);
/// Reads <archive>/records.jsonl, writes report.json, ratios.csv, pareto.csv.
ReportOutput report_archive(const std::string& archive_dir, const std::string& out_dir);

/// Resolves the output directory: explicit flag, then spec, then
/// $VLCB_OUT_ROOT/<name>, then ./runs/<name>.
std::string resolve_output(const RunSpec& spec, const std::string& flag);

// ---- trace files ----

/// "VLCTRACE", u32 header length, JSON header (dims, spans, per-layer rows and
/// token indices, cls attention, dtype), then row-major attention per
/// (layer, head) in the header dtype (float32 default).
void write_trace(const std::string& path, const AttentionTrace& trace, bool float64 = false);
AttentionTrace read_trace(const std::string& path);

struct ReplayResult {
    RetentionMask mask;
    nlohmann::json json;  // layer budgets vs uniform average, retained token indices
};

/// Writes one trace per (model, task, sample < samples) into `dir`, using the
/// run's task seeds. Returns the written paths.
std::vector<std::string> export_traces(const RunSpec& spec, const std::string& dir, int samples, bool float64 = false);

ReplayResult replay(const AttentionTrace& trace, const KvPolicySpec& policy);

KvPolicySpec parse_kv_policy(const nlohmann::json& j);
nlohmann::json to_json(const KvPolicySpec& p);

}  // namespace vlcb
