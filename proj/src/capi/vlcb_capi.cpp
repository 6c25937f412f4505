// Copyright (C) 2026 The vlcb Authors
// SPDX-License-Identifier: Apache-2.0

#include "vlcb/vlcb.h"

#include <cstdlib>
#include <cstring>
#include <memory>
#include <string>

#include "vlcb/harness.hpp"

struct vlcb_model {
    vlcb::Model model;
};

struct vlcb_task {
    vlcb::TaskInstance task;
};

struct vlcb_trace {
    vlcb::AttentionTrace trace;
};

namespace {

thread_local std::string g_last_error;

vlcb_status set_error(vlcb_status s, const std::string& msg) {
    g_last_error = msg;
    return s;
}

template <typename F>
vlcb_status guard(F&& f) {
    g_last_error.clear();
    try {
        f();
        return VLCB_OK;
    } catch (const vlcb::Error& e) {
        return set_error(static_cast<vlcb_status>(e.code()), e.what());
    } catch (const nlohmann::json::exception& e) {
        return set_error(VLCB_E_CONFIG, e.what());
    } catch (const std::bad_alloc&) {
        return set_error(VLCB_E_INTERNAL, "out of memory");
    } catch (const std::exception& e) {
        return set_error(VLCB_E_INTERNAL, e.what());
    }
}

void need(const void* p, const char* what) {
    vlcb::require(p != nullptr, vlcb::ErrorCode::InvalidArgument, std::string(what) + " is NULL");
}

char* dup_string(const std::string& s) {
    char* out = static_cast<char*>(std::malloc(s.size() + 1));
    if (out == nullptr) throw std::bad_alloc();
    std::memcpy(out, s.c_str(), s.size() + 1);
    return out;
}

nlohmann::json parse_json(const char* text, const char* what) {
    need(text, what);
    try {
        return nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        vlcb::fail(vlcb::ErrorCode::ConfigError, std::string(what) + " is not valid JSON: " + e.what());
    }
}

vlcb::PolicySpec parse_any_policy(const char* text) {
    nlohmann::json j = parse_json(text, "policy");
    vlcb::require(j.is_object(), vlcb::ErrorCode::ConfigError, "policy must be a JSON object");
    if (!j.contains("label")) j["label"] = "policy";
    return vlcb::parse_policy(j);
}

vlcb::ParamSpec parse_param(const char* text) {
    nlohmann::json j = parse_json(text, "param policy");
    vlcb::require(j.is_object(), vlcb::ErrorCode::ConfigError, "param policy must be a JSON object");
    j["family"] = "param";
    if (!j.contains("label")) j["label"] = "param";
    return vlcb::parse_policy(j).param;
}

std::vector<vlcb::EvalRecord> to_records(const vlcb_eval_record* r, size_t n) {
    vlcb::require(n == 0 || r != nullptr, vlcb::ErrorCode::InvalidArgument, "records is NULL");
    std::vector<vlcb::EvalRecord> out(n);
    for (size_t i = 0; i < n; ++i) {
        auto& e = out[i];
        e.method = r[i].method ? r[i].method : "";
        e.model = r[i].model ? r[i].model : "";
        e.benchmark = r[i].benchmark ? r[i].benchmark : "";
        e.em = r[i].em;
        e.em_base = r[i].em_base;
        for (size_t k = 0; k < r[i].n_predictions; ++k) {
            need(r[i].predictions, "predictions");
            need(r[i].predictions_base, "predictions_base");
            e.predictions.emplace_back(r[i].predictions[k] ? r[i].predictions[k] : "");
            e.predictions_base.emplace_back(r[i].predictions_base[k] ? r[i].predictions_base[k] : "");
        }
        e.t = r[i].t;
        e.t_base = r[i].t_base;
        e.ttft = r[i].ttft;
        e.ttft_base = r[i].ttft_base;
        e.decode = r[i].decode;
        e.decode_base = r[i].decode_base;
    }
    return out;
}

vlcb::RunSpec load_spec(const char* path, const vlcb_run_options* opts) {
    need(path, "spec path");
    vlcb::RunSpec spec = vlcb::load_runspec(path);
    if (opts == nullptr) return spec;
    if (opts->has_seed) spec.seed = opts->seed;
    if (opts->jobs > 0) spec.jobs = opts->jobs;
    if (opts->budgets != nullptr) {
        vlcb::require(opts->n_budgets > 0, vlcb::ErrorCode::ConfigError, "budget list is empty");
        spec.budgets.assign(opts->budgets, opts->budgets + opts->n_budgets);
        for (double b : spec.budgets) {
            vlcb::require(b > 0.0 && b <= 1.0, vlcb::ErrorCode::ConfigError, "budgets must lie in (0, 1]");
        }
    }
    return spec;
}

vlcb::TaskRun run_one(const vlcb_model* model, const vlcb_task* task, const char* policy_json, double budget,
                      int decode_steps) {
    need(model, "model");
    need(task, "task");
    if (policy_json == nullptr) return vlcb::run_task(model->model, task->task, nullptr, 1.0, decode_steps);
    const vlcb::PolicySpec p = parse_any_policy(policy_json);
    vlcb::require(budget > 0.0 && budget <= 1.0, vlcb::ErrorCode::ConfigError, "budget must lie in (0, 1]");
    return vlcb::run_task(model->model, task->task, &p, budget, decode_steps);
}

}  // namespace

extern "C" {

const char* vlcb_version(void) { return VLCB_VERSION; }

const char* vlcb_status_name(vlcb_status status) {
    return vlcb::error_code_name(static_cast<vlcb::ErrorCode>(status));
}

const char* vlcb_last_error(void) { return g_last_error.c_str(); }

void vlcb_string_free(char* s) { std::free(s); }

void vlcb_model_config_default(vlcb_model_config* cfg) {
    if (cfg == nullptr) return;
    const vlcb::ModelConfig d;
    cfg->num_layers = d.num_layers;
    cfg->num_heads = d.num_heads;
    cfg->head_dim = d.head_dim;
    cfg->vocab_size = d.vocab_size;
    cfg->seed = d.seed;
    cfg->max_seq_len = d.max_seq_len;
}

vlcb_status vlcb_model_create(const vlcb_model_config* cfg, vlcb_model** out) {
    return guard([&] {
        need(cfg, "cfg");
        need(out, "out");
        vlcb::ModelConfig c;
        c.num_layers = cfg->num_layers;
        c.num_heads = cfg->num_heads;
        c.head_dim = cfg->head_dim;
        c.vocab_size = cfg->vocab_size;
        c.seed = cfg->seed;
        c.max_seq_len = cfg->max_seq_len;
        *out = new vlcb_model{vlcb::build_model(c)};
    });
}

vlcb_status vlcb_model_compress(const vlcb_model* model, const char* param_policy_json, vlcb_model** out) {
    return guard([&] {
        need(model, "model");
        need(out, "out");
        const vlcb::ParamSpec spec = parse_param(param_policy_json);
        *out = new vlcb_model{vlcb::compress_model(model->model, spec).model};
    });
}

vlcb_status vlcb_model_compress_to_file(const vlcb_model* model, const char* param_policy_json, const char* path) {
    return guard([&] {
        need(model, "model");
        need(path, "path");
        const vlcb::ParamSpec spec = parse_param(param_policy_json);
        vlcb::save_compressed(path, vlcb::compress_model(model->model, spec));
    });
}

vlcb_status vlcb_model_load_compressed(const char* path, vlcb_model** out) {
    return guard([&] {
        need(path, "path");
        need(out, "out");
        *out = new vlcb_model{vlcb::load_compressed(path).model};
    });
}

vlcb_status vlcb_model_checksum(const vlcb_model* model, uint64_t* out) {
    return guard([&] {
        need(model, "model");
        need(out, "out");
        *out = model->model.checksum();
    });
}

void vlcb_model_destroy(vlcb_model* model) { delete model; }

vlcb_status vlcb_task_create(const vlcb_model* model, const char* kind, int l_v, int l_t, uint64_t seed,
                             vlcb_task** out) {
    return guard([&] {
        need(model, "model");
        need(kind, "kind");
        need(out, "out");
        vlcb::TaskParams p;
        p.l_v = l_v;
        p.l_t = l_t;
        *out = new vlcb_task{vlcb::make_task(model->model, vlcb::parse_task_kind(kind), p, seed)};
    });
}

vlcb_status vlcb_task_info(const vlcb_task* task, int* l_v, int* l, int* expected_token) {
    return guard([&] {
        need(task, "task");
        if (l_v) *l_v = task->task.seq.l_v;
        if (l) *l = static_cast<int>(task->task.seq.tokens.size());
        if (expected_token) *expected_token = task->task.expected_token;
    });
}

void vlcb_task_destroy(vlcb_task* task) { delete task; }

vlcb_status vlcb_run_task(const vlcb_model* model, const vlcb_task* task, const char* policy_json, double budget,
                          int decode_steps, vlcb_generation* out) {
    return guard([&] {
        need(out, "out");
        const vlcb::TaskRun r = run_one(model, task, policy_json, budget, decode_steps);
        out->first_token = r.generation.tokens.empty() ? -1 : r.generation.tokens[0];
        out->correct = r.correct ? 1 : 0;
        out->ttft_ops = r.ttft_ops;
        out->decode_ops = r.generation.counters.decode();
        out->retained_cache_entries = r.generation.retained_cache_entries;
    });
}

vlcb_status vlcb_run_task_tokens(const vlcb_model* model, const vlcb_task* task, const char* policy_json,
                                 double budget, int decode_steps, int** out_tokens, size_t* n_tokens) {
    return guard([&] {
        need(out_tokens, "out_tokens");
        need(n_tokens, "n_tokens");
        const vlcb::TaskRun r = run_one(model, task, policy_json, budget, decode_steps);
        const auto& t = r.generation.tokens;
        int* buf = static_cast<int*>(std::malloc(std::max<size_t>(1, t.size()) * sizeof(int)));
        if (buf == nullptr) throw std::bad_alloc();
        std::copy(t.begin(), t.end(), buf);
        *out_tokens = buf;
        *n_tokens = t.size();
    });
}

void vlcb_tokens_free(int* tokens) { std::free(tokens); }

vlcb_status vlcb_trace_capture(const vlcb_model* model, const vlcb_task* task, vlcb_trace** out) {
    return guard([&] {
        need(model, "model");
        need(task, "task");
        need(out, "out");
        vlcb::PrefillResult pr = vlcb::prefill(model->model, task->task.seq);
        pr.trace.cls_attention = task->task.cls_attention;
        *out = new vlcb_trace{std::move(pr.trace)};
    });
}

vlcb_status vlcb_trace_save(const vlcb_trace* trace, const char* path, int float64) {
    return guard([&] {
        need(trace, "trace");
        need(path, "path");
        vlcb::write_trace(path, trace->trace, float64 != 0);
    });
}

vlcb_status vlcb_trace_load(const char* path, vlcb_trace** out) {
    return guard([&] {
        need(path, "path");
        need(out, "out");
        *out = new vlcb_trace{vlcb::read_trace(path)};
    });
}

vlcb_status vlcb_trace_dims(const vlcb_trace* trace, int* num_layers, int* num_heads, int* l_v, int* l) {
    return guard([&] {
        need(trace, "trace");
        if (num_layers) *num_layers = trace->trace.num_layers();
        if (num_heads) *num_heads = trace->trace.num_heads();
        if (l_v) *l_v = trace->trace.l_v;
        if (l) *l = trace->trace.l;
    });
}

vlcb_status vlcb_trace_row(const vlcb_trace* trace, int layer, int head, int row, double* out) {
    return guard([&] {
        need(trace, "trace");
        need(out, "out");
        const auto& t = trace->trace;
        vlcb::require(layer >= 0 && layer < t.num_layers() && head >= 0 && head < t.num_heads(),
                      vlcb::ErrorCode::InvalidArgument, "layer or head out of range");
        const vlcb::Mat& a = t.attn[layer][head];
        vlcb::require(row >= 0 && static_cast<std::size_t>(row) < a.rows, vlcb::ErrorCode::InvalidArgument,
                      "row out of range");
        std::copy_n(a.row(row), row + 1, out);
    });
}

vlcb_status vlcb_trace_replay(const vlcb_trace* trace, const char* kv_policy_json, double budget, char** out_json) {
    return guard([&] {
        need(trace, "trace");
        need(out_json, "out_json");
        vlcb::KvPolicySpec p = vlcb::parse_kv_policy(parse_json(kv_policy_json, "kv policy"));
        if (budget > 0.0) p.budget = budget;
        *out_json = dup_string(vlcb::replay(trace->trace, p).json.dump());
    });
}

void vlcb_trace_destroy(vlcb_trace* trace) { delete trace; }

vlcb_status vlcb_overall_performance(const vlcb_eval_record* records, size_t n, double* out) {
    return guard([&] {
        need(out, "out");
        *out = vlcb::overall_performance(to_records(records, n));
    });
}

vlcb_status vlcb_generalization(const vlcb_eval_record* records, size_t n, double* out) {
    return guard([&] {
        need(out, "out");
        *out = vlcb::generalization(to_records(records, n));
    });
}

vlcb_status vlcb_loyalty(const vlcb_eval_record* records, size_t n, vlcb_agreement agreement, double* out) {
    return guard([&] {
        need(out, "out");
        const auto recs = to_records(records, n);
        *out = agreement == VLCB_AGREE_F1 ? vlcb::loyalty(recs, vlcb::f1_match) : vlcb::loyalty(recs);
    });
}

vlcb_status vlcb_efficiency(const vlcb_eval_record* records, size_t n, double* oe, double* ttft_speedup,
                            double* decode_speedup) {
    return guard([&] {
        const vlcb::Efficiency e = vlcb::efficiency(to_records(records, n));
        if (oe) *oe = e.oe;
        if (ttft_speedup) *ttft_speedup = e.ttft;
        if (decode_speedup) *decode_speedup = e.decode;
    });
}

void vlcb_run_options_default(vlcb_run_options* opts) {
    if (opts == nullptr) return;
    *opts = vlcb_run_options{};
}

vlcb_status vlcb_spec_canonical(const char* spec_path, const vlcb_run_options* opts, char** out_json) {
    return guard([&] {
        need(out_json, "out_json");
        const vlcb::RunSpec spec = load_spec(spec_path, opts);
        nlohmann::json j = vlcb::to_json(spec);
        j["spec_hash"] = vlcb::spec_hash(spec);
        *out_json = dup_string(j.dump(2));
    });
}

vlcb_status vlcb_harness_run(const char* spec_path, const vlcb_run_options* opts, vlcb_progress_fn progress,
                             void* user, vlcb_run_summary* out) {
    return guard([&] {
        need(out, "out");
        const vlcb::RunSpec spec = load_spec(spec_path, opts);
        const std::string dir = vlcb::resolve_output(spec, opts && opts->out_dir ? opts->out_dir : "");
        std::function<void(const std::string&)> cb;
        if (progress != nullptr) cb = [&](const std::string& line) { progress(line.c_str(), user); };
        const vlcb::RunResult r = vlcb::run(spec, cb);
        vlcb::write_archive(dir, spec, r);
        out->records = r.records.size();
        out->failed_cells = r.failed_cells;
        out->archive_dir = dup_string(dir);
    });
}

vlcb_status vlcb_harness_report(const char* archive_dir, const char* out_dir, char** out_json, int* n_diagnostics) {
    return guard([&] {
        need(archive_dir, "archive_dir");
        const vlcb::ReportOutput r = vlcb::report_archive(archive_dir, out_dir ? out_dir : "");
        if (out_json) *out_json = dup_string(r.json.dump(2));
        if (n_diagnostics) *n_diagnostics = static_cast<int>(r.diagnostics.size());
    });
}

vlcb_status vlcb_harness_export_traces(const char* spec_path, const vlcb_run_options* opts, int samples, int float64,
                                       const char* out_dir, char** out_paths_json) {
    return guard([&] {
        need(out_dir, "out_dir");
        const vlcb::RunSpec spec = load_spec(spec_path, opts);
        const auto paths = vlcb::export_traces(spec, out_dir, samples, float64 != 0);
        if (out_paths_json) *out_paths_json = dup_string(nlohmann::json(paths).dump());
    });
}

}  // extern "C"
