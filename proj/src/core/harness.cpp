// Copyright (C) 2026 The vlcb Authors
// SPDX-License-Identifier: Apache-2.0

#include "vlcb/harness.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

namespace vlcb {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

}  // namespace

std::uint64_t task_seed(std::uint64_t run_seed, std::size_t task, int sample) {
    return splitmix64(splitmix64(run_seed) ^ splitmix64((static_cast<std::uint64_t>(task) << 32) | static_cast<std::uint32_t>(sample)));
}

namespace {

// Strict object reader: unknown keys are configuration errors.
class Obj {
public:
    Obj(const json& j, std::string where) : j_(j), where_(std::move(where)) {
        require(j.is_object(), ErrorCode::ConfigError, where_ + " must be a JSON object");
    }
    ~Obj() noexcept(false) {
        if (std::uncaught_exceptions() > 0) return;
        for (auto it = j_.begin(); it != j_.end(); ++it) {
            if (!seen_.count(it.key())) fail(ErrorCode::ConfigError, where_ + ": unknown key '" + it.key() + "'");
        }
    }
    bool has(const std::string& k) {
        seen_.insert(k);
        return j_.contains(k) && !j_.at(k).is_null();
    }
    template <typename T>
    T get(const std::string& k, T dflt) {
        if (!has(k)) return dflt;
        try {
            return j_.at(k).get<T>();
        } catch (const std::exception& e) {
            fail(ErrorCode::ConfigError, where_ + "." + k + ": " + e.what());
        }
    }
    template <typename T>
    T need(const std::string& k) {
        require(has(k), ErrorCode::ConfigError, where_ + ": missing required key '" + k + "'");
        return get<T>(k, T{});
    }
    const json& raw(const std::string& k) {
        seen_.insert(k);
        return j_.at(k);
    }

private:
    const json& j_;
    std::string where_;
    std::set<std::string> seen_;
};

std::string fmt_budget(double b) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%g", b);
    return buf;
}

void check_budget(double b, const std::string& where) {
    require(std::isfinite(b) && b > 0.0 && b <= 1.0, ErrorCode::ConfigError,
            where + ": budget " + fmt_budget(b) + " outside (0, 1]");
}

void write_text(const fs::path& p, const std::string& s) {
    std::ofstream f(p, std::ios::binary);
    require(static_cast<bool>(f), ErrorCode::IoError, "cannot write '" + p.string() + "'");
    f << s;
    require(static_cast<bool>(f), ErrorCode::IoError, "write to '" + p.string() + "' failed");
}

}  // namespace

const char* family_name(PolicyFamily f) {
    switch (f) {
        case PolicyFamily::Token: return "token";
        case PolicyFamily::Kv: return "kv";
        case PolicyFamily::Param: return "param";
    }
    return "?";
}

const char* token_method_name(TokenMethod m) {
    switch (m) {
        case TokenMethod::FastV: return "FASTV";
        case TokenMethod::VisionZip: return "VISIONZIP";
        case TokenMethod::PruMerge: return "PRUMERGE_PLUS";
    }
    return "?";
}

TokenMethod parse_token_method(const std::string& s) {
    if (s == "FASTV") return TokenMethod::FastV;
    if (s == "VISIONZIP") return TokenMethod::VisionZip;
    if (s == "PRUMERGE_PLUS" || s == "PRUMERGE+") return TokenMethod::PruMerge;
    fail(ErrorCode::ConfigError, "unknown token-prune method '" + s + "'");
}

KvPolicySpec parse_kv_policy(const json& j) {
    Obj o(j, "kv policy");
    KvPolicySpec p;
    p.method = parse_kv_method(o.need<std::string>("method"));
    p.budget = o.get<double>("budget", 1.0);
    if (o.has("allocation_mode")) p.allocation = parse_allocation(o.get<std::string>("allocation_mode", ""));
    p.alpha = o.get<double>("alpha", 0.0);
    p.head_adaptive = o.get<bool>("head_adaptive", false);
    if (o.has("merge_strategy")) p.merge = parse_merge(o.get<std::string>("merge_strategy", ""));
    p.window = o.get<int>("window", 8);
    if (o.has("text_prior")) p.text_prior = parse_text_prior(o.get<std::string>("text_prior", ""));
    p.weighting = parse_weighting(o.get<std::string>("merge_weighting", "EQUAL"));
    p.concat_divisor = o.get<double>("concat_divisor", 6.4);
    (void)o.has("family");
    (void)o.has("label");
    (void)o.has("budgets");
    return p;
}

json to_json(const KvPolicySpec& p) {
    const KvPolicy r = resolve(p);
    return {{"method", kv_method_name(p.method)},
            {"budget", p.budget},
            {"allocation_mode", allocation_name(r.allocation)},
            {"alpha", p.alpha},
            {"head_adaptive", p.head_adaptive},
            {"merge_strategy", merge_name(r.merge)},
            {"window", p.window},
            {"text_prior", text_prior_name(r.text_prior)},
            {"merge_weighting", weighting_name(p.weighting)},
            {"concat_divisor", p.concat_divisor}};
}

PolicySpec parse_policy(const json& j) {
    require(j.is_object(), ErrorCode::ConfigError, "policy must be a JSON object");
    PolicySpec p;
    const std::string family = j.value("family", "");
    const std::string label = j.value("label", "");
    require(!label.empty(), ErrorCode::ConfigError, "policy needs a non-empty label");
    require(label.find('@') == std::string::npos && label != kBaselineMethod, ErrorCode::ConfigError,
            "policy label '" + label + "' is reserved or contains '@'");
    p.label = label;
    if (family == "kv") {
        p.family = PolicyFamily::Kv;
        p.kv = parse_kv_policy(j);
    } else if (family == "token") {
        p.family = PolicyFamily::Token;
        Obj o(j, "token policy '" + label + "'");
        (void)o.has("family");
        (void)o.has("label");
        p.token_method = parse_token_method(o.need<std::string>("method"));
        p.fastv.layer = o.get<int>("layer", 2);
        p.fastv.variant = parse_fastv_variant(o.get<std::string>("variant", "ORIGIN"));
        p.fastv.sink_fraction = o.get<double>("sink_fraction", 0.10);
        p.divisor = o.get<double>("divisor", 6.4);
        p.budgets = o.get<std::vector<double>>("budgets", {});
        require(p.fastv.sink_fraction > 0.0 && p.fastv.sink_fraction <= 1.0, ErrorCode::ConfigError,
                "sink_fraction must lie in (0, 1]");
        require(p.divisor > 0.0, ErrorCode::ConfigError, "divisor must be positive");
        require(p.fastv.layer >= 1, ErrorCode::ConfigError, "FastV layer must be >= 1");
    } else if (family == "param") {
        p.family = PolicyFamily::Param;
        Obj o(j, "param policy '" + label + "'");
        (void)o.has("family");
        (void)o.has("label");
        ParamSpec& s = p.param;
        s.method = parse_param_method(o.need<std::string>("method"));
        s.density = o.get<double>("density", 0.5);
        s.pattern = parse_pattern(o.get<std::string>("pattern", "UNSTRUCTURED"));
        s.bits = o.get<int>("bits", 4);
        s.group_size = o.get<int>("group_size", 128);
        s.damping = o.get<double>("damping", 1e-2);
        s.eps = o.get<double>("eps", 1e-2);
        s.trials = o.get<int>("trials", 32);
        s.eco_samples = o.get<int>("eco_samples", 8);
        s.temperature = o.get<double>("temperature", 1.0);
        s.calib_samples = o.get<int>("calib_samples", 128);
        s.calib_l_v = o.get<int>("calib_l_v", 16);
        s.calib_seed = o.get<std::uint64_t>("calib_seed", 0xC0FFEE);
        s.awq_grid = o.get<int>("awq_grid", 20);
        validate(s);
    } else {
        fail(ErrorCode::ConfigError, "policy '" + label + "': family must be token, kv or param");
    }
    if (p.family == PolicyFamily::Kv) {
        p.budgets = j.value("budgets", std::vector<double>{});
        (void)resolve(p.kv);
    }
    for (double b : p.budgets) check_budget(b, "policy '" + label + "'");
    return p;
}

json to_json(const PolicySpec& p) {
    json j;
    j["label"] = p.label;
    j["family"] = family_name(p.family);
    switch (p.family) {
        case PolicyFamily::Token:
            j["method"] = token_method_name(p.token_method);
            j["layer"] = p.fastv.layer;
            j["variant"] = fastv_variant_name(p.fastv.variant);
            j["sink_fraction"] = p.fastv.sink_fraction;
            j["divisor"] = p.divisor;
            break;
        case PolicyFamily::Kv: {
            json k = to_json(p.kv);
            k.erase("budget");
            j.update(k);
            break;
        }
        case PolicyFamily::Param: {
            const ParamSpec& s = p.param;
            j["method"] = param_method_name(s.method);
            j["density"] = s.density;
            j["pattern"] = pattern_name(s.pattern);
            j["bits"] = s.bits;
            j["group_size"] = s.group_size;
            j["damping"] = s.damping;
            j["eps"] = s.eps;
            j["trials"] = s.trials;
            j["eco_samples"] = s.eco_samples;
            j["temperature"] = s.temperature;
            j["calib_samples"] = s.calib_samples;
            j["calib_l_v"] = s.calib_l_v;
            j["calib_seed"] = s.calib_seed;
            j["awq_grid"] = s.awq_grid;
            break;
        }
    }
    if (p.family != PolicyFamily::Param) j["budgets"] = p.budgets;
    return j;
}

RunSpec parse_runspec(const json& j) {
    Obj o(j, "run spec");
    RunSpec s;
    s.name = o.get<std::string>("name", "run");
    s.seed = o.get<std::uint64_t>("seed", 1);
    s.jobs = o.get<int>("jobs", 1);
    s.output = o.get<std::string>("output", "");
    s.decode_steps = o.get<int>("decode_steps", 1);
    const std::string timing = o.get<std::string>("timing", "counters");
    require(timing == "counters" || timing == "wallclock", ErrorCode::ConfigError,
            "timing must be 'counters' or 'wallclock'");
    s.wallclock = timing == "wallclock";
    if (o.has("budgets")) s.budgets = o.get<std::vector<double>>("budgets", {});
    require(s.jobs >= 1, ErrorCode::ConfigError, "jobs must be >= 1");
    require(s.decode_steps >= 1, ErrorCode::ConfigError, "decode_steps must be >= 1");
    require(!s.name.empty(), ErrorCode::ConfigError, "name must be non-empty");
    for (double b : s.budgets) check_budget(b, "budgets");

    require(o.has("models"), ErrorCode::ConfigError, "run spec: missing required key 'models'");
    std::set<std::string> ids;
    for (const auto& mj : o.raw("models")) {
        Obj m(mj, "model");
        ModelSpec ms;
        ms.id = m.get<std::string>("id", "toy");
        ms.config.num_layers = m.get<int>("num_layers", 4);
        ms.config.num_heads = m.get<int>("num_heads", 4);
        ms.config.head_dim = m.get<int>("head_dim", 16);
        ms.config.vocab_size = m.get<int>("vocab_size", 512);
        ms.config.seed = m.get<std::uint64_t>("seed", 1);
        ms.config.max_seq_len = m.get<int>("max_seq_len", 16384);
        validate(ms.config);
        require(ids.insert(ms.id).second, ErrorCode::ConfigError, "duplicate model id '" + ms.id + "'");
        s.models.push_back(ms);
    }
    require(!s.models.empty(), ErrorCode::ConfigError, "run spec needs at least one model");

    require(o.has("tasks"), ErrorCode::ConfigError, "run spec: missing required key 'tasks'");
    std::set<std::string> bench;
    for (const auto& tj : o.raw("tasks")) {
        Obj t(tj, "task");
        TaskSpec ts;
        ts.kind = parse_task_kind(t.need<std::string>("kind"));
        ts.benchmark = t.get<std::string>("benchmark", task_kind_name(ts.kind));
        ts.params.l_v = t.get<int>("l_v", 256);
        ts.params.l_t = t.get<int>("l_t", -1);
        ts.params.marks = t.get<int>("marks", -1);
        ts.samples = t.get<int>("samples", 20);
        require(ts.samples >= 1, ErrorCode::ConfigError, "task samples must be >= 1");
        require(bench.insert(ts.benchmark).second, ErrorCode::ConfigError,
                "duplicate benchmark '" + ts.benchmark + "'");
        s.tasks.push_back(ts);
    }
    require(!s.tasks.empty(), ErrorCode::ConfigError, "run spec needs at least one task");

    if (o.has("policies")) {
        std::set<std::string> labels;
        for (const auto& pj : o.raw("policies")) {
            PolicySpec p = parse_policy(pj);
            require(labels.insert(p.label).second, ErrorCode::ConfigError, "duplicate policy label '" + p.label + "'");
            s.policies.push_back(std::move(p));
        }
    }
    return s;
}

RunSpec load_runspec(const std::string& path) {
    std::ifstream f(path);
    require(static_cast<bool>(f), ErrorCode::IoError, "cannot open run spec '" + path + "'");
    json j;
    try {
        j = json::parse(f);
    } catch (const std::exception& e) {
        fail(ErrorCode::ConfigError, "run spec '" + path + "' is not valid JSON: " + e.what());
    }
    return parse_runspec(j);
}

json to_json(const RunSpec& s) {
    json j;
    j["name"] = s.name;
    j["seed"] = s.seed;
    j["jobs"] = s.jobs;
    j["output"] = s.output;
    j["decode_steps"] = s.decode_steps;
    j["timing"] = s.wallclock ? "wallclock" : "counters";
    j["budgets"] = s.budgets;
    j["models"] = json::array();
    for (const auto& m : s.models) {
        j["models"].push_back({{"id", m.id},
                               {"num_layers", m.config.num_layers},
                               {"num_heads", m.config.num_heads},
                               {"head_dim", m.config.head_dim},
                               {"vocab_size", m.config.vocab_size},
                               {"seed", m.config.seed},
                               {"max_seq_len", m.config.max_seq_len}});
    }
    j["tasks"] = json::array();
    for (const auto& t : s.tasks) {
        j["tasks"].push_back({{"benchmark", t.benchmark},
                              {"kind", task_kind_name(t.kind)},
                              {"l_v", t.params.l_v},
                              {"l_t", t.params.l_t},
                              {"marks", t.params.marks},
                              {"samples", t.samples}});
    }
    j["policies"] = json::array();
    for (const auto& p : s.policies) j["policies"].push_back(to_json(p));
    return j;
}

std::string spec_hash(const RunSpec& spec) {
    // jobs and output do not influence any recorded number
    json j = to_json(spec);
    j.erase("jobs");
    j.erase("output");
    char buf[20];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(j.dump())));
    return buf;
}

std::string method_id(const PolicySpec& p, double budget) {
    if (p.family == PolicyFamily::Param) return p.label;
    return p.label + "@" + fmt_budget(budget);
}

json to_json(const CellRecord& r) {
    json j;
    j["method"] = r.method;
    j["family"] = r.family;
    j["label"] = r.label;
    j["model"] = r.model;
    j["benchmark"] = r.benchmark;
    j["budget"] = r.budget;
    j["status"] = r.status;
    if (!r.error.empty()) j["error"] = r.error;
    j["samples"] = r.samples;
    j["correct"] = r.correct;
    j["score"] = r.score;
    j["predictions"] = r.predictions;
    j["expected"] = r.expected;
    j["ttft"] = r.ttft;
    j["decode"] = r.decode;
    j["total"] = r.total;
    j["retained_cache_entries"] = r.retained_cache_entries;
    j["dropped_merge_rows"] = r.dropped_merge_rows;
    return j;
}

CellRecord record_from_json(const json& j) {
    CellRecord r;
    try {
        r.method = j.at("method");
        r.family = j.at("family");
        r.label = j.value("label", "");
        r.model = j.at("model");
        r.benchmark = j.at("benchmark");
        r.budget = j.at("budget");
        r.status = j.at("status");
        r.error = j.value("error", "");
        r.samples = j.at("samples");
        r.correct = j.at("correct");
        r.score = j.at("score");
        r.predictions = j.at("predictions").get<std::vector<std::string>>();
        r.expected = j.value("expected", std::vector<std::string>{});
        r.ttft = j.at("ttft");
        r.decode = j.at("decode");
        r.total = j.at("total");
        r.retained_cache_entries = j.value("retained_cache_entries", 0.0);
        r.dropped_merge_rows = j.value("dropped_merge_rows", 0);
    } catch (const std::exception& e) {
        fail(ErrorCode::FormatError, std::string("malformed record: ") + e.what());
    }
    return r;
}

std::string prediction_text(const std::vector<int>& tokens) {
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i) out += ' ';
        const int t = tokens[i];
        if (t >= kNumberBase && t < kContentBase) {
            out += std::to_string(t - kNumberBase + 1);
        } else {
            out += "tok" + std::to_string(t);
        }
    }
    return out;
}

PrefillResult token_prefill(const Model& model, const TaskInstance& task, const PolicySpec& policy, double budget) {
    require(policy.family == PolicyFamily::Token, ErrorCode::ConfigError, "policy '" + policy.label + "' is not a token policy");
    if (policy.token_method == TokenMethod::FastV) {
        FastVSpec fs = policy.fastv;
        fs.budget = budget;
        return fastv_prefill(model, task.seq, task.cls_attention, fs).prefill;
    }
    const int lv = task.seq.l_v;
    Mat vis(lv, task.seq.embeddings.cols);
    std::copy_n(task.seq.embeddings.a.begin(), vis.a.size(), vis.a.begin());
    const PruneOutcome po = policy.token_method == TokenMethod::VisionZip
                                ? visionzip_prune(task.cls_attention, vis, budget, policy.divisor)
                                : prumerge_prune(task.cls_attention, vis, budget);
    return prefill(model, apply_prune(task.seq, po));
}

TaskRun run_task(const Model& model, const TaskInstance& task, const PolicySpec* policy, double budget,
                 int decode_steps) {
    require(decode_steps >= 1, ErrorCode::InvalidArgument, "decode_steps must be >= 1");
    TaskRun r;
    const auto probe = task.probe();
    if (policy == nullptr) {
        const PrefillResult pr = prefill(model, task.seq);
        r.generation = decode(model, pr.cache, probe, decode_steps);
        r.ttft_ops = pr.counters.ttft();
    } else if (policy->family == PolicyFamily::Token) {
        const PrefillResult pr = token_prefill(model, task, *policy, budget);
        r.generation = decode(model, pr.cache, probe, decode_steps);
        r.ttft_ops = pr.counters.ttft();
    } else if (policy->family == PolicyFamily::Kv) {
        KvPolicySpec ks = policy->kv;
        ks.budget = budget;
        const PrefillResult pr = prefill(model, task.seq);
        const CompressResult cr = compress(resolve(ks), pr.trace, pr.cache);
        r.generation = decode(model, cr.cache, probe, decode_steps);
        r.ttft_ops = pr.counters.prefill_attention_ops + cr.surcharge_ops;
    } else {
        fail(ErrorCode::ConfigError, "parameter policies apply to the model, not to a single task");
    }
    r.correct = !r.generation.tokens.empty() && r.generation.tokens[0] == task.expected_token;
    return r;
}

// ---- run ----

namespace {

struct Cell {
    std::size_t model = 0;
    int policy = -1;  // -1: baseline
    double budget = 1.0;
    std::string method;
};

struct SampleOut {
    bool ok = false;
    std::string error;
    bool correct = false;
    std::string prediction;
    double ttft = 0.0;
    double decode = 0.0;
    double retained = 0.0;
    bool dropped = false;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

}  // namespace

RunResult run(const RunSpec& spec, const std::function<void(const std::string&)>& progress) {
    RunResult result;
    std::mutex log_mu;
    auto log = [&](const std::string& line) {
        std::lock_guard<std::mutex> lk(log_mu);
        result.log.push_back(line);
        if (progress) progress(line);
    };

    std::vector<Model> models;
    for (const auto& m : spec.models) models.push_back(build_model(m.config));

    // grid cells in archive order
    std::vector<Cell> cells;
    for (std::size_t mi = 0; mi < spec.models.size(); ++mi) {
        cells.push_back({mi, -1, 1.0, kBaselineMethod});
        for (std::size_t pi = 0; pi < spec.policies.size(); ++pi) {
            const auto& p = spec.policies[pi];
            if (p.family == PolicyFamily::Param) {
                const double b = is_quantization(p.param.method) ? p.param.bits / 16.0 : p.param.density;
                cells.push_back({mi, static_cast<int>(pi), b, method_id(p, b)});
                continue;
            }
            for (double b : p.budgets.empty() ? spec.budgets : p.budgets) {
                cells.push_back({mi, static_cast<int>(pi), b, method_id(p, b)});
            }
        }
    }

    // parameter-compressed models, built once per (model, policy)
    std::map<std::pair<std::size_t, int>, Model> param_models;
    std::map<std::pair<std::size_t, int>, std::string> param_errors;
    for (const auto& c : cells) {
        if (c.policy < 0 || spec.policies[c.policy].family != PolicyFamily::Param) continue;
        try {
            param_models.emplace(std::make_pair(c.model, c.policy),
                                 compress_model(models[c.model], spec.policies[c.policy].param).model);
            log("compressed model '" + spec.models[c.model].id + "' with " + c.method);
        } catch (const std::exception& e) {
            param_errors[{c.model, c.policy}] = e.what();
            log("compression failed for " + c.method + ": " + e.what());
        }
    }

    struct Unit {
        std::size_t model;
        std::size_t task;
        int sample;
    };
    std::vector<Unit> units;
    for (std::size_t mi = 0; mi < spec.models.size(); ++mi) {
        for (std::size_t ti = 0; ti < spec.tasks.size(); ++ti) {
            for (int s = 0; s < spec.tasks[ti].samples; ++s) units.push_back({mi, ti, s});
        }
    }
    std::vector<std::vector<SampleOut>> outs(units.size());

    auto run_unit = [&](std::size_t ui) {
        const Unit& u = units[ui];
        const Model& model = models[u.model];
        const TaskSpec& ts = spec.tasks[u.task];
        std::vector<SampleOut>& out = outs[ui];
        out.resize(cells.size());
        std::optional<TaskInstance> task;
        try {
            task = make_task(model, ts.kind, ts.params, task_seed(spec.seed, u.task, u.sample));
        } catch (const std::exception& e) {
            for (auto& o : out) o.error = e.what();
            return;
        }
        const auto probe = task->probe();
        const int steps = spec.decode_steps;

        auto finish = [&](SampleOut& o, const Model& m, const KVCacheState& cache, double ttft, Clock::time_point t0) {
            const auto t1 = Clock::now();
            const GenerationResult g = decode(m, cache, probe, steps);
            o.correct = !g.tokens.empty() && g.tokens[0] == task->expected_token;
            o.prediction = prediction_text(g.tokens);
            o.retained = static_cast<double>(g.retained_cache_entries);
            if (spec.wallclock) {
                o.ttft = std::chrono::duration<double>(t1 - t0).count();
                o.decode = seconds_since(t1);
            } else {
                o.ttft = ttft;
                o.decode = static_cast<double>(g.counters.decode());
            }
            o.ok = true;
        };

        // baseline prefill shared by the baseline cell and every KV cell
        std::optional<PrefillResult> base;
        Clock::time_point base_t0;
        double base_secs = 0.0;
        std::string base_error;
        try {
            base_t0 = Clock::now();
            base = prefill(model, task->seq);
            base_secs = seconds_since(base_t0);
        } catch (const std::exception& e) {
            base_error = e.what();
        }

        for (std::size_t ci = 0; ci < cells.size(); ++ci) {
            const Cell& c = cells[ci];
            if (c.model != u.model) continue;
            SampleOut& o = out[ci];
            try {
                if (c.policy < 0) {
                    require(base.has_value(), ErrorCode::Internal, base_error);
                    finish(o, model, base->cache, static_cast<double>(base->counters.ttft()),
                           Clock::now() - std::chrono::duration_cast<Clock::duration>(std::chrono::duration<double>(base_secs)));
                    continue;
                }
                const PolicySpec& p = spec.policies[c.policy];
                switch (p.family) {
                    case PolicyFamily::Kv: {
                        require(base.has_value(), ErrorCode::Internal, base_error);
                        KvPolicySpec ks = p.kv;
                        ks.budget = c.budget;
                        const auto t0 = Clock::now() -
                                        std::chrono::duration_cast<Clock::duration>(std::chrono::duration<double>(base_secs));
                        const CompressResult cr = compress(resolve(ks), base->trace, base->cache);
                        o.dropped = cr.dropped_rows;
                        finish(o, model, cr.cache,
                               static_cast<double>(base->counters.prefill_attention_ops + cr.surcharge_ops), t0);
                        break;
                    }
                    case PolicyFamily::Token: {
                        const auto t0 = Clock::now();
                        const PrefillResult pr = token_prefill(model, *task, p, c.budget);
                        finish(o, model, pr.cache, static_cast<double>(pr.counters.ttft()), t0);
                        break;
                    }
                    case PolicyFamily::Param: {
                        auto key = std::make_pair(c.model, c.policy);
                        auto err = param_errors.find(key);
                        require(err == param_errors.end(), ErrorCode::Internal,
                                err == param_errors.end() ? "" : err->second);
                        const Model& pm = param_models.at(key);
                        const auto t0 = Clock::now();
                        const PrefillResult pr = prefill(pm, task->seq);
                        finish(o, pm, pr.cache, static_cast<double>(pr.counters.ttft()), t0);
                        break;
                    }
                }
            } catch (const std::exception& e) {
                o.ok = false;
                o.error = e.what();
            }
        }
    };

    std::atomic<std::size_t> next{0};
    std::atomic<std::size_t> done{0};
    auto worker = [&]() {
        for (std::size_t ui = next++; ui < units.size(); ui = next++) {
            run_unit(ui);
            const std::size_t d = ++done;
            if (d % 50 == 0 || d == units.size()) {
                log("samples " + std::to_string(d) + "/" + std::to_string(units.size()));
            }
        }
    };
    const int jobs = std::max(1, std::min<int>(spec.jobs, static_cast<int>(units.size())));
    if (jobs == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int t = 0; t < jobs; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }

    // aggregate in (cell, task) order
    for (std::size_t ci = 0; ci < cells.size(); ++ci) {
        const Cell& c = cells[ci];
        for (std::size_t ti = 0; ti < spec.tasks.size(); ++ti) {
            CellRecord r;
            r.method = c.method;
            r.model = spec.models[c.model].id;
            r.benchmark = spec.tasks[ti].benchmark;
            r.budget = c.budget;
            if (c.policy < 0) {
                r.family = "baseline";
                r.label = kBaselineMethod;
            } else {
                r.family = family_name(spec.policies[c.policy].family);
                r.label = spec.policies[c.policy].label;
            }
            double retained = 0.0;
            for (std::size_t ui = 0; ui < units.size(); ++ui) {
                const Unit& u = units[ui];
                if (u.model != c.model || u.task != ti) continue;
                const SampleOut& o = outs[ui][ci];
                if (!o.ok) {
                    if (r.status == "ok") {
                        r.status = "error";
                        r.error = "sample " + std::to_string(u.sample) + ": " + o.error;
                    }
                    continue;
                }
                ++r.samples;
                r.correct += o.correct ? 1 : 0;
                r.predictions.push_back(o.prediction);
                r.ttft += o.ttft;
                r.decode += o.decode;
                retained += o.retained;
                r.dropped_merge_rows += o.dropped ? 1 : 0;
            }
            if (r.status == "ok") {
                r.score = r.samples ? static_cast<double>(r.correct) / r.samples : 0.0;
                r.retained_cache_entries = r.samples ? retained / r.samples : 0.0;
                r.total = r.ttft + r.decode;
            } else {
                r.samples = 0;
                r.correct = 0;
                r.predictions.clear();
                r.ttft = r.decode = r.total = 0.0;
                r.dropped_merge_rows = 0;
                ++result.failed_cells;
                log("cell " + r.method + " / " + r.model + " / " + r.benchmark + " failed: " + r.error);
            }
            result.records.push_back(std::move(r));
        }
    }
    // expected answers are model-dependent only through the generator
    for (auto& r : result.records) {
        if (r.status != "ok") continue;
        for (std::size_t ti = 0; ti < spec.tasks.size(); ++ti) {
            if (spec.tasks[ti].benchmark != r.benchmark) continue;
            std::size_t mi = 0;
            while (spec.models[mi].id != r.model) ++mi;
            for (int s = 0; s < spec.tasks[ti].samples; ++s) {
                const TaskInstance t =
                    make_task(models[mi], spec.tasks[ti].kind, spec.tasks[ti].params, task_seed(spec.seed, ti, s));
                r.expected.push_back(prediction_text({t.expected_token}));
            }
        }
    }
    log("cells " + std::to_string(cells.size()) + ", records " + std::to_string(result.records.size()) +
        ", failed " + std::to_string(result.failed_cells));
    return result;
}

void write_archive(const std::string& dir, const RunSpec& spec, const RunResult& result) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    require(!ec, ErrorCode::IoError, "cannot create output directory '" + dir + "': " + ec.message());
    std::string lines;
    for (const auto& r : result.records) lines += to_json(r).dump() + "\n";
    write_text(fs::path(dir) / "records.jsonl", lines);

    json meta;
    meta["spec_hash"] = spec_hash(spec);
    meta["tool_version"] = VLCB_VERSION;
    meta["seed"] = spec.seed;
    meta["spec"] = to_json(spec);
    meta["records"] = result.records.size();
    meta["failed_cells"] = result.failed_cells;
    meta["timing"] = spec.wallclock ? "wallclock seconds" : "attention multiply-accumulate counters";
    meta["sigma"] = "population";
    meta["agreement"] = "exact_match (token_f1>=0.5 also reported)";
    const std::time_t now = std::time(nullptr);
    char ts[32];
    std::strftime(ts, sizeof ts, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    meta["created_at"] = ts;
    write_text(fs::path(dir) / "metadata.json", meta.dump(2) + "\n");

    std::string log;
    for (const auto& l : result.log) log += l + "\n";
    write_text(fs::path(dir) / "run.log", log);
}

std::vector<CellRecord> read_records(const std::string& path) {
    std::ifstream f(path);
    require(static_cast<bool>(f), ErrorCode::IoError, "cannot open records '" + path + "'");
    std::vector<CellRecord> out;
    std::string line;
    int n = 0;
    while (std::getline(f, line)) {
        ++n;
        if (line.empty()) continue;
        try {
            out.push_back(record_from_json(json::parse(line)));
        } catch (const json::exception& e) {
            fail(ErrorCode::FormatError, path + ":" + std::to_string(n) + ": " + e.what());
        }
    }
    return out;
}

// ---- report ----

ReportOutput report(const std::vector<CellRecord>& records) {
    ReportOutput out;
    std::map<std::pair<std::string, std::string>, const CellRecord*> base;
    for (const auto& r : records) {
        if (r.method == kBaselineMethod && r.status == "ok") base[{r.model, r.benchmark}] = &r;
    }
    std::map<std::string, std::vector<EvalRecord>> by_method;
    std::map<std::string, const CellRecord*> first;
    std::set<std::string> broken;
    for (const auto& r : records) {
        first.emplace(r.method, &r);
        if (r.status != "ok") {
            out.diagnostics.push_back("method '" + r.method + "': cell (" + r.model + ", " + r.benchmark +
                                      ") failed: " + r.error);
            broken.insert(r.method);
            continue;
        }
        auto b = base.find({r.model, r.benchmark});
        if (b == base.end()) {
            out.diagnostics.push_back("method '" + r.method + "': no baseline for (" + r.model + ", " + r.benchmark +
                                      ")");
            broken.insert(r.method);
            continue;
        }
        const CellRecord& br = *b->second;
        EvalRecord e;
        e.method = r.method;
        e.model = r.model;
        e.benchmark = r.benchmark;
        e.em = r.score;
        e.em_base = br.score;
        e.predictions = r.predictions;
        e.predictions_base = br.predictions;
        e.t = r.total;
        e.t_base = br.total;
        e.ttft = r.ttft;
        e.ttft_base = br.ttft;
        e.decode = r.decode;
        e.decode_base = br.decode;
        by_method[r.method].push_back(std::move(e));
    }
    // every method must cover every (model, benchmark) its models have baselines for
    std::map<std::string, std::set<std::string>> bench_of;
    for (const auto& [k, v] : base) bench_of[k.first].insert(k.second);

    json methods = json::array();
    std::string ratios = "method,family,label,budget,model,benchmark,ratio,ttft_speedup,decode_speedup,speedup\n";
    std::string pareto = "method,family,label,budget,ttft_speedup,speedup,op\n";
    for (const auto& [method, recs] : by_method) {
        if (broken.count(method)) continue;
        const CellRecord& meta = *first.at(method);
        std::set<std::pair<std::string, std::string>> have;
        for (const auto& e : recs) have.insert({e.model, e.benchmark});
        bool complete = true;
        for (const auto& [model, bs] : bench_of) {
            bool any = false;
            for (const auto& e : recs) any = any || e.model == model;
            if (!any) continue;
            for (const auto& b : bs) {
                if (!have.count({model, b})) {
                    out.diagnostics.push_back("method '" + method + "': missing benchmark '" + b + "' for model '" +
                                              model + "'");
                    complete = false;
                }
            }
        }
        if (!complete) continue;
        MetricReport mr;
        try {
            mr = build_report(recs);
        } catch (const Error& e) {
            out.diagnostics.push_back("method '" + method + "': " + std::string(e.what()));
            continue;
        }
        const MethodMetrics& mm = mr.methods.at(0);
        json mj;
        mj["method"] = method;
        mj["family"] = meta.family;
        mj["label"] = meta.label;
        mj["budget"] = meta.budget;
        mj["OP"] = mm.op;
        mj["OG"] = mm.og;
        mj["OL"] = mm.ol;
        mj["OL_f1"] = mm.ol_f1;
        mj["OE"] = mm.oe.oe;
        mj["ttft_speedup"] = mm.oe.ttft;
        mj["decode_speedup"] = mm.oe.decode;
        methods.push_back(mj);
        double op_mean = 0.0;
        for (const auto& kv : mm.op) op_mean += kv.second;
        op_mean /= static_cast<double>(mm.op.size());
        char buf[512];
        std::snprintf(buf, sizeof buf, "%s,%s,%s,%g,%.17g,%.17g,%.17g\n", method.c_str(), meta.family.c_str(),
                      meta.label.c_str(), meta.budget, mm.oe.ttft, mm.oe.oe, op_mean);
        pareto += buf;
        for (const auto& row : mr.ratios) {
            std::snprintf(buf, sizeof buf, "%s,%s,%s,%g,%s,%s,%.17g,%.17g,%.17g,%.17g\n", method.c_str(),
                          meta.family.c_str(), meta.label.c_str(), meta.budget, row.model.c_str(),
                          row.benchmark.c_str(), row.ratio, row.ttft_speedup, row.decode_speedup, row.speedup);
            ratios += buf;
        }
        out.metrics.methods.insert(out.metrics.methods.end(), mr.methods.begin(), mr.methods.end());
        out.metrics.ratios.insert(out.metrics.ratios.end(), mr.ratios.begin(), mr.ratios.end());
    }
    out.json["methods"] = methods;
    out.json["diagnostics"] = out.diagnostics;
    out.json["conventions"] = {{"sigma", "population"},
                               {"agreement", "exact_match"},
                               {"op", "per-benchmark mean ratio, then root mean square"},
                               {"og", "model-averaged ratio per benchmark; sigma over benchmarks / grand mean"}};
    out.ratios_csv = ratios;
    out.pareto_csv = pareto;
    return out;
}

ReportOutput report_archive(const std::string& archive_dir, const std::string& out_dir) {
    const auto records = read_records((fs::path(archive_dir) / "records.jsonl").string());
    ReportOutput r = report(records);
    const std::string dir = out_dir.empty() ? archive_dir : out_dir;
    std::error_code ec;
    fs::create_directories(dir, ec);
    require(!ec, ErrorCode::IoError, "cannot create report directory '" + dir + "'");
    write_text(fs::path(dir) / "report.json", r.json.dump(2) + "\n");
    write_text(fs::path(dir) / "ratios.csv", r.ratios_csv);
    write_text(fs::path(dir) / "pareto.csv", r.pareto_csv);
    return r;
}

std::string resolve_output(const RunSpec& spec, const std::string& flag) {
    if (!flag.empty()) return flag;
    if (!spec.output.empty()) return spec.output;
    if (const char* root = std::getenv("VLCB_OUT_ROOT"); root != nullptr && *root != '\0') {
        return (fs::path(root) / spec.name).string();
    }
    return (fs::path("runs") / spec.name).string();
}

// ---- traces ----

namespace {
constexpr char kTraceMagic[8] = {'V', 'L', 'C', 'T', 'R', 'A', 'C', 'E'};
}

void write_trace(const std::string& path, const AttentionTrace& trace, bool float64) {
    const int L = trace.num_layers();
    const int H = trace.num_heads();
    json h;
    h["version"] = 1;
    h["l_v"] = trace.l_v;
    h["l"] = trace.l;
    h["num_layers"] = L;
    h["num_heads"] = H;
    h["dtype"] = float64 ? "float64" : "float32";
    h["layout"] = "row-major [layer][head][row][col]";
    json rows = json::array();
    for (int k = 0; k < L; ++k) rows.push_back(trace.attn[k][0].rows);
    h["rows"] = rows;
    h["token_index"] = trace.token_index;
    h["cls_attention"] = trace.cls_attention;
    std::string body;
    for (int k = 0; k < L; ++k) {
        require(static_cast<int>(trace.attn[k].size()) == H, ErrorCode::ShapeMismatch, "ragged head count");
        for (int hh = 0; hh < H; ++hh) {
            const Mat& a = trace.attn[k][hh];
            if (float64) {
                body.append(reinterpret_cast<const char*>(a.a.data()), a.a.size() * sizeof(double));
            } else {
                std::vector<float> f(a.a.begin(), a.a.end());
                body.append(reinterpret_cast<const char*>(f.data()), f.size() * sizeof(float));
            }
        }
    }
    const std::string hs = h.dump();
    const auto hl = static_cast<std::uint32_t>(hs.size());
    std::ofstream f(path, std::ios::binary);
    require(static_cast<bool>(f), ErrorCode::IoError, "cannot open '" + path + "' for writing");
    f.write(kTraceMagic, 8);
    f.write(reinterpret_cast<const char*>(&hl), 4);
    f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    f.write(body.data(), static_cast<std::streamsize>(body.size()));
    require(static_cast<bool>(f), ErrorCode::IoError, "write to '" + path + "' failed");
}

AttentionTrace read_trace(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    require(static_cast<bool>(f), ErrorCode::IoError, "cannot open trace '" + path + "'");
    std::string all((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    require(all.size() >= 12 && std::memcmp(all.data(), kTraceMagic, 8) == 0, ErrorCode::FormatError,
            "malformed header: bad trace magic");
    std::uint32_t hl = 0;
    std::memcpy(&hl, all.data() + 8, 4);
    require(12 + static_cast<std::size_t>(hl) <= all.size(), ErrorCode::FormatError,
            "malformed header: length out of range");
    AttentionTrace t;
    std::size_t off = 12 + hl;
    try {
        const json h = json::parse(all.substr(12, hl));
        require(h.at("version") == 1, ErrorCode::FormatError, "unsupported trace version");
        t.l_v = h.at("l_v");
        t.l = h.at("l");
        const int L = h.at("num_layers"), H = h.at("num_heads");
        const std::string dtype = h.at("dtype");
        require(dtype == "float32" || dtype == "float64", ErrorCode::FormatError, "unknown dtype '" + dtype + "'");
        const auto rows = h.at("rows").get<std::vector<std::size_t>>();
        t.token_index = h.at("token_index").get<std::vector<std::vector<int>>>();
        t.cls_attention = h.at("cls_attention").get<std::vector<double>>();
        require(L >= 1 && H >= 1 && rows.size() == static_cast<std::size_t>(L) &&
                    t.token_index.size() == static_cast<std::size_t>(L),
                ErrorCode::ShapeMismatch, "dimension mismatch between header fields");
        require(t.l_v >= 0 && t.l_v <= t.l, ErrorCode::ShapeMismatch, "visual span exceeds sequence length");
        const std::size_t es = dtype == "float32" ? sizeof(float) : sizeof(double);
        t.attn.resize(L);
        for (int k = 0; k < L; ++k) {
            const std::size_t n = rows[k];
            require(n >= 1 && n <= static_cast<std::size_t>(t.l) && t.token_index[k].size() == n,
                    ErrorCode::ShapeMismatch, "dimension mismatch in layer " + std::to_string(k));
            for (int hh = 0; hh < H; ++hh) {
                Mat a(n, n);
                const std::size_t bytes = n * n * es;
                require(off + bytes <= all.size(), ErrorCode::ShapeMismatch, "trace body shorter than header dims");
                if (es == sizeof(float)) {
                    std::vector<float> fbuf(n * n);
                    std::memcpy(fbuf.data(), all.data() + off, bytes);
                    std::copy(fbuf.begin(), fbuf.end(), a.a.begin());
                } else {
                    std::memcpy(a.a.data(), all.data() + off, bytes);
                }
                off += bytes;
                t.attn[k].push_back(std::move(a));
            }
        }
    } catch (const Error&) {
        throw;
    } catch (const std::exception& e) {
        fail(ErrorCode::FormatError, std::string("malformed header: ") + e.what());
    }
    require(off == all.size(), ErrorCode::ShapeMismatch, "trace body longer than header dims");
    return t;
}

std::vector<std::string> export_traces(const RunSpec& spec, const std::string& dir, int samples, bool float64) {
    require(samples >= 1, ErrorCode::InvalidArgument, "samples must be >= 1");
    std::error_code ec;
    fs::create_directories(dir, ec);
    require(!ec, ErrorCode::IoError, "cannot create trace directory '" + dir + "'");
    std::vector<std::string> paths;
    for (const auto& ms : spec.models) {
        const Model model = build_model(ms.config);
        for (std::size_t ti = 0; ti < spec.tasks.size(); ++ti) {
            const TaskSpec& ts = spec.tasks[ti];
            for (int s = 0; s < std::min(samples, ts.samples); ++s) {
                const TaskInstance t = make_task(model, ts.kind, ts.params, task_seed(spec.seed, ti, s));
                PrefillResult pr = prefill(model, t.seq);
                pr.trace.cls_attention = t.cls_attention;
                const fs::path p = fs::path(dir) / (ms.id + "__" + ts.benchmark + "__" + std::to_string(s) + ".vlct");
                write_trace(p.string(), pr.trace, float64);
                paths.push_back(p.string());
            }
        }
    }
    return paths;
}

ReplayResult replay(const AttentionTrace& trace, const KvPolicySpec& policy) {
    ReplayResult r;
    const KvPolicy p = resolve(policy);
    r.mask = plan(p, trace);
    const auto& al = r.mask.allocation;
    const double avg = static_cast<double>(al.total()) / static_cast<double>(al.quotas.size());
    json layers = json::array();
    for (std::size_t k = 0; k < al.quotas.size(); ++k) {
        json lj;
        lj["layer"] = k;
        lj["quota"] = al.quotas[k];
        lj["recent_window"] = al.recent[k];
        lj["uniform_average"] = avg;
        lj["ratio_to_average"] = al.quotas[k] / avg;
        json heads = json::array();
        for (const auto& rows : r.mask.retained[k]) {
            std::vector<int> idx;
            for (int row : rows) idx.push_back(trace.token_index[k][row]);
            heads.push_back(idx);
        }
        lj["retained"] = heads;
        layers.push_back(lj);
    }
    r.json["policy"] = to_json(policy);
    r.json["l"] = trace.l;
    r.json["l_v"] = trace.l_v;
    r.json["total_quota"] = al.total();
    r.json["uniform_quota"] = al.uniform_quota;
    r.json["layers"] = layers;
    return r;
}

}  // namespace vlcb
