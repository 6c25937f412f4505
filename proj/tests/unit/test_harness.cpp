// Copyright (C) 2026 The vlcb Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <sstream>

#include "fixtures.hpp"
#include "vlcb/harness.hpp"

using namespace vlcb;
namespace vt = vlcb::testing;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

ErrorCode code_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    return ErrorCode::Ok;
}

fs::path temp_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("vlcb_test_" + name + "_" + std::to_string(::getpid()));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

json small_spec_json() {
    return json::parse(R"({
      "name": "unit",
      "seed": 3,
      "budgets": [0.1, 0.4],
      "models": [{"id": "toy", "num_layers": 4, "num_heads": 4, "head_dim": 16, "seed": 1}],
      "tasks": [
        {"benchmark": "needle", "kind": "NEEDLE_RETRIEVAL", "l_v": 24, "samples": 3},
        {"benchmark": "count", "kind": "COUNT", "l_v": 16, "samples": 3}
      ]
    })");
}

json two_policies() {
    return json::parse(R"([
      {"label": "SNAP", "family": "kv", "method": "SNAPKV"},
      {"label": "FV", "family": "token", "method": "FASTV"}
    ])");
}

std::string records_text(const RunResult& r) {
    std::string s;
    for (const auto& rec : r.records) s += to_json(rec).dump() + "\n";
    return s;
}

AttentionTrace layered(const std::vector<Mat>& per_layer, int heads, int l_v) {
    AttentionTrace t;
    t.l = static_cast<int>(per_layer.front().rows);
    t.l_v = l_v;
    for (const auto& m : per_layer) {
        t.attn.emplace_back(heads, m);
        std::vector<int> idx(t.l);
        for (int i = 0; i < t.l; ++i) idx[i] = i;
        t.token_index.push_back(idx);
    }
    return t;
}

}  // namespace

TEST(RunSpecParse, RejectsUnknownAndInvalidKeys) {
    json j = small_spec_json();
    EXPECT_NO_THROW(parse_runspec(j));
    j["colour"] = "blue";
    EXPECT_EQ(code_of([&] { parse_runspec(j); }), ErrorCode::ConfigError);
    j = small_spec_json();
    j["tasks"][0]["lv"] = 3;
    EXPECT_EQ(code_of([&] { parse_runspec(j); }), ErrorCode::ConfigError);
    j = small_spec_json();
    j["budgets"] = {0.0};
    EXPECT_EQ(code_of([&] { parse_runspec(j); }), ErrorCode::ConfigError);
    j["budgets"] = {1.5};
    EXPECT_EQ(code_of([&] { parse_runspec(j); }), ErrorCode::ConfigError);
    j = small_spec_json();
    j["policies"] = json::parse(R"([{"label": "X", "family": "kv", "method": "PYRAMIDKV",
                                     "allocation_mode": "UNIFORM"}])");
    EXPECT_EQ(code_of([&] { parse_runspec(j); }), ErrorCode::ConfigError);
    j["policies"] = json::parse(R"([{"label": "A@1", "family": "kv", "method": "H2O"}])");
    EXPECT_EQ(code_of([&] { parse_runspec(j); }), ErrorCode::ConfigError);
    j = small_spec_json();
    j.erase("tasks");
    EXPECT_EQ(code_of([&] { parse_runspec(j); }), ErrorCode::ConfigError);
}

TEST(RunSpecParse, DefaultBudgetGrid) {
    json j = small_spec_json();
    j.erase("budgets");
    const RunSpec s = parse_runspec(j);
    EXPECT_EQ(s.budgets, (std::vector<double>{0.01, 0.05, 0.10, 0.20, 0.40}));
}

TEST(RunSpecParse, CanonicalFormRoundTripsAndHashIsStable) {
    json j = small_spec_json();
    j["policies"] = two_policies();
    const RunSpec s = parse_runspec(j);
    const json canon = to_json(s);
    const RunSpec again = parse_runspec(canon);
    EXPECT_EQ(to_json(again), canon);
    EXPECT_EQ(spec_hash(again), spec_hash(s));
    RunSpec changed = s;
    changed.seed += 1;
    EXPECT_NE(spec_hash(changed), spec_hash(s));
}

TEST(Run, EmptyPolicyGridGivesBaselinesOnly) {
    const RunResult r = run(parse_runspec(small_spec_json()));
    ASSERT_EQ(r.records.size(), 2u);
    EXPECT_EQ(r.failed_cells, 0);
    for (const auto& rec : r.records) {
        EXPECT_EQ(rec.method, kBaselineMethod);
        EXPECT_EQ(rec.samples, 3);
        EXPECT_EQ(rec.predictions.size(), 3u);
        EXPECT_EQ(rec.expected.size(), 3u);
    }
}

TEST(Run, GridCountsAndBaselinePresence) {
    json j = small_spec_json();
    j["policies"] = two_policies();
    const RunResult r = run(parse_runspec(j));
    // 2 methods x 2 budgets x 2 tasks, plus one baseline per task
    EXPECT_EQ(r.records.size(), 8u + 2u);
    EXPECT_EQ(r.failed_cells, 0);
    for (const auto& rec : r.records) {
        bool has_base = false;
        for (const auto& b : r.records)
            has_base = has_base || (b.method == kBaselineMethod && b.model == rec.model && b.benchmark == rec.benchmark);
        EXPECT_TRUE(has_base) << rec.method;
        EXPECT_EQ(rec.status, "ok");
    }
}

TEST(Run, DeterministicAcrossRepeatsAndJobCounts) {
    json j = small_spec_json();
    j["policies"] = two_policies();
    RunSpec s = parse_runspec(j);
    const std::string a = records_text(run(s));
    EXPECT_EQ(records_text(run(s)), a);
    s.jobs = 4;
    EXPECT_EQ(records_text(run(s)), a);
}

TEST(Run, FailingCellIsIsolated) {
    json j = small_spec_json();
    j["policies"] = two_policies();
    const RunResult clean = run(parse_runspec(j));
    // FastV layer beyond the 4-layer model fails at run time only
    j["policies"].push_back(json::parse(R"({"label": "BAD", "family": "token", "method": "FASTV", "layer": 9})"));
    const RunResult r = run(parse_runspec(j));
    EXPECT_EQ(r.failed_cells, 4);
    int bad = 0;
    for (const auto& rec : r.records) {
        if (rec.label == "BAD") {
            ++bad;
            EXPECT_EQ(rec.status, "error");
            EXPECT_FALSE(rec.error.empty());
            EXPECT_TRUE(rec.predictions.empty());
        }
    }
    EXPECT_EQ(bad, 4);
    std::string others;
    for (const auto& rec : r.records)
        if (rec.label != "BAD") others += to_json(rec).dump() + "\n";
    EXPECT_EQ(others, records_text(clean));

    const ReportOutput rep = report(r.records);
    bool flagged = false;
    for (const auto& d : rep.diagnostics) flagged = flagged || d.find("BAD@") != std::string::npos;
    EXPECT_TRUE(flagged);
}

TEST(Run, BudgetOneKvMatchesBaseline) {
    json j = small_spec_json();
    j["budgets"] = {1.0};
    j["policies"] = json::parse(R"([{"label": "SNAP", "family": "kv", "method": "SNAPKV"}])");
    const RunResult r = run(parse_runspec(j));
    for (const auto& rec : r.records) {
        const CellRecord* base = nullptr;
        for (const auto& b : r.records)
            if (b.method == kBaselineMethod && b.benchmark == rec.benchmark) base = &b;
        ASSERT_NE(base, nullptr);
        EXPECT_EQ(rec.predictions, base->predictions);
        EXPECT_EQ(rec.retained_cache_entries, base->retained_cache_entries);
    }
}

TEST(Records, JsonRoundTrip) {
    CellRecord r;
    r.method = "SNAP@0.1";
    r.family = "kv";
    r.label = "SNAP";
    r.model = "toy";
    r.benchmark = "needle";
    r.budget = 0.1;
    r.samples = 2;
    r.correct = 1;
    r.score = 0.5;
    r.predictions = {"3", "tok40"};
    r.expected = {"3", "tok41"};
    r.ttft = 1234.0;
    r.decode = 56.0;
    r.total = 1290.0;
    r.retained_cache_entries = 17.5;
    r.dropped_merge_rows = 1;
    EXPECT_EQ(to_json(record_from_json(to_json(r))), to_json(r));
}

TEST(Report, OnlyBaselinesGiveIdentity) {
    const RunResult r = run(parse_runspec(small_spec_json()));
    auto recs = r.records;
    for (auto rec : r.records) {
        rec.method = "COPY";
        rec.family = "kv";
        rec.label = "COPY";
        recs.push_back(rec);
    }
    const ReportOutput rep = report(recs);
    EXPECT_TRUE(rep.diagnostics.empty());
    ASSERT_EQ(rep.json["methods"].size(), 2u);
    for (const auto& m : rep.metrics.methods) {
        for (const auto& [model, op] : m.op) EXPECT_EQ(op, 1.0) << m.method;
        EXPECT_EQ(m.ol, 1.0);
        EXPECT_EQ(m.oe.oe, 1.0);
    }
}

TEST(Report, ParetoRowsPerMethodBudgetPoint) {
    json j = small_spec_json();
    j["policies"] = two_policies();
    const RunResult r = run(parse_runspec(j));
    const ReportOutput rep = report(r.records);
    EXPECT_TRUE(rep.diagnostics.empty());
    int lines = 0;
    for (char c : rep.pareto_csv) lines += c == '\n';
    // header + baseline + 2 methods x 2 budgets
    EXPECT_EQ(lines, 1 + 1 + 4);
    int ratio_lines = 0;
    for (char c : rep.ratios_csv) ratio_lines += c == '\n';
    EXPECT_EQ(ratio_lines, 1 + 5 * 2);
}

TEST(Report, MissingBaselineIsDiagnosedPerMethod) {
    json j = small_spec_json();
    j["policies"] = two_policies();
    auto recs = run(parse_runspec(j)).records;
    std::erase_if(recs, [](const CellRecord& c) { return c.method == kBaselineMethod && c.benchmark == "count"; });
    const ReportOutput rep = report(recs);
    EXPECT_FALSE(rep.diagnostics.empty());
    for (const auto& m : rep.metrics.methods) EXPECT_EQ(m.method, kBaselineMethod);
}

TEST(Archive, WriteReadAndReport) {
    const fs::path dir = temp_dir("archive");
    json j = small_spec_json();
    j["policies"] = two_policies();
    const RunSpec s = parse_runspec(j);
    const RunResult r = run(s);
    write_archive(dir.string(), s, r);
    const auto back = read_records((dir / "records.jsonl").string());
    ASSERT_EQ(back.size(), r.records.size());
    for (std::size_t i = 0; i < back.size(); ++i) EXPECT_EQ(to_json(back[i]), to_json(r.records[i]));
    const json meta = json::parse(slurp(dir / "metadata.json"));
    EXPECT_EQ(meta.at("spec_hash"), spec_hash(parse_runspec(meta.at("spec"))));

    report_archive(dir.string(), "");
    EXPECT_TRUE(fs::exists(dir / "report.json"));
    EXPECT_TRUE(fs::exists(dir / "pareto.csv"));
    EXPECT_TRUE(fs::exists(dir / "ratios.csv"));

    const fs::path dir2 = temp_dir("archive2");
    write_archive(dir2.string(), s, run(s));
    EXPECT_EQ(slurp(dir / "records.jsonl"), slurp(dir2 / "records.jsonl"));

    std::ofstream(dir / "records.jsonl", std::ios::app) << "{not json\n";
    EXPECT_EQ(code_of([&] { read_records((dir / "records.jsonl").string()); }), ErrorCode::FormatError);
    fs::remove_all(dir);
    fs::remove_all(dir2);
}

TEST(Output, ResolutionOrder) {
    RunSpec s;
    s.name = "abc";
    EXPECT_EQ(resolve_output(s, "flag"), "flag");
    ::setenv("VLCB_OUT_ROOT", "/tmp/root", 1);
    EXPECT_EQ(resolve_output(s, ""), (fs::path("/tmp/root") / "abc").string());
    s.output = "spec_dir";
    EXPECT_EQ(resolve_output(s, ""), "spec_dir");
    ::unsetenv("VLCB_OUT_ROOT");
    s.output.clear();
    EXPECT_EQ(resolve_output(s, ""), (fs::path("runs") / "abc").string());
}

TEST(Traces, Float64RoundTripIsBitExact) {
    const fs::path dir = temp_dir("trace64");
    std::mt19937_64 rng(11);
    AttentionTrace t = vt::random_trace(rng, 3, 2, 20, 12);
    t.cls_attention = std::vector<double>(12, 1.0 / 12);
    write_trace((dir / "t.vlct").string(), t, true);
    const AttentionTrace back = read_trace((dir / "t.vlct").string());
    EXPECT_EQ(back.l, t.l);
    EXPECT_EQ(back.l_v, t.l_v);
    EXPECT_EQ(back.token_index, t.token_index);
    EXPECT_EQ(back.cls_attention, t.cls_attention);
    for (int k = 0; k < 3; ++k)
        for (int h = 0; h < 2; ++h) EXPECT_EQ(back.attn[k][h].a, t.attn[k][h].a);
    fs::remove_all(dir);
}

TEST(Traces, Float32RoundTripWithinFloatPrecision) {
    const fs::path dir = temp_dir("trace32");
    std::mt19937_64 rng(12);
    const AttentionTrace t = vt::random_trace(rng, 2, 2, 16, 8);
    write_trace((dir / "t.vlct").string(), t);
    const AttentionTrace back = read_trace((dir / "t.vlct").string());
    for (int k = 0; k < 2; ++k)
        for (int h = 0; h < 2; ++h)
            for (std::size_t i = 0; i < t.attn[k][h].a.size(); ++i)
                EXPECT_EQ(back.attn[k][h].a[i], static_cast<double>(static_cast<float>(t.attn[k][h].a[i])));
    fs::remove_all(dir);
}

TEST(Traces, MalformedFilesRejected) {
    const fs::path dir = temp_dir("tracebad");
    std::mt19937_64 rng(13);
    const AttentionTrace t = vt::random_trace(rng, 2, 2, 10, 4);
    const fs::path p = dir / "t.vlct";
    write_trace(p.string(), t, true);
    const std::string good = slurp(p);

    auto put = [&](const std::string& bytes) { std::ofstream(p, std::ios::binary) << bytes; };
    put("NOTATRACE" + good.substr(9));
    EXPECT_EQ(code_of([&] { read_trace(p.string()); }), ErrorCode::FormatError);
    std::string bad_header = good;
    bad_header[12] = '[';
    put(bad_header);
    EXPECT_EQ(code_of([&] { read_trace(p.string()); }), ErrorCode::FormatError);
    put(good.substr(0, good.size() - 8));
    EXPECT_EQ(code_of([&] { read_trace(p.string()); }), ErrorCode::ShapeMismatch);
    put(good + std::string(8, '\0'));
    EXPECT_EQ(code_of([&] { read_trace(p.string()); }), ErrorCode::ShapeMismatch);
    fs::remove_all(dir);
}

TEST(Traces, ExportThenReplayAtFullBudgetRetainsAll) {
    const fs::path dir = temp_dir("export");
    const RunSpec s = parse_runspec(small_spec_json());
    const auto paths = export_traces(s, dir.string(), 2);
    ASSERT_EQ(paths.size(), 4u);
    for (const auto& p : paths) {
        const AttentionTrace t = read_trace(p);
        KvPolicySpec ks;
        ks.method = KvMethod::SnapKV;
        ks.budget = 1.0;
        const ReplayResult r = replay(t, ks);
        for (int k = 0; k < t.num_layers(); ++k) {
            for (const auto& rows : r.mask.retained[k]) EXPECT_EQ(static_cast<int>(rows.size()), t.l);
            EXPECT_EQ(r.json["layers"][k]["retained"][0].size(), static_cast<std::size_t>(t.l));
        }
    }
    fs::remove_all(dir);
}

TEST(Traces, AdaptiveReplayFrontLoadsBroadLayer) {
    const int l = 200, layers = 8;
    Mat broad(l, l), self(l, l);
    for (int i = 0; i < l; ++i) {
        for (int j = 0; j <= i; ++j) broad(i, j) = 1.0 / (i + 1);
        self(i, i) = 1.0;
    }
    std::vector<Mat> per_layer(layers, self);
    per_layer[0] = broad;
    const AttentionTrace t = layered(per_layer, 2, 150);
    KvPolicySpec ks;
    ks.method = KvMethod::VLCache;
    ks.budget = 0.05;
    const ReplayResult r = replay(t, ks);
    EXPECT_GT(r.json["layers"][0]["ratio_to_average"].get<double>(), 1.0);
    EXPECT_EQ(r.json["total_quota"].get<int>(), layers * 10);
}

TEST(KvPolicyJson, RoundTrip) {
    const KvPolicySpec p = parse_kv_policy(json::parse(R"({"method": "VLCACHE", "budget": 0.2, "alpha": 0.5,
        "allocation_mode": "HYBRID", "merge_strategy": "MODALITY_SPECIFIC"})"));
    EXPECT_EQ(to_json(parse_kv_policy(to_json(p))), to_json(p));
    EXPECT_EQ(code_of([] { parse_kv_policy(json::parse(R"({"method": "SNAPKV", "bogus": 1})")); }),
              ErrorCode::ConfigError);
}
