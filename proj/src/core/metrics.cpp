// Copyright (C) 2026 The vlcb Authors
// SPDX-License-Identifier: Apache-2.0

#include "vlcb/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "vlcb/common.hpp"

namespace vlcb {

namespace {

std::vector<std::string> split_ws(const std::string& s) {
    std::istringstream in(s);
    std::vector<std::string> out;
    for (std::string w; in >> w;) out.push_back(w);
    return out;
}

double ratio_of(const EvalRecord& r) {
    if (!(r.em_base > 0.0)) {
        fail(ErrorCode::MissingBaseline, "benchmark '" + r.benchmark + "' of model '" + r.model +
                                             "' has no positive baseline score");
    }
    return r.em / r.em_base;
}

double speedup(double base, double t, const char* what) {
    require(base > 0.0 && t > 0.0 && std::isfinite(base) && std::isfinite(t), ErrorCode::InvalidArgument,
            std::string("nonpositive ") + what + " timing");
    return base / t;
}

// Mean of f over records grouped by (model, benchmark).
template <typename F>
std::map<std::pair<std::string, std::string>, double> cell_means(const std::vector<EvalRecord>& records, F f) {
    std::map<std::pair<std::string, std::string>, std::pair<double, int>> acc;
    for (const auto& r : records) {
        auto& a = acc[{r.model, r.benchmark}];
        a.first += f(r);
        a.second += 1;
    }
    std::map<std::pair<std::string, std::string>, double> out;
    for (const auto& [k, v] : acc) out[k] = v.first / v.second;
    return out;
}

}  // namespace

bool exact_match(const std::string& a, const std::string& b) { return a == b; }

double token_f1(const std::string& a, const std::string& b) {
    const auto ta = split_ws(a), tb = split_ws(b);
    if (ta.empty() && tb.empty()) return 1.0;
    if (ta.empty() || tb.empty()) return 0.0;
    std::multiset<std::string> pool(tb.begin(), tb.end());
    std::size_t common = 0;
    for (const auto& w : ta) {
        auto it = pool.find(w);
        if (it != pool.end()) {
            ++common;
            pool.erase(it);
        }
    }
    if (common == 0) return 0.0;
    const double p = static_cast<double>(common) / ta.size();
    const double r = static_cast<double>(common) / tb.size();
    return 2.0 * p * r / (p + r);
}

bool f1_match(const std::string& a, const std::string& b) { return token_f1(a, b) >= 0.5; }

double overall_performance(const std::vector<EvalRecord>& records, const std::vector<std::string>& benchmarks) {
    require(!benchmarks.empty(), ErrorCode::InvalidArgument, "OP needs at least one benchmark");
    std::map<std::string, std::pair<double, int>> per;
    for (const auto& r : records) {
        auto& a = per[r.benchmark];
        a.first += ratio_of(r);
        a.second += 1;
    }
    double s = 0.0;
    for (const auto& b : benchmarks) {
        auto it = per.find(b);
        if (it == per.end()) fail(ErrorCode::MissingBaseline, "no result for benchmark '" + b + "'");
        const double ratio = it->second.first / it->second.second;
        s += ratio * ratio;
    }
    return std::sqrt(s / static_cast<double>(benchmarks.size()));
}

double overall_performance(const std::vector<EvalRecord>& records) {
    std::set<std::string> names;
    for (const auto& r : records) names.insert(r.benchmark);
    return overall_performance(records, std::vector<std::string>(names.begin(), names.end()));
}

double generalization(const std::vector<EvalRecord>& records) {
    const auto cells = cell_means(records, ratio_of);
    std::map<std::string, std::pair<double, int>> per_b;
    double grand = 0.0;
    for (const auto& [k, v] : cells) {
        auto& a = per_b[k.second];
        a.first += v;
        a.second += 1;
        grand += v;
    }
    require(per_b.size() >= 2, ErrorCode::InvalidArgument, "OG needs at least two benchmarks");
    grand /= static_cast<double>(cells.size());
    require(grand != 0.0 && std::isfinite(grand), ErrorCode::NumericError, "OG undefined for a zero mean ratio");
    std::vector<double> mb;
    for (const auto& [b, a] : per_b) mb.push_back(a.first / a.second);
    double mu = 0.0;
    for (double x : mb) mu += x;
    mu /= static_cast<double>(mb.size());
    double var = 0.0;
    for (double x : mb) var += (x - mu) * (x - mu);
    var /= static_cast<double>(mb.size());
    return std::sqrt(var) / grand;
}

double loyalty(const std::vector<EvalRecord>& records, const Agreement& agree) {
    std::size_t n = 0, hit = 0;
    for (const auto& r : records) {
        require(r.predictions.size() == r.predictions_base.size(), ErrorCode::ShapeMismatch,
                "prediction lists differ in length for benchmark '" + r.benchmark + "'");
        for (std::size_t i = 0; i < r.predictions.size(); ++i) {
            ++n;
            hit += agree(r.predictions[i], r.predictions_base[i]) ? 1 : 0;
        }
    }
    require(n > 0, ErrorCode::InvalidArgument, "loyalty needs at least one paired prediction");
    return static_cast<double>(hit) / static_cast<double>(n);
}

Efficiency efficiency(const std::vector<EvalRecord>& records) {
    require(!records.empty(), ErrorCode::InvalidArgument, "efficiency needs records");
    auto mean = [](const std::map<std::pair<std::string, std::string>, double>& m) {
        double s = 0.0;
        for (const auto& kv : m) s += kv.second;
        return s / static_cast<double>(m.size());
    };
    Efficiency e;
    e.oe = mean(cell_means(records, [](const EvalRecord& r) { return speedup(r.t_base, r.t, "total"); }));
    e.ttft = mean(cell_means(records, [](const EvalRecord& r) { return speedup(r.ttft_base, r.ttft, "TTFT"); }));
    e.decode =
        mean(cell_means(records, [](const EvalRecord& r) { return speedup(r.decode_base, r.decode, "decode"); }));
    return e;
}

MetricReport build_report(const std::vector<EvalRecord>& records) {
    std::map<std::string, std::vector<EvalRecord>> by_method;
    std::map<std::string, std::set<std::string>> model_benchmarks;
    for (const auto& r : records) {
        by_method[r.method].push_back(r);
        model_benchmarks[r.model].insert(r.benchmark);
    }
    MetricReport rep;
    for (const auto& [method, recs] : by_method) {
        MethodMetrics mm;
        mm.method = method;
        std::map<std::string, std::vector<EvalRecord>> by_model;
        for (const auto& r : recs) by_model[r.model].push_back(r);
        for (const auto& [model, mr] : by_model) {
            const auto& bs = model_benchmarks[model];
            try {
                mm.op[model] = overall_performance(mr, std::vector<std::string>(bs.begin(), bs.end()));
            } catch (const Error& e) {
                fail(e.code(), "method '" + method + "', model '" + model + "': " + e.what());
            }
        }
        std::set<std::string> bset;
        for (const auto& r : recs) bset.insert(r.benchmark);
        mm.og = bset.size() >= 2 ? generalization(recs) : 0.0;
        mm.ol = loyalty(recs, exact_match);
        mm.ol_f1 = loyalty(recs, f1_match);
        mm.oe = efficiency(recs);
        rep.methods.push_back(std::move(mm));

        const auto ratio = cell_means(recs, ratio_of);
        const auto sp = cell_means(recs, [](const EvalRecord& r) { return speedup(r.t_base, r.t, "total"); });
        const auto tt = cell_means(recs, [](const EvalRecord& r) { return speedup(r.ttft_base, r.ttft, "TTFT"); });
        const auto dc =
            cell_means(recs, [](const EvalRecord& r) { return speedup(r.decode_base, r.decode, "decode"); });
        for (const auto& [k, v] : ratio) {
            rep.ratios.push_back({method, k.first, k.second, v, tt.at(k), dc.at(k), sp.at(k)});
        }
    }
    return rep;
}

}  // namespace vlcb
