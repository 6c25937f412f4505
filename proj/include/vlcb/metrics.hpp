// Copyright (C) 2026 The vlcb Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

namespace vlcb {

/// One (method, model, benchmark) result paired with its uncompressed baseline.
struct EvalRecord {
    std::string method;
    std::string model;
    std::string benchmark;
    double em = 0.0;
    double em_base = 0.0;
    std::vector<std::string> predictions;
    std::vector<std::string> predictions_base;
    double t = 0.0;  // total time (MACs or seconds)
    double t_base = 0.0;
    double ttft = 0.0;
    double ttft_base = 0.0;
    double decode = 0.0;
    double decode_base = 0.0;
};

using Agreement = std::function<bool(const std::string&, const std::string&)>;

bool exact_match(const std::string& a, const std::string& b);
/// Whitespace-token F1 between two answers (both empty -> 1).
double token_f1(const std::string& a, const std::string& b);
/// token_f1 >= 0.5
bool f1_match(const std::string& a, const std::string& b);

/// sqrt(mean_b ratio_b^2) over benchmarks of one (model, method); ratios are
/// averaged per benchmark first. Every name in `benchmarks` must be present.
double overall_performance(const std::vector<EvalRecord>& records, const std::vector<std::string>& benchmarks);
/// Benchmarks taken from the records themselves.
double overall_performance(const std::vector<EvalRecord>& records);

/// Population sigma over benchmarks of the model-averaged ratio, divided by
/// the mean over (model, benchmark) cells. Records of one method.
double generalization(const std::vector<EvalRecord>& records);

/// Mean agreement over all paired samples of one method.
double loyalty(const std::vector<EvalRecord>& records, const Agreement& agree = exact_match);

struct Efficiency {
    double oe = 0.0;      // mean T_base / T over (model, benchmark) cells
    double ttft = 0.0;    // same with prefill cost only
    double decode = 0.0;  // same with decode cost only
};

Efficiency efficiency(const std::vector<EvalRecord>& records);

struct MethodMetrics {
    std::string method;
    std::map<std::string, double> op;  // per model
    double og = 0.0;
    double ol = 0.0;
    double ol_f1 = 0.0;
    Efficiency oe;
};

struct RatioRow {
    std::string method;
    std::string model;
    std::string benchmark;
    double ratio = 0.0;
    double ttft_speedup = 0.0;
    double decode_speedup = 0.0;
    double speedup = 0.0;
};

struct MetricReport {
    std::vector<MethodMetrics> methods;  // sorted by method id
    std::vector<RatioRow> ratios;        // sorted by (method, model, benchmark)
};

/// Aggregates records of many methods. Every method must cover every
/// benchmark of its model; otherwise MissingBaseline names the gap.
MetricReport build_report(const std::vector<EvalRecord>& records);

}  // namespace vlcb
