// Copyright (C) 2026 The vlcb Authors
// SPDX-License-Identifier: Apache-2.0

#include "vlcb/common.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace vlcb {

const char* error_code_name(ErrorCode code) {
    switch (code) {
        case ErrorCode::Ok: return "Ok";
        case ErrorCode::InvalidConfig: return "InvalidConfig";
        case ErrorCode::InvalidArgument: return "InvalidArgument";
        case ErrorCode::SequenceTooLong: return "SequenceTooLong";
        case ErrorCode::UnknownTaskKind: return "UnknownTaskKind";
        case ErrorCode::EmptyTextSpan: return "EmptyTextSpan";
        case ErrorCode::ConfigError: return "ConfigError";
        case ErrorCode::ShapeMismatch: return "ShapeMismatch";
        case ErrorCode::MissingBaseline: return "MissingBaseline";
        case ErrorCode::NumericError: return "NumericError";
        case ErrorCode::IoError: return "IoError";
        case ErrorCode::FormatError: return "FormatError";
        case ErrorCode::Internal: return "Internal";
    }
    return "Unknown";
}

void fail(ErrorCode code, const std::string& what) {
    throw Error(code, std::string(error_code_name(code)) + ": " + what);
}

Mat select_rows(const Mat& m, const std::vector<int>& rows) {
    Mat out(rows.size(), m.cols);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        std::copy_n(m.row(static_cast<std::size_t>(rows[i])), m.cols, out.row(i));
    }
    return out;
}

std::vector<int> argsort_desc(const std::vector<double>& v) {
    std::vector<int> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int x, int y) { return v[x] > v[y]; });
    return idx;
}

std::vector<int> top_k_indices(const std::vector<double>& v, std::size_t k) {
    auto order = argsort_desc(v);
    order.resize(std::min(k, order.size()));
    std::sort(order.begin(), order.end());
    return order;
}

double cosine(const double* x, const double* y, std::size_t n) {
    double xy = 0.0, xx = 0.0, yy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        xy += x[i] * y[i];
        xx += x[i] * x[i];
        yy += y[i] * y[i];
    }
    const double den = std::sqrt(xx) * std::sqrt(yy);
    return den > 0.0 ? xy / den : 0.0;
}

std::uint64_t fnv1a64(const std::string& s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

}  // namespace vlcb
