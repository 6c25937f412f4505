// Copyright (C) 2026 The vlcb Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace vlcb {

enum class ErrorCode : int {
    Ok = 0,
    InvalidConfig = 1,
    InvalidArgument = 2,
    SequenceTooLong = 3,
    UnknownTaskKind = 4,
    EmptyTextSpan = 5,
    ConfigError = 6,
    ShapeMismatch = 7,
    MissingBaseline = 8,
    NumericError = 9,
    IoError = 10,
    FormatError = 11,
    Internal = 12,
};

const char* error_code_name(ErrorCode code);

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] void fail(ErrorCode code, const std::string& what);

inline void require(bool cond, ErrorCode code, const std::string& what) {
    if (!cond) {
        fail(code, what);
    }
}

/// Dense row-major matrix of doubles.
struct Mat {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> a;

    Mat() = default;
    Mat(std::size_t r, std::size_t c, double v = 0.0) : rows(r), cols(c), a(r * c, v) {}

    double& operator()(std::size_t i, std::size_t j) { return a[i * cols + j]; }
    double operator()(std::size_t i, std::size_t j) const { return a[i * cols + j]; }
    double* row(std::size_t i) { return a.data() + i * cols; }
    const double* row(std::size_t i) const { return a.data() + i * cols; }

    bool operator==(const Mat& o) const { return rows == o.rows && cols == o.cols && a == o.a; }
};

Mat select_rows(const Mat& m, const std::vector<int>& rows);

/// Indices sorted by descending value, ties to the lower index.
std::vector<int> argsort_desc(const std::vector<double>& v);

/// Top-k indices by descending value (ties to lower index), returned ascending.
std::vector<int> top_k_indices(const std::vector<double>& v, std::size_t k);

double cosine(const double* x, const double* y, std::size_t n);

/// FNV-1a 64-bit.
std::uint64_t fnv1a64(const std::string& s);

}  // namespace vlcb
