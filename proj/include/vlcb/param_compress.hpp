// Copyright (C) 2026 The vlcb Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "vlcb/simcore.hpp"

namespace vlcb {

/// Second-moment summary of calibration activations X [n x samples]:
/// h = X X^T, abs_mean_j = mean |X_j|.
struct CalibrationStats {
    Mat h;
    std::vector<double> abs_sum;
    std::size_t count = 0;

    explicit CalibrationStats(std::size_t n = 0) : h(n, n), abs_sum(n, 0.0) {}
    std::size_t dim() const { return h.rows; }
    void add(const double* x);
    std::vector<double> abs_mean() const;
    std::vector<double> column_norms() const;  // ||X_j||_2
};

CalibrationStats calibration_stats(const Mat& x);

/// ||W X - W_hat X||_F^2 evaluated through the Gram matrix.
double reconstruction_error(const Mat& w, const Mat& w_hat, const CalibrationStats& stats);

enum class SparsityPattern { Unstructured, Semi24 };

const char* pattern_name(SparsityPattern p);
SparsityPattern parse_pattern(const std::string& s);

struct SparsityMask {
    std::size_t rows = 0;
    std::size_t cols = 0;
    SparsityPattern pattern = SparsityPattern::Unstructured;
    std::vector<std::uint8_t> keep;  // row-major, 1 = weight kept

    std::size_t ones() const;
};

Mat magnitude_scores(const Mat& w);
/// |W_ij| * ||X_j||_2
Mat wanda_scores(const Mat& w, const CalibrationStats& stats);
/// W_ij^2 / [(X X^T + lambda I)^-1]_jj
Mat sparsegpt_scores(const Mat& w, const CalibrationStats& stats, double lambda);

/// Unstructured: exactly round(density * m * n) ones, top-k per output row
/// (row counts differ by at most one, extra slots go to the lowest rows).
/// Semi24: top-2 of each contiguous group of 4 inputs.
SparsityMask build_mask(const Mat& scores, SparsityPattern pattern, double density);
/// Unstructured mask with an exact kept count.
SparsityMask build_mask_count(const Mat& scores, std::size_t kept);

Mat apply_mask(const Mat& w, const SparsityMask& mask);

/// Damping used for H: rel * mean(diag H), floored at 1e-8.
double damping(const CalibrationStats& stats, double rel);

struct PruneResult {
    Mat w;
    SparsityMask mask;
};

/// SparseGPT: greedy OBS. Each row repeatedly removes the alive weight with
/// the smallest w_q^2 / [H^-1]_qq (the sparsegpt_scores saliency of the
/// current system), updates the rest by the OBS step and downdates H^-1.
/// Row counts as in build_mask; 2:4 only removes from groups with > 2 alive.
PruneResult sparsegpt_prune(const Mat& w, const CalibrationStats& stats, SparsityPattern pattern, double density,
                            double rel_damp = 1e-2);

/// Column-sequential OBS compensation of a fixed mask, using the upper
/// Cholesky factor of (H + lambda I)^-1.
Mat obs_compensate(const Mat& w, const SparsityMask& mask, const CalibrationStats& stats, double rel_damp);

struct QuantSpec {
    int bits = 4;
    int group_size = 128;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> scale;          // [rows x groups]
    std::vector<std::int32_t> zero;     // [rows x groups]
    std::vector<double> channel_scale;  // AWQ per-input scale; empty = 1

    std::size_t groups() const;
};

struct QuantResult {
    Mat w_hat;
    QuantSpec spec;
    std::vector<std::uint32_t> q;  // row-major integer codes
    double alpha = 0.0;            // AWQ exponent
};

/// Dequantizes codes: W_hat = s * (q - z) / channel_scale.
Mat dequantize(const QuantSpec& spec, const std::vector<std::uint32_t>& q);

/// Asymmetric min-max grid per (row, group); constant groups use s = |c| (or 1).
QuantResult rtn_quantize(const Mat& w, int bits, int group_size);

/// Activation-aware scaling, one exponent per matrix chosen from `grid`
/// evenly spaced points in [0, 1] by minimum reconstruction error.
QuantResult awq_quantize(const Mat& w, const CalibrationStats& stats, int bits, int group_size, int grid = 20);

/// Column-order quantization with Hessian-guided error feedback.
QuantResult gptq_quantize(const Mat& w, const CalibrationStats& stats, int bits, int group_size,
                          double rel_damp = 1e-2);

/// E_z |(f(w + eps z) - f(w - eps z)) / (2 eps)|, z ~ N(0, I).
double zeroth_order_norm(const std::function<double(const std::vector<double>&)>& f, const std::vector<double>& w,
                         double eps, int trials, std::uint64_t seed);

// ---- whole-model compression ----

enum class ParamMethod { Magnitude, Wanda, SparseGPT, EcoFLAP, RTN, AWQ, GPTQ };

const char* param_method_name(ParamMethod m);
ParamMethod parse_param_method(const std::string& s);
bool is_quantization(ParamMethod m);

struct ParamSpec {
    ParamMethod method = ParamMethod::Wanda;
    double density = 0.5;  // kept fraction for pruning
    SparsityPattern pattern = SparsityPattern::Unstructured;
    int bits = 4;
    int group_size = 128;
    double damping = 1e-2;
    double eps = 1e-2;       // EcoFLAP
    int trials = 32;         // EcoFLAP
    int eco_samples = 8;     // EcoFLAP loss subset of the calibration set
    double temperature = 1.0;
    int calib_samples = 128;
    int calib_l_v = 16;
    std::uint64_t calib_seed = 0xC0FFEE;
    int awq_grid = 20;
};

void validate(const ParamSpec& spec);

inline constexpr int kProjCount = 6;
const char* proj_name(int p);  // wq wk wv wo wup wdown
Mat& proj_weight(LayerWeights& w, int p);
const Mat& proj_weight(const LayerWeights& w, int p);
ProjInput proj_input(int p);

struct LayerCalibration {
    std::array<CalibrationStats, 4> input;  // indexed by ProjInput
};

std::vector<TaskInstance> calibration_tasks(const Model& model, int count, int l_v, std::uint64_t seed);
std::vector<LayerCalibration> calibrate(const Model& model, const std::vector<TaskInstance>& tasks);

/// Next-token cross-entropy of the expected answer after the prompt.
double task_loss(const Model& model, const std::vector<TaskInstance>& tasks);

std::vector<double> ecoflap_layer_scores(const Model& model, const std::vector<TaskInstance>& tasks, double eps,
                                         int trials, std::uint64_t seed);

/// Per-layer kept densities: higher importance keeps more. Exact global
/// kept count is enforced later by integer apportionment.
std::vector<double> ecoflap_densities(const std::vector<double>& scores, const std::vector<double>& sizes,
                                      double density, double temperature);

struct TensorRecord {
    std::string name;
    std::optional<SparsityMask> mask;
    std::optional<QuantResult> quant;
};

struct CompressedModel {
    Model model;
    ParamSpec spec;
    std::vector<TensorRecord> tensors;
    std::vector<double> layer_scores;  // EcoFLAP only
    std::vector<double> layer_density;
};

CompressedModel compress_model(const Model& model, const ParamSpec& spec);

/// Compressed-model file: "VLCBCMP1", u32 header length, JSON header, then
/// per-tensor payloads (mask bitset + kept values, or packed codes + grids).
void save_compressed(const std::string& path, const CompressedModel& cm);
CompressedModel load_compressed(const std::string& path);

}  // namespace vlcb
