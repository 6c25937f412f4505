// Copyright (C) 2026 The vlcb Authors
// SPDX-License-Identifier: Apache-2.0

#include "vlcb/param_compress.hpp"

#include <Eigen/Dense>
#include <limits>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <json.hpp>
#include <numeric>
#include <random>

#include "vlcb/kv_compress.hpp"

namespace vlcb {

namespace {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

EMat to_eigen(const Mat& m) {
    EMat e(m.rows, m.cols);
    std::copy(m.a.begin(), m.a.end(), e.data());
    return e;
}

// (H + damp I)^-1 with dead columns (zero diagonal) pinned to 1.
EMat damped_inverse(const CalibrationStats& stats, double damp) {
    EMat h = to_eigen(stats.h);
    for (Eigen::Index j = 0; j < h.rows(); ++j) {
        if (h(j, j) <= 0.0) h(j, j) = 1.0;
        h(j, j) += damp;
    }
    Eigen::LLT<EMat> llt(h);
    require(llt.info() == Eigen::Success, ErrorCode::NumericError, "damped Hessian is not positive definite");
    return llt.solve(EMat::Identity(h.rows(), h.cols()));
}

// Upper factor U with Hinv = U^T U.
EMat inverse_cholesky_upper(const CalibrationStats& stats, double damp) {
    EMat hinv = damped_inverse(stats, damp);
    Eigen::LLT<EMat> llt(hinv);
    require(llt.info() == Eigen::Success, ErrorCode::NumericError, "inverse Hessian factorization failed");
    return llt.matrixU();
}

struct Grid {
    double s;
    std::int32_t z;
};

Grid minmax_grid(const double* w, std::size_t n, int bits) {
    double mn = w[0], mx = w[0];
    for (std::size_t i = 1; i < n; ++i) {
        mn = std::min(mn, w[i]);
        mx = std::max(mx, w[i]);
    }
    const double levels = std::ldexp(1.0, bits) - 1.0;
    double s = (mx - mn) / levels;
    if (!(s > 0.0)) s = mn != 0.0 ? std::fabs(mn) : 1.0;
    return {s, static_cast<std::int32_t>(-std::nearbyint(mn / s))};
}

std::uint32_t quant_code(double w, const Grid& g, int bits) {
    const double maxq = std::ldexp(1.0, bits) - 1.0;
    const double q = std::clamp(std::nearbyint(w / g.s) + g.z, 0.0, maxq);
    return static_cast<std::uint32_t>(q);
}

double dequant(std::uint32_t q, const Grid& g) { return g.s * (static_cast<double>(q) - g.z); }

void check_quant_args(const Mat& w, int bits, int group_size) {
    require(bits >= 2 && bits <= 16, ErrorCode::InvalidArgument, "bits must lie in [2, 16]");
    require(group_size >= 1, ErrorCode::InvalidArgument, "group_size must be >= 1");
    require(w.rows >= 1 && w.cols >= 1, ErrorCode::InvalidArgument, "empty weight matrix");
    for (double x : w.a) require(std::isfinite(x), ErrorCode::NumericError, "non-finite weight");
}

QuantSpec empty_spec(const Mat& w, int bits, int group_size) {
    QuantSpec s;
    s.bits = bits;
    s.group_size = group_size;
    s.rows = w.rows;
    s.cols = w.cols;
    s.scale.resize(w.rows * s.groups());
    s.zero.resize(w.rows * s.groups());
    return s;
}

void check_stats(const Mat& w, const CalibrationStats& stats) {
    require(stats.dim() == w.cols, ErrorCode::ShapeMismatch,
            "calibration dim " + std::to_string(stats.dim()) + " != weight input dim " + std::to_string(w.cols));
    require(stats.count >= 1, ErrorCode::InvalidArgument, "calibration set is empty");
}

}  // namespace

void CalibrationStats::add(const double* x) {
    const std::size_t n = dim();
    for (std::size_t i = 0; i < n; ++i) {
        abs_sum[i] += std::fabs(x[i]);
        double* hr = h.row(i);
        const double xi = x[i];
        for (std::size_t j = 0; j < n; ++j) hr[j] += xi * x[j];
    }
    ++count;
}

std::vector<double> CalibrationStats::abs_mean() const {
    std::vector<double> m(abs_sum);
    for (auto& v : m) v /= static_cast<double>(std::max<std::size_t>(count, 1));
    return m;
}

std::vector<double> CalibrationStats::column_norms() const {
    std::vector<double> c(dim());
    for (std::size_t j = 0; j < dim(); ++j) c[j] = std::sqrt(std::max(0.0, h(j, j)));
    return c;
}

CalibrationStats calibration_stats(const Mat& x) {
    CalibrationStats s(x.rows);
    std::vector<double> col(x.rows);
    for (std::size_t t = 0; t < x.cols; ++t) {
        for (std::size_t i = 0; i < x.rows; ++i) col[i] = x(i, t);
        s.add(col.data());
    }
    return s;
}

double reconstruction_error(const Mat& w, const Mat& w_hat, const CalibrationStats& stats) {
    require(w.rows == w_hat.rows && w.cols == w_hat.cols, ErrorCode::ShapeMismatch, "weight shapes differ");
    check_stats(w, stats);
    const std::size_t n = w.cols;
    std::vector<double> d(n), hd(n);
    double err = 0.0;
    for (std::size_t r = 0; r < w.rows; ++r) {
        for (std::size_t j = 0; j < n; ++j) d[j] = w(r, j) - w_hat(r, j);
        for (std::size_t i = 0; i < n; ++i) {
            const double* hr = stats.h.row(i);
            double acc = 0.0;
            for (std::size_t j = 0; j < n; ++j) acc += hr[j] * d[j];
            hd[i] = acc;
        }
        for (std::size_t i = 0; i < n; ++i) err += d[i] * hd[i];
    }
    return std::max(0.0, err);
}

const char* pattern_name(SparsityPattern p) { return p == SparsityPattern::Semi24 ? "SEMI_2_4" : "UNSTRUCTURED"; }

SparsityPattern parse_pattern(const std::string& s) {
    if (s == "UNSTRUCTURED") return SparsityPattern::Unstructured;
    if (s == "SEMI_2_4" || s == "2:4") return SparsityPattern::Semi24;
    fail(ErrorCode::ConfigError, "unknown sparsity pattern '" + s + "'");
}

std::size_t SparsityMask::ones() const { return static_cast<std::size_t>(std::count(keep.begin(), keep.end(), 1)); }

Mat magnitude_scores(const Mat& w) {
    Mat s = w;
    for (auto& x : s.a) x = std::fabs(x);
    return s;
}

Mat wanda_scores(const Mat& w, const CalibrationStats& stats) {
    check_stats(w, stats);
    const auto norms = stats.column_norms();
    Mat s(w.rows, w.cols);
    for (std::size_t i = 0; i < w.rows; ++i) {
        for (std::size_t j = 0; j < w.cols; ++j) s(i, j) = std::fabs(w(i, j)) * norms[j];
    }
    return s;
}

Mat sparsegpt_scores(const Mat& w, const CalibrationStats& stats, double lambda) {
    check_stats(w, stats);
    require(lambda > 0.0, ErrorCode::InvalidArgument, "SparseGPT damping must be positive");
    const EMat hinv = damped_inverse(stats, std::max(lambda, 1e-12));
    Mat s(w.rows, w.cols);
    for (std::size_t i = 0; i < w.rows; ++i) {
        for (std::size_t j = 0; j < w.cols; ++j) s(i, j) = w(i, j) * w(i, j) / hinv(j, j);
    }
    return s;
}

SparsityMask build_mask_count(const Mat& scores, std::size_t kept) {
    const std::size_t m = scores.rows, n = scores.cols;
    require(kept <= m * n, ErrorCode::InvalidArgument, "kept count exceeds tensor size");
    SparsityMask mask;
    mask.rows = m;
    mask.cols = n;
    mask.keep.assign(m * n, 0);
    const std::size_t base = kept / m, extra = kept % m;
    std::vector<double> row(n);
    for (std::size_t i = 0; i < m; ++i) {
        const std::size_t k = base + (i < extra ? 1 : 0);
        row.assign(scores.row(i), scores.row(i) + n);
        for (int j : top_k_indices(row, k)) mask.keep[i * n + j] = 1;
    }
    return mask;
}

SparsityMask build_mask(const Mat& scores, SparsityPattern pattern, double density) {
    require(density >= 0.0 && density <= 1.0, ErrorCode::InvalidArgument, "density must lie in [0, 1]");
    const std::size_t m = scores.rows, n = scores.cols;
    if (pattern == SparsityPattern::Unstructured) {
        return build_mask_count(scores, static_cast<std::size_t>(std::llround(density * static_cast<double>(m * n))));
    }
    require(n % 4 == 0, ErrorCode::ConfigError, "2:4 sparsity needs an input dimension divisible by 4");
    SparsityMask mask;
    mask.rows = m;
    mask.cols = n;
    mask.pattern = SparsityPattern::Semi24;
    mask.keep.assign(m * n, 0);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t g = 0; g < n; g += 4) {
            std::vector<double> grp(scores.row(i) + g, scores.row(i) + g + 4);
            for (int j : top_k_indices(grp, 2)) mask.keep[i * n + g + j] = 1;
        }
    }
    return mask;
}

Mat apply_mask(const Mat& w, const SparsityMask& mask) {
    require(mask.rows == w.rows && mask.cols == w.cols, ErrorCode::ShapeMismatch, "mask shape differs from weight");
    Mat out = w;
    for (std::size_t i = 0; i < out.a.size(); ++i) {
        if (!mask.keep[i]) out.a[i] = 0.0;
    }
    return out;
}

double damping(const CalibrationStats& stats, double rel) {
    double tr = 0.0;
    for (std::size_t j = 0; j < stats.dim(); ++j) tr += stats.h(j, j);
    const double mean = stats.dim() ? tr / static_cast<double>(stats.dim()) : 0.0;
    return std::max(rel * mean, 1e-8);
}

Mat obs_compensate(const Mat& w, const SparsityMask& mask, const CalibrationStats& stats, double rel_damp) {
    check_stats(w, stats);
    require(mask.rows == w.rows && mask.cols == w.cols, ErrorCode::ShapeMismatch, "mask shape differs from weight");
    if (mask.ones() == mask.keep.size()) return w;
    const EMat u = inverse_cholesky_upper(stats, damping(stats, rel_damp));
    const std::size_t m = w.rows, n = w.cols;
    Mat out = w;
    for (std::size_t j = 0; j < n; ++j) {
        const double ujj = u(j, j);
        for (std::size_t i = 0; i < m; ++i) {
            if (mask.keep[i * n + j]) continue;
            const double err = out(i, j) / ujj;
            double* r = out.row(i);
            for (std::size_t k = j + 1; k < n; ++k) r[k] -= err * u(j, k);
            r[j] = 0.0;
        }
    }
    return out;
}

PruneResult sparsegpt_prune(const Mat& w, const CalibrationStats& stats, SparsityPattern pattern, double density,
                            double rel_damp) {
    check_stats(w, stats);
    require(density >= 0.0 && density <= 1.0, ErrorCode::InvalidArgument, "density must lie in [0, 1]");
    const std::size_t m = w.rows, n = w.cols;
    const bool semi = pattern == SparsityPattern::Semi24;
    require(!semi || n % 4 == 0, ErrorCode::ConfigError, "2:4 sparsity needs an input dimension divisible by 4");
    const std::size_t kept = semi ? m * n / 2 : static_cast<std::size_t>(std::llround(density * double(m * n)));
    const std::size_t base = kept / m, extra = kept % m;

    PruneResult r;
    r.w = w;
    r.mask.rows = m;
    r.mask.cols = n;
    r.mask.pattern = pattern;
    r.mask.keep.assign(m * n, 1);
    if (kept == m * n) return r;
    const EMat hinv0 = damped_inverse(stats, damping(stats, rel_damp));

    Eigen::VectorXd x(n), col(n);
    for (std::size_t i = 0; i < m; ++i) {
        const std::size_t remove = n - (semi ? n / 2 : base + (i < extra ? 1 : 0));
        EMat hinv = hinv0;
        for (std::size_t j = 0; j < n; ++j) x(j) = w(i, j);
        std::uint8_t* alive = &r.mask.keep[i * n];
        std::vector<int> group_alive(n / 4 + 1, 4);
        for (std::size_t step = 0; step < remove; ++step) {
            // OBS saliency w_q^2 / [H^-1]_qq over the weights still alive
            std::size_t q = n;
            double best = std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < n; ++j) {
                if (!alive[j] || (semi && group_alive[j / 4] <= 2)) continue;
                const double s = x(j) * x(j) / std::max(hinv(j, j), 1e-300);
                if (s < best) {
                    best = s;
                    q = j;
                }
            }
            const double d = std::max(hinv(q, q), 1e-300);
            col = hinv.col(static_cast<Eigen::Index>(q));
            x -= (x(q) / d) * col;
            hinv.noalias() -= (col / d) * col.transpose();
            x(q) = 0.0;
            alive[q] = 0;
            --group_alive[q / 4];
        }
        for (std::size_t j = 0; j < n; ++j) r.w(i, j) = alive[j] ? x(j) : 0.0;
    }
    return r;
}

std::size_t QuantSpec::groups() const {
    return (cols + static_cast<std::size_t>(group_size) - 1) / static_cast<std::size_t>(group_size);
}

Mat dequantize(const QuantSpec& spec, const std::vector<std::uint32_t>& q) {
    require(q.size() == spec.rows * spec.cols, ErrorCode::ShapeMismatch, "code count != tensor size");
    const std::size_t G = spec.groups();
    Mat w(spec.rows, spec.cols);
    for (std::size_t i = 0; i < spec.rows; ++i) {
        for (std::size_t j = 0; j < spec.cols; ++j) {
            const std::size_t g = j / static_cast<std::size_t>(spec.group_size);
            const Grid grid{spec.scale[i * G + g], spec.zero[i * G + g]};
            double v = dequant(q[i * spec.cols + j], grid);
            if (!spec.channel_scale.empty()) v /= spec.channel_scale[j];
            w(i, j) = v;
        }
    }
    return w;
}

QuantResult rtn_quantize(const Mat& w, int bits, int group_size) {
    check_quant_args(w, bits, group_size);
    QuantResult r;
    r.spec = empty_spec(w, bits, group_size);
    r.q.resize(w.rows * w.cols);
    const std::size_t G = r.spec.groups(), gs = static_cast<std::size_t>(group_size);
    for (std::size_t i = 0; i < w.rows; ++i) {
        for (std::size_t g = 0; g < G; ++g) {
            const std::size_t c0 = g * gs, c1 = std::min(w.cols, c0 + gs);
            const Grid grid = minmax_grid(w.row(i) + c0, c1 - c0, bits);
            r.spec.scale[i * G + g] = grid.s;
            r.spec.zero[i * G + g] = grid.z;
            for (std::size_t j = c0; j < c1; ++j) r.q[i * w.cols + j] = quant_code(w(i, j), grid, bits);
        }
    }
    r.w_hat = dequantize(r.spec, r.q);
    return r;
}

QuantResult awq_quantize(const Mat& w, const CalibrationStats& stats, int bits, int group_size, int grid) {
    check_quant_args(w, bits, group_size);
    check_stats(w, stats);
    require(grid >= 2, ErrorCode::InvalidArgument, "AWQ grid needs at least two points");
    const auto a = stats.abs_mean();
    const double amax = *std::max_element(a.begin(), a.end());
    QuantResult best;
    double best_err = std::numeric_limits<double>::infinity();
    for (int t = 0; t < grid; ++t) {
        const double alpha = static_cast<double>(t) / (grid - 1);
        std::vector<double> c(w.cols, 1.0);
        if (alpha > 0.0 && amax > 0.0) {
            for (std::size_t j = 0; j < w.cols; ++j) c[j] = std::pow(std::max(a[j] / amax, 1e-8), alpha);
        }
        Mat ws = w;
        for (std::size_t i = 0; i < w.rows; ++i) {
            for (std::size_t j = 0; j < w.cols; ++j) ws(i, j) *= c[j];
        }
        QuantResult r = rtn_quantize(ws, bits, group_size);
        r.spec.channel_scale = c;
        r.w_hat = dequantize(r.spec, r.q);
        r.alpha = alpha;
        const double err = reconstruction_error(w, r.w_hat, stats);
        if (err < best_err) {
            best_err = err;
            best = std::move(r);
        }
    }
    return best;
}

QuantResult gptq_quantize(const Mat& w, const CalibrationStats& stats, int bits, int group_size, double rel_damp) {
    check_quant_args(w, bits, group_size);
    check_stats(w, stats);
    const EMat u = inverse_cholesky_upper(stats, damping(stats, rel_damp));
    QuantResult r;
    r.spec = empty_spec(w, bits, group_size);
    r.q.resize(w.rows * w.cols);
    const std::size_t G = r.spec.groups(), gs = static_cast<std::size_t>(group_size), n = w.cols;
    Mat cur = w;
    std::vector<Grid> grids(w.rows);
    for (std::size_t j = 0; j < n; ++j) {
        const std::size_t g = j / gs;
        if (j % gs == 0) {
            const std::size_t c1 = std::min(n, j + gs);
            for (std::size_t i = 0; i < w.rows; ++i) {
                grids[i] = minmax_grid(cur.row(i) + j, c1 - j, bits);
                r.spec.scale[i * G + g] = grids[i].s;
                r.spec.zero[i * G + g] = grids[i].z;
            }
        }
        const double ujj = u(j, j);
        for (std::size_t i = 0; i < w.rows; ++i) {
            const std::uint32_t q = quant_code(cur(i, j), grids[i], bits);
            r.q[i * n + j] = q;
            const double err = (cur(i, j) - dequant(q, grids[i])) / ujj;
            double* row = cur.row(i);
            for (std::size_t k = j + 1; k < n; ++k) row[k] -= err * u(j, k);
        }
    }
    r.w_hat = dequantize(r.spec, r.q);
    return r;
}

double zeroth_order_norm(const std::function<double(const std::vector<double>&)>& f, const std::vector<double>& w,
                         double eps, int trials, std::uint64_t seed) {
    require(eps >= 1e-8, ErrorCode::InvalidArgument, "eps below the numeric floor (1e-8)");
    require(trials >= 1, ErrorCode::InvalidArgument, "trials must be >= 1");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd(0.0, 1.0);
    std::vector<double> plus(w.size()), minus(w.size()), z(w.size());
    double acc = 0.0;
    for (int t = 0; t < trials; ++t) {
        for (auto& v : z) v = nd(rng);
        for (std::size_t i = 0; i < w.size(); ++i) {
            plus[i] = w[i] + eps * z[i];
            minus[i] = w[i] - eps * z[i];
        }
        acc += std::fabs((f(plus) - f(minus)) / (2.0 * eps));
    }
    return acc / trials;
}

// ---- whole model ----

const char* param_method_name(ParamMethod m) {
    switch (m) {
        case ParamMethod::Magnitude: return "MAGNITUDE";
        case ParamMethod::Wanda: return "WANDA";
        case ParamMethod::SparseGPT: return "SPARSEGPT";
        case ParamMethod::EcoFLAP: return "ECOFLAP";
        case ParamMethod::RTN: return "RTN";
        case ParamMethod::AWQ: return "AWQ";
        case ParamMethod::GPTQ: return "GPTQ";
    }
    return "?";
}

ParamMethod parse_param_method(const std::string& s) {
    for (auto m : {ParamMethod::Magnitude, ParamMethod::Wanda, ParamMethod::SparseGPT, ParamMethod::EcoFLAP,
                   ParamMethod::RTN, ParamMethod::AWQ, ParamMethod::GPTQ}) {
        if (s == param_method_name(m)) return m;
    }
    fail(ErrorCode::ConfigError, "unknown parameter-compression method '" + s + "'");
}

bool is_quantization(ParamMethod m) {
    return m == ParamMethod::RTN || m == ParamMethod::AWQ || m == ParamMethod::GPTQ;
}

void validate(const ParamSpec& spec) {
    if (is_quantization(spec.method)) {
        require(spec.bits >= 2 && spec.bits <= 16, ErrorCode::ConfigError, "bits must lie in [2, 16]");
        require(spec.group_size >= 1, ErrorCode::ConfigError, "group_size must be >= 1");
    } else {
        require(spec.density >= 0.0 && spec.density <= 1.0, ErrorCode::ConfigError, "density must lie in [0, 1]");
        if (spec.method == ParamMethod::EcoFLAP) {
            require(spec.pattern == SparsityPattern::Unstructured, ErrorCode::ConfigError,
                    "ECOFLAP allocates per-layer unstructured sparsity; 2:4 has a fixed density");
            require(spec.eps >= 1e-8, ErrorCode::ConfigError, "EcoFLAP eps below the numeric floor (1e-8)");
            require(spec.trials >= 1, ErrorCode::ConfigError, "EcoFLAP trials must be >= 1");
            require(spec.temperature > 0.0, ErrorCode::ConfigError, "EcoFLAP temperature must be positive");
        }
    }
    require(spec.calib_samples >= 1, ErrorCode::ConfigError, "calibration needs at least one sample");
    require(spec.damping > 0.0, ErrorCode::ConfigError, "damping must be positive");
}

const char* proj_name(int p) {
    static const char* names[kProjCount] = {"wq", "wk", "wv", "wo", "wup", "wdown"};
    return names[p];
}

Mat& proj_weight(LayerWeights& w, int p) {
    Mat* m[kProjCount] = {&w.wq, &w.wk, &w.wv, &w.wo, &w.wup, &w.wdown};
    return *m[p];
}

const Mat& proj_weight(const LayerWeights& w, int p) { return proj_weight(const_cast<LayerWeights&>(w), p); }

ProjInput proj_input(int p) {
    switch (p) {
        case 3: return ProjInput::O;
        case 4: return ProjInput::Up;
        case 5: return ProjInput::Down;
        default: return ProjInput::Qkv;
    }
}

std::vector<TaskInstance> calibration_tasks(const Model& model, int count, int l_v, std::uint64_t seed) {
    std::vector<TaskInstance> out;
    out.reserve(count);
    const TaskKind kinds[3] = {TaskKind::NeedleRetrieval, TaskKind::Count, TaskKind::Copy};
    for (int i = 0; i < count; ++i) {
        TaskParams p;
        p.l_v = l_v;
        out.push_back(make_task(model, kinds[i % 3], p, seed + static_cast<std::uint64_t>(i)));
    }
    return out;
}

namespace {

struct StatsSink : ActivationSink {
    std::vector<LayerCalibration>* layers;
    void record(int layer, ProjInput input, const double* x, int) override {
        (*layers)[layer].input[static_cast<int>(input)].add(x);
    }
};

}  // namespace

std::vector<LayerCalibration> calibrate(const Model& model, const std::vector<TaskInstance>& tasks) {
    const std::size_t d = static_cast<std::size_t>(model.hidden);
    std::vector<LayerCalibration> layers(model.cfg.num_layers);
    for (auto& l : layers) {
        l.input = {CalibrationStats(d), CalibrationStats(d), CalibrationStats(d), CalibrationStats(2 * d)};
    }
    StatsSink sink;
    sink.layers = &layers;
    for (const auto& t : tasks) prefill(model, t.seq, nullptr, &sink);
    return layers;
}

double task_loss(const Model& model, const std::vector<TaskInstance>& tasks) {
    require(!tasks.empty(), ErrorCode::InvalidArgument, "loss needs at least one task");
    double total = 0.0;
    for (const auto& t : tasks) {
        const auto pr = prefill(model, t.seq);
        const auto& z = pr.logits;
        double mx = -std::numeric_limits<double>::infinity();
        for (int v = kNumSpecial; v < static_cast<int>(z.size()); ++v) mx = std::max(mx, z[v]);
        double s = 0.0;
        for (int v = kNumSpecial; v < static_cast<int>(z.size()); ++v) s += std::exp(z[v] - mx);
        total += -(z[t.expected_token] - mx - std::log(s));
    }
    return total / static_cast<double>(tasks.size());
}

std::vector<double> ecoflap_layer_scores(const Model& model, const std::vector<TaskInstance>& tasks, double eps,
                                         int trials, std::uint64_t seed) {
    const int L = model.cfg.num_layers;
    std::vector<double> scores(L);
    for (int layer = 0; layer < L; ++layer) {
        std::vector<double> flat;
        for (int p = 0; p < kProjCount; ++p) {
            const Mat& m = proj_weight(model.layers[layer], p);
            flat.insert(flat.end(), m.a.begin(), m.a.end());
        }
        Model work = model;
        auto loss = [&](const std::vector<double>& v) {
            std::size_t off = 0;
            for (int p = 0; p < kProjCount; ++p) {
                Mat& m = proj_weight(work.layers[layer], p);
                std::copy_n(v.begin() + static_cast<std::ptrdiff_t>(off), m.a.size(), m.a.begin());
                off += m.a.size();
            }
            return task_loss(work, tasks);
        };
        scores[layer] = zeroth_order_norm(loss, flat, eps, trials, seed + 0x9E3779B97F4A7C15ULL * (layer + 1));
    }
    return scores;
}

std::vector<double> ecoflap_densities(const std::vector<double>& scores, const std::vector<double>& sizes,
                                      double density, double temperature) {
    const std::size_t L = scores.size();
    require(sizes.size() == L && L >= 1, ErrorCode::ShapeMismatch, "layer score/size mismatch");
    require(temperature > 0.0, ErrorCode::InvalidArgument, "temperature must be positive");
    const double mean = std::accumulate(scores.begin(), scores.end(), 0.0) / static_cast<double>(L);
    std::vector<double> u(L, 1.0);
    if (mean > 0.0 && std::isfinite(mean)) {
        for (std::size_t i = 0; i < L; ++i) u[i] = scores[i] / mean;
    }
    const double umax = *std::max_element(u.begin(), u.end());
    std::vector<double> w(L);
    for (std::size_t i = 0; i < L; ++i) w[i] = std::exp((u[i] - umax) / temperature);
    const double total = std::accumulate(sizes.begin(), sizes.end(), 0.0);
    auto kept = [&](double c) {
        double s = 0.0;
        for (std::size_t i = 0; i < L; ++i) s += std::min(1.0, c * w[i]) * sizes[i];
        return s;
    };
    double lo = 0.0, hi = 1.0;
    while (kept(hi) < density * total && hi < 1e300) hi *= 2.0;
    for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        (kept(mid) < density * total ? lo : hi) = mid;
    }
    std::vector<double> d(L);
    for (std::size_t i = 0; i < L; ++i) d[i] = std::min(1.0, hi * w[i]);
    return d;
}

CompressedModel compress_model(const Model& model, const ParamSpec& spec) {
    validate(spec);
    CompressedModel cm;
    cm.model = model;
    cm.spec = spec;
    const int L = model.cfg.num_layers;

    const bool needs_calib = spec.method != ParamMethod::Magnitude && spec.method != ParamMethod::RTN;
    std::vector<TaskInstance> tasks;
    std::vector<LayerCalibration> calib;
    if (needs_calib) {
        tasks = calibration_tasks(model, spec.calib_samples, spec.calib_l_v, spec.calib_seed);
        calib = calibrate(model, tasks);
    }

    // EcoFLAP: per-tensor kept counts from the layer allocation.
    std::vector<std::array<std::size_t, kProjCount>> eco_counts;
    if (spec.method == ParamMethod::EcoFLAP) {
        std::vector<TaskInstance> subset(tasks.begin(),
                                         tasks.begin() + std::min<std::ptrdiff_t>(spec.eco_samples, tasks.size()));
        cm.layer_scores = ecoflap_layer_scores(model, subset, spec.eps, spec.trials, spec.calib_seed);
        std::vector<double> sizes(L, 0.0);
        for (int l = 0; l < L; ++l) {
            for (int p = 0; p < kProjCount; ++p) sizes[l] += static_cast<double>(proj_weight(model.layers[l], p).a.size());
        }
        cm.layer_density = ecoflap_densities(cm.layer_scores, sizes, spec.density, spec.temperature);
        const double total = std::accumulate(sizes.begin(), sizes.end(), 0.0);
        std::vector<double> want(L);
        std::vector<int> lo(L, 0), hi(L);
        for (int l = 0; l < L; ++l) {
            want[l] = cm.layer_density[l] * sizes[l];
            hi[l] = static_cast<int>(sizes[l]);
        }
        const auto layer_kept = apportion(std::llround(spec.density * total), want, lo, hi);
        eco_counts.resize(L);
        for (int l = 0; l < L; ++l) {
            std::vector<double> msz(kProjCount);
            std::vector<int> mlo(kProjCount, 0), mhi(kProjCount);
            for (int p = 0; p < kProjCount; ++p) {
                msz[p] = static_cast<double>(proj_weight(model.layers[l], p).a.size());
                mhi[p] = static_cast<int>(msz[p]);
            }
            const auto per = apportion(layer_kept[l], msz, mlo, mhi);
            for (int p = 0; p < kProjCount; ++p) eco_counts[l][p] = static_cast<std::size_t>(per[p]);
        }
    }

    for (int l = 0; l < L; ++l) {
        for (int p = 0; p < kProjCount; ++p) {
            Mat& w = proj_weight(cm.model.layers[l], p);
            TensorRecord rec;
            rec.name = "layers." + std::to_string(l) + "." + proj_name(p);
            const CalibrationStats* st = needs_calib ? &calib[l].input[static_cast<int>(proj_input(p))] : nullptr;
            switch (spec.method) {
                case ParamMethod::Magnitude:
                    rec.mask = build_mask(magnitude_scores(w), spec.pattern, spec.density);
                    w = apply_mask(w, *rec.mask);
                    break;
                case ParamMethod::Wanda:
                    rec.mask = build_mask(wanda_scores(w, *st), spec.pattern, spec.density);
                    w = apply_mask(w, *rec.mask);
                    break;
                case ParamMethod::EcoFLAP:
                    rec.mask = build_mask_count(wanda_scores(w, *st), eco_counts[l][p]);
                    w = apply_mask(w, *rec.mask);
                    break;
                case ParamMethod::SparseGPT: {
                    auto r = sparsegpt_prune(w, *st, spec.pattern, spec.density, spec.damping);
                    rec.mask = std::move(r.mask);
                    w = std::move(r.w);
                    break;
                }
                case ParamMethod::RTN:
                    rec.quant = rtn_quantize(w, spec.bits, spec.group_size);
                    break;
                case ParamMethod::AWQ:
                    rec.quant = awq_quantize(w, *st, spec.bits, spec.group_size, spec.awq_grid);
                    break;
                case ParamMethod::GPTQ:
                    rec.quant = gptq_quantize(w, *st, spec.bits, spec.group_size, spec.damping);
                    break;
            }
            if (rec.quant) w = rec.quant->w_hat;
            cm.tensors.push_back(std::move(rec));
        }
    }
    return cm;
}

// ---- file format ----

namespace {

constexpr char kMagic[8] = {'V', 'L', 'C', 'B', 'C', 'M', 'P', '1'};

template <typename T>
void put(std::string& out, const T* p, std::size_t n) {
    out.append(reinterpret_cast<const char*>(p), n * sizeof(T));
}

template <typename T>
void take(const std::string& in, std::size_t& off, T* p, std::size_t n) {
    const std::size_t bytes = n * sizeof(T);
    require(off + bytes <= in.size(), ErrorCode::FormatError, "compressed-model payload truncated");
    std::memcpy(p, in.data() + off, bytes);
    off += bytes;
}

nlohmann::json config_json(const ModelConfig& c) {
    return {{"num_layers", c.num_layers}, {"num_heads", c.num_heads}, {"head_dim", c.head_dim},
            {"vocab_size", c.vocab_size}, {"seed", c.seed},           {"max_seq_len", c.max_seq_len}};
}

nlohmann::json spec_json(const ParamSpec& s) {
    return {{"method", param_method_name(s.method)},
            {"density", s.density},
            {"pattern", pattern_name(s.pattern)},
            {"bits", s.bits},
            {"group_size", s.group_size},
            {"damping", s.damping},
            {"eps", s.eps},
            {"trials", s.trials},
            {"eco_samples", s.eco_samples},
            {"temperature", s.temperature},
            {"calib_samples", s.calib_samples},
            {"calib_l_v", s.calib_l_v},
            {"calib_seed", s.calib_seed},
            {"awq_grid", s.awq_grid}};
}

}  // namespace

void save_compressed(const std::string& path, const CompressedModel& cm) {
    nlohmann::json header;
    header["config"] = config_json(cm.model.cfg);
    header["spec"] = spec_json(cm.spec);
    header["layer_scores"] = cm.layer_scores;
    header["layer_density"] = cm.layer_density;
    header["tensors"] = nlohmann::json::array();
    std::string payload;
    require(cm.tensors.size() == cm.model.layers.size() * kProjCount, ErrorCode::ShapeMismatch,
            "one tensor record per projection expected");
    for (std::size_t ti = 0; ti < cm.tensors.size(); ++ti) {
        const TensorRecord& t = cm.tensors[ti];
        nlohmann::json tj;
        tj["name"] = t.name;
        tj["offset"] = payload.size();
        if (t.mask) {
            const auto& m = *t.mask;
            tj["kind"] = "mask";
            tj["rows"] = m.rows;
            tj["cols"] = m.cols;
            tj["pattern"] = pattern_name(m.pattern);
            std::vector<std::uint8_t> bits((m.keep.size() + 7) / 8, 0);
            for (std::size_t i = 0; i < m.keep.size(); ++i) {
                if (m.keep[i]) bits[i / 8] |= static_cast<std::uint8_t>(1u << (i % 8));
            }
            put(payload, bits.data(), bits.size());
            // kept values (SparseGPT rewrites them)
            const Mat& w = proj_weight(cm.model.layers[ti / kProjCount], static_cast<int>(ti % kProjCount));
            std::vector<double> vals;
            for (std::size_t i = 0; i < m.keep.size(); ++i) {
                if (m.keep[i]) vals.push_back(w.a[i]);
            }
            tj["kept"] = vals.size();
            put(payload, vals.data(), vals.size());
        } else if (t.quant) {
            const auto& q = *t.quant;
            const auto& s = q.spec;
            tj["kind"] = "quant";
            tj["rows"] = s.rows;
            tj["cols"] = s.cols;
            tj["bits"] = s.bits;
            tj["group_size"] = s.group_size;
            tj["alpha"] = q.alpha;
            tj["channel_scaled"] = !s.channel_scale.empty();
            std::vector<std::uint8_t> packed((q.q.size() * static_cast<std::size_t>(s.bits) + 7) / 8, 0);
            std::size_t bit = 0;
            for (std::uint32_t code : q.q) {
                for (int b = 0; b < s.bits; ++b, ++bit) {
                    if (code >> b & 1u) packed[bit / 8] |= static_cast<std::uint8_t>(1u << (bit % 8));
                }
            }
            put(payload, packed.data(), packed.size());
            put(payload, s.scale.data(), s.scale.size());
            put(payload, s.zero.data(), s.zero.size());
            put(payload, s.channel_scale.data(), s.channel_scale.size());
        }
        tj["bytes"] = payload.size() - tj["offset"].get<std::size_t>();
        header["tensors"].push_back(tj);
    }
    const std::string hs = header.dump();
    const auto hl = static_cast<std::uint32_t>(hs.size());
    std::ofstream f(path, std::ios::binary);
    require(static_cast<bool>(f), ErrorCode::IoError, "cannot open '" + path + "' for writing");
    f.write(kMagic, 8);
    f.write(reinterpret_cast<const char*>(&hl), 4);
    f.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    f.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    require(static_cast<bool>(f), ErrorCode::IoError, "write to '" + path + "' failed");
}

CompressedModel load_compressed(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    require(static_cast<bool>(f), ErrorCode::IoError, "cannot open '" + path + "'");
    std::string all((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    require(all.size() >= 12 && std::memcmp(all.data(), kMagic, 8) == 0, ErrorCode::FormatError,
            "not a compressed-model file (bad magic)");
    std::uint32_t hl = 0;
    std::memcpy(&hl, all.data() + 8, 4);
    require(12 + static_cast<std::size_t>(hl) <= all.size(), ErrorCode::FormatError, "header length out of range");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(all.substr(12, hl));
    } catch (const std::exception& e) {
        fail(ErrorCode::FormatError, std::string("malformed header: ") + e.what());
    }
    const std::string payload = all.substr(12 + hl);

    CompressedModel cm;
    try {
        const auto& c = header.at("config");
        ModelConfig cfg;
        cfg.num_layers = c.at("num_layers");
        cfg.num_heads = c.at("num_heads");
        cfg.head_dim = c.at("head_dim");
        cfg.vocab_size = c.at("vocab_size");
        cfg.seed = c.at("seed");
        cfg.max_seq_len = c.at("max_seq_len");
        cm.model = build_model(cfg);
        const auto& s = header.at("spec");
        cm.spec.method = parse_param_method(s.at("method"));
        cm.spec.density = s.at("density");
        cm.spec.pattern = parse_pattern(s.at("pattern"));
        cm.spec.bits = s.at("bits");
        cm.spec.group_size = s.at("group_size");
        cm.spec.damping = s.at("damping");
        cm.spec.eps = s.at("eps");
        cm.spec.trials = s.at("trials");
        cm.spec.eco_samples = s.at("eco_samples");
        cm.spec.temperature = s.at("temperature");
        cm.spec.calib_samples = s.at("calib_samples");
        cm.spec.calib_l_v = s.at("calib_l_v");
        cm.spec.calib_seed = s.at("calib_seed");
        cm.spec.awq_grid = s.at("awq_grid");
        cm.layer_scores = header.at("layer_scores").get<std::vector<double>>();
        cm.layer_density = header.at("layer_density").get<std::vector<double>>();
        const auto& tensors = header.at("tensors");
        require(tensors.size() == static_cast<std::size_t>(cfg.num_layers * kProjCount), ErrorCode::FormatError,
                "tensor count does not match the model");
        std::size_t idx = 0;
        for (const auto& tj : tensors) {
            const int l = static_cast<int>(idx / kProjCount), p = static_cast<int>(idx % kProjCount);
            ++idx;
            Mat& w = proj_weight(cm.model.layers[l], p);
            TensorRecord rec;
            rec.name = tj.at("name");
            require(rec.name == "layers." + std::to_string(l) + "." + proj_name(p), ErrorCode::FormatError,
                    "unexpected tensor '" + rec.name + "'");
            const std::size_t rows = tj.at("rows"), cols = tj.at("cols");
            require(rows == w.rows && cols == w.cols, ErrorCode::ShapeMismatch, "tensor '" + rec.name + "' shape");
            std::size_t off = tj.at("offset");
            const std::string kind = tj.at("kind");
            if (kind == "mask") {
                SparsityMask m;
                m.rows = rows;
                m.cols = cols;
                m.pattern = parse_pattern(tj.at("pattern"));
                std::vector<std::uint8_t> bits((rows * cols + 7) / 8);
                take(payload, off, bits.data(), bits.size());
                m.keep.resize(rows * cols);
                for (std::size_t i = 0; i < m.keep.size(); ++i) m.keep[i] = bits[i / 8] >> (i % 8) & 1u;
                std::vector<double> vals(tj.at("kept").get<std::size_t>());
                require(vals.size() == m.ones(), ErrorCode::FormatError, "kept count disagrees with the mask");
                take(payload, off, vals.data(), vals.size());
                std::size_t v = 0;
                for (std::size_t i = 0; i < m.keep.size(); ++i) w.a[i] = m.keep[i] ? vals[v++] : 0.0;
                rec.mask = std::move(m);
            } else if (kind == "quant") {
                QuantResult q;
                q.spec.rows = rows;
                q.spec.cols = cols;
                q.spec.bits = tj.at("bits");
                q.spec.group_size = tj.at("group_size");
                q.alpha = tj.at("alpha");
                require(q.spec.bits >= 2 && q.spec.bits <= 16 && q.spec.group_size >= 1, ErrorCode::FormatError,
                        "bad quantization parameters");
                std::vector<std::uint8_t> packed((rows * cols * static_cast<std::size_t>(q.spec.bits) + 7) / 8);
                take(payload, off, packed.data(), packed.size());
                q.q.assign(rows * cols, 0);
                std::size_t bit = 0;
                for (auto& code : q.q) {
                    for (int b = 0; b < q.spec.bits; ++b, ++bit) code |= static_cast<std::uint32_t>(packed[bit / 8] >> (bit % 8) & 1u) << b;
                }
                const std::size_t ng = rows * q.spec.groups();
                q.spec.scale.resize(ng);
                q.spec.zero.resize(ng);
                take(payload, off, q.spec.scale.data(), ng);
                take(payload, off, q.spec.zero.data(), ng);
                if (tj.at("channel_scaled").get<bool>()) {
                    q.spec.channel_scale.resize(cols);
                    take(payload, off, q.spec.channel_scale.data(), cols);
                }
                q.w_hat = dequantize(q.spec, q.q);
                w = q.w_hat;
                rec.quant = std::move(q);
            } else {
                fail(ErrorCode::FormatError, "unknown tensor kind '" + kind + "'");
            }
            cm.tensors.push_back(std::move(rec));
        }
    } catch (const Error&) {
        throw;
    } catch (const std::exception& e) {
        fail(ErrorCode::FormatError, std::string("malformed compressed-model header: ") + e.what());
    }
    return cm;
}

}  // namespace vlcb
