// Copyright (C) 2026 The vlcb Authors
// SPDX-License-Identifier: Apache-2.0

#include "vlcb/kv_compress.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "vlcb/token_prune.hpp"

namespace vlcb {

std::vector<double> score(const ScoringFunctional& f, const Mat& A, int l_v) {
    const int l = static_cast<int>(A.rows);
    require(A.cols == A.rows, ErrorCode::ShapeMismatch, "attention matrix must be square");
    require(l_v >= 0 && l_v <= l, ErrorCode::InvalidArgument, "visual span exceeds the matrix");
    std::vector<double> s(l, 0.0);
    int r0 = 0;
    switch (f.kind) {
        case Functional::Acc:
        case Functional::Norm:
            r0 = 0;
            break;
        case Functional::Sw:
            require(f.window >= 1 && f.window <= l, ErrorCode::InvalidArgument,
                    "SW window must satisfy 1 <= w <= l (w=" + std::to_string(f.window) + ", l=" + std::to_string(l) +
                        ")");
            r0 = l - f.window;
            break;
        case Functional::Pv:
            require(l_v < l, ErrorCode::EmptyTextSpan, "PV needs at least one text query");
            r0 = l_v;
            break;
    }
    for (int i = r0; i < l; ++i) {
        const double* row = A.row(i);
        for (int j = 0; j <= i; ++j) s[j] += row[j];
    }
    if (f.kind == Functional::Norm) {
        for (int j = 0; j < l; ++j) s[j] /= static_cast<double>(l - j);
    }
    return s;
}

long long BudgetAllocation::total() const {
    return std::accumulate(quotas.begin(), quotas.end(), 0LL);
}

int kv_quota(double b, int l) {
    require(b > 0.0 && b <= 1.0 && std::isfinite(b), ErrorCode::InvalidArgument, "budget must lie in (0, 1]");
    require(l >= 1, ErrorCode::InvalidArgument, "empty cache");
    return std::clamp(static_cast<int>(std::floor(b * l + 1e-9)), 1, l);
}

int recent_window(int quota) {
    const int r = static_cast<int>(std::ceil(0.1 * quota - 1e-9));
    return std::clamp(r, 1, std::max(1, quota));
}

std::vector<int> apportion(long long total, const std::vector<double>& weights, const std::vector<int>& lo,
                           const std::vector<int>& hi) {
    const std::size_t n = weights.size();
    require(lo.size() == n && hi.size() == n, ErrorCode::ShapeMismatch, "apportion bounds size");
    long long slo = 0, shi = 0;
    for (std::size_t i = 0; i < n; ++i) {
        require(lo[i] <= hi[i], ErrorCode::InvalidArgument, "apportion bound lo > hi");
        slo += lo[i];
        shi += hi[i];
    }
    require(slo <= total && total <= shi, ErrorCode::InvalidArgument, "apportion total outside bounds");
    std::vector<double> w(weights);
    double ws = 0.0;
    for (auto& x : w) {
        x = (std::isfinite(x) && x > 0.0) ? x : 0.0;
        ws += x;
    }
    if (ws <= 0.0) std::fill(w.begin(), w.end(), 1.0);

    auto fill = [&](double lam) {
        double s = 0.0;
        for (std::size_t i = 0; i < n; ++i) s += std::clamp(lam * w[i], double(lo[i]), double(hi[i]));
        return s;
    };
    double a = 0.0, b = 1.0;
    while (fill(b) < static_cast<double>(total) && b < 1e300) b *= 2.0;
    for (int it = 0; it < 200; ++it) {
        const double m = 0.5 * (a + b);
        if (fill(m) < static_cast<double>(total)) {
            a = m;
        } else {
            b = m;
        }
    }
    std::vector<double> x(n);
    std::vector<int> q(n);
    long long s = 0;
    for (std::size_t i = 0; i < n; ++i) {
        x[i] = std::clamp(b * w[i], double(lo[i]), double(hi[i]));
        q[i] = std::clamp(static_cast<int>(std::floor(x[i])), lo[i], hi[i]);
        s += q[i];
    }
    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int i, int j) { return (x[i] - std::floor(x[i])) > (x[j] - std::floor(x[j])); });
    while (s < total) {
        bool moved = false;
        for (int i : order) {
            if (s == total) break;
            if (q[i] < hi[i]) {
                ++q[i];
                ++s;
                moved = true;
            }
        }
        require(moved, ErrorCode::Internal, "apportion could not place remainder");
    }
    while (s > total) {
        bool moved = false;
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            if (s == total) break;
            if (q[*it] > lo[*it]) {
                --q[*it];
                --s;
                moved = true;
            }
        }
        require(moved, ErrorCode::Internal, "apportion could not remove excess");
    }
    return q;
}

double layer_density(const AttentionTrace& trace, int layer, double mass) {
    const auto& heads = trace.attn[layer];
    const int n = static_cast<int>(heads[0].rows);
    const int first = trace.l_v < n ? trace.l_v : 0;
    double acc = 0.0;
    long long cnt = 0;
    std::vector<double> row;
    for (const Mat& A : heads) {
        for (int i = first; i < n; ++i) {
            row.assign(A.row(i), A.row(i) + i + 1);
            std::sort(row.begin(), row.end(), std::greater<>());
            const double target = mass * std::accumulate(row.begin(), row.end(), 0.0);
            double c = 0.0;
            int k = 0;
            while (k < static_cast<int>(row.size()) && c < target) c += row[k++];
            acc += static_cast<double>(std::max(k, 1)) / static_cast<double>(i + 1);
            ++cnt;
        }
    }
    return cnt ? acc / static_cast<double>(cnt) : 1.0;
}

BudgetAllocation allocate(AllocationMode mode, double b, const AttentionTrace& trace, double alpha) {
    const int L = trace.num_layers();
    require(L >= 2, ErrorCode::InvalidArgument, "allocation needs at least two layers");
    const int l = trace.l;
    for (int k = 0; k < L; ++k) {
        require(static_cast<int>(trace.token_index[k].size()) == l, ErrorCode::InvalidArgument,
                "KV compression needs an unpruned trace");
    }
    BudgetAllocation out;
    out.fraction = b;
    out.mode = mode;
    out.alpha = alpha;
    out.uniform_quota = kv_quota(b, l);
    const long long total = static_cast<long long>(out.uniform_quota) * L;
    const std::vector<int> lo(L, 1), hi(L, l);

    auto densities = [&]() {
        std::vector<double> w(L);
        for (int k = 0; k < L; ++k) w[k] = layer_density(trace, k);
        return w;
    };

    switch (mode) {
        case AllocationMode::Uniform:
            out.quotas.assign(L, out.uniform_quota);
            break;
        case AllocationMode::Adaptive:
            out.quotas = apportion(total, densities(), lo, hi);
            break;
        case AllocationMode::Pyramid: {
            std::vector<double> w(L);
            for (int k = 0; k < L; ++k) w[k] = 1.5 - static_cast<double>(k) / (L - 1);
            out.quotas = apportion(total, w, lo, hi);
            break;
        }
        case AllocationMode::Hybrid: {
            require(alpha >= 0.0 && alpha <= 1.0, ErrorCode::ConfigError, "HYBRID alpha must lie in [0, 1]");
            const int u = static_cast<int>(std::floor(alpha * static_cast<double>(total) / L + 1e-9));
            const long long rest = total - static_cast<long long>(u) * L;
            std::vector<int> rlo(L, std::max(0, 1 - u)), rhi(L, l - u);
            std::vector<int> extra = rest > 0 || u < 1 ? apportion(rest, densities(), rlo, rhi) : std::vector<int>(L, 0);
            out.quotas.resize(L);
            for (int k = 0; k < L; ++k) out.quotas[k] = u + extra[k];
            break;
        }
    }
    out.recent.resize(L);
    for (int k = 0; k < L; ++k) out.recent[k] = recent_window(out.quotas[k]);
    return out;
}

const char* kv_method_name(KvMethod m) {
    switch (m) {
        case KvMethod::StreamingLLM: return "STREAMING_LLM";
        case KvMethod::H2O: return "H2O";
        case KvMethod::SnapKV: return "SNAPKV";
        case KvMethod::PyramidKV: return "PYRAMIDKV";
        case KvMethod::LookM: return "LOOKM";
        case KvMethod::VLCache: return "VLCACHE";
    }
    return "?";
}

KvMethod parse_kv_method(const std::string& s) {
    for (auto m : {KvMethod::StreamingLLM, KvMethod::H2O, KvMethod::SnapKV, KvMethod::PyramidKV, KvMethod::LookM,
                   KvMethod::VLCache}) {
        if (s == kv_method_name(m)) return m;
    }
    fail(ErrorCode::ConfigError, "unknown KV method '" + s + "'");
}

const char* allocation_name(AllocationMode m) {
    switch (m) {
        case AllocationMode::Uniform: return "UNIFORM";
        case AllocationMode::Adaptive: return "ADAPTIVE";
        case AllocationMode::Hybrid: return "HYBRID";
        case AllocationMode::Pyramid: return "PYRAMID";
    }
    return "?";
}

AllocationMode parse_allocation(const std::string& s) {
    for (auto m : {AllocationMode::Uniform, AllocationMode::Adaptive, AllocationMode::Hybrid, AllocationMode::Pyramid}) {
        if (s == allocation_name(m)) return m;
    }
    fail(ErrorCode::ConfigError, "unknown allocation mode '" + s + "'");
}

const char* merge_name(MergeStrategy m) {
    switch (m) {
        case MergeStrategy::None: return "NONE";
        case MergeStrategy::MergeIntoRetained: return "MERGE_INTO_RETAINED";
        case MergeStrategy::ConcatCentroids: return "CONCAT_CENTROIDS";
        case MergeStrategy::ModalitySpecific: return "MODALITY_SPECIFIC";
    }
    return "?";
}

MergeStrategy parse_merge(const std::string& s) {
    for (auto m : {MergeStrategy::None, MergeStrategy::MergeIntoRetained, MergeStrategy::ConcatCentroids,
                   MergeStrategy::ModalitySpecific}) {
        if (s == merge_name(m)) return m;
    }
    fail(ErrorCode::ConfigError, "unknown merge strategy '" + s + "'");
}

const char* text_prior_name(TextPrior p) {
    switch (p) {
        case TextPrior::None: return "NONE";
        case TextPrior::Tie: return "TIE";
        case TextPrior::Strict: return "STRICT";
    }
    return "?";
}

TextPrior parse_text_prior(const std::string& s) {
    for (auto p : {TextPrior::None, TextPrior::Tie, TextPrior::Strict}) {
        if (s == text_prior_name(p)) return p;
    }
    fail(ErrorCode::ConfigError, "unknown text prior '" + s + "'");
}

const char* weighting_name(MergeWeighting w) { return w == MergeWeighting::Equal ? "EQUAL" : "SCORE"; }

MergeWeighting parse_weighting(const std::string& s) {
    if (s == "EQUAL") return MergeWeighting::Equal;
    if (s == "SCORE") return MergeWeighting::Score;
    fail(ErrorCode::ConfigError, "unknown merge weighting '" + s + "'");
}

KvPolicy resolve(const KvPolicySpec& spec) {
    require(spec.budget > 0.0 && spec.budget <= 1.0, ErrorCode::ConfigError, "budget must lie in (0, 1]");
    require(spec.window >= 1, ErrorCode::ConfigError, "window must be >= 1");
    require(spec.concat_divisor > 0.0, ErrorCode::ConfigError, "concat divisor must be positive");
    KvPolicy p;
    p.method = spec.method;
    p.budget = spec.budget;
    p.alpha = spec.alpha;
    p.head_adaptive = spec.head_adaptive;
    p.weighting = spec.weighting;
    p.concat_divisor = spec.concat_divisor;
    switch (spec.method) {
        case KvMethod::StreamingLLM:
            p.allocation = AllocationMode::Uniform;
            break;
        case KvMethod::H2O:
            p.functional = ScoringFunctional{Functional::Acc, spec.window};
            break;
        case KvMethod::SnapKV:
            p.functional = ScoringFunctional{Functional::Sw, spec.window};
            break;
        case KvMethod::PyramidKV:
            p.functional = ScoringFunctional{Functional::Sw, spec.window};
            p.allocation = AllocationMode::Pyramid;
            break;
        case KvMethod::LookM:
            p.functional = ScoringFunctional{Functional::Acc, spec.window};
            p.merge = MergeStrategy::MergeIntoRetained;
            p.text_prior = TextPrior::Strict;
            break;
        case KvMethod::VLCache:
            p.functional = ScoringFunctional{Functional::Pv, spec.window};
            p.allocation = AllocationMode::Adaptive;
            break;
    }
    if (spec.allocation) {
        const AllocationMode a = *spec.allocation;
        if (spec.method == KvMethod::PyramidKV && a == AllocationMode::Adaptive) {
            // the pyramid schedule is PyramidKV's adaptive allocator
        } else if (spec.method == KvMethod::PyramidKV && a != AllocationMode::Pyramid) {
            fail(ErrorCode::ConfigError, "PYRAMIDKV is defined by its PYRAMID allocation; got " +
                                             std::string(allocation_name(a)));
        }
        if (spec.method != KvMethod::PyramidKV && a == AllocationMode::Pyramid) {
            fail(ErrorCode::ConfigError, "PYRAMID allocation belongs to PYRAMIDKV; use ADAPTIVE or HYBRID for " +
                                             std::string(kv_method_name(spec.method)));
        }
        if (spec.method != KvMethod::PyramidKV) p.allocation = a;
    }
    if (p.allocation == AllocationMode::Hybrid) {
        require(spec.alpha >= 0.0 && spec.alpha <= 1.0, ErrorCode::ConfigError, "HYBRID alpha must lie in [0, 1]");
    }
    if (spec.merge) p.merge = *spec.merge;
    if (spec.method == KvMethod::LookM && p.merge == MergeStrategy::None) {
        fail(ErrorCode::ConfigError, "LOOKM merges evicted rows; merge strategy NONE is H2O with a text prior");
    }
    if (spec.text_prior) p.text_prior = *spec.text_prior;
    if (p.weighting == MergeWeighting::Score && !p.functional) {
        fail(ErrorCode::ConfigError, "score-weighted merging needs a scoring functional");
    }
    return p;
}

std::vector<std::vector<int>> select(const std::vector<std::vector<double>>& head_scores, int quota, int recent,
                                     bool head_adaptive, const std::vector<Modality>& modality, TextPrior prior) {
    require(!head_scores.empty(), ErrorCode::InvalidArgument, "no heads to select for");
    const int H = static_cast<int>(head_scores.size());
    const int n = static_cast<int>(head_scores[0].size());
    require(static_cast<int>(modality.size()) >= n, ErrorCode::ShapeMismatch, "modality tags shorter than scores");
    quota = std::clamp(quota, 0, n);
    recent = std::clamp(recent, 0, quota);

    auto pick = [&](const std::vector<double>& s) {
        std::vector<int> order(n);
        std::iota(order.begin(), order.end(), 0);
        auto text = [&](int j) { return modality[j] == Modality::Text ? 1 : 0; };
        std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
            switch (prior) {
                case TextPrior::Strict:
                    if (text(a) != text(b)) return text(a) > text(b);
                    return s[a] > s[b];
                case TextPrior::Tie:
                    if (s[a] != s[b]) return s[a] > s[b];
                    return text(a) > text(b);
                case TextPrior::None:
                    break;
            }
            return s[a] > s[b];
        });
        std::vector<std::uint8_t> taken(n, 0);
        std::vector<int> sel;
        for (int j = n - recent; j < n; ++j) {
            sel.push_back(j);
            taken[j] = 1;
        }
        for (int j : order) {
            if (static_cast<int>(sel.size()) >= quota) break;
            if (!taken[j]) {
                sel.push_back(j);
                taken[j] = 1;
            }
        }
        std::sort(sel.begin(), sel.end());
        return sel;
    };

    std::vector<std::vector<int>> out(H);
    if (head_adaptive) {
        for (int h = 0; h < H; ++h) out[h] = pick(head_scores[h]);
    } else {
        std::vector<double> mean(n, 0.0);
        for (const auto& s : head_scores) {
            for (int j = 0; j < n; ++j) mean[j] += s[j];
        }
        for (auto& x : mean) x /= H;
        const auto shared = pick(mean);
        for (int h = 0; h < H; ++h) out[h] = shared;
    }
    return out;
}

RetentionMask plan(const KvPolicy& policy, const AttentionTrace& trace) {
    RetentionMask rm;
    rm.allocation = allocate(policy.allocation, policy.budget, trace, policy.alpha);
    const int L = trace.num_layers();
    const int H = trace.num_heads();
    const int l = trace.l;
    std::vector<Modality> modality(l, Modality::Text);
    for (int i = 0; i < trace.l_v; ++i) modality[i] = Modality::Visual;
    rm.retained.resize(L);
    rm.scores.resize(L);
    for (int k = 0; k < L; ++k) {
        const int q = rm.allocation.quotas[k];
        const int r = rm.allocation.recent[k];
        if (!policy.functional) {
            std::vector<int> keep;
            for (int j = 0; j < q - r; ++j) keep.push_back(j);
            for (int j = l - r; j < l; ++j) keep.push_back(j);
            rm.retained[k].assign(H, keep);
            rm.scores[k].assign(H, std::vector<double>(l, 0.0));
            continue;
        }
        std::vector<std::vector<double>> hs(H);
        for (int h = 0; h < H; ++h) hs[h] = score(*policy.functional, trace.attn[k][h], trace.l_v);
        rm.retained[k] = select(hs, q, r, policy.head_adaptive, modality, policy.text_prior);
        if (!policy.head_adaptive) {
            std::vector<double> mean(l, 0.0);
            for (const auto& s : hs) {
                for (int j = 0; j < l; ++j) mean[j] += s[j];
            }
            for (auto& x : mean) x /= H;
            hs.assign(H, mean);
        }
        rm.scores[k] = std::move(hs);
    }
    return rm;
}

std::uint64_t scoring_surcharge(const KvPolicy& policy, const AttentionTrace& trace, int head_dim) {
    const int l = trace.l;
    std::vector<std::uint8_t> rows(l, 0);
    if (policy.functional) {
        switch (policy.functional->kind) {
            case Functional::Acc:
            case Functional::Norm:
                std::fill(rows.begin(), rows.end(), 1);
                break;
            case Functional::Sw:
                for (int i = std::max(0, l - policy.functional->window); i < l; ++i) rows[i] = 1;
                break;
            case Functional::Pv:
                for (int i = trace.l_v; i < l; ++i) rows[i] = 1;
                break;
        }
    }
    if (policy.allocation == AllocationMode::Adaptive || policy.allocation == AllocationMode::Hybrid) {
        for (int i = trace.l_v; i < l; ++i) rows[i] = 1;
    }
    std::uint64_t per_head = 0;
    for (int i = 0; i < l; ++i) {
        if (rows[i]) per_head += static_cast<std::uint64_t>(i + 1) * head_dim;
    }
    return per_head * static_cast<std::uint64_t>(trace.num_heads()) * static_cast<std::uint64_t>(trace.num_layers());
}

HeadCache merge_head(const HeadCache& full, const std::vector<int>& retained, MergeStrategy strategy,
                     MergeWeighting weighting, const std::vector<double>& scores, const std::vector<Modality>& modality,
                     int concat_k, int layer, int head, std::vector<MergeAssignment>* assignments, bool* dropped) {
    const int n = static_cast<int>(full.index.size());
    const std::size_t hd = full.k.cols;
    HeadCache out;
    out.k = select_rows(full.k, retained);
    out.v = select_rows(full.v, retained);
    for (int r : retained) out.index.push_back(full.index[r]);
    if (strategy == MergeStrategy::None) return out;

    std::vector<std::uint8_t> keep(n, 0);
    for (int r : retained) keep[r] = 1;
    std::vector<int> evicted;
    for (int i = 0; i < n; ++i) {
        if (!keep[i]) evicted.push_back(i);
    }
    if (evicted.empty()) return out;

    if (strategy == MergeStrategy::ConcatCentroids) {
        const int k = std::min(concat_k, static_cast<int>(evicted.size()));
        if (k <= 0) return out;
        Mat pts(evicted.size(), 2 * hd);
        for (std::size_t e = 0; e < evicted.size(); ++e) {
            std::copy_n(full.k.row(evicted[e]), hd, pts.row(e));
            std::copy_n(full.v.row(evicted[e]), hd, pts.row(e) + hd);
        }
        const auto km = kmeans(pts, k);
        for (int c = 0; c < k; ++c) {
            out.k.a.insert(out.k.a.end(), km.centroids.row(c), km.centroids.row(c) + hd);
            out.v.a.insert(out.v.a.end(), km.centroids.row(c) + hd, km.centroids.row(c) + 2 * hd);
        }
        out.k.rows += k;
        out.v.rows += k;
        out.extra = k;
        return out;
    }

    const bool same_modality = strategy == MergeStrategy::ModalitySpecific;
    std::vector<std::vector<int>> groups(retained.size());
    for (int e : evicted) {
        int arg = -1;
        double best = -std::numeric_limits<double>::infinity();
        for (std::size_t r = 0; r < retained.size(); ++r) {
            if (same_modality && modality[full.index[retained[r]]] != modality[full.index[e]]) continue;
            const double c = cosine(full.k.row(e), full.k.row(retained[r]), hd);
            if (c > best) {
                best = c;
                arg = static_cast<int>(r);
            }
        }
        if (arg < 0) {
            if (dropped) *dropped = true;
            continue;
        }
        groups[arg].push_back(e);
        if (assignments) assignments->push_back({layer, head, full.index[e], full.index[retained[arg]]});
    }
    for (std::size_t r = 0; r < retained.size(); ++r) {
        if (groups[r].empty()) continue;
        std::vector<int> members{retained[r]};
        members.insert(members.end(), groups[r].begin(), groups[r].end());
        double wsum = 0.0;
        if (weighting == MergeWeighting::Score) {
            for (int j : members) wsum += scores[j];
        }
        const bool equal = weighting == MergeWeighting::Equal || !(wsum > 0.0);
        const double denom = equal ? static_cast<double>(members.size()) : wsum;
        std::vector<double> kk(hd, 0.0), vv(hd, 0.0);
        for (int j : members) {
            const double w = equal ? 1.0 : scores[j];
            for (std::size_t c = 0; c < hd; ++c) {
                kk[c] += w * full.k(j, c);
                vv[c] += w * full.v(j, c);
            }
        }
        for (std::size_t c = 0; c < hd; ++c) {
            out.k(r, c) = kk[c] / denom;
            out.v(r, c) = vv[c] / denom;
        }
    }
    return out;
}

CompressResult compress(const KvPolicy& policy, const AttentionTrace& trace, const KVCacheState& cache) {
    const int L = trace.num_layers();
    require(static_cast<int>(cache.layers.size()) == L, ErrorCode::ShapeMismatch, "cache/trace layer mismatch");
    CompressResult res;
    res.mask = plan(policy, trace);
    res.surcharge_ops = scoring_surcharge(policy, trace, cache.head_dim);
    res.cache.l_v = cache.l_v;
    res.cache.l = cache.l;
    res.cache.head_dim = cache.head_dim;
    res.cache.modality = cache.modality;
    res.cache.capacity = res.mask.allocation.quotas;
    const int concat_k = visionzip_k(policy.budget, trace.l, policy.concat_divisor);
    for (int k = 0; k < L; ++k) {
        const int H = static_cast<int>(cache.layers[k].size());
        std::vector<HeadCache> layer(H);
        for (int h = 0; h < H; ++h) {
            const HeadCache& full = cache.layers[k][h];
            require(static_cast<int>(full.index.size()) == trace.l && full.extra == 0, ErrorCode::ShapeMismatch,
                    "KV compression expects the full prefill cache");
            layer[h] = merge_head(full, res.mask.retained[k][h], policy.merge, policy.weighting,
                                  res.mask.scores[k][h], cache.modality, concat_k, k, h, &res.assignments,
                                  &res.dropped_rows);
        }
        res.cache.layers.push_back(std::move(layer));
    }
    return res;
}

}  // namespace vlcb
