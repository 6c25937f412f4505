// Copyright (C) 2026 The vlcb Authors
// SPDX-License-Identifier: Apache-2.0

#include "vlcb/token_prune.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace vlcb {

namespace {

void check_budget(double b) {
    require(b > 0.0 && b <= 1.0 && std::isfinite(b), ErrorCode::InvalidArgument, "budget must lie in (0, 1]");
}

std::vector<std::uint8_t> to_mask(const std::vector<int>& idx, int n) {
    std::vector<std::uint8_t> m(n, 0);
    for (int i : idx) m[i] = 1;
    return m;
}

double sqdist(const double* x, const double* y, std::size_t n) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double t = x[i] - y[i];
        s += t * t;
    }
    return s;
}

}  // namespace

int prune_quota(double b, int l_v) {
    check_budget(b);
    require(l_v >= 1, ErrorCode::InvalidArgument, "no visual tokens to prune");
    const int q = static_cast<int>(std::floor(b * l_v + 1e-9));
    return std::clamp(q, 1, l_v);
}

std::vector<double> fastv_score(const AttentionTrace& trace, int layer) {
    require(layer >= 0 && layer < trace.num_layers(), ErrorCode::InvalidArgument, "FastV layer outside model depth");
    require(trace.l > trace.l_v, ErrorCode::EmptyTextSpan, "FastV needs at least one text query");
    const auto& rows = trace.token_index[layer];
    require(static_cast<int>(rows.size()) == trace.l, ErrorCode::InvalidArgument,
            "FastV scores need an unpruned layer");
    const int H = trace.num_heads();
    std::vector<double> s(trace.l_v, 0.0);
    for (int h = 0; h < H; ++h) {
        const Mat& A = trace.attn[layer][h];
        for (int i = trace.l_v; i < trace.l; ++i) {
            for (int j = 0; j < trace.l_v; ++j) s[j] += A(i, j);
        }
    }
    for (auto& x : s) x /= H;
    return s;
}

std::vector<std::uint8_t> threshold_mask(const std::vector<double>& scores, double b) {
    const int n = static_cast<int>(scores.size());
    const int q = prune_quota(b, n);
    return to_mask(top_k_indices(scores, q), n);
}

const char* fastv_variant_name(FastVVariant v) {
    switch (v) {
        case FastVVariant::Origin: return "ORIGIN";
        case FastVVariant::A1ExcludeSinks: return "A1_EXCLUDE_SINKS";
        case FastVVariant::A2ForceSinks: return "A2_FORCE_SINKS";
    }
    return "?";
}

FastVVariant parse_fastv_variant(const std::string& s) {
    if (s == "ORIGIN") return FastVVariant::Origin;
    if (s == "A1_EXCLUDE_SINKS" || s == "A1") return FastVVariant::A1ExcludeSinks;
    if (s == "A2_FORCE_SINKS" || s == "A2") return FastVVariant::A2ForceSinks;
    fail(ErrorCode::ConfigError, "unknown FastV variant '" + s + "'");
}

std::vector<int> sink_set(const std::vector<double>& cls_attention, double fraction) {
    require(fraction > 0.0 && fraction <= 1.0, ErrorCode::InvalidArgument, "sink_fraction must lie in (0, 1]");
    const int n = static_cast<int>(cls_attention.size());
    if (n == 0) return {};
    const int k = std::clamp(static_cast<int>(std::floor(fraction * n + 1e-9)), 1, n);
    auto order = argsort_desc(cls_attention);
    order.resize(k);
    return order;
}

PruneOutcome fastv_select(const std::vector<double>& scores, const std::vector<double>& cls_attention,
                          const FastVSpec& spec) {
    const int n = static_cast<int>(scores.size());
    const int q = prune_quota(spec.budget, n);
    PruneOutcome out;
    out.scores = scores;
    if (spec.variant == FastVVariant::Origin) {
        out.retained = top_k_indices(scores, q);
    } else {
        require(static_cast<int>(cls_attention.size()) == n, ErrorCode::ShapeMismatch,
                "sink variants need encoder attention for every visual token");
        const auto sinks = sink_set(cls_attention, spec.sink_fraction);
        std::vector<std::uint8_t> is_sink(n, 0);
        for (int s : sinks) is_sink[s] = 1;
        const auto order = argsort_desc(scores);
        std::vector<int> chosen;
        if (spec.variant == FastVVariant::A1ExcludeSinks) {
            for (int j : order) {
                if (static_cast<int>(chosen.size()) == q) break;
                if (!is_sink[j]) chosen.push_back(j);
            }
            // Not enough non-sink tokens: the budget wins over the exclusion.
            for (int s = static_cast<int>(sinks.size()) - 1; static_cast<int>(chosen.size()) < q && s >= 0; --s) {
                chosen.push_back(sinks[s]);
            }
        } else {
            std::vector<std::uint8_t> taken(n, 0);
            for (int s : sinks) {
                if (static_cast<int>(chosen.size()) == q) break;
                chosen.push_back(s);
                taken[s] = 1;
            }
            for (int j : order) {
                if (static_cast<int>(chosen.size()) == q) break;
                if (!taken[j]) chosen.push_back(j);
            }
        }
        std::sort(chosen.begin(), chosen.end());
        out.retained = std::move(chosen);
    }
    out.mask = to_mask(out.retained, n);
    return out;
}

FastVResult fastv_prefill(const Model& model, const TokenSequence& seq, const std::vector<double>& cls_attention,
                          const FastVSpec& spec) {
    require(spec.layer >= 1 && spec.layer < model.cfg.num_layers, ErrorCode::ConfigError,
            "FastV layer K must satisfy 1 <= K < num_layers");
    require(seq.l_t() >= 1, ErrorCode::EmptyTextSpan, "FastV needs text queries");
    FastVResult res;
    PruneHook hook;
    hook.layer = spec.layer;
    hook.select = [&](const AttentionTrace& partial) {
        const auto scores = fastv_score(partial, spec.layer - 1);
        res.outcome = fastv_select(scores, cls_attention, spec);
        std::vector<int> keep = res.outcome.retained;
        for (int i = seq.l_v; i < seq.length(); ++i) keep.push_back(i);
        return keep;
    };
    res.prefill = prefill(model, seq, &hook);
    // Score recomputation for the text queries of layer K-1.
    std::uint64_t extra = 0;
    for (int i = seq.l_v; i < seq.length(); ++i) extra += static_cast<std::uint64_t>(i + 1) * model.cfg.head_dim;
    res.prefill.counters.prefill_surcharge_ops += extra * model.cfg.num_heads;
    return res;
}

KMeansResult kmeans(const Mat& points, int k, int max_iter) {
    const int n = static_cast<int>(points.rows);
    const std::size_t dim = points.cols;
    require(k >= 0 && k <= n, ErrorCode::InvalidArgument, "k-means needs 0 <= k <= number of points");
    KMeansResult res;
    res.centroids = Mat(k, dim);
    res.assignment.assign(n, -1);
    if (k == 0) return res;

    std::vector<int> seeds{0};
    std::vector<double> best(n, std::numeric_limits<double>::infinity());
    while (static_cast<int>(seeds.size()) < k) {
        const double* c = points.row(seeds.back());
        int arg = -1;
        double far = -1.0;
        for (int i = 0; i < n; ++i) {
            best[i] = std::min(best[i], sqdist(points.row(i), c, dim));
            if (best[i] > far) {
                far = best[i];
                arg = i;
            }
        }
        seeds.push_back(arg);
    }
    for (int c = 0; c < k; ++c) std::copy_n(points.row(seeds[c]), dim, res.centroids.row(c));

    for (int it = 0; it < max_iter; ++it) {
        bool changed = false;
        for (int i = 0; i < n; ++i) {
            int arg = 0;
            double bd = std::numeric_limits<double>::infinity();
            for (int c = 0; c < k; ++c) {
                const double dd = sqdist(points.row(i), res.centroids.row(c), dim);
                if (dd < bd) {
                    bd = dd;
                    arg = c;
                }
            }
            if (res.assignment[i] != arg) {
                res.assignment[i] = arg;
                changed = true;
            }
        }
        res.iterations = it + 1;
        if (!changed && it > 0) break;
        // mean as first member plus averaged offsets, exact for identical members
        std::vector<int> first(k, -1), count(k, 0);
        Mat acc(k, dim);
        for (int i = 0; i < n; ++i) {
            const int c = res.assignment[i];
            if (first[c] < 0) first[c] = i;
            ++count[c];
            for (std::size_t j = 0; j < dim; ++j) acc(c, j) += points(i, j) - points(first[c], j);
        }
        for (int c = 0; c < k; ++c) {
            if (count[c] == 0) continue;
            for (std::size_t j = 0; j < dim; ++j) res.centroids(c, j) = points(first[c], j) + acc(c, j) / count[c];
        }
    }
    return res;
}

int visionzip_k(double b, int l_v, double divisor) {
    require(divisor > 0.0, ErrorCode::InvalidArgument, "VisionZip divisor must be positive");
    return std::max(0, static_cast<int>(std::floor(b / divisor * l_v + 1e-9)));
}

PruneOutcome visionzip_prune(const std::vector<double>& cls_attention, const Mat& visual_embeddings, double b,
                             double divisor) {
    const int n = static_cast<int>(cls_attention.size());
    require(static_cast<int>(visual_embeddings.rows) == n, ErrorCode::ShapeMismatch,
            "VisionZip needs one encoder attention value per visual token");
    const int q = prune_quota(b, n);
    PruneOutcome out;
    out.scores = cls_attention;
    out.retained = top_k_indices(cls_attention, q);
    out.mask = to_mask(out.retained, n);
    std::vector<int> discarded;
    for (int i = 0; i < n; ++i) {
        if (!out.mask[i]) discarded.push_back(i);
    }
    const int k = std::min(visionzip_k(b, n, divisor), static_cast<int>(discarded.size()));
    if (k == 0) return out;
    const auto km = kmeans(select_rows(visual_embeddings, discarded), k);
    out.merged_tokens.resize(k);
    for (int c = 0; c < k; ++c) {
        out.merged_tokens[c].embedding.assign(km.centroids.row(c), km.centroids.row(c) + km.centroids.cols);
    }
    for (std::size_t i = 0; i < discarded.size(); ++i) {
        out.merged_tokens[km.assignment[i]].members.push_back(discarded[i]);
    }
    return out;
}

std::vector<double> prumerge_fallback_scores(const AttentionTrace& trace) {
    require(trace.num_layers() >= 1, ErrorCode::InvalidArgument, "empty trace");
    const int H = trace.num_heads();
    std::vector<double> s(trace.l_v, 0.0);
    for (int h = 0; h < H; ++h) {
        const Mat& A = trace.attn[0][h];
        for (int i = 0; i < trace.l; ++i) {
            for (int j = 0; j < trace.l_v; ++j) s[j] += A(i, j);
        }
    }
    for (auto& x : s) x /= static_cast<double>(H) * trace.l;
    return s;
}

double quantile(std::vector<double> v, double p) {
    require(!v.empty(), ErrorCode::InvalidArgument, "quantile of an empty sample");
    std::sort(v.begin(), v.end());
    const double pos = p * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

PruneOutcome prumerge_prune(const std::vector<double>& scores, const Mat& visual_embeddings, double b) {
    const int n = static_cast<int>(scores.size());
    require(static_cast<int>(visual_embeddings.rows) == n, ErrorCode::ShapeMismatch,
            "PruMerge+ needs one score per visual token");
    const int q = prune_quota(b, n);
    const double q1 = quantile(scores, 0.25);
    const double q3 = quantile(scores, 0.75);
    const double fence = q3 + 1.5 * (q3 - q1);

    const auto order = argsort_desc(scores);
    std::vector<int> kept;
    std::vector<int> rest;
    for (int j : order) {
        if (scores[j] > fence) {
            kept.push_back(j);
        } else {
            rest.push_back(j);
        }
    }
    if (static_cast<int>(kept.size()) >= q) {
        kept.resize(q);
    } else {
        const int r = q - static_cast<int>(kept.size());
        const auto m = static_cast<long long>(rest.size());
        for (int i = 0; i < r; ++i) kept.push_back(rest[static_cast<std::size_t>(i * m / r)]);
    }
    std::sort(kept.begin(), kept.end());

    PruneOutcome out;
    out.scores = scores;
    out.retained = kept;
    out.mask = to_mask(kept, n);
    out.merged_replace_retained = true;

    const std::size_t dim = visual_embeddings.cols;
    std::vector<std::vector<int>> assigned(kept.size());
    for (int e = 0; e < n; ++e) {
        if (out.mask[e]) continue;
        int arg = 0;
        double best = -std::numeric_limits<double>::infinity();
        for (std::size_t r = 0; r < kept.size(); ++r) {
            const double c = cosine(visual_embeddings.row(e), visual_embeddings.row(kept[r]), dim);
            if (c > best) {
                best = c;
                arg = static_cast<int>(r);
            }
        }
        assigned[arg].push_back(e);
    }
    out.merged_tokens.resize(kept.size());
    for (std::size_t r = 0; r < kept.size(); ++r) {
        auto& mt = out.merged_tokens[r];
        const int self = kept[r];
        mt.members.push_back(self);
        mt.members.insert(mt.members.end(), assigned[r].begin(), assigned[r].end());
        const double* x = visual_embeddings.row(self);
        if (assigned[r].empty()) {
            mt.embedding.assign(x, x + dim);
            continue;
        }
        double wsum = 0.0;
        for (int j : mt.members) wsum += scores[j];
        const bool equal = !(wsum > 0.0);
        const double denom = equal ? static_cast<double>(mt.members.size()) : wsum;
        mt.embedding.assign(dim, 0.0);
        for (int j : mt.members) {
            const double w = equal ? 1.0 : scores[j];
            const double* y = visual_embeddings.row(j);
            for (std::size_t c = 0; c < dim; ++c) mt.embedding[c] += w * y[c];
        }
        for (auto& v : mt.embedding) v /= denom;
    }
    return out;
}

TokenSequence apply_prune(const TokenSequence& seq, const PruneOutcome& outcome) {
    const std::size_t d = seq.embeddings.cols;
    TokenSequence out;
    std::vector<std::vector<double>> rows;
    for (std::size_t r = 0; r < outcome.retained.size(); ++r) {
        const int i = outcome.retained[r];
        out.tokens.push_back(seq.tokens[i]);
        if (outcome.merged_replace_retained) {
            rows.push_back(outcome.merged_tokens[r].embedding);
        } else {
            rows.emplace_back(seq.embeddings.row(i), seq.embeddings.row(i) + d);
        }
    }
    if (!outcome.merged_replace_retained) {
        for (const auto& mt : outcome.merged_tokens) {
            out.tokens.push_back(kTokMerged);
            rows.push_back(mt.embedding);
        }
    }
    out.l_v = static_cast<int>(rows.size());
    for (int i = seq.l_v; i < seq.length(); ++i) {
        out.tokens.push_back(seq.tokens[i]);
        rows.emplace_back(seq.embeddings.row(i), seq.embeddings.row(i) + d);
    }
    out.embeddings = Mat(rows.size(), d);
    for (std::size_t i = 0; i < rows.size(); ++i) std::copy(rows[i].begin(), rows[i].end(), out.embeddings.row(i));
    out.modality.assign(rows.size(), Modality::Text);
    for (int i = 0; i < out.l_v; ++i) out.modality[i] = Modality::Visual;
    return out;
}

}  // namespace vlcb
