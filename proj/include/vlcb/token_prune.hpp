// Copyright (C) 2026 The vlcb Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vlcb/simcore.hpp"

namespace vlcb {

/// max(1, floor(b * l_v)), never above l_v. b must lie in (0, 1].
int prune_quota(double b, int l_v);

struct MergedToken {
    std::vector<double> embedding;
    std::vector<int> members;  // visual indices folded into this token
};

struct PruneOutcome {
    std::vector<int> retained;          // sorted visual indices
    std::vector<std::uint8_t> mask;     // length l_v
    std::vector<double> scores;         // length l_v
    // PruMerge+: one entry per retained token (its merged feature).
    // VisionZip: the recycled centroids appended after the retained tokens.
    std::vector<MergedToken> merged_tokens;
    bool merged_replace_retained = false;
};

/// FastV importance: text-query attention mass on each visual key at `layer`,
/// averaged over heads.
std::vector<double> fastv_score(const AttentionTrace& trace, int layer);

/// Top-floor(b*l_v) scores kept (floor of 1), ties to the lower index.
std::vector<std::uint8_t> threshold_mask(const std::vector<double>& scores, double b);

enum class FastVVariant { Origin, A1ExcludeSinks, A2ForceSinks };

const char* fastv_variant_name(FastVVariant v);
FastVVariant parse_fastv_variant(const std::string& s);

struct FastVSpec {
    double budget = 1.0;
    int layer = 2;
    FastVVariant variant = FastVVariant::Origin;
    double sink_fraction = 0.10;
};

/// Top max(1, floor(f * l_v)) visual tokens by encoder attention, ordered by
/// descending attention.
std::vector<int> sink_set(const std::vector<double>& cls_attention, double fraction);

PruneOutcome fastv_select(const std::vector<double>& scores, const std::vector<double>& cls_attention,
                          const FastVSpec& spec);

struct FastVResult {
    PrefillResult prefill;
    PruneOutcome outcome;
};

/// Prefill with FastV pruning applied before layer `spec.layer`.
FastVResult fastv_prefill(const Model& model, const TokenSequence& seq, const std::vector<double>& cls_attention,
                          const FastVSpec& spec);

struct KMeansResult {
    Mat centroids;
    std::vector<int> assignment;
    int iterations = 0;
};

/// Deterministic k-means: farthest-point initialization starting at row 0,
/// lowest index on ties, at most `max_iter` Lloyd iterations.
KMeansResult kmeans(const Mat& points, int k, int max_iter = 20);

int visionzip_k(double b, int l_v, double divisor = 6.4);

PruneOutcome visionzip_prune(const std::vector<double>& cls_attention, const Mat& visual_embeddings, double b,
                             double divisor = 6.4);

/// Row-wise attention averages used when no encoder attention exists.
std::vector<double> prumerge_fallback_scores(const AttentionTrace& trace);

/// Linear-interpolation quantile of a sample (0 <= p <= 1).
double quantile(std::vector<double> v, double p);

PruneOutcome prumerge_prune(const std::vector<double>& scores, const Mat& visual_embeddings, double b);

/// Builds the pruned prompt: retained visual tokens (merged features where
/// applicable), then recycled tokens, then the untouched text span.
TokenSequence apply_prune(const TokenSequence& seq, const PruneOutcome& outcome);

}  // namespace vlcb
