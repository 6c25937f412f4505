// Copyright (C) 2026 The vlcb Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "vlcb/simcore.hpp"

namespace vlcb {

enum class Functional { Acc, Norm, Sw, Pv };

struct ScoringFunctional {
    Functional kind = Functional::Acc;
    int window = 8;  // SW only
};

/// Per-key importance of a causal attention matrix A [l x l]. Text queries
/// are rows l_v..l-1.
std::vector<double> score(const ScoringFunctional& f, const Mat& A, int l_v);

enum class AllocationMode { Uniform, Adaptive, Hybrid, Pyramid };

struct BudgetAllocation {
    double fraction = 1.0;
    AllocationMode mode = AllocationMode::Uniform;
    double alpha = 0.0;
    int uniform_quota = 0;     // max(1, floor(b * l))
    std::vector<int> quotas;   // per layer
    std::vector<int> recent;   // per layer, ceil(0.1 * quota)

    long long total() const;
};

/// max(1, floor(b * l)) capped at l.
int kv_quota(double b, int l);
int recent_window(int quota);

/// Integer apportionment of `total` proportional to `weights` within
/// per-entry bounds [lo, hi]; largest remainder, ties to the lower index.
std::vector<int> apportion(long long total, const std::vector<double>& weights, const std::vector<int>& lo,
                           const std::vector<int>& hi);

/// Mean (over heads and text queries) of the smallest fraction of visible keys
/// that carries `mass` of a query's attention.
double layer_density(const AttentionTrace& trace, int layer, double mass = 0.99);

BudgetAllocation allocate(AllocationMode mode, double b, const AttentionTrace& trace, double alpha = 0.0);

enum class KvMethod { StreamingLLM, H2O, SnapKV, PyramidKV, LookM, VLCache };
enum class MergeStrategy { None, MergeIntoRetained, ConcatCentroids, ModalitySpecific };
enum class TextPrior { None, Tie, Strict };
enum class MergeWeighting { Equal, Score };

const char* kv_method_name(KvMethod m);
KvMethod parse_kv_method(const std::string& s);
const char* allocation_name(AllocationMode m);
AllocationMode parse_allocation(const std::string& s);
const char* merge_name(MergeStrategy m);
MergeStrategy parse_merge(const std::string& s);
const char* text_prior_name(TextPrior p);
TextPrior parse_text_prior(const std::string& s);
const char* weighting_name(MergeWeighting w);
MergeWeighting parse_weighting(const std::string& s);

struct KvPolicySpec {
    KvMethod method = KvMethod::SnapKV;
    double budget = 1.0;
    std::optional<AllocationMode> allocation;
    double alpha = 0.0;
    bool head_adaptive = false;
    std::optional<MergeStrategy> merge;
    int window = 8;
    std::optional<TextPrior> text_prior;
    MergeWeighting weighting = MergeWeighting::Equal;
    double concat_divisor = 6.4;
};

/// Fully defaulted and validated policy.
struct KvPolicy {
    KvMethod method = KvMethod::SnapKV;
    double budget = 1.0;
    AllocationMode allocation = AllocationMode::Uniform;
    double alpha = 0.0;
    bool head_adaptive = false;
    MergeStrategy merge = MergeStrategy::None;
    std::optional<ScoringFunctional> functional;  // none for StreamingLLM
    TextPrior text_prior = TextPrior::None;
    MergeWeighting weighting = MergeWeighting::Equal;
    double concat_divisor = 6.4;
};

KvPolicy resolve(const KvPolicySpec& spec);

/// Per-head retained sets for one layer. Scores are indexed by cache row.
/// The last `recent` rows are always retained first.
std::vector<std::vector<int>> select(const std::vector<std::vector<double>>& head_scores, int quota, int recent,
                                     bool head_adaptive, const std::vector<Modality>& modality, TextPrior prior);

struct RetentionMask {
    BudgetAllocation allocation;
    std::vector<std::vector<std::vector<int>>> retained;      // [layer][head], sorted
    std::vector<std::vector<std::vector<double>>> scores;     // [layer][head] selection scores
};

/// Selection only (no cache needed): used by trace replay.
RetentionMask plan(const KvPolicy& policy, const AttentionTrace& trace);

struct MergeAssignment {
    int layer = 0;
    int head = 0;
    int evicted = 0;
    int target = 0;
};

struct CompressResult {
    KVCacheState cache;
    RetentionMask mask;
    std::vector<MergeAssignment> assignments;
    bool dropped_rows = false;       // modality-specific merge found no same-modality target
    std::uint64_t surcharge_ops = 0;  // score recomputation MACs
};

/// Budget-independent attention-score recomputation cost of a policy.
std::uint64_t scoring_surcharge(const KvPolicy& policy, const AttentionTrace& trace, int head_dim);

/// Folds evicted rows of one head into the retained rows (or appends
/// centroids for CONCAT). Scores weight the average when requested.
HeadCache merge_head(const HeadCache& full, const std::vector<int>& retained, MergeStrategy strategy,
                     MergeWeighting weighting, const std::vector<double>& scores, const std::vector<Modality>& modality,
                     int concat_k, int layer, int head, std::vector<MergeAssignment>* assignments, bool* dropped);

CompressResult compress(const KvPolicy& policy, const AttentionTrace& trace, const KVCacheState& cache);

}  // namespace vlcb
