// Copyright (C) 2026 The vlcb Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <vector>

#include "vlcb/common.hpp"

namespace vlcb {

enum class Modality : std::uint8_t { Visual = 0, Text = 1 };

struct ModelConfig {
    int num_layers = 4;
    int num_heads = 4;
    int head_dim = 16;
    int vocab_size = 512;
    std::uint64_t seed = 1;
    int max_seq_len = 16384;
};

void validate(const ModelConfig& cfg);

// Reserved vocabulary. Ids below kNumSpecial are input-only markers and are
// never produced by greedy decoding.
inline constexpr int kTokAskNeedle = 0;
inline constexpr int kTokEndNeedle = 1;
inline constexpr int kTokAskCount = 2;
inline constexpr int kTokAnchor = 3;
inline constexpr int kTokAskCopy = 4;
inline constexpr int kTokVisual = 5;
inline constexpr int kTokMark = 6;
inline constexpr int kTokMerged = 7;
inline constexpr int kNumSpecial = 16;
inline constexpr int kMaxCount = 6;
inline constexpr int kNumberBase = kNumSpecial;
inline constexpr int kContentBase = kNumberBase + kMaxCount;

enum Marker : int {
    kAskN = 0,
    kEndN,
    kNeedle,
    kAskC,
    kMarkC,
    kAnchorC,
    kAskP,
    kCopyMark,
    kCommon,
    kNumMarkers
};

struct LayerWeights {
    Mat wq, wk, wv, wo;  // [d x d], y = W x
    Mat wup;             // [2d x d]
    Mat wdown;           // [d x 2d]
    double scale = 1.0;  // residual gain of this block
};

struct Model {
    ModelConfig cfg;
    int hidden = 0;
    int content_dims = 0;
    int visual_begin = 0;
    int visual_dims = 0;
    bool circuits = false;
    Mat embed;  // [vocab x hidden], also the tied output head
    std::array<std::vector<double>, kNumMarkers> marker;
    std::vector<LayerWeights> layers;

    std::uint64_t checksum() const;
};

Model build_model(const ModelConfig& cfg);

struct TokenSequence {
    std::vector<int> tokens;
    Mat embeddings;  // [length x hidden]
    std::vector<Modality> modality;
    int l_v = 0;

    int length() const { return static_cast<int>(tokens.size()); }
    int l_t() const { return length() - l_v; }
};

void validate(const TokenSequence& seq, int hidden);

struct AttentionTrace {
    int l_v = 0;
    int l = 0;
    // attn[layer][head] is [n x n] over the rows alive at that layer.
    std::vector<std::vector<Mat>> attn;
    // Original token index of each row alive at the layer.
    std::vector<std::vector<int>> token_index;
    std::vector<double> cls_attention;

    int num_layers() const { return static_cast<int>(attn.size()); }
    int num_heads() const { return attn.empty() ? 0 : static_cast<int>(attn[0].size()); }
};

struct HeadCache {
    std::vector<int> index;  // original token indices, strictly increasing
    int extra = 0;           // synthesized rows appended after the indexed ones
    Mat k;                   // [(index.size() + extra) x head_dim]
    Mat v;

    std::size_t rows() const { return index.size() + static_cast<std::size_t>(extra); }
};

struct KVCacheState {
    int l_v = 0;
    int l = 0;
    int head_dim = 0;
    std::vector<Modality> modality;            // per original token index
    std::vector<std::vector<HeadCache>> layers;  // [layer][head]
    std::vector<int> capacity;                 // per-layer quota after compression

    std::uint64_t entries() const;
};

struct Counters {
    std::uint64_t prefill_attention_ops = 0;
    std::uint64_t prefill_surcharge_ops = 0;
    std::uint64_t decode_attention_ops = 0;
    std::uint64_t decode_self_ops = 0;

    std::uint64_t ttft() const { return prefill_attention_ops + prefill_surcharge_ops; }
    std::uint64_t decode() const { return decode_attention_ops + decode_self_ops; }
    std::uint64_t total() const { return ttft() + decode(); }
};

struct GenerationResult {
    std::vector<int> tokens;
    Counters counters;
    std::uint64_t retained_cache_entries = 0;
};

struct PrefillResult {
    AttentionTrace trace;
    KVCacheState cache;
    std::vector<double> logits;  // last position
    Counters counters;
};

/// Optional in-prefill pruning: before computing layer `layer`, `select`
/// receives the trace of the layers already run and returns the row positions
/// (into the current rows) that stay alive.
struct PruneHook {
    int layer = -1;
    std::function<std::vector<int>(const AttentionTrace&)> select;
};

/// Inputs seen by each projection during a forward pass (calibration capture).
enum class ProjInput { Qkv, O, Up, Down };

struct ActivationSink {
    virtual ~ActivationSink() = default;
    virtual void record(int layer, ProjInput input, const double* x, int n) = 0;
};

PrefillResult prefill(const Model& model, const TokenSequence& seq, const PruneHook* hook = nullptr,
                      ActivationSink* sink = nullptr);

/// Greedy decode of `steps` tokens. The first decode input is `first_input`
/// (the re-fed last prompt token under the task protocol); later inputs are
/// embeddings of the generated tokens. The cache is not compressed further.
GenerationResult decode(const Model& model, const KVCacheState& cache, const std::vector<double>& first_input,
                        int steps);

/// Greedy token from logits with reserved ids masked out.
int greedy_token(const std::vector<double>& logits);

std::vector<double> output_logits(const Model& model, const std::vector<double>& hidden_state);

/// Row-wise RMS normalization used by every block.
void rms_norm(const double* x, double* out, int n);
double gelu(double x);

enum class TaskKind { NeedleRetrieval, Copy, Count };

const char* task_kind_name(TaskKind kind);
TaskKind parse_task_kind(const std::string& name);

struct TaskParams {
    int l_v = 256;
    int l_t = -1;    // -1: kind default (2 for needle, 8 otherwise)
    int marks = -1;  // COUNT only; -1: seeded draw in [1, kMaxCount]
};

struct TaskInstance {
    TaskKind kind = TaskKind::NeedleRetrieval;
    TokenSequence seq;
    std::vector<double> cls_attention;  // synthetic visual-encoder attention [l_v]
    int expected_token = -1;            // token the model should emit
    int expected_value = -1;            // needle id, copied id, or count
    int needle_position = -1;
    std::vector<int> marked;            // COUNT mark positions / COPY span position

    std::vector<double> probe() const;  // the last prompt token embedding
};

TaskInstance make_task(const Model& model, TaskKind kind, const TaskParams& params, std::uint64_t seed);

/// MACs of causal attention (QK plus AV) for `rows` queries over a prefix.
std::uint64_t causal_attention_macs(std::uint64_t n, std::uint64_t head_dim, std::uint64_t heads);

}  // namespace vlcb
