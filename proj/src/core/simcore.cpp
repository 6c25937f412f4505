// Copyright (C) 2026 The vlcb Authors
// SPDX-License-Identifier: Apache-2.0

#include "vlcb/simcore.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <random>
#include <string>

namespace vlcb {

namespace {

constexpr double kRmsEps = 1e-6;
constexpr double kSigmaVo = 0.25;
constexpr double kSigmaQkRetrieval = 0.3;
constexpr double kMlpGain = 0.3;
constexpr double kPlantAmp = 4.0;
constexpr double kCommonGain = 0.3;
constexpr double kAnchorNoise = 0.8;

using Rng = std::mt19937_64;

std::vector<std::vector<double>> orthonormal_set(int dim, int count, Rng& rng) {
    std::normal_distribution<double> nd(0.0, 1.0);
    std::vector<std::vector<double>> out;
    while (static_cast<int>(out.size()) < count) {
        std::vector<double> v(dim);
        for (auto& x : v) x = nd(rng);
        if (static_cast<int>(out.size()) < dim) {
            for (const auto& u : out) {
                double dot = 0.0;
                for (int i = 0; i < dim; ++i) dot += v[i] * u[i];
                for (int i = 0; i < dim; ++i) v[i] -= dot * u[i];
            }
        }
        double norm = 0.0;
        for (double x : v) norm += x * x;
        norm = std::sqrt(norm);
        if (norm < 1e-9) continue;
        for (auto& x : v) x /= norm;
        out.push_back(std::move(v));
    }
    return out;
}

Mat gaussian(std::size_t r, std::size_t c, double sigma, Rng& rng) {
    std::normal_distribution<double> nd(0.0, sigma);
    Mat m(r, c);
    for (auto& x : m.a) x = nd(rng);
    return m;
}

// Fixed 8-lane partial sums: a deterministic order that also vectorizes.
double dot(const double* a, const double* b, std::size_t n) {
    double s[8] = {0, 0, 0, 0, 0, 0, 0, 0};
    std::size_t j = 0;
    for (; j + 8 <= n; j += 8) {
        for (int k = 0; k < 8; ++k) s[k] += a[j + k] * b[j + k];
    }
    for (int k = 0; j < n; ++j, ++k) s[k] += a[j] * b[j];
    return ((s[0] + s[4]) + (s[1] + s[5])) + ((s[2] + s[6]) + (s[3] + s[7]));
}

void matvec(const Mat& w, const double* x, double* y) {
    for (std::size_t i = 0; i < w.rows; ++i) y[i] = dot(w.row(i), x, w.cols);
}

struct Segment {
    const Mat* k;
    const Mat* v;
    std::size_t n;
};

// Softmax attention of one query over concatenated key segments. Writes the
// probabilities (in segment order) and the weighted value sum.
void attend(const double* q, const Segment* segs, int nseg, int hd, std::vector<double>& p, double* out) {
    const double inv = 1.0 / std::sqrt(static_cast<double>(hd));
    std::size_t total = 0;
    for (int s = 0; s < nseg; ++s) total += segs[s].n;
    p.assign(total, 0.0);
    double mx = -std::numeric_limits<double>::infinity();
    std::size_t t = 0;
    for (int s = 0; s < nseg; ++s) {
        for (std::size_t j = 0; j < segs[s].n; ++j, ++t) {
            p[t] = dot(q, segs[s].k->row(j), static_cast<std::size_t>(hd)) * inv;
            mx = std::max(mx, p[t]);
        }
    }
    double sum = 0.0;
    for (std::size_t j = 0; j < total; ++j) {
        p[j] = std::exp(p[j] - mx);
        sum += p[j];
    }
    for (std::size_t j = 0; j < total; ++j) p[j] /= sum;
    std::fill(out, out + hd, 0.0);
    t = 0;
    for (int s = 0; s < nseg; ++s) {
        for (std::size_t j = 0; j < segs[s].n; ++j, ++t) {
            const double* vr = segs[s].v->row(j);
            for (int c = 0; c < hd; ++c) out[c] += p[t] * vr[c];
        }
    }
}

// Attention output projection plus MLP for a single row (residual in place).
void finish_block(const LayerWeights& w, int d, double* x, const double* attn_out, ActivationSink* sink = nullptr,
                  int layer = 0) {
    std::vector<double> tmp(d), h(d), up(2 * d), dn(d);
    if (sink) sink->record(layer, ProjInput::O, attn_out, d);
    matvec(w.wo, attn_out, tmp.data());
    for (int i = 0; i < d; ++i) x[i] += w.scale * tmp[i];
    rms_norm(x, h.data(), d);
    if (sink) sink->record(layer, ProjInput::Up, h.data(), d);
    matvec(w.wup, h.data(), up.data());
    for (auto& u : up) u = gelu(u);
    if (sink) sink->record(layer, ProjInput::Down, up.data(), 2 * d);
    matvec(w.wdown, up.data(), dn.data());
    for (int i = 0; i < d; ++i) x[i] += w.scale * dn[i];
}

}  // namespace

void rms_norm(const double* x, double* out, int n) {
    double ms = 0.0;
    for (int i = 0; i < n; ++i) ms += x[i] * x[i];
    const double r = 1.0 / std::sqrt(ms / n + kRmsEps);
    for (int i = 0; i < n; ++i) out[i] = x[i] * r;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::tanh(0.7978845608028654 * (x + 0.044715 * x * x * x))); }

void validate(const ModelConfig& cfg) {
    require(cfg.num_layers >= 2, ErrorCode::InvalidConfig, "num_layers must be >= 2");
    require(cfg.num_heads >= 2, ErrorCode::InvalidConfig, "num_heads must be >= 2");
    require(cfg.head_dim >= 1, ErrorCode::InvalidConfig, "head_dim must be >= 1");
    require(cfg.vocab_size >= kContentBase + 2, ErrorCode::InvalidConfig,
            "vocab_size must be >= " + std::to_string(kContentBase + 2));
    require(cfg.max_seq_len >= 1, ErrorCode::InvalidConfig, "max_seq_len must be >= 1");
}

std::uint64_t Model::checksum() const {
    std::uint64_t h = 1469598103934665603ULL;
    auto mix = [&](const Mat& m) {
        for (double x : m.a) {
            std::uint64_t bits;
            static_assert(sizeof(bits) == sizeof(x));
            std::memcpy(&bits, &x, sizeof(bits));
            h ^= bits;
            h *= 1099511628211ULL;
        }
    };
    mix(embed);
    for (const auto& lw : layers) {
        mix(lw.wq);
        mix(lw.wk);
        mix(lw.wv);
        mix(lw.wo);
        mix(lw.wup);
        mix(lw.wdown);
    }
    return h;
}

Model build_model(const ModelConfig& cfg) {
    validate(cfg);
    Model m;
    m.cfg = cfg;
    const int d = cfg.num_heads * cfg.head_dim;
    const int hd = cfg.head_dim;
    m.hidden = d;
    m.content_dims = d / 2;
    m.visual_begin = d / 2;
    m.visual_dims = d / 4;
    const int ctrl_begin = d / 2 + d / 4;
    const int ctrl_dims = d - ctrl_begin;
    m.circuits = ctrl_dims >= kNumMarkers && hd >= 5 && m.content_dims >= 3 && m.visual_dims >= 1;
    const double sd = std::sqrt(static_cast<double>(d));

    Rng rng(cfg.seed);
    std::normal_distribution<double> nd(0.0, 1.0);

    // marker directions
    if (m.circuits) {
        auto basis = orthonormal_set(ctrl_dims, kNumMarkers, rng);
        for (int i = 0; i < kNumMarkers; ++i) {
            m.marker[i].assign(d, 0.0);
            for (int j = 0; j < ctrl_dims; ++j) m.marker[i][ctrl_begin + j] = basis[i][j] * sd;
        }
    } else {
        auto basis = orthonormal_set(d, kNumMarkers, rng);
        for (int i = 0; i < kNumMarkers; ++i) {
            m.marker[i].assign(d, 0.0);
            for (int j = 0; j < d; ++j) m.marker[i][j] = basis[i][j] * sd;
        }
    }

    // embeddings: content rows live in content dims [2, content_dims); dims 0
    // and 1 form the count plane used by the number tokens.
    const int cb = m.circuits ? 2 : 0;
    const int ce = m.circuits ? m.content_dims : d;
    m.embed = Mat(cfg.vocab_size, d);
    for (int t = kContentBase; t < cfg.vocab_size; ++t) {
        double norm = 0.0;
        for (int j = cb; j < ce; ++j) {
            m.embed(t, j) = nd(rng);
            norm += m.embed(t, j) * m.embed(t, j);
        }
        norm = std::sqrt(norm);
        for (int j = cb; j < ce; ++j) m.embed(t, j) *= sd / norm;
    }
    for (int c = 1; c <= kMaxCount; ++c) {
        const double phi = std::atan2(1.0, static_cast<double>(c));
        if (m.circuits) {
            m.embed(kNumberBase + c - 1, 0) = std::cos(phi) * sd;
            m.embed(kNumberBase + c - 1, 1) = std::sin(phi) * sd;
        } else {
            for (int j = 0; j < d; ++j) m.embed(kNumberBase + c - 1, j) = nd(rng);
        }
    }
    const std::pair<int, int> special_rows[] = {
        {kTokAskNeedle, kAskN}, {kTokEndNeedle, kEndN}, {kTokAskCount, kAskC}, {kTokAnchor, kAnchorC},
        {kTokAskCopy, kAskP},   {kTokMark, kMarkC}};
    for (auto [tok, mk] : special_rows) {
        for (int j = 0; j < d; ++j) m.embed(tok, j) = m.marker[mk][j];
    }

    const int ret_start = cfg.num_layers / 2;
    const int last = cfg.num_layers - 1;
    struct Pair {
        Marker q, k;
    };
    const std::vector<Pair> retrieval_pairs = {
        {kAskN, kNeedle}, {kEndN, kNeedle}, {kAskC, kMarkC}, {kAskC, kAnchorC}, {kAskP, kCopyMark}};
    const std::vector<Pair> readout_pairs = {
        {kEndN, kAskN}, {kAskC, kMarkC}, {kAskC, kAnchorC}, {kAskP, kCopyMark}};
    const double plant = kPlantAmp / sd * std::pow(static_cast<double>(hd), 0.25);

    for (int l = 0; l < cfg.num_layers; ++l) {
        LayerWeights w;
        const bool retrieval = m.circuits && l >= ret_start;
        const double sqk = retrieval ? kSigmaQkRetrieval : 1.0;
        w.wq = gaussian(d, d, sqk / sd, rng);
        w.wk = gaussian(d, d, sqk / sd, rng);
        w.wv = gaussian(d, d, kSigmaVo / sd, rng);
        w.wo = gaussian(d, d, kSigmaVo / sd, rng);
        w.wup = gaussian(2 * d, d, 1.0 / sd, rng);
        w.wdown = gaussian(d, 2 * d, kMlpGain / std::sqrt(2.0 * d), rng);
        if (retrieval) {
            for (int i = 0; i < d; ++i) {
                w.wv(i, i) += 1.0;
                w.wo(i, i) += 1.0;
            }
            const auto& pairs = (l == last) ? readout_pairs : retrieval_pairs;
            for (int h = 0; h < cfg.num_heads; ++h) {
                auto u = orthonormal_set(hd, hd, rng);
                std::vector<int> key_slot(kNumMarkers, -1);
                int next = 0;
                for (const auto& pr : pairs) {
                    if (key_slot[pr.k] < 0) {
                        key_slot[pr.k] = next++;
                        const auto& uk = u[key_slot[pr.k]];
                        for (int r = 0; r < hd; ++r) {
                            for (int j = 0; j < d; ++j) w.wk(h * hd + r, j) += uk[r] * m.marker[pr.k][j] / sd * plant;
                        }
                    }
                    const auto& uq = u[key_slot[pr.k]];
                    for (int r = 0; r < hd; ++r) {
                        for (int j = 0; j < d; ++j) w.wq(h * hd + r, j) += uq[r] * m.marker[pr.q][j] / sd * plant;
                    }
                }
            }
        }
        m.layers.push_back(std::move(w));
    }
    return m;
}

void validate(const TokenSequence& seq, int hidden) {
    const int l = seq.length();
    require(l >= 1, ErrorCode::InvalidArgument, "empty sequence");
    require(seq.embeddings.rows == static_cast<std::size_t>(l) && seq.embeddings.cols == static_cast<std::size_t>(hidden),
            ErrorCode::ShapeMismatch, "embedding matrix shape does not match sequence/model");
    require(seq.modality.size() == static_cast<std::size_t>(l), ErrorCode::ShapeMismatch, "modality tags length");
    require(seq.l_v >= 0 && seq.l_v < l, ErrorCode::InvalidArgument, "need l_v >= 0 and l_t >= 1");
    for (int i = 0; i < l; ++i) {
        const Modality want = i < seq.l_v ? Modality::Visual : Modality::Text;
        require(seq.modality[i] == want, ErrorCode::InvalidArgument, "visual tokens must precede text tokens");
    }
}

std::uint64_t KVCacheState::entries() const {
    std::uint64_t n = 0;
    for (const auto& layer : layers) {
        for (const auto& hc : layer) n += hc.rows();
    }
    return n;
}

std::uint64_t causal_attention_macs(std::uint64_t n, std::uint64_t head_dim, std::uint64_t heads) {
    // sum_{i=1..n} i * head_dim for QK and again for AV
    return heads * n * (n + 1) * head_dim;
}

PrefillResult prefill(const Model& model, const TokenSequence& seq, const PruneHook* hook, ActivationSink* sink) {
    const int d = model.hidden;
    const int H = model.cfg.num_heads;
    const int hd = model.cfg.head_dim;
    const int L = model.cfg.num_layers;
    validate(seq, d);
    require(seq.length() <= model.cfg.max_seq_len, ErrorCode::SequenceTooLong,
            "sequence length " + std::to_string(seq.length()) + " exceeds max_seq_len " +
                std::to_string(model.cfg.max_seq_len));

    PrefillResult res;
    res.trace.l_v = seq.l_v;
    res.trace.l = seq.length();
    res.cache.l_v = seq.l_v;
    res.cache.l = seq.length();
    res.cache.head_dim = hd;
    res.cache.modality = seq.modality;

    Mat x = seq.embeddings;
    std::vector<int> idx(seq.length());
    for (int i = 0; i < seq.length(); ++i) idx[i] = i;

    std::vector<double> xn(d), q(d), k(d), v(d), p;
    for (int l = 0; l < L; ++l) {
        if (hook != nullptr && hook->select && l == hook->layer) {
            auto keep = hook->select(res.trace);
            require(!keep.empty(), ErrorCode::InvalidArgument, "prune hook removed every token");
            x = select_rows(x, keep);
            std::vector<int> nidx;
            nidx.reserve(keep.size());
            for (int r : keep) nidx.push_back(idx[r]);
            idx = std::move(nidx);
        }
        const auto& w = model.layers[l];
        const std::size_t n = x.rows;
        std::vector<Mat> qh(H, Mat(n, hd)), kh(H, Mat(n, hd)), vh(H, Mat(n, hd));
        for (std::size_t i = 0; i < n; ++i) {
            rms_norm(x.row(i), xn.data(), d);
            if (sink) sink->record(l, ProjInput::Qkv, xn.data(), d);
            matvec(w.wq, xn.data(), q.data());
            matvec(w.wk, xn.data(), k.data());
            matvec(w.wv, xn.data(), v.data());
            for (int h = 0; h < H; ++h) {
                std::copy_n(q.data() + h * hd, hd, qh[h].row(i));
                std::copy_n(k.data() + h * hd, hd, kh[h].row(i));
                std::copy_n(v.data() + h * hd, hd, vh[h].row(i));
            }
        }
        std::vector<Mat> attn(H, Mat(n, n));
        Mat out(n, d);
        for (int h = 0; h < H; ++h) {
            for (std::size_t i = 0; i < n; ++i) {
                Segment seg{&kh[h], &vh[h], i + 1};
                attend(qh[h].row(i), &seg, 1, hd, p, out.row(i) + h * hd);
                std::copy(p.begin(), p.end(), attn[h].row(i));
            }
        }
        for (std::size_t i = 0; i < n; ++i) finish_block(w, d, x.row(i), out.row(i), sink, l);

        res.counters.prefill_attention_ops += causal_attention_macs(n, hd, H);
        std::vector<HeadCache> layer_cache(H);
        for (int h = 0; h < H; ++h) {
            layer_cache[h].index = idx;
            layer_cache[h].k = std::move(kh[h]);
            layer_cache[h].v = std::move(vh[h]);
        }
        res.cache.layers.push_back(std::move(layer_cache));
        res.cache.capacity.push_back(static_cast<int>(n));
        res.trace.attn.push_back(std::move(attn));
        res.trace.token_index.push_back(idx);
    }
    std::vector<double> last(x.row(x.rows - 1), x.row(x.rows - 1) + d);
    res.logits = output_logits(model, last);
    return res;
}

std::vector<double> output_logits(const Model& model, const std::vector<double>& hidden_state) {
    const int d = model.hidden;
    std::vector<double> h(d);
    rms_norm(hidden_state.data(), h.data(), d);
    std::vector<double> logits(model.cfg.vocab_size);
    matvec(model.embed, h.data(), logits.data());
    return logits;
}

int greedy_token(const std::vector<double>& logits) {
    int best = -1;
    double bv = -std::numeric_limits<double>::infinity();
    for (int t = kNumSpecial; t < static_cast<int>(logits.size()); ++t) {
        if (best < 0 || logits[t] > bv) {
            best = t;
            bv = logits[t];
        }
    }
    return best;
}

GenerationResult decode(const Model& model, const KVCacheState& cache, const std::vector<double>& first_input,
                        int steps) {
    const int d = model.hidden;
    const int H = model.cfg.num_heads;
    const int hd = model.cfg.head_dim;
    const int L = model.cfg.num_layers;
    require(steps >= 0, ErrorCode::InvalidArgument, "steps must be >= 0");
    require(static_cast<int>(cache.layers.size()) == L, ErrorCode::ShapeMismatch, "cache layer count != model layers");
    require(cache.head_dim == hd, ErrorCode::ShapeMismatch, "cache head_dim != model head_dim");
    for (const auto& layer : cache.layers) {
        require(static_cast<int>(layer.size()) == H, ErrorCode::ShapeMismatch, "cache head count != model heads");
    }
    require(static_cast<int>(first_input.size()) == d, ErrorCode::ShapeMismatch, "decode input width != hidden");

    GenerationResult res;
    res.retained_cache_entries = cache.entries();
    if (steps == 0) return res;

    std::vector<std::vector<Mat>> gk(L, std::vector<Mat>(H, Mat(0, hd)));
    std::vector<std::vector<Mat>> gv(L, std::vector<Mat>(H, Mat(0, hd)));
    std::vector<double> x = first_input, xn(d), q(d), k(d), v(d), out(d), p;
    for (int s = 0; s < steps; ++s) {
        for (int l = 0; l < L; ++l) {
            const auto& w = model.layers[l];
            rms_norm(x.data(), xn.data(), d);
            matvec(w.wq, xn.data(), q.data());
            matvec(w.wk, xn.data(), k.data());
            matvec(w.wv, xn.data(), v.data());
            for (int h = 0; h < H; ++h) {
                Mat& K = gk[l][h];
                Mat& V = gv[l][h];
                K.a.insert(K.a.end(), k.begin() + h * hd, k.begin() + (h + 1) * hd);
                V.a.insert(V.a.end(), v.begin() + h * hd, v.begin() + (h + 1) * hd);
                ++K.rows;
                ++V.rows;
                const HeadCache& hc = cache.layers[l][h];
                Segment segs[2] = {{&hc.k, &hc.v, hc.rows()}, {&K, &V, K.rows}};
                attend(q.data() + h * hd, segs, 2, hd, p, out.data() + h * hd);
                res.counters.decode_attention_ops += 2ULL * hc.rows() * hd;
                res.counters.decode_self_ops += 2ULL * K.rows * hd;
            }
            finish_block(w, d, x.data(), out.data());
        }
        const int tok = greedy_token(output_logits(model, x));
        res.tokens.push_back(tok);
        x.assign(model.embed.row(tok), model.embed.row(tok) + d);
    }
    return res;
}

const char* task_kind_name(TaskKind kind) {
    switch (kind) {
        case TaskKind::NeedleRetrieval: return "NEEDLE_RETRIEVAL";
        case TaskKind::Copy: return "COPY";
        case TaskKind::Count: return "COUNT";
    }
    return "?";
}

TaskKind parse_task_kind(const std::string& name) {
    if (name == "NEEDLE_RETRIEVAL" || name == "NEEDLE") return TaskKind::NeedleRetrieval;
    if (name == "COPY") return TaskKind::Copy;
    if (name == "COUNT") return TaskKind::Count;
    fail(ErrorCode::UnknownTaskKind, "unknown task kind '" + name + "'");
}

std::vector<double> TaskInstance::probe() const {
    const auto r = seq.embeddings.row(seq.embeddings.rows - 1);
    return std::vector<double>(r, r + seq.embeddings.cols);
}

TaskInstance make_task(const Model& model, TaskKind kind, const TaskParams& params, std::uint64_t seed) {
    const int d = model.hidden;
    const double sd = std::sqrt(static_cast<double>(d));
    const int l_v = params.l_v;
    const int l_t = params.l_t >= 0 ? params.l_t : (kind == TaskKind::NeedleRetrieval ? 2 : 8);
    require(l_v >= 0, ErrorCode::InvalidArgument, "l_v must be >= 0");
    require(l_t >= 2, ErrorCode::InvalidArgument, "task prompts need l_t >= 2");
    if (kind != TaskKind::Copy) {
        require(l_v >= 1, ErrorCode::InvalidArgument, "needle/count tasks need l_v >= 1");
    }

    std::seed_seq ss{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                     static_cast<std::uint32_t>(kind) + 0x51u};
    Rng rng(ss);
    std::normal_distribution<double> nd(0.0, 1.0);
    std::uniform_int_distribution<int> content(kContentBase, model.cfg.vocab_size - 1);

    TaskInstance t;
    t.kind = kind;
    const int l = l_v + l_t;
    t.seq.l_v = l_v;
    t.seq.tokens.assign(l, kTokVisual);
    t.seq.modality.assign(l, Modality::Visual);
    for (int i = l_v; i < l; ++i) t.seq.modality[i] = Modality::Text;
    t.seq.embeddings = Mat(l, d);

    auto visual_noise = [&](double* row, double gain) {
        double norm = 0.0;
        std::vector<double> z(model.visual_dims);
        for (auto& x : z) {
            x = nd(rng);
            norm += x * x;
        }
        norm = std::sqrt(norm);
        for (int j = 0; j < model.visual_dims; ++j) row[model.visual_begin + j] += gain * z[j] * sd / norm;
    };
    auto add = [&](double* row, const std::vector<double>& v, double g = 1.0) {
        for (int j = 0; j < d; ++j) row[j] += g * v[j];
    };
    auto set_token = [&](int i, int tok) {
        t.seq.tokens[i] = tok;
        add(t.seq.embeddings.row(i), std::vector<double>(model.embed.row(tok), model.embed.row(tok) + d));
    };

    for (int i = 0; i < l_v; ++i) visual_noise(t.seq.embeddings.row(i), 1.0);

    std::vector<double> cls_logit(l_v);
    for (auto& c : cls_logit) c = nd(rng);

    if (kind == TaskKind::NeedleRetrieval) {
        const int pos = std::uniform_int_distribution<int>(0, l_v - 1)(rng);
        const int val = content(rng);
        double* row = t.seq.embeddings.row(pos);
        add(row, model.marker[kNeedle]);
        add(row, std::vector<double>(model.embed.row(val), model.embed.row(val) + d));
        t.seq.tokens[pos] = val;
        for (int i = l_v; i < l - 2; ++i) set_token(i, content(rng));
        set_token(l - 2, kTokAskNeedle);
        set_token(l - 1, kTokEndNeedle);
        t.expected_token = val;
        t.expected_value = val;
        t.needle_position = pos;
        const double mx = *std::max_element(cls_logit.begin(), cls_logit.end());
        cls_logit[pos] = mx + 2.0;
    } else if (kind == TaskKind::Count) {
        int c = params.marks;
        if (c < 0) c = std::uniform_int_distribution<int>(1, std::min(kMaxCount, l_v))(rng);
        require(c >= 1 && c <= kMaxCount && c <= l_v, ErrorCode::InvalidArgument,
                "COUNT marks must lie in [1, " + std::to_string(kMaxCount) + "] and not exceed l_v");
        std::vector<int> perm(l_v);
        for (int i = 0; i < l_v; ++i) perm[i] = i;
        for (int i = 0; i < c; ++i) {
            const int j = std::uniform_int_distribution<int>(i, l_v - 1)(rng);
            std::swap(perm[i], perm[j]);
        }
        std::vector<int> marks(perm.begin(), perm.begin() + c);
        std::sort(marks.begin(), marks.end());
        std::vector<double> count_axis(d, 0.0), anchor_axis(d, 0.0);
        count_axis[0] = sd;
        anchor_axis[std::min(1, d - 1)] = sd;
        for (int pos : marks) {
            double* row = t.seq.embeddings.row(pos);
            add(row, model.marker[kMarkC]);
            add(row, count_axis);
            t.seq.tokens[pos] = kTokMark;
        }
        for (int i = l_v; i < l - 2; ++i) set_token(i, content(rng));
        double* anc = t.seq.embeddings.row(l - 2);
        visual_noise(anc, kAnchorNoise);
        add(anc, model.marker[kAnchorC]);
        add(anc, anchor_axis);
        t.seq.tokens[l - 2] = kTokAnchor;
        set_token(l - 1, kTokAskCount);
        t.expected_token = kNumberBase + c - 1;
        t.expected_value = c;
        t.marked = marks;
    } else {
        const int pos = l_v + std::uniform_int_distribution<int>(0, l_t - 2)(rng);
        for (int i = l_v; i < l - 1; ++i) set_token(i, content(rng));
        add(t.seq.embeddings.row(pos), model.marker[kCopyMark]);
        set_token(l - 1, kTokAskCopy);
        t.expected_token = t.seq.tokens[pos];
        t.expected_value = t.seq.tokens[pos];
        t.marked = {pos};
    }

    for (int i = 0; i < l; ++i) add(t.seq.embeddings.row(i), model.marker[kCommon], kCommonGain);

    t.cls_attention.resize(l_v);
    if (l_v > 0) {
        const double mx = *std::max_element(cls_logit.begin(), cls_logit.end());
        double sum = 0.0;
        for (int i = 0; i < l_v; ++i) {
            t.cls_attention[i] = std::exp(cls_logit[i] - mx);
            sum += t.cls_attention[i];
        }
        for (auto& c : t.cls_attention) c /= sum;
    }
    return t;
}

}  // namespace vlcb
