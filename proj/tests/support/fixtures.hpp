// Copyright (C) 2026 The vlcb Authors
// SPDX-License-Identifier: Apache-2.0

// Shared test fixtures: random causal attention, random traces, and
// brute-force reference implementations written independently of src/.

#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "vlcb/simcore.hpp"

namespace vlcb::testing {

/// Random row-stochastic lower-triangular matrix. `peaked` > 0 sharpens rows.
inline Mat random_causal(std::mt19937_64& rng, int l, double peaked = 1.0) {
    std::normal_distribution<double> n(0.0, 1.0);
    Mat a(l, l);
    for (int i = 0; i < l; ++i) {
        double s = 0.0;
        for (int j = 0; j <= i; ++j) {
            a(i, j) = std::exp(peaked * n(rng));
            s += a(i, j);
        }
        for (int j = 0; j <= i; ++j) a(i, j) /= s;
    }
    return a;
}

inline AttentionTrace random_trace(std::mt19937_64& rng, int layers, int heads, int l, int l_v,
                                   double peaked = 1.0) {
    AttentionTrace t;
    t.l = l;
    t.l_v = l_v;
    t.attn.resize(layers);
    t.token_index.resize(layers);
    for (int k = 0; k < layers; ++k) {
        for (int h = 0; h < heads; ++h) t.attn[k].push_back(random_causal(rng, l, peaked));
        for (int i = 0; i < l; ++i) t.token_index[k].push_back(i);
    }
    return t;
}

/// Cache matching a trace: random K/V rows, visual then text modality.
inline KVCacheState random_cache(std::mt19937_64& rng, const AttentionTrace& t, int head_dim) {
    std::normal_distribution<double> n(0.0, 1.0);
    KVCacheState c;
    c.l = t.l;
    c.l_v = t.l_v;
    c.head_dim = head_dim;
    for (int i = 0; i < t.l; ++i) c.modality.push_back(i < t.l_v ? Modality::Visual : Modality::Text);
    c.layers.resize(t.num_layers());
    for (int k = 0; k < t.num_layers(); ++k) {
        for (int h = 0; h < t.num_heads(); ++h) {
            HeadCache hc;
            hc.k = Mat(t.l, head_dim);
            hc.v = Mat(t.l, head_dim);
            for (auto& x : hc.k.a) x = n(rng);
            for (auto& x : hc.v.a) x = n(rng);
            for (int i = 0; i < t.l; ++i) hc.index.push_back(i);
            c.layers[k].push_back(std::move(hc));
        }
        c.capacity.push_back(t.l);
    }
    return c;
}

// ---- double-loop oracles for the scoring functionals ----

inline std::vector<double> oracle_acc(const Mat& a) {
    const int l = static_cast<int>(a.rows);
    std::vector<double> s(l, 0.0);
    for (int j = 0; j < l; ++j)
        for (int i = 0; i < l; ++i) s[j] += a(i, j);
    return s;
}

inline std::vector<double> oracle_norm(const Mat& a) {
    const int l = static_cast<int>(a.rows);
    std::vector<double> s(l, 0.0);
    for (int j = 0; j < l; ++j) {
        int visible = 0;
        for (int i = 0; i < l; ++i) {
            if (i >= j) {
                s[j] += a(i, j);
                ++visible;
            }
        }
        s[j] /= visible;
    }
    return s;
}

inline std::vector<double> oracle_sw(const Mat& a, int w) {
    const int l = static_cast<int>(a.rows);
    std::vector<double> s(l, 0.0);
    for (int j = 0; j < l; ++j)
        for (int i = l - w; i < l; ++i) s[j] += a(i, j);
    return s;
}

inline std::vector<double> oracle_pv(const Mat& a, int l_v) {
    const int l = static_cast<int>(a.rows);
    std::vector<double> s(l, 0.0);
    for (int j = 0; j < l; ++j)
        for (int i = l_v; i < l; ++i) s[j] += a(i, j);
    return s;
}

inline double rel_err(double a, double b) {
    const double d = std::abs(a - b);
    const double m = std::max(std::abs(a), std::abs(b));
    return m == 0.0 ? d : d / m;
}

}  // namespace vlcb::testing
