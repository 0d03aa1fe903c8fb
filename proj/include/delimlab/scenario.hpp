// Copyright (C) 2026 delimlab contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "delimlab/layout.hpp"
#include "delimlab/model.hpp"

namespace delimlab {

/// A hand-built model plus prompt recipe on which the delimiter mechanism can
/// be observed exactly.
struct Scenario {
    std::string name;
    Weights weights;
    LayoutRecipe recipe;
    std::vector<std::size_t> scaled_layers;  // where hidden scaling is applied
    std::size_t measurement_layer = 0;       // where segment interaction is read
    std::size_t tagging_layer = 0;           // first scaled layer; delimiter terms read here
    TokenId replacement_token = 0;

    PromptLayout layout(LayoutPolicy policy = LayoutPolicy::paired) const {
        LayoutRecipe r = recipe;
        r.policy = policy;
        if (policy == LayoutPolicy::replaced) r.replacement_token = replacement_token;
        return build_layout(r);
    }
};

/// Three 4-token image segments with numbered brackets, a BOS sink and a
/// 3-token text tail, run through a 2-layer, 1-head linear-mode model whose
/// bilinear attention forms are set by hand.
///
/// Residual dimensions: 0 sink | 1-3 content identity C_i | 4-6 bracket
/// identity D_i | 7 text | 8-10 tag G_i | 11-13 content mix M_i | 14 generic
/// replacement token. Layer 0 values write G_i from bracket i and M_i from
/// content i, so after layer 0 every content token carries its own-bracket tag
/// with weight lambda * p_{q,d_i}. Layer 1 adds a tag-tag affinity, which is
/// what keeps intra-segment attention up while cross-segment attention drops.
///
/// Logit table (query feature -> key feature), both layers unless noted:
///   C_i -> D_i: 2 (layer 0), 1 (layer 1)   C_i -> D_j: -1
///   C_i -> C_i: 2     C_i -> C_j: 1.75     C_i -> sink: 4
///   G_i -> G_i: 1.25 (layer 1)             D_i -> sink: 1
///   text -> sink: 1   text -> text: 1.5    text -> C_j: 0.7
inline Scenario three_segment_scenario() {
    constexpr std::size_t d = 16;
    constexpr std::size_t kSink = 0, kText = 7, kReplacement = 14;
    constexpr std::size_t kC[] = {1, 2, 3}, kD[] = {4, 5, 6}, kG[] = {8, 9, 10}, kM[] = {11, 12, 13};

    ModelConfig cfg;
    cfg.n_layers = 2;
    cfg.n_heads = 1;
    cfg.head_dim = d;
    cfg.vocab = 16;
    cfg.norm_mode = NormMode::linear;
    cfg.mlp_ratio = 1;
    cfg.seed = 0;
    cfg.rotary_dims = 0;

    Scenario s;
    s.name = "three-segment";
    s.recipe.segment_sizes = {4, 4, 4};
    s.recipe.text_len = 3;
    s.recipe.policy = LayoutPolicy::paired;
    s.recipe.kind = SegmentKind::image;
    s.recipe.bos_token = 0;
    s.recipe.delimiter_token = 1;  // brackets 1..6
    s.recipe.indexed_delimiters = true;
    s.recipe.content_token = 7;  // 7, 8, 9
    s.recipe.text_token = 10;
    s.replacement_token = 11;
    s.scaled_layers = {0, 1};
    s.measurement_layer = 1;
    s.tagging_layer = 0;

    Matrix emb(cfg.vocab, d);
    emb(0, kSink) = 1.0;
    for (std::size_t i = 0; i < 3; ++i) {
        emb(1 + 2 * i, kD[i]) = 1.0;
        emb(2 + 2 * i, kD[i]) = 1.0;
        emb(7 + i, kC[i]) = 1.0;
    }
    emb(10, kText) = 1.0;
    emb(11, kReplacement) = 1.0;

    // logits = x B x^T; with wk = I the query map is sqrt(head_dim) * B.
    auto bilinear = [&](double own_delimiter, bool tag_affinity) {
        Matrix b(d, d);
        for (std::size_t i = 0; i < 3; ++i) {
            for (std::size_t j = 0; j < 3; ++j) {
                b(kC[i], kD[j]) = i == j ? own_delimiter : -1.0;
                b(kC[i], kC[j]) = i == j ? 2.0 : 1.75;
            }
            b(kC[i], kSink) = 4.0;
            b(kD[i], kSink) = 1.0;
            b(kText, kC[i]) = 0.7;
            if (tag_affinity) b(kG[i], kG[i]) = 1.25;
        }
        b(kText, kSink) = 1.0;
        b(kText, kText) = 1.5;
        const double scale = std::sqrt(static_cast<double>(cfg.head_dim));
        for (double& v : b.data()) v *= scale;
        return b;
    };

    Matrix wv(d, d);
    for (std::size_t i = 0; i < 3; ++i) {
        wv(kD[i], kG[i]) = 1.0;
        wv(kC[i], kM[i]) = 1.0;
    }

    s.weights.config = cfg;
    s.weights.embedding = std::move(emb);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        LayerWeights lw;
        lw.wq = bilinear(l == 0 ? 2.0 : 1.0, l == 1);
        lw.wk = Matrix::identity(d);
        lw.wv = wv;
        lw.wo = Matrix::identity(d);
        lw.w_up = Matrix(d, cfg.mlp_ratio * d);
        lw.w_down = Matrix(cfg.mlp_ratio * d, d);
        s.weights.layers.push_back(std::move(lw));
    }
    return s;
}

}  // namespace delimlab
