// Copyright (C) 2026 delimlab contributors
// SPDX-License-Identifier: Apache-2.0

// Shared test helpers: conversions into oracle types, the golden file, and
// seeded generators for property tests.

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "delimlab/delimlab.hpp"
#include "oracle/oracle.hpp"

namespace testing_support {

inline oracle::Mat to_oracle(const delimlab::Matrix& m) {
    oracle::Mat out(m.rows(), oracle::Row(m.cols()));
    for (std::size_t r = 0; r < m.rows(); ++r)
        for (std::size_t c = 0; c < m.cols(); ++c) out[r][c] = m(r, c);
    return out;
}

inline oracle::Model to_oracle(const delimlab::Weights& w) {
    oracle::Model m;
    m.n_heads = w.config.n_heads;
    m.head_dim = w.config.head_dim;
    m.rms = w.config.norm_mode == delimlab::NormMode::prenorm;
    m.theta = w.config.rope_theta;
    m.rotary_dims = w.config.rotary();
    m.embedding = to_oracle(w.embedding);
    for (const auto& l : w.layers)
        m.layers.push_back({to_oracle(l.wq), to_oracle(l.wk), to_oracle(l.wv), to_oracle(l.wo), to_oracle(l.w_up), to_oracle(l.w_down)});
    return m;
}

inline std::vector<std::size_t> token_indices(const delimlab::PromptLayout& layout) {
    return {layout.tokens.begin(), layout.tokens.end()};
}

inline double max_abs_diff(const delimlab::Matrix& a, const oracle::Mat& b) {
    double worst = 0.0;
    for (std::size_t r = 0; r < a.rows(); ++r)
        for (std::size_t c = 0; c < a.cols(); ++c) worst = std::max(worst, std::abs(a(r, c) - b[r][c]));
    return worst;
}

inline const nlohmann::json& golden() {
    static const nlohmann::json g = [] {
        std::ifstream in(std::filesystem::path(DELIMLAB_SOURCE_DIR) / "tests/golden/three_segment.json");
        return nlohmann::json::parse(in);
    }();
    return g;
}

/// Random model config within the given bounds; seed drives everything.
inline delimlab::ModelConfig random_config(std::mt19937_64& gen, std::size_t layers, std::size_t heads, delimlab::NormMode mode) {
    delimlab::ModelConfig c;
    c.n_layers = layers;
    c.n_heads = heads;
    c.head_dim = 4 + 2 * std::uniform_int_distribution<std::size_t>(0, 2)(gen);
    c.vocab = 40;
    c.norm_mode = mode;
    c.mlp_ratio = 2;
    c.seed = gen();
    return c;
}

/// Random paired/removed/replaced layout fitting a 40-token vocabulary.
inline delimlab::LayoutRecipe random_recipe(std::mt19937_64& gen, std::size_t max_len) {
    delimlab::LayoutRecipe r;
    std::uniform_int_distribution<std::size_t> n_seg(1, 3), size(1, 5), text(0, 4), pol(0, 2);
    const std::size_t segs = n_seg(gen);
    for (std::size_t i = 0; i < segs; ++i) r.segment_sizes.push_back(size(gen));
    r.text_len = text(gen);
    r.policy = static_cast<delimlab::LayoutPolicy>(pol(gen));
    r.delimiter_token = 1;
    r.content_token = 16;
    r.text_token = 2;
    if (r.policy == delimlab::LayoutPolicy::replaced) r.replacement_token = 3;
    std::size_t len = r.text_len;
    for (auto s : r.segment_sizes) len += s + 2;
    while (len > max_len && r.segment_sizes.back() > 1) {
        --r.segment_sizes.back();
        --len;
    }
    return r;
}

inline delimlab::AttentionTrace run_trace(const delimlab::Weights& w, const delimlab::PromptLayout& layout,
                                          const std::optional<delimlab::InterventionSpec>& spec = std::nullopt) {
    return delimlab::make_trace(delimlab::forward(w, layout, spec, delimlab::CaptureFlags::all()), layout, w.config, spec);
}

inline std::filesystem::path scratch_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("delimlab_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace testing_support
