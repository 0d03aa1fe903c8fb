// Copyright (C) 2026 delimlab contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <vector>

#include "delimlab/error.hpp"
#include "delimlab/intervention.hpp"
#include "delimlab/layout.hpp"
#include "delimlab/model.hpp"
#include "delimlab/tensor.hpp"

namespace delimlab {

enum class Producer { toy, bridge };

inline std::string_view to_string(Producer p) { return p == Producer::toy ? "toy" : "bridge"; }

inline Producer parse_producer(std::string_view s) {
    if (s == "toy") return Producer::toy;
    if (s == "bridge") return Producer::bridge;
    fail_data("unknown-producer", std::string(s));
}

/// Row-stochastic tolerances: in-memory f64 toy traces vs anything that went
/// through f32 (containers, real-model exports).
inline constexpr double kToyRowTolerance = 1e-9;
inline constexpr double kF32RowTolerance = 1e-4;

/// One forward pass worth of attention, as consumed by every analysis.
struct AttentionTrace {
    std::size_t n_layers = 0;
    std::size_t n_heads = 0;
    std::size_t seq_len = 0;
    std::size_t head_dim = 0;
    std::vector<std::vector<Matrix>> attention;                // [layer][head] seq x seq
    std::optional<std::vector<std::vector<Matrix>>> values;    // [layer][head] seq x head_dim
    std::optional<std::vector<std::vector<double>>> hidden_norms;  // [layer] seq
    PromptLayout layout;
    std::optional<InterventionSpec> intervention;
    Producer producer = Producer::toy;
    double row_tolerance = kToyRowTolerance;

    const Matrix& p(std::size_t layer, std::size_t head) const { return attention.at(layer).at(head); }
};

struct TraceViolation {
    std::string code;
    std::string location;
    std::string detail;
};

/// Row-mass, causality and finiteness checks for one attention matrix.
inline void check_attention_matrix(const Matrix& p, double tolerance, const std::string& where, std::vector<TraceViolation>& out) {
    for (std::size_t q = 0; q < p.rows(); ++q) {
        double mass = 0.0;
        for (std::size_t k = 0; k < p.cols(); ++k) {
            const double v = p(q, k);
            if (!std::isfinite(v) || v < 0.0) {
                out.push_back({"non-finite", where + " row " + std::to_string(q), "entry " + std::to_string(k)});
                continue;
            }
            if (k > q && v != 0.0) out.push_back({"causal-violation", where + " row " + std::to_string(q), "key " + std::to_string(k)});
            mass += v;
        }
        if (std::abs(mass - 1.0) > tolerance)
            out.push_back({"row-mass", where + " row " + std::to_string(q), "mass " + std::to_string(mass)});
    }
}

inline std::vector<TraceViolation> validate_layout_against(const PromptLayout& layout, std::size_t seq_len) {
    std::vector<TraceViolation> out;
    if (layout.size() != seq_len)
        out.push_back({"layout-length", "layout", std::to_string(layout.size()) + " tokens vs seq_len " + std::to_string(seq_len)});
    for (const auto& d : layout.delimiters)
        if (d.index >= seq_len) out.push_back({"delimiter-out-of-range", "delimiter " + std::to_string(d.index), "seq_len " + std::to_string(seq_len)});
    for (const auto& s : layout.segments)
        if (s.end > seq_len) out.push_back({"segment-out-of-range", "segment " + std::to_string(s.id), "end " + std::to_string(s.end)});
    for (const auto& v : validate(layout)) {
        if (v.code == "delimiter-out-of-range" || v.code == "index-out-of-range") continue;
        out.push_back({v.code, "layout index " + std::to_string(v.index), v.detail});
    }
    return out;
}

inline std::vector<TraceViolation> validate_trace(const AttentionTrace& trace) {
    auto out = validate_layout_against(trace.layout, trace.seq_len);
    if (trace.attention.size() != trace.n_layers) out.push_back({"shape", "attention", "layer count"});
    for (std::size_t l = 0; l < trace.attention.size(); ++l) {
        if (trace.attention[l].size() != trace.n_heads) out.push_back({"shape", "layer " + std::to_string(l), "head count"});
        for (std::size_t h = 0; h < trace.attention[l].size(); ++h) {
            const auto& p = trace.attention[l][h];
            const std::string where = "layer " + std::to_string(l) + " head " + std::to_string(h);
            if (p.rows() != trace.seq_len || p.cols() != trace.seq_len) {
                out.push_back({"shape", where, "attention not seq x seq"});
                continue;
            }
            check_attention_matrix(p, trace.row_tolerance, where, out);
        }
    }
    return out;
}

/// Packages a captured forward pass (attention required) as a trace.
inline AttentionTrace make_trace(const ForwardState& state, const PromptLayout& layout, const ModelConfig& config,
                                 const std::optional<InterventionSpec>& intervention = std::nullopt) {
    if (state.attention.size() != config.n_layers) fail_data("attention-not-captured", "forward ran without attention capture");
    AttentionTrace t;
    t.n_layers = config.n_layers;
    t.n_heads = config.n_heads;
    t.seq_len = layout.size();
    t.head_dim = config.head_dim;
    t.attention = state.attention;
    if (!state.value.empty()) t.values = state.value;
    if (!state.hidden.empty()) {
        std::vector<std::vector<double>> norms;
        for (const auto& h : state.hidden) {
            std::vector<double> row_norms(h.rows());
            for (std::size_t r = 0; r < h.rows(); ++r) row_norms[r] = l2_norm(h.row(r));
            norms.push_back(std::move(row_norms));
        }
        t.hidden_norms = std::move(norms);
    }
    t.layout = layout;
    if (intervention) t.intervention = normalized(*intervention);
    t.producer = Producer::toy;
    t.row_tolerance = kToyRowTolerance;
    return t;
}

}  // namespace delimlab
