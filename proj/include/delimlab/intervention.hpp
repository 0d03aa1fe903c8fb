// Copyright (C) 2026 delimlab contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "delimlab/error.hpp"
#include "delimlab/layout.hpp"
#include "delimlab/tensor.hpp"

namespace delimlab {

enum class ScalingMode { hidden, query_only, key_only, value_only, first_token, adaptive_hidden };
enum class TargetSet { delimiters, explicit_list };
enum class HookPoint { pre_norm, post_norm };
enum class Projection { query, key, value };

struct AdaptiveParams {
    double lambda_max = 2.0;
    // Entropy that maps to lambda_max. Unset means ln(visible_count) per row.
    std::optional<double> reference_entropy;
    friend bool operator==(const AdaptiveParams&, const AdaptiveParams&) = default;
};

/// Declarative intervention applied at the toy-transformer hook points.
struct InterventionSpec {
    ScalingMode mode = ScalingMode::hidden;
    double lambda = 1.0;
    std::vector<std::size_t> layers;  // sorted, unique
    TargetSet targets = TargetSet::delimiters;
    std::vector<std::size_t> explicit_targets;
    double position_offset = 0.0;  // per-segment rotary offset; 0 disables
    HookPoint hook = HookPoint::pre_norm;
    AdaptiveParams adaptive;

    bool is_identity() const noexcept {
        return position_offset == 0.0 && (mode == ScalingMode::adaptive_hidden ? adaptive.lambda_max == 1.0 : lambda == 1.0);
    }
    /// 0 < lambda < 1: the degradation ablation; reports flag it.
    bool is_degradation() const noexcept { return lambda < 1.0; }
    bool applies_to(std::size_t layer) const noexcept { return std::binary_search(layers.begin(), layers.end(), layer); }

    friend bool operator==(const InterventionSpec&, const InterventionSpec&) = default;
};

inline std::string_view to_string(ScalingMode m) {
    switch (m) {
        case ScalingMode::hidden: return "hidden";
        case ScalingMode::query_only: return "query-only";
        case ScalingMode::key_only: return "key-only";
        case ScalingMode::value_only: return "value-only";
        case ScalingMode::first_token: return "first-token";
        case ScalingMode::adaptive_hidden: return "adaptive-hidden";
    }
    return "hidden";
}

inline ScalingMode parse_scaling_mode(std::string_view s) {
    if (s == "hidden") return ScalingMode::hidden;
    if (s == "query-only") return ScalingMode::query_only;
    if (s == "key-only") return ScalingMode::key_only;
    if (s == "value-only") return ScalingMode::value_only;
    if (s == "first-token") return ScalingMode::first_token;
    if (s == "adaptive-hidden") return ScalingMode::adaptive_hidden;
    fail_config("unknown-mode", std::string(s));
}

inline std::string_view to_string(HookPoint h) { return h == HookPoint::pre_norm ? "pre-norm" : "post-norm"; }

inline HookPoint parse_hook_point(std::string_view s) {
    if (s == "pre-norm") return HookPoint::pre_norm;
    if (s == "post-norm") return HookPoint::post_norm;
    fail_config("unknown-hook", std::string(s));
}

inline std::optional<Projection> projection_of(ScalingMode m) {
    switch (m) {
        case ScalingMode::query_only: return Projection::query;
        case ScalingMode::key_only: return Projection::key;
        case ScalingMode::value_only: return Projection::value;
        default: return std::nullopt;
    }
}

/// Checks spec-local invariants and normalizes (sorts layers, forces the
/// first-token target). Depth and layout checks happen in resolve/forward.
inline InterventionSpec normalized(InterventionSpec spec) {
    if (!(spec.lambda > 0.0) || !std::isfinite(spec.lambda)) fail_config("invalid-lambda", "lambda must be finite and > 0");
    if (!(spec.position_offset >= 0.0) || !std::isfinite(spec.position_offset))
        fail_config("invalid-position-offset", "position offset must be finite and >= 0");
    if (spec.mode == ScalingMode::adaptive_hidden && !(spec.adaptive.lambda_max >= 1.0))
        fail_config("invalid-lambda", "adaptive lambda_max must be >= 1");
    if (spec.adaptive.reference_entropy && !(*spec.adaptive.reference_entropy > 0.0))
        fail_config("invalid-reference-entropy", "reference entropy must be > 0");
    std::sort(spec.layers.begin(), spec.layers.end());
    spec.layers.erase(std::unique(spec.layers.begin(), spec.layers.end()), spec.layers.end());
    if (spec.mode == ScalingMode::first_token) {
        spec.targets = TargetSet::explicit_list;
        spec.explicit_targets = {0};
    }
    std::sort(spec.explicit_targets.begin(), spec.explicit_targets.end());
    spec.explicit_targets.erase(std::unique(spec.explicit_targets.begin(), spec.explicit_targets.end()), spec.explicit_targets.end());
    return spec;
}

/// Target rows for this layout. First-token mode refuses layouts whose index 0
/// is itself a delimiter, since that ablation must leave D untouched.
inline std::vector<std::size_t> resolve_targets(const InterventionSpec& spec, const PromptLayout& layout) {
    std::vector<std::size_t> out =
        spec.mode == ScalingMode::first_token ? std::vector<std::size_t>{0}
        : spec.targets == TargetSet::delimiters ? layout.delimiter_indices()
                                                : spec.explicit_targets;
    for (std::size_t t : out)
        if (t >= layout.size()) fail_config("target-out-of-range", "target index " + std::to_string(t) + " >= " + std::to_string(layout.size()));
    if (spec.mode == ScalingMode::first_token && layout.is_delimiter(0))
        fail_config("first-token-is-delimiter", "first-token mode needs a non-delimiter at index 0 (set a BOS token)");
    return out;
}

/// Rows in `targets` multiplied by lambda; every other row untouched.
inline Matrix apply_hidden_scaling(Matrix hidden, std::span<const std::size_t> targets, double lambda) {
    for (std::size_t t : targets)
        if (t >= hidden.rows()) fail_data("index-out-of-range", "target row " + std::to_string(t) + " >= " + std::to_string(hidden.rows()));
    if (lambda == 1.0) return hidden;
    for (std::size_t t : targets)
        for (double& v : hidden.row(t)) v *= lambda;
    return hidden;
}

/// Per-row variant used by adaptive mode.
inline Matrix apply_hidden_scaling(Matrix hidden, std::span<const std::size_t> targets, std::span<const double> lambdas) {
    if (targets.size() != lambdas.size()) fail_data("dimension-mismatch", "one lambda per target");
    for (std::size_t k = 0; k < targets.size(); ++k) {
        if (targets[k] >= hidden.rows()) fail_data("index-out-of-range", "target row " + std::to_string(targets[k]));
        if (lambdas[k] == 1.0) continue;
        for (double& v : hidden.row(targets[k])) v *= lambdas[k];
    }
    return hidden;
}

struct QKV {
    Matrix q, k, v;
};

/// Scales target rows of exactly one projection.
inline QKV apply_projection_scaling(QKV qkv, std::span<const std::size_t> targets, double lambda, Projection which) {
    Matrix& m = which == Projection::query ? qkv.q : which == Projection::key ? qkv.k : qkv.v;
    m = apply_hidden_scaling(std::move(m), targets, lambda);
    return qkv;
}

/// lambda = 1 + (lambda_base - 1) * H / H_ref, with H_ref = ln(visible_count)
/// unless overridden. Rows with a single visible key have zero entropy and get 1.
inline double adaptive_lambda(double delimiter_entropy, std::size_t visible_count, double lambda_base,
                              std::optional<double> reference_entropy = std::nullopt) {
    if (!(lambda_base >= 1.0)) fail_config("invalid-lambda", "lambda_base must be >= 1");
    if (visible_count == 0) fail_data("invalid-count", "visible_count must be >= 1");
    const double h_max = std::log(static_cast<double>(visible_count));
    constexpr double slack = 1e-12;
    if (!(delimiter_entropy >= -slack) || delimiter_entropy > h_max + slack)
        fail_data("entropy-out-of-range", "entropy " + std::to_string(delimiter_entropy) + " outside [0, ln " + std::to_string(visible_count) + "]");
    if (visible_count < 2) return 1.0;
    const double ref = reference_entropy.value_or(h_max);
    const double normalized = std::clamp(delimiter_entropy / ref, 0.0, 1.0);
    return 1.0 + (lambda_base - 1.0) * normalized;
}

/// Content segment i, together with its brackets, moves by i * delta. Other
/// tokens (sink, text) keep their positions.
inline std::vector<double> apply_position_offset(std::vector<double> positions, const PromptLayout& layout, double delta) {
    if (!(delta >= 0.0)) fail_config("invalid-position-offset", "delta must be >= 0");
    if (positions.size() != layout.size()) fail_data("dimension-mismatch", "one position per token");
    if (delta == 0.0) return positions;
    for (const auto& span : layout.content_segments()) {
        const double shift = static_cast<double>(span.id) * delta;
        for (std::size_t t = span.start; t < span.end; ++t) positions[t] += shift;
    }
    for (const auto& d : layout.delimiters) positions[d.index] += static_cast<double>(d.segment) * delta;
    return positions;
}

inline nlohmann::json to_json(const InterventionSpec& spec) {
    nlohmann::json j = {
        {"mode", to_string(spec.mode)},
        {"lambda", spec.lambda},
        {"layers", spec.layers},
        {"targets", spec.targets == TargetSet::delimiters ? nlohmann::json("delimiters") : nlohmann::json(spec.explicit_targets)},
        {"position_offset", spec.position_offset},
        {"hook", to_string(spec.hook)},
    };
    if (spec.mode == ScalingMode::adaptive_hidden) {
        j["adaptive"] = {{"lambda_max", spec.adaptive.lambda_max},
                         {"reference_entropy", spec.adaptive.reference_entropy ? nlohmann::json(*spec.adaptive.reference_entropy)
                                                                               : nlohmann::json(nullptr)}};
    }
    return j;
}

/// Strict parse: unknown keys are config errors.
inline InterventionSpec intervention_from_json(const nlohmann::json& j) {
    static const std::set<std::string> known = {"mode", "lambda", "layers", "targets", "position_offset", "hook", "adaptive"};
    if (!j.is_object()) fail_config("schema", "intervention must be an object");
    for (const auto& [key, _] : j.items())
        if (!known.count(key)) fail_config("unknown-key", "intervention." + key);
    try {
        InterventionSpec spec;
        if (j.contains("mode")) spec.mode = parse_scaling_mode(j["mode"].get<std::string>());
        spec.lambda = j.value("lambda", 1.0);
        spec.layers = j.value("layers", std::vector<std::size_t>{});
        if (j.contains("targets")) {
            const auto& t = j["targets"];
            if (t.is_string()) {
                if (t.get<std::string>() != "delimiters") fail_config("schema", "targets must be \"delimiters\" or an index list");
                spec.targets = TargetSet::delimiters;
            } else {
                spec.targets = TargetSet::explicit_list;
                spec.explicit_targets = t.get<std::vector<std::size_t>>();
            }
        }
        spec.position_offset = j.value("position_offset", 0.0);
        if (j.contains("hook")) spec.hook = parse_hook_point(j["hook"].get<std::string>());
        if (j.contains("adaptive")) {
            const auto& a = j["adaptive"];
            for (const auto& [key, _] : a.items())
                if (key != "lambda_max" && key != "reference_entropy") fail_config("unknown-key", "intervention.adaptive." + key);
            spec.adaptive.lambda_max = a.value("lambda_max", 2.0);
            if (a.contains("reference_entropy") && !a["reference_entropy"].is_null())
                spec.adaptive.reference_entropy = a["reference_entropy"].get<double>();
        }
        return normalized(std::move(spec));
    } catch (const nlohmann::json::exception& e) {
        fail_config("schema", std::string("intervention: ") + e.what());
    }
}

}  // namespace delimlab
