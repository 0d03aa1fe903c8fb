// Copyright (C) 2026 delimlab contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "json.hpp"

#include "delimlab/error.hpp"
#include "delimlab/intervention.hpp"
#include "delimlab/layout.hpp"
#include "delimlab/rng.hpp"
#include "delimlab/tensor.hpp"

namespace delimlab {

enum class NormMode {
    linear,   // no normalization; hidden scaling propagates exactly into q, k, v
    prenorm,  // RMS pre-normalization without gain
};

inline std::string_view to_string(NormMode m) { return m == NormMode::linear ? "linear" : "prenorm"; }

inline NormMode parse_norm_mode(std::string_view s) {
    if (s == "linear") return NormMode::linear;
    if (s == "prenorm") return NormMode::prenorm;
    fail_config("unknown-norm-mode", std::string(s));
}

struct ModelConfig {
    std::size_t n_layers = 2;
    std::size_t n_heads = 2;
    std::size_t head_dim = 8;
    std::size_t vocab = 64;
    NormMode norm_mode = NormMode::linear;
    std::size_t mlp_ratio = 2;
    std::uint64_t seed = 0;
    double rope_theta = 10000.0;
    std::optional<std::size_t> rotary_dims;  // per head; unset = head_dim, 0 disables rotary

    std::size_t d_model() const noexcept { return n_heads * head_dim; }
    std::size_t rotary() const noexcept { return rotary_dims.value_or(head_dim); }

    void validate() const {
        if (n_layers == 0 || n_heads == 0 || head_dim == 0 || vocab == 0 || mlp_ratio == 0)
            fail_config("invalid-model-config", "all counts must be >= 1");
        if (rotary() > head_dim || rotary() % 2 != 0)
            fail_config("invalid-model-config", "rotary_dims must be even and <= head_dim");
        if (!(rope_theta > 1.0)) fail_config("invalid-model-config", "rope_theta must be > 1");
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline nlohmann::json to_json(const ModelConfig& c) {
    return {{"n_layers", c.n_layers}, {"n_heads", c.n_heads},     {"head_dim", c.head_dim},
            {"vocab", c.vocab},       {"norm_mode", to_string(c.norm_mode)},
            {"mlp_ratio", c.mlp_ratio}, {"seed", c.seed},         {"rope_theta", c.rope_theta},
            {"rotary_dims", c.rotary()}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    static const std::set<std::string> known = {"n_layers", "n_heads", "head_dim", "vocab", "norm_mode",
                                                "mlp_ratio", "seed", "rope_theta", "rotary_dims"};
    if (!j.is_object()) fail_config("schema", "model must be an object");
    for (const auto& [key, _] : j.items())
        if (!known.count(key)) fail_config("unknown-key", "model." + key);
    try {
        ModelConfig c;
        c.n_layers = j.value("n_layers", c.n_layers);
        c.n_heads = j.value("n_heads", c.n_heads);
        c.head_dim = j.value("head_dim", c.head_dim);
        c.vocab = j.value("vocab", c.vocab);
        if (j.contains("norm_mode")) c.norm_mode = parse_norm_mode(j["norm_mode"].get<std::string>());
        c.mlp_ratio = j.value("mlp_ratio", c.mlp_ratio);
        c.seed = j.value("seed", c.seed);
        c.rope_theta = j.value("rope_theta", c.rope_theta);
        if (j.contains("rotary_dims")) c.rotary_dims = j["rotary_dims"].get<std::size_t>();
        c.validate();
        return c;
    } catch (const nlohmann::json::exception& e) {
        fail_config("schema", std::string("model: ") + e.what());
    }
}

struct LayerWeights {
    Matrix wq, wk, wv, wo;  // d_model x d_model
    Matrix w_up;            // d_model x (mlp_ratio * d_model)
    Matrix w_down;          // (mlp_ratio * d_model) x d_model
};

struct Weights {
    ModelConfig config;
    Matrix embedding;  // vocab x d_model
    std::vector<LayerWeights> layers;
};

/// Draw order: embedding, then per layer wq, wk, wv, wo, w_up, w_down; each
/// matrix row-major, each entry normal / sqrt(d_model).
inline Weights init_weights(const ModelConfig& config) {
    config.validate();
    SeededRng rng(config.seed);
    const std::size_t d = config.d_model();
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    auto draw = [&](std::size_t rows, std::size_t cols) {
        Matrix m(rows, cols);
        for (double& v : m.data()) v = rng.normal() * scale;
        return m;
    };
    Weights w{config, draw(config.vocab, d), {}};
    for (std::size_t l = 0; l < config.n_layers; ++l) {
        LayerWeights lw;
        lw.wq = draw(d, d);
        lw.wk = draw(d, d);
        lw.wv = draw(d, d);
        lw.wo = draw(d, d);
        lw.w_up = draw(d, config.mlp_ratio * d);
        lw.w_down = draw(config.mlp_ratio * d, d);
        w.layers.push_back(std::move(lw));
    }
    return w;
}

/// FNV-1a over the little-endian bytes of every weight, in draw order.
inline std::uint64_t weights_checksum(const Weights& w) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto feed = [&](const Matrix& m) {
        for (double v : m.data()) {
            const auto bits = std::bit_cast<std::uint64_t>(v);
            for (int b = 0; b < 8; ++b) {
                h ^= (bits >> (8 * b)) & 0xFFu;
                h *= 0x100000001b3ULL;
            }
        }
    };
    feed(w.embedding);
    for (const auto& l : w.layers) {
        feed(l.wq);
        feed(l.wk);
        feed(l.wv);
        feed(l.wo);
        feed(l.w_up);
        feed(l.w_down);
    }
    return h;
}

/// Row-wise h / sqrt(mean(h^2)). Exactly scale-invariant up to rounding (no
/// epsilon); all-zero rows stay zero.
inline Matrix rms_normalize(const Matrix& h) {
    Matrix out = h;
    for (std::size_t r = 0; r < out.rows(); ++r) {
        auto row = out.row(r);
        const double ms = dot(row, row) / static_cast<double>(row.size());
        if (ms == 0.0) continue;
        const double inv = 1.0 / std::sqrt(ms);
        for (double& v : row) v *= inv;
    }
    return out;
}

inline Matrix normalize(const Matrix& h, NormMode mode) { return mode == NormMode::prenorm ? rms_normalize(h) : h; }

/// Interleaved rotary: dims (2i, 2i+1) rotate by pos * theta^(-2i / rotary_dims).
inline void apply_rotary(Matrix& m, std::span<const double> positions, std::size_t rotary_dims, double theta) {
    for (std::size_t i = 0; 2 * i < rotary_dims; ++i) {
        const double freq = std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(rotary_dims));
        for (std::size_t t = 0; t < m.rows(); ++t) {
            const double angle = positions[t] * freq;
            const double c = std::cos(angle), s = std::sin(angle);
            const double x0 = m(t, 2 * i), x1 = m(t, 2 * i + 1);
            m(t, 2 * i) = x0 * c - x1 * s;
            m(t, 2 * i + 1) = x0 * s + x1 * c;
        }
    }
}

inline Matrix columns(const Matrix& m, std::size_t first, std::size_t count) {
    Matrix out(m.rows(), count);
    for (std::size_t r = 0; r < m.rows(); ++r)
        std::copy_n(m.row(r).begin() + static_cast<std::ptrdiff_t>(first), count, out.row(r).begin());
    return out;
}

struct ProjectionScaling {
    std::vector<std::size_t> targets;
    double lambda = 1.0;
    Projection which = Projection::key;
};

struct AttentionBlockResult {
    Matrix output;                   // concat(head outputs) * wo, seq x d_model
    std::vector<Matrix> q, k, v;     // per head, after projection scaling and rotary
    std::vector<Matrix> p;           // per head post-softmax, seq x seq (empty when streamed)
    std::vector<Matrix> head_output; // per head sum_i p_{q,i} v_i, seq x head_dim
};

struct ForwardOptions {
    std::size_t threads = 1;  // parallel over heads; results independent of the count
};

namespace detail {

struct HeadInputs {
    Matrix q_full, k_full, v_full;
};

inline HeadInputs project(const Matrix& x, const LayerWeights& w, const std::optional<ProjectionScaling>& scaling) {
    HeadInputs in{matmul(x, w.wq), matmul(x, w.wk), matmul(x, w.wv)};
    if (scaling && scaling->lambda != 1.0) {
        QKV qkv{std::move(in.q_full), std::move(in.k_full), std::move(in.v_full)};
        qkv = apply_projection_scaling(std::move(qkv), scaling->targets, scaling->lambda, scaling->which);
        in = {std::move(qkv.q), std::move(qkv.k), std::move(qkv.v)};
    }
    return in;
}

template <class Fn>
void for_each_head(std::size_t n_heads, std::size_t threads, Fn&& fn) {
    threads = std::clamp<std::size_t>(threads, 1, n_heads);
    if (threads == 1) {
        for (std::size_t h = 0; h < n_heads; ++h) fn(h);
        return;
    }
    std::vector<std::jthread> pool;
    pool.reserve(threads);
    for (std::size_t t = 0; t < threads; ++t)
        pool.emplace_back([&, t] {
            for (std::size_t h = t; h < n_heads; h += threads) fn(h);
        });
}

inline Matrix merge_heads(const std::vector<Matrix>& head_output, std::size_t head_dim) {
    const std::size_t seq = head_output.empty() ? 0 : head_output.front().rows();
    Matrix concat(seq, head_output.size() * head_dim);
    for (std::size_t h = 0; h < head_output.size(); ++h)
        for (std::size_t t = 0; t < seq; ++t)
            std::copy(head_output[h].row(t).begin(), head_output[h].row(t).end(),
                      concat.row(t).begin() + static_cast<std::ptrdiff_t>(h * head_dim));
    return concat;
}

}  // namespace detail

/// Causal multi-head attention over normalized input `x`, materializing the
/// per-head probability matrices.
inline AttentionBlockResult attention_block(const Matrix& x, const LayerWeights& w, const ModelConfig& config,
                                            std::span<const double> positions,
                                            const std::optional<ProjectionScaling>& scaling = std::nullopt,
                                            const ForwardOptions& options = {}) {
    const std::size_t d = config.d_model(), hd = config.head_dim, seq = x.rows();
    if (x.cols() != d || w.wq.rows() != d || w.wq.cols() != d || positions.size() != seq)
        fail_data("shape-mismatch", "attention_block input is " + std::to_string(seq) + "x" + std::to_string(x.cols()));
    const auto in = detail::project(x, w, scaling);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));

    AttentionBlockResult r;
    r.q.resize(config.n_heads);
    r.k.resize(config.n_heads);
    r.v.resize(config.n_heads);
    r.p.resize(config.n_heads);
    r.head_output.resize(config.n_heads);
    detail::for_each_head(config.n_heads, options.threads, [&](std::size_t h) {
        Matrix q = columns(in.q_full, h * hd, hd), k = columns(in.k_full, h * hd, hd), v = columns(in.v_full, h * hd, hd);
        apply_rotary(q, positions, config.rotary(), config.rope_theta);
        apply_rotary(k, positions, config.rotary(), config.rope_theta);
        Matrix p(seq, seq);
        for (std::size_t qi = 0; qi < seq; ++qi) {
            auto row = p.row(qi);
            for (std::size_t ki = 0; ki <= qi; ++ki) row[ki] = dot(q.row(qi), k.row(ki)) * inv_sqrt;
            causal_softmax_inplace(row, qi + 1);
        }
        Matrix out(seq, hd);
        for (std::size_t qi = 0; qi < seq; ++qi) {
            auto dst = out.row(qi);
            for (std::size_t ki = 0; ki <= qi; ++ki) {
                const double pk = p(qi, ki);
                auto src = v.row(ki);
                for (std::size_t c = 0; c < hd; ++c) dst[c] += pk * src[c];
            }
        }
        r.q[h] = std::move(q);
        r.k[h] = std::move(k);
        r.v[h] = std::move(v);
        r.p[h] = std::move(p);
        r.head_output[h] = std::move(out);
    });
    r.output = matmul(detail::merge_heads(r.head_output, hd), w.wo);
    return r;
}

/// Same contract as attention_block but with a one-pass online softmax per
/// query row; never holds a score matrix. Only `output` and `head_output` are set.
inline AttentionBlockResult attention_block_streaming(const Matrix& x, const LayerWeights& w, const ModelConfig& config,
                                                      std::span<const double> positions,
                                                      const std::optional<ProjectionScaling>& scaling = std::nullopt,
                                                      const ForwardOptions& options = {}) {
    const std::size_t d = config.d_model(), hd = config.head_dim, seq = x.rows();
    if (x.cols() != d || positions.size() != seq) fail_data("shape-mismatch", "attention_block_streaming input");
    const auto in = detail::project(x, w, scaling);
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));

    AttentionBlockResult r;
    r.head_output.resize(config.n_heads);
    detail::for_each_head(config.n_heads, options.threads, [&](std::size_t h) {
        Matrix q = columns(in.q_full, h * hd, hd), k = columns(in.k_full, h * hd, hd);
        const Matrix v = columns(in.v_full, h * hd, hd);
        apply_rotary(q, positions, config.rotary(), config.rope_theta);
        apply_rotary(k, positions, config.rotary(), config.rope_theta);
        Matrix out(seq, hd);
        std::vector<double> acc(hd);
        for (std::size_t qi = 0; qi < seq; ++qi) {
            double running_max = -INFINITY, denom = 0.0;
            std::fill(acc.begin(), acc.end(), 0.0);
            for (std::size_t ki = 0; ki <= qi; ++ki) {
                const double logit = dot(q.row(qi), k.row(ki)) * inv_sqrt;
                if (!std::isfinite(logit)) fail_data("non-finite-logit", "streamed attention");
                double weight = 1.0;
                if (logit > running_max) {
                    const double rescale = std::exp(running_max - logit);
                    denom *= rescale;
                    for (double& a : acc) a *= rescale;
                    running_max = logit;
                } else {
                    weight = std::exp(logit - running_max);
                }
                denom += weight;
                auto src = v.row(ki);
                for (std::size_t c = 0; c < hd; ++c) acc[c] += weight * src[c];
            }
            auto dst = out.row(qi);
            for (std::size_t c = 0; c < hd; ++c) dst[c] = acc[c] / denom;
        }
        r.head_output[h] = std::move(out);
    });
    r.output = matmul(detail::merge_heads(r.head_output, hd), w.wo);
    return r;
}

struct CaptureFlags {
    bool attention = true;
    bool values = false;       // per-head V and head outputs
    bool hidden = false;       // layer-entry hidden states
    bool projections = false;  // per-head Q and K

    static CaptureFlags all() { return {true, true, true, true}; }
    static CaptureFlags none() { return {false, false, false, false}; }
    bool materializes_scores() const noexcept { return attention || values || projections; }
};

/// Parses "attn,values,hidden[,proj]".
inline CaptureFlags parse_capture(std::string_view list) {
    CaptureFlags f = CaptureFlags::none();
    std::size_t pos = 0;
    while (pos <= list.size()) {
        const std::size_t comma = std::min(list.find(',', pos), list.size());
        const auto item = list.substr(pos, comma - pos);
        if (item == "attn") f.attention = true;
        else if (item == "values") f.values = true;
        else if (item == "hidden") f.hidden = true;
        else if (item == "proj") f.projections = true;
        else if (!item.empty()) fail_config("unknown-capture", std::string(item));
        pos = comma + 1;
    }
    return f;
}

/// Everything a forward pass produced. Captured fields are indexed [layer] or
/// [layer][head]; uncaptured fields stay empty.
struct ForwardState {
    std::vector<Matrix> hidden;                        // entry of each layer, after the hook
    std::vector<std::vector<Matrix>> query, key;       // post-rotary
    std::vector<std::vector<Matrix>> value;
    std::vector<std::vector<Matrix>> attention;
    std::vector<std::vector<Matrix>> head_output;
    std::vector<std::vector<double>> applied_lambda;   // adaptive mode: per layer, per target
    Matrix output;                                     // final hidden states
};

inline bool bit_identical(const ForwardState& a, const ForwardState& b) {
    auto same = [](const std::vector<Matrix>& x, const std::vector<Matrix>& y) {
        if (x.size() != y.size()) return false;
        for (std::size_t i = 0; i < x.size(); ++i)
            if (!bit_identical(x[i], y[i])) return false;
        return true;
    };
    auto same2 = [&](const std::vector<std::vector<Matrix>>& x, const std::vector<std::vector<Matrix>>& y) {
        if (x.size() != y.size()) return false;
        for (std::size_t i = 0; i < x.size(); ++i)
            if (!same(x[i], y[i])) return false;
        return true;
    };
    return same(a.hidden, b.hidden) && same2(a.query, b.query) && same2(a.key, b.key) && same2(a.value, b.value) &&
           same2(a.attention, b.attention) && same2(a.head_output, b.head_output) && bit_identical(a.output, b.output);
}

namespace detail {

inline Matrix mlp(const Matrix& x, const LayerWeights& w) {
    Matrix up = matmul(x, w.w_up);
    for (double& v : up.data()) v = std::max(v, 0.0);
    return matmul(up, w.w_down);
}

inline void add_inplace(Matrix& a, const Matrix& b) {
    auto dst = a.data();
    auto src = b.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

/// Mean-over-heads entropy of each target's own attention row.
inline std::vector<double> adaptive_lambdas(const AttentionBlockResult& probe, std::span<const std::size_t> targets,
                                            const AdaptiveParams& params) {
    std::vector<double> out;
    out.reserve(targets.size());
    for (std::size_t t : targets) {
        double h = 0.0;
        for (const auto& p : probe.p) h += shannon_entropy(p.row(t).first(t + 1));
        h /= static_cast<double>(probe.p.size());
        h = std::clamp(h, 0.0, std::log(static_cast<double>(t + 1)));
        out.push_back(adaptive_lambda(h, t + 1, params.lambda_max, params.reference_entropy));
    }
    return out;
}

}  // namespace detail

/// Runs the model over `layout`, applying `intervention` at its layers.
///
/// The hidden-state hook (modes hidden, first-token, adaptive-hidden) acts at
/// layer entry: pre-norm scales the residual stream itself, post-norm scales
/// only the normalized attention input. Projection modes scale Q, K or V rows
/// after projection. With no score capture the streamed path is used.
inline ForwardState forward(const Weights& weights, const PromptLayout& layout,
                            const std::optional<InterventionSpec>& intervention = std::nullopt,
                            const CaptureFlags& capture = {}, const ForwardOptions& options = {}) {
    const ModelConfig& cfg = weights.config;
    const std::size_t seq = layout.size(), d = cfg.d_model();
    if (seq == 0) fail_data("empty-layout", "forward on an empty layout");
    for (std::size_t t = 0; t < seq; ++t)
        if (layout.tokens[t] >= cfg.vocab)
            fail_config("token-out-of-range", "token " + std::to_string(layout.tokens[t]) + " at " + std::to_string(t) + " >= vocab " +
                                                  std::to_string(cfg.vocab));

    std::optional<InterventionSpec> spec;
    std::vector<std::size_t> targets;
    if (intervention) {
        spec = normalized(*intervention);
        for (std::size_t l : spec->layers)
            if (l >= cfg.n_layers) fail_config("layer-out-of-range", "layer " + std::to_string(l) + " >= " + std::to_string(cfg.n_layers));
        targets = resolve_targets(*spec, layout);
        if (spec->mode == ScalingMode::adaptive_hidden && !capture.attention)
            fail_config("adaptive-requires-capture", "adaptive-hidden needs materialized attention (capture attn)");
    }

    std::vector<double> positions(seq);
    for (std::size_t t = 0; t < seq; ++t) positions[t] = static_cast<double>(t);
    if (spec && spec->position_offset != 0.0) positions = apply_position_offset(std::move(positions), layout, spec->position_offset);

    Matrix h(seq, d);
    for (std::size_t t = 0; t < seq; ++t) {
        auto src = weights.embedding.row(layout.tokens[t]);
        std::copy(src.begin(), src.end(), h.row(t).begin());
    }

    ForwardState state;
    const bool materialize = capture.materializes_scores() || (spec && spec->mode == ScalingMode::adaptive_hidden);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const LayerWeights& lw = weights.layers[l];
        const bool active = spec && spec->applies_to(l) && !spec->is_identity();
        const bool hidden_hook = active && (spec->mode == ScalingMode::hidden || spec->mode == ScalingMode::first_token ||
                                            spec->mode == ScalingMode::adaptive_hidden);

        std::vector<double> lambdas;
        if (hidden_hook) {
            if (spec->mode == ScalingMode::adaptive_hidden) {
                const auto probe = attention_block(normalize(h, cfg.norm_mode), lw, cfg, positions, std::nullopt, options);
                lambdas = detail::adaptive_lambdas(probe, targets, spec->adaptive);
            } else {
                lambdas.assign(targets.size(), spec->lambda);
            }
            if (spec->hook == HookPoint::pre_norm) h = apply_hidden_scaling(std::move(h), targets, lambdas);
        }
        if (spec && spec->mode == ScalingMode::adaptive_hidden) state.applied_lambda.push_back(lambdas);
        if (capture.hidden) state.hidden.push_back(h);

        Matrix x = normalize(h, cfg.norm_mode);
        if (hidden_hook && spec->hook == HookPoint::post_norm) x = apply_hidden_scaling(std::move(x), targets, lambdas);

        std::optional<ProjectionScaling> proj;
        if (active)
            if (auto which = projection_of(spec->mode)) proj = ProjectionScaling{targets, spec->lambda, *which};

        auto block = materialize ? attention_block(x, lw, cfg, positions, proj, options)
                                 : attention_block_streaming(x, lw, cfg, positions, proj, options);
        detail::add_inplace(h, block.output);
        detail::add_inplace(h, detail::mlp(normalize(h, cfg.norm_mode), lw));

        if (capture.attention) state.attention.push_back(std::move(block.p));
        if (capture.values) {
            state.value.push_back(std::move(block.v));
            state.head_output.push_back(std::move(block.head_output));
        }
        if (capture.projections) {
            state.query.push_back(std::move(block.q));
            state.key.push_back(std::move(block.k));
        }
    }
    state.output = std::move(h);
    return state;
}

}  // namespace delimlab
