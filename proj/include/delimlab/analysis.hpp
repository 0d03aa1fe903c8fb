// Copyright (C) 2026 delimlab contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "delimlab/error.hpp"
#include "delimlab/layout.hpp"
#include "delimlab/tensor.hpp"
#include "delimlab/trace.hpp"

// Diagnostics over an AttentionTrace. Shared conventions:
//  - pair means count each causal (q, k) pair once, k <= q, no per-row pre-averaging;
//  - cells with no causal pair are absent (nullopt), never 0;
//  - per-(layer, head) metrics are averaged arithmetically over the selected
//    layers and all heads; an empty layer list means every layer;
//  - per-segment metrics use content tokens only, never the brackets.

namespace delimlab {

using Cell = std::optional<double>;

namespace detail {

inline std::vector<std::size_t> resolve_layers(const AttentionTrace& trace, std::span<const std::size_t> layers) {
    std::vector<std::size_t> out(layers.begin(), layers.end());
    if (out.empty()) {
        out.resize(trace.n_layers);
        std::iota(out.begin(), out.end(), std::size_t{0});
    }
    for (std::size_t l : out)
        if (l >= trace.n_layers) fail_config("layer-out-of-range", "layer " + std::to_string(l) + " >= " + std::to_string(trace.n_layers));
    return out;
}

inline std::vector<std::size_t> resolve_heads(const AttentionTrace& trace, std::optional<std::size_t> head) {
    if (head) {
        if (*head >= trace.n_heads) fail_config("head-out-of-range", "head " + std::to_string(*head));
        return {*head};
    }
    std::vector<std::size_t> out(trace.n_heads);
    std::iota(out.begin(), out.end(), std::size_t{0});
    return out;
}

inline void require_consistent(const AttentionTrace& trace, const PromptLayout& layout) {
    if (layout.size() != trace.seq_len)
        fail_data("layout-mismatch", "layout has " + std::to_string(layout.size()) + " tokens, trace seq_len " + std::to_string(trace.seq_len));
}

inline std::vector<std::size_t> span_indices(const SegmentSpan& s) {
    std::vector<std::size_t> out(s.size());
    std::iota(out.begin(), out.end(), s.start);
    return out;
}

/// Mean of `metric(layer, head)` over the selection, skipping absent values.
template <class Fn>
Cell average(const std::vector<std::size_t>& layers, const std::vector<std::size_t>& heads, Fn&& metric) {
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t l : layers)
        for (std::size_t h : heads)
            if (const Cell v = metric(l, h)) {
                sum += *v;
                ++n;
            }
    if (n == 0) return std::nullopt;
    return sum / static_cast<double>(n);
}

}  // namespace detail

/// Mean of p[q][k] over causal pairs q in `from`, k in `to`, k <= q.
inline Cell pair_mean(const Matrix& p, std::span<const std::size_t> from, std::span<const std::size_t> to) {
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t q : from)
        for (std::size_t k : to)
            if (k <= q) {
                sum += p(q, k);
                ++n;
            }
    if (n == 0) return std::nullopt;
    return sum / static_cast<double>(n);
}

struct InteractionMatrix {
    std::size_t segments = 0;
    std::vector<Cell> cells;            // row-major [from][to]
    std::optional<std::size_t> head;    // unset: mean over heads
    std::vector<std::size_t> layers;

    Cell at(std::size_t from, std::size_t to) const { return cells.at(from * segments + to); }

    Cell mean_cross() const { return mean_where(false); }
    Cell mean_intra() const { return mean_where(true); }

private:
    Cell mean_where(bool diagonal) const {
        double sum = 0.0;
        std::size_t n = 0;
        for (std::size_t a = 0; a < segments; ++a)
            for (std::size_t b = 0; b < segments; ++b)
                if ((a == b) == diagonal)
                    if (const Cell c = at(a, b)) {
                        sum += *c;
                        ++n;
                    }
        if (n == 0) return std::nullopt;
        return sum / static_cast<double>(n);
    }
};

/// S[a][b]: mean attention from content tokens of segment a to content tokens of segment b.
inline InteractionMatrix segment_interaction_matrix(const AttentionTrace& trace, const PromptLayout& layout,
                                                    std::span<const std::size_t> layers = {},
                                                    std::optional<std::size_t> head = std::nullopt) {
    detail::require_consistent(trace, layout);
    const auto ls = detail::resolve_layers(trace, layers);
    const auto hs = detail::resolve_heads(trace, head);
    const auto segs = layout.content_segments();
    InteractionMatrix m{segs.size(), std::vector<Cell>(segs.size() * segs.size()), head, ls};
    for (std::size_t a = 0; a < segs.size(); ++a) {
        const auto from = detail::span_indices(segs[a]);
        for (std::size_t b = 0; b < segs.size(); ++b) {
            const auto to = detail::span_indices(segs[b]);
            m.cells[a * segs.size() + b] =
                detail::average(ls, hs, [&](std::size_t l, std::size_t h) { return pair_mean(trace.p(l, h), from, to); });
        }
    }
    return m;
}

inline std::vector<InteractionMatrix> segment_interaction_per_head(const AttentionTrace& trace, const PromptLayout& layout,
                                                                   std::span<const std::size_t> layers = {}) {
    std::vector<InteractionMatrix> out;
    for (std::size_t h = 0; h < trace.n_heads; ++h) out.push_back(segment_interaction_matrix(trace, layout, layers, h));
    return out;
}

struct RatioCell {
    Cell ratio;
    bool undefined = false;  // base 0, treated non-zero
};

struct ChangeReport {
    std::size_t segments = 0;
    std::vector<RatioCell> cells;

    const RatioCell& at(std::size_t a, std::size_t b) const { return cells.at(a * segments + b); }

    /// Extremes over present, defined cells on or off the diagonal.
    Cell max_ratio(bool diagonal) const { return extreme(diagonal, true); }
    Cell min_ratio(bool diagonal) const { return extreme(diagonal, false); }

private:
    Cell extreme(bool diagonal, bool want_max) const {
        Cell best;
        for (std::size_t a = 0; a < segments; ++a)
            for (std::size_t b = 0; b < segments; ++b) {
                const auto& c = at(a, b);
                if ((a == b) != diagonal || !c.ratio) continue;
                if (!best || (want_max ? *c.ratio > *best : *c.ratio < *best)) best = c.ratio;
            }
        return best;
    }
};

/// treated / base per cell, so the base reads as exactly 1.00. 0/0 counts as unchanged.
inline ChangeReport interaction_change_report(const InteractionMatrix& base, const InteractionMatrix& treated) {
    if (base.segments != treated.segments) fail_data("shape-mismatch", "interaction matrices differ in segment count");
    ChangeReport r{base.segments, std::vector<RatioCell>(base.cells.size())};
    for (std::size_t i = 0; i < base.cells.size(); ++i) {
        const Cell b = base.cells[i], t = treated.cells[i];
        if (!b || !t) continue;
        if (*b == 0.0) {
            if (*t == 0.0) r.cells[i].ratio = 1.0;
            else r.cells[i].undefined = true;
        } else {
            r.cells[i].ratio = *t / *b;
        }
    }
    return r;
}

struct DelimiterTerm {
    Delimiter delimiter;
    Vector term;  // p_{q,d} v_d
    double magnitude = 0.0;
};

struct TaggingDecomposition {
    std::vector<DelimiterTerm> delimiter_terms;  // causal delimiters only (d <= q)
    Vector rest;                                 // sum over non-delimiter keys
    Vector total;                                // sum over all keys, recomputed from p and v
    double partition_error = 0.0;                // max |sum(terms) + rest - total|
};

/// Splits one attention output into per-delimiter terms and the remainder.
inline TaggingDecomposition tagging_decomposition(const AttentionTrace& trace, const PromptLayout& layout, std::size_t query,
                                                  std::size_t layer, std::size_t head) {
    detail::require_consistent(trace, layout);
    if (!trace.values) fail_data("values-not-captured", "tagging decomposition needs value vectors");
    if (layer >= trace.n_layers || head >= trace.n_heads || query >= trace.seq_len)
        fail_config("index-out-of-range", "query/layer/head outside trace");
    const Matrix& p = trace.p(layer, head);
    const Matrix& v = (*trace.values)[layer][head];
    const std::size_t hd = v.cols();

    TaggingDecomposition out;
    out.rest.assign(hd, 0.0);
    out.total.assign(hd, 0.0);
    std::vector<char> is_delim(trace.seq_len, 0);
    for (const auto& d : layout.delimiters) {
        is_delim[d.index] = 1;
        if (d.index > query) continue;
        DelimiterTerm term{d, Vector(hd), 0.0};
        for (std::size_t c = 0; c < hd; ++c) term.term[c] = p(query, d.index) * v(d.index, c);
        term.magnitude = l2_norm(term.term);
        out.delimiter_terms.push_back(std::move(term));
    }
    for (std::size_t i = 0; i <= query; ++i) {
        const double w = p(query, i);
        for (std::size_t c = 0; c < hd; ++c) {
            out.total[c] += w * v(i, c);
            if (!is_delim[i]) out.rest[c] += w * v(i, c);
        }
    }
    for (std::size_t c = 0; c < hd; ++c) {
        double recomposed = out.rest[c];
        for (const auto& t : out.delimiter_terms) recomposed += t.term[c];
        out.partition_error = std::max(out.partition_error, std::abs(recomposed - out.total[c]));
    }
    return out;
}

struct AffinityReport {
    std::size_t segments = 0;
    std::vector<Delimiter> delimiters;
    std::vector<Cell> cells;                       // [segment][delimiter]
    std::vector<std::optional<std::size_t>> own;   // per segment: position in `delimiters` of the anchor
    std::vector<Cell> own_vs_other;                // own affinity / mean affinity of other causal delimiters

    bool empty() const noexcept { return delimiters.empty(); }
    Cell at(std::size_t segment, std::size_t delimiter) const { return cells.at(segment * delimiters.size() + delimiter); }
};

/// affinity[i][d]: mean p_{q,d} over content queries q of segment i with q >= d.
/// `anchor` selects which bracket counts as segment i's own delimiter.
inline AffinityReport delimiter_affinity(const AttentionTrace& trace, const PromptLayout& layout,
                                         std::span<const std::size_t> layers = {}, DelimiterRole anchor = DelimiterRole::start) {
    detail::require_consistent(trace, layout);
    const auto ls = detail::resolve_layers(trace, layers);
    const auto hs = detail::resolve_heads(trace, std::nullopt);
    const auto segs = layout.content_segments();
    AffinityReport r;
    if (layout.delimiters.empty()) return r;
    r.segments = segs.size();
    r.delimiters = layout.delimiters;
    r.cells.resize(segs.size() * r.delimiters.size());
    r.own.resize(segs.size());
    r.own_vs_other.resize(segs.size());
    for (std::size_t i = 0; i < segs.size(); ++i) {
        const auto from = detail::span_indices(segs[i]);
        for (std::size_t k = 0; k < r.delimiters.size(); ++k) {
            const std::size_t to[] = {r.delimiters[k].index};
            r.cells[i * r.delimiters.size() + k] =
                detail::average(ls, hs, [&](std::size_t l, std::size_t h) { return pair_mean(trace.p(l, h), from, to); });
            if (r.delimiters[k].segment == segs[i].id && r.delimiters[k].role == anchor) r.own[i] = k;
        }
        if (!r.own[i] || !r.at(i, *r.own[i])) continue;
        double other = 0.0;
        std::size_t n = 0;
        for (std::size_t k = 0; k < r.delimiters.size(); ++k)
            if (k != *r.own[i])
                if (const Cell c = r.at(i, k)) {
                    other += *c;
                    ++n;
                }
        if (n > 0 && other > 0.0) r.own_vs_other[i] = *r.at(i, *r.own[i]) / (other / static_cast<double>(n));
    }
    return r;
}

enum class Region { sink, segment, delimiter, text };

inline std::string_view to_string(Region r) {
    switch (r) {
        case Region::sink: return "sink";
        case Region::segment: return "segment";
        case Region::delimiter: return "delimiter";
        case Region::text: return "text";
    }
    return "segment";
}

inline std::vector<Region> region_tags(const PromptLayout& layout) {
    std::vector<Region> out(layout.size(), Region::sink);
    for (const auto& s : layout.segments)
        for (std::size_t t = s.start; t < s.end && t < out.size(); ++t) out[t] = s.kind == SegmentKind::text ? Region::text : Region::segment;
    for (const auto& d : layout.delimiters)
        if (d.index < out.size()) out[d.index] = Region::delimiter;
    return out;
}

struct EntropyProfile {
    std::vector<std::size_t> layers;
    std::vector<std::vector<double>> entropy;  // [selected layer][token], mean over heads, nats
    std::vector<Region> regions;
};

/// H(q) = -sum_{i<=q} p ln p per token, natural log, averaged over heads.
inline EntropyProfile token_entropy_series(const AttentionTrace& trace, std::span<const std::size_t> layers = {}) {
    EntropyProfile out;
    out.layers = detail::resolve_layers(trace, layers);
    out.regions = region_tags(trace.layout);
    for (std::size_t l : out.layers) {
        std::vector<double> row(trace.seq_len, 0.0);
        for (std::size_t q = 0; q < trace.seq_len; ++q) {
            double h = 0.0;
            for (std::size_t head = 0; head < trace.n_heads; ++head) h += shannon_entropy(trace.p(l, head).row(q).first(q + 1));
            row[q] = h / static_cast<double>(trace.n_heads);
        }
        out.entropy.push_back(std::move(row));
    }
    return out;
}

struct DeltaReport {
    std::size_t source_segment = 0;
    std::vector<Delimiter> delimiters;
    std::vector<Cell> delta;                 // mean (treated - base) per delimiter
    std::optional<std::size_t> own;          // index into `delimiters`
    std::vector<Cell> own_over;              // delta[own] / delta[d]

    /// Position in `delimiters` of the largest present delta.
    std::optional<std::size_t> argmax() const {
        std::optional<std::size_t> best;
        for (std::size_t k = 0; k < delta.size(); ++k)
            if (delta[k] && (!best || *delta[k] > *delta[*best])) best = k;
        return best;
    }
};

/// Per-delimiter attention increase from `base` to `treated` for content
/// queries of `source_segment`.
inline DeltaReport attention_delta(const AttentionTrace& base, const AttentionTrace& treated, const PromptLayout& layout,
                                   std::size_t source_segment, std::span<const std::size_t> layers = {},
                                   DelimiterRole anchor = DelimiterRole::start) {
    if (base.n_layers != treated.n_layers || base.n_heads != treated.n_heads || base.seq_len != treated.seq_len)
        fail_data("shape-mismatch", "base and treated traces differ in shape");
    detail::require_consistent(base, layout);
    const auto segs = layout.content_segments();
    if (source_segment >= segs.size()) fail_config("segment-out-of-range", "source segment " + std::to_string(source_segment));
    const auto ls = detail::resolve_layers(base, layers);
    const auto hs = detail::resolve_heads(base, std::nullopt);
    const auto from = detail::span_indices(segs[source_segment]);

    DeltaReport r;
    r.source_segment = source_segment;
    r.delimiters = layout.delimiters;
    for (std::size_t k = 0; k < r.delimiters.size(); ++k) {
        const std::size_t to[] = {r.delimiters[k].index};
        r.delta.push_back(detail::average(ls, hs, [&](std::size_t l, std::size_t h) -> Cell {
            const Cell t = pair_mean(treated.p(l, h), from, to), b = pair_mean(base.p(l, h), from, to);
            if (!t || !b) return std::nullopt;
            return *t - *b;
        }));
        if (r.delimiters[k].segment == source_segment && r.delimiters[k].role == anchor) r.own = k;
    }
    r.own_over.resize(r.delta.size());
    if (r.own && r.delta[*r.own])
        for (std::size_t k = 0; k < r.delta.size(); ++k)
            if (r.delta[k] && *r.delta[k] != 0.0) r.own_over[k] = *r.delta[*r.own] / *r.delta[k];
    return r;
}

struct TextInteraction {
    Cell text_to_segment;
    Cell text_to_text;
    Cell segment_to_text;
};

/// Region-class means with the same pair estimator as the interaction matrix;
/// "segment" is the union of all content spans.
inline TextInteraction text_cross_modal_interaction(const AttentionTrace& trace, const PromptLayout& layout,
                                                    std::span<const std::size_t> layers = {}) {
    detail::require_consistent(trace, layout);
    const auto text = layout.text_span();
    if (!text) fail_data("no-text-span", "layout has no text span");
    const auto ls = detail::resolve_layers(trace, layers);
    const auto hs = detail::resolve_heads(trace, std::nullopt);
    const auto text_idx = detail::span_indices(*text);
    std::vector<std::size_t> content_idx;
    for (const auto& s : layout.content_segments())
        for (std::size_t t = s.start; t < s.end; ++t) content_idx.push_back(t);

    auto mean = [&](const std::vector<std::size_t>& from, const std::vector<std::size_t>& to) -> Cell {
        if (from.empty() || to.empty()) return std::nullopt;
        return detail::average(ls, hs, [&](std::size_t l, std::size_t h) { return pair_mean(trace.p(l, h), from, to); });
    };
    return {mean(text_idx, content_idx), mean(text_idx, text_idx), mean(content_idx, text_idx)};
}

/// contribution[d]: mean of ||p_{q,d} v_d|| over content queries of `target_segment`, q >= d.
inline std::vector<Cell> delimiter_contribution(const AttentionTrace& trace, const PromptLayout& layout, std::size_t target_segment,
                                                std::span<const std::size_t> layers = {}) {
    detail::require_consistent(trace, layout);
    if (!trace.values) fail_data("values-not-captured", "delimiter contribution needs value vectors");
    const auto segs = layout.content_segments();
    if (target_segment >= segs.size()) fail_config("segment-out-of-range", "target segment " + std::to_string(target_segment));
    const auto ls = detail::resolve_layers(trace, layers);
    const auto hs = detail::resolve_heads(trace, std::nullopt);
    const auto& seg = segs[target_segment];
    std::vector<Cell> out;
    for (const auto& d : layout.delimiters) {
        out.push_back(detail::average(ls, hs, [&](std::size_t l, std::size_t h) -> Cell {
            const Matrix& p = trace.p(l, h);
            const double v_norm = l2_norm((*trace.values)[l][h].row(d.index));
            double sum = 0.0;
            std::size_t n = 0;
            for (std::size_t q = std::max(seg.start, d.index); q < seg.end; ++q) {
                sum += p(q, d.index) * v_norm;
                ++n;
            }
            if (n == 0) return std::nullopt;
            return sum / static_cast<double>(n);
        }));
    }
    return out;
}

// JSON renderings (reports consume these).

inline nlohmann::json cell_json(const Cell& c) { return c ? nlohmann::json(*c) : nlohmann::json(nullptr); }

inline nlohmann::json to_json(const InteractionMatrix& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t a = 0; a < m.segments; ++a) {
        nlohmann::json row = nlohmann::json::array();
        for (std::size_t b = 0; b < m.segments; ++b) row.push_back(cell_json(m.at(a, b)));
        rows.push_back(row);
    }
    return {{"layers", m.layers},
            {"aggregation", m.head ? "per-head" : "mean-over-heads"},
            {"head", m.head ? nlohmann::json(*m.head) : nlohmann::json(nullptr)},
            {"matrix", rows},
            {"mean_cross", cell_json(m.mean_cross())},
            {"mean_intra", cell_json(m.mean_intra())}};
}

inline nlohmann::json to_json(const ChangeReport& r) {
    nlohmann::json rows = nlohmann::json::array(), flags = nlohmann::json::array();
    for (std::size_t a = 0; a < r.segments; ++a) {
        nlohmann::json row = nlohmann::json::array();
        for (std::size_t b = 0; b < r.segments; ++b) {
            const auto& c = r.at(a, b);
            row.push_back(cell_json(c.ratio));
            if (c.undefined) flags.push_back({{"from", a}, {"to", b}, {"flag", "undefined-ratio"}});
        }
        rows.push_back(row);
    }
    return {{"ratios", rows},
            {"flags", flags},
            {"max_cross", cell_json(r.max_ratio(false))},
            {"min_intra", cell_json(r.min_ratio(true))},
            {"max_intra", cell_json(r.max_ratio(true))}};
}

inline nlohmann::json delimiter_json(const Delimiter& d) {
    return {{"index", d.index}, {"role", to_string(d.role)}, {"segment", d.segment}};
}

inline nlohmann::json to_json(const AffinityReport& r) {
    nlohmann::json segs = nlohmann::json::array();
    for (std::size_t i = 0; i < r.segments; ++i) {
        nlohmann::json cells = nlohmann::json::array();
        for (std::size_t k = 0; k < r.delimiters.size(); ++k) cells.push_back(cell_json(r.at(i, k)));
        segs.push_back({{"segment", i},
                        {"affinity", cells},
                        {"own_delimiter", r.own[i] ? nlohmann::json(r.delimiters[*r.own[i]].index) : nlohmann::json(nullptr)},
                        {"own_vs_other", cell_json(r.own_vs_other[i])}});
    }
    nlohmann::json delims = nlohmann::json::array();
    for (const auto& d : r.delimiters) delims.push_back(delimiter_json(d));
    return {{"delimiters", delims}, {"segments", segs}, {"empty", r.empty()}};
}

inline nlohmann::json to_json(const EntropyProfile& e) {
    nlohmann::json regions = nlohmann::json::array();
    for (auto r : e.regions) regions.push_back(to_string(r));
    nlohmann::json per_layer = nlohmann::json::array();
    for (std::size_t i = 0; i < e.layers.size(); ++i) per_layer.push_back({{"layer", e.layers[i]}, {"entropy", e.entropy[i]}});
    return {{"regions", regions}, {"layers", per_layer}, {"log_base", "e"}};
}

inline nlohmann::json to_json(const DeltaReport& r) {
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t k = 0; k < r.delimiters.size(); ++k)
        rows.push_back({{"delimiter", delimiter_json(r.delimiters[k])}, {"delta", cell_json(r.delta[k])}, {"own_over", cell_json(r.own_over[k])}});
    const auto top = r.argmax();
    return {{"source_segment", r.source_segment},
            {"deltas", rows},
            {"own_delimiter", r.own ? nlohmann::json(r.delimiters[*r.own].index) : nlohmann::json(nullptr)},
            {"largest_delimiter", top ? nlohmann::json(r.delimiters[*top].index) : nlohmann::json(nullptr)}};
}

inline nlohmann::json to_json(const TextInteraction& t) {
    return {{"text_to_segment", cell_json(t.text_to_segment)},
            {"text_to_text", cell_json(t.text_to_text)},
            {"segment_to_text", cell_json(t.segment_to_text)}};
}

}  // namespace delimlab
