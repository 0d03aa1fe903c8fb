// Copyright (C) 2026 delimlab contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "delimlab/error.hpp"

namespace delimlab {

using TokenId = std::uint32_t;

enum class SegmentKind { image, document, table, text };
enum class DelimiterRole { start, end };
enum class LayoutPolicy { paired, removed, replaced };

struct SegmentSpan {
    std::size_t id = 0;
    SegmentKind kind = SegmentKind::image;
    std::size_t start = 0;  // inclusive
    std::size_t end = 0;    // exclusive

    std::size_t size() const noexcept { return end > start ? end - start : 0; }
    bool contains(std::size_t i) const noexcept { return i >= start && i < end; }
    friend bool operator==(const SegmentSpan&, const SegmentSpan&) = default;
};

struct Delimiter {
    std::size_t index = 0;
    DelimiterRole role = DelimiterRole::start;
    std::size_t segment = 0;
    friend bool operator==(const Delimiter&, const Delimiter&) = default;
};

/// Recipe for build_layout.
///
/// Token ids: content segment i uses `content_token + i` for every token,
/// text uses `text_token`. With `indexed_delimiters` the start/end brackets of
/// segment i get `delimiter_token + 2i` / `delimiter_token + 2i + 1` (numbered
/// image markers); otherwise every bracket is `delimiter_token`.
struct LayoutRecipe {
    std::vector<std::size_t> segment_sizes;
    std::size_t text_len = 0;
    LayoutPolicy policy = LayoutPolicy::paired;
    SegmentKind kind = SegmentKind::image;
    TokenId delimiter_token = 1;
    std::optional<TokenId> replacement_token;
    bool indexed_delimiters = false;
    std::optional<TokenId> bos_token;  // leading sink token at index 0
    TokenId content_token = 16;
    TokenId text_token = 2;
};

/// Token sequence with content spans, delimiter set D, and the layout variant.
/// Built by build_layout; construct by hand only for tests of validate().
struct PromptLayout {
    std::vector<TokenId> tokens;
    std::vector<SegmentSpan> segments;  // content spans in order, then the text span if any
    std::vector<Delimiter> delimiters;  // D, strictly increasing by index
    LayoutPolicy policy = LayoutPolicy::paired;
    std::optional<TokenId> replacement_token;
    std::size_t first_token = 0;  // sink position

    std::size_t size() const noexcept { return tokens.size(); }

    std::vector<SegmentSpan> content_segments() const {
        std::vector<SegmentSpan> out;
        for (const auto& s : segments)
            if (s.kind != SegmentKind::text) out.push_back(s);
        return out;
    }

    std::optional<SegmentSpan> text_span() const {
        for (const auto& s : segments)
            if (s.kind == SegmentKind::text) return s;
        return std::nullopt;
    }

    std::vector<std::size_t> delimiter_indices() const {
        std::vector<std::size_t> out;
        out.reserve(delimiters.size());
        for (const auto& d : delimiters) out.push_back(d.index);
        return out;
    }

    bool is_delimiter(std::size_t i) const noexcept {
        return std::any_of(delimiters.begin(), delimiters.end(), [i](const Delimiter& d) { return d.index == i; });
    }

    std::optional<std::size_t> delimiter_for(std::size_t segment, DelimiterRole role) const {
        for (const auto& d : delimiters)
            if (d.segment == segment && d.role == role) return d.index;
        return std::nullopt;
    }

    friend bool operator==(const PromptLayout&, const PromptLayout&) = default;
};

inline std::string_view to_string(SegmentKind k) {
    switch (k) {
        case SegmentKind::image: return "image";
        case SegmentKind::document: return "document";
        case SegmentKind::table: return "table";
        case SegmentKind::text: return "text";
    }
    return "image";
}

inline std::string_view to_string(DelimiterRole r) { return r == DelimiterRole::start ? "start" : "end"; }

inline std::string_view to_string(LayoutPolicy p) {
    switch (p) {
        case LayoutPolicy::paired: return "paired";
        case LayoutPolicy::removed: return "removed";
        case LayoutPolicy::replaced: return "replaced";
    }
    return "paired";
}

inline SegmentKind parse_segment_kind(std::string_view s) {
    if (s == "image") return SegmentKind::image;
    if (s == "document") return SegmentKind::document;
    if (s == "table") return SegmentKind::table;
    if (s == "text") return SegmentKind::text;
    fail_config("unknown-segment-kind", std::string(s));
}

inline DelimiterRole parse_delimiter_role(std::string_view s) {
    if (s == "start") return DelimiterRole::start;
    if (s == "end") return DelimiterRole::end;
    fail_config("unknown-delimiter-role", std::string(s));
}

inline LayoutPolicy parse_layout_policy(std::string_view s) {
    if (s == "paired") return LayoutPolicy::paired;
    if (s == "removed") return LayoutPolicy::removed;
    if (s == "replaced") return LayoutPolicy::replaced;
    fail_config("unknown-layout-policy", std::string(s));
}

/// Paired:   [bos?] d seg0 d d seg1 d ... text
/// Removed:  [bos?] seg0 seg1 ... text, D empty
/// Replaced: paired positions, bracket tokens swapped for the replacement id;
///           D still records the positions.
inline PromptLayout build_layout(const LayoutRecipe& recipe) {
    if (recipe.segment_sizes.empty() && recipe.text_len == 0 && !recipe.bos_token)
        fail_config("empty-layout", "layout has no tokens");
    for (std::size_t i = 0; i < recipe.segment_sizes.size(); ++i)
        if (recipe.segment_sizes[i] == 0) fail_config("zero-length-segment", "segment " + std::to_string(i));
    const bool replaced = recipe.policy == LayoutPolicy::replaced;
    if (replaced && !recipe.replacement_token)
        fail_config("missing-replacement-token", "policy=replaced needs a replacement token");
    if (!replaced && recipe.replacement_token)
        fail_config("unexpected-replacement-token", "replacement token only valid with policy=replaced");

    PromptLayout out;
    out.policy = recipe.policy;
    out.replacement_token = recipe.replacement_token;
    const bool bracketed = recipe.policy != LayoutPolicy::removed;

    auto bracket_token = [&](std::size_t seg, DelimiterRole role) -> TokenId {
        if (replaced) return *recipe.replacement_token;
        if (!recipe.indexed_delimiters) return recipe.delimiter_token;
        return recipe.delimiter_token + static_cast<TokenId>(2 * seg + (role == DelimiterRole::end ? 1 : 0));
    };

    if (recipe.bos_token) out.tokens.push_back(*recipe.bos_token);
    for (std::size_t seg = 0; seg < recipe.segment_sizes.size(); ++seg) {
        if (bracketed) {
            out.delimiters.push_back({out.tokens.size(), DelimiterRole::start, seg});
            out.tokens.push_back(bracket_token(seg, DelimiterRole::start));
        }
        const std::size_t start = out.tokens.size();
        out.tokens.insert(out.tokens.end(), recipe.segment_sizes[seg], recipe.content_token + static_cast<TokenId>(seg));
        out.segments.push_back({seg, recipe.kind, start, out.tokens.size()});
        if (bracketed) {
            out.delimiters.push_back({out.tokens.size(), DelimiterRole::end, seg});
            out.tokens.push_back(bracket_token(seg, DelimiterRole::end));
        }
    }
    if (recipe.text_len > 0) {
        const std::size_t start = out.tokens.size();
        out.tokens.insert(out.tokens.end(), recipe.text_len, recipe.text_token);
        out.segments.push_back({recipe.segment_sizes.size(), SegmentKind::text, start, out.tokens.size()});
    }
    return out;
}

struct LayoutViolation {
    std::string code;
    std::size_t index = 0;  // token index or span id, per code
    std::string detail;
};

/// Every invariant breach, with index evidence. Empty means the layout is valid.
inline std::vector<LayoutViolation> validate(const PromptLayout& layout) {
    std::vector<LayoutViolation> out;
    const std::size_t n = layout.tokens.size();
    auto add = [&](std::string code, std::size_t index, std::string detail) {
        out.push_back({std::move(code), index, std::move(detail)});
    };

    std::size_t content_ord = 0;
    for (std::size_t s = 0; s < layout.segments.size(); ++s) {
        const auto& span = layout.segments[s];
        if (span.start >= span.end) add("empty-span", span.id, "span [" + std::to_string(span.start) + "," + std::to_string(span.end) + ")");
        if (span.end > n) add("index-out-of-range", span.end, "span " + std::to_string(span.id) + " ends past sequence");
        if (span.kind != SegmentKind::text) {
            if (span.id != content_ord) add("segment-id", span.id, "expected ordinal " + std::to_string(content_ord));
            ++content_ord;
        }
        if (s > 0) {
            const auto& prev = layout.segments[s - 1];
            if (span.start < prev.end) add("span-overlap", span.start, "spans " + std::to_string(prev.id) + " and " + std::to_string(span.id));
        }
    }
    for (std::size_t s = 0; s + 1 < layout.segments.size(); ++s)
        if (layout.segments[s].kind == SegmentKind::text)
            add("text-not-last", layout.segments[s].start, "text span must follow all content spans");

    for (std::size_t k = 0; k < layout.delimiters.size(); ++k) {
        const auto& d = layout.delimiters[k];
        if (d.index >= n) add("delimiter-out-of-range", d.index, "sequence length " + std::to_string(n));
        if (k > 0 && d.index <= layout.delimiters[k - 1].index) add("delimiter-order", d.index, "D must be strictly increasing");
        for (const auto& span : layout.segments)
            if (span.contains(d.index)) add("delimiter-in-segment", d.index, "inside span " + std::to_string(span.id));
    }

    const auto content = layout.content_segments();
    if (layout.policy == LayoutPolicy::removed) {
        if (!layout.delimiters.empty()) add("removed-has-delimiters", layout.delimiters.front().index, "policy=removed requires empty D");
    } else {
        for (const auto& span : content) {
            std::size_t starts = 0, ends = 0;
            for (const auto& d : layout.delimiters) {
                if (d.segment != span.id) continue;
                if (d.role == DelimiterRole::start) {
                    ++starts;
                    if (d.index >= span.start) add("delimiter-role", d.index, "start delimiter after its content");
                } else {
                    ++ends;
                    if (d.index < span.end) add("delimiter-role", d.index, "end delimiter before its content");
                }
            }
            if (starts != 1 || ends != 1)
                add("delimiter-pairing", span.start, "segment " + std::to_string(span.id) + " has " + std::to_string(starts) +
                                                         " start / " + std::to_string(ends) + " end delimiters");
        }
        for (const auto& d : layout.delimiters)
            if (d.segment >= content.size()) add("delimiter-segment", d.index, "delimiter names unknown segment " + std::to_string(d.segment));
    }
    if (layout.policy == LayoutPolicy::replaced) {
        if (!layout.replacement_token) {
            add("missing-replacement-token", 0, "policy=replaced without replacement token");
        } else {
            for (const auto& d : layout.delimiters)
                if (d.index < n && layout.tokens[d.index] != *layout.replacement_token)
                    add("replacement-token-mismatch", d.index, "token differs from replacement id");
        }
    }
    if (layout.first_token != 0) add("first-token", layout.first_token, "sink position must be index 0");
    return out;
}

inline void require_valid(const PromptLayout& layout) {
    const auto violations = validate(layout);
    if (!violations.empty())
        fail_data(violations.front().code, "invalid layout at " + std::to_string(violations.front().index) + ": " + violations.front().detail);
}

// JSON form, embedded in trace metadata and reports.

inline nlohmann::json to_json(const PromptLayout& layout) {
    nlohmann::json segs = nlohmann::json::array();
    for (const auto& s : layout.segments)
        segs.push_back({{"id", s.id}, {"kind", to_string(s.kind)}, {"start", s.start}, {"end", s.end}});
    nlohmann::json delims = nlohmann::json::array();
    for (const auto& d : layout.delimiters)
        delims.push_back({{"index", d.index}, {"role", to_string(d.role)}, {"segment", d.segment}});
    nlohmann::json j = {
        {"tokens", layout.tokens},
        {"segments", segs},
        {"delimiters", delims},
        {"variant", to_string(layout.policy)},
        {"first_token", layout.first_token},
    };
    j["replacement_token"] = layout.replacement_token ? nlohmann::json(*layout.replacement_token) : nlohmann::json(nullptr);
    return j;
}

inline PromptLayout layout_from_json(const nlohmann::json& j) {
    try {
        PromptLayout out;
        out.tokens = j.at("tokens").get<std::vector<TokenId>>();
        for (const auto& s : j.at("segments"))
            out.segments.push_back({s.at("id").get<std::size_t>(), parse_segment_kind(s.at("kind").get<std::string>()),
                                    s.at("start").get<std::size_t>(), s.at("end").get<std::size_t>()});
        for (const auto& d : j.at("delimiters"))
            out.delimiters.push_back({d.at("index").get<std::size_t>(), parse_delimiter_role(d.at("role").get<std::string>()),
                                      d.at("segment").get<std::size_t>()});
        out.policy = parse_layout_policy(j.at("variant").get<std::string>());
        if (j.contains("replacement_token") && !j["replacement_token"].is_null())
            out.replacement_token = j["replacement_token"].get<TokenId>();
        out.first_token = j.value("first_token", std::size_t{0});
        return out;
    } catch (const nlohmann::json::exception& e) {
        fail_data("bad-layout-json", e.what());
    }
}

}  // namespace delimlab
