// Copyright (C) 2026 delimlab contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "delimlab/analysis.hpp"
#include "delimlab/error.hpp"
#include "delimlab/intervention.hpp"
#include "delimlab/layout.hpp"
#include "delimlab/model.hpp"
#include "delimlab/scenario.hpp"
#include "delimlab/trace.hpp"
#include "delimlab/trace_io.hpp"

namespace delimlab {

inline constexpr int kReportVersion = 1;

struct AnalysisOptions {
    std::vector<std::size_t> layers;  // empty: all layers (scenario preset: its measurement layer)
    DelimiterRole anchor = DelimiterRole::start;
    std::optional<std::size_t> source_segment;  // attention_delta source; default last segment
};

struct AblationGrid {
    std::vector<ScalingMode> modes{ScalingMode::hidden};
    std::vector<double> lambdas{1.0};
    std::vector<std::vector<std::size_t>> layer_sets{{}};
    std::vector<LayoutPolicy> policies{LayoutPolicy::paired};
    std::vector<double> position_offsets{0.0};

    std::size_t size() const {
        return modes.size() * lambdas.size() * layer_sets.size() * policies.size() * position_offsets.size();
    }
};

/// Canonical experiment description. Either a seeded model or a preset.
struct ExperimentConfig {
    std::optional<std::string> preset;
    ModelConfig model;
    LayoutRecipe layout;
    std::optional<InterventionSpec> intervention;
    CaptureFlags capture{true, true, true, false};
    AnalysisOptions analysis;
    std::string output = "delimlab-out";
    std::optional<AblationGrid> grid;
};

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const std::string& where) {
    if (!j.is_object()) fail_config("schema", where + " must be an object");
    for (const auto& [key, _] : j.items())
        if (!known.count(key)) fail_config("unknown-key", where.empty() ? key : where + "." + key);
}

inline LayoutRecipe recipe_from_json(const nlohmann::json& j, LayoutRecipe r) {
    reject_unknown(j, {"segments", "text_len", "policy", "kind", "delimiter_token", "replacement_token", "indexed_delimiters", "bos_token",
                       "content_token", "text_token"},
                   "layout");
    if (j.contains("segments")) r.segment_sizes = j["segments"].get<std::vector<std::size_t>>();
    r.text_len = j.value("text_len", r.text_len);
    if (j.contains("policy")) r.policy = parse_layout_policy(j["policy"].get<std::string>());
    if (j.contains("kind")) r.kind = parse_segment_kind(j["kind"].get<std::string>());
    r.delimiter_token = j.value("delimiter_token", r.delimiter_token);
    if (j.contains("replacement_token"))
        r.replacement_token = j["replacement_token"].is_null() ? std::nullopt : std::optional<TokenId>(j["replacement_token"].get<TokenId>());
    r.indexed_delimiters = j.value("indexed_delimiters", r.indexed_delimiters);
    if (j.contains("bos_token"))
        r.bos_token = j["bos_token"].is_null() ? std::nullopt : std::optional<TokenId>(j["bos_token"].get<TokenId>());
    r.content_token = j.value("content_token", r.content_token);
    r.text_token = j.value("text_token", r.text_token);
    return r;
}

inline nlohmann::json recipe_to_json(const LayoutRecipe& r) {
    return {{"segments", r.segment_sizes},
            {"text_len", r.text_len},
            {"policy", to_string(r.policy)},
            {"kind", to_string(r.kind)},
            {"delimiter_token", r.delimiter_token},
            {"replacement_token", r.replacement_token ? nlohmann::json(*r.replacement_token) : nlohmann::json(nullptr)},
            {"indexed_delimiters", r.indexed_delimiters},
            {"bos_token", r.bos_token ? nlohmann::json(*r.bos_token) : nlohmann::json(nullptr)},
            {"content_token", r.content_token},
            {"text_token", r.text_token}};
}

inline std::vector<std::string> capture_names(const CaptureFlags& c) {
    std::vector<std::string> out;
    if (c.attention) out.push_back("attn");
    if (c.values) out.push_back("values");
    if (c.hidden) out.push_back("hidden");
    if (c.projections) out.push_back("proj");
    return out;
}

template <class T, class Parse>
std::vector<T> parse_list(const nlohmann::json& j, Parse&& parse) {
    if (!j.is_array() || j.empty()) fail_config("schema", "grid axes must be non-empty arrays");
    std::vector<T> out;
    for (const auto& v : j) out.push_back(parse(v));
    return out;
}

}  // namespace detail

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const std::string text = j.dump(2) + "\n";
    detail::write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline Scenario scenario_by_name(const std::string& name) {
    if (name == "three-segment") return three_segment_scenario();
    fail_config("unknown-preset", name);
}

/// Strict parse; validates everything that can be checked before compute.
inline ExperimentConfig experiment_from_json(const nlohmann::json& j) {
    detail::reject_unknown(j, {"preset", "model", "layout", "intervention", "capture", "analysis", "output", "grid"}, "");
    try {
        ExperimentConfig c;
        if (j.contains("preset")) {
            c.preset = j["preset"].get<std::string>();
            const Scenario s = scenario_by_name(*c.preset);
            if (j.contains("model")) fail_config("schema", "model and preset are mutually exclusive");
            c.model = s.weights.config;
            c.layout = s.recipe;
            if (j.contains("layout")) {
                c.layout = detail::recipe_from_json(j["layout"], c.layout);
                if (c.layout.policy == LayoutPolicy::replaced && !c.layout.replacement_token) c.layout.replacement_token = s.replacement_token;
            }
            c.analysis.layers = {s.measurement_layer};
        } else {
            c.model = model_config_from_json(j.value("model", nlohmann::json::object()));
            c.layout = detail::recipe_from_json(j.value("layout", nlohmann::json::object()), LayoutRecipe{});
        }
        if (j.contains("intervention") && !j["intervention"].is_null()) c.intervention = intervention_from_json(j["intervention"]);
        if (j.contains("capture")) {
            std::string joined;
            for (const auto& item : j["capture"]) joined += item.get<std::string>() + ",";
            c.capture = parse_capture(joined);
        }
        if (j.contains("analysis")) {
            const auto& a = j["analysis"];
            detail::reject_unknown(a, {"layers", "anchor", "source_segment"}, "analysis");
            if (a.contains("layers")) c.analysis.layers = a["layers"].get<std::vector<std::size_t>>();
            if (a.contains("anchor")) c.analysis.anchor = parse_delimiter_role(a["anchor"].get<std::string>());
            if (a.contains("source_segment") && !a["source_segment"].is_null()) c.analysis.source_segment = a["source_segment"].get<std::size_t>();
        }
        c.output = j.value("output", c.output);
        if (j.contains("grid")) {
            const auto& g = j["grid"];
            detail::reject_unknown(g, {"mode", "lambda", "layers", "policy", "position_offset"}, "grid");
            AblationGrid grid;
            if (g.contains("mode")) grid.modes = detail::parse_list<ScalingMode>(g["mode"], [](const auto& v) { return parse_scaling_mode(v.template get<std::string>()); });
            if (g.contains("lambda")) grid.lambdas = detail::parse_list<double>(g["lambda"], [](const auto& v) { return v.template get<double>(); });
            if (g.contains("layers"))
                grid.layer_sets = detail::parse_list<std::vector<std::size_t>>(g["layers"], [](const auto& v) { return v.template get<std::vector<std::size_t>>(); });
            if (g.contains("policy")) grid.policies = detail::parse_list<LayoutPolicy>(g["policy"], [](const auto& v) { return parse_layout_policy(v.template get<std::string>()); });
            if (g.contains("position_offset"))
                grid.position_offsets = detail::parse_list<double>(g["position_offset"], [](const auto& v) { return v.template get<double>(); });
            c.grid = std::move(grid);
        }
        c.model.validate();
        for (std::size_t l : c.analysis.layers)
            if (l >= c.model.n_layers) fail_config("layer-out-of-range", "analysis layer " + std::to_string(l));
        if (c.intervention)
            for (std::size_t l : c.intervention->layers)
                if (l >= c.model.n_layers) fail_config("layer-out-of-range", "intervention layer " + std::to_string(l));
        const auto layout = build_layout(c.layout);  // surfaces recipe errors before compute
        for (TokenId t : layout.tokens)
            if (t >= c.model.vocab) fail_config("token-out-of-range", "token " + std::to_string(t) + " >= vocab " + std::to_string(c.model.vocab));
        if (c.analysis.source_segment && *c.analysis.source_segment >= c.layout.segment_sizes.size())
            fail_config("segment-out-of-range", "analysis.source_segment");
        return c;
    } catch (const nlohmann::json::exception& e) {
        fail_config("schema", e.what());
    }
}

inline ExperimentConfig load_experiment(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) fail_config("missing-config", path.string());
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        fail_config("config-parse", path.string() + ": byte " + std::to_string(e.byte) + ": " + e.what());
    }
    return experiment_from_json(j);
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
    nlohmann::json j;
    if (c.preset) j["preset"] = *c.preset;
    else j["model"] = to_json(c.model);
    j["layout"] = detail::recipe_to_json(c.layout);
    j["intervention"] = c.intervention ? to_json(*c.intervention) : nlohmann::json(nullptr);
    j["capture"] = detail::capture_names(c.capture);
    j["analysis"] = {{"layers", c.analysis.layers},
                     {"anchor", to_string(c.analysis.anchor)},
                     {"source_segment", c.analysis.source_segment ? nlohmann::json(*c.analysis.source_segment) : nlohmann::json(nullptr)}};
    j["output"] = c.output;
    return j;
}

inline Weights weights_for(const ExperimentConfig& c) {
    return c.preset ? scenario_by_name(*c.preset).weights : init_weights(c.model);
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

/// Regenerable descriptor for seeded weights: config plus checksum.
inline nlohmann::json weights_descriptor(const Weights& w) {
    return {{"model", to_json(w.config)},
            {"generator", "splitmix64+box-muller"},
            {"scale", "1/sqrt(d_model)"},
            {"draw_order", "embedding, then per layer wq wk wv wo w_up w_down, row-major"},
            {"checksum_fnv1a64", hex64(weights_checksum(w))}};
}

/// Single-trace diagnostics at the chosen layers.
inline nlohmann::json trace_summary(const AttentionTrace& trace, const AnalysisOptions& opts) {
    const auto& layout = trace.layout;
    nlohmann::json j;
    j["interaction"] = to_json(segment_interaction_matrix(trace, layout, opts.layers));
    nlohmann::json per_layer = nlohmann::json::array();
    for (std::size_t l = 0; l < trace.n_layers; ++l) {
        const std::size_t one[] = {l};
        per_layer.push_back(to_json(segment_interaction_matrix(trace, layout, one)));
    }
    j["interaction_per_layer"] = per_layer;
    j["affinity"] = to_json(delimiter_affinity(trace, layout, opts.layers, opts.anchor));
    j["entropy"] = to_json(token_entropy_series(trace, opts.layers));
    j["text"] = layout.text_span() ? to_json(text_cross_modal_interaction(trace, layout, opts.layers)) : nlohmann::json(nullptr);
    if (trace.values) {
        nlohmann::json contrib = nlohmann::json::array();
        const auto segs = layout.content_segments();
        for (std::size_t i = 0; i < segs.size(); ++i) {
            nlohmann::json cells = nlohmann::json::array();
            for (const auto& c : delimiter_contribution(trace, layout, i, opts.layers)) cells.push_back(cell_json(c));
            contrib.push_back({{"segment", i}, {"contribution", cells}});
        }
        double worst = 0.0;
        const auto ls = detail::resolve_layers(trace, opts.layers);
        for (std::size_t l : ls)
            for (std::size_t h = 0; h < trace.n_heads; ++h)
                for (std::size_t q = 0; q < trace.seq_len; ++q)
                    worst = std::max(worst, tagging_decomposition(trace, layout, q, l, h).partition_error);
        j["decomposition"] = {{"max_partition_error", worst}, {"delimiter_contribution", contrib}};
    } else {
        j["decomposition"] = nullptr;
    }
    return j;
}

/// Baseline-vs-treated comparison at the chosen layers.
inline nlohmann::json change_summary(const AttentionTrace& base, const AttentionTrace& treated, const AnalysisOptions& opts) {
    const auto& layout = base.layout;
    if (!(layout == treated.layout)) fail_data("layout-mismatch", "base and treated traces have different layouts");
    nlohmann::json j;
    j["interaction"] = to_json(interaction_change_report(segment_interaction_matrix(base, layout, opts.layers),
                                                         segment_interaction_matrix(treated, layout, opts.layers)));
    if (layout.text_span()) {
        const auto b = text_cross_modal_interaction(base, layout, opts.layers);
        const auto t = text_cross_modal_interaction(treated, layout, opts.layers);
        auto ratio = [](const Cell& x, const Cell& y) -> Cell {
            if (!x || !y || *x == 0.0) return std::nullopt;
            return *y / *x;
        };
        j["text"] = {{"text_to_segment_ratio", cell_json(ratio(b.text_to_segment, t.text_to_segment))},
                     {"text_to_text_ratio", cell_json(ratio(b.text_to_text, t.text_to_text))}};
    } else {
        j["text"] = nullptr;
    }
    const auto segs = layout.content_segments();
    if (!segs.empty() && !layout.delimiters.empty()) {
        const std::size_t src = opts.source_segment.value_or(segs.size() - 1);
        j["attention_delta"] = to_json(attention_delta(base, treated, layout, src, opts.layers, opts.anchor));
    } else {
        j["attention_delta"] = nullptr;
    }
    return j;
}

struct RunResult {
    AttentionTrace baseline;
    std::optional<AttentionTrace> treated;
    nlohmann::json report;
};

/// The `run` pipeline: baseline pass, optional treated pass, report.
inline RunResult run_experiment(const ExperimentConfig& c, const ForwardOptions& options = {}) {
    const Weights w = weights_for(c);
    const PromptLayout layout = build_layout(c.layout);
    require_valid(layout);
    CaptureFlags capture = c.capture;
    capture.attention = true;  // reports need attention

    RunResult r;
    r.baseline = make_trace(forward(w, layout, std::nullopt, capture, options), layout, w.config);
    nlohmann::json report = {{"schema", "delimlab-report"}, {"version", kReportVersion}, {"command", "run"}, {"config", to_json(c)}};
    report["baseline"] = trace_summary(r.baseline, c.analysis);
    if (c.intervention) {
        r.treated = make_trace(forward(w, layout, c.intervention, capture, options), layout, w.config, c.intervention);
        report["treated"] = trace_summary(*r.treated, c.analysis);
        report["change"] = change_summary(r.baseline, *r.treated, c.analysis);
        nlohmann::json flags = nlohmann::json::array();
        if (c.intervention->is_degradation()) flags.push_back("degradation-ablation");
        report["flags"] = flags;
    } else {
        report["treated"] = nullptr;
        report["change"] = nullptr;
        report["flags"] = nlohmann::json::array();
    }
    r.report = std::move(report);
    return r;
}

/// Runs, writes baseline/ and treated/ containers plus report.json under
/// `out`, and returns the report with trace checksums filled in.
inline nlohmann::json execute_run(const ExperimentConfig& c, const std::filesystem::path& out, const ForwardOptions& options = {}) {
    RunResult r = run_experiment(c, options);
    std::filesystem::create_directories(out);
    write_trace(r.baseline, out / "baseline");
    nlohmann::json checksums = {{"baseline", hex64(trace_checksum(out / "baseline"))}};
    if (r.treated) {
        write_trace(*r.treated, out / "treated");
        checksums["treated"] = hex64(trace_checksum(out / "treated"));
    }
    r.report["trace_checksums"] = checksums;
    write_json(out / "report.json", r.report);
    return r.report;
}

inline nlohmann::json to_json(const TraceValidationReport& r) {
    nlohmann::json v = nlohmann::json::array();
    for (const auto& x : r.violations) v.push_back({{"code", x.code}, {"location", x.location}, {"detail", x.detail}});
    return {{"ok", r.ok()},
            {"layers_checked", r.layers_checked},
            {"peak_resident_bytes", r.peak_resident_bytes},
            {"max_layer_bytes", r.max_layer_bytes},
            {"violations", v}};
}

namespace detail {

inline nlohmann::json ablation_metrics(const AttentionTrace& t, const AnalysisOptions& opts) {
    const auto m = segment_interaction_matrix(t, t.layout, opts.layers);
    const auto aff = delimiter_affinity(t, t.layout, opts.layers, opts.anchor);
    double own = 0.0;
    std::size_t n_own = 0;
    for (std::size_t i = 0; i < aff.segments; ++i)
        if (aff.own[i])
            if (const Cell c = aff.at(i, *aff.own[i])) {
                own += *c;
                ++n_own;
            }
    const auto ent = token_entropy_series(t, opts.layers);
    double content_entropy = 0.0;
    std::size_t n_ent = 0;
    for (const auto& row : ent.entropy)
        for (std::size_t q = 0; q < row.size(); ++q)
            if (ent.regions[q] == Region::segment) {
                content_entropy += row[q];
                ++n_ent;
            }
    nlohmann::json j = {{"mean_cross", cell_json(m.mean_cross())},
                        {"mean_intra", cell_json(m.mean_intra())},
                        {"affinity_empty", aff.empty()},
                        {"own_affinity", n_own ? nlohmann::json(own / static_cast<double>(n_own)) : nlohmann::json(nullptr)},
                        {"content_entropy", n_ent ? nlohmann::json(content_entropy / static_cast<double>(n_ent)) : nlohmann::json(nullptr)}};
    j["text_to_segment"] = t.layout.text_span() ? cell_json(text_cross_modal_interaction(t, t.layout, opts.layers).text_to_segment)
                                                : nlohmann::json(nullptr);
    return j;
}

inline nlohmann::json ratio_json(const nlohmann::json& value, const nlohmann::json& base) {
    if (!value.is_number() || !base.is_number() || base.get<double>() == 0.0) return nullptr;
    return value.get<double>() / base.get<double>();
}

}  // namespace detail

/// The `ablate` pipeline: every grid cell against the paired, un-intervened baseline.
inline nlohmann::json run_ablation(const ExperimentConfig& c, const ForwardOptions& options = {}) {
    if (!c.grid || c.grid->size() == 0) fail_config("empty-grid", "ablate needs a non-empty grid");
    const Weights w = weights_for(c);
    CaptureFlags capture = CaptureFlags::none();
    capture.attention = true;

    LayoutRecipe paired = c.layout;
    paired.policy = LayoutPolicy::paired;
    paired.replacement_token.reset();
    const PromptLayout base_layout = build_layout(paired);
    const auto base_trace = make_trace(forward(w, base_layout, std::nullopt, capture, options), base_layout, w.config);
    const auto base = detail::ablation_metrics(base_trace, c.analysis);

    const std::optional<TokenId> replacement =
        c.layout.replacement_token ? c.layout.replacement_token
        : c.preset                 ? std::optional<TokenId>(scenario_by_name(*c.preset).replacement_token)
                                   : std::nullopt;

    nlohmann::json rows = nlohmann::json::array();
    for (auto mode : c.grid->modes)
        for (double lambda : c.grid->lambdas)
            for (const auto& layers : c.grid->layer_sets)
                for (auto policy : c.grid->policies)
                    for (double offset : c.grid->position_offsets) {
                        nlohmann::json row = {{"mode", to_string(mode)},
                                              {"lambda", lambda},
                                              {"layers", layers},
                                              {"policy", to_string(policy)},
                                              {"position_offset", offset}};
                        try {
                            LayoutRecipe recipe = c.layout;
                            recipe.policy = policy;
                            recipe.replacement_token = policy == LayoutPolicy::replaced ? replacement : std::nullopt;
                            const PromptLayout layout = build_layout(recipe);
                            InterventionSpec spec;
                            spec.mode = mode;
                            spec.lambda = lambda;
                            spec.layers = layers;
                            spec.position_offset = offset;
                            if (mode == ScalingMode::adaptive_hidden) spec.adaptive.lambda_max = lambda;
                            const auto trace = make_trace(forward(w, layout, spec, capture, options), layout, w.config, spec);
                            row["metrics"] = detail::ablation_metrics(trace, c.analysis);
                            row["cross_ratio"] = detail::ratio_json(row["metrics"]["mean_cross"], base["mean_cross"]);
                            row["intra_ratio"] = detail::ratio_json(row["metrics"]["mean_intra"], base["mean_intra"]);
                            row["text_ratio"] = detail::ratio_json(row["metrics"]["text_to_segment"], base["text_to_segment"]);
                            row["degradation"] = lambda < 1.0;
                            row["error"] = nullptr;
                        } catch (const Error& e) {
                            row["error"] = e.code();
                            row["message"] = e.what();
                        }
                        rows.push_back(std::move(row));
                    }
    return {{"schema", "delimlab-ablation"}, {"version", kReportVersion}, {"config", to_json(c)}, {"baseline", base}, {"rows", rows}};
}

/// The `analyze` pipeline over stored traces.
inline nlohmann::json analyze_traces(const AttentionTrace& trace, const AnalysisOptions& opts,
                                     const AttentionTrace* baseline = nullptr) {
    nlohmann::json j = {{"schema", "delimlab-report"}, {"version", kReportVersion}, {"command", "analyze"}};
    j["trace"] = trace_summary(trace, opts);
    j["change"] = baseline ? change_summary(*baseline, trace, opts) : nlohmann::json(nullptr);
    return j;
}

/// Binary PGM (P5), one pixel per (query, key), min-max normalized; a
/// constant matrix renders as all zeros.
inline std::vector<std::uint8_t> render_pgm(const Matrix& p) {
    if (p.rows() != p.cols()) fail_data("shape-mismatch", "heatmap needs a square matrix");
    const std::string header = "P5\n" + std::to_string(p.cols()) + " " + std::to_string(p.rows()) + "\n255\n";
    std::vector<std::uint8_t> out(header.begin(), header.end());
    double lo = 0.0, hi = 0.0;
    if (p.size()) {
        lo = *std::min_element(p.data().begin(), p.data().end());
        hi = *std::max_element(p.data().begin(), p.data().end());
    }
    const double range = hi - lo;
    for (double v : p.data()) {
        const double scaled = range > 0.0 ? (v - lo) / range * 255.0 : 0.0;
        out.push_back(static_cast<std::uint8_t>(std::clamp(std::lround(scaled), 0L, 255L)));
    }
    return out;
}

/// Sidecar listing segment and delimiter positions for axis ticks.
inline std::string heatmap_ticks(const PromptLayout& layout) {
    std::ostringstream os;
    for (const auto& s : layout.segments) os << "segment " << s.id << ' ' << to_string(s.kind) << ' ' << s.start << ' ' << s.end << '\n';
    for (const auto& d : layout.delimiters) os << "delimiter " << d.index << ' ' << to_string(d.role) << ' ' << d.segment << '\n';
    return os.str();
}

/// Renders one (layer, head) of a stored trace; only that layer is loaded.
inline void write_heatmap(const std::filesystem::path& trace_dir, std::size_t layer, std::size_t head, const std::filesystem::path& out) {
    TraceReader reader(trace_dir);
    const auto& m = reader.meta();
    if (layer >= m.n_layers) fail_config("layer-out-of-range", "layer " + std::to_string(layer) + " >= " + std::to_string(m.n_layers));
    if (head >= m.n_heads) fail_config("head-out-of-range", "head " + std::to_string(head) + " >= " + std::to_string(m.n_heads));
    const auto heads = reader.load_attention(layer);
    const auto bytes = render_pgm(heads[head]);
    if (out.has_parent_path()) std::filesystem::create_directories(out.parent_path());
    detail::write_file_atomic(out, bytes);
    const std::string ticks = heatmap_ticks(m.layout);
    detail::write_file_atomic(out.string() + ".ticks.txt", std::span(reinterpret_cast<const std::uint8_t*>(ticks.data()), ticks.size()));
}

}  // namespace delimlab
