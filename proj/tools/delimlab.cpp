// Copyright (C) 2026 delimlab contributors
// SPDX-License-Identifier: Apache-2.0

// delimlab command-line driver. Every subcommand is a thin wrapper over a
// library call in delimlab/experiment.hpp.

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "delimlab/delimlab.hpp"

namespace fs = std::filesystem;
using namespace delimlab;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitData = 3;

std::vector<std::size_t> parse_layer_list(const std::string& text) {
    std::vector<std::size_t> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        std::size_t used = 0;
        unsigned long long v = 0;
        try {
            v = std::stoull(item, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used != item.size()) fail_config("bad-layers", "'" + text + "' is not a comma-separated index list");
        out.push_back(static_cast<std::size_t>(v));
    }
    return out;
}

ForwardOptions forward_options() {
    ForwardOptions o;
    o.threads = std::max(1u, std::thread::hardware_concurrency());
    if (const char* env = std::getenv("DELIMLAB_THREADS")) {
        char* end = nullptr;
        const unsigned long cap = std::strtoul(env, &end, 10);
        if (end == env || *end != '\0' || cap == 0) fail_config("bad-threads", std::string("DELIMLAB_THREADS=") + env);
        o.threads = std::min<std::size_t>(o.threads, cap);
    }
    return o;
}

void print_json(const nlohmann::json& j) { std::cout << j.dump(2) << '\n'; }

struct Overrides {
    std::string config;
    std::string out;
    std::string layers;
    std::optional<double> lambda;
    std::string mode;
    std::optional<std::uint64_t> seed;
    std::string capture;
};

ExperimentConfig load_with_overrides(const Overrides& o) {
    ExperimentConfig c = o.config.empty() ? experiment_from_json(nlohmann::json{{"preset", "three-segment"}}) : load_experiment(o.config);
    if (o.seed) {
        if (c.preset) fail_config("seed-on-preset", "preset weights are hand-built; --seed does not apply");
        c.model.seed = *o.seed;
    }
    if (!o.capture.empty()) c.capture = parse_capture(o.capture);
    if (o.lambda || !o.mode.empty() || !o.layers.empty()) {
        InterventionSpec spec = c.intervention.value_or(InterventionSpec{});
        if (o.lambda) spec.lambda = *o.lambda;
        if (!o.mode.empty()) spec.mode = parse_scaling_mode(o.mode);
        if (!o.layers.empty()) spec.layers = parse_layer_list(o.layers);
        for (std::size_t l : spec.layers)
            if (l >= c.model.n_layers) fail_config("layer-out-of-range", "intervention layer " + std::to_string(l));
        c.intervention = normalized(std::move(spec));
    }
    if (!o.out.empty()) c.output = o.out;
    return c;
}

void add_common(CLI::App* cmd, Overrides& o) {
    cmd->add_option("--config", o.config, "experiment config JSON (default: three-segment preset)");
    cmd->add_option("--out", o.out, "output directory");
    cmd->add_option("--layers", o.layers, "intervention layers, e.g. 0,1");
    cmd->add_option("--lambda", o.lambda, "scaling factor");
    cmd->add_option("--mode", o.mode, "hidden|query-only|key-only|value-only|first-token|adaptive-hidden");
    cmd->add_option("--seed", o.seed, "weight seed");
    cmd->add_option("--capture", o.capture, "attn,values,hidden,proj");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"delimlab: delimiter-token hidden-state scaling lab"};
    app.require_subcommand(1);

    Overrides o;
    std::string trace_dir, baseline_dir, analysis_layers;
    std::size_t layer = 0, head = 0;

    auto* gen = app.add_subcommand("gen-weights", "write a regenerable weight descriptor");
    add_common(gen, o);

    auto* run = app.add_subcommand("run", "baseline + treated forward, traces and report");
    add_common(run, o);

    auto* ablate = app.add_subcommand("ablate", "run the config's grid against the paired baseline");
    add_common(ablate, o);

    auto* analyze = app.add_subcommand("analyze", "report on a stored trace");
    analyze->add_option("trace", trace_dir, "trace directory")->required();
    analyze->add_option("--baseline", baseline_dir, "baseline trace for change ratios");
    analyze->add_option("--layers", analysis_layers, "analysis layers (default: all)");
    analyze->add_option("--out", o.out, "write report.json here instead of stdout");

    auto* validate = app.add_subcommand("validate", "streamed invariant check of a trace container");
    validate->add_option("trace", trace_dir, "trace directory")->required();

    auto* heatmap = app.add_subcommand("heatmap", "render one attention map as binary PGM");
    heatmap->add_option("trace", trace_dir, "trace directory")->required();
    heatmap->add_option("--layer", layer, "layer index");
    heatmap->add_option("--head", head, "head index");
    heatmap->add_option("--out", o.out, "output .pgm path")->required();

    auto* compare = app.add_subcommand("compare", "change ratios between two traces");
    compare->add_option("baseline", baseline_dir, "baseline trace directory")->required();
    compare->add_option("treated", trace_dir, "treated trace directory")->required();
    compare->add_option("--layers", analysis_layers, "analysis layers (default: all)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kExitConfig;
    }

    try {
        if (gen->parsed()) {
            const auto c = load_with_overrides(o);
            const auto desc = weights_descriptor(weights_for(c));
            if (o.out.empty()) print_json(desc);
            else write_json(fs::path(o.out) / "weights.json", desc);
        } else if (run->parsed()) {
            const auto c = load_with_overrides(o);
            const auto report = execute_run(c, c.output, forward_options());
            std::cout << "wrote " << (fs::path(c.output) / "report.json").string() << " baseline=" << report["trace_checksums"]["baseline"].get<std::string>();
            if (report["trace_checksums"].contains("treated")) std::cout << " treated=" << report["trace_checksums"]["treated"].get<std::string>();
            std::cout << '\n';
        } else if (ablate->parsed()) {
            const auto c = load_with_overrides(o);
            const auto report = run_ablation(c, forward_options());
            write_json(fs::path(c.output) / "ablation.json", report);
            std::cout << "wrote " << (fs::path(c.output) / "ablation.json").string() << " rows=" << report["rows"].size() << '\n';
        } else if (analyze->parsed()) {
            AnalysisOptions opts;
            opts.layers = parse_layer_list(analysis_layers);
            const auto trace = read_trace(trace_dir);
            std::optional<AttentionTrace> base;
            if (!baseline_dir.empty()) base = read_trace(baseline_dir);
            const auto report = analyze_traces(trace, opts, base ? &*base : nullptr);
            if (o.out.empty()) print_json(report);
            else write_json(fs::path(o.out) / "report.json", report);
        } else if (validate->parsed()) {
            const auto r = validate_trace(fs::path(trace_dir));
            print_json(to_json(r));
            if (!r.ok()) {
                std::cerr << "error: " << r.violations.front().code << ": " << r.violations.front().location << ": " << r.violations.front().detail << '\n';
                return kExitData;
            }
        } else if (heatmap->parsed()) {
            write_heatmap(trace_dir, layer, head, o.out);
        } else if (compare->parsed()) {
            AnalysisOptions opts;
            opts.layers = parse_layer_list(analysis_layers);
            print_json(change_summary(read_trace(baseline_dir), read_trace(trace_dir), opts));
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return e.kind() == ErrorKind::config ? kExitConfig : kExitData;
    } catch (const std::exception& e) {
        std::cerr << "error: io: " << e.what() << '\n';
        return kExitData;
    }
    return 0;
}
