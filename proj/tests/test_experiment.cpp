// Copyright (C) 2026 delimlab contributors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <fstream>
#include <iterator>

#include "support.hpp"

using namespace delimlab;
namespace ts = testing_support;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string config_code(const json& j) {
    try {
        experiment_from_json(j);
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::config);
        return e.code();
    }
    return "";
}

std::vector<std::uint8_t> slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

ExperimentConfig preset_with_lambda(double lambda) {
    return experiment_from_json({{"preset", "three-segment"}, {"intervention", {{"lambda", lambda}, {"layers", {0, 1}}}}});
}

}  // namespace

TEST(ExperimentConfig, PresetDefaults) {
    const auto c = experiment_from_json({{"preset", "three-segment"}});
    EXPECT_EQ(c.model.n_layers, 2u);
    EXPECT_EQ(c.analysis.layers, (std::vector<std::size_t>{1}));
    EXPECT_FALSE(c.intervention);
    EXPECT_EQ(build_layout(c.layout).size(), 22u);
}

TEST(ExperimentConfig, StrictKeys) {
    EXPECT_EQ(config_code({{"preset", "three-segment"}, {"lamda", 2}}), "unknown-key");
    EXPECT_EQ(config_code({{"preset", "three-segment"}, {"analysis", {{"layer", {0}}}}}), "unknown-key");
    EXPECT_EQ(config_code({{"preset", "three-segment"}, {"intervention", {{"lambda", 2}, {"mode", "query"}}}}), "unknown-mode");
    EXPECT_EQ(config_code({{"preset", "nope"}}), "unknown-preset");
    EXPECT_EQ(config_code({{"preset", "three-segment"}, {"model", json::object()}}), "schema");
    EXPECT_EQ(config_code({{"preset", "three-segment"}, {"output", 3}}), "schema");
}

TEST(ExperimentConfig, RangeChecks) {
    EXPECT_EQ(config_code({{"preset", "three-segment"}, {"analysis", {{"layers", {2}}}}}), "layer-out-of-range");
    EXPECT_EQ(config_code({{"preset", "three-segment"}, {"intervention", {{"lambda", 2}, {"layers", {5}}}}}), "layer-out-of-range");
    EXPECT_EQ(config_code({{"preset", "three-segment"}, {"intervention", {{"lambda", 0}}}}), "invalid-lambda");
    EXPECT_EQ(config_code({{"model", {{"vocab", 8}}}, {"layout", {{"segments", {2}}}}}), "token-out-of-range");
    EXPECT_EQ(config_code({{"preset", "three-segment"}, {"analysis", {{"source_segment", 3}}}}), "segment-out-of-range");
    EXPECT_EQ(config_code({{"preset", "three-segment"}, {"grid", {{"lambda", json::array()}}}}), "schema");
}

TEST(ExperimentConfig, JsonRoundTrip) {
    const auto c = experiment_from_json({{"model", {{"n_layers", 3}, {"n_heads", 2}, {"head_dim", 4}, {"vocab", 40}, {"seed", 9}}},
                                         {"layout", {{"segments", {2, 3}}, {"text_len", 2}, {"policy", "replaced"}, {"replacement_token", 3}}},
                                         {"intervention", {{"lambda", 2}, {"mode", "key-only"}, {"layers", {2}}}},
                                         {"capture", {"attn", "values"}},
                                         {"output", "x"}});
    EXPECT_EQ(to_json(experiment_from_json(to_json(c))), to_json(c));
}

TEST(ExperimentConfig, LoadFromDisk) {
    const auto dir = ts::scratch_dir("load_cfg");
    try {
        load_experiment(dir / "absent.json");
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), "missing-config");
    }
    std::ofstream(dir / "broken.json") << "{";
    try {
        load_experiment(dir / "broken.json");
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), "config-parse");
    }
}

TEST(RunExperiment, IdentityGivesUnitRatios) {
    const auto r = run_experiment(preset_with_lambda(1.0));
    ASSERT_TRUE(r.treated);
    for (std::size_t l = 0; l < 2; ++l)
        for (std::size_t h = 0; h < r.baseline.n_heads; ++h) EXPECT_EQ(r.baseline.attention[l][h], r.treated->attention[l][h]);
    for (const auto& row : r.report["change"]["interaction"]["ratios"])
        for (const auto& cell : row)
            if (!cell.is_null()) { EXPECT_EQ(cell.get<double>(), 1.0); }
    EXPECT_TRUE(r.report["flags"].empty());
}

TEST(RunExperiment, ReportShape) {
    const auto r = run_experiment(preset_with_lambda(0.5));
    const auto& j = r.report;
    EXPECT_EQ(j["schema"], "delimlab-report");
    EXPECT_EQ(j["command"], "run");
    EXPECT_EQ(j["flags"], json::array({"degradation-ablation"}));
    for (const char* key : {"interaction", "interaction_per_layer", "affinity", "entropy", "text", "decomposition"})
        EXPECT_TRUE(j["baseline"].contains(key)) << key;
    EXPECT_LE(j["treated"]["decomposition"]["max_partition_error"].get<double>(), 1e-9);
    EXPECT_FALSE(j["change"]["attention_delta"].is_null());
}

TEST(RunExperiment, ReportMatchesGoldenRatios) {
    const auto& g = ts::golden()["lambda2_ratios"][1];
    const auto r = run_experiment(preset_with_lambda(2.0));
    const auto& ratios = r.report["change"]["interaction"]["ratios"];
    for (std::size_t a = 0; a < 3; ++a)
        for (std::size_t b = 0; b < 3; ++b) {
            if (g[a][b].is_null()) { EXPECT_TRUE(ratios[a][b].is_null()); }
            else EXPECT_NEAR(ratios[a][b].get<double>(), g[a][b].get<double>(), 1e-9);
        }
}

TEST(ExecuteRun, WritesContainersAndChecksums) {
    const auto dir = ts::scratch_dir("execute");
    const auto report = execute_run(preset_with_lambda(2.0), dir);
    EXPECT_TRUE(validate_trace(dir / "baseline").ok());
    EXPECT_TRUE(validate_trace(dir / "treated").ok());
    EXPECT_EQ(report["trace_checksums"]["treated"], hex64(trace_checksum(dir / "treated")));
    std::ifstream in(dir / "report.json");
    EXPECT_EQ(json::parse(in), report);
    const auto treated = read_trace(dir / "treated");
    ASSERT_TRUE(treated.intervention);
    EXPECT_EQ(treated.intervention->lambda, 2.0);
}

TEST(Ablation, GridRowsAndBaseline) {
    auto c = experiment_from_json({{"preset", "three-segment"},
                                   {"grid",
                                    {{"mode", {"hidden", "key-only", "first-token"}},
                                     {"lambda", {1, 2}},
                                     {"layers", {{0, 1}}},
                                     {"policy", {"paired", "removed"}}}}});
    const auto j = run_ablation(c);
    EXPECT_EQ(j["schema"], "delimlab-ablation");
    ASSERT_EQ(j["rows"].size(), 12u);
    for (const auto& row : j["rows"]) {
        // first-token still scales BOS on a removed layout, so only the other modes are inert there.
        if (row["policy"] == "removed" && row["mode"] != "first-token") {
            ASSERT_TRUE(row["error"].is_null()) << row.dump();
            EXPECT_TRUE(row["metrics"]["affinity_empty"].get<bool>());
            EXPECT_GT(row["cross_ratio"].get<double>(), 1.0);
        }
        if (row["policy"] == "paired" && row["lambda"] == 1 && row["error"].is_null()) {
            EXPECT_EQ(row["cross_ratio"].get<double>(), 1.0);
        }
        if (row["policy"] == "paired" && row["mode"] == "hidden" && row["lambda"] == 2) {
            EXPECT_NEAR(row["cross_ratio"].get<double>(), 0.6, 0.05);
        }
    }
    c.grid->lambdas.clear();
    try {
        run_ablation(c);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), "empty-grid");
    }
}

TEST(Heatmap, PgmHeaderAndScaling) {
    const Matrix p{{1.0, 0.0, 0.0}, {0.5, 0.5, 0.0}, {0.25, 0.25, 0.5}};
    const auto bytes = render_pgm(p);
    const std::string header = "P5\n3 3\n255\n";
    ASSERT_EQ(bytes.size(), header.size() + 9);
    EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + static_cast<long>(header.size())), header);
    const std::vector<std::uint8_t> pixels(bytes.begin() + static_cast<long>(header.size()), bytes.end());
    EXPECT_EQ(pixels, (std::vector<std::uint8_t>{255, 0, 0, 128, 128, 0, 64, 64, 128}));
    const auto flat = render_pgm(Matrix{{1.0}});
    EXPECT_EQ(flat.back(), 0);
    EXPECT_THROW(render_pgm(Matrix(2, 3)), Error);
}

TEST(Heatmap, DeterministicWithTicks) {
    const auto dir = ts::scratch_dir("heatmap");
    execute_run(preset_with_lambda(2.0), dir);
    write_heatmap(dir / "treated", 1, 0, dir / "a.pgm");
    write_heatmap(dir / "treated", 1, 0, dir / "b.pgm");
    EXPECT_EQ(slurp(dir / "a.pgm"), slurp(dir / "b.pgm"));
    EXPECT_EQ(slurp(dir / "a.pgm").size(), std::string("P5\n22 22\n255\n").size() + 22 * 22);
    std::ifstream ticks(dir / "a.pgm.ticks.txt");
    std::string first;
    std::getline(ticks, first);
    EXPECT_EQ(first.rfind("segment 0", 0), 0u);
    try {
        write_heatmap(dir / "treated", 2, 0, dir / "c.pgm");
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), "layer-out-of-range");
    }
    try {
        write_heatmap(dir / "treated", 0, 1, dir / "c.pgm");
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), "head-out-of-range");
    }
}

TEST(Analyze, StoredTracesReproduceInMemoryRatiosWithinF32) {
    const auto dir = ts::scratch_dir("analyze");
    const auto c = preset_with_lambda(2.0);
    const auto mem = run_experiment(c);
    execute_run(c, dir);
    AnalysisOptions opts;
    opts.layers = {1};
    const auto j = analyze_traces(read_trace(dir / "treated"), opts, nullptr);
    EXPECT_TRUE(j["change"].is_null());
    const auto cmp = change_summary(read_trace(dir / "baseline"), read_trace(dir / "treated"), opts);
    const auto& want = mem.report["change"]["interaction"]["ratios"];
    for (std::size_t a = 0; a < 3; ++a)
        for (std::size_t b = 0; b <= a; ++b) EXPECT_NEAR(cmp["interaction"]["ratios"][a][b].get<double>(), want[a][b].get<double>(), 1e-5);
}
