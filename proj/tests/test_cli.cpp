// Copyright (C) 2026 delimlab contributors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <fstream>
#include <sstream>

#include "support.hpp"

using namespace delimlab;
namespace ts = testing_support;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Outcome {
    int code = -1;
    std::string out;
    std::string err;
};

std::string read_text(const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

Outcome cli(const std::string& args, const fs::path& scratch, const std::string& env = "") {
    const auto out = scratch / "stdout.txt", err = scratch / "stderr.txt";
    const std::string cmd = env + " \"" DELIMLAB_CLI "\" " + args + " >\"" + out.string() + "\" 2>\"" + err.string() + "\"";
    const int status = std::system(cmd.c_str());
    Outcome o;
    o.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    o.out = read_text(out);
    o.err = read_text(err);
    return o;
}

void write_config(const fs::path& p, const json& j) { std::ofstream(p) << j.dump(); }

}  // namespace

TEST(Cli, RunMatchesLibraryReport) {
    const auto dir = ts::scratch_dir("cli_run");
    const auto r = cli("run --lambda 2 --layers 0,1 --out \"" + (dir / "out").string() + "\"", dir, "DELIMLAB_THREADS=2");
    ASSERT_EQ(r.code, 0) << r.err;
    EXPECT_NE(r.out.find("treated="), std::string::npos);

    auto c = experiment_from_json({{"preset", "three-segment"}, {"intervention", {{"lambda", 2.0}, {"layers", {0, 1}}}}});
    c.output = (dir / "out").string();
    const auto lib = execute_run(c, dir / "lib");
    std::ifstream in(dir / "out" / "report.json");
    EXPECT_EQ(json::parse(in), lib);
}

TEST(Cli, ValidateAndCompare) {
    const auto dir = ts::scratch_dir("cli_validate");
    ASSERT_EQ(cli("run --lambda 2 --layers 0,1 --out \"" + (dir / "o").string() + "\"", dir).code, 0);
    auto v = cli("validate \"" + (dir / "o" / "treated").string() + "\"", dir);
    ASSERT_EQ(v.code, 0) << v.err;
    EXPECT_TRUE(json::parse(v.out)["ok"].get<bool>());

    auto cmp = cli("compare \"" + (dir / "o" / "baseline").string() + "\" \"" + (dir / "o" / "treated").string() + "\" --layers 1", dir);
    ASSERT_EQ(cmp.code, 0) << cmp.err;
    const auto ratios = json::parse(cmp.out)["interaction"]["ratios"];
    EXPECT_NEAR(ratios[1][0].get<double>(), ts::golden()["lambda2_ratios"][1][1][0].get<double>(), 1e-5);

    fs::resize_file(dir / "o" / "treated" / attention_file(0), 10);
    v = cli("validate \"" + (dir / "o" / "treated").string() + "\"", dir);
    EXPECT_EQ(v.code, 3);
    EXPECT_EQ(v.err.rfind("error: size-mismatch", 0), 0u) << v.err;
}

TEST(Cli, HeatmapAndAnalyze) {
    const auto dir = ts::scratch_dir("cli_heatmap");
    ASSERT_EQ(cli("run --lambda 2 --layers 0 --out \"" + (dir / "o").string() + "\"", dir).code, 0);
    const auto h = cli("heatmap \"" + (dir / "o" / "baseline").string() + "\" --layer 1 --out \"" + (dir / "m.pgm").string() + "\"", dir);
    ASSERT_EQ(h.code, 0) << h.err;
    EXPECT_EQ(read_text(dir / "m.pgm").rfind("P5\n22 22\n255\n", 0), 0u);
    const auto bad = cli("heatmap \"" + (dir / "o" / "baseline").string() + "\" --layer 7 --out \"" + (dir / "x.pgm").string() + "\"", dir);
    EXPECT_EQ(bad.code, 2);
    const auto a = cli("analyze \"" + (dir / "o" / "treated").string() + "\" --baseline \"" + (dir / "o" / "baseline").string() + "\"", dir);
    ASSERT_EQ(a.code, 0) << a.err;
    EXPECT_EQ(json::parse(a.out)["command"], "analyze");
}

TEST(Cli, ConfigErrorsExitTwo) {
    const auto dir = ts::scratch_dir("cli_errors");
    write_config(dir / "typo.json", {{"preset", "three-segment"}, {"intervnetion", json::object()}});
    auto r = cli("run --config \"" + (dir / "typo.json").string() + "\" --out \"" + (dir / "o").string() + "\"", dir);
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("unknown-key"), std::string::npos) << r.err;
    EXPECT_FALSE(fs::exists(dir / "o"));

    r = cli("run --lambda -1", dir);
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("invalid-lambda"), std::string::npos) << r.err;
    r = cli("run --seed 4", dir);
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("seed-on-preset"), std::string::npos) << r.err;
    r = cli("run --mode sideways", dir);
    EXPECT_EQ(r.code, 2);
    r = cli("bogus-command", dir);
    EXPECT_EQ(r.code, 2);
    r = cli("run --out \"" + (dir / "t").string() + "\"", dir, "DELIMLAB_THREADS=zero");
    EXPECT_EQ(r.code, 2);
    EXPECT_NE(r.err.find("bad-threads"), std::string::npos) << r.err;
}

TEST(Cli, DataErrorsExitThree) {
    const auto dir = ts::scratch_dir("cli_data");
    const auto r = cli("analyze \"" + (dir / "nothing").string() + "\"", dir);
    EXPECT_EQ(r.code, 3);
    EXPECT_NE(r.err.find("missing-file"), std::string::npos) << r.err;
}

TEST(Cli, ThreadCountDoesNotChangeChecksums) {
    const auto dir = ts::scratch_dir("cli_threads");
    const auto one = cli("run --lambda 2 --layers 0,1 --out \"" + (dir / "a").string() + "\"", dir, "DELIMLAB_THREADS=1");
    const auto many = cli("run --lambda 2 --layers 0,1 --out \"" + (dir / "b").string() + "\"", dir, "DELIMLAB_THREADS=8");
    ASSERT_EQ(one.code, 0);
    ASSERT_EQ(many.code, 0);
    EXPECT_EQ(one.out.substr(one.out.find("baseline=")), many.out.substr(many.out.find("baseline=")));
}

TEST(Cli, AblateWritesRows) {
    const auto dir = ts::scratch_dir("cli_ablate");
    write_config(dir / "grid.json", {{"preset", "three-segment"},
                                     {"grid", {{"mode", {"hidden", "query-only"}}, {"lambda", {0.5, 2}}, {"layers", {{0, 1}}}}}});
    const auto r = cli("ablate --config \"" + (dir / "grid.json").string() + "\" --out \"" + (dir / "o").string() + "\"", dir);
    ASSERT_EQ(r.code, 0) << r.err;
    std::ifstream in(dir / "o" / "ablation.json");
    const auto j = json::parse(in);
    EXPECT_EQ(j["rows"].size(), 4u);
    for (const auto& row : j["rows"]) EXPECT_EQ(row["degradation"].get<bool>(), row["lambda"].get<double>() < 1.0);
}

TEST(Cli, GenWeightsIsDeterministic) {
    const auto dir = ts::scratch_dir("cli_gen");
    write_config(dir / "m.json", {{"model", {{"n_layers", 2}, {"n_heads", 2}, {"head_dim", 4}, {"vocab", 40}}}, {"layout", {{"segments", {2}}}}});
    const auto a = cli("gen-weights --config \"" + (dir / "m.json").string() + "\" --seed 5", dir);
    const auto b = cli("gen-weights --config \"" + (dir / "m.json").string() + "\" --seed 5", dir);
    const auto c = cli("gen-weights --config \"" + (dir / "m.json").string() + "\" --seed 6", dir);
    ASSERT_EQ(a.code, 0) << a.err;
    EXPECT_EQ(a.out, b.out);
    EXPECT_NE(a.out, c.out);
}
