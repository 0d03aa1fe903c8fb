// Copyright (C) 2026 delimlab contributors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cstring>
#include <fstream>

#include "support.hpp"

using namespace delimlab;
namespace ts = testing_support;
namespace fs = std::filesystem;

namespace {

AttentionTrace trace_with(std::size_t layers, std::size_t heads) {
    ModelConfig c;
    c.n_layers = layers;
    c.n_heads = heads;
    c.head_dim = 4;
    c.vocab = 40;
    LayoutRecipe r;
    r.segment_sizes = {3, 2};
    r.text_len = 2;
    InterventionSpec s;
    s.lambda = 1.5;
    s.layers = {0};
    return ts::run_trace(init_weights(c), build_layout(r), s);
}

std::string code_of(const std::function<void()>& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.code();
    }
    return "";
}

// Independent little-endian f32 writer.
void put_f32(std::ofstream& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    for (int i = 0; i < 4; ++i) out.put(static_cast<char>((bits >> (8 * i)) & 0xff));
}

void overwrite_f32(const fs::path& file, std::size_t index, float v) {
    std::fstream f(file, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(static_cast<std::streamoff>(index * 4));
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    for (int i = 0; i < 4; ++i) f.put(static_cast<char>((bits >> (8 * i)) & 0xff));
}

nlohmann::json read_json(const fs::path& p) {
    std::ifstream in(p);
    return nlohmann::json::parse(in);
}

void write_json_file(const fs::path& p, const nlohmann::json& j) {
    std::ofstream(p) << j.dump(2);
}

}  // namespace

TEST(F32le, ByteLayout) {
    const double one[] = {1.0};
    EXPECT_EQ(encode_f32le(one), (std::vector<std::uint8_t>{0x00, 0x00, 0x80, 0x3f}));
    const double neg[] = {-2.0};
    EXPECT_EQ(encode_f32le(neg), (std::vector<std::uint8_t>{0x00, 0x00, 0x00, 0xc0}));
    const std::vector<std::uint8_t> bytes{0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x00, 0x3f};
    EXPECT_EQ(decode_f32le(bytes), (std::vector<float>{1.0f, 0.5f}));
    EXPECT_THROW(decode_f32le(std::span(bytes).first(3)), Error);
}

TEST(TraceIo, RoundTripIsBitIdenticalInF32) {
    const auto t = trace_with(2, 2);
    const auto dir = ts::scratch_dir("roundtrip");
    write_trace(t, dir);
    const auto back = read_trace(dir);
    EXPECT_EQ(back.n_layers, 2u);
    EXPECT_EQ(back.n_heads, 2u);
    EXPECT_EQ(back.seq_len, t.seq_len);
    EXPECT_EQ(back.layout, t.layout);
    ASSERT_TRUE(back.intervention);
    EXPECT_EQ(to_json(*back.intervention), to_json(*t.intervention));
    EXPECT_EQ(back.row_tolerance, kF32RowTolerance);
    for (std::size_t l = 0; l < 2; ++l) {
        for (std::size_t h = 0; h < 2; ++h) {
            for (std::size_t i = 0; i < t.attention[l][h].size(); ++i)
                EXPECT_EQ(back.attention[l][h].data()[i], static_cast<double>(static_cast<float>(t.attention[l][h].data()[i])));
            for (std::size_t i = 0; i < (*t.values)[l][h].size(); ++i)
                EXPECT_EQ((*back.values)[l][h].data()[i], static_cast<double>(static_cast<float>((*t.values)[l][h].data()[i])));
        }
        for (std::size_t q = 0; q < t.seq_len; ++q)
            EXPECT_EQ((*back.hidden_norms)[l][q], static_cast<double>(static_cast<float>((*t.hidden_norms)[l][q])));
    }
    // Second write of the re-read trace reproduces every payload byte.
    const auto again = ts::scratch_dir("roundtrip_again");
    write_trace(back, again);
    EXPECT_EQ(trace_checksum(dir), trace_checksum(again));
    EXPECT_FALSE(fs::exists(dir / ".lock"));
}

TEST(TraceIo, AttentionPayloadSize) {
    ModelConfig c;
    c.n_layers = 1;
    c.n_heads = 2;
    c.head_dim = 2;
    c.vocab = 40;
    LayoutRecipe r;
    r.segment_sizes = {2};
    const auto layout = build_layout(r);
    ASSERT_EQ(layout.size(), 4u);
    const auto dir = ts::scratch_dir("size128");
    write_trace(ts::run_trace(init_weights(c), layout), dir);
    EXPECT_EQ(fs::file_size(dir / attention_file(0)), 128u);
    const auto meta = read_json(dir / "meta.json");
    EXPECT_EQ(meta["format"], "delimlab-trace");
    EXPECT_EQ(meta["dtype"], "f32le");
    EXPECT_EQ(meta["layout_order"], "[head][query][key]");
}

TEST(TraceIo, TruncatedPayloadNamesTheFile) {
    const auto dir = ts::scratch_dir("truncated");
    write_trace(trace_with(2, 2), dir);
    fs::resize_file(dir / attention_file(1), fs::file_size(dir / attention_file(1)) - 4);
    try {
        read_trace(dir);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), "size-mismatch");
        EXPECT_NE(std::string(e.what()).find(attention_file(1)), std::string::npos);
    }
    const auto r = validate_trace(dir);
    ASSERT_FALSE(r.ok());
    EXPECT_EQ(r.violations.front().code, "size-mismatch");
}

TEST(TraceIo, FutureVersionRejected) {
    const auto dir = ts::scratch_dir("version");
    write_trace(trace_with(1, 1), dir);
    auto meta = read_json(dir / "meta.json");
    meta["version"] = 2;
    write_json_file(dir / "meta.json", meta);
    EXPECT_EQ(code_of([&] { read_trace(dir); }), "unknown-version");
}

TEST(TraceIo, MissingFilesAndBadMeta) {
    const auto dir = ts::scratch_dir("missing");
    EXPECT_EQ(code_of([&] { read_trace(dir); }), "missing-file");
    write_trace(trace_with(1, 1), dir);
    fs::remove(dir / values_file(0));
    EXPECT_EQ(code_of([&] { TraceReader(dir).load_values(0); }), "missing-file");
    std::ofstream(dir / "meta.json") << "{not json";
    EXPECT_EQ(code_of([&] { read_trace(dir); }), "bad-meta");
}

TEST(TraceIo, RowMassViolationIsReported) {
    const auto dir = ts::scratch_dir("rowmass");
    const auto t = trace_with(1, 1);
    write_trace(t, dir);
    // Row 2 of head 0 becomes (0.8, 0, 0): mass 0.8.
    const std::size_t n = t.seq_len;
    overwrite_f32(dir / attention_file(0), 2 * n + 0, 0.8f);
    overwrite_f32(dir / attention_file(0), 2 * n + 1, 0.0f);
    overwrite_f32(dir / attention_file(0), 2 * n + 2, 0.0f);
    const auto r = validate_trace(dir);
    ASSERT_EQ(r.violations.size(), 1u);
    EXPECT_EQ(r.violations[0].code, "row-mass");
    EXPECT_EQ(r.violations[0].location, "layer 0 head 0 row 2");
    EXPECT_EQ(code_of([&] { read_trace(dir); }), "degenerate-attention");
}

TEST(TraceIo, DelimiterBeyondSequence) {
    const auto dir = ts::scratch_dir("delimrange");
    write_trace(trace_with(1, 1), dir);
    auto meta = read_json(dir / "meta.json");
    meta["layout"]["delimiters"][0]["index"] = 99;
    write_json_file(dir / "meta.json", meta);
    bool found = false;
    for (const auto& v : validate_trace(dir).violations) found |= v.code == "delimiter-out-of-range";
    EXPECT_TRUE(found);
    EXPECT_EQ(code_of([&] { read_trace(dir); }), "delimiter-out-of-range");
}

TEST(TraceIo, StreamingPeakIsOnePayload) {
    std::uintmax_t peak_small = 0;
    for (std::size_t layers : {1u, 3u, 6u}) {
        const auto dir = ts::scratch_dir("stream" + std::to_string(layers));
        const auto t = trace_with(layers, 2);
        write_trace(t, dir);
        const auto r = validate_trace(dir);
        EXPECT_TRUE(r.ok());
        EXPECT_EQ(r.layers_checked, layers);
        EXPECT_EQ(r.peak_resident_bytes, 2 * t.seq_len * t.seq_len * 4);
        if (layers == 1) peak_small = r.peak_resident_bytes;
        EXPECT_EQ(r.peak_resident_bytes, peak_small);
    }
}

TEST(TraceIo, WriterRejectsInvalidTraceAndHeldLock) {
    auto t = trace_with(1, 1);
    auto bad = t;
    bad.attention[0][0](1, 0) = 0.1;
    const auto dir = ts::scratch_dir("writer");
    EXPECT_EQ(code_of([&] { write_trace(bad, dir); }), "shape-inconsistent");
    EXPECT_FALSE(fs::exists(dir / "meta.json"));
    std::ofstream(dir / ".lock").close();
    EXPECT_EQ(code_of([&] { write_trace(t, dir); }), "output-locked");
    fs::remove(dir / ".lock");
    write_trace(t, dir);
    EXPECT_TRUE(validate_trace(dir).ok());
}

TEST(TraceIo, ChecksumDeterministic) {
    const auto a = ts::scratch_dir("ck_a"), b = ts::scratch_dir("ck_b");
    write_trace(trace_with(2, 2), a);
    write_trace(trace_with(2, 2), b);
    EXPECT_EQ(trace_checksum(a), trace_checksum(b));
    overwrite_f32(b / values_file(1), 0, 123.0f);
    EXPECT_NE(trace_checksum(a), trace_checksum(b));
}

// A container as an external exporter would write it: f32 rows that only sum
// to one within single-precision rounding, no values, producer "bridge".
TEST(TraceIo, BridgeProducedContainer) {
    const auto dir = ts::scratch_dir("bridge");
    LayoutRecipe r;
    r.segment_sizes = {2, 2};
    r.text_len = 2;
    const auto layout = build_layout(r);
    const std::size_t n = layout.size(), heads = 2, layers = 2;
    nlohmann::json payloads = nlohmann::json::array();
    for (std::size_t l = 0; l < layers; ++l) {
        const std::string name = "attn_layer_" + std::to_string(l) + ".f32";
        std::ofstream out(dir / name, std::ios::binary);
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t q = 0; q < n; ++q)
                for (std::size_t k = 0; k < n; ++k) {
                    float v = 0.0f;
                    if (k <= q) v = static_cast<float>((k + h + 1.0) / ((q + 1) * (q + 2) / 2.0 + (q + 1) * h));
                    put_f32(out, v);
                }
        payloads.push_back({{"file", name}, {"kind", "attention"}, {"layer", l}, {"bytes", heads * n * n * 4}});
    }
    const nlohmann::json meta = {
        {"format", "delimlab-trace"}, {"version", 1},       {"n_layers", layers},
        {"n_heads", heads},           {"seq_len", n},       {"head_dim", 64},
        {"dtype", "f32le"},           {"layout_order", "[head][query][key]"},
        {"producer", "bridge"},       {"row_tolerance", 1e-4},
        {"layout", to_json(layout)},  {"intervention", nullptr},
        {"payloads", payloads},
    };
    write_json_file(dir / "meta.json", meta);

    const auto report = validate_trace(dir);
    EXPECT_TRUE(report.ok());
    const auto t = read_trace(dir);
    EXPECT_EQ(t.producer, Producer::bridge);
    EXPECT_FALSE(t.values);
    const auto m = segment_interaction_matrix(t, t.layout);
    EXPECT_TRUE(m.at(1, 0));
    EXPECT_FALSE(delimiter_affinity(t, t.layout).empty());
    EXPECT_THROW(tagging_decomposition(t, t.layout, 3, 0, 0), Error);
}
