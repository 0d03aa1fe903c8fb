// Copyright (C) 2026 delimlab contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <bit>
#include <cerrno>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "delimlab/error.hpp"
#include "delimlab/trace.hpp"

// Trace container: a directory holding meta.json plus raw little-endian f32
// payloads, one file per layer and kind:
//
//   attn_layer_<l>.f32          n_heads * seq * seq     [head][query][key]
//   values_layer_<l>.f32        n_heads * seq * head_dim [head][token][dim]  (optional)
//   hidden_norms_layer_<l>.f32  seq                                           (optional)
//
// meta.json lists every payload with its exact byte size and is written last.

namespace delimlab {

inline constexpr int kTraceVersion = 1;
inline constexpr const char* kTraceFormat = "delimlab-trace";

namespace fs = std::filesystem;

inline void append_f32le(std::vector<std::uint8_t>& out, float v) {
    const auto bits = std::bit_cast<std::uint32_t>(v);
    for (int b = 0; b < 4; ++b) out.push_back(static_cast<std::uint8_t>((bits >> (8 * b)) & 0xFFu));
}

inline float read_f32le(const std::uint8_t* p) {
    const std::uint32_t bits = static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
                               (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
    return std::bit_cast<float>(bits);
}

inline std::vector<std::uint8_t> encode_f32le(std::span<const double> values) {
    std::vector<std::uint8_t> out;
    out.reserve(values.size() * 4);
    for (double v : values) append_f32le(out, static_cast<float>(v));
    return out;
}

inline std::vector<float> decode_f32le(std::span<const std::uint8_t> bytes) {
    if (bytes.size() % 4 != 0) fail_data("size-mismatch", "payload length not a multiple of 4");
    std::vector<float> out(bytes.size() / 4);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = read_f32le(bytes.data() + 4 * i);
    return out;
}

inline std::string attention_file(std::size_t layer) { return "attn_layer_" + std::to_string(layer) + ".f32"; }
inline std::string values_file(std::size_t layer) { return "values_layer_" + std::to_string(layer) + ".f32"; }
inline std::string hidden_norms_file(std::size_t layer) { return "hidden_norms_layer_" + std::to_string(layer) + ".f32"; }

namespace detail {

inline void write_file_atomic(const fs::path& path, std::span<const std::uint8_t> bytes) {
    const fs::path tmp = path.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) fail_data("io-error", "cannot open " + tmp.string() + " for writing");
        out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
        if (!out) fail_data("io-error", "short write to " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) fail_data("io-error", "rename " + tmp.string() + ": " + ec.message());
}

inline std::vector<std::uint8_t> read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail_data("missing-file", path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return bytes;
}

/// Exclusive lock file held for the duration of a write.
class DirectoryLock {
public:
    explicit DirectoryLock(const fs::path& dir) : path_(dir / ".lock") {
        std::FILE* f = std::fopen(path_.c_str(), "wx");
        if (!f) fail_data(errno == EEXIST ? "output-locked" : "io-error", "cannot lock " + dir.string());
        std::fclose(f);
    }
    ~DirectoryLock() {
        std::error_code ec;
        fs::remove(path_, ec);
    }
    DirectoryLock(const DirectoryLock&) = delete;
    DirectoryLock& operator=(const DirectoryLock&) = delete;

private:
    fs::path path_;
};

}  // namespace detail

/// Writes `trace` under `dir` (created if needed). Payloads go through temp
/// files and renames; meta.json is renamed into place last.
inline void write_trace(const AttentionTrace& trace, const fs::path& dir) {
    if (const auto v = validate_trace(trace); !v.empty())
        fail_data("shape-inconsistent", v.front().code + " at " + v.front().location + ": " + v.front().detail);
    if (trace.values && trace.values->size() != trace.n_layers) fail_data("shape-inconsistent", "values layer count");
    if (trace.hidden_norms && trace.hidden_norms->size() != trace.n_layers) fail_data("shape-inconsistent", "hidden_norms layer count");

    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) fail_data("io-error", "create " + dir.string() + ": " + ec.message());
    detail::DirectoryLock lock(dir);

    nlohmann::json payloads = nlohmann::json::array();
    auto emit = [&](const std::string& name, const char* kind, std::size_t layer, const std::vector<std::uint8_t>& bytes) {
        detail::write_file_atomic(dir / name, bytes);
        payloads.push_back({{"file", name}, {"kind", kind}, {"layer", layer}, {"bytes", bytes.size()}});
    };

    for (std::size_t l = 0; l < trace.n_layers; ++l) {
        std::vector<std::uint8_t> bytes;
        bytes.reserve(trace.n_heads * trace.seq_len * trace.seq_len * 4);
        for (std::size_t h = 0; h < trace.n_heads; ++h)
            for (double v : trace.attention[l][h].data()) append_f32le(bytes, static_cast<float>(v));
        emit(attention_file(l), "attention", l, bytes);

        if (trace.values) {
            bytes.clear();
            for (std::size_t h = 0; h < trace.n_heads; ++h) {
                const Matrix& v = (*trace.values)[l][h];
                if (v.rows() != trace.seq_len || v.cols() != trace.head_dim) fail_data("shape-inconsistent", "values layer " + std::to_string(l));
                for (double x : v.data()) append_f32le(bytes, static_cast<float>(x));
            }
            emit(values_file(l), "values", l, bytes);
        }
        if (trace.hidden_norms) {
            const auto& norms = (*trace.hidden_norms)[l];
            if (norms.size() != trace.seq_len) fail_data("shape-inconsistent", "hidden_norms layer " + std::to_string(l));
            emit(hidden_norms_file(l), "hidden_norms", l, encode_f32le(norms));
        }
    }

    nlohmann::json meta = {
        {"format", kTraceFormat},
        {"version", kTraceVersion},
        {"n_layers", trace.n_layers},
        {"n_heads", trace.n_heads},
        {"seq_len", trace.seq_len},
        {"head_dim", trace.head_dim},
        {"dtype", "f32le"},
        {"layout_order", "[head][query][key]"},
        {"values_order", "[head][token][dim]"},
        {"producer", to_string(trace.producer)},
        {"row_tolerance", kF32RowTolerance},
        {"layout", to_json(trace.layout)},
        {"intervention", trace.intervention ? to_json(*trace.intervention) : nlohmann::json(nullptr)},
        {"payloads", payloads},
    };
    const std::string text = meta.dump(2) + "\n";
    detail::write_file_atomic(dir / "meta.json", std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

struct TraceMeta {
    std::size_t n_layers = 0, n_heads = 0, seq_len = 0, head_dim = 0;
    Producer producer = Producer::toy;
    double row_tolerance = kF32RowTolerance;
    PromptLayout layout;
    std::optional<InterventionSpec> intervention;
    struct Payload {
        std::string file;
        std::string kind;
        std::size_t layer = 0;
        std::uintmax_t bytes = 0;
    };
    std::vector<Payload> payloads;

    const Payload* find(const std::string& kind, std::size_t layer) const {
        for (const auto& p : payloads)
            if (p.kind == kind && p.layer == layer) return &p;
        return nullptr;
    }
    bool has(const std::string& kind) const { return find(kind, 0) != nullptr; }

    std::uintmax_t expected_bytes(const std::string& kind) const {
        if (kind == "attention") return n_heads * seq_len * seq_len * 4;
        if (kind == "values") return n_heads * seq_len * head_dim * 4;
        return seq_len * 4;
    }
};

inline TraceMeta read_trace_meta(const fs::path& dir) {
    const fs::path meta_path = dir / "meta.json";
    if (!fs::exists(meta_path)) fail_data("missing-file", meta_path.string());
    nlohmann::json j;
    try {
        std::ifstream in(meta_path);
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        fail_data("bad-meta", e.what());
    }
    try {
        if (j.value("format", std::string{}) != kTraceFormat) fail_data("bad-meta", "format tag is not " + std::string(kTraceFormat));
        const int version = j.at("version").get<int>();
        if (version != kTraceVersion) fail_data("unknown-version", "trace version " + std::to_string(version));
        if (j.at("dtype").get<std::string>() != "f32le") fail_data("bad-meta", "dtype must be f32le");
        if (j.at("layout_order").get<std::string>() != "[head][query][key]") fail_data("bad-meta", "unsupported layout_order");
        TraceMeta m;
        m.n_layers = j.at("n_layers").get<std::size_t>();
        m.n_heads = j.at("n_heads").get<std::size_t>();
        m.seq_len = j.at("seq_len").get<std::size_t>();
        m.head_dim = j.at("head_dim").get<std::size_t>();
        m.producer = parse_producer(j.at("producer").get<std::string>());
        m.row_tolerance = j.value("row_tolerance", kF32RowTolerance);
        m.layout = layout_from_json(j.at("layout"));
        if (j.contains("intervention") && !j["intervention"].is_null()) {
            try {
                m.intervention = intervention_from_json(j["intervention"]);
            } catch (const Error& e) {
                fail_data("bad-meta", std::string("intervention: ") + e.what());
            }
        }
        for (const auto& p : j.at("payloads"))
            m.payloads.push_back({p.at("file").get<std::string>(), p.at("kind").get<std::string>(), p.at("layer").get<std::size_t>(),
                                  p.at("bytes").get<std::uintmax_t>()});
        return m;
    } catch (const nlohmann::json::exception& e) {
        fail_data("bad-meta", e.what());
    }
}

/// Per-layer access to a container; only the requested layer is held in memory.
class TraceReader {
public:
    explicit TraceReader(fs::path dir) : dir_(std::move(dir)), meta_(read_trace_meta(dir_)) {}

    const TraceMeta& meta() const noexcept { return meta_; }
    const fs::path& dir() const noexcept { return dir_; }

    /// Raw f32 payload of one kind/layer, size-checked against the manifest and the shape.
    std::vector<float> load_raw(const std::string& kind, std::size_t layer) const {
        const auto* p = meta_.find(kind, layer);
        if (!p) fail_data("missing-payload", kind + " layer " + std::to_string(layer));
        const fs::path path = dir_ / p->file;
        if (!fs::exists(path)) fail_data("missing-file", path.string());
        const auto on_disk = fs::file_size(path);
        if (on_disk != p->bytes || p->bytes != meta_.expected_bytes(kind))
            fail_data("size-mismatch", p->file + ": " + std::to_string(on_disk) + " bytes on disk, manifest " + std::to_string(p->bytes) +
                                           ", shape needs " + std::to_string(meta_.expected_bytes(kind)));
        return decode_f32le(detail::read_file(path));
    }

    std::vector<Matrix> load_attention(std::size_t layer) const {
        const auto raw = load_raw("attention", layer);
        const std::size_t n = meta_.seq_len;
        std::vector<Matrix> out;
        for (std::size_t h = 0; h < meta_.n_heads; ++h) {
            Matrix m(n, n);
            for (std::size_t i = 0; i < n * n; ++i) m.data()[i] = raw[h * n * n + i];
            std::vector<TraceViolation> v;
            check_attention_matrix(m, meta_.row_tolerance, "layer " + std::to_string(layer) + " head " + std::to_string(h), v);
            if (!v.empty()) fail_data("degenerate-attention", v.front().location + ": " + v.front().code + " (" + v.front().detail + ")");
            out.push_back(std::move(m));
        }
        return out;
    }

    std::vector<Matrix> load_values(std::size_t layer) const {
        const auto raw = load_raw("values", layer);
        const std::size_t n = meta_.seq_len, hd = meta_.head_dim;
        std::vector<Matrix> out;
        for (std::size_t h = 0; h < meta_.n_heads; ++h) {
            Matrix m(n, hd);
            for (std::size_t i = 0; i < n * hd; ++i) m.data()[i] = raw[h * n * hd + i];
            out.push_back(std::move(m));
        }
        return out;
    }

    std::vector<double> load_hidden_norms(std::size_t layer) const {
        const auto raw = load_raw("hidden_norms", layer);
        return {raw.begin(), raw.end()};
    }

private:
    fs::path dir_;
    TraceMeta meta_;
};

/// Fully materialized, validated trace.
inline AttentionTrace read_trace(const fs::path& dir) {
    TraceReader reader(dir);
    const auto& m = reader.meta();
    if (const auto v = validate_layout_against(m.layout, m.seq_len); !v.empty())
        fail_data(v.front().code, v.front().location + ": " + v.front().detail);
    AttentionTrace t;
    t.n_layers = m.n_layers;
    t.n_heads = m.n_heads;
    t.seq_len = m.seq_len;
    t.head_dim = m.head_dim;
    t.layout = m.layout;
    t.intervention = m.intervention;
    t.producer = m.producer;
    t.row_tolerance = m.row_tolerance;
    const bool has_values = m.has("values"), has_norms = m.has("hidden_norms");
    if (has_values) t.values.emplace();
    if (has_norms) t.hidden_norms.emplace();
    for (std::size_t l = 0; l < m.n_layers; ++l) {
        t.attention.push_back(reader.load_attention(l));
        if (has_values) t.values->push_back(reader.load_values(l));
        if (has_norms) t.hidden_norms->push_back(reader.load_hidden_norms(l));
    }
    return t;
}

struct TraceValidationReport {
    std::vector<TraceViolation> violations;
    std::size_t layers_checked = 0;
    std::uintmax_t peak_resident_bytes = 0;  // largest payload held at once
    std::uintmax_t max_layer_bytes = 0;      // largest single-layer payload total

    bool ok() const noexcept { return violations.empty(); }
};

/// Full invariant sweep that never holds more than one payload file in memory.
/// Violations are data; only an unreadable meta.json is reported as a single entry.
inline TraceValidationReport validate_trace(const fs::path& dir) {
    TraceValidationReport r;
    std::optional<TraceReader> reader;
    try {
        reader.emplace(dir);
    } catch (const Error& e) {
        r.violations.push_back({e.code(), (dir / "meta.json").string(), e.what()});
        return r;
    }
    const auto& m = reader->meta();
    r.violations = validate_layout_against(m.layout, m.seq_len);

    for (std::size_t l = 0; l < m.n_layers; ++l) {
        std::uintmax_t layer_bytes = 0;
        for (const char* kind : {"attention", "values", "hidden_norms"}) {
            if (std::string(kind) != "attention" && !m.has(kind)) continue;
            std::vector<float> raw;
            try {
                raw = reader->load_raw(kind, l);
            } catch (const Error& e) {
                r.violations.push_back({e.code(), std::string(kind) + " layer " + std::to_string(l), e.what()});
                continue;
            }
            const std::uintmax_t bytes = raw.size() * sizeof(float);
            layer_bytes += bytes;
            r.peak_resident_bytes = std::max(r.peak_resident_bytes, bytes);
            if (std::string(kind) != "attention") {
                for (std::size_t i = 0; i < raw.size(); ++i)
                    if (!std::isfinite(raw[i])) {
                        r.violations.push_back({"non-finite", std::string(kind) + " layer " + std::to_string(l), "entry " + std::to_string(i)});
                        break;
                    }
                continue;
            }
            const std::size_t n = m.seq_len;
            for (std::size_t h = 0; h < m.n_heads; ++h)
                for (std::size_t q = 0; q < n; ++q) {
                    const float* row = raw.data() + (h * n + q) * n;
                    const std::string where = "layer " + std::to_string(l) + " head " + std::to_string(h) + " row " + std::to_string(q);
                    double mass = 0.0;
                    bool bad = false;
                    for (std::size_t k = 0; k < n; ++k) {
                        if (!std::isfinite(row[k]) || row[k] < 0.0f) bad = true;
                        else if (k > q && row[k] != 0.0f) r.violations.push_back({"causal-violation", where, "key " + std::to_string(k)});
                        else mass += row[k];
                    }
                    if (bad) r.violations.push_back({"non-finite", where, "negative or non-finite entry"});
                    else if (std::abs(mass - 1.0) > m.row_tolerance) r.violations.push_back({"row-mass", where, "mass " + std::to_string(mass)});
                }
        }
        r.max_layer_bytes = std::max(r.max_layer_bytes, layer_bytes);
        ++r.layers_checked;
    }
    return r;
}

/// FNV-1a over meta-listed payload bytes, in manifest order.
inline std::uint64_t trace_checksum(const fs::path& dir) {
    const auto m = read_trace_meta(dir);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& p : m.payloads)
        for (std::uint8_t b : detail::read_file(dir / p.file)) {
            h ^= b;
            h *= 0x100000001b3ULL;
        }
    return h;
}

}  // namespace delimlab
