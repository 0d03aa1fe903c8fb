// Copyright (C) 2026 delimlab contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstring>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "delimlab/error.hpp"

namespace delimlab {

using Vector = std::vector<double>;

/// Dense row-major matrix of doubles. All analysis-side math runs in f64;
/// only trace payloads drop to f32.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_) {
            fail_data("dimension-mismatch", "matrix data length " + std::to_string(data_.size()) +
                                                " != " + std::to_string(rows_) + "x" + std::to_string(cols_));
        }
    }

    Matrix(std::initializer_list<std::initializer_list<double>> rows) {
        rows_ = rows.size();
        cols_ = rows_ ? rows.begin()->size() : 0;
        data_.reserve(rows_ * cols_);
        for (const auto& r : rows) {
            if (r.size() != cols_) fail_data("dimension-mismatch", "ragged matrix literal");
            data_.insert(data_.end(), r.begin(), r.end());
        }
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }

    double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }

    bool all_finite() const noexcept {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    /// Value equality on entries (0.0 == -0.0).
    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

/// Byte-level equality, stricter than operator== (distinguishes -0.0, NaN payloads).
inline bool bit_identical(const Matrix& a, const Matrix& b) noexcept {
    return a.rows() == b.rows() && a.cols() == b.cols() &&
           (a.size() == 0 || std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(double)) == 0);
}

/// Standard product. Each output entry accumulates over k in ascending order,
/// so results are bit-reproducible across runs and thread counts.
inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        fail_data("dimension-mismatch", "matmul " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                                            " by " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
    }
    Matrix out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto dst = out.row(i);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            auto src = b.row(k);
            for (std::size_t j = 0; j < b.cols(); ++j) dst[j] += aik * src[j];
        }
    }
    return out;
}

inline Matrix transpose(const Matrix& m) {
    Matrix out(m.cols(), m.rows());
    for (std::size_t i = 0; i < m.rows(); ++i)
        for (std::size_t j = 0; j < m.cols(); ++j) out(j, i) = m(i, j);
    return out;
}

inline double dot(std::span<const double> a, std::span<const double> b) noexcept {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double l2_norm(std::span<const double> v) noexcept { return std::sqrt(dot(v, v)); }

/// Softmax over the `visible` indices of `logits`; every other entry is exactly 0.
/// Uses max subtraction. `visible` need not be sorted but must be unique and in range.
inline Vector masked_softmax_row(std::span<const double> logits, std::span<const std::size_t> visible) {
    if (visible.empty()) fail_data("empty-visible-set", "softmax row has no visible entries");
    std::vector<char> seen(logits.size(), 0);
    double max_logit = -INFINITY;
    for (std::size_t idx : visible) {
        if (idx >= logits.size()) fail_data("index-out-of-range", "visible index " + std::to_string(idx));
        if (seen[idx]) fail_data("duplicate-index", "visible index " + std::to_string(idx) + " repeated");
        seen[idx] = 1;
        if (!std::isfinite(logits[idx])) fail_data("non-finite-logit", "logit at " + std::to_string(idx));
        max_logit = std::max(max_logit, logits[idx]);
    }
    Vector out(logits.size(), 0.0);
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        if (!seen[i]) continue;
        out[i] = std::exp(logits[i] - max_logit);
        sum += out[i];
    }
    for (std::size_t i = 0; i < logits.size(); ++i)
        if (seen[i]) out[i] /= sum;
    return out;
}

/// In-place causal softmax of the first `visible` entries of `row`; the tail is zeroed.
/// Same arithmetic as masked_softmax_row over {0, ..., visible-1}.
inline void causal_softmax_inplace(std::span<double> row, std::size_t visible) {
    if (visible == 0) fail_data("empty-visible-set", "causal softmax row has no visible entries");
    double max_logit = -INFINITY;
    for (std::size_t i = 0; i < visible; ++i) {
        if (!std::isfinite(row[i])) fail_data("non-finite-logit", "logit at " + std::to_string(i));
        max_logit = std::max(max_logit, row[i]);
    }
    double sum = 0.0;
    for (std::size_t i = 0; i < visible; ++i) {
        row[i] = std::exp(row[i] - max_logit);
        sum += row[i];
    }
    for (std::size_t i = 0; i < visible; ++i) row[i] /= sum;
    for (std::size_t i = visible; i < row.size(); ++i) row[i] = 0.0;
}

/// Shannon entropy in nats with 0 ln 0 := 0.
inline double shannon_entropy(std::span<const double> probs) noexcept {
    double h = 0.0;
    for (double p : probs)
        if (p > 0.0) h -= p * std::log(p);
    return h;
}

}  // namespace delimlab
