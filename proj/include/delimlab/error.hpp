// Copyright (C) 2026 delimlab contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace delimlab {

/// Broad failure class. The CLI maps these onto exit codes.
enum class ErrorKind {
    config,  // bad user input: configs, specs, CLI flags
    data,    // bad numeric or on-disk data: shapes, traces, payloads
};

/// Exception carrying a stable, machine-parsable code such as
/// "dimension-mismatch" or "size-mismatch".
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, std::string code, const std::string& message)
        : std::runtime_error(code + ": " + message), kind_(kind), code_(std::move(code)) {}

    ErrorKind kind() const noexcept { return kind_; }
    const std::string& code() const noexcept { return code_; }

private:
    ErrorKind kind_;
    std::string code_;
};

[[noreturn]] inline void fail_config(std::string code, const std::string& message) {
    throw Error(ErrorKind::config, std::move(code), message);
}

[[noreturn]] inline void fail_data(std::string code, const std::string& message) {
    throw Error(ErrorKind::data, std::move(code), message);
}

}  // namespace delimlab
