// SPDX-License-Identifier: Apache-2.0
#pragma once

// Text exposition format (OpenMetrics subset) served on every /metrics endpoint.
//
//   # HELP <name> <escaped help>
//   # TYPE <name> counter|gauge
//   <name>[_total]{k="v",...} <value> [<timestamp_ms>]
//   ...
//   # EOF
//
// Counter sample lines carry the `_total` suffix; the family name does not.
// Help escapes `\\` and `\n`; label values additionally escape `\"`.

#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "enclavewatch/metrics_model.hpp"

namespace ew::exposition {

inline constexpr std::string_view kContentType =
    "application/openmetrics-text; version=1.0.0; charset=utf-8";

struct Document {
    std::vector<MetricFamily> families;
    bool terminated = true;

    friend bool operator==(const Document&, const Document&) = default;
};

class DecodeError : public std::runtime_error {
public:
    enum class Code { MissingEof, SyntaxError, TypeLineMismatch, DuplicateSeries };

    DecodeError(Code code, std::size_t line, const std::string& reason);

    Code code() const noexcept { return code_; }
    /// 1-based line number, 0 when not tied to a line.
    std::size_t line() const noexcept { return line_; }

private:
    Code code_;
    std::size_t line_;
};

std::string_view to_string(DecodeError::Code code) noexcept;

/// Shortest decimal that round-trips to the same double; `+Inf`, `-Inf`, `NaN` literals.
std::string format_value(double v);

std::string escape_help(std::string_view s);
std::string escape_label_value(std::string_view s);

std::string encode(const Document& doc);
std::string encode(const std::vector<MetricFamily>& families);

Document decode(std::string_view text);

}  // namespace ew::exposition
