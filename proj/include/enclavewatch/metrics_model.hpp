// SPDX-License-Identifier: Apache-2.0
#pragma once

// Shared metric data model: label sets, samples, families and series identity.

#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace ew {

class ModelError : public std::runtime_error {
public:
    enum class Code { DuplicateLabel, InvalidLabelName, InvalidMetricName };

    ModelError(Code code, const std::string& what) : std::runtime_error(what), code_(code) {}
    Code code() const noexcept { return code_; }

private:
    Code code_;
};

/// True when `s` matches `[a-zA-Z_][a-zA-Z0-9_]*`.
bool is_identifier(std::string_view s) noexcept;

using LabelPair = std::pair<std::string, std::string>;

/// Label pairs in canonical form: strictly sorted by name, names unique and valid.
/// Only constructible through canonicalize_labels() (or the empty default).
class LabelSet {
public:
    LabelSet() = default;

    const std::vector<LabelPair>& pairs() const noexcept { return pairs_; }
    bool empty() const noexcept { return pairs_.empty(); }
    std::size_t size() const noexcept { return pairs_.size(); }
    auto begin() const noexcept { return pairs_.begin(); }
    auto end() const noexcept { return pairs_.end(); }

    /// Value of `name`, or nullptr when absent.
    const std::string* find(std::string_view name) const noexcept;

    /// Returns a copy with `name` set to `value` (replacing an existing value).
    LabelSet with(std::string_view name, std::string_view value) const;
    /// Returns a copy restricted to the given label names.
    LabelSet project(const std::vector<std::string>& names) const;

    friend bool operator==(const LabelSet&, const LabelSet&) = default;
    friend auto operator<=>(const LabelSet&, const LabelSet&) = default;

private:
    friend LabelSet canonicalize_labels(std::vector<LabelPair> pairs);
    std::vector<LabelPair> pairs_;
};

/// Sorts the pairs by name; throws ModelError on duplicate or malformed names.
LabelSet canonicalize_labels(std::vector<LabelPair> pairs);

/// Renders `{a="1",b="2"}` (empty string for an empty set). Values are not escaped.
std::string to_string(const LabelSet& labels);

struct Sample {
    /// Exposition samples may omit the timestamp; the scraper fills it in.
    static constexpr std::int64_t kNoTimestamp = std::numeric_limits<std::int64_t>::min();

    std::int64_t timestamp_ms = kNoTimestamp;
    double value = 0.0;

    bool has_timestamp() const noexcept { return timestamp_ms != kNoTimestamp; }
    friend bool operator==(const Sample&, const Sample&) = default;
};

enum class MetricKind { counter, gauge };

std::string_view to_string(MetricKind kind) noexcept;

struct Series {
    LabelSet labels;
    Sample sample;
    friend bool operator==(const Series&, const Series&) = default;
};

struct MetricFamily {
    std::string name;
    MetricKind kind = MetricKind::gauge;
    std::string help;
    std::vector<Series> series;

    friend bool operator==(const MetricFamily&, const MetricFamily&) = default;
};

/// Name of the sample lines for a family: counters carry the `_total` suffix.
std::string sample_name(const MetricFamily& family);

/// FNV-1a 64-bit.
std::uint64_t fnv1a64(std::string_view bytes) noexcept;

/// Canonical byte encoding `name \0 l1 \1 v1 \0 l2 \1 v2 ...`.
std::string canonical_encoding(std::string_view name, const LabelSet& labels);

struct SeriesKey {
    std::string metric_name;
    LabelSet labels;
    std::uint64_t id = 0;

    friend bool operator==(const SeriesKey& a, const SeriesKey& b) {
        return a.metric_name == b.metric_name && a.labels == b.labels;
    }
};

/// Builds the key; `id` is fnv1a64(canonical_encoding(name, labels)).
SeriesKey series_key(std::string_view name, LabelSet labels);

}  // namespace ew
