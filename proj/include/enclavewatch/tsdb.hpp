// SPDX-License-Identifier: Apache-2.0
#pragma once

// Embedded time-series store: per-series chunks of at most 240 samples, label
// selectors, range selection and grid-aligned aggregation.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <regex>
#include <shared_mutex>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "enclavewatch/metrics_model.hpp"

namespace ew::tsdb {

inline constexpr std::size_t kChunkCapacity = 240;

class TsdbError : public std::runtime_error {
public:
    enum class Code { OutOfOrderSample, NonFiniteValue, BadRegex, QuantileOutOfRange, InvalidQuery, SnapshotError };

    TsdbError(Code code, const std::string& what) : std::runtime_error(what), code_(code) {}
    Code code() const noexcept { return code_; }

private:
    Code code_;
};

struct SeriesChunk {
    std::int64_t start_ms = 0;
    std::int64_t end_ms = 0;
    std::vector<Sample> samples;
};

enum class MatchOp { equal, not_equal, regex };

struct Matcher {
    std::string label;
    MatchOp op = MatchOp::equal;
    std::string value;
};

struct Selector {
    std::string metric_name;
    std::vector<Matcher> matchers;
};

enum class AggOp { sum, avg, min, max, count, rate, quantile };

std::string_view to_string(AggOp op) noexcept;
std::optional<AggOp> parse_agg(std::string_view name) noexcept;

struct Aggregation {
    AggOp op = AggOp::sum;
    double q = 0.5;  // quantile only
    std::vector<std::string> group_by;
};

struct QuerySpec {
    Selector selector;
    std::int64_t start_ms = 0;
    std::int64_t end_ms = 0;
    std::int64_t step_ms = 1;
    std::optional<Aggregation> agg;
};

struct SeriesSamples {
    SeriesKey key;
    std::vector<Sample> samples;
};

struct Point {
    std::int64_t timestamp_ms = 0;
    double value = 0;
    friend bool operator==(const Point&, const Point&) = default;
};

struct GroupResult {
    LabelSet group;
    std::vector<Point> points;
};

/// Selector with regexes compiled once. Missing labels match as the empty string;
/// regexes must match the whole value.
class CompiledSelector {
public:
    /// Throws TsdbError(BadRegex).
    explicit CompiledSelector(const Selector& selector);
    bool matches(const SeriesKey& key) const;

private:
    std::string name_;
    std::vector<std::pair<Matcher, std::optional<std::regex>>> matchers_;
};

/// Per-second increase over time-ordered counter samples. A decrease is treated as
/// a reset: the value before the drop is added back before differencing. Needs at
/// least two samples with distinct timestamps.
std::optional<double> counter_rate(std::span<const Sample> samples);

/// Linear interpolation at position (n-1)*q over ascending `sorted`; `sorted` non-empty.
double quantile_sorted(std::span<const double> sorted, double q);

class Store {
public:
    Store() = default;
    ~Store();

    Store(const Store&) = delete;
    Store& operator=(const Store&) = delete;

    /// Throws TsdbError(OutOfOrderSample | NonFiniteValue).
    void append(const SeriesKey& key, Sample sample);
    /// Validates every sample first; either all are stored or none.
    void append_batch(std::span<const std::pair<SeriesKey, Sample>> batch);

    std::vector<SeriesSamples> select_range(const QuerySpec& q) const;
    std::vector<GroupResult> evaluate(const QuerySpec& q) const;

    /// Drops chunks whose last sample is older than now_ms - retention_ms.
    std::size_t gc(std::int64_t retention_ms, std::int64_t now_ms);

    std::vector<SeriesChunk> chunks(const SeriesKey& key) const;
    std::vector<SeriesKey> series(const Selector& selector) const;
    /// Distinct metric names, sorted.
    std::vector<std::string> metric_names() const;
    std::size_t series_count() const;
    std::size_t sample_count() const;

    /// Replays `path` if it exists (a truncated tail record is ignored), then appends
    /// every subsequently stored sample to it.
    void attach_log(const std::filesystem::path& path);
    void flush();
    /// Full dump in the same format; written to a temporary file and renamed.
    void write_snapshot(const std::filesystem::path& path) const;
    /// Loads a snapshot or log into this store.
    void load(const std::filesystem::path& path);

private:
    struct SeriesData {
        SeriesKey key;
        std::vector<SeriesChunk> chunks;
        std::int64_t last_ms = Sample::kNoTimestamp;
    };

    void validate_locked(const SeriesKey& key, const Sample& sample, const SeriesData* data) const;
    void store_locked(const SeriesKey& key, Sample sample);
    void log_locked(const SeriesKey& key, std::string_view canonical, const Sample& sample);
    std::vector<const SeriesData*> match_locked(const Selector& selector) const;
    void replay(const std::filesystem::path& path, bool as_log);

    mutable std::shared_mutex mu_;
    // Keyed by canonical encoding so iteration order is the deterministic series order.
    std::map<std::string, SeriesData, std::less<>> series_;

    std::ofstream log_;
    std::unordered_map<std::string, std::uint64_t> log_ids_;
};

void validate(const QuerySpec& q);

}  // namespace ew::tsdb
