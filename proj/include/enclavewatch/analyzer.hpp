// SPDX-License-Identifier: Apache-2.0
#pragma once

// Threshold rules evaluated over trailing windows, the alert state machine, and
// five-number summaries of stored metrics.

#include <condition_variable>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "enclavewatch/clock.hpp"
#include "enclavewatch/tsdb.hpp"

namespace ew::analyze {

class AnalyzerError : public std::runtime_error {
public:
    enum class Code { InvalidRule, EmptyWindow };

    AnalyzerError(Code code, const std::string& what) : std::runtime_error(what), code_(code) {}
    Code code() const noexcept { return code_; }

private:
    Code code_;
};

enum class Comparator { gt, lt, ge, le };
enum class Severity { info, warning, critical };
enum class AlertState { firing, resolved };

std::string_view to_string(Comparator c) noexcept;
std::string_view to_string(Severity s) noexcept;
std::string_view to_string(AlertState s) noexcept;
/// Accepts `>`, `<`, `>=`, `<=` and the Unicode forms `≥`, `≤`.
std::optional<Comparator> parse_comparator(std::string_view text) noexcept;
std::optional<Severity> parse_severity(std::string_view text) noexcept;
std::optional<AlertState> parse_alert_state(std::string_view text) noexcept;

bool violates(Comparator c, double value, double threshold) noexcept;

struct ThresholdRule {
    std::string id;
    /// Selector, step and aggregation; start and end are set per evaluation.
    tsdb::QuerySpec query;
    Comparator comparator = Comparator::gt;
    double threshold = 0;
    std::int64_t window_ms = 300'000;
    std::int64_t stride_ms = 60'000;
    std::uint32_t min_violation_points = 1;
    Severity severity = Severity::warning;
};

/// Throws AnalyzerError(InvalidRule).
void validate(const ThresholdRule& rule);

struct AnomalyAlert {
    std::string rule_id;
    std::int64_t window_start_ms = 0;
    std::int64_t window_end_ms = 0;
    /// Most extreme violating value (largest for > and >=, smallest for < and <=).
    double observed = 0;
    double threshold = 0;
    Severity severity = Severity::warning;
    AlertState state = AlertState::firing;
    LabelSet labels;
    /// Violating grid points in the window that produced this record.
    std::uint32_t violations = 0;

    friend bool operator==(const AnomalyAlert&, const AnomalyAlert&) = default;
};

class AlertRegistry;

/// Runs the rule's query over the trailing window ending at `now_ms` (the query
/// start is clipped at 0; the alert keeps the nominal window). Emits a firing alert
/// per group with at least min_violation_points violations, and a resolved alert for
/// each group `prior` lists as firing that has no violation left. Query errors
/// propagate as TsdbError.
std::vector<AnomalyAlert> evaluate_window(const ThresholdRule& rule, std::int64_t now_ms, const tsdb::Store& store,
                                          const AlertRegistry* prior = nullptr);

/// Latest alert per (rule id, group). Safe for concurrent readers.
class AlertRegistry {
public:
    /// Applies one evaluation's output and returns the transitions worth dispatching:
    /// a firing alert for a group not already firing, and every resolution. A repeat
    /// firing only refreshes the stored record.
    std::vector<AnomalyAlert> apply(const std::vector<AnomalyAlert>& alerts);

    std::vector<AnomalyAlert> list(std::optional<AlertState> state = std::nullopt) const;
    bool is_firing(const std::string& rule_id, const LabelSet& group) const;
    std::vector<LabelSet> firing_groups(const std::string& rule_id) const;

private:
    mutable std::mutex mu_;
    std::map<std::pair<std::string, LabelSet>, AnomalyAlert> alerts_;
};

using AlertSink = std::function<void(const AnomalyAlert&)>;

/// Single-line `key=value` rendering used by the log sink.
std::string format_alert(const AnomalyAlert& alert);
AlertSink log_sink();

struct BoxPlotSummary {
    tsdb::Selector selector;
    std::int64_t start_ms = 0;
    std::int64_t end_ms = 0;
    double min = 0, q1 = 0, median = 0, q3 = 0, max = 0;
    std::size_t count = 0;
};

/// Five-number summary of every raw sample in [start_ms, end_ms] across all matching
/// series. Throws AnalyzerError(EmptyWindow) when nothing matches.
BoxPlotSummary boxplot(const tsdb::Selector& selector, std::int64_t start_ms, std::int64_t end_ms,
                       const tsdb::Store& store);

/// Summaries for `selectors`, or for every `sgx_*` metric when the list is empty.
/// Selectors without data in the window are skipped.
std::vector<BoxPlotSummary> boxplots(const std::vector<tsdb::Selector>& selectors, std::int64_t start_ms,
                                     std::int64_t end_ms, const tsdb::Store& store);

/// Stride scheduler over a rule set. Drive with step() from a fake clock, or start().
class Analyzer {
public:
    /// Rules are validated here; the first evaluation of each happens one stride
    /// after `start_ms`.
    Analyzer(std::vector<ThresholdRule> rules, std::shared_ptr<const tsdb::Store> store,
             std::vector<AlertSink> sinks = {}, std::int64_t start_ms = 0);
    ~Analyzer();

    Analyzer(const Analyzer&) = delete;
    Analyzer& operator=(const Analyzer&) = delete;

    /// Evaluates every rule due at `now_ms`; returns the dispatched transitions.
    std::vector<AnomalyAlert> step(std::int64_t now_ms);

    void start(std::shared_ptr<const Clock> clock);
    void stop();

    const AlertRegistry& registry() const noexcept { return registry_; }
    const std::vector<ThresholdRule>& rules() const noexcept { return rules_; }
    /// Number of evaluations attempted per rule id, failed ones included.
    std::map<std::string, std::size_t> evaluation_counts() const;

private:
    std::vector<ThresholdRule> rules_;
    std::shared_ptr<const tsdb::Store> store_;
    std::vector<AlertSink> sinks_;
    AlertRegistry registry_;

    mutable std::mutex mu_;
    std::condition_variable cv_;
    std::vector<std::int64_t> next_due_;
    std::map<std::string, std::size_t> evaluations_;
    bool running_ = false;
    std::thread thread_;
};

}  // namespace ew::analyze
