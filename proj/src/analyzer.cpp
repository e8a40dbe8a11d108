// SPDX-License-Identifier: Apache-2.0
#include "enclavewatch/analyzer.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include <fmt/format.h>

#include "enclavewatch/log.hpp"

namespace ew::analyze {

std::string_view to_string(Comparator c) noexcept {
    switch (c) {
        case Comparator::gt: return ">";
        case Comparator::lt: return "<";
        case Comparator::ge: return ">=";
        case Comparator::le: return "<=";
    }
    return "?";
}

std::string_view to_string(Severity s) noexcept {
    switch (s) {
        case Severity::info: return "info";
        case Severity::warning: return "warning";
        case Severity::critical: return "critical";
    }
    return "?";
}

std::string_view to_string(AlertState s) noexcept {
    return s == AlertState::firing ? "firing" : "resolved";
}

std::optional<Comparator> parse_comparator(std::string_view text) noexcept {
    if (text == ">") return Comparator::gt;
    if (text == "<") return Comparator::lt;
    if (text == ">=" || text == "≥") return Comparator::ge;
    if (text == "<=" || text == "≤") return Comparator::le;
    return std::nullopt;
}

std::optional<Severity> parse_severity(std::string_view text) noexcept {
    if (text == "info") return Severity::info;
    if (text == "warning") return Severity::warning;
    if (text == "critical") return Severity::critical;
    return std::nullopt;
}

std::optional<AlertState> parse_alert_state(std::string_view text) noexcept {
    if (text == "firing") return AlertState::firing;
    if (text == "resolved") return AlertState::resolved;
    return std::nullopt;
}

bool violates(Comparator c, double value, double threshold) noexcept {
    switch (c) {
        case Comparator::gt: return value > threshold;
        case Comparator::lt: return value < threshold;
        case Comparator::ge: return value >= threshold;
        case Comparator::le: return value <= threshold;
    }
    return false;
}

void validate(const ThresholdRule& rule) {
    auto bad = [&](const std::string& why) {
        throw AnalyzerError(AnalyzerError::Code::InvalidRule, "rule '" + rule.id + "': " + why);
    };
    if (rule.id.empty()) bad("empty id");
    if (!rule.query.agg) bad("query needs an aggregation");
    if (rule.query.selector.metric_name.empty()) bad("query needs a metric name");
    if (rule.query.step_ms <= 0) bad("step must be positive");
    if (rule.window_ms <= 0 || rule.stride_ms <= 0) bad("window and stride must be positive");
    if (rule.stride_ms > rule.window_ms) bad("stride exceeds window");
    if (rule.query.step_ms > rule.window_ms) bad("step exceeds window");
    if (!std::isfinite(rule.threshold)) bad("threshold must be finite");
    if (rule.min_violation_points == 0) bad("min_violation_points must be at least 1");
    if (rule.query.agg->op == tsdb::AggOp::quantile && !(rule.query.agg->q >= 0 && rule.query.agg->q <= 1)) {
        bad("quantile outside [0, 1]");
    }
}

std::vector<AnomalyAlert> evaluate_window(const ThresholdRule& rule, std::int64_t now_ms, const tsdb::Store& store,
                                          const AlertRegistry* prior) {
    validate(rule);
    tsdb::QuerySpec q = rule.query;
    q.end_ms = now_ms;
    // Grid points whose lookback intervals tile (now - window, now].
    q.start_ms = std::clamp<std::int64_t>(now_ms - rule.window_ms + q.step_ms, 0, std::max<std::int64_t>(now_ms, 0));
    q.end_ms = std::max(q.end_ms, q.start_ms);

    const bool upward = rule.comparator == Comparator::gt || rule.comparator == Comparator::ge;
    std::vector<AnomalyAlert> out;
    std::set<LabelSet> quiet;
    std::map<LabelSet, double> last_value;
    for (const auto& group : store.evaluate(q)) {
        std::uint32_t count = 0;
        double extreme = upward ? -INFINITY : INFINITY;
        for (const auto& p : group.points) {
            if (violates(rule.comparator, p.value, rule.threshold)) {
                ++count;
                extreme = upward ? std::max(extreme, p.value) : std::min(extreme, p.value);
            }
        }
        if (!group.points.empty()) {
            last_value[group.group] = group.points.back().value;
        }
        if (count == 0) {
            quiet.insert(group.group);
        }
        if (count >= rule.min_violation_points) {
            out.push_back(AnomalyAlert{rule.id, now_ms - rule.window_ms, now_ms, extreme, rule.threshold,
                                       rule.severity, AlertState::firing, group.group, count});
        }
    }
    if (prior) {
        std::set<LabelSet> present;
        for (const auto& [g, _] : last_value) {
            present.insert(g);
        }
        for (const auto& g : prior->firing_groups(rule.id)) {
            // A group that vanished from the window has no violations either.
            if (quiet.contains(g) || !present.contains(g)) {
                auto it = last_value.find(g);
                double observed = it == last_value.end() ? rule.threshold : it->second;
                out.push_back(AnomalyAlert{rule.id, now_ms - rule.window_ms, now_ms, observed, rule.threshold,
                                           rule.severity, AlertState::resolved, g, 0});
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------

std::vector<AnomalyAlert> AlertRegistry::apply(const std::vector<AnomalyAlert>& alerts) {
    std::lock_guard lock(mu_);
    std::vector<AnomalyAlert> dispatched;
    for (const auto& a : alerts) {
        auto key = std::make_pair(a.rule_id, a.labels);
        auto it = alerts_.find(key);
        const bool was_firing = it != alerts_.end() && it->second.state == AlertState::firing;
        if (a.state == AlertState::firing) {
            alerts_[key] = a;
            if (!was_firing) {
                dispatched.push_back(a);
            }
        } else if (was_firing) {
            it->second = a;
            dispatched.push_back(a);
        }
    }
    return dispatched;
}

std::vector<AnomalyAlert> AlertRegistry::list(std::optional<AlertState> state) const {
    std::lock_guard lock(mu_);
    std::vector<AnomalyAlert> out;
    for (const auto& [_, a] : alerts_) {
        if (!state || a.state == *state) {
            out.push_back(a);
        }
    }
    return out;
}

bool AlertRegistry::is_firing(const std::string& rule_id, const LabelSet& group) const {
    std::lock_guard lock(mu_);
    auto it = alerts_.find({rule_id, group});
    return it != alerts_.end() && it->second.state == AlertState::firing;
}

std::vector<LabelSet> AlertRegistry::firing_groups(const std::string& rule_id) const {
    std::lock_guard lock(mu_);
    std::vector<LabelSet> out;
    for (const auto& [key, a] : alerts_) {
        if (key.first == rule_id && a.state == AlertState::firing) {
            out.push_back(key.second);
        }
    }
    return out;
}

std::string format_alert(const AnomalyAlert& a) {
    std::string out = fmt::format("event=alert rule={} state={} severity={} observed={} threshold={} "
                                  "window_start_ms={} window_end_ms={} violations={}",
                                  log::kv_value(a.rule_id), to_string(a.state), to_string(a.severity), a.observed,
                                  a.threshold, a.window_start_ms, a.window_end_ms, a.violations);
    for (const auto& [k, v] : a.labels) {
        out += fmt::format(" label_{}={}", k, log::kv_value(v));
    }
    return out;
}

AlertSink log_sink() {
    return [](const AnomalyAlert& a) {
        if (a.state == AlertState::firing && a.severity != Severity::info) {
            log::get()->warn("{}", format_alert(a));
        } else {
            log::get()->info("{}", format_alert(a));
        }
    };
}

// ---------------------------------------------------------------------------

BoxPlotSummary boxplot(const tsdb::Selector& selector, std::int64_t start_ms, std::int64_t end_ms,
                       const tsdb::Store& store) {
    tsdb::QuerySpec q;
    q.selector = selector;
    q.start_ms = start_ms;
    q.end_ms = end_ms;
    std::vector<double> values;
    for (const auto& s : store.select_range(q)) {
        for (const auto& smp : s.samples) {
            values.push_back(smp.value);
        }
    }
    if (values.empty()) {
        throw AnalyzerError(AnalyzerError::Code::EmptyWindow,
                            "no samples for " + selector.metric_name + " in the requested window");
    }
    std::sort(values.begin(), values.end());
    BoxPlotSummary out;
    out.selector = selector;
    out.start_ms = start_ms;
    out.end_ms = end_ms;
    out.min = values.front();
    out.q1 = tsdb::quantile_sorted(values, 0.25);
    out.median = tsdb::quantile_sorted(values, 0.5);
    out.q3 = tsdb::quantile_sorted(values, 0.75);
    out.max = values.back();
    out.count = values.size();
    return out;
}

std::vector<BoxPlotSummary> boxplots(const std::vector<tsdb::Selector>& selectors, std::int64_t start_ms,
                                     std::int64_t end_ms, const tsdb::Store& store) {
    std::vector<tsdb::Selector> wanted = selectors;
    if (wanted.empty()) {
        for (const auto& name : store.metric_names()) {
            if (name.starts_with("sgx_")) {
                wanted.push_back(tsdb::Selector{name, {}});
            }
        }
    }
    std::vector<BoxPlotSummary> out;
    for (const auto& sel : wanted) {
        try {
            out.push_back(boxplot(sel, start_ms, end_ms, store));
        } catch (const AnalyzerError& e) {
            if (e.code() != AnalyzerError::Code::EmptyWindow) {
                throw;
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------

Analyzer::Analyzer(std::vector<ThresholdRule> rules, std::shared_ptr<const tsdb::Store> store,
                   std::vector<AlertSink> sinks, std::int64_t start_ms)
    : rules_(std::move(rules)), store_(std::move(store)), sinks_(std::move(sinks)) {
    std::set<std::string> ids;
    for (const auto& r : rules_) {
        validate(r);
        if (!ids.insert(r.id).second) {
            throw AnalyzerError(AnalyzerError::Code::InvalidRule, "duplicate rule id '" + r.id + "'");
        }
        next_due_.push_back(start_ms + r.stride_ms);
    }
}

Analyzer::~Analyzer() {
    stop();
}

std::vector<AnomalyAlert> Analyzer::step(std::int64_t now_ms) {
    std::vector<std::size_t> due;
    {
        std::lock_guard lock(mu_);
        for (std::size_t i = 0; i < rules_.size(); ++i) {
            if (next_due_[i] <= now_ms) {
                due.push_back(i);
                while (next_due_[i] <= now_ms) {
                    next_due_[i] += rules_[i].stride_ms;
                }
                ++evaluations_[rules_[i].id];
            }
        }
    }
    std::vector<AnomalyAlert> dispatched;
    for (auto i : due) {
        const auto& rule = rules_[i];
        std::vector<AnomalyAlert> transitions;
        try {
            transitions = registry_.apply(evaluate_window(rule, now_ms, *store_, &registry_));
        } catch (const std::exception& e) {
            log::get()->warn("event=rule_failed rule={} error={}", log::kv_value(rule.id), log::kv_value(e.what()));
            continue;
        }
        for (const auto& alert : transitions) {
            for (const auto& sink : sinks_) {
                try {
                    sink(alert);
                } catch (const std::exception& e) {
                    log::get()->warn("event=alert_sink_failed rule={} error={}", log::kv_value(rule.id),
                                     log::kv_value(e.what()));
                }
            }
            dispatched.push_back(alert);
        }
    }
    return dispatched;
}

std::map<std::string, std::size_t> Analyzer::evaluation_counts() const {
    std::lock_guard lock(mu_);
    return evaluations_;
}

void Analyzer::start(std::shared_ptr<const Clock> clock) {
    std::lock_guard lock(mu_);
    if (running_) {
        return;
    }
    running_ = true;
    auto now = clock->now_ms();
    for (std::size_t i = 0; i < rules_.size(); ++i) {
        next_due_[i] = now + rules_[i].stride_ms;
    }
    thread_ = std::thread([this, clock] {
        std::unique_lock lock(mu_);
        while (running_) {
            auto now = clock->now_ms();
            auto next = std::min_element(next_due_.begin(), next_due_.end());
            if (next == next_due_.end()) {
                cv_.wait(lock, [this] { return !running_; });
                break;
            }
            if (*next > now) {
                cv_.wait_for(lock, std::chrono::milliseconds(*next - now));
                continue;
            }
            lock.unlock();
            step(now);
            lock.lock();
        }
    });
}

void Analyzer::stop() {
    {
        std::lock_guard lock(mu_);
        running_ = false;
    }
    cv_.notify_all();
    if (thread_.joinable()) {
        thread_.join();
    }
}

}  // namespace ew::analyze
