// SPDX-License-Identifier: Apache-2.0
#include "enclavewatch/metrics_model.hpp"

#include <algorithm>

namespace ew {

namespace {

constexpr bool is_ident_start(char c) noexcept {
    return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c == '_';
}

constexpr bool is_ident_char(char c) noexcept {
    return is_ident_start(c) || (c >= '0' && c <= '9');
}

}  // namespace

bool is_identifier(std::string_view s) noexcept {
    if (s.empty() || !is_ident_start(s.front())) {
        return false;
    }
    return std::all_of(s.begin() + 1, s.end(), is_ident_char);
}

const std::string* LabelSet::find(std::string_view name) const noexcept {
    auto it = std::lower_bound(pairs_.begin(), pairs_.end(), name,
                               [](const LabelPair& p, std::string_view n) { return p.first < n; });
    if (it != pairs_.end() && it->first == name) {
        return &it->second;
    }
    return nullptr;
}

LabelSet LabelSet::with(std::string_view name, std::string_view value) const {
    if (!is_identifier(name)) {
        throw ModelError(ModelError::Code::InvalidLabelName, "invalid label name '" + std::string(name) + "'");
    }
    LabelSet out = *this;
    auto it = std::lower_bound(out.pairs_.begin(), out.pairs_.end(), name,
                               [](const LabelPair& p, std::string_view n) { return p.first < n; });
    if (it != out.pairs_.end() && it->first == name) {
        it->second = value;
    } else {
        out.pairs_.emplace(it, std::string(name), std::string(value));
    }
    return out;
}

LabelSet LabelSet::project(const std::vector<std::string>& names) const {
    LabelSet out;
    for (const auto& p : pairs_) {
        if (std::find(names.begin(), names.end(), p.first) != names.end()) {
            out.pairs_.push_back(p);
        }
    }
    return out;
}

LabelSet canonicalize_labels(std::vector<LabelPair> pairs) {
    for (const auto& [name, value] : pairs) {
        if (!is_identifier(name)) {
            throw ModelError(ModelError::Code::InvalidLabelName, "invalid label name '" + name + "'");
        }
    }
    std::stable_sort(pairs.begin(), pairs.end(),
                     [](const LabelPair& a, const LabelPair& b) { return a.first < b.first; });
    auto dup = std::adjacent_find(pairs.begin(), pairs.end(),
                                  [](const LabelPair& a, const LabelPair& b) { return a.first == b.first; });
    if (dup != pairs.end()) {
        throw ModelError(ModelError::Code::DuplicateLabel, "duplicate label name '" + dup->first + "'");
    }
    LabelSet out;
    out.pairs_ = std::move(pairs);
    return out;
}

std::string to_string(const LabelSet& labels) {
    if (labels.empty()) {
        return {};
    }
    std::string out = "{";
    bool first = true;
    for (const auto& [name, value] : labels) {
        if (!first) {
            out += ',';
        }
        first = false;
        out += name;
        out += "=\"";
        out += value;
        out += '"';
    }
    out += '}';
    return out;
}

std::string_view to_string(MetricKind kind) noexcept {
    return kind == MetricKind::counter ? "counter" : "gauge";
}

std::string sample_name(const MetricFamily& family) {
    return family.kind == MetricKind::counter ? family.name + "_total" : family.name;
}

std::uint64_t fnv1a64(std::string_view bytes) noexcept {
    std::uint64_t hash = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        hash ^= c;
        hash *= 0x100000001b3ULL;
    }
    return hash;
}

std::string canonical_encoding(std::string_view name, const LabelSet& labels) {
    std::string out(name);
    for (const auto& [k, v] : labels) {
        out += '\x00';
        out += k;
        out += '\x01';
        out += v;
    }
    return out;
}

SeriesKey series_key(std::string_view name, LabelSet labels) {
    if (!is_identifier(name)) {
        throw ModelError(ModelError::Code::InvalidMetricName, "invalid metric name '" + std::string(name) + "'");
    }
    SeriesKey key;
    key.metric_name = std::string(name);
    key.id = fnv1a64(canonical_encoding(name, labels));
    key.labels = std::move(labels);
    return key;
}

}  // namespace ew
