// SPDX-License-Identifier: Apache-2.0
#include "enclavewatch/tsdb.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <mutex>
#include <set>

namespace ew::tsdb {

namespace {

constexpr char kMagic[4] = {'E', 'W', 'T', '1'};
constexpr std::uint8_t kSeriesRecord = 'S';
constexpr std::uint8_t kPointRecord = 'P';
constexpr std::int64_t kMaxGridPoints = 100000;

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) {
        out += static_cast<char>((v >> (8 * i)) & 0xff);
    }
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        out += static_cast<char>((v >> (8 * i)) & 0xff);
    }
}

void put_str(std::string& out, std::string_view s) {
    put_u32(out, static_cast<std::uint32_t>(s.size()));
    out.append(s);
}

std::string series_record(std::uint64_t id, const SeriesKey& key) {
    std::string out;
    out += static_cast<char>(kSeriesRecord);
    put_u64(out, id);
    put_str(out, key.metric_name);
    put_u32(out, static_cast<std::uint32_t>(key.labels.size()));
    for (const auto& [k, v] : key.labels) {
        put_str(out, k);
        put_str(out, v);
    }
    return out;
}

std::string point_record(std::uint64_t id, const Sample& s) {
    std::string out;
    out += static_cast<char>(kPointRecord);
    put_u64(out, id);
    put_u64(out, static_cast<std::uint64_t>(s.timestamp_ms));
    put_u64(out, std::bit_cast<std::uint64_t>(s.value));
    return out;
}

class Reader {
public:
    explicit Reader(std::string data) : data_(std::move(data)) {}

    bool at_end() const noexcept { return pos_ >= data_.size(); }
    std::size_t pos() const noexcept { return pos_; }

    bool u8(std::uint8_t& v) {
        if (pos_ + 1 > data_.size()) {
            return false;
        }
        v = static_cast<std::uint8_t>(data_[pos_++]);
        return true;
    }

    bool u32(std::uint32_t& v) {
        if (pos_ + 4 > data_.size()) {
            return false;
        }
        v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(data_[pos_ + i])) << (8 * i);
        }
        pos_ += 4;
        return true;
    }

    bool u64(std::uint64_t& v) {
        if (pos_ + 8 > data_.size()) {
            return false;
        }
        v = 0;
        for (int i = 0; i < 8; ++i) {
            v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(data_[pos_ + i])) << (8 * i);
        }
        pos_ += 8;
        return true;
    }

    bool str(std::string& s) {
        std::uint32_t n = 0;
        if (!u32(n) || pos_ + n > data_.size()) {
            return false;
        }
        s.assign(data_, pos_, n);
        pos_ += n;
        return true;
    }

private:
    std::string data_;
    std::size_t pos_ = 0;
};

}  // namespace

std::string_view to_string(AggOp op) noexcept {
    switch (op) {
        case AggOp::sum: return "sum";
        case AggOp::avg: return "avg";
        case AggOp::min: return "min";
        case AggOp::max: return "max";
        case AggOp::count: return "count";
        case AggOp::rate: return "rate";
        case AggOp::quantile: return "quantile";
    }
    return "unknown";
}

std::optional<AggOp> parse_agg(std::string_view name) noexcept {
    for (auto op : {AggOp::sum, AggOp::avg, AggOp::min, AggOp::max, AggOp::count, AggOp::rate, AggOp::quantile}) {
        if (to_string(op) == name) {
            return op;
        }
    }
    return std::nullopt;
}

CompiledSelector::CompiledSelector(const Selector& selector) : name_(selector.metric_name) {
    for (const auto& m : selector.matchers) {
        std::optional<std::regex> re;
        if (m.op == MatchOp::regex) {
            try {
                re.emplace(m.value, std::regex::ECMAScript);
            } catch (const std::regex_error& e) {
                throw TsdbError(TsdbError::Code::BadRegex, "bad regex '" + m.value + "': " + e.what());
            }
        }
        matchers_.emplace_back(m, std::move(re));
    }
}

bool CompiledSelector::matches(const SeriesKey& key) const {
    if (key.metric_name != name_) {
        return false;
    }
    static const std::string kEmpty;
    for (const auto& [m, re] : matchers_) {
        const std::string* found = key.labels.find(m.label);
        const std::string& value = found ? *found : kEmpty;
        switch (m.op) {
            case MatchOp::equal:
                if (value != m.value) return false;
                break;
            case MatchOp::not_equal:
                if (value == m.value) return false;
                break;
            case MatchOp::regex:
                if (!std::regex_match(value, *re)) return false;
                break;
        }
    }
    return true;
}

std::optional<double> counter_rate(std::span<const Sample> samples) {
    if (samples.size() < 2) {
        return std::nullopt;
    }
    const auto& first = samples.front();
    const auto& last = samples.back();
    if (last.timestamp_ms <= first.timestamp_ms) {
        return std::nullopt;
    }
    double resets = 0;
    for (std::size_t i = 1; i < samples.size(); ++i) {
        if (samples[i].value < samples[i - 1].value) {
            resets += samples[i - 1].value;
        }
    }
    double seconds = static_cast<double>(last.timestamp_ms - first.timestamp_ms) / 1000.0;
    return (last.value + resets - first.value) / seconds;
}

double quantile_sorted(std::span<const double> sorted, double q) {
    double pos = static_cast<double>(sorted.size() - 1) * q;
    auto lo = static_cast<std::size_t>(std::floor(pos));
    auto hi = static_cast<std::size_t>(std::ceil(pos));
    if (lo == hi) {
        return sorted[lo];
    }
    double frac = pos - static_cast<double>(lo);
    return sorted[lo] + (sorted[hi] - sorted[lo]) * frac;
}

void validate(const QuerySpec& q) {
    if (q.selector.metric_name.empty()) {
        throw TsdbError(TsdbError::Code::InvalidQuery, "metric name must not be empty");
    }
    if (q.start_ms > q.end_ms) {
        throw TsdbError(TsdbError::Code::InvalidQuery, "start must not be after end");
    }
    if (q.step_ms <= 0) {
        throw TsdbError(TsdbError::Code::InvalidQuery, "step must be positive");
    }
    if (q.agg && q.agg->op == AggOp::quantile && !(q.agg->q >= 0.0 && q.agg->q <= 1.0)) {
        throw TsdbError(TsdbError::Code::QuantileOutOfRange, "quantile must be within [0, 1]");
    }
}

Store::~Store() {
    if (log_.is_open()) {
        log_.flush();
    }
}

void Store::validate_locked(const SeriesKey& key, const Sample& sample, const SeriesData* data) const {
    if (!std::isfinite(sample.value)) {
        throw TsdbError(TsdbError::Code::NonFiniteValue, "non-finite value for " + key.metric_name +
                                                             to_string(key.labels));
    }
    if (!sample.has_timestamp()) {
        throw TsdbError(TsdbError::Code::OutOfOrderSample, "sample without timestamp for " + key.metric_name +
                                                               to_string(key.labels));
    }
    std::int64_t last = data ? data->last_ms : Sample::kNoTimestamp;
    if (sample.timestamp_ms <= last) {
        throw TsdbError(TsdbError::Code::OutOfOrderSample,
                        "sample at " + std::to_string(sample.timestamp_ms) + " not after " + std::to_string(last) +
                            " for " + key.metric_name + to_string(key.labels));
    }
}

void Store::store_locked(const SeriesKey& key, Sample sample) {
    auto canonical = canonical_encoding(key.metric_name, key.labels);
    auto it = series_.find(canonical);
    if (it == series_.end()) {
        it = series_.emplace(canonical, SeriesData{key, {}, Sample::kNoTimestamp}).first;
    }
    auto& data = it->second;
    if (data.chunks.empty() || data.chunks.back().samples.size() >= kChunkCapacity ||
        sample.timestamp_ms < data.chunks.back().start_ms) {
        data.chunks.push_back(SeriesChunk{sample.timestamp_ms, sample.timestamp_ms, {}});
        data.chunks.back().samples.reserve(kChunkCapacity);
    }
    auto& chunk = data.chunks.back();
    chunk.samples.push_back(sample);
    chunk.end_ms = sample.timestamp_ms;
    data.last_ms = sample.timestamp_ms;
    if (log_.is_open()) {
        log_locked(key, canonical, sample);
    }
}

void Store::log_locked(const SeriesKey& key, std::string_view canonical, const Sample& sample) {
    auto it = log_ids_.find(std::string(canonical));
    if (it == log_ids_.end()) {
        std::uint64_t id = log_ids_.size() + 1;
        it = log_ids_.emplace(std::string(canonical), id).first;
        log_ << series_record(id, key);
    }
    log_ << point_record(it->second, sample);
}

void Store::append(const SeriesKey& key, Sample sample) {
    std::unique_lock lock(mu_);
    auto it = series_.find(canonical_encoding(key.metric_name, key.labels));
    validate_locked(key, sample, it == series_.end() ? nullptr : &it->second);
    store_locked(key, sample);
}

void Store::append_batch(std::span<const std::pair<SeriesKey, Sample>> batch) {
    std::unique_lock lock(mu_);
    std::unordered_map<std::string, std::int64_t> pending;
    for (const auto& [key, sample] : batch) {
        auto canonical = canonical_encoding(key.metric_name, key.labels);
        auto it = series_.find(canonical);
        SeriesData probe{key, {}, it == series_.end() ? Sample::kNoTimestamp : it->second.last_ms};
        if (auto p = pending.find(canonical); p != pending.end()) {
            probe.last_ms = p->second;
        }
        validate_locked(key, sample, &probe);
        pending[canonical] = sample.timestamp_ms;
    }
    for (const auto& [key, sample] : batch) {
        store_locked(key, sample);
    }
}

std::vector<const Store::SeriesData*> Store::match_locked(const Selector& selector) const {
    CompiledSelector compiled(selector);
    std::vector<const SeriesData*> out;
    // Canonical keys start with the metric name followed by '\0' (or end), so the
    // matching series form a contiguous range.
    auto it = series_.lower_bound(selector.metric_name);
    for (; it != series_.end(); ++it) {
        const auto& canonical = it->first;
        if (canonical.compare(0, selector.metric_name.size(), selector.metric_name) != 0) {
            break;
        }
        if (compiled.matches(it->second.key)) {
            out.push_back(&it->second);
        }
    }
    return out;
}

namespace {

std::vector<Sample> samples_between(const std::vector<SeriesChunk>& chunks, std::int64_t lo_incl,
                                    std::int64_t hi_incl) {
    std::vector<Sample> out;
    for (const auto& chunk : chunks) {
        if (chunk.end_ms < lo_incl || chunk.start_ms > hi_incl) {
            continue;
        }
        auto first = std::lower_bound(chunk.samples.begin(), chunk.samples.end(), lo_incl,
                                      [](const Sample& s, std::int64_t t) { return s.timestamp_ms < t; });
        auto last = std::upper_bound(chunk.samples.begin(), chunk.samples.end(), hi_incl,
                                     [](std::int64_t t, const Sample& s) { return t < s.timestamp_ms; });
        out.insert(out.end(), first, last);
    }
    return out;
}

}  // namespace

std::vector<SeriesSamples> Store::select_range(const QuerySpec& q) const {
    validate(q);
    std::shared_lock lock(mu_);
    std::vector<SeriesSamples> out;
    for (const auto* data : match_locked(q.selector)) {
        auto samples = samples_between(data->chunks, q.start_ms, q.end_ms);
        if (!samples.empty()) {
            out.push_back(SeriesSamples{data->key, std::move(samples)});
        }
    }
    return out;
}

std::vector<GroupResult> Store::evaluate(const QuerySpec& q) const {
    validate(q);
    if (!q.agg) {
        throw TsdbError(TsdbError::Code::InvalidQuery, "evaluate requires an aggregation");
    }
    if ((q.end_ms - q.start_ms) / q.step_ms >= kMaxGridPoints) {
        throw TsdbError(TsdbError::Code::InvalidQuery, "query resolution too fine: too many grid points");
    }
    const Aggregation& agg = *q.agg;

    struct Input {
        LabelSet group;
        std::vector<Sample> samples;
    };
    std::vector<Input> inputs;
    {
        std::shared_lock lock(mu_);
        for (const auto* data : match_locked(q.selector)) {
            auto samples = samples_between(data->chunks, q.start_ms - q.step_ms + 1, q.end_ms);
            if (!samples.empty()) {
                inputs.push_back(Input{data->key.labels.project(agg.group_by), std::move(samples)});
            }
        }
    }

    std::map<LabelSet, std::vector<Point>> results;
    std::map<LabelSet, std::vector<double>> values;
    for (std::int64_t t = q.start_ms; t <= q.end_ms; t += q.step_ms) {
        values.clear();
        for (const auto& in : inputs) {
            auto first = std::upper_bound(in.samples.begin(), in.samples.end(), t - q.step_ms,
                                          [](std::int64_t v, const Sample& s) { return v < s.timestamp_ms; });
            auto last = std::upper_bound(in.samples.begin(), in.samples.end(), t,
                                         [](std::int64_t v, const Sample& s) { return v < s.timestamp_ms; });
            if (first == last) {
                continue;
            }
            if (agg.op == AggOp::rate) {
                if (auto r = counter_rate(std::span<const Sample>(&*first, static_cast<std::size_t>(last - first)))) {
                    values[in.group].push_back(*r);
                }
            } else {
                values[in.group].push_back(std::prev(last)->value);
            }
        }
        for (auto& [group, vs] : values) {
            double v = 0;
            switch (agg.op) {
                case AggOp::sum:
                case AggOp::rate:
                    for (double x : vs) v += x;
                    break;
                case AggOp::avg:
                    for (double x : vs) v += x;
                    v /= static_cast<double>(vs.size());
                    break;
                case AggOp::min:
                    v = *std::min_element(vs.begin(), vs.end());
                    break;
                case AggOp::max:
                    v = *std::max_element(vs.begin(), vs.end());
                    break;
                case AggOp::count:
                    v = static_cast<double>(vs.size());
                    break;
                case AggOp::quantile:
                    std::sort(vs.begin(), vs.end());
                    v = quantile_sorted(vs, agg.q);
                    break;
            }
            results[group].push_back(Point{t, v});
        }
        if (q.end_ms - t < q.step_ms) {
            break;
        }
    }

    std::vector<GroupResult> out;
    out.reserve(results.size());
    for (auto& [group, points] : results) {
        out.push_back(GroupResult{group, std::move(points)});
    }
    return out;
}

std::size_t Store::gc(std::int64_t retention_ms, std::int64_t now_ms) {
    if (retention_ms <= 0) {
        throw TsdbError(TsdbError::Code::InvalidQuery, "retention must be positive");
    }
    const std::int64_t cutoff = now_ms - retention_ms;
    std::unique_lock lock(mu_);
    std::size_t purged = 0;
    for (auto it = series_.begin(); it != series_.end();) {
        auto& chunks = it->second.chunks;
        auto keep = std::remove_if(chunks.begin(), chunks.end(), [&](const SeriesChunk& c) { return c.end_ms < cutoff; });
        purged += static_cast<std::size_t>(chunks.end() - keep);
        chunks.erase(keep, chunks.end());
        if (chunks.empty()) {
            it = series_.erase(it);
        } else {
            ++it;
        }
    }
    return purged;
}

std::vector<SeriesChunk> Store::chunks(const SeriesKey& key) const {
    std::shared_lock lock(mu_);
    auto it = series_.find(canonical_encoding(key.metric_name, key.labels));
    return it == series_.end() ? std::vector<SeriesChunk>{} : it->second.chunks;
}

std::vector<SeriesKey> Store::series(const Selector& selector) const {
    std::shared_lock lock(mu_);
    std::vector<SeriesKey> out;
    for (const auto* data : match_locked(selector)) {
        out.push_back(data->key);
    }
    return out;
}

std::vector<std::string> Store::metric_names() const {
    std::shared_lock lock(mu_);
    std::set<std::string> names;
    for (const auto& [_, data] : series_) {
        names.insert(data.key.metric_name);
    }
    return {names.begin(), names.end()};
}

std::size_t Store::series_count() const {
    std::shared_lock lock(mu_);
    return series_.size();
}

std::size_t Store::sample_count() const {
    std::shared_lock lock(mu_);
    std::size_t n = 0;
    for (const auto& [_, data] : series_) {
        for (const auto& c : data.chunks) {
            n += c.samples.size();
        }
    }
    return n;
}

// --- persistence -------------------------------------------------------------

void Store::replay(const std::filesystem::path& path, bool as_log) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw TsdbError(TsdbError::Code::SnapshotError, "cannot open " + path.string());
    }
    std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (data.size() < 4 || !std::equal(kMagic, kMagic + 4, data.begin())) {
        throw TsdbError(TsdbError::Code::SnapshotError, path.string() + " is not an EWT1 file");
    }
    Reader r(data.substr(4));
    std::unordered_map<std::uint64_t, SeriesKey> dictionary;
    std::size_t good = 0;
    auto truncated = [&]() {
        if (!as_log) {
            throw TsdbError(TsdbError::Code::SnapshotError, "truncated record in " + path.string());
        }
    };

    std::unique_lock lock(mu_);
    while (!r.at_end()) {
        std::uint8_t type = 0;
        std::uint64_t id = 0;
        r.u8(type);
        if (type == kSeriesRecord) {
            std::string name;
            std::uint32_t n = 0;
            if (!r.u64(id) || !r.str(name) || !r.u32(n)) {
                truncated();
                break;
            }
            std::vector<LabelPair> pairs;
            bool ok = true;
            for (std::uint32_t i = 0; i < n && ok; ++i) {
                std::string k, v;
                ok = r.str(k) && r.str(v);
                pairs.emplace_back(std::move(k), std::move(v));
            }
            if (!ok) {
                truncated();
                break;
            }
            try {
                dictionary[id] = series_key(name, canonicalize_labels(std::move(pairs)));
            } catch (const ModelError& e) {
                throw TsdbError(TsdbError::Code::SnapshotError, std::string("corrupt series record: ") + e.what());
            }
            if (as_log) {
                log_ids_[canonical_encoding(dictionary[id].metric_name, dictionary[id].labels)] = id;
            }
        } else if (type == kPointRecord) {
            std::uint64_t ts = 0, bits = 0;
            if (!r.u64(id) || !r.u64(ts) || !r.u64(bits)) {
                truncated();
                break;
            }
            auto it = dictionary.find(id);
            if (it == dictionary.end()) {
                throw TsdbError(TsdbError::Code::SnapshotError, "point references unknown series id " +
                                                                    std::to_string(id));
            }
            Sample s{static_cast<std::int64_t>(ts), std::bit_cast<double>(bits)};
            auto existing = series_.find(canonical_encoding(it->second.metric_name, it->second.labels));
            try {
                validate_locked(it->second, s, existing == series_.end() ? nullptr : &existing->second);
                store_locked(it->second, s);
            } catch (const TsdbError&) {
                // Already present (e.g. loading a file twice); keep the stored sample.
            }
        } else {
            throw TsdbError(TsdbError::Code::SnapshotError, "unknown record type in " + path.string());
        }
        good = r.pos();
    }
    // A crash can leave a partial record at the tail; cut it so appends stay aligned.
    if (as_log && good + 4 != data.size()) {
        std::filesystem::resize_file(path, good + 4);
    }
}

void Store::attach_log(const std::filesystem::path& path) {
    if (std::filesystem::exists(path)) {
        replay(path, true);
        log_.open(path, std::ios::binary | std::ios::app);
    } else {
        log_.open(path, std::ios::binary | std::ios::trunc);
        log_.write(kMagic, 4);
    }
    if (!log_) {
        throw TsdbError(TsdbError::Code::SnapshotError, "cannot open log " + path.string());
    }
    // Series replayed before the log was open must still be defined in it.
    std::unique_lock lock(mu_);
    for (const auto& [canonical, data] : series_) {
        if (!log_ids_.contains(canonical)) {
            std::uint64_t id = log_ids_.size() + 1;
            log_ids_.emplace(canonical, id);
            log_ << series_record(id, data.key);
            for (const auto& c : data.chunks) {
                for (const auto& s : c.samples) {
                    log_ << point_record(id, s);
                }
            }
        }
    }
}

void Store::flush() {
    std::unique_lock lock(mu_);
    if (log_.is_open()) {
        log_.flush();
    }
}

void Store::write_snapshot(const std::filesystem::path& path) const {
    std::string out(kMagic, 4);
    {
        std::shared_lock lock(mu_);
        std::uint64_t id = 0;
        for (const auto& [_, data] : series_) {
            out += series_record(++id, data.key);
        }
        id = 0;
        for (const auto& [_, data] : series_) {
            ++id;
            for (const auto& c : data.chunks) {
                for (const auto& s : c.samples) {
                    out += point_record(id, s);
                }
            }
        }
    }
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        f.write(out.data(), static_cast<std::streamsize>(out.size()));
        if (!f) {
            throw TsdbError(TsdbError::Code::SnapshotError, "cannot write " + tmp.string());
        }
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        throw TsdbError(TsdbError::Code::SnapshotError, "cannot rename snapshot: " + ec.message());
    }
}

void Store::load(const std::filesystem::path& path) {
    replay(path, false);
}

}  // namespace ew::tsdb
