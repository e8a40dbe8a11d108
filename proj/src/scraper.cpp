// SPDX-License-Identifier: Apache-2.0
#include "enclavewatch/scraper.hpp"

#include <httplib.h>
#include <json.hpp>

#include <chrono>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "enclavewatch/duration.hpp"
#include "enclavewatch/exposition.hpp"
#include "enclavewatch/log.hpp"
#include "enclavewatch/net.hpp"

namespace ew::scrape {

using json = nlohmann::json;

std::string_view to_string(ScrapeError::Code code) noexcept {
    switch (code) {
        case ScrapeError::Code::Timeout: return "timeout";
        case ScrapeError::Code::ConnectionRefused: return "connection_refused";
        case ScrapeError::Code::DecodeError: return "decode_error";
        case ScrapeError::Code::HttpStatus: return "http_status";
        case ScrapeError::Code::IngestRejected: return "ingest_rejected";
    }
    return "unknown";
}

std::string_view to_string(Health h) noexcept {
    switch (h) {
        case Health::unknown: return "unknown";
        case Health::up: return "up";
        case Health::down: return "down";
    }
    return "unknown";
}

void validate(const TargetSpec& spec) {
    auto bad = [&](const std::string& why) {
        throw DiscoveryError(DiscoveryError::Code::InvalidTarget, "target " + spec.job + " " + spec.url + ": " + why);
    };
    if (spec.job.empty()) {
        bad("empty job");
    }
    try {
        net::parse_http_url(spec.url);
    } catch (const net::AddressError& e) {
        bad(e.what());
    }
    if (spec.interval_ms <= 0) {
        bad("interval must be positive");
    }
    if (spec.timeout_ms <= 0 || spec.timeout_ms >= spec.interval_ms) {
        bad("timeout must be positive and shorter than the interval");
    }
}

LabelSet ScrapeTarget::target_labels() const {
    LabelSet l = spec.labels;
    if (!l.find("instance")) {
        l = l.with("instance", instance);
    }
    return l.with("job", spec.job);
}

ScrapeTarget make_target(TargetSpec spec) {
    ScrapeTarget t;
    t.instance = net::parse_http_url(spec.url).authority();
    if (const auto* inst = spec.labels.find("instance")) {
        t.instance = *inst;
    }
    t.spec = std::move(spec);
    return t;
}

ScrapeResult fetch(const TargetSpec& spec) {
    auto url = net::parse_http_url(spec.url);
    auto started = std::chrono::steady_clock::now();
    auto timeout = std::chrono::milliseconds(spec.timeout_ms);

    httplib::Client cli(url.host, url.port);
    cli.set_connection_timeout(timeout);
    cli.set_read_timeout(timeout);
    cli.set_write_timeout(timeout);
    auto res = cli.Get(url.path);
    auto elapsed = std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - started);

    if (!res) {
        auto err = res.error();
        if (err == httplib::Error::Connection) {
            throw ScrapeError(ScrapeError::Code::ConnectionRefused, "cannot connect to " + spec.url);
        }
        if (err == httplib::Error::ConnectionTimeout || err == httplib::Error::Read || elapsed >= timeout) {
            throw ScrapeError(ScrapeError::Code::Timeout, "timed out scraping " + spec.url);
        }
        throw ScrapeError(ScrapeError::Code::ConnectionRefused,
                          "request to " + spec.url + " failed: " + httplib::to_string(err));
    }
    if (elapsed > timeout) {
        throw ScrapeError(ScrapeError::Code::Timeout, "scrape of " + spec.url + " exceeded its timeout");
    }
    if (res->status != 200) {
        throw ScrapeError(ScrapeError::Code::HttpStatus, spec.url + " returned HTTP " + std::to_string(res->status));
    }
    try {
        return ScrapeResult{exposition::decode(res->body).families, elapsed.count()};
    } catch (const exposition::DecodeError& e) {
        throw ScrapeError(ScrapeError::Code::DecodeError, spec.url + ": " + e.what());
    }
}

std::vector<std::pair<SeriesKey, Sample>> scrape_batch(const ScrapeTarget& target,
                                                       const std::vector<MetricFamily>& families,
                                                       std::int64_t scrape_ms) {
    const LabelSet tl = target.target_labels();
    std::vector<std::pair<SeriesKey, Sample>> batch;
    for (const auto& family : families) {
        for (const auto& series : family.series) {
            if (!std::isfinite(series.sample.value)) {
                continue;
            }
            LabelSet labels = series.labels;
            for (const auto& [name, value] : tl) {
                // Target labels win; a clashing exposed value is kept under exported_<name>.
                const auto* exposed = labels.find(name);
                if (exposed && *exposed != value) {
                    labels = labels.with("exported_" + name, *exposed);
                }
                labels = labels.with(name, value);
            }
            Sample s = series.sample;
            if (!s.has_timestamp()) {
                s.timestamp_ms = scrape_ms;
            }
            batch.emplace_back(series_key(family.name, labels), s);
        }
    }
    LabelSet up_labels = canonicalize_labels({{"job", target.spec.job}, {"instance", target.instance}});
    batch.emplace_back(series_key("up", up_labels), Sample{scrape_ms, 1.0});
    return batch;
}

namespace {

std::int64_t duration_field(const json& entry, const char* key, std::int64_t fallback) {
    if (!entry.contains(key)) {
        return fallback;
    }
    const auto& v = entry.at(key);
    if (v.is_number_integer()) {
        return v.get<std::int64_t>();
    }
    if (v.is_string()) {
        try {
            return parse_duration_ms(v.get<std::string>());
        } catch (const std::invalid_argument& e) {
            throw DiscoveryError(DiscoveryError::Code::InvalidTarget, e.what());
        }
    }
    throw DiscoveryError(DiscoveryError::Code::MalformedDiscoveryFile,
                         std::string("field '") + key + "' must be a duration");
}

}  // namespace

std::vector<TargetSpec> parse_discovery(std::string_view text, std::int64_t default_interval_ms,
                                        std::int64_t default_timeout_ms) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw DiscoveryError(DiscoveryError::Code::MalformedDiscoveryFile, e.what());
    }
    const json* list = &doc;
    if (doc.is_object()) {
        if (!doc.contains("targets")) {
            throw DiscoveryError(DiscoveryError::Code::MalformedDiscoveryFile, "missing 'targets' array");
        }
        list = &doc.at("targets");
    }
    if (!list->is_array()) {
        throw DiscoveryError(DiscoveryError::Code::MalformedDiscoveryFile, "'targets' must be an array");
    }

    std::vector<TargetSpec> out;
    std::set<std::string> keys;
    for (const auto& entry : *list) {
        if (!entry.is_object() || !entry.contains("job") || !entry.contains("url") || !entry.at("job").is_string() ||
            !entry.at("url").is_string()) {
            throw DiscoveryError(DiscoveryError::Code::MalformedDiscoveryFile,
                                 "each target needs string fields 'job' and 'url'");
        }
        TargetSpec spec;
        spec.job = entry.at("job").get<std::string>();
        spec.url = entry.at("url").get<std::string>();
        if (entry.contains("labels")) {
            const auto& l = entry.at("labels");
            if (!l.is_object()) {
                throw DiscoveryError(DiscoveryError::Code::MalformedDiscoveryFile, "'labels' must be an object");
            }
            std::vector<LabelPair> pairs;
            for (const auto& [k, v] : l.items()) {
                if (!v.is_string()) {
                    throw DiscoveryError(DiscoveryError::Code::MalformedDiscoveryFile, "label values must be strings");
                }
                pairs.emplace_back(k, v.get<std::string>());
            }
            try {
                spec.labels = canonicalize_labels(std::move(pairs));
            } catch (const ModelError& e) {
                throw DiscoveryError(DiscoveryError::Code::InvalidTarget, e.what());
            }
        }
        spec.interval_ms = duration_field(entry, "interval", default_interval_ms);
        spec.timeout_ms = duration_field(entry, "timeout", std::min(default_timeout_ms, spec.interval_ms - 1));
        validate(spec);
        if (!keys.insert(Scraper::key_of(spec)).second) {
            throw DiscoveryError(DiscoveryError::Code::InvalidTarget, "duplicate target " + spec.job + " " + spec.url);
        }
        out.push_back(std::move(spec));
    }
    return out;
}

// ---------------------------------------------------------------------------

Scraper::Scraper(std::shared_ptr<tsdb::Store> store, ScraperOptions options)
    : store_(std::move(store)), options_(std::move(options)) {}

Scraper::~Scraper() {
    stop();
}

void Scraper::on_event(EventCallback callback) {
    std::lock_guard lock(mu_);
    callback_ = std::move(callback);
}

std::int64_t Scraper::phase_offset_ms(const TargetSpec& spec) {
    auto span = std::max<std::int64_t>(1, spec.interval_ms / 10);
    return static_cast<std::int64_t>(fnv1a64(spec.url) % static_cast<std::uint64_t>(span));
}

std::size_t Scraper::reconcile(const std::vector<TargetSpec>& specs, std::int64_t now_ms) {
    std::vector<ScrapeEvent> events;
    std::size_t added = 0;
    for (const auto& spec : specs) {
        validate(spec);
    }
    {
        std::lock_guard lock(mu_);
        std::set<std::string> wanted;
        for (const auto& spec : specs) {
            auto key = key_of(spec);
            wanted.insert(key);
            auto it = active_.find(key);
            if (it != active_.end()) {
                if (!(it->second.target.spec == spec)) {
                    auto fresh = make_target(spec);
                    fresh.health = it->second.target.health;
                    fresh.consecutive_failures = it->second.target.consecutive_failures;
                    fresh.last_scrape_ms = it->second.target.last_scrape_ms;
                    it->second.target = std::move(fresh);
                }
                continue;
            }
            stale_.erase(key);
            Entry& e = active_[key];
            e.target = make_target(spec);
            e.next_due_ms = now_ms + phase_offset_ms(spec);
            e.generation = next_generation_++;
            ++added;
            log::get()->info("event=target_added job={} instance={}", log::kv_value(spec.job),
                             log::kv_value(e.target.instance));
            if (running_) {
                spawn_worker_locked(key);
            }
        }
        for (auto it = active_.begin(); it != active_.end();) {
            if (wanted.contains(it->first)) {
                ++it;
                continue;
            }
            if (it->second.worker.joinable()) {
                retired_.push_back(std::move(it->second.worker));
            }
            ScrapeTarget gone = it->second.target;
            gone.stale = true;
            log::get()->info("event=target_removed job={} instance={}", log::kv_value(gone.spec.job),
                             log::kv_value(gone.instance));
            events.push_back(ScrapeEvent{ScrapeEvent::Type::target_health, gone, now_ms, {}});
            stale_[it->first] = std::move(gone);
            it = active_.erase(it);
        }
    }
    cv_.notify_all();
    for (const auto& ev : events) {
        emit(ev);
    }
    return added;
}

bool Scraper::poll_discovery(std::int64_t now_ms) {
    if (!options_.discovery_path) {
        return true;
    }
    const auto& path = *options_.discovery_path;
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        log::get()->warn("event=discovery_unreadable path={}", log::kv_value(path.string()));
        return false;
    }
    std::stringstream buf;
    buf << in.rdbuf();
    std::string content = buf.str();
    {
        std::lock_guard lock(mu_);
        if (discovery_content_ == content) {
            return true;
        }
    }
    std::vector<TargetSpec> specs;
    try {
        specs = parse_discovery(content, options_.default_interval_ms, options_.default_timeout_ms);
    } catch (const DiscoveryError& e) {
        log::get()->warn("event=discovery_rejected path={} error={}", log::kv_value(path.string()),
                         log::kv_value(e.what()));
        std::lock_guard lock(mu_);
        discovery_content_ = content;  // do not re-log the same bad file every poll
        return false;
    }
    reconcile(specs, now_ms);
    std::lock_guard lock(mu_);
    discovery_content_ = std::move(content);
    return true;
}

std::size_t Scraper::run_pending(std::int64_t now_ms) {
    poll_discovery(now_ms);
    std::vector<std::string> due;
    {
        std::lock_guard lock(mu_);
        for (auto& [key, e] : active_) {
            if (e.next_due_ms <= now_ms) {
                due.push_back(key);
                while (e.next_due_ms <= now_ms) {
                    e.next_due_ms += e.target.spec.interval_ms;
                }
            }
        }
    }
    for (const auto& key : due) {
        scrape_entry(key, now_ms);
    }
    return due.size();
}

void Scraper::scrape_now(const std::string& key, std::int64_t now_ms) {
    scrape_entry(key, now_ms);
}

void Scraper::scrape_entry(const std::string& key, std::int64_t now_ms) {
    ScrapeTarget target;
    {
        std::lock_guard lock(mu_);
        auto it = active_.find(key);
        if (it == active_.end()) {
            return;
        }
        target = it->second.target;
    }
    try {
        auto result = fetch(target.spec);
        record(key, now_ms, result.duration_ms, nullptr, scrape_batch(target, result.families, now_ms));
    } catch (const ScrapeError& e) {
        record(key, now_ms, 0, &e, {});
    }
}

void Scraper::record(const std::string& key, std::int64_t now_ms, std::int64_t duration_ms, const ScrapeError* error,
                     std::vector<std::pair<SeriesKey, Sample>> batch) {
    std::vector<ScrapeEvent> events;
    {
        std::lock_guard lock(mu_);
        auto it = active_.find(key);
        if (it == active_.end()) {
            return;  // removed while the request was in flight
        }
        ScrapeTarget& t = it->second.target;
        std::optional<ScrapeError> failure;
        if (error) {
            failure = *error;
        } else {
            try {
                store_->append_batch(batch);
            } catch (const tsdb::TsdbError& e) {
                failure = ScrapeError(ScrapeError::Code::IngestRejected, e.what());
            }
        }

        const Health before = t.health;
        t.last_scrape_ms = now_ms;
        t.last_duration_ms = duration_ms;
        if (failure) {
            ++t.consecutive_failures;
            t.last_error = failure->what();
            if (t.consecutive_failures >= kDownThreshold) {
                t.health = Health::down;
            }
            auto up = series_key("up", canonicalize_labels({{"job", t.spec.job}, {"instance", t.instance}}));
            try {
                store_->append(up, Sample{now_ms, 0.0});
            } catch (const tsdb::TsdbError&) {
                // Only possible when the same target is scraped twice in one millisecond.
            }
            log::get()->warn("event=scrape_failed job={} instance={} code={} failures={} error={}",
                             log::kv_value(t.spec.job), log::kv_value(t.instance), to_string(failure->code()),
                             t.consecutive_failures, log::kv_value(failure->what()));
        } else {
            t.consecutive_failures = 0;
            t.last_error.clear();
            t.health = Health::up;
            log::get()->debug("event=scrape_ok job={} instance={} samples={} duration_ms={}",
                              log::kv_value(t.spec.job), log::kv_value(t.instance), batch.size(), duration_ms);
            events.push_back(ScrapeEvent{ScrapeEvent::Type::sample_batch, t, now_ms, std::move(batch)});
        }
        if (t.health != before) {
            log::get()->info("event=target_health job={} instance={} health={}", log::kv_value(t.spec.job),
                             log::kv_value(t.instance), to_string(t.health));
            events.push_back(ScrapeEvent{ScrapeEvent::Type::target_health, t, now_ms, {}});
        }
    }
    for (const auto& ev : events) {
        emit(ev);
    }
}

void Scraper::emit(const ScrapeEvent& ev) {
    EventCallback cb;
    {
        std::lock_guard lock(mu_);
        cb = callback_;
    }
    if (cb) {
        cb(ev);
    }
}

std::vector<ScrapeTarget> Scraper::targets() const {
    std::lock_guard lock(mu_);
    std::vector<ScrapeTarget> out;
    for (const auto& [_, e] : active_) {
        out.push_back(e.target);
    }
    for (const auto& [_, t] : stale_) {
        out.push_back(t);
    }
    return out;
}

std::optional<ScrapeTarget> Scraper::target(const std::string& key) const {
    std::lock_guard lock(mu_);
    if (auto it = active_.find(key); it != active_.end()) {
        return it->second.target;
    }
    if (auto it = stale_.find(key); it != stale_.end()) {
        return it->second;
    }
    return std::nullopt;
}

// --- real-time mode ---------------------------------------------------------

void Scraper::start(std::shared_ptr<const Clock> clock) {
    {
        std::lock_guard lock(mu_);
        if (running_) {
            return;
        }
        clock_ = std::move(clock);
    }
    poll_discovery(clock_->now_ms());
    std::lock_guard lock(mu_);
    running_ = true;
    for (auto& [key, _] : active_) {
        spawn_worker_locked(key);
    }
    if (options_.discovery_path) {
        discovery_thread_ = std::thread([this] { discovery_loop(); });
    }
}

void Scraper::spawn_worker_locked(const std::string& key) {
    Entry& e = active_.at(key);
    if (e.worker.joinable()) {
        retired_.push_back(std::move(e.worker));
    }
    e.worker = std::thread([this, key, gen = e.generation] { worker_loop(key, gen); });
}

void Scraper::worker_loop(std::string key, std::uint64_t generation) {
    std::unique_lock lock(mu_);
    while (running_) {
        auto it = active_.find(key);
        if (it == active_.end() || it->second.generation != generation) {
            return;
        }
        Entry& e = it->second;
        auto now = clock_->now_ms();
        if (now < e.next_due_ms) {
            cv_.wait_for(lock, std::chrono::milliseconds(e.next_due_ms - now));
            continue;
        }
        while (e.next_due_ms <= now) {
            e.next_due_ms += e.target.spec.interval_ms;
        }
        lock.unlock();
        scrape_entry(key, now);
        lock.lock();
    }
}

void Scraper::discovery_loop() {
    std::unique_lock lock(mu_);
    while (running_) {
        lock.unlock();
        poll_discovery(clock_->now_ms());
        lock.lock();
        cv_.wait_for(lock, std::chrono::milliseconds(options_.discovery_poll_ms), [this] { return !running_; });
    }
}

void Scraper::stop() {
    std::vector<std::thread> threads;
    {
        std::lock_guard lock(mu_);
        running_ = false;
        for (auto& [_, e] : active_) {
            if (e.worker.joinable()) {
                threads.push_back(std::move(e.worker));
            }
        }
        for (auto& t : retired_) {
            threads.push_back(std::move(t));
        }
        retired_.clear();
        if (discovery_thread_.joinable()) {
            threads.push_back(std::move(discovery_thread_));
        }
    }
    cv_.notify_all();
    for (auto& t : threads) {
        t.join();
    }
}

}  // namespace ew::scrape
