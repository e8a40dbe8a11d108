// SPDX-License-Identifier: Apache-2.0
#pragma once

// Pull-based collection: targets from a discovery file, periodic scrapes, health
// tracking and atomic ingestion into the store.

#include <condition_variable>
#include <cstdint>
#include <filesystem>
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
#include "enclavewatch/metrics_model.hpp"
#include "enclavewatch/tsdb.hpp"

namespace ew::scrape {

inline constexpr std::int64_t kDefaultIntervalMs = 5000;
inline constexpr std::int64_t kDefaultTimeoutMs = 2000;
/// Consecutive failures after which a target is reported down.
inline constexpr std::uint32_t kDownThreshold = 2;

class ScrapeError : public std::runtime_error {
public:
    enum class Code { Timeout, ConnectionRefused, DecodeError, HttpStatus, IngestRejected };

    ScrapeError(Code code, const std::string& what) : std::runtime_error(what), code_(code) {}
    Code code() const noexcept { return code_; }

private:
    Code code_;
};

std::string_view to_string(ScrapeError::Code code) noexcept;

class DiscoveryError : public std::runtime_error {
public:
    enum class Code { MalformedDiscoveryFile, InvalidTarget };

    DiscoveryError(Code code, const std::string& what) : std::runtime_error(what), code_(code) {}
    Code code() const noexcept { return code_; }

private:
    Code code_;
};

/// What a discovery file (or the config) says about one endpoint.
struct TargetSpec {
    std::string job;
    std::string url;
    /// Extra labels attached to every scraped series; may override `instance`.
    LabelSet labels;
    std::int64_t interval_ms = kDefaultIntervalMs;
    std::int64_t timeout_ms = kDefaultTimeoutMs;

    friend bool operator==(const TargetSpec&, const TargetSpec&) = default;
};

/// Throws DiscoveryError(InvalidTarget) on a bad URL, empty job, or timing.
void validate(const TargetSpec& spec);

enum class Health { unknown, up, down };
std::string_view to_string(Health h) noexcept;

/// Live state of a registered target.
struct ScrapeTarget {
    TargetSpec spec;
    std::string instance;
    Health health = Health::unknown;
    std::uint32_t consecutive_failures = 0;
    std::int64_t last_scrape_ms = -1;
    std::int64_t last_duration_ms = 0;
    std::string last_error;
    /// Removed from discovery; kept for reporting but never scraped again.
    bool stale = false;

    /// job, instance and the spec's extra labels.
    LabelSet target_labels() const;
};

ScrapeTarget make_target(TargetSpec spec);

struct ScrapeResult {
    std::vector<MetricFamily> families;
    std::int64_t duration_ms = 0;
};

/// HTTP GET and decode of one endpoint. Throws ScrapeError.
ScrapeResult fetch(const TargetSpec& spec);

/// Series to append for one successful scrape: every decoded sample relabelled with
/// the target labels and stamped with `scrape_ms` when it carries no timestamp,
/// plus `up{job,instance} 1`. Counter families keep their bare name. Non-finite
/// samples are dropped because the store cannot hold them.
std::vector<std::pair<SeriesKey, Sample>> scrape_batch(const ScrapeTarget& target,
                                                       const std::vector<MetricFamily>& families,
                                                       std::int64_t scrape_ms);

/// Parses a discovery document: `{"targets": [{"job", "url", "labels"?, "interval"?,
/// "timeout"?}]}` or a bare array of such objects. Durations accept `5s`-style strings
/// or integer milliseconds. Throws DiscoveryError.
std::vector<TargetSpec> parse_discovery(std::string_view text, std::int64_t default_interval_ms = kDefaultIntervalMs,
                                        std::int64_t default_timeout_ms = kDefaultTimeoutMs);

/// Notification for the live feed.
struct ScrapeEvent {
    enum class Type { sample_batch, target_health };
    Type type = Type::sample_batch;
    ScrapeTarget target;
    std::int64_t timestamp_ms = 0;
    /// sample_batch only.
    std::vector<std::pair<SeriesKey, Sample>> samples;
};

using EventCallback = std::function<void(const ScrapeEvent&)>;

struct ScraperOptions {
    std::int64_t default_interval_ms = kDefaultIntervalMs;
    std::int64_t default_timeout_ms = kDefaultTimeoutMs;
    std::optional<std::filesystem::path> discovery_path;
    /// How often the real-time loop re-reads the discovery file.
    std::int64_t discovery_poll_ms = 1000;
};

/// Target registry plus scheduler. Drive it either with run_pending() from a fake
/// clock or with start()/stop() in real time; not both at once.
class Scraper {
public:
    Scraper(std::shared_ptr<tsdb::Store> store, ScraperOptions options = {});
    ~Scraper();

    Scraper(const Scraper&) = delete;
    Scraper& operator=(const Scraper&) = delete;

    void on_event(EventCallback callback);

    /// Replaces the static target set (targets not listed become stale). Returns the
    /// number of targets added.
    std::size_t reconcile(const std::vector<TargetSpec>& specs, std::int64_t now_ms);

    /// Re-reads the discovery file if it changed. A malformed file is logged and the
    /// previous target set kept; returns false in that case.
    bool poll_discovery(std::int64_t now_ms);

    /// Scrapes every active target that is due at `now_ms`, sequentially.
    /// Returns how many scrapes ran.
    std::size_t run_pending(std::int64_t now_ms);

    /// Scrapes one target now and records the outcome. Unknown key is a no-op.
    void scrape_now(const std::string& key, std::int64_t now_ms);

    /// Real-time mode: one worker per target plus a discovery watcher.
    void start(std::shared_ptr<const Clock> clock);
    /// Stops accepting work and waits for in-flight scrapes to finish.
    void stop();

    /// Active targets in key order, then stale ones.
    std::vector<ScrapeTarget> targets() const;
    std::optional<ScrapeTarget> target(const std::string& key) const;

    /// `job|url` registry key.
    static std::string key_of(const TargetSpec& spec) { return spec.job + "|" + spec.url; }

    /// Deterministic phase in [0, interval/10) derived from the URL, so targets with
    /// the same interval do not all fire in the same millisecond.
    static std::int64_t phase_offset_ms(const TargetSpec& spec);

private:
    struct Entry {
        ScrapeTarget target;
        std::int64_t next_due_ms = 0;
        // Workers exit once the entry they were spawned for is replaced.
        std::uint64_t generation = 0;
        std::thread worker;
    };

    void scrape_entry(const std::string& key, std::int64_t now_ms);
    void record(const std::string& key, std::int64_t now_ms, std::int64_t duration_ms,
                const ScrapeError* error, std::vector<std::pair<SeriesKey, Sample>> batch);
    void emit(const ScrapeEvent& ev);
    void spawn_worker_locked(const std::string& key);
    void worker_loop(std::string key, std::uint64_t generation);
    void discovery_loop();

    std::shared_ptr<tsdb::Store> store_;
    ScraperOptions options_;

    mutable std::mutex mu_;
    std::condition_variable cv_;
    std::map<std::string, Entry> active_;
    std::map<std::string, ScrapeTarget> stale_;
    std::vector<std::thread> retired_;
    std::optional<std::string> discovery_content_;
    EventCallback callback_;
    std::uint64_t next_generation_ = 1;

    std::shared_ptr<const Clock> clock_;
    bool running_ = false;
    std::thread discovery_thread_;
};

}  // namespace ew::scrape
