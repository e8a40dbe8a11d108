// SPDX-License-Identifier: Apache-2.0
#pragma once

// HTTP control surface: range queries, targets, alerts, box plots, the live event
// stream, and the dashboard's static assets.

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "enclavewatch/analyzer.hpp"
#include "enclavewatch/clock.hpp"
#include "enclavewatch/scraper.hpp"
#include "enclavewatch/tsdb.hpp"

namespace httplib {
class Server;
}

namespace ew::api {

/// Error with an HTTP status and a machine-readable code; rendered as {code, message}.
class ApiError : public std::runtime_error {
public:
    ApiError(int status, std::string code, const std::string& message)
        : std::runtime_error(message), status_(status), code_(std::move(code)) {}

    int status() const noexcept { return status_; }
    const std::string& code() const noexcept { return code_; }

private:
    int status_;
    std::string code_;
};

/// Parses `job="tee",pid=~"1.*",mode!="x"`. Values use double quotes with `\"` and
/// `\\` escapes. Throws ApiError(400, "bad_query").
std::vector<tsdb::Matcher> parse_matchers(std::string_view text);

/// Builds a QuerySpec from query-string style parameters (name, matchers, start,
/// end, step, agg, q, group_by). `lookup` returns nullopt for an absent parameter.
tsdb::QuerySpec parse_query(const std::function<std::optional<std::string>(const std::string&)>& lookup,
                            std::int64_t now_ms);

nlohmann::json to_json(const LabelSet& labels);
nlohmann::json to_json(const analyze::AnomalyAlert& alert);
nlohmann::json to_json(const scrape::ScrapeTarget& target);
nlohmann::json to_json(const analyze::BoxPlotSummary& box);
/// `{type, payload}` envelope for the live stream.
nlohmann::json stream_event(std::string_view type, nlohmann::json payload);
nlohmann::json to_stream_event(const scrape::ScrapeEvent& ev);

/// Fan-out of serialized events to stream subscribers. Each subscriber owns a bounded
/// queue; one that falls behind by more than its capacity is dropped.
class EventHub {
public:
    class Subscriber {
    public:
        /// Waits up to `timeout_ms` for the next event. nullopt on timeout or once closed.
        std::optional<std::string> next(std::int64_t timeout_ms);
        bool closed() const;

    private:
        friend class EventHub;
        mutable std::mutex mu_;
        std::condition_variable cv_;
        std::deque<std::string> queue_;
        bool closed_ = false;
    };

    explicit EventHub(std::size_t queue_capacity = 1024) : capacity_(queue_capacity) {}

    std::shared_ptr<Subscriber> subscribe();
    void unsubscribe(const std::shared_ptr<Subscriber>& sub);
    void publish(const nlohmann::json& event);
    /// Wakes and closes every subscriber; later subscriptions start closed.
    void close();
    std::size_t subscriber_count() const;
    std::size_t dropped_count() const;

private:
    std::size_t capacity_;
    mutable std::mutex mu_;
    std::vector<std::shared_ptr<Subscriber>> subs_;
    std::size_t dropped_ = 0;
    bool closed_ = false;
};

struct ApiOptions {
    std::string listen = "127.0.0.1:0";
    std::optional<std::filesystem::path> assets_dir;
    std::int64_t heartbeat_ms = 15'000;
    std::vector<tsdb::Selector> boxplot_selectors;
    std::int64_t boxplot_window_ms = 300'000;
};

/// Read-only views the server needs from the rest of the stack.
struct ApiBackends {
    std::shared_ptr<const tsdb::Store> store;
    std::function<std::vector<scrape::ScrapeTarget>()> targets;
    std::function<std::vector<analyze::AnomalyAlert>(std::optional<analyze::AlertState>)> alerts;
    std::shared_ptr<EventHub> events;
    std::shared_ptr<const Clock> clock;
};

class ApiServer {
public:
    /// Binds immediately. Throws ApiError(0, "bind_error") when the address is taken
    /// or malformed.
    ApiServer(ApiOptions options, ApiBackends backends);
    ~ApiServer();

    ApiServer(const ApiServer&) = delete;
    ApiServer& operator=(const ApiServer&) = delete;

    int port() const noexcept { return port_; }
    std::string base_url() const;
    /// Closes streams, stops accepting connections and waits for handlers.
    void stop();

private:
    void routes();

    ApiOptions options_;
    ApiBackends backends_;
    std::unique_ptr<httplib::Server> server_;
    std::thread thread_;
    std::string host_;
    int port_ = 0;
};

}  // namespace ew::api
