// SPDX-License-Identifier: Apache-2.0
#pragma once

// Assembles exporters, simulator, store, scraper, analyzer and API server from a
// StackConfig. The same wiring serves real-time runs and fake-clock replays.

#include <condition_variable>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "enclavewatch/api_server.hpp"
#include "enclavewatch/clock.hpp"
#include "enclavewatch/config.hpp"

namespace ew {

enum class StackMode {
    all,              // exporters, simulator, aggregator and API
    aggregator,       // store, scraper, analyzer and API; scrapes configured targets only
    exporter_tee,     // TEE exporters only
    exporter_system,  // system exporters only
};

struct StackOptions {
    StackMode mode = StackMode::all;
    /// Off for replays: nothing listens except the exporters the scraper reads.
    bool serve_api = true;
    /// Overrides every exporter's listen address with 127.0.0.1:0.
    bool ephemeral_exporters = false;
};

class Stack {
public:
    /// Binds every server. Throws exporters::ExporterError(BindError) or
    /// api::ApiError("bind_error") when an address is taken.
    Stack(config::StackConfig config, StackOptions options, std::shared_ptr<const Clock> clock);
    ~Stack();

    Stack(const Stack&) = delete;
    Stack& operator=(const Stack&) = delete;

    /// One fake-clock tick: simulator, due scrapes, due rule evaluations.
    void step(std::int64_t now_ms);
    /// Background threads driven by the clock given at construction.
    void start();
    /// Idempotent. Closes streams, joins workers, stops servers, persists the store.
    void stop();

    const config::StackConfig& config() const noexcept { return config_; }
    std::shared_ptr<tsdb::Store> store() const noexcept { return store_; }
    scrape::Scraper* scraper() noexcept { return scraper_.get(); }
    analyze::Analyzer* analyzer() noexcept { return analyzer_.get(); }
    std::shared_ptr<api::EventHub> events() const noexcept { return hub_; }
    const api::ApiServer* api() const noexcept { return api_.get(); }
    const sim::ScenarioRunner* simulator() const noexcept { return runner_.get(); }
    /// Scrape URLs of the exporters this stack serves, in config order.
    std::vector<std::string> exporter_urls() const;
    /// Target set the scraper starts with when no discovery file is configured.
    std::vector<scrape::TargetSpec> initial_targets() const;

private:
    void build_simulator();
    void build_exporters();
    void build_aggregator();
    void advance_simulator(std::int64_t now_ms);
    void housekeeping();

    config::StackConfig config_;
    StackOptions options_;
    std::shared_ptr<const Clock> clock_;

    std::shared_ptr<sim::SgxDriver> driver_;
    std::unique_ptr<sim::ScenarioRunner> runner_;
    std::vector<std::shared_ptr<exporters::SystemMetricsSource>> system_sources_;
    std::mutex sim_mu_;

    struct Served {
        config::ExporterSettings settings;
        std::unique_ptr<exporters::ExporterService> service;
    };
    std::vector<Served> exporters_;

    std::shared_ptr<tsdb::Store> store_;
    std::shared_ptr<api::EventHub> hub_;
    std::unique_ptr<scrape::Scraper> scraper_;
    std::unique_ptr<analyze::Analyzer> analyzer_;
    std::unique_ptr<api::ApiServer> api_;

    std::int64_t last_gc_ms_ = 0;
    std::thread housekeeper_;
    std::mutex run_mu_;
    std::condition_variable run_cv_;
    bool running_ = false;
    bool stopped_ = false;
};

}  // namespace ew
