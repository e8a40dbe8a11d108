// SPDX-License-Identifier: Apache-2.0
#include "enclavewatch/stack.hpp"

#include <chrono>

#include "enclavewatch/log.hpp"

namespace ew {

namespace {

constexpr std::int64_t kSimTickMs = 100;
constexpr std::int64_t kGcEveryMs = 60'000;

bool serves(StackMode mode, config::ExporterKind kind) {
    switch (mode) {
        case StackMode::all: return true;
        case StackMode::aggregator: return false;
        case StackMode::exporter_tee: return kind == config::ExporterKind::tee;
        case StackMode::exporter_system: return kind == config::ExporterKind::system;
    }
    return false;
}

std::string_view job_name(config::ExporterKind kind) {
    return kind == config::ExporterKind::tee ? "tee" : "system";
}

}  // namespace

Stack::Stack(config::StackConfig config, StackOptions options, std::shared_ptr<const Clock> clock)
    : config_(std::move(config)), options_(options), clock_(std::move(clock)) {
    if (options_.ephemeral_exporters) {
        for (auto& e : config_.exporters) e.listen = "127.0.0.1:0";
    }
    try {
        build_simulator();
        build_exporters();
        if (options_.mode == StackMode::all || options_.mode == StackMode::aggregator) {
            build_aggregator();
        }
    } catch (...) {
        stop();
        throw;
    }
}

Stack::~Stack() {
    stop();
}

void Stack::build_simulator() {
    if (!config_.simulator) return;
    bool needed = false;
    for (const auto& e : config_.exporters) {
        needed |= serves(options_.mode, e.kind) && e.source == "simulator";
    }
    needed |= options_.mode != StackMode::aggregator && config_.simulator->export_dir.has_value();
    if (!needed) return;

    const auto& s = *config_.simulator;
    driver_ = std::make_shared<sim::SgxDriver>(s.epc_pages);
    runner_ = std::make_unique<sim::ScenarioRunner>(sim::find_scenario(s.scenario), driver_, s.seed,
                                                    clock_->now_ms());
    if (s.export_dir) {
        std::filesystem::create_directories(*s.export_dir);
        sim::export_parameters(driver_->snapshot(), *s.export_dir);
    }
    log::get()->info("event=simulator_started scenario={} epc_pages={} seed={}", log::kv_value(s.scenario),
                     s.epc_pages, s.seed);
}

void Stack::build_exporters() {
    for (const auto& e : config_.exporters) {
        if (!serves(options_.mode, e.kind)) continue;
        exporters::ExporterConfig ec;
        ec.listen = e.listen;
        ec.static_labels = e.static_labels;
        if (e.kind == config::ExporterKind::tee) {
            if (e.source == "simulator") {
                ec.sources.push_back(std::make_shared<exporters::TeeSimulatorSource>(driver_));
            } else {
                ec.sources.push_back(std::make_shared<exporters::TeeParameterSource>(*e.parameters_dir));
            }
        } else if (e.source == "simulator") {
            auto src = std::make_shared<exporters::SystemMetricsSource>(e.sme);
            system_sources_.push_back(src);
            ec.sources.push_back(std::move(src));
        } else {
            ec.sources.push_back(std::make_shared<exporters::OsProcSource>(e.proc_root));
        }
        Served served{e, std::make_unique<exporters::ExporterService>(std::move(ec))};
        log::get()->info("event=exporter_listening kind={} url={}", job_name(e.kind), served.service->url());
        exporters_.push_back(std::move(served));
    }
}

std::vector<std::string> Stack::exporter_urls() const {
    std::vector<std::string> out;
    for (const auto& e : exporters_) out.push_back(e.service->url());
    return out;
}

std::vector<scrape::TargetSpec> Stack::initial_targets() const {
    if (!config_.scrape.targets.empty() || options_.mode == StackMode::aggregator) {
        return config_.scrape.targets;
    }
    std::vector<scrape::TargetSpec> specs;
    for (const auto& e : exporters_) {
        scrape::TargetSpec spec;
        spec.job = std::string(job_name(e.settings.kind));
        spec.url = e.service->url();
        spec.interval_ms = config_.scrape.interval_ms;
        spec.timeout_ms = config_.scrape.timeout_ms;
        specs.push_back(std::move(spec));
    }
    return specs;
}

void Stack::build_aggregator() {
    store_ = std::make_shared<tsdb::Store>();
    if (config_.tsdb.snapshot_path && std::filesystem::exists(*config_.tsdb.snapshot_path)) {
        store_->load(*config_.tsdb.snapshot_path);
        log::get()->info("event=snapshot_loaded path={} series={}",
                         log::kv_value(config_.tsdb.snapshot_path->string()), store_->series_count());
    }
    if (config_.tsdb.log_path) {
        store_->attach_log(*config_.tsdb.log_path);
    }
    hub_ = std::make_shared<api::EventHub>(config_.stream_queue);

    scrape::ScraperOptions so;
    so.default_interval_ms = config_.scrape.interval_ms;
    so.default_timeout_ms = config_.scrape.timeout_ms;
    so.discovery_path = config_.scrape.discovery_path;
    scraper_ = std::make_unique<scrape::Scraper>(store_, so);
    scraper_->on_event([hub = hub_](const scrape::ScrapeEvent& ev) { hub->publish(api::to_stream_event(ev)); });
    const auto now = clock_->now_ms();
    if (so.discovery_path) {
        scraper_->poll_discovery(now);
    } else {
        scraper_->reconcile(initial_targets(), now);
    }

    std::vector<analyze::AlertSink> sinks{analyze::log_sink(), [hub = hub_](const analyze::AnomalyAlert& a) {
                                              hub->publish(api::stream_event("alert", api::to_json(a)));
                                          }};
    analyzer_ = std::make_unique<analyze::Analyzer>(config_.rules, store_, std::move(sinks), now);
    last_gc_ms_ = now;

    if (options_.serve_api) {
        api::ApiOptions ao;
        ao.listen = config_.listen;
        ao.assets_dir = config_.dashboard_assets;
        ao.heartbeat_ms = config_.stream_heartbeat_ms;
        ao.boxplot_selectors = config_.boxplot_selectors;
        ao.boxplot_window_ms = config_.boxplot_window_ms;
        api::ApiBackends ab;
        ab.store = store_;
        ab.targets = [s = scraper_.get()] { return s->targets(); };
        ab.alerts = [a = analyzer_.get()](std::optional<analyze::AlertState> st) { return a->registry().list(st); };
        ab.events = hub_;
        ab.clock = clock_;
        api_ = std::make_unique<api::ApiServer>(std::move(ao), std::move(ab));
        log::get()->info("event=api_listening url={}", api_->base_url());
    }
}

void Stack::advance_simulator(std::int64_t now_ms) {
    if (!runner_) return;
    std::lock_guard lock(sim_mu_);
    runner_->advance_to(now_ms, [this](std::span<const sim::SystemEvent> events) {
        for (const auto& src : system_sources_) src->ingest(events);
    });
    if (config_.simulator->export_dir) {
        sim::export_parameters(driver_->snapshot(), *config_.simulator->export_dir);
    }
}

void Stack::step(std::int64_t now_ms) {
    advance_simulator(now_ms);
    if (scraper_) scraper_->run_pending(now_ms);
    if (analyzer_) analyzer_->step(now_ms);
    if (store_ && now_ms - last_gc_ms_ >= kGcEveryMs) {
        store_->gc(config_.tsdb.retention_ms, now_ms);
        last_gc_ms_ = now_ms;
    }
}

void Stack::housekeeping() {
    std::unique_lock lock(run_mu_);
    while (running_) {
        lock.unlock();
        const auto now = clock_->now_ms();
        try {
            advance_simulator(now);
            if (store_ && now - last_gc_ms_ >= kGcEveryMs) {
                auto dropped = store_->gc(config_.tsdb.retention_ms, now);
                if (dropped > 0) log::get()->debug("event=gc dropped={}", dropped);
                last_gc_ms_ = now;
            }
        } catch (const std::exception& e) {
            log::get()->error("event=housekeeping_failed error={}", log::kv_value(e.what()));
        }
        lock.lock();
        run_cv_.wait_for(lock, std::chrono::milliseconds(kSimTickMs), [this] { return !running_; });
    }
}

void Stack::start() {
    {
        std::lock_guard lock(run_mu_);
        if (running_ || stopped_) return;
        running_ = true;
    }
    housekeeper_ = std::thread([this] { housekeeping(); });
    if (scraper_) scraper_->start(clock_);
    if (analyzer_) analyzer_->start(clock_);
}

void Stack::stop() {
    {
        std::lock_guard lock(run_mu_);
        if (stopped_) return;
        stopped_ = true;
        running_ = false;
    }
    run_cv_.notify_all();
    if (api_) api_->stop();
    if (hub_) hub_->close();
    if (scraper_) scraper_->stop();
    if (analyzer_) analyzer_->stop();
    if (housekeeper_.joinable()) housekeeper_.join();
    for (auto& e : exporters_) e.service->stop();
    if (store_) {
        try {
            store_->flush();
            if (config_.tsdb.snapshot_path) {
                store_->write_snapshot(*config_.tsdb.snapshot_path);
                log::get()->info("event=snapshot_written path={} samples={}",
                                 log::kv_value(config_.tsdb.snapshot_path->string()), store_->sample_count());
            }
        } catch (const std::exception& e) {
            log::get()->error("event=persist_failed error={}", log::kv_value(e.what()));
        }
    }
}

}  // namespace ew
