// SPDX-License-Identifier: Apache-2.0
// enclavewatch: run the monitoring stack, a single exporter, or a fake-clock replay.

#include <CLI11.hpp>

#include <csignal>
#include <cstdlib>
#include <iostream>
#include <optional>
#include <pthread.h>

#include "enclavewatch/duration.hpp"
#include "enclavewatch/log.hpp"
#include "enclavewatch/net.hpp"
#include "enclavewatch/stack.hpp"

namespace {

constexpr int kExitConfig = 1;
constexpr int kExitBind = 2;

struct Globals {
    std::string config_path;
    std::string log_level;
};

ew::config::StackConfig load(const Globals& g) {
    std::string path = g.config_path;
    if (path.empty()) {
        if (const char* env = std::getenv("EW_CONFIG")) path = env;
    }
    auto cfg = path.empty() ? ew::config::parse_stack_config("{}", std::filesystem::current_path())
                            : ew::config::load_stack_config(path);
    if (!g.log_level.empty()) cfg.log_level = g.log_level;
    if (!ew::log::set_level(cfg.log_level)) {
        throw ew::config::ConfigError(ew::config::ConfigError::Code::InvalidValue, "log_level",
                                      "unknown level '" + cfg.log_level + "'");
    }
    ew::config::check_paths(cfg);
    return cfg;
}

/// Blocks SIGINT/SIGTERM in every thread spawned afterwards, then waits for one.
class SignalWaiter {
public:
    SignalWaiter() {
        sigemptyset(&set_);
        sigaddset(&set_, SIGINT);
        sigaddset(&set_, SIGTERM);
        pthread_sigmask(SIG_BLOCK, &set_, nullptr);
    }
    int wait() {
        int sig = 0;
        sigwait(&set_, &sig);
        return sig;
    }

private:
    sigset_t set_;
};

int serve(const ew::config::StackConfig& cfg, ew::StackOptions opts, SignalWaiter& signals) {
    auto clock = std::make_shared<ew::SystemClock>();
    ew::Stack stack(cfg, opts, clock);
    stack.start();
    int sig = signals.wait();
    ew::log::get()->info("event=shutdown signal={}", sig == SIGTERM ? "SIGTERM" : "SIGINT");
    stack.stop();
    return 0;
}

int replay(ew::config::StackConfig cfg, const std::string& scenario, std::int64_t duration_ms,
           std::optional<std::string> snapshot, std::optional<std::uint64_t> seed) {
    if (!cfg.simulator) cfg.simulator = ew::config::SimulatorSettings{};
    if (!scenario.empty()) {
        ew::sim::find_scenario(scenario);
        cfg.simulator->scenario = scenario;
    }
    if (seed) cfg.simulator->seed = *seed;
    cfg.tsdb.log_path.reset();
    if (snapshot) cfg.tsdb.snapshot_path = std::filesystem::absolute(*snapshot);
    // Replays start empty; a stale snapshot would only collide with the new timeline.
    if (cfg.tsdb.snapshot_path) std::filesystem::remove(*cfg.tsdb.snapshot_path);

    auto clock = std::make_shared<ew::ManualClock>(0);
    ew::StackOptions opts;
    opts.serve_api = false;
    opts.ephemeral_exporters = true;
    ew::Stack stack(cfg, opts, clock);
    for (std::int64_t t = 0; t <= duration_ms; t += 100) {
        clock->set(t);
        stack.step(t);
    }
    stack.stop();

    auto store = stack.store();
    const auto& reg = stack.analyzer()->registry();
    std::cout << "scenario=" << cfg.simulator->scenario << " duration_ms=" << duration_ms
              << " requests=" << stack.simulator()->requests() << " series=" << store->series_count()
              << " samples=" << store->sample_count() << " alerts_firing=" << reg.list(ew::analyze::AlertState::firing).size()
              << " alerts_resolved=" << reg.list(ew::analyze::AlertState::resolved).size() << "\n";
    for (const auto& t : stack.scraper()->targets()) {
        std::cout << "target job=" << t.spec.job << " health=" << ew::scrape::to_string(t.health) << "\n";
    }
    for (const auto& a : reg.list(std::nullopt)) {
        std::cout << ew::analyze::format_alert(a) << "\n";
    }
    if (cfg.tsdb.snapshot_path) std::cout << "snapshot=" << cfg.tsdb.snapshot_path->string() << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Metrics collection and anomaly alerting for SGX enclave workloads"};
    app.require_subcommand(1);
    Globals g;
    app.add_option("-c,--config", g.config_path, "Stack configuration file (JSON); falls back to $EW_CONFIG");
    app.add_option("--log-level", g.log_level, "trace, debug, info, warn, error or off");

    std::string listen;
    auto* all = app.add_subcommand("all", "Simulator, exporters, aggregator and API in one process");
    all->add_option("--listen", listen, "API listen address (host:port)");

    auto* aggregator = app.add_subcommand("aggregator", "Store, scraper, analyzer and API; scrapes configured targets");
    aggregator->add_option("--listen", listen, "API listen address (host:port)");

    std::string kind;
    std::string exporter_listen;
    auto* exporter = app.add_subcommand("exporter", "Serve one exporter kind");
    exporter->add_option("--kind", kind, "tee or system")->required()->check(CLI::IsMember({"tee", "system"}));
    exporter->add_option("--listen", exporter_listen, "Listen address for the first exporter of this kind");

    std::string scenario;
    std::string duration = "60s";
    std::optional<std::string> snapshot;
    std::optional<std::uint64_t> seed;
    auto* rep = app.add_subcommand("replay", "Run a scenario on a simulated clock and report what was collected");
    rep->add_option("--scenario", scenario, "Workload scenario name");
    rep->add_option("--duration", duration, "Simulated time, e.g. 60s or 10m (bare numbers are seconds)");
    rep->add_option("--snapshot", snapshot, "Write the store here when done");
    rep->add_option("--seed", seed, "Simulator seed");

    auto* check = app.add_subcommand("check-config", "Validate the configuration and exit");
    auto* scenarios = app.add_subcommand("scenarios", "List built-in workload scenarios");

    CLI11_PARSE(app, argc, argv);

    if (scenarios->parsed()) {
        for (const auto& s : ew::sim::builtin_scenarios()) std::cout << s.name << "\n";
        return 0;
    }

    // Signals must be blocked before any server thread exists.
    SignalWaiter signals;
    try {
        auto cfg = load(g);
        if (check->parsed()) {
            std::cout << "ok\n";
            return 0;
        }
        if (rep->parsed()) {
            std::int64_t ms = 0;
            try {
                bool bare = !duration.empty() && duration.find_first_not_of("0123456789") == std::string::npos;
                ms = bare ? std::stoll(duration) * 1000 : ew::parse_duration_ms(duration);
            } catch (const std::exception&) {
                std::cerr << "error: invalid --duration '" << duration << "'\n";
                return kExitConfig;
            }
            return replay(std::move(cfg), scenario, ms, snapshot, seed);
        }
        ew::StackOptions opts;
        if (all->parsed() || aggregator->parsed()) {
            opts.mode = all->parsed() ? ew::StackMode::all : ew::StackMode::aggregator;
            if (!listen.empty()) cfg.listen = listen;
        } else {
            auto k = kind == "tee" ? ew::config::ExporterKind::tee : ew::config::ExporterKind::system;
            opts.mode = kind == "tee" ? ew::StackMode::exporter_tee : ew::StackMode::exporter_system;
            bool found = false;
            for (auto& e : cfg.exporters) {
                if (e.kind == k && !found) {
                    if (!exporter_listen.empty()) e.listen = exporter_listen;
                    found = true;
                }
            }
            if (!found) {
                auto d = ew::config::default_exporters();
                auto e = k == ew::config::ExporterKind::tee ? d[0] : d[1];
                if (!exporter_listen.empty()) e.listen = exporter_listen;
                cfg.exporters.push_back(e);
            }
        }
        return serve(cfg, opts, signals);
    } catch (const ew::config::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const ew::exporters::ExporterError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return e.code() == ew::exporters::ExporterError::Code::BindError ? kExitBind : kExitConfig;
    } catch (const ew::api::ApiError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return e.code() == "bind_error" ? kExitBind : kExitConfig;
    } catch (const ew::net::AddressError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitBind;
    } catch (const ew::sim::SimError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    }
}
