// SPDX-License-Identifier: Apache-2.0
#include "enclavewatch/exporters.hpp"

#include <httplib.h>

#include <charconv>
#include <fstream>
#include <optional>
#include <sstream>

#include "enclavewatch/exposition.hpp"
#include "enclavewatch/net.hpp"

namespace ew::exporters {

namespace {

struct TeeMetric {
    const char* name;
    MetricKind kind;
    const char* help;
};

// Order matches sim::parameter_values().
constexpr TeeMetric kTeeMetrics[] = {
    {"sgx_nr_enclaves", MetricKind::gauge, "Active enclaves"},
    {"sgx_nr_free_pages", MetricKind::gauge, "Free EPC pages"},
    {"sgx_epc_total_pages", MetricKind::gauge, "Total EPC pages"},
    {"sgx_pages_marked_old", MetricKind::gauge, "EPC pages marked as old (eviction candidates)"},
    {"sgx_enclaves_initialized", MetricKind::counter, "Enclaves initialized"},
    {"sgx_enclaves_removed", MetricKind::counter, "Enclaves removed"},
    {"sgx_nr_evicted", MetricKind::counter, "EPC pages evicted to main memory"},
    {"sgx_pages_added", MetricKind::counter, "Pages added to enclaves"},
    {"sgx_pages_reclaimed", MetricKind::counter, "Pages reclaimed from main memory"},
};

MetricFamily scalar_family(const char* name, MetricKind kind, const char* help, double value) {
    MetricFamily f{name, kind, help, {}};
    f.series.push_back(Series{LabelSet{}, Sample{Sample::kNoTimestamp, value}});
    return f;
}

LabelSet labels(std::vector<LabelPair> pairs) {
    return canonicalize_labels(std::move(pairs));
}

}  // namespace

std::vector<MetricFamily> tee_families(const sim::SgxDriverState& state) {
    auto values = sim::parameter_values(state);
    std::vector<MetricFamily> out;
    out.reserve(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        const auto& m = kTeeMetrics[i];
        out.push_back(scalar_family(m.name, m.kind, m.help, static_cast<double>(values[i].second)));
    }
    return out;
}

std::vector<MetricFamily> tee_collect(const std::filesystem::path& parameters_dir) {
    std::vector<MetricFamily> out;
    for (const auto& m : kTeeMetrics) {
        auto path = parameters_dir / m.name;
        std::ifstream in(path, std::ios::binary);
        if (!in) {
            throw ExporterError(ExporterError::Code::MissingParameterFile, m.name,
                                "missing parameter file " + path.string());
        }
        std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        while (!text.empty() && (text.back() == '\n' || text.back() == ' ' || text.back() == '\r')) {
            text.pop_back();
        }
        std::uint64_t value = 0;
        auto res = std::from_chars(text.data(), text.data() + text.size(), value);
        if (text.empty() || res.ec != std::errc() || res.ptr != text.data() + text.size()) {
            throw ExporterError(ExporterError::Code::UnparsableValue, m.name,
                                "cannot parse value of " + path.string() + ": '" + text + "'");
        }
        out.push_back(scalar_family(m.name, m.kind, m.help, static_cast<double>(value)));
    }
    return out;
}

// ---------------------------------------------------------------------------

SystemEventCounters::SystemEventCounters(SmeOptions options)
    : options_(std::move(options)), filter_(options_.filter_pids.begin(), options_.filter_pids.end()) {}

bool SystemEventCounters::selected(std::int64_t pid) const {
    return filter_.empty() || filter_.contains(pid);
}

std::string SystemEventCounters::pid_label(std::set<std::int64_t>& admitted, std::int64_t pid) const {
    if (admitted.contains(pid)) {
        return std::to_string(pid);
    }
    if (admitted.size() >= options_.max_pids) {
        return "other";
    }
    admitted.insert(pid);
    return std::to_string(pid);
}

void SystemEventCounters::ingest(std::span<const sim::SystemEvent> events) {
    using sim::EventKind;
    for (const auto& ev : events) {
        if (ev.kind == EventKind::context_switch) {
            ++switches_host_;
        }
        if (!selected(ev.pid)) {
            continue;
        }
        switch (ev.kind) {
            case EventKind::syscall:
                ++syscalls_[{ev.syscall, pid_label(syscall_pids_, ev.pid)}];
                break;
            case EventKind::context_switch:
                ++switches_by_pid_[pid_label(switch_pids_, ev.pid)];
                break;
            case EventKind::page_fault:
                ++(ev.space == sim::PageSpace::user ? faults_user_ : faults_kernel_);
                break;
            case EventKind::cache_ref:
                ++llc_references_;
                break;
            case EventKind::cache_miss:
                ++llc_misses_;
                break;
        }
    }
}

std::vector<MetricFamily> SystemEventCounters::families() const {
    std::vector<MetricFamily> out;

    MetricFamily syscalls{"syscalls", MetricKind::counter, "System calls entered (raw_syscalls:sys_enter)", {}};
    for (const auto& [key, n] : syscalls_) {
        syscalls.series.push_back(Series{labels({{"syscall", key.first}, {"pid", key.second}}),
                                         Sample{Sample::kNoTimestamp, static_cast<double>(n)}});
    }
    out.push_back(std::move(syscalls));

    MetricFamily switches{"context_switches", MetricKind::counter, "Context switches (sched:sched_switch)", {}};
    switches.series.push_back(Series{labels({{"scope", "host"}}),
                                     Sample{Sample::kNoTimestamp, static_cast<double>(switches_host_)}});
    for (const auto& [pid, n] : switches_by_pid_) {
        switches.series.push_back(Series{labels({{"scope", "pid"}, {"pid", pid}}),
                                         Sample{Sample::kNoTimestamp, static_cast<double>(n)}});
    }
    out.push_back(std::move(switches));

    MetricFamily faults{"page_faults", MetricKind::counter, "Page faults (exceptions:page_fault_user/kernel)", {}};
    faults.series.push_back(Series{labels({{"space", "kernel"}}),
                                   Sample{Sample::kNoTimestamp, static_cast<double>(faults_kernel_)}});
    faults.series.push_back(Series{labels({{"space", "user"}}),
                                   Sample{Sample::kNoTimestamp, static_cast<double>(faults_user_)}});
    out.push_back(std::move(faults));

    out.push_back(scalar_family("llc_misses", MetricKind::counter, "Last-level cache misses",
                                static_cast<double>(llc_misses_)));
    out.push_back(scalar_family("llc_references", MetricKind::counter, "Last-level cache references",
                                static_cast<double>(llc_references_)));
    return out;
}

std::vector<MetricFamily> sme_collect(std::span<const sim::SystemEvent> window, const SmeOptions& options) {
    SystemEventCounters counters(options);
    counters.ingest(window);
    return counters.families();
}

std::vector<MetricFamily> SystemMetricsSource::collect() const {
    std::lock_guard lock(mu_);
    return counters_.families();
}

void SystemMetricsSource::ingest(std::span<const sim::SystemEvent> events) {
    std::lock_guard lock(mu_);
    counters_.ingest(events);
}

sim::EventSink SystemMetricsSource::sink() {
    return [this](std::span<const sim::SystemEvent> events) { ingest(events); };
}

std::vector<MetricFamily> OsProcSource::collect() const {
    auto read_keyed = [](const std::filesystem::path& path, std::string_view key) -> std::optional<double> {
        std::ifstream in(path);
        std::string line;
        while (std::getline(in, line)) {
            std::istringstream ls(line);
            std::string k;
            double v = 0;
            if (ls >> k >> v && k == key) {
                return v;
            }
        }
        return std::nullopt;
    };
    std::vector<MetricFamily> out;
    if (auto ctxt = read_keyed(root_ / "stat", "ctxt")) {
        MetricFamily f{"context_switches", MetricKind::counter, "Context switches (host, /proc/stat)", {}};
        f.series.push_back(Series{labels({{"scope", "host"}}), Sample{Sample::kNoTimestamp, *ctxt}});
        out.push_back(std::move(f));
    }
    if (auto faults = read_keyed(root_ / "vmstat", "pgfault")) {
        out.push_back(scalar_family("os_page_faults", MetricKind::counter, "Page faults (host, /proc/vmstat)",
                                    *faults));
    }
    return out;
}

// ---------------------------------------------------------------------------

std::vector<MetricFamily> merge_static_labels(std::vector<MetricFamily> families, const LabelSet& static_labels) {
    if (static_labels.empty()) {
        return families;
    }
    for (auto& family : families) {
        std::vector<Series> merged;
        std::set<LabelSet> seen;
        for (auto& series : family.series) {
            LabelSet l = series.labels;
            for (const auto& [k, v] : static_labels) {
                if (!l.find(k)) {
                    l = l.with(k, v);
                }
            }
            if (seen.insert(l).second) {
                merged.push_back(Series{std::move(l), series.sample});
            }
        }
        family.series = std::move(merged);
    }
    return families;
}

std::vector<MetricFamily> collect_all(const std::vector<std::shared_ptr<MetricSource>>& sources,
                                      const LabelSet& static_labels) {
    std::vector<MetricFamily> out;
    std::map<std::string, std::size_t> index;
    for (const auto& source : sources) {
        for (auto& family : source->collect()) {
            auto it = index.find(family.name);
            if (it == index.end()) {
                index.emplace(family.name, out.size());
                out.push_back(std::move(family));
                continue;
            }
            auto& existing = out[it->second];
            if (existing.kind != family.kind) {
                continue;
            }
            std::set<LabelSet> seen;
            for (const auto& s : existing.series) {
                seen.insert(s.labels);
            }
            for (auto& s : family.series) {
                if (seen.insert(s.labels).second) {
                    existing.series.push_back(std::move(s));
                }
            }
        }
    }
    return merge_static_labels(std::move(out), static_labels);
}

ExporterService::ExporterService(ExporterConfig config)
    : config_(std::move(config)), server_(std::make_unique<httplib::Server>()) {
    net::HostPort hp;
    try {
        hp = net::parse_listen(config_.listen);
    } catch (const net::AddressError& e) {
        throw ExporterError(ExporterError::Code::InvalidConfig, config_.listen, e.what());
    }

    server_->Get("/metrics", [this](const httplib::Request&, httplib::Response& res) {
        try {
            res.set_content(render(), std::string(exposition::kContentType));
        } catch (const std::exception& e) {
            res.status = 500;
            res.set_content(std::string("collect failed: ") + e.what() + "\n", "text/plain");
        }
    });
    server_->Get("/healthz", [](const httplib::Request&, httplib::Response& res) {
        res.set_content("ok\n", "text/plain");
    });

    server_->set_socket_options(net::configure_listen_socket);
    host_ = hp.host;
    if (hp.port == 0) {
        port_ = server_->bind_to_any_port(hp.host);
    } else {
        port_ = server_->bind_to_port(hp.host, hp.port) ? hp.port : -1;
    }
    if (port_ <= 0) {
        throw ExporterError(ExporterError::Code::BindError, config_.listen, "cannot bind " + config_.listen);
    }
    thread_ = std::thread([this] { server_->listen_after_bind(); });
    server_->wait_until_ready();
}

ExporterService::~ExporterService() {
    stop();
}

std::string ExporterService::url() const {
    return "http://" + host_ + ":" + std::to_string(port_) + "/metrics";
}

std::string ExporterService::render() const {
    return exposition::encode(collect_all(config_.sources, config_.static_labels));
}

void ExporterService::stop() {
    if (server_) {
        server_->stop();
    }
    if (thread_.joinable()) {
        thread_.join();
    }
}

std::unique_ptr<ExporterService> serve_metrics(ExporterConfig config) {
    return std::make_unique<ExporterService>(std::move(config));
}

}  // namespace ew::exporters
