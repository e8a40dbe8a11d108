// SPDX-License-Identifier: Apache-2.0
#pragma once

// Metric exporters: the TEE exporter (SGX driver counters) and the system exporter
// (syscalls, context switches, page faults, LLC statistics), each served over HTTP.

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "enclavewatch/metrics_model.hpp"
#include "enclavewatch/sgx_sim.hpp"

namespace httplib {
class Server;
}

namespace ew::exporters {

class ExporterError : public std::runtime_error {
public:
    enum class Code { MissingParameterFile, UnparsableValue, BindError, InvalidConfig };

    ExporterError(Code code, std::string subject, const std::string& what)
        : std::runtime_error(what), code_(code), subject_(std::move(subject)) {}

    Code code() const noexcept { return code_; }
    /// Parameter file name or listen address the error refers to.
    const std::string& subject() const noexcept { return subject_; }

private:
    Code code_;
    std::string subject_;
};

class MetricSource {
public:
    virtual ~MetricSource() = default;
    virtual std::string name() const = 0;
    /// Consistent snapshot of the source; never changes observable values.
    virtual std::vector<MetricFamily> collect() const = 0;
};

// --- TEE metrics -----------------------------------------------------------

/// TEE families built from a driver snapshot.
std::vector<MetricFamily> tee_families(const sim::SgxDriverState& state);

/// Reads the driver parameter files in `parameters_dir`.
std::vector<MetricFamily> tee_collect(const std::filesystem::path& parameters_dir);

class TeeParameterSource : public MetricSource {
public:
    explicit TeeParameterSource(std::filesystem::path dir) : dir_(std::move(dir)) {}
    std::string name() const override { return "sgx_parameters"; }
    std::vector<MetricFamily> collect() const override { return tee_collect(dir_); }

private:
    std::filesystem::path dir_;
};

class TeeSimulatorSource : public MetricSource {
public:
    explicit TeeSimulatorSource(std::shared_ptr<const sim::SgxDriver> driver) : driver_(std::move(driver)) {}
    std::string name() const override { return "sgx_simulator"; }
    std::vector<MetricFamily> collect() const override { return tee_families(driver_->snapshot()); }

private:
    std::shared_ptr<const sim::SgxDriver> driver_;
};

// --- System metrics --------------------------------------------------------

struct SmeOptions {
    /// When non-empty, only events of these processes are counted (host-wide
    /// context switches excepted).
    std::vector<std::int64_t> filter_pids;
    /// Distinct pid label values per family; further pids are folded into pid="other".
    std::size_t max_pids = 1024;
};

/// Cumulative counters over a system event stream. Not synchronized.
class SystemEventCounters {
public:
    explicit SystemEventCounters(SmeOptions options = {});

    void ingest(std::span<const sim::SystemEvent> events);
    std::vector<MetricFamily> families() const;

private:
    bool selected(std::int64_t pid) const;
    std::string pid_label(std::set<std::int64_t>& admitted, std::int64_t pid) const;

    SmeOptions options_;
    std::set<std::int64_t> filter_;
    std::set<std::int64_t> syscall_pids_;
    std::set<std::int64_t> switch_pids_;
    std::map<std::pair<std::string, std::string>, std::uint64_t> syscalls_;  // (syscall, pid)
    std::map<std::string, std::uint64_t> switches_by_pid_;
    std::uint64_t switches_host_ = 0;
    std::uint64_t faults_user_ = 0;
    std::uint64_t faults_kernel_ = 0;
    std::uint64_t llc_misses_ = 0;
    std::uint64_t llc_references_ = 0;
};

/// Families for one event window, counted from zero.
std::vector<MetricFamily> sme_collect(std::span<const sim::SystemEvent> window, const SmeOptions& options = {});

/// Thread-safe system exporter source fed by a simulator event sink.
class SystemMetricsSource : public MetricSource {
public:
    explicit SystemMetricsSource(SmeOptions options = {}) : counters_(std::move(options)) {}

    std::string name() const override { return "system_events"; }
    std::vector<MetricFamily> collect() const override;

    void ingest(std::span<const sim::SystemEvent> events);
    sim::EventSink sink();

private:
    mutable std::mutex mu_;
    SystemEventCounters counters_;
};

/// Host-wide counters from /proc (Linux only): context switches and page faults.
class OsProcSource : public MetricSource {
public:
    explicit OsProcSource(std::filesystem::path proc_root = "/proc") : root_(std::move(proc_root)) {}
    std::string name() const override { return "os_proc"; }
    std::vector<MetricFamily> collect() const override;

private:
    std::filesystem::path root_;
};

// --- Serving ---------------------------------------------------------------

/// Adds every static label a series does not already carry.
std::vector<MetricFamily> merge_static_labels(std::vector<MetricFamily> families, const LabelSet& static_labels);

/// Collects all sources, merging families of the same name, then applies static labels.
std::vector<MetricFamily> collect_all(const std::vector<std::shared_ptr<MetricSource>>& sources,
                                      const LabelSet& static_labels);

struct ExporterConfig {
    std::string listen = "127.0.0.1:0";
    std::vector<std::shared_ptr<MetricSource>> sources;
    LabelSet static_labels;
};

/// HTTP service exposing `GET /metrics` and `GET /healthz`.
class ExporterService {
public:
    /// Binds immediately; throws ExporterError(BindError) when the address is taken.
    explicit ExporterService(ExporterConfig config);
    ~ExporterService();

    ExporterService(const ExporterService&) = delete;
    ExporterService& operator=(const ExporterService&) = delete;

    int port() const noexcept { return port_; }
    std::string host() const { return host_; }
    std::string url() const;
    std::string render() const;
    /// Stops accepting connections and waits for in-flight requests.
    void stop();

private:
    ExporterConfig config_;
    std::unique_ptr<httplib::Server> server_;
    std::thread thread_;
    std::string host_;
    int port_ = 0;
};

std::unique_ptr<ExporterService> serve_metrics(ExporterConfig config);

}  // namespace ew::exporters
