// SPDX-License-Identifier: Apache-2.0
#pragma once

// The stack configuration file: one JSON document, validated in full at startup.
// Relative paths are resolved against the directory holding the file.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "enclavewatch/analyzer.hpp"
#include "enclavewatch/exporters.hpp"
#include "enclavewatch/scraper.hpp"
#include "enclavewatch/sgx_sim.hpp"

namespace ew::config {

class ConfigError : public std::runtime_error {
public:
    enum class Code { Unreadable, Malformed, InvalidValue, MissingPath };

    ConfigError(Code code, std::string field, const std::string& what)
        : std::runtime_error(field.empty() ? what : field + ": " + what), code_(code), field_(std::move(field)) {}

    Code code() const noexcept { return code_; }
    /// Dotted key path of the offending entry, e.g. `rules[2].threshold`.
    const std::string& field() const noexcept { return field_; }

private:
    Code code_;
    std::string field_;
};

enum class ExporterKind { tee, system };

struct ExporterSettings {
    ExporterKind kind = ExporterKind::tee;
    std::string listen;
    /// tee: "simulator" or "parameters"; system: "simulator" or "proc".
    std::string source = "simulator";
    std::optional<std::filesystem::path> parameters_dir;
    std::filesystem::path proc_root = "/proc";
    LabelSet static_labels;
    exporters::SmeOptions sme;
};

struct SimulatorSettings {
    std::string scenario = "scone-580C-105MB";
    std::uint64_t seed = 1;
    std::uint64_t epc_pages = sim::kDefaultEpcPages;
    /// When set, driver parameter files are rewritten here as the simulation runs.
    std::optional<std::filesystem::path> export_dir;
};

struct TsdbSettings {
    std::int64_t retention_ms = 24LL * 3'600'000;
    std::optional<std::filesystem::path> snapshot_path;
    std::optional<std::filesystem::path> log_path;
};

struct ScrapeSettings {
    std::int64_t interval_ms = scrape::kDefaultIntervalMs;
    std::int64_t timeout_ms = scrape::kDefaultTimeoutMs;
    std::optional<std::filesystem::path> discovery_path;
    std::vector<scrape::TargetSpec> targets;
};

struct StackConfig {
    std::string listen = "127.0.0.1:9090";
    std::string log_level = "info";
    TsdbSettings tsdb;
    ScrapeSettings scrape;
    std::vector<analyze::ThresholdRule> rules;
    std::vector<ExporterSettings> exporters;
    std::optional<SimulatorSettings> simulator = SimulatorSettings{};
    std::optional<std::filesystem::path> dashboard_assets;
    std::vector<tsdb::Selector> boxplot_selectors;
    std::int64_t boxplot_window_ms = 300'000;
    std::int64_t stream_heartbeat_ms = 15'000;
    std::size_t stream_queue = 1024;
};

/// Defaults used when the file omits `exporters`: one TEE and one system exporter
/// on 127.0.0.1:9100 and :9101, both fed by the simulator.
std::vector<ExporterSettings> default_exporters();

/// Parses and validates. `base_dir` anchors relative paths. Throws ConfigError.
StackConfig parse_stack_config(std::string_view text, const std::filesystem::path& base_dir);
StackConfig load_stack_config(const std::filesystem::path& path);

/// Checks that every referenced input path exists. Throws ConfigError(MissingPath).
void check_paths(const StackConfig& config);

}  // namespace ew::config
