// SPDX-License-Identifier: Apache-2.0
#include "enclavewatch/config.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "enclavewatch/api_server.hpp"
#include "enclavewatch/duration.hpp"
#include "enclavewatch/net.hpp"

namespace ew::config {

using json = nlohmann::json;

namespace {

[[noreturn]] void invalid(const std::string& field, const std::string& why) {
    throw ConfigError(ConfigError::Code::InvalidValue, field, why);
}

/// Typed access to one JSON object that rejects keys it was not asked about.
class Section {
public:
    Section(const json& node, std::string path) : node_(node), path_(std::move(path)) {
        if (!node_.is_object()) {
            invalid(path_.empty() ? "(root)" : path_, "expected an object");
        }
    }

    std::string field(std::string_view key) const {
        return path_.empty() ? std::string(key) : path_ + "." + std::string(key);
    }

    const json* get(std::string_view key) {
        seen_.insert(std::string(key));
        auto it = node_.find(std::string(key));
        return it == node_.end() || it->is_null() ? nullptr : &*it;
    }

    std::optional<std::string> str(std::string_view key) {
        const json* v = get(key);
        if (!v) return std::nullopt;
        if (!v->is_string()) invalid(field(key), "expected a string");
        return v->get<std::string>();
    }

    std::optional<double> number(std::string_view key) {
        const json* v = get(key);
        if (!v) return std::nullopt;
        if (!v->is_number()) invalid(field(key), "expected a number");
        return v->get<double>();
    }

    std::optional<std::uint64_t> count(std::string_view key) {
        const json* v = get(key);
        if (!v) return std::nullopt;
        if (!v->is_number_unsigned()) invalid(field(key), "expected a non-negative integer");
        return v->get<std::uint64_t>();
    }

    std::optional<std::int64_t> duration(std::string_view key) {
        const json* v = get(key);
        if (!v) return std::nullopt;
        if (v->is_number_unsigned()) return v->get<std::int64_t>();
        if (!v->is_string()) invalid(field(key), "expected a duration such as \"5s\"");
        try {
            return parse_duration_ms(v->get<std::string>());
        } catch (const std::invalid_argument& e) {
            invalid(field(key), e.what());
        }
    }

    std::optional<std::filesystem::path> path(std::string_view key, const std::filesystem::path& base) {
        auto s = str(key);
        if (!s) return std::nullopt;
        if (s->empty()) invalid(field(key), "empty path");
        std::filesystem::path p(*s);
        return p.is_absolute() ? p : base / p;
    }

    std::vector<std::string> strings(std::string_view key) {
        const json* v = get(key);
        std::vector<std::string> out;
        if (!v) return out;
        if (!v->is_array()) invalid(field(key), "expected an array of strings");
        for (const auto& item : *v) {
            if (!item.is_string()) invalid(field(key), "expected an array of strings");
            out.push_back(item.get<std::string>());
        }
        return out;
    }

    LabelSet labels(std::string_view key) {
        const json* v = get(key);
        if (!v) return {};
        if (!v->is_object()) invalid(field(key), "expected an object of string values");
        std::vector<LabelPair> pairs;
        for (const auto& [k, val] : v->items()) {
            if (!val.is_string()) invalid(field(key) + "." + k, "label values must be strings");
            pairs.emplace_back(k, val.get<std::string>());
        }
        try {
            return canonicalize_labels(std::move(pairs));
        } catch (const ModelError& e) {
            invalid(field(key), e.what());
        }
    }

    /// Call once every key has been read.
    void finish() const {
        for (const auto& [k, _] : node_.items()) {
            if (!seen_.contains(k)) {
                invalid(field(k), "unknown key");
            }
        }
    }

private:
    const json& node_;
    std::string path_;
    std::set<std::string> seen_;
};

std::vector<tsdb::Matcher> matchers_at(const std::string& field, const std::optional<std::string>& text) {
    if (!text) return {};
    try {
        return api::parse_matchers(*text);
    } catch (const api::ApiError& e) {
        invalid(field, e.what());
    }
}

void check_listen(const std::string& field, const std::string& addr) {
    try {
        net::parse_listen(addr);
    } catch (const net::AddressError& e) {
        invalid(field, e.what());
    }
}

analyze::ThresholdRule parse_rule(const json& node, const std::string& path) {
    Section s(node, path);
    analyze::ThresholdRule r;
    r.id = s.str("id").value_or("");
    if (r.id.empty()) invalid(s.field("id"), "required");
    r.query.selector.metric_name = s.str("metric").value_or("");
    if (!is_identifier(r.query.selector.metric_name)) invalid(s.field("metric"), "must be a metric name");
    r.query.selector.matchers = matchers_at(s.field("matchers"), s.str("matchers"));

    tsdb::Aggregation agg;
    auto agg_name = s.str("agg").value_or("max");
    auto op = tsdb::parse_agg(agg_name);
    if (!op) invalid(s.field("agg"), "unknown aggregation '" + agg_name + "'");
    agg.op = *op;
    agg.q = s.number("q").value_or(0.5);
    agg.group_by = s.strings("group_by");
    r.query.agg = agg;
    r.query.step_ms = s.duration("step").value_or(scrape::kDefaultIntervalMs);

    auto cmp = s.str("comparator").value_or(">");
    auto parsed = analyze::parse_comparator(cmp);
    if (!parsed) invalid(s.field("comparator"), "expected one of > < >= <=");
    r.comparator = *parsed;
    auto thr = s.number("threshold");
    if (!thr) invalid(s.field("threshold"), "required");
    r.threshold = *thr;
    r.window_ms = s.duration("window").value_or(r.window_ms);
    r.stride_ms = s.duration("stride").value_or(r.stride_ms);
    r.min_violation_points = static_cast<std::uint32_t>(s.count("min_violation_points").value_or(1));
    auto sev = s.str("severity").value_or("warning");
    auto severity = analyze::parse_severity(sev);
    if (!severity) invalid(s.field("severity"), "expected info, warning or critical");
    r.severity = *severity;
    s.finish();
    try {
        analyze::validate(r);
    } catch (const analyze::AnalyzerError& e) {
        invalid(path, e.what());
    }
    return r;
}

ExporterSettings parse_exporter(const json& node, const std::string& path, const std::filesystem::path& base) {
    Section s(node, path);
    ExporterSettings e;
    auto kind = s.str("kind").value_or("");
    if (kind == "tee") {
        e.kind = ExporterKind::tee;
    } else if (kind == "system") {
        e.kind = ExporterKind::system;
    } else {
        invalid(s.field("kind"), "expected \"tee\" or \"system\"");
    }
    e.listen = s.str("listen").value_or(e.kind == ExporterKind::tee ? "127.0.0.1:9100" : "127.0.0.1:9101");
    check_listen(s.field("listen"), e.listen);
    e.source = s.str("source").value_or("simulator");
    const bool ok_source = e.source == "simulator" || (e.kind == ExporterKind::tee && e.source == "parameters") ||
                           (e.kind == ExporterKind::system && e.source == "proc");
    if (!ok_source) {
        invalid(s.field("source"), e.kind == ExporterKind::tee ? "expected \"simulator\" or \"parameters\""
                                                               : "expected \"simulator\" or \"proc\"");
    }
    e.parameters_dir = s.path("parameters_dir", base);
    if (e.source == "parameters" && !e.parameters_dir) {
        invalid(s.field("parameters_dir"), "required when source is \"parameters\"");
    }
    e.proc_root = s.path("proc_root", base).value_or("/proc");
    e.static_labels = s.labels("static_labels");
    if (const json* pids = s.get("filter_pids")) {
        if (!pids->is_array()) invalid(s.field("filter_pids"), "expected an array of integers");
        for (const auto& p : *pids) {
            if (!p.is_number_integer()) invalid(s.field("filter_pids"), "expected an array of integers");
            e.sme.filter_pids.push_back(p.get<std::int64_t>());
        }
    }
    e.sme.max_pids = s.count("max_pids").value_or(e.sme.max_pids);
    if (e.sme.max_pids == 0) invalid(s.field("max_pids"), "must be at least 1");
    s.finish();
    return e;
}

}  // namespace

std::vector<ExporterSettings> default_exporters() {
    ExporterSettings tee;
    tee.kind = ExporterKind::tee;
    tee.listen = "127.0.0.1:9100";
    ExporterSettings system;
    system.kind = ExporterKind::system;
    system.listen = "127.0.0.1:9101";
    return {tee, system};
}

StackConfig parse_stack_config(std::string_view text, const std::filesystem::path& base_dir) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(ConfigError::Code::Malformed, "", e.what());
    }

    StackConfig cfg;
    Section root(doc, "");
    cfg.listen = root.str("listen").value_or(cfg.listen);
    check_listen("listen", cfg.listen);
    cfg.log_level = root.str("log_level").value_or(cfg.log_level);
    static const std::set<std::string> levels{"trace", "debug", "info", "warn", "error", "off"};
    if (!levels.contains(cfg.log_level)) invalid("log_level", "expected trace, debug, info, warn, error or off");

    if (const json* node = root.get("tsdb")) {
        Section s(*node, "tsdb");
        cfg.tsdb.retention_ms = s.duration("retention").value_or(cfg.tsdb.retention_ms);
        if (cfg.tsdb.retention_ms <= 0) invalid("tsdb.retention", "must be positive");
        cfg.tsdb.snapshot_path = s.path("snapshot_path", base_dir);
        cfg.tsdb.log_path = s.path("log_path", base_dir);
        s.finish();
    }

    if (const json* node = root.get("scrape")) {
        Section s(*node, "scrape");
        cfg.scrape.interval_ms = s.duration("interval").value_or(cfg.scrape.interval_ms);
        cfg.scrape.timeout_ms = s.duration("timeout").value_or(cfg.scrape.timeout_ms);
        if (cfg.scrape.interval_ms <= 0) invalid("scrape.interval", "must be positive");
        if (cfg.scrape.timeout_ms <= 0 || cfg.scrape.timeout_ms >= cfg.scrape.interval_ms) {
            invalid("scrape.timeout", "must be positive and shorter than scrape.interval");
        }
        cfg.scrape.discovery_path = s.path("discovery_path", base_dir);
        if (const json* targets = s.get("targets")) {
            try {
                cfg.scrape.targets =
                    scrape::parse_discovery(targets->dump(), cfg.scrape.interval_ms, cfg.scrape.timeout_ms);
            } catch (const scrape::DiscoveryError& e) {
                invalid("scrape.targets", e.what());
            }
        }
        s.finish();
    }

    if (const json* node = root.get("rules")) {
        if (!node->is_array()) invalid("rules", "expected an array");
        std::set<std::string> ids;
        for (std::size_t i = 0; i < node->size(); ++i) {
            auto path = "rules[" + std::to_string(i) + "]";
            auto rule = parse_rule((*node)[i], path);
            if (!ids.insert(rule.id).second) invalid(path + ".id", "duplicate rule id '" + rule.id + "'");
            cfg.rules.push_back(std::move(rule));
        }
    }

    if (const json* node = root.get("exporters")) {
        if (!node->is_array()) invalid("exporters", "expected an array");
        for (std::size_t i = 0; i < node->size(); ++i) {
            cfg.exporters.push_back(parse_exporter((*node)[i], "exporters[" + std::to_string(i) + "]", base_dir));
        }
    } else {
        cfg.exporters = default_exporters();
    }

    const json* sim_node = root.get("simulator");
    if (doc.contains("simulator") && doc["simulator"].is_null()) {
        cfg.simulator.reset();
    } else if (const json* node = sim_node) {
        if (node->is_boolean()) {
            if (!node->get<bool>()) cfg.simulator.reset();
        } else {
            Section s(*node, "simulator");
            SimulatorSettings sim;
            sim.scenario = s.str("scenario").value_or(sim.scenario);
            try {
                sim::find_scenario(sim.scenario);
            } catch (const sim::SimError& e) {
                invalid("simulator.scenario", e.what());
            }
            sim.seed = s.count("seed").value_or(sim.seed);
            sim.epc_pages = s.count("epc_pages").value_or(sim.epc_pages);
            if (sim.epc_pages == 0) invalid("simulator.epc_pages", "must be positive");
            sim.export_dir = s.path("export_dir", base_dir);
            s.finish();
            cfg.simulator = sim;
        }
    }
    for (std::size_t i = 0; i < cfg.exporters.size(); ++i) {
        if (cfg.exporters[i].source == "simulator" && !cfg.simulator) {
            invalid("exporters[" + std::to_string(i) + "].source", "the simulator is disabled");
        }
    }

    if (const json* node = root.get("dashboard")) {
        Section s(*node, "dashboard");
        cfg.dashboard_assets = s.path("assets", base_dir);
        s.finish();
    }

    if (const json* node = root.get("boxplots")) {
        Section s(*node, "boxplots");
        for (const auto& name : s.strings("metrics")) {
            if (!is_identifier(name)) invalid("boxplots.metrics", "invalid metric name '" + name + "'");
            cfg.boxplot_selectors.push_back(tsdb::Selector{name, {}});
        }
        cfg.boxplot_window_ms = s.duration("window").value_or(cfg.boxplot_window_ms);
        if (cfg.boxplot_window_ms <= 0) invalid("boxplots.window", "must be positive");
        s.finish();
    }

    if (const json* node = root.get("stream")) {
        Section s(*node, "stream");
        cfg.stream_heartbeat_ms = s.duration("heartbeat").value_or(cfg.stream_heartbeat_ms);
        cfg.stream_queue = s.count("queue").value_or(cfg.stream_queue);
        if (cfg.stream_heartbeat_ms <= 0) invalid("stream.heartbeat", "must be positive");
        if (cfg.stream_queue == 0) invalid("stream.queue", "must be at least 1");
        s.finish();
    }
    root.finish();
    return cfg;
}

StackConfig load_stack_config(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw ConfigError(ConfigError::Code::Unreadable, "", "cannot read config file " + path.string());
    }
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_stack_config(buf.str(), std::filesystem::absolute(path).parent_path());
}

void check_paths(const StackConfig& cfg) {
    auto need = [](const std::string& field, const std::optional<std::filesystem::path>& p, bool dir) {
        if (!p) return;
        std::error_code ec;
        bool ok = dir ? std::filesystem::is_directory(*p, ec) : std::filesystem::exists(*p, ec);
        if (!ok) {
            throw ConfigError(ConfigError::Code::MissingPath, field, "path does not exist: " + p->string());
        }
    };
    need("scrape.discovery_path", cfg.scrape.discovery_path, false);
    need("dashboard.assets", cfg.dashboard_assets, true);
    for (std::size_t i = 0; i < cfg.exporters.size(); ++i) {
        const auto& e = cfg.exporters[i];
        // The simulator creates its own export directory; an external one must exist.
        bool produced_here = cfg.simulator && cfg.simulator->export_dir && e.parameters_dir == cfg.simulator->export_dir;
        if (e.source == "parameters" && !produced_here) {
            need("exporters[" + std::to_string(i) + "].parameters_dir", e.parameters_dir, true);
        }
    }
    // Output files only need a directory to land in.
    auto parent = [&](const std::string& field, const std::optional<std::filesystem::path>& p) {
        if (p) need(field, std::optional<std::filesystem::path>(p->parent_path()), true);
    };
    parent("tsdb.snapshot_path", cfg.tsdb.snapshot_path);
    parent("tsdb.log_path", cfg.tsdb.log_path);
}

}  // namespace ew::config
