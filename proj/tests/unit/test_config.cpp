// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <regex>
#include <set>

#include "enclavewatch/config.hpp"

using namespace ew;
using namespace ew::config;
namespace fs = std::filesystem;

namespace {

StackConfig parse(const std::string& text) {
    return parse_stack_config(text, "/base");
}

/// Expects InvalidValue naming `field`.
void rejects(const std::string& text, const std::string& field) {
    CAPTURE(text);
    try {
        parse(text);
        FAIL("accepted");
    } catch (const ConfigError& e) {
        CHECK(e.code() == ConfigError::Code::InvalidValue);
        CHECK(e.field() == field);
    }
}

}  // namespace

TEST_CASE("empty document yields the defaults") {
    auto c = parse("{}");
    CHECK(c.listen == "127.0.0.1:9090");
    CHECK(c.log_level == "info");
    CHECK(c.tsdb.retention_ms == 24 * 3'600'000LL);
    CHECK(c.scrape.interval_ms == 5000);
    CHECK(c.scrape.timeout_ms == 2000);
    REQUIRE(c.exporters.size() == 2);
    CHECK(c.exporters[0].kind == ExporterKind::tee);
    CHECK(c.exporters[0].listen == "127.0.0.1:9100");
    CHECK(c.exporters[1].kind == ExporterKind::system);
    CHECK(c.exporters[1].listen == "127.0.0.1:9101");
    REQUIRE(c.simulator);
    CHECK(c.simulator->scenario == "scone-580C-105MB");
    CHECK(c.rules.empty());
    CHECK(c.stream_heartbeat_ms == 15'000);
    CHECK_NOTHROW(check_paths(c));
}

TEST_CASE("a full document") {
    auto c = parse(R"({
        "listen": "0.0.0.0:8080",
        "log_level": "debug",
        "tsdb": {"retention": "2h", "snapshot_path": "data/s.ewt", "log_path": "/var/ew/log"},
        "scrape": {"interval": "10s", "timeout": 1500, "discovery_path": "targets.json",
                   "targets": [{"job": "tee", "url": "http://127.0.0.1:9100/metrics", "labels": {"node": "a"}}]},
        "simulator": {"scenario": "graphene-580C-105MB", "seed": 9, "epc_pages": 1000, "export_dir": "params"},
        "exporters": [
            {"kind": "tee", "source": "parameters", "parameters_dir": "params", "static_labels": {"node": "a"}},
            {"kind": "system", "listen": "127.0.0.1:0", "source": "proc", "proc_root": "/host/proc"},
            {"kind": "system", "filter_pids": [12, 13], "max_pids": 8}
        ],
        "rules": [{"id": "r1", "metric": "sgx_nr_evicted", "matchers": "job=\"tee\"", "agg": "rate", "step": "10s",
                   "comparator": ">=", "threshold": 10, "window": "5m", "stride": "1m",
                   "min_violation_points": 2, "severity": "critical"},
                  {"id": "r2", "metric": "up", "agg": "quantile", "q": 0.1, "group_by": ["job"],
                   "comparator": "<", "threshold": 1}],
        "boxplots": {"metrics": ["sgx_nr_free_pages"], "window": "10m"},
        "stream": {"heartbeat": "2s", "queue": 16},
        "dashboard": {"assets": "/srv/ui"}
    })");
    CHECK(c.listen == "0.0.0.0:8080");
    CHECK(c.tsdb.retention_ms == 7'200'000);
    CHECK(*c.tsdb.snapshot_path == fs::path("/base/data/s.ewt"));
    CHECK(*c.tsdb.log_path == fs::path("/var/ew/log"));
    CHECK(c.scrape.interval_ms == 10'000);
    CHECK(c.scrape.timeout_ms == 1500);
    CHECK(*c.scrape.discovery_path == fs::path("/base/targets.json"));
    REQUIRE(c.scrape.targets.size() == 1);
    CHECK(c.scrape.targets[0].interval_ms == 10'000);
    CHECK(*c.scrape.targets[0].labels.find("node") == "a");
    CHECK(c.simulator->seed == 9);
    CHECK(c.simulator->epc_pages == 1000);
    CHECK(*c.simulator->export_dir == fs::path("/base/params"));
    REQUIRE(c.exporters.size() == 3);
    CHECK(c.exporters[0].source == "parameters");
    CHECK(c.exporters[0].listen == "127.0.0.1:9100");
    CHECK(*c.exporters[0].parameters_dir == fs::path("/base/params"));
    CHECK(c.exporters[1].proc_root == fs::path("/host/proc"));
    CHECK(c.exporters[2].sme.filter_pids == std::vector<std::int64_t>{12, 13});
    CHECK(c.exporters[2].sme.max_pids == 8);
    REQUIRE(c.rules.size() == 2);
    const auto& r = c.rules[0];
    CHECK(r.query.selector.matchers.size() == 1);
    CHECK(r.query.agg->op == tsdb::AggOp::rate);
    CHECK(r.query.step_ms == 10'000);
    CHECK(r.comparator == analyze::Comparator::ge);
    CHECK(r.min_violation_points == 2);
    CHECK(r.severity == analyze::Severity::critical);
    CHECK(c.rules[1].query.agg->q == doctest::Approx(0.1));
    CHECK(c.rules[1].window_ms == 300'000);
    CHECK(c.boxplot_selectors.size() == 1);
    CHECK(c.boxplot_window_ms == 600'000);
    CHECK(c.stream_heartbeat_ms == 2000);
    CHECK(c.stream_queue == 16);
    CHECK(*c.dashboard_assets == fs::path("/srv/ui"));
}

TEST_CASE("invalid values name the offending key") {
    rejects(R"({"colour": 1})", "colour");
    rejects(R"({"listen": "nowhere"})", "listen");
    rejects(R"({"log_level": "loud"})", "log_level");
    rejects(R"({"tsdb": {"retention": "forever"}})", "tsdb.retention");
    rejects(R"({"tsdb": {"snapshot": "x"}})", "tsdb.snapshot");
    rejects(R"({"scrape": {"interval": "1s", "timeout": "2s"}})", "scrape.timeout");
    rejects(R"({"scrape": {"targets": [{"job": "x"}]}})", "scrape.targets");
    rejects(R"({"rules": {}})", "rules");
    rejects(R"({"rules": [{"metric": "up", "threshold": 1}]})", "rules[0].id");
    rejects(R"({"rules": [{"id": "a", "metric": "up"}]})", "rules[0].threshold");
    rejects(R"({"rules": [{"id": "a", "metric": "up", "threshold": "1"}]})", "rules[0].threshold");
    rejects(R"({"rules": [{"id": "a", "metric": "up", "threshold": 1, "comparator": "=="}]})", "rules[0].comparator");
    rejects(R"({"rules": [{"id": "a", "metric": "up", "threshold": 1, "agg": "median"}]})", "rules[0].agg");
    rejects(R"({"rules": [{"id": "a", "metric": "up", "threshold": 1, "severity": "page"}]})", "rules[0].severity");
    rejects(R"({"rules": [{"id": "a", "metric": "up", "threshold": 1, "matchers": "job=tee"}]})", "rules[0].matchers");
    rejects(R"({"rules": [{"id": "a", "metric": "up", "threshold": 1, "stride": "10m"}]})", "rules[0]");
    rejects(R"({"rules": [{"id": "a", "metric": "up", "threshold": 1, "agg": "quantile", "q": 2}]})", "rules[0]");
    rejects(R"({"rules": [{"id": "a", "metric": "up", "threshold": 1},
                          {"id": "a", "metric": "up", "threshold": 2}]})", "rules[1].id");
    rejects(R"({"exporters": [{"kind": "gpu"}]})", "exporters[0].kind");
    rejects(R"({"exporters": [{"kind": "tee", "source": "proc"}]})", "exporters[0].source");
    rejects(R"({"exporters": [{"kind": "tee", "source": "parameters"}]})", "exporters[0].parameters_dir");
    rejects(R"({"exporters": [{"kind": "system", "max_pids": 0}]})", "exporters[0].max_pids");
    rejects(R"({"exporters": [{"kind": "system", "static_labels": {"node": 1}}]})", "exporters[0].static_labels.node");
    rejects(R"({"simulator": {"scenario": "nope"}})", "simulator.scenario");
    rejects(R"({"simulator": null})", "exporters[0].source");
    rejects(R"({"stream": {"queue": 0}})", "stream.queue");
    rejects(R"({"boxplots": {"metrics": ["bad name"]}})", "boxplots.metrics");
}

TEST_CASE("simulator can be disabled when no exporter needs it") {
    auto c = parse(R"({"simulator": null, "exporters": [{"kind": "system", "source": "proc"}]})");
    CHECK_FALSE(c.simulator);
    auto d = parse(R"({"simulator": false, "exporters": []})");
    CHECK_FALSE(d.simulator);
    CHECK(d.exporters.empty());
}

TEST_CASE("malformed and unreadable files") {
    try {
        parse("{\"listen\": ");
        FAIL("accepted");
    } catch (const ConfigError& e) {
        CHECK(e.code() == ConfigError::Code::Malformed);
    }
    try {
        load_stack_config("/nonexistent/stack.json");
        FAIL("accepted");
    } catch (const ConfigError& e) {
        CHECK(e.code() == ConfigError::Code::Unreadable);
    }
}

TEST_CASE("paths resolve against the file and must exist") {
    auto dir = fs::temp_directory_path() / ("ew-cfg-" + std::to_string(std::random_device{}()));
    fs::create_directories(dir / "ui");
    std::ofstream(dir / "stack.json") << R"({"scrape": {"discovery_path": "targets.json"}, "dashboard": {"assets": "ui"},
                                             "tsdb": {"snapshot_path": "snap/s.ewt"}})";
    auto c = load_stack_config(dir / "stack.json");
    CHECK(*c.dashboard_assets == dir / "ui");

    auto field_of_missing = [&]() -> std::string {
        try {
            check_paths(c);
        } catch (const ConfigError& e) {
            CHECK(e.code() == ConfigError::Code::MissingPath);
            return e.field();
        }
        return "";
    };
    CHECK(field_of_missing() == "scrape.discovery_path");
    std::ofstream(dir / "targets.json") << "[]";
    CHECK(field_of_missing() == "tsdb.snapshot_path");
    fs::create_directories(dir / "snap");
    CHECK(field_of_missing() == "");
    fs::remove_all(dir / "ui");
    CHECK(field_of_missing() == "dashboard.assets");
    fs::remove_all(dir);
}

TEST_CASE("shipped example configs are valid") {
    const fs::path examples = fs::path(EW_SOURCE_DIR) / "config";
    for (const char* name : {"stack.json", "aggregator.json"}) {
        CAPTURE(name);
        StackConfig c;
        REQUIRE_NOTHROW(c = load_stack_config(examples / name));
        CHECK_NOTHROW(check_paths(c));
        CHECK_FALSE(c.rules.empty());
    }
}

TEST_CASE("shipped dashboard only calls documented endpoints") {
    const std::set<std::string> documented{"/api/v1/query_range", "/api/v1/targets", "/api/v1/alerts",
                                           "/api/v1/stream", "/api/v1/boxplots"};
    std::size_t seen = 0;
    for (const auto& entry : fs::directory_iterator(fs::path(EW_SOURCE_DIR) / "config" / "ui")) {
        std::ifstream in(entry.path());
        std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        std::regex endpoint(R"(/api/v1/[a-z_]+)");
        for (auto it = std::sregex_iterator(text.begin(), text.end(), endpoint); it != std::sregex_iterator(); ++it) {
            CAPTURE(entry.path());
            CHECK(documented.contains(it->str()));
            ++seen;
        }
    }
    CHECK(seen >= 4);
}
