// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>
#include <httplib.h>

#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <thread>

#include "enclavewatch/api_server.hpp"
#include "enclavewatch/exporters.hpp"

using namespace ew;
using namespace ew::api;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

SeriesKey key(const std::string& name, std::vector<LabelPair> labels) {
    return series_key(name, canonicalize_labels(std::move(labels)));
}

struct Harness {
    std::shared_ptr<tsdb::Store> store = std::make_shared<tsdb::Store>();
    std::shared_ptr<ManualClock> clock = std::make_shared<ManualClock>(600'000);
    std::shared_ptr<EventHub> hub = std::make_shared<EventHub>();
    std::vector<scrape::ScrapeTarget> targets;
    analyze::AlertRegistry registry;
    std::unique_ptr<ApiServer> server;

    explicit Harness(ApiOptions opts = {}) {
        ApiBackends b;
        b.store = store;
        b.clock = clock;
        b.events = hub;
        b.targets = [this] { return targets; };
        b.alerts = [this](std::optional<analyze::AlertState> s) { return registry.list(s); };
        server = std::make_unique<ApiServer>(std::move(opts), std::move(b));
    }

    httplib::Client client() const {
        httplib::Client c("127.0.0.1", server->port());
        c.set_read_timeout(5, 0);
        return c;
    }

    httplib::Result get(const std::string& path) const { return client().Get(path); }
};

json body(const httplib::Result& r) {
    REQUIRE(r);
    return json::parse(r->body);
}

void check_error(const httplib::Result& r, int status, const std::string& code) {
    REQUIRE(r);
    CHECK(r->status == status);
    auto j = json::parse(r->body);
    CHECK(j.at("code") == code);
    CHECK(j.at("message").is_string());
    CHECK_FALSE(j.at("message").get<std::string>().empty());
}

std::string encode(const std::string& s) {
    return httplib::detail::encode_query_param(s);
}

/// Reads an SSE response on a background thread until `enough` says so or time runs out.
class StreamReader {
public:
    StreamReader(int port, std::function<bool(const std::string&)> enough)
        : enough_(std::move(enough)), thread_([this, port] {
              httplib::Client c("127.0.0.1", port);
              c.set_read_timeout(10, 0);
              c.Get("/api/v1/stream", [this](const char* data, std::size_t n) {
                  std::lock_guard lock(mu_);
                  text_.append(data, n);
                  connected_ = true;
                  return !abort_ && !enough_(text_);
              });
              done_ = true;
          }) {}

    ~StreamReader() {
        abort_ = true;
        thread_.join();
    }

    bool wait_connected(int ms = 3000) {
        for (int i = 0; i < ms / 10; ++i) {
            {
                std::lock_guard lock(mu_);
                if (connected_) return true;
            }
            std::this_thread::sleep_for(std::chrono::milliseconds(10));
        }
        return false;
    }

    std::string finish(int ms = 5000) {
        for (int i = 0; i < ms / 10 && !done_; ++i) {
            std::this_thread::sleep_for(std::chrono::milliseconds(10));
        }
        std::lock_guard lock(mu_);
        return text_;
    }

    void abort() { abort_ = true; }

private:
    std::function<bool(const std::string&)> enough_;
    std::mutex mu_;
    std::string text_;
    bool connected_ = false;
    std::atomic<bool> abort_{false};
    std::atomic<bool> done_{false};
    std::thread thread_;
};

std::vector<json> data_events(const std::string& text) {
    std::vector<json> out;
    std::size_t pos = 0;
    while ((pos = text.find("data: ", pos)) != std::string::npos) {
        auto end = text.find("\n\n", pos);
        if (end == std::string::npos) break;
        out.push_back(json::parse(text.substr(pos + 6, end - pos - 6)));
        pos = end;
    }
    return out;
}

bool wait_until(const std::function<bool()>& cond, int ms = 5000) {
    for (int i = 0; i < ms / 10; ++i) {
        if (cond()) return true;
        std::this_thread::sleep_for(std::chrono::milliseconds(10));
    }
    return cond();
}

}  // namespace

TEST_CASE("matchers parse with and without braces") {
    auto m = parse_matchers(R"({job="tee", pid=~"1.*",mode!="a\"b"})");
    REQUIRE(m.size() == 3);
    CHECK(m[0].label == "job");
    CHECK(m[0].op == tsdb::MatchOp::equal);
    CHECK(m[1].op == tsdb::MatchOp::regex);
    CHECK(m[1].value == "1.*");
    CHECK(m[2].op == tsdb::MatchOp::not_equal);
    CHECK(m[2].value == "a\"b");
    CHECK(parse_matchers("").empty());
    CHECK(parse_matchers("{}").empty());
    CHECK(parse_matchers(R"(a="1")").size() == 1);

    for (const char* bad : {R"(job=tee)", R"(job="x)", R"(9job="x")", R"(job~"x")", R"({job="x")",
                            R"(job="x" pid="1")"}) {
        CAPTURE(bad);
        try {
            parse_matchers(bad);
            FAIL("accepted");
        } catch (const ApiError& e) {
            CHECK(e.status() == 400);
            CHECK(e.code() == "bad_query");
        }
    }
}

TEST_CASE("query parameters default relative to now") {
    auto q = parse_query([](const std::string& n) -> std::optional<std::string> {
        if (n == "name") return "up";
        return std::nullopt;
    }, 1'000'000);
    CHECK(q.selector.metric_name == "up");
    CHECK(q.end_ms == 1'000'000);
    CHECK(q.start_ms == 700'000);
    CHECK(q.step_ms == 5000);
    CHECK_FALSE(q.agg);

    std::map<std::string, std::string> p{{"name", "x"}, {"step", "10s"}, {"agg", "quantile"}, {"q", "0.9"},
                                         {"group_by", "job,pid"}, {"start", "0"}, {"end", "100"}};
    auto q2 = parse_query([&](const std::string& n) -> std::optional<std::string> {
        auto it = p.find(n);
        return it == p.end() ? std::nullopt : std::optional<std::string>(it->second);
    }, 0);
    CHECK(q2.step_ms == 10'000);
    REQUIRE(q2.agg);
    CHECK(q2.agg->op == tsdb::AggOp::quantile);
    CHECK(q2.agg->q == doctest::Approx(0.9));
    CHECK(q2.agg->group_by == std::vector<std::string>{"job", "pid"});

    CHECK_THROWS_AS(parse_query([](const std::string&) { return std::optional<std::string>(); }, 0), ApiError);
}

TEST_CASE("query_range returns the store's own answer") {
    Harness h;
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> inc(0.0, 50.0);
    for (int pid : {101, 102, 103}) {
        double v = 0;
        for (std::int64_t t = 0; t <= 600'000; t += 5000) {
            v += inc(rng);
            if (t == 300'000 && pid == 102) v = 3;  // counter reset
            h.store->append(key("syscalls", {{"job", "system"}, {"pid", std::to_string(pid)}}), {t, v});
        }
    }

    SUBCASE("raw samples") {
        auto j = body(h.get("/api/v1/query_range?name=syscalls&matchers=" + encode(R"(pid="101")") +
                            "&start=0&end=600000"));
        REQUIRE(j.size() == 1);
        CHECK(j[0]["name"] == "syscalls");
        CHECK(j[0]["labels"]["pid"] == "101");
        CHECK(j[0]["points"].size() == 121);
    }

    SUBCASE("aggregations agree with evaluate") {
        for (const char* agg : {"sum", "avg", "min", "max", "count", "rate", "quantile"}) {
            CAPTURE(agg);
            std::string url = std::string("/api/v1/query_range?name=syscalls&start=20000&end=600000&step=15000&agg=") +
                              agg + "&q=0.75&group_by=job";
            auto j = body(h.get(url));

            tsdb::QuerySpec q;
            q.selector.metric_name = "syscalls";
            q.start_ms = 20'000;
            q.end_ms = 600'000;
            q.step_ms = 15'000;
            q.agg = tsdb::Aggregation{*tsdb::parse_agg(agg), 0.75, {"job"}};
            auto direct = h.store->evaluate(q);
            REQUIRE(j.size() == direct.size());
            for (std::size_t g = 0; g < direct.size(); ++g) {
                CHECK(j[g]["labels"] == to_json(direct[g].group));
                REQUIRE(j[g]["points"].size() == direct[g].points.size());
                for (std::size_t i = 0; i < direct[g].points.size(); ++i) {
                    CHECK(j[g]["points"][i][0].get<std::int64_t>() == direct[g].points[i].timestamp_ms);
                    double got = j[g]["points"][i][1].get<double>();
                    double want = direct[g].points[i].value;
                    CHECK(std::abs(got - want) <= 1e-12 * std::max(1.0, std::abs(want)));
                }
            }
        }
    }

    SUBCASE("errors") {
        check_error(h.get("/api/v1/query_range?name=syscalls&matchers=" + encode(R"(pid=~"(")")), 400, "bad_query");
        check_error(h.get("/api/v1/query_range?name=syscalls&agg=quantile&q=1.5"), 422, "quantile_out_of_range");
        check_error(h.get("/api/v1/query_range"), 400, "bad_query");
        check_error(h.get("/api/v1/query_range?name=syscalls&step=0"), 400, "bad_query");
        check_error(h.get("/api/v1/query_range?name=syscalls&agg=median"), 400, "bad_query");
        check_error(h.get("/api/v1/query_range?name=syscalls&start=abc"), 400, "bad_query");
    }
}

TEST_CASE("up over a healthy scrape run is all ones") {
    Harness h;
    auto driver = std::make_shared<sim::SgxDriver>();
    exporters::ExporterConfig ec;
    ec.sources.push_back(std::make_shared<exporters::TeeSimulatorSource>(driver));
    exporters::ExporterService exporter(ec);
    scrape::Scraper scraper(h.store);
    scrape::TargetSpec spec;
    spec.job = "tee";
    spec.url = exporter.url();
    scraper.reconcile({spec}, 0);
    for (std::int64_t t = 0; t <= 60'000; t += 1000) scraper.run_pending(t);

    auto j = body(h.get("/api/v1/query_range?name=up&start=0&end=60000"));
    REQUIRE(j.size() == 1);
    CHECK(j[0]["points"].size() >= 11);
    for (const auto& p : j[0]["points"]) CHECK(p[1].get<double>() == 1.0);
}

TEST_CASE("eviction rate over HTTP matches the analyzer's observed value") {
    Harness h;
    // Counter with a burst of 15 evictions per second between 60 s and 70 s.
    double v = 0;
    for (std::int64_t t = 0; t <= 180'000; t += 5000) {
        if (t > 60'000 && t <= 70'000) v += 75;
        else v += 2;
        h.store->append(key("sgx_nr_evicted", {{"job", "tee"}}), {t, v});
    }
    analyze::ThresholdRule rule;
    rule.id = "evictions";
    rule.query.selector.metric_name = "sgx_nr_evicted";
    rule.query.agg = tsdb::Aggregation{tsdb::AggOp::rate, 0.5, {}};
    rule.query.step_ms = 10'000;
    rule.comparator = analyze::Comparator::gt;
    rule.threshold = 5;
    const std::int64_t now = 120'000;
    auto alerts = analyze::evaluate_window(rule, now, *h.store);
    REQUIRE(alerts.size() == 1);

    auto url = "/api/v1/query_range?name=sgx_nr_evicted&agg=rate&step=10000&start=" +
               std::to_string(now - rule.window_ms + rule.query.step_ms) + "&end=" + std::to_string(now);
    auto j = body(h.get(url));
    REQUIRE(j.size() == 1);
    double peak = -INFINITY;
    for (const auto& p : j[0]["points"]) peak = std::max(peak, p[1].get<double>());
    CHECK(std::abs(peak - alerts[0].observed) <= 1e-9);
    CHECK(peak > 10.0);
}

TEST_CASE("targets endpoint") {
    Harness h;
    CHECK(body(h.get("/api/v1/targets")) == json::array());

    for (int i = 0; i < 3; ++i) {
        scrape::TargetSpec s;
        s.job = "job" + std::to_string(i);
        s.url = "http://127.0.0.1:" + std::to_string(9100 + i) + "/metrics";
        h.targets.push_back(scrape::make_target(s));
    }
    h.targets[1].health = scrape::Health::down;
    h.targets[1].consecutive_failures = 2;
    auto j = body(h.get("/api/v1/targets"));
    REQUIRE(j.size() == 3);
    CHECK(j[1]["health"] == "down");
    CHECK(j[1]["consecutive_failures"] == 2);
    for (const auto& t : j) {
        for (const char* k : {"job", "instance", "health", "last_scrape_ms", "consecutive_failures"}) {
            CHECK(t.contains(k));
        }
    }

    h.targets[2].stale = true;
    CHECK(body(h.get("/api/v1/targets")).size() == 2);
    CHECK(body(h.get("/api/v1/targets?include_stale=1")).size() == 3);
}

TEST_CASE("targets from an empty discovery file") {
    auto path = fs::temp_directory_path() / ("ew-api-disc-" + std::to_string(std::random_device{}()) + ".json");
    std::ofstream(path) << "[]";
    auto store = std::make_shared<tsdb::Store>();
    scrape::ScraperOptions so;
    so.discovery_path = path;
    scrape::Scraper scraper(store, so);
    CHECK(scraper.poll_discovery(0));

    Harness h;
    h.targets = scraper.targets();
    CHECK(body(h.get("/api/v1/targets")) == json::array());
    fs::remove(path);
}

TEST_CASE("alerts endpoint filters by state") {
    Harness h;
    check_error(h.get("/api/v1/alerts?state=bogus"), 400, "bad_state");
    CHECK(body(h.get("/api/v1/alerts?state=resolved")) == json::array());
    CHECK(body(h.get("/api/v1/alerts")) == json::array());

    analyze::AnomalyAlert a{"evictions", 0, 300'000, 14.0, 5.0, analyze::Severity::critical,
                            analyze::AlertState::firing, canonicalize_labels({{"job", "tee"}}), 3};
    auto b = a;
    b.rule_id = "idle";
    h.registry.apply({a, b});
    auto firing = body(h.get("/api/v1/alerts?state=firing"));
    REQUIRE(firing.size() == 2);
    CHECK(firing[0]["rule_id"] == "evictions");
    CHECK(firing[0]["severity"] == "critical");
    CHECK(firing[0]["observed"] == 14.0);
    CHECK(firing[0]["labels"]["job"] == "tee");
    CHECK(body(h.get("/api/v1/alerts?state=resolved")) == json::array());

    b.state = analyze::AlertState::resolved;
    h.registry.apply({b});
    CHECK(body(h.get("/api/v1/alerts?state=resolved")).size() == 1);
    CHECK(body(h.get("/api/v1/alerts")).size() == 2);
}

TEST_CASE("box plots endpoint") {
    Harness h;
    for (int i = 1; i <= 4; ++i) {
        h.store->append(key("sgx_nr_free_pages", {{"job", "tee"}}), {590'000 + i * 1000, double(i)});
    }
    h.store->append(key("syscalls", {{"job", "system"}}), {595'000, 7});
    auto j = body(h.get("/api/v1/boxplots?window=1m"));
    REQUIRE(j.size() == 1);
    CHECK(j[0]["name"] == "sgx_nr_free_pages");
    CHECK(j[0]["q1"] == 1.75);
    CHECK(j[0]["median"] == 2.5);
    CHECK(j[0]["q3"] == 3.25);
    CHECK(j[0]["count"] == 4);

    auto k = body(h.get("/api/v1/boxplots?names=syscalls&window=60000"));
    REQUIRE(k.size() == 1);
    CHECK(k[0]["median"] == 7.0);
    check_error(h.get("/api/v1/boxplots?window=soon"), 400, "bad_query");
}

TEST_CASE("stream delivers scrape batches carrying the job") {
    Harness h;
    auto driver = std::make_shared<sim::SgxDriver>();
    exporters::ExporterConfig ec;
    ec.sources.push_back(std::make_shared<exporters::TeeSimulatorSource>(driver));
    exporters::ExporterService exporter(ec);
    scrape::Scraper scraper(h.store);
    scraper.on_event([hub = h.hub](const scrape::ScrapeEvent& ev) { hub->publish(to_stream_event(ev)); });
    scrape::TargetSpec spec;
    spec.job = "tee";
    spec.url = exporter.url();
    scraper.reconcile({spec}, 0);

    StreamReader reader(h.server->port(), [](const std::string& t) { return t.find("sample_batch") != std::string::npos; });
    REQUIRE(reader.wait_connected());
    REQUIRE(wait_until([&] { return h.hub->subscriber_count() == 1; }));
    scraper.scrape_now(scrape::Scraper::key_of(spec), 1000);
    auto text = reader.finish();
    CHECK(text.rfind(": connected\n\n", 0) == 0);
    auto events = data_events(text);
    bool found = false;
    for (const auto& ev : events) {
        if (ev["type"] == "sample_batch") {
            found = true;
            CHECK(ev["payload"]["job"] == "tee");
            CHECK(ev["payload"]["samples"].size() > 0);
            for (const auto& s : ev["payload"]["samples"]) CHECK(s["labels"]["job"] == "tee");
        }
    }
    CHECK(found);
}

TEST_CASE("two subscribers see identical alert events") {
    Harness h;
    auto has_two = [](const std::string& t) { return data_events(t).size() >= 2; };
    StreamReader a(h.server->port(), has_two);
    StreamReader b(h.server->port(), has_two);
    REQUIRE(a.wait_connected());
    REQUIRE(b.wait_connected());
    REQUIRE(wait_until([&] { return h.hub->subscriber_count() == 2; }));

    analyze::AnomalyAlert alert{"evictions", 0, 300'000, 14.0, 5.0, analyze::Severity::warning,
                                analyze::AlertState::firing, canonicalize_labels({{"job", "tee"}}), 3};
    h.hub->publish(stream_event("alert", to_json(alert)));
    alert.state = analyze::AlertState::resolved;
    h.hub->publish(stream_event("alert", to_json(alert)));

    auto ea = data_events(a.finish());
    auto eb = data_events(b.finish());
    REQUIRE(ea.size() == 2);
    CHECK(ea == eb);
    CHECK(ea[0]["type"] == "alert");
    CHECK(ea[0]["payload"]["state"] == "firing");
    CHECK(ea[1]["payload"]["state"] == "resolved");
}

TEST_CASE("idle stream sends heartbeats and cleans up on disconnect") {
    ApiOptions opts;
    opts.heartbeat_ms = 150;
    Harness h(opts);
    {
        StreamReader r(h.server->port(), [](const std::string& t) { return t.find(": heartbeat\n\n") != std::string::npos; });
        auto text = r.finish(3000);
        CHECK(text.find(": heartbeat\n\n") != std::string::npos);
        CHECK(data_events(text).empty());
    }
    // The next heartbeat write fails on the closed socket and releases the subscriber.
    CHECK(wait_until([&] { return h.hub->subscriber_count() == 0; }, 3000));
}

TEST_CASE("slow subscribers are dropped at queue overflow") {
    EventHub hub(3);
    auto slow = hub.subscribe();
    auto fast = hub.subscribe();
    for (int i = 0; i < 3; ++i) {
        hub.publish(stream_event("alert", json{{"i", i}}));
        CHECK(fast->next(0));
    }
    CHECK_FALSE(slow->closed());
    hub.publish(stream_event("alert", json{{"i", 3}}));
    CHECK(slow->closed());
    CHECK_FALSE(slow->next(0));
    CHECK(hub.dropped_count() == 1);
    CHECK(hub.subscriber_count() == 1);
    CHECK(json::parse(*fast->next(0))["payload"]["i"] == 3);

    hub.close();
    CHECK(fast->closed());
    CHECK(hub.subscribe()->closed());
}

TEST_CASE("dashboard assets, redirects and unknown routes") {
    auto dir = fs::temp_directory_path() / ("ew-ui-" + std::to_string(std::random_device{}()));
    fs::create_directories(dir);
    std::ofstream(dir / "index.html") << "<html>dash</html>";
    std::ofstream(dir / "app.js") << "// app";
    {
        ApiOptions opts;
        opts.assets_dir = dir;
        Harness h(opts);
        auto r = h.get("/ui/");
        REQUIRE(r);
        CHECK(r->status == 200);
        CHECK(r->body == "<html>dash</html>");
        auto js = h.get("/ui/app.js");
        REQUIRE(js);
        CHECK(js->status == 200);
        auto root = h.get("/");
        REQUIRE(root);
        CHECK(root->status == 302);
        CHECK(root->get_header_value("Location") == "/ui/");
        check_error(h.get("/ui/missing.js"), 404, "not_found");
        check_error(h.get("/api/v1/nothing"), 404, "not_found");
        auto health = h.get("/healthz");
        REQUIRE(health);
        CHECK(health->status == 200);
    }
    fs::remove_all(dir);

    ApiOptions gone;
    gone.assets_dir = dir;
    try {
        Harness h(gone);
        FAIL("started without assets");
    } catch (const ApiError& e) {
        CHECK(e.code() == "missing_assets");
    }
}

TEST_CASE("bind conflicts are reported") {
    Harness first;
    ApiOptions opts;
    opts.listen = "127.0.0.1:" + std::to_string(first.server->port());
    try {
        Harness second(opts);
        FAIL("bound twice");
    } catch (const ApiError& e) {
        CHECK(e.code() == "bind_error");
    }
    opts.listen = "nonsense";
    CHECK_THROWS_AS(Harness{opts}, ApiError);
}

TEST_CASE("every response is JSON, errors carry code and message") {
    Harness h;
    h.store->append(key("up", {{"job", "tee"}}), {599'000, 1});
    std::mt19937_64 rng(11);
    const std::vector<std::string> names{"name", "matchers", "start", "end", "step", "agg", "q", "group_by", "state",
                                         "window", "names"};
    const std::vector<std::string> values{"up", "", "-5", "0", "1e3", "rate", "quantile", "1.5", "0.5", "job",
                                          R"(job="tee")", R"(job=~"[")", "firing", "bogus", "5m", "x y", "%%", "{"};
    const std::vector<std::string> paths{"/api/v1/query_range", "/api/v1/alerts", "/api/v1/targets",
                                         "/api/v1/boxplots", "/api/v1/unknown"};
    auto cli = h.client();
    for (int i = 0; i < 300; ++i) {
        std::string url = paths[rng() % paths.size()] + "?";
        int n = rng() % 5;
        for (int k = 0; k < n; ++k) {
            url += names[rng() % names.size()] + "=" + encode(values[rng() % values.size()]) + "&";
        }
        CAPTURE(url);
        auto r = cli.Get(url);
        REQUIRE(r);
        json j;
        REQUIRE_NOTHROW(j = json::parse(r->body));
        if (r->status == 200) {
            CHECK(j.is_array());
        } else {
            CHECK((r->status == 400 || r->status == 404 || r->status == 422));
            CHECK(j.at("code").is_string());
            CHECK(j.at("message").is_string());
        }
    }
}
