// SPDX-License-Identifier: Apache-2.0
#include "enclavewatch/api_server.hpp"

#include <httplib.h>

#include <algorithm>
#include <charconv>

#include "enclavewatch/duration.hpp"
#include "enclavewatch/log.hpp"
#include "enclavewatch/net.hpp"

namespace ew::api {

using json = nlohmann::json;

namespace {

[[noreturn]] void bad_query(const std::string& why) {
    throw ApiError(400, "bad_query", why);
}

std::int64_t parse_int(const std::string& name, const std::string& text) {
    std::int64_t v = 0;
    auto res = std::from_chars(text.data(), text.data() + text.size(), v);
    if (text.empty() || res.ec != std::errc() || res.ptr != text.data() + text.size()) {
        bad_query("parameter '" + name + "' must be an integer (milliseconds), got '" + text + "'");
    }
    return v;
}

double parse_double(const std::string& name, const std::string& text) {
    double v = 0;
    auto res = std::from_chars(text.data(), text.data() + text.size(), v);
    if (text.empty() || res.ec != std::errc() || res.ptr != text.data() + text.size()) {
        bad_query("parameter '" + name + "' must be a number, got '" + text + "'");
    }
    return v;
}

std::vector<std::string> split_list(std::string_view text) {
    std::vector<std::string> out;
    while (!text.empty()) {
        auto comma = text.find(',');
        auto item = text.substr(0, comma);
        while (!item.empty() && item.front() == ' ') item.remove_prefix(1);
        while (!item.empty() && item.back() == ' ') item.remove_suffix(1);
        if (!item.empty()) {
            out.emplace_back(item);
        }
        if (comma == std::string_view::npos) {
            break;
        }
        text.remove_prefix(comma + 1);
    }
    return out;
}

void send_json(httplib::Response& res, const json& body, int status = 200) {
    res.status = status;
    res.set_header("Access-Control-Allow-Origin", "*");
    res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, std::string_view code, std::string_view message) {
    send_json(res, json{{"code", code}, {"message", message}}, status);
}

/// Runs a handler, turning ApiError into its JSON error body.
template <typename Fn>
httplib::Server::Handler guarded(Fn fn) {
    return [fn](const httplib::Request& req, httplib::Response& res) {
        try {
            fn(req, res);
        } catch (const ApiError& e) {
            send_error(res, e.status(), e.code(), e.what());
        }
    };
}

std::optional<std::string> param(const httplib::Request& req, const std::string& name) {
    if (!req.has_param(name)) {
        return std::nullopt;
    }
    return req.get_param_value(name);
}

}  // namespace

std::vector<tsdb::Matcher> parse_matchers(std::string_view text) {
    std::vector<tsdb::Matcher> out;
    std::size_t i = 0;
    auto skip_ws = [&] {
        while (i < text.size() && (text[i] == ' ' || text[i] == '\t')) ++i;
    };
    skip_ws();
    bool braces = i < text.size() && text[i] == '{';
    if (braces) ++i;
    for (;;) {
        skip_ws();
        if (i == text.size() || (braces && text[i] == '}')) {
            break;
        }
        std::size_t start = i;
        while (i < text.size() && (std::isalnum(static_cast<unsigned char>(text[i])) || text[i] == '_')) ++i;
        std::string label(text.substr(start, i - start));
        if (!is_identifier(label)) {
            bad_query("invalid label name in matchers at offset " + std::to_string(start));
        }
        skip_ws();
        tsdb::Matcher m;
        m.label = std::move(label);
        if (text.substr(i, 2) == "=~") {
            m.op = tsdb::MatchOp::regex;
            i += 2;
        } else if (text.substr(i, 2) == "!=") {
            m.op = tsdb::MatchOp::not_equal;
            i += 2;
        } else if (i < text.size() && text[i] == '=') {
            m.op = tsdb::MatchOp::equal;
            ++i;
        } else {
            bad_query("expected =, != or =~ after label '" + m.label + "'");
        }
        skip_ws();
        if (i == text.size() || text[i] != '"') {
            bad_query("matcher value for '" + m.label + "' must be double-quoted");
        }
        ++i;
        bool closed = false;
        while (i < text.size()) {
            char c = text[i++];
            if (c == '"') {
                closed = true;
                break;
            }
            if (c == '\\' && i < text.size()) {
                char n = text[i++];
                m.value += n == 'n' ? '\n' : n;
            } else {
                m.value += c;
            }
        }
        if (!closed) {
            bad_query("unterminated matcher value for '" + m.label + "'");
        }
        out.push_back(std::move(m));
        skip_ws();
        if (i < text.size() && text[i] == ',') {
            ++i;
            continue;
        }
        skip_ws();
        if (i == text.size() || (braces && text[i] == '}')) {
            break;
        }
        bad_query("expected ',' between matchers at offset " + std::to_string(i));
    }
    if (braces) {
        if (i == text.size() || text[i] != '}') {
            bad_query("missing closing brace in matchers");
        }
        ++i;
        skip_ws();
    }
    if (i != text.size()) {
        bad_query("trailing characters in matchers");
    }
    return out;
}

tsdb::QuerySpec parse_query(const std::function<std::optional<std::string>(const std::string&)>& lookup,
                            std::int64_t now_ms) {
    tsdb::QuerySpec q;
    auto name = lookup("name");
    if (!name || !is_identifier(*name)) {
        bad_query("parameter 'name' must be a metric name");
    }
    q.selector.metric_name = *name;
    if (auto m = lookup("matchers")) {
        q.selector.matchers = parse_matchers(*m);
    }
    q.end_ms = lookup("end") ? parse_int("end", *lookup("end")) : now_ms;
    q.start_ms = lookup("start") ? parse_int("start", *lookup("start")) : q.end_ms - 300'000;
    q.step_ms = 5000;
    if (auto step = lookup("step")) {
        // Bare integers are milliseconds; "10s" style durations also work.
        try {
            q.step_ms = parse_duration_ms(*step);
        } catch (const std::invalid_argument&) {
            bad_query("parameter 'step' must be a duration, got '" + *step + "'");
        }
    }
    if (q.step_ms <= 0) {
        bad_query("parameter 'step' must be positive");
    }
    if (q.start_ms > q.end_ms) {
        bad_query("'start' is after 'end'");
    }
    if (auto agg = lookup("agg")) {
        auto op = tsdb::parse_agg(*agg);
        if (!op) {
            bad_query("unknown aggregation '" + *agg + "'");
        }
        tsdb::Aggregation a;
        a.op = *op;
        if (auto qv = lookup("q")) {
            a.q = parse_double("q", *qv);
        }
        if (auto g = lookup("group_by")) {
            a.group_by = split_list(*g);
            for (const auto& l : a.group_by) {
                if (!is_identifier(l)) {
                    bad_query("invalid label '" + l + "' in group_by");
                }
            }
        }
        q.agg = std::move(a);
    }
    return q;
}

json to_json(const LabelSet& labels) {
    json out = json::object();
    for (const auto& [k, v] : labels) {
        out[k] = v;
    }
    return out;
}

json to_json(const analyze::AnomalyAlert& a) {
    return json{{"rule_id", a.rule_id},
                {"state", analyze::to_string(a.state)},
                {"severity", analyze::to_string(a.severity)},
                {"observed", a.observed},
                {"threshold", a.threshold},
                {"window_start_ms", a.window_start_ms},
                {"window_end_ms", a.window_end_ms},
                {"violations", a.violations},
                {"labels", to_json(a.labels)}};
}

json to_json(const scrape::ScrapeTarget& t) {
    json out{{"job", t.spec.job},
             {"instance", t.instance},
             {"url", t.spec.url},
             {"health", scrape::to_string(t.health)},
             {"last_scrape_ms", t.last_scrape_ms},
             {"last_duration_ms", t.last_duration_ms},
             {"consecutive_failures", t.consecutive_failures},
             {"interval_ms", t.spec.interval_ms},
             {"stale", t.stale}};
    if (!t.last_error.empty()) {
        out["last_error"] = t.last_error;
    }
    return out;
}

json to_json(const analyze::BoxPlotSummary& b) {
    json matchers = json::array();
    for (const auto& m : b.selector.matchers) {
        std::string_view op = m.op == tsdb::MatchOp::equal ? "=" : m.op == tsdb::MatchOp::not_equal ? "!=" : "=~";
        matchers.push_back(json{{"label", m.label}, {"op", op}, {"value", m.value}});
    }
    return json{{"name", b.selector.metric_name},
                {"matchers", matchers},
                {"start_ms", b.start_ms},
                {"end_ms", b.end_ms},
                {"min", b.min},
                {"q1", b.q1},
                {"median", b.median},
                {"q3", b.q3},
                {"max", b.max},
                {"count", b.count}};
}

json stream_event(std::string_view type, json payload) {
    return json{{"type", type}, {"payload", std::move(payload)}};
}

json to_stream_event(const scrape::ScrapeEvent& ev) {
    if (ev.type == scrape::ScrapeEvent::Type::target_health) {
        return stream_event("target_health", to_json(ev.target));
    }
    json samples = json::array();
    for (const auto& [key, sample] : ev.samples) {
        samples.push_back(json{{"name", key.metric_name},
                               {"labels", to_json(key.labels)},
                               {"t", sample.timestamp_ms},
                               {"v", sample.value}});
    }
    return stream_event("sample_batch", json{{"job", ev.target.spec.job},
                                             {"instance", ev.target.instance},
                                             {"timestamp_ms", ev.timestamp_ms},
                                             {"samples", std::move(samples)}});
}

// ---------------------------------------------------------------------------

std::optional<std::string> EventHub::Subscriber::next(std::int64_t timeout_ms) {
    std::unique_lock lock(mu_);
    cv_.wait_for(lock, std::chrono::milliseconds(timeout_ms), [this] { return closed_ || !queue_.empty(); });
    if (queue_.empty()) {
        return std::nullopt;
    }
    std::string ev = std::move(queue_.front());
    queue_.pop_front();
    return ev;
}

bool EventHub::Subscriber::closed() const {
    std::lock_guard lock(mu_);
    return closed_;
}

std::shared_ptr<EventHub::Subscriber> EventHub::subscribe() {
    auto sub = std::make_shared<Subscriber>();
    std::lock_guard lock(mu_);
    if (closed_) {
        sub->closed_ = true;
    } else {
        subs_.push_back(sub);
    }
    return sub;
}

void EventHub::unsubscribe(const std::shared_ptr<Subscriber>& sub) {
    {
        std::lock_guard lock(mu_);
        std::erase(subs_, sub);
    }
    std::lock_guard lock(sub->mu_);
    sub->closed_ = true;
    sub->cv_.notify_all();
}

void EventHub::publish(const json& event) {
    const std::string text = event.dump();
    std::lock_guard lock(mu_);
    for (auto it = subs_.begin(); it != subs_.end();) {
        auto& sub = *it;
        std::unique_lock sl(sub->mu_);
        if (sub->queue_.size() >= capacity_) {
            sub->closed_ = true;
            sub->queue_.clear();
            sub->cv_.notify_all();
            sl.unlock();
            ++dropped_;
            log::get()->warn("event=stream_subscriber_dropped reason=queue_overflow capacity={}", capacity_);
            it = subs_.erase(it);
            continue;
        }
        sub->queue_.push_back(text);
        sub->cv_.notify_one();
        ++it;
    }
}

void EventHub::close() {
    std::lock_guard lock(mu_);
    closed_ = true;
    for (auto& sub : subs_) {
        std::lock_guard sl(sub->mu_);
        sub->closed_ = true;
        sub->cv_.notify_all();
    }
    subs_.clear();
}

std::size_t EventHub::subscriber_count() const {
    std::lock_guard lock(mu_);
    return subs_.size();
}

std::size_t EventHub::dropped_count() const {
    std::lock_guard lock(mu_);
    return dropped_;
}

// ---------------------------------------------------------------------------

ApiServer::ApiServer(ApiOptions options, ApiBackends backends)
    : options_(std::move(options)), backends_(std::move(backends)), server_(std::make_unique<httplib::Server>()) {
    if (!backends_.events) {
        backends_.events = std::make_shared<EventHub>();
    }
    if (!backends_.clock) {
        backends_.clock = std::make_shared<SystemClock>();
    }
    net::HostPort hp;
    try {
        hp = net::parse_listen(options_.listen);
    } catch (const net::AddressError& e) {
        throw ApiError(0, "bind_error", e.what());
    }
    routes();
    if (options_.assets_dir && !server_->set_mount_point("/ui", options_.assets_dir->string())) {
        throw ApiError(0, "missing_assets", "dashboard asset directory not found: " + options_.assets_dir->string());
    }

    server_->set_socket_options(net::configure_listen_socket);
    host_ = hp.host;
    port_ = hp.port == 0 ? server_->bind_to_any_port(hp.host) : (server_->bind_to_port(hp.host, hp.port) ? hp.port : -1);
    if (port_ <= 0) {
        throw ApiError(0, "bind_error", "cannot bind " + options_.listen);
    }
    thread_ = std::thread([this] { server_->listen_after_bind(); });
    server_->wait_until_ready();
}

ApiServer::~ApiServer() {
    stop();
}

std::string ApiServer::base_url() const {
    return "http://" + host_ + ":" + std::to_string(port_);
}

void ApiServer::stop() {
    if (backends_.events) {
        backends_.events->close();
    }
    if (server_) {
        server_->stop();
    }
    if (thread_.joinable()) {
        thread_.join();
    }
}

void ApiServer::routes() {
    auto& srv = *server_;

    srv.Get("/healthz", [](const httplib::Request&, httplib::Response& res) { res.set_content("ok\n", "text/plain"); });
    srv.Get("/", [](const httplib::Request&, httplib::Response& res) { res.set_redirect("/ui/"); });
    srv.Get("/ui", [](const httplib::Request&, httplib::Response& res) { res.set_redirect("/ui/"); });

    srv.Get("/api/v1/query_range", guarded([this](const httplib::Request& req, httplib::Response& res) {
        auto q = parse_query([&](const std::string& n) { return param(req, n); }, backends_.clock->now_ms());
        json out = json::array();
        try {
            if (q.agg) {
                for (const auto& g : backends_.store->evaluate(q)) {
                    json points = json::array();
                    for (const auto& p : g.points) {
                        points.push_back(json::array({p.timestamp_ms, p.value}));
                    }
                    out.push_back(json{{"labels", to_json(g.group)}, {"points", std::move(points)}});
                }
            } else {
                for (const auto& s : backends_.store->select_range(q)) {
                    json points = json::array();
                    for (const auto& p : s.samples) {
                        points.push_back(json::array({p.timestamp_ms, p.value}));
                    }
                    out.push_back(json{{"name", s.key.metric_name},
                                       {"labels", to_json(s.key.labels)},
                                       {"points", std::move(points)}});
                }
            }
        } catch (const tsdb::TsdbError& e) {
            if (e.code() == tsdb::TsdbError::Code::QuantileOutOfRange) {
                throw ApiError(422, "quantile_out_of_range", e.what());
            }
            bad_query(e.what());
        }
        send_json(res, out);
    }));

    srv.Get("/api/v1/targets", guarded([this](const httplib::Request& req, httplib::Response& res) {
        const bool with_stale = req.has_param("include_stale") && req.get_param_value("include_stale") != "0";
        json out = json::array();
        if (backends_.targets) {
            for (const auto& t : backends_.targets()) {
                if (!t.stale || with_stale) {
                    out.push_back(to_json(t));
                }
            }
        }
        send_json(res, out);
    }));

    srv.Get("/api/v1/alerts", guarded([this](const httplib::Request& req, httplib::Response& res) {
        std::optional<analyze::AlertState> state;
        if (auto s = param(req, "state"); s && !s->empty()) {
            state = analyze::parse_alert_state(*s);
            if (!state) {
                throw ApiError(400, "bad_state", "state must be 'firing' or 'resolved', got '" + *s + "'");
            }
        }
        json out = json::array();
        if (backends_.alerts) {
            for (const auto& a : backends_.alerts(state)) {
                out.push_back(to_json(a));
            }
        }
        send_json(res, out);
    }));

    srv.Get("/api/v1/boxplots", guarded([this](const httplib::Request& req, httplib::Response& res) {
        std::int64_t end = backends_.clock->now_ms();
        if (auto e = param(req, "end")) {
            end = parse_int("end", *e);
        }
        std::int64_t window = options_.boxplot_window_ms;
        if (auto w = param(req, "window")) {
            try {
                window = parse_duration_ms(*w);
            } catch (const std::invalid_argument& e) {
                bad_query(e.what());
            }
        }
        std::vector<tsdb::Selector> selectors = options_.boxplot_selectors;
        if (auto names = param(req, "names")) {
            selectors.clear();
            std::vector<tsdb::Matcher> matchers;
            if (auto m = param(req, "matchers")) {
                matchers = parse_matchers(*m);
            }
            for (const auto& n : split_list(*names)) {
                if (!is_identifier(n)) {
                    bad_query("invalid metric name '" + n + "'");
                }
                selectors.push_back(tsdb::Selector{n, matchers});
            }
        }
        json out = json::array();
        try {
            for (const auto& b : analyze::boxplots(selectors, end - window, end, *backends_.store)) {
                out.push_back(to_json(b));
            }
        } catch (const tsdb::TsdbError& e) {
            bad_query(e.what());
        }
        send_json(res, out);
    }));

    srv.Get("/api/v1/stream", [this](const httplib::Request&, httplib::Response& res) {
        auto hub = backends_.events;
        auto sub = hub->subscribe();
        const auto heartbeat = options_.heartbeat_ms;
        res.set_header("Cache-Control", "no-cache");
        res.set_header("Access-Control-Allow-Origin", "*");
        res.set_chunked_content_provider(
            "text/event-stream",
            [sub, heartbeat, opened = false](std::size_t, httplib::DataSink& sink) mutable {
                std::string chunk;
                if (!opened) {
                    // Lets clients see the stream as established before the first event.
                    opened = true;
                    chunk = ": connected\n\n";
                } else {
                    auto ev = sub->next(heartbeat);
                    if (!ev) {
                        if (sub->closed()) {
                            sink.done();
                            return true;
                        }
                        chunk = ": heartbeat\n\n";
                    } else {
                        chunk = "data: " + *ev + "\n\n";
                    }
                }
                return sink.write(chunk.data(), chunk.size());
            },
            [hub, sub](bool) { hub->unsubscribe(sub); });
    });

    srv.set_error_handler([](const httplib::Request& req, httplib::Response& res) {
        if (res.body.empty()) {
            send_error(res, res.status, res.status == 404 ? "not_found" : "http_error",
                       "no route for " + req.method + " " + req.path);
        }
    });
    srv.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
        std::string what = "unexpected error";
        try {
            std::rethrow_exception(ep);
        } catch (const std::exception& e) {
            what = e.what();
        } catch (...) {
        }
        log::get()->error("event=api_handler_failed error={}", log::kv_value(what));
        send_error(res, 500, "internal", what);
    });
}

}  // namespace ew::api
