// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <thread>

#include "enclavewatch/tsdb.hpp"
#include "tsdb_oracle.hpp"

using namespace ew;
using namespace ew::tsdb;
namespace fs = std::filesystem;

namespace {

SeriesKey key(const std::string& name, std::vector<LabelPair> labels = {}) {
    return series_key(name, canonicalize_labels(std::move(labels)));
}

QuerySpec range(const std::string& name, std::int64_t start, std::int64_t end, std::vector<Matcher> m = {}) {
    QuerySpec q;
    q.selector = Selector{name, std::move(m)};
    q.start_ms = start;
    q.end_ms = end;
    q.step_ms = 1000;
    return q;
}

TsdbError::Code error_of(auto&& fn) {
    try {
        fn();
    } catch (const TsdbError& e) {
        return e.code();
    }
    FAIL("expected TsdbError");
    return TsdbError::Code::InvalidQuery;
}

fs::path temp_file(const std::string& stem) {
    return fs::temp_directory_path() / (stem + std::to_string(std::random_device{}()) + ".ewt");
}

}  // namespace

TEST_CASE("append fills chunks of 240") {
    Store s;
    auto k = key("m");
    for (int t = 1; t <= 3; ++t) s.append(k, Sample{t, 1.0});
    CHECK(s.chunks(k).size() == 1);
    CHECK(s.chunks(k)[0].samples.size() == 3);
    CHECK(s.chunks(k)[0].start_ms == 1);
    CHECK(s.chunks(k)[0].end_ms == 3);

    Store big;
    for (int t = 1; t <= 241; ++t) big.append(k, Sample{t, 1.0});
    auto chunks = big.chunks(k);
    REQUIRE(chunks.size() == 2);
    CHECK(chunks[0].samples.size() == 240);
    CHECK(chunks[1].samples.size() == 1);
    CHECK(chunks[1].start_ms == 241);
}

TEST_CASE("append rejects out of order and non-finite samples") {
    Store s;
    auto k = key("m");
    s.append(k, Sample{5, 1});
    CHECK(error_of([&] { s.append(k, Sample{5, 2}); }) == TsdbError::Code::OutOfOrderSample);
    CHECK(error_of([&] { s.append(k, Sample{4, 2}); }) == TsdbError::Code::OutOfOrderSample);
    CHECK(error_of([&] { s.append(k, Sample{6, NAN}); }) == TsdbError::Code::NonFiniteValue);
    CHECK(error_of([&] { s.append(k, Sample{6, INFINITY}); }) == TsdbError::Code::NonFiniteValue);
    CHECK(s.sample_count() == 1);
}

TEST_CASE("append_batch is all or nothing") {
    Store s;
    std::vector<std::pair<SeriesKey, Sample>> batch{{key("a"), Sample{1, 1}}, {key("b"), Sample{1, NAN}}};
    CHECK_THROWS_AS(s.append_batch(batch), TsdbError);
    CHECK(s.sample_count() == 0);
    std::vector<std::pair<SeriesKey, Sample>> dup{{key("a"), Sample{1, 1}}, {key("a"), Sample{1, 2}}};
    CHECK_THROWS_AS(s.append_batch(dup), TsdbError);
    CHECK(s.sample_count() == 0);
    batch[1].second.value = 2;
    s.append_batch(batch);
    CHECK(s.sample_count() == 2);
}

TEST_CASE("select_range by label matchers") {
    Store s;
    s.append(key("up", {{"job", "tee"}}), Sample{1000, 1});
    s.append(key("up", {{"job", "sys"}}), Sample{1000, 1});
    s.append(key("upper"), Sample{1000, 1});
    auto r = s.select_range(range("up", 0, 2000, {{"job", MatchOp::equal, "tee"}}));
    REQUIRE(r.size() == 1);
    CHECK(*r[0].key.labels.find("job") == "tee");

    auto neq = s.select_range(range("up", 0, 2000, {{"job", MatchOp::not_equal, "tee"}}));
    REQUIRE(neq.size() == 1);
    CHECK(*neq[0].key.labels.find("job") == "sys");

    CHECK(s.select_range(range("up", 5000, 9000)).empty());
    CHECK(s.select_range(range("up", 0, 2000)).size() == 2);
}

TEST_CASE("select_range with regex matcher") {
    Store s;
    for (auto pid : {"1", "12", "2"}) s.append(key("cs", {{"pid", pid}}), Sample{10, 1});
    auto r = s.select_range(range("cs", 0, 100, {{"pid", MatchOp::regex, "1.*"}}));
    CHECK(r.size() == 2);
    CHECK(error_of([&] { s.select_range(range("cs", 0, 100, {{"pid", MatchOp::regex, "(["}})); }) ==
          TsdbError::Code::BadRegex);
}

TEST_CASE("select_range returns series in canonical order") {
    Store s;
    s.append(key("m", {{"x", "b"}}), Sample{1, 1});
    s.append(key("m", {{"x", "a"}}), Sample{1, 1});
    auto r = s.select_range(range("m", 0, 10));
    REQUIRE(r.size() == 2);
    CHECK(*r[0].key.labels.find("x") == "a");
}

TEST_CASE("evaluate sum over gauges") {
    Store s;
    s.append(key("g", {{"i", "1"}}), Sample{1000, 2});
    s.append(key("g", {{"i", "2"}}), Sample{1000, 3});
    auto q = range("g", 1000, 1000);
    q.agg = Aggregation{AggOp::sum, 0, {}};
    auto r = s.evaluate(q);
    REQUIRE(r.size() == 1);
    CHECK(r[0].group.empty());
    CHECK(r[0].points == std::vector<Point>{{1000, 5.0}});
}

TEST_CASE("evaluate rate over a counter") {
    Store s;
    auto k = key("c");
    s.append(k, Sample{0, 0});
    s.append(k, Sample{10000, 50});
    auto q = range("c", 10000, 10000);
    q.step_ms = 15000;
    q.agg = Aggregation{AggOp::rate, 0, {}};
    auto r = s.evaluate(q);
    REQUIRE(r.size() == 1);
    CHECK(r[0].points[0].value == doctest::Approx(5.0));
}

TEST_CASE("evaluate rate across a counter reset") {
    Store s;
    auto k = key("c");
    s.append(k, Sample{0, 10});
    s.append(k, Sample{8000, 2});
    auto q = range("c", 8000, 8000);
    q.step_ms = 10000;
    q.agg = Aggregation{AggOp::rate, 0, {}};
    auto r = s.evaluate(q);
    // Oracle: the drop 10 -> 2 is a reset, so the increase is 2 (10 + 2 - 10) over 8 s.
    std::vector<Sample> samples{{0, 10}, {8000, 2}};
    auto oracle = ew::testing::FlatStore::rate(samples);
    REQUIRE(oracle);
    CHECK(*oracle == doctest::Approx(0.25));
    REQUIRE(r.size() == 1);
    CHECK(r[0].points[0].value == doctest::Approx(*oracle));
}

TEST_CASE("evaluate group_by and quantile") {
    Store s;
    for (int i = 0; i < 4; ++i) {
        s.append(key("g", {{"job", i < 2 ? "a" : "b"}, {"i", std::to_string(i)}}), Sample{1000, double(i + 1)});
    }
    auto q = range("g", 1000, 1000);
    q.agg = Aggregation{AggOp::max, 0, {"job"}};
    auto r = s.evaluate(q);
    REQUIRE(r.size() == 2);
    CHECK(*r[0].group.find("job") == "a");
    CHECK(r[0].points[0].value == 2);
    CHECK(r[1].points[0].value == 4);

    q.agg = Aggregation{AggOp::quantile, 0.5, {}};
    CHECK(s.evaluate(q)[0].points[0].value == doctest::Approx(2.5));
    q.agg->q = 1.5;
    CHECK(error_of([&] { s.evaluate(q); }) == TsdbError::Code::QuantileOutOfRange);
}

TEST_CASE("staleness: series without samples in the lookback window contribute nothing") {
    Store s;
    s.append(key("g", {{"i", "1"}}), Sample{1000, 1});
    s.append(key("g", {{"i", "2"}}), Sample{5000, 1});
    auto q = range("g", 1000, 5000);
    q.agg = Aggregation{AggOp::count, 0, {}};
    auto r = s.evaluate(q);
    REQUIRE(r.size() == 1);
    CHECK(r[0].points == std::vector<Point>{{1000, 1}, {5000, 1}});
}

TEST_CASE("invalid queries") {
    Store s;
    auto q = range("g", 10, 5);
    CHECK(error_of([&] { s.select_range(q); }) == TsdbError::Code::InvalidQuery);
    q = range("g", 0, 5);
    q.step_ms = 0;
    CHECK(error_of([&] { s.select_range(q); }) == TsdbError::Code::InvalidQuery);
}

TEST_CASE("gc by retention") {
    Store s;
    auto k = key("m");
    for (int t = 1; t <= 480; ++t) s.append(k, Sample{t * 1000, 1});
    CHECK(s.gc(1'000'000, 480'000) == 0);
    // Second chunk spans 241 s .. 480 s and straddles the cutoff at 300 s.
    CHECK(s.gc(180'000, 480'000) == 1);
    REQUIRE(s.chunks(k).size() == 1);
    CHECK(s.chunks(k)[0].start_ms == 241'000);
    CHECK(s.gc(1, 10'000'000) == 1);
    CHECK(s.select_range(range("m", 0, 10'000'000)).empty());
    CHECK(s.series_count() == 0);
}

TEST_CASE("queries never mutate the store") {
    Store s;
    auto k = key("c");
    for (int t = 1; t <= 300; ++t) s.append(k, Sample{t * 1000, double(t % 17)});
    auto before = s.chunks(k);
    auto q = range("c", 0, 300'000);
    q.agg = Aggregation{AggOp::rate, 0, {}};
    s.evaluate(q);
    s.select_range(range("c", 0, 300'000));
    auto after = s.chunks(k);
    REQUIRE(before.size() == after.size());
    for (std::size_t i = 0; i < before.size(); ++i) CHECK(before[i].samples == after[i].samples);
}

TEST_CASE("select_range equals the flat-list oracle on random workloads") {
    std::mt19937_64 rng(99);
    Store s;
    ew::testing::FlatStore flat;
    std::vector<SeriesKey> keys;
    for (int i = 0; i < 20; ++i) {
        keys.push_back(key(i % 3 ? "m" : "n", {{"job", "j" + std::to_string(i % 4)}, {"pid", std::to_string(i)}}));
    }
    std::vector<std::int64_t> last(keys.size(), 0);
    for (int i = 0; i < 10000; ++i) {
        auto ki = rng() % keys.size();
        last[ki] += 1 + static_cast<std::int64_t>(rng() % 3000);
        Sample smp{last[ki], static_cast<double>(rng() % 1000)};
        s.append(keys[ki], smp);
        flat.add(keys[ki], smp);
    }
    for (int iter = 0; iter < 50; ++iter) {
        std::int64_t a = static_cast<std::int64_t>(rng() % 2'000'000), b = a + static_cast<std::int64_t>(rng() % 2'000'000);
        std::vector<Matcher> m;
        if (rng() % 2) m.push_back({"job", MatchOp::regex, "j[01]"});
        if (rng() % 2) m.push_back({"pid", MatchOp::not_equal, "3"});
        auto q = range(rng() % 2 ? "m" : "n", a, b, m);
        auto got = s.select_range(q);
        auto want = flat.scan(q.selector, a, b);
        REQUIRE(got.size() == want.size());
        std::size_t i = 0;
        for (const auto& [_, entry] : want) {
            CHECK(got[i].key == entry.first);
            CHECK(got[i].samples == entry.second);
            ++i;
        }
    }
}

TEST_CASE("chunking is invisible to queries") {
    Store s;
    ew::testing::FlatStore flat;
    auto k = key("c");
    for (int t = 1; t <= 1000; ++t) {
        s.append(k, Sample{t * 500, double(t)});
        flat.add(k, Sample{t * 500, double(t)});
    }
    CHECK(s.chunks(k).size() == 5);
    auto q = range("c", 0, 500'000);
    q.step_ms = 7000;
    q.agg = Aggregation{AggOp::rate, 0, {}};
    auto got = s.evaluate(q);
    auto want = flat.evaluate(q);
    REQUIRE(got.size() == 1);
    REQUIRE(got[0].points.size() == want.begin()->second.size());
    for (std::size_t i = 0; i < got[0].points.size(); ++i) {
        CHECK(ew::testing::close_rel(got[0].points[i].value, want.begin()->second[i].value, 1e-9));
    }
}

TEST_CASE("snapshot round trip and log replay") {
    auto snap = temp_file("snap");
    auto log = temp_file("log");
    {
        Store s;
        s.attach_log(log);
        s.append(key("m", {{"a", "x"}}), Sample{1, 1.5});
        s.append(key("m", {{"a", "x"}}), Sample{2, 2.5});
        s.append(key("n"), Sample{3, -1});
        s.write_snapshot(snap);
        s.flush();
    }
    {
        std::ifstream in(snap, std::ios::binary);
        char magic[4];
        in.read(magic, 4);
        CHECK(std::string(magic, 4) == "EWT1");
    }
    Store loaded;
    loaded.load(snap);
    CHECK(loaded.sample_count() == 3);
    CHECK(loaded.select_range(range("m", 0, 10))[0].samples == std::vector<Sample>{{1, 1.5}, {2, 2.5}});

    // Crash recovery: cut the log mid-record, reopen, keep appending.
    auto size = fs::file_size(log);
    fs::resize_file(log, size - 5);
    {
        Store s;
        s.attach_log(log);
        CHECK(s.sample_count() == 2);
        s.append(key("n"), Sample{4, 7});
        s.flush();
    }
    Store again;
    again.attach_log(log);
    CHECK(again.sample_count() == 3);
    CHECK(again.select_range(range("n", 0, 10))[0].samples == std::vector<Sample>{{4, 7}});

    auto bad = temp_file("bad");
    std::ofstream(bad) << "nope";
    Store err;
    CHECK(error_of([&] { err.load(bad); }) == TsdbError::Code::SnapshotError);
    fs::remove(snap);
    fs::remove(log);
    fs::remove(bad);
}

TEST_CASE("concurrent appends to distinct series and readers") {
    Store s;
    std::vector<std::thread> writers;
    for (int w = 0; w < 4; ++w) {
        writers.emplace_back([&, w] {
            auto k = key("m", {{"w", std::to_string(w)}});
            for (int t = 1; t <= 2000; ++t) s.append(k, Sample{t, double(t)});
        });
    }
    std::thread reader([&] {
        for (int i = 0; i < 200; ++i) {
            for (const auto& r : s.select_range(range("m", 0, 5000))) {
                // A consistent prefix: timestamps 1..n without gaps.
                REQUIRE(r.samples.back().timestamp_ms == static_cast<std::int64_t>(r.samples.size()));
            }
        }
    });
    for (auto& w : writers) w.join();
    reader.join();
    CHECK(s.sample_count() == 8000);
}
