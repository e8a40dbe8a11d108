// SPDX-License-Identifier: Apache-2.0
#include "enclavewatch/sgx_sim.hpp"

#include <cmath>
#include <fstream>
#include <limits>

namespace ew::sim {

SgxDriver::SgxDriver(std::uint64_t epc_total_pages) {
    if (epc_total_pages == 0) {
        throw SimError(SimError::Code::ZeroEpc, "EPC must hold at least one page");
    }
    state_.epc_total_pages = epc_total_pages;
    state_.epc_free_pages = epc_total_pages;
}

EnclaveId SgxDriver::create_enclave(std::uint64_t requested_pages) {
    if (requested_pages == 0) {
        throw SimError(SimError::Code::ZeroPages, "enclave must request at least one page");
    }
    std::lock_guard lock(mu_);
    EnclaveId id = next_id_++;
    enclaves_[id].pages.assign(requested_pages, PageState::untouched);
    ++state_.nr_enclaves_initialized;
    ++state_.nr_enclaves_active;
    return id;
}

void SgxDriver::destroy_enclave(EnclaveId id) {
    std::lock_guard lock(mu_);
    auto it = enclaves_.find(id);
    if (it == enclaves_.end()) {
        throw SimError(SimError::Code::UnknownEnclave, "unknown enclave " + std::to_string(id));
    }
    state_.epc_free_pages += it->second.resident;
    state_.pages_marked_old -= it->second.resident;
    enclaves_.erase(it);
    ++state_.nr_enclaves_removed;
    --state_.nr_enclaves_active;
}

void SgxDriver::make_room(TouchReport& report) {
    if (state_.epc_free_pages > 0) {
        --state_.epc_free_pages;
        return;
    }
    while (!fifo_.empty()) {
        PageRef victim = fifo_.front();
        fifo_.pop_front();
        auto it = enclaves_.find(victim.enclave);
        if (it == enclaves_.end()) {
            continue;
        }
        auto& enc = it->second;
        enc.pages[victim.index] = PageState::swapped;
        --enc.resident;
        ++enc.swapped;
        --state_.pages_marked_old;
        ++state_.pages_evicted;
        ++report.evictions;
        return;
    }
}

void SgxDriver::touch_locked(EnclaveId id, Enclave& enc, std::uint64_t index, TouchReport& report) {
    auto& page = enc.pages[index];
    if (page == PageState::resident) {
        return;
    }
    // A page evicted by make_room() is never the one being touched: it is not resident.
    make_room(report);
    if (page == PageState::untouched) {
        ++state_.pages_added;
    } else {
        --enc.swapped;
        ++state_.pages_reclaimed;
        ++report.reclaims;
        ++report.faults;
    }
    page = PageState::resident;
    ++enc.resident;
    ++state_.pages_marked_old;
    fifo_.push_back(PageRef{id, index});
}

TouchReport SgxDriver::touch_pages(EnclaveId id, std::span<const std::uint64_t> page_indices) {
    std::lock_guard lock(mu_);
    auto it = enclaves_.find(id);
    if (it == enclaves_.end()) {
        throw SimError(SimError::Code::UnknownEnclave, "unknown enclave " + std::to_string(id));
    }
    auto& enc = it->second;
    for (auto index : page_indices) {
        if (index >= enc.pages.size()) {
            throw SimError(SimError::Code::IndexOutOfRange,
                           "page " + std::to_string(index) + " outside enclave of " +
                               std::to_string(enc.pages.size()) + " pages");
        }
    }
    TouchReport report;
    for (auto index : page_indices) {
        touch_locked(id, enc, index, report);
    }
    return report;
}

TouchReport SgxDriver::touch_page(EnclaveId id, std::uint64_t page_index) {
    return touch_pages(id, std::span<const std::uint64_t>(&page_index, 1));
}

SgxDriverState SgxDriver::snapshot() const {
    std::lock_guard lock(mu_);
    return state_;
}

EnclaveHandle SgxDriver::enclave(EnclaveId id) const {
    std::lock_guard lock(mu_);
    auto it = enclaves_.find(id);
    if (it == enclaves_.end()) {
        throw SimError(SimError::Code::UnknownEnclave, "unknown enclave " + std::to_string(id));
    }
    return EnclaveHandle{id, it->second.pages.size(), it->second.resident, it->second.swapped};
}

std::vector<EnclaveHandle> SgxDriver::enclaves() const {
    std::lock_guard lock(mu_);
    std::vector<EnclaveHandle> out;
    out.reserve(enclaves_.size());
    for (const auto& [id, enc] : enclaves_) {
        out.push_back(EnclaveHandle{id, enc.pages.size(), enc.resident, enc.swapped});
    }
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    return out;
}

std::vector<std::pair<std::string, std::uint64_t>> parameter_values(const SgxDriverState& s) {
    return {
        {"sgx_nr_enclaves", s.nr_enclaves_active},
        {"sgx_nr_free_pages", s.epc_free_pages},
        {"sgx_epc_total_pages", s.epc_total_pages},
        {"sgx_pages_marked_old", s.pages_marked_old},
        {"sgx_enclaves_initialized", s.nr_enclaves_initialized},
        {"sgx_enclaves_removed", s.nr_enclaves_removed},
        {"sgx_nr_evicted", s.pages_evicted},
        {"sgx_pages_added", s.pages_added},
        {"sgx_pages_reclaimed", s.pages_reclaimed},
    };
}

void export_parameters(const SgxDriverState& state, const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    std::error_code ec;
    if (!fs::is_directory(dir, ec)) {
        throw SimError(SimError::Code::IoError, "not a directory: " + dir.string());
    }
    for (const auto& [name, value] : parameter_values(state)) {
        // Write-then-rename so a concurrent reader never sees a half-written value.
        fs::path tmp = dir / ("." + name + ".tmp");
        {
            std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
            out << value << '\n';
            if (!out) {
                throw SimError(SimError::Code::IoError, "cannot write " + tmp.string());
            }
        }
        fs::rename(tmp, dir / name, ec);
        if (ec) {
            throw SimError(SimError::Code::IoError, "cannot rename " + tmp.string() + ": " + ec.message());
        }
    }
}

// ---------------------------------------------------------------------------

void validate(const WorkloadScenario& sc) {
    auto check = [&](double v, const char* field) {
        if (!std::isfinite(v) || v < 0) {
            throw SimError(SimError::Code::InvalidScenario,
                           "scenario '" + sc.name + "': " + field + " must be finite and >= 0");
        }
    };
    check(sc.request_rate, "request_rate");
    const auto& r = sc.per_100_requests;
    check(r.evicted_pages, "evicted_pages");
    check(r.user_page_faults, "user_page_faults");
    check(r.total_page_faults, "total_page_faults");
    check(r.llc_misses, "llc_misses");
    check(r.llc_references, "llc_references");
    check(r.context_switches_pid, "context_switches_pid");
    check(r.context_switches_host, "context_switches_host");
    for (const auto& [name, v] : r.syscall_mix) {
        check(v, name.c_str());
    }
    if (r.user_page_faults > r.total_page_faults) {
        throw SimError(SimError::Code::InvalidScenario,
                       "scenario '" + sc.name + "': user_page_faults exceeds total_page_faults");
    }
    if (r.context_switches_pid > r.context_switches_host) {
        throw SimError(SimError::Code::InvalidScenario,
                       "scenario '" + sc.name + "': context_switches_pid exceeds context_switches_host");
    }
}

const std::vector<WorkloadScenario>& builtin_scenarios() {
    // Redis GET workloads, 580 client connections, 105 MiB database.
    constexpr std::uint64_t kDb105 = 105ull * 1024 * 1024;
    static const std::vector<WorkloadScenario> scenarios = [] {
        std::vector<WorkloadScenario> v;

        WorkloadScenario native;
        native.name = "native-redis";
        native.request_rate = 200;
        native.db_bytes = kDb105;
        native.in_enclave = false;
        native.per_100_requests = {.evicted_pages = 0,
                                   .user_page_faults = 0,
                                   .total_page_faults = 160,
                                   .llc_misses = 23,
                                   .llc_references = 115,
                                   .context_switches_pid = 0.14,
                                   .context_switches_host = 37,
                                   .syscall_mix = {{"read", 100}, {"write", 100}, {"epoll_wait", 35}}};
        v.push_back(native);

        WorkloadScenario scone;
        scone.name = "scone-580C-105MB";
        scone.request_rate = 200;
        scone.db_bytes = kDb105;
        scone.per_100_requests = {.evicted_pages = 137,
                                  .user_page_faults = 0.064,
                                  .total_page_faults = 2200,
                                  .llc_misses = 103,
                                  .llc_references = 515,
                                  .context_switches_pid = 20,
                                  .context_switches_host = 125,
                                  .syscall_mix = {{"read", 100},
                                                  {"write", 100},
                                                  {"epoll_wait", 30},
                                                  {"clock_gettime", 400}}};
        v.push_back(scone);

        WorkloadScenario graphene;
        graphene.name = "graphene-580C-105MB";
        graphene.request_rate = 200;
        graphene.db_bytes = kDb105;
        graphene.per_100_requests = {.evicted_pages = 0.03,
                                     .user_page_faults = 0.03,
                                     .total_page_faults = 8996,
                                     .llc_misses = 161,
                                     .llc_references = 805,
                                     .context_switches_pid = 40,
                                     .context_switches_host = 304,
                                     .syscall_mix = {{"read", 100},
                                                     {"write", 100},
                                                     {"epoll_wait", 45},
                                                     {"futex", 60},
                                                     {"clock_gettime", 250}}};
        v.push_back(graphene);

        WorkloadScenario lkl;
        lkl.name = "sgx-lkl-580C-105MB";
        lkl.request_rate = 200;
        lkl.db_bytes = kDb105;
        lkl.per_100_requests = {.evicted_pages = 1.7,
                                .user_page_faults = 0.03,
                                .total_page_faults = 2200,
                                .llc_misses = 103,
                                .llc_references = 515,
                                .context_switches_pid = 60,
                                .context_switches_host = 125,
                                .syscall_mix = {{"read", 100},
                                                {"write", 100},
                                                {"epoll_wait", 30},
                                                {"clock_gettime", 300}}};
        v.push_back(lkl);
        return v;
    }();
    return scenarios;
}

const WorkloadScenario& find_scenario(const std::string& name) {
    for (const auto& sc : builtin_scenarios()) {
        if (sc.name == name) {
            return sc;
        }
    }
    throw SimError(SimError::Code::UnknownScenario, "unknown scenario '" + name + "'");
}

ScenarioRunner::ScenarioRunner(WorkloadScenario scenario, std::shared_ptr<SgxDriver> driver,
                               std::uint64_t seed, std::int64_t start_ms)
    : scenario_(std::move(scenario)),
      driver_(std::move(driver)),
      seed_(seed),
      start_ms_(start_ms),
      app_pid_(static_cast<std::int64_t>(1000 + seed % 30000)),
      other_pids_{1, 2, 9, 42},
      rng_(seed) {
    validate(scenario_);
    if (scenario_.in_enclave && scenario_.db_bytes > 0) {
        working_set_pages_ = (scenario_.db_bytes + kPageSize - 1) / kPageSize;
        enclave_ = driver_->create_enclave(working_set_pages_);
        // Load the database: every page of the working set is touched once.
        std::vector<std::uint64_t> pages(working_set_pages_);
        for (std::uint64_t i = 0; i < working_set_pages_; ++i) {
            pages[i] = i;
        }
        driver_->touch_pages(enclave_, pages);
    }
    baseline_ = driver_->snapshot();
}

std::int64_t ScenarioRunner::next_arrival_ms() const noexcept {
    if (scenario_.request_rate <= 0) {
        return std::numeric_limits<std::int64_t>::max();
    }
    return start_ms_ + static_cast<std::int64_t>(std::floor(static_cast<long double>(requests_ + 1) * 1000.0L /
                                                            scenario_.request_rate));
}

std::uint64_t ScenarioRunner::due(double per_100) const {
    // The epsilon absorbs binary rounding of rates like 0.03 so exact multiples land on the integer.
    return static_cast<std::uint64_t>(
        std::floor(static_cast<long double>(requests_) * per_100 / 100.0L + 1e-9L));
}

void ScenarioRunner::run_one(const EventSink& sink) {
    const std::int64_t t = next_arrival_ms();
    ++requests_;
    const auto& r = scenario_.per_100_requests;
    batch_.clear();

    auto emit = [&](EventKind kind, std::int64_t pid, std::uint64_t n, PageSpace space = PageSpace::user,
                    const std::string& syscall = {}) {
        for (std::uint64_t i = 0; i < n; ++i) {
            batch_.push_back(SystemEvent{t, kind, pid, space, syscall});
        }
    };

    if (enclave_ != 0) {
        std::uint64_t target = due(r.evicted_pages);
        for (; emitted_.evicted < target; ++emitted_.evicted) {
            driver_->touch_page(enclave_, cursor_);
            cursor_ = (cursor_ + 1) % working_set_pages_;
        }
    }

    std::uint64_t user_target = due(r.user_page_faults);
    emit(EventKind::page_fault, app_pid_, user_target - emitted_.user_pf, PageSpace::user);
    emitted_.user_pf = user_target;

    std::uint64_t total_target = due(r.total_page_faults);
    std::uint64_t kernel_target = total_target > user_target ? total_target - user_target : 0;
    if (kernel_target > emitted_.kernel_pf) {
        emit(EventKind::page_fault, app_pid_, kernel_target - emitted_.kernel_pf, PageSpace::kernel);
        emitted_.kernel_pf = kernel_target;
    }

    std::uint64_t cs_pid_target = due(r.context_switches_pid);
    emit(EventKind::context_switch, app_pid_, cs_pid_target - emitted_.cs_pid);
    emitted_.cs_pid = cs_pid_target;

    std::uint64_t cs_host_target = due(r.context_switches_host);
    std::uint64_t cs_other_target = cs_host_target > cs_pid_target ? cs_host_target - cs_pid_target : 0;
    std::uniform_int_distribution<std::size_t> pick(0, other_pids_.size() - 1);
    for (; emitted_.cs_other < cs_other_target; ++emitted_.cs_other) {
        emit(EventKind::context_switch, other_pids_[pick(rng_)], 1);
    }

    std::uint64_t miss_target = due(r.llc_misses);
    emit(EventKind::cache_miss, app_pid_, miss_target - emitted_.llc_miss);
    emitted_.llc_miss = miss_target;

    std::uint64_t ref_target = due(r.llc_references);
    emit(EventKind::cache_ref, app_pid_, ref_target - emitted_.llc_ref);
    emitted_.llc_ref = ref_target;

    for (const auto& [name, rate] : r.syscall_mix) {
        auto& done = emitted_.syscalls[name];
        std::uint64_t target = due(rate);
        emit(EventKind::syscall, app_pid_, target - done, PageSpace::user, name);
        done = target;
    }

    if (!batch_.empty() && sink) {
        sink(batch_);
    }
}

void ScenarioRunner::advance_to(std::int64_t t_ms, const EventSink& sink) {
    while (next_arrival_ms() <= t_ms) {
        run_one(sink);
    }
}

void ScenarioRunner::run_requests(std::uint64_t n, const EventSink& sink) {
    for (std::uint64_t i = 0; i < n; ++i) {
        run_one(sink);
    }
}

ScenarioRun run_scenario(const WorkloadScenario& scenario, double duration_s, std::uint64_t seed,
                         std::uint64_t epc_total_pages) {
    if (!(duration_s > 0)) {
        throw SimError(SimError::Code::InvalidScenario, "duration must be positive");
    }
    auto driver = std::make_shared<SgxDriver>(epc_total_pages);
    ScenarioRunner runner(scenario, driver, seed);

    ScenarioRun run;
    run.baseline = runner.baseline();
    auto sink = [&run](std::span<const SystemEvent> batch) {
        run.events.insert(run.events.end(), batch.begin(), batch.end());
    };
    const auto end_ms = static_cast<std::int64_t>(std::llround(duration_s * 1000.0));
    for (std::int64_t t = 1000;; t += 1000) {
        std::int64_t at = std::min(t, end_ms);
        runner.advance_to(at, sink);
        run.trace.push_back(TimedState{at, driver->snapshot()});
        if (at == end_ms) {
            break;
        }
    }
    run.requests = runner.requests();
    return run;
}

}  // namespace ew::sim
