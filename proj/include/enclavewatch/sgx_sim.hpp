// SPDX-License-Identifier: Apache-2.0
#pragma once

// Deterministic stand-in for the instrumented SGX driver and the enclave workloads
// running on top of it. Counters mirror the driver hooks the TEE exporter reads.

#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace ew::sim {

inline constexpr std::uint64_t kPageSize = 4096;
/// 94 MiB of usable EPC in 4 KiB pages.
inline constexpr std::uint64_t kDefaultEpcPages = 24064;

class SimError : public std::runtime_error {
public:
    enum class Code { ZeroEpc, ZeroPages, IndexOutOfRange, UnknownEnclave, IoError, UnknownScenario, InvalidScenario };

    SimError(Code code, const std::string& what) : std::runtime_error(what), code_(code) {}
    Code code() const noexcept { return code_; }

private:
    Code code_;
};

struct SgxDriverState {
    std::uint64_t epc_total_pages = 0;
    std::uint64_t epc_free_pages = 0;
    std::uint64_t pages_marked_old = 0;
    std::uint64_t nr_enclaves_initialized = 0;
    std::uint64_t nr_enclaves_active = 0;
    std::uint64_t nr_enclaves_removed = 0;
    std::uint64_t pages_evicted = 0;
    std::uint64_t pages_added = 0;
    std::uint64_t pages_reclaimed = 0;

    friend bool operator==(const SgxDriverState&, const SgxDriverState&) = default;
};

using EnclaveId = std::uint64_t;

struct EnclaveHandle {
    EnclaveId id = 0;
    std::uint64_t allocated_pages = 0;
    std::uint64_t resident_pages = 0;
    std::uint64_t swapped_pages = 0;
};

struct TouchReport {
    std::uint64_t faults = 0;
    std::uint64_t evictions = 0;
    std::uint64_t reclaims = 0;

    friend bool operator==(const TouchReport&, const TouchReport&) = default;
};

/// EPC model with a single system-wide FIFO of resident pages. When no page is free,
/// the oldest resident page is evicted to main memory. `pages_marked_old` is the
/// length of that eviction-candidate FIFO.
///
/// One writer at a time; snapshot() may be called from any thread.
class SgxDriver {
public:
    explicit SgxDriver(std::uint64_t epc_total_pages = kDefaultEpcPages);

    EnclaveId create_enclave(std::uint64_t requested_pages);
    /// Releases the enclave's resident pages back to the free pool.
    void destroy_enclave(EnclaveId id);

    TouchReport touch_pages(EnclaveId id, std::span<const std::uint64_t> page_indices);
    TouchReport touch_page(EnclaveId id, std::uint64_t page_index);

    SgxDriverState snapshot() const;
    EnclaveHandle enclave(EnclaveId id) const;
    std::vector<EnclaveHandle> enclaves() const;

private:
    enum class PageState : std::uint8_t { untouched, resident, swapped };

    struct Enclave {
        std::vector<PageState> pages;
        std::uint64_t resident = 0;
        std::uint64_t swapped = 0;
    };

    struct PageRef {
        EnclaveId enclave;
        std::uint64_t index;
    };

    void make_room(TouchReport& report);
    void touch_locked(EnclaveId id, Enclave& enc, std::uint64_t index, TouchReport& report);

    mutable std::mutex mu_;
    SgxDriverState state_;
    std::unordered_map<EnclaveId, Enclave> enclaves_;
    // Entries of destroyed enclaves stay in the queue and are skipped lazily.
    std::deque<PageRef> fifo_;
    EnclaveId next_id_ = 1;
};

/// Writes one file per driver counter into `dir`, each holding the decimal value and
/// a newline, named like the driver's module parameters (e.g. `sgx_nr_free_pages`).
void export_parameters(const SgxDriverState& state, const std::filesystem::path& dir);

/// Parameter file name and value for every exported counter, in a fixed order.
std::vector<std::pair<std::string, std::uint64_t>> parameter_values(const SgxDriverState& state);

// ---------------------------------------------------------------------------
// Workloads

enum class EventKind : std::uint8_t { syscall, context_switch, page_fault, cache_ref, cache_miss };
enum class PageSpace : std::uint8_t { user, kernel };

struct SystemEvent {
    std::int64_t timestamp_ms = 0;
    EventKind kind = EventKind::syscall;
    std::int64_t pid = 0;
    PageSpace space = PageSpace::user;  // page_fault only
    std::string syscall;                // syscall only

    friend bool operator==(const SystemEvent&, const SystemEvent&) = default;
};

using SystemEventStream = std::vector<SystemEvent>;

/// Counts per 100 requests.
struct RequestRates {
    double evicted_pages = 0;
    double user_page_faults = 0;
    double total_page_faults = 0;
    double llc_misses = 0;
    double llc_references = 0;
    double context_switches_pid = 0;
    double context_switches_host = 0;
    std::map<std::string, double> syscall_mix;
};

struct WorkloadScenario {
    std::string name;
    double request_rate = 0;  // requests per second
    RequestRates per_100_requests;
    std::uint64_t db_bytes = 0;
    bool in_enclave = true;
};

/// Throws SimError::InvalidScenario when a rate is negative or non-finite.
void validate(const WorkloadScenario& scenario);

const std::vector<WorkloadScenario>& builtin_scenarios();
const WorkloadScenario& find_scenario(const std::string& name);

using EventSink = std::function<void(std::span<const SystemEvent>)>;

/// Drives a workload against a driver. Requests arrive on a fixed grid
/// (request k at start + k * 1000 / rate ms) and every per-request rate is realised
/// by a counter schedule: after k requests exactly floor(k * rate / 100) events
/// have been emitted. Evictions are produced by touching the enclave's working set
/// cyclically, so they come out of the driver's own FIFO mechanics.
class ScenarioRunner {
public:
    ScenarioRunner(WorkloadScenario scenario, std::shared_ptr<SgxDriver> driver, std::uint64_t seed,
                   std::int64_t start_ms = 0);

    /// Processes every request whose arrival time is <= t_ms.
    void advance_to(std::int64_t t_ms, const EventSink& sink);
    /// Processes exactly `n` more requests.
    void run_requests(std::uint64_t n, const EventSink& sink);

    std::uint64_t requests() const noexcept { return requests_; }
    std::int64_t next_arrival_ms() const noexcept;
    std::int64_t app_pid() const noexcept { return app_pid_; }
    const WorkloadScenario& scenario() const noexcept { return scenario_; }
    /// Driver state once the working set was loaded, before the first request.
    const SgxDriverState& baseline() const noexcept { return baseline_; }

private:
    void run_one(const EventSink& sink);
    std::uint64_t due(double per_100) const;

    WorkloadScenario scenario_;
    std::shared_ptr<SgxDriver> driver_;
    std::uint64_t seed_;
    std::int64_t start_ms_;
    std::int64_t app_pid_;
    std::vector<std::int64_t> other_pids_;
    std::mt19937_64 rng_;

    EnclaveId enclave_ = 0;
    std::uint64_t working_set_pages_ = 0;
    std::uint64_t cursor_ = 0;
    std::uint64_t requests_ = 0;
    SgxDriverState baseline_;

    struct Emitted {
        std::uint64_t evicted = 0, user_pf = 0, kernel_pf = 0, llc_miss = 0, llc_ref = 0, cs_pid = 0, cs_other = 0;
        std::map<std::string, std::uint64_t> syscalls;
    } emitted_;
    std::vector<SystemEvent> batch_;
};

struct TimedState {
    std::int64_t timestamp_ms = 0;
    SgxDriverState state;
    friend bool operator==(const TimedState&, const TimedState&) = default;
};

struct ScenarioRun {
    SgxDriverState baseline;
    std::vector<TimedState> trace;  // one snapshot per simulated second
    SystemEventStream events;
    std::uint64_t requests = 0;
};

/// Runs `scenario` for `duration_s` simulated seconds on a fresh default-size driver.
ScenarioRun run_scenario(const WorkloadScenario& scenario, double duration_s, std::uint64_t seed,
                         std::uint64_t epc_total_pages = kDefaultEpcPages);

}  // namespace ew::sim
