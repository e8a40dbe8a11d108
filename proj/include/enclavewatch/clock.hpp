// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>

namespace ew {

/// Millisecond wall clock. Loops that must be testable take one of these.
class Clock {
public:
    virtual ~Clock() = default;
    virtual std::int64_t now_ms() const = 0;
};

class SystemClock final : public Clock {
public:
    std::int64_t now_ms() const override {
        using namespace std::chrono;
        return duration_cast<milliseconds>(system_clock::now().time_since_epoch()).count();
    }
};

/// Advanced only by hand; used by the fake-clock harnesses.
class ManualClock final : public Clock {
public:
    explicit ManualClock(std::int64_t start_ms = 0) : now_(start_ms) {}
    std::int64_t now_ms() const override { return now_.load(); }
    void set(std::int64_t t_ms) { now_.store(t_ms); }
    void advance(std::int64_t delta_ms) { now_.fetch_add(delta_ms); }

private:
    std::atomic<std::int64_t> now_;
};

}  // namespace ew
