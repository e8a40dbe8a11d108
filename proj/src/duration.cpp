// SPDX-License-Identifier: Apache-2.0
#include "enclavewatch/duration.hpp"

#include <charconv>
#include <limits>
#include <string>

namespace ew {

std::int64_t parse_duration_ms(std::string_view text) {
    std::int64_t n = 0;
    auto res = std::from_chars(text.data(), text.data() + text.size(), n);
    if (res.ec != std::errc() || n < 0) {
        throw std::invalid_argument("invalid duration '" + std::string(text) + "'");
    }
    std::string_view unit(res.ptr, text.data() + text.size() - res.ptr);
    std::int64_t scale = 0;
    if (unit.empty() || unit == "ms") {
        scale = 1;
    } else if (unit == "s") {
        scale = 1000;
    } else if (unit == "m") {
        scale = 60'000;
    } else if (unit == "h") {
        scale = 3'600'000;
    } else {
        throw std::invalid_argument("unknown duration unit in '" + std::string(text) + "'");
    }
    if (n > std::numeric_limits<std::int64_t>::max() / scale) {
        throw std::invalid_argument("duration out of range '" + std::string(text) + "'");
    }
    return n * scale;
}

}  // namespace ew
