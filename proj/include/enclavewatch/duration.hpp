// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <stdexcept>
#include <string_view>

namespace ew {

/// Parses `250ms`, `5s`, `1m`, `24h` or a bare integer (milliseconds).
/// Throws std::invalid_argument on anything else or a negative result.
std::int64_t parse_duration_ms(std::string_view text);

}  // namespace ew
