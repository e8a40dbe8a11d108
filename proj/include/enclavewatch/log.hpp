// SPDX-License-Identifier: Apache-2.0
#pragma once

// Structured logging: every line is a single `key=value ...` record on stderr.

#include <spdlog/spdlog.h>

#include <memory>
#include <string>
#include <string_view>

namespace ew::log {

/// The shared stderr logger (created on first use).
std::shared_ptr<spdlog::logger> get();

/// Accepts trace|debug|info|warn|error|off; returns false on an unknown name.
bool set_level(std::string_view level);

/// Quotes a value when it contains spaces, quotes or '=' so records stay parseable.
std::string kv_value(std::string_view v);

}  // namespace ew::log
