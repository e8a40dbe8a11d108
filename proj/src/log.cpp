// SPDX-License-Identifier: Apache-2.0
#include "enclavewatch/log.hpp"

#include <spdlog/sinks/stdout_sinks.h>

namespace ew::log {

std::shared_ptr<spdlog::logger> get() {
    static auto logger = [] {
        auto l = spdlog::stderr_logger_mt("enclavewatch");
        l->set_pattern("ts=%Y-%m-%dT%H:%M:%S.%e level=%l %v");
        l->set_level(spdlog::level::info);
        return l;
    }();
    return logger;
}

bool set_level(std::string_view level) {
    auto parsed = spdlog::level::from_str(std::string(level));
    if (parsed == spdlog::level::off && level != "off") {
        return false;
    }
    get()->set_level(parsed);
    return true;
}

std::string kv_value(std::string_view v) {
    if (!v.empty() && v.find_first_of(" \"=\t\n") == std::string_view::npos) {
        return std::string(v);
    }
    std::string out = "\"";
    for (char c : v) {
        if (c == '"' || c == '\\') {
            out += '\\';
            out += c;
        } else if (c == '\n') {
            out += "\\n";
        } else {
            out += c;
        }
    }
    out += '"';
    return out;
}

}  // namespace ew::log
