// SPDX-License-Identifier: Apache-2.0
#include "enclavewatch/net.hpp"

#include <charconv>

#include <sys/socket.h>

namespace ew::net {

namespace {

int parse_port(std::string_view s, std::string_view whole) {
    int port = -1;
    auto res = std::from_chars(s.data(), s.data() + s.size(), port);
    if (s.empty() || res.ec != std::errc() || res.ptr != s.data() + s.size() || port < 0 || port > 65535) {
        throw AddressError("invalid port in '" + std::string(whole) + "'");
    }
    return port;
}

}  // namespace

HostPort parse_listen(std::string_view addr) {
    auto colon = addr.rfind(':');
    if (colon == std::string_view::npos || colon == 0) {
        throw AddressError("listen address must be host:port, got '" + std::string(addr) + "'");
    }
    return HostPort{std::string(addr.substr(0, colon)), parse_port(addr.substr(colon + 1), addr)};
}

HttpUrl parse_http_url(std::string_view url) {
    constexpr std::string_view scheme = "http://";
    if (!url.starts_with(scheme)) {
        throw AddressError("only http:// URLs are supported: '" + std::string(url) + "'");
    }
    auto rest = url.substr(scheme.size());
    auto slash = rest.find('/');
    auto authority = rest.substr(0, slash);
    HttpUrl out;
    if (slash != std::string_view::npos) {
        out.path = std::string(rest.substr(slash));
    }
    auto colon = authority.rfind(':');
    if (colon == std::string_view::npos) {
        out.host = std::string(authority);
    } else {
        out.host = std::string(authority.substr(0, colon));
        out.port = parse_port(authority.substr(colon + 1), url);
    }
    if (out.host.empty()) {
        throw AddressError("missing host in '" + std::string(url) + "'");
    }
    return out;
}

void configure_listen_socket(int fd) {
    int yes = 1;
    ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof(yes));
}

}  // namespace ew::net
