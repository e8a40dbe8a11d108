// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace ew::net {

class AddressError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct HostPort {
    std::string host;
    int port = 0;
};

/// Parses `host:port` (port 0 picks an ephemeral port).
HostPort parse_listen(std::string_view addr);

struct HttpUrl {
    std::string host;
    int port = 80;
    std::string path = "/";

    /// `host:port`, used as the default `instance` label.
    std::string authority() const { return host + ":" + std::to_string(port); }
};

/// Parses `http://host[:port][/path]`.
HttpUrl parse_http_url(std::string_view url);

/// Listener socket setup: address reuse for quick restarts, but no SO_REUSEPORT,
/// so a second server on an occupied port fails to bind.
void configure_listen_socket(int fd);

}  // namespace ew::net
