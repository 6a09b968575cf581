// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <memory>
#include <string>

#include "itrain/server.hpp"

namespace itrain {

struct HttpOptions {
    std::string host = "127.0.0.1";
    std::uint16_t port = 8080;  // 0 picks a free port
    std::optional<std::size_t> subscriber_capacity;
};

/// HTTP + WebSocket front end for a ControlServer, on one port.
///
///   POST /command        submit a CommandEnvelope
///   GET  /commands       command history
///   GET  /state          server snapshot
///   GET  /branches       branch tree
///   GET  /metrics?branch_id=b0
///   GET  /ws             event stream (state_snapshot first, then live events)
///
/// The ControlServer must outlive this object.
class HttpServer {
public:
    HttpServer(ControlServer& server, HttpOptions options);
    ~HttpServer();

    HttpServer(const HttpServer&) = delete;
    HttpServer& operator=(const HttpServer&) = delete;

    /// Binds and starts serving on a background thread. Throws Error(io_error).
    void start();
    void stop();

    [[nodiscard]] std::uint16_t port() const noexcept;

    class Impl;

private:
    std::unique_ptr<Impl> impl_;
};

struct HttpReply {
    unsigned status = 200;
    Json body;
};

/// Routing without the transport; exposed for tests.
[[nodiscard]] HttpReply handle_request(ControlServer& server, std::string_view method, std::string_view target,
                                       std::string_view body);

}  // namespace itrain
