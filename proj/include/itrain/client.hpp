// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <condition_variable>
#include <deque>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>

#include "itrain/protocol.hpp"

namespace itrain {

struct HttpResponse {
    int status = 0;
    Json body;
};

/// Blocking HTTP client for a running control server. Transport failures
/// throw Error(connection_error).
class ControlClient {
public:
    /// `base_url` like "http://127.0.0.1:8080".
    explicit ControlClient(std::string base_url, std::chrono::milliseconds timeout = std::chrono::seconds(10));
    ~ControlClient();

    ControlClient(const ControlClient&) = delete;
    ControlClient& operator=(const ControlClient&) = delete;

    HttpResponse post_command(const CommandEnvelope& envelope);
    HttpResponse post_raw(const std::string& body);
    HttpResponse get(const std::string& target);

    /// GET that throws Error(connection_error) unless the reply is 200.
    Json get_ok(const std::string& target);

    /// Polls /commands until the command reaches success or failed, returning
    /// its history record; nullopt on timeout.
    std::optional<Json> wait_terminal(const std::string& uuid, std::chrono::milliseconds timeout,
                                      std::chrono::milliseconds interval = std::chrono::milliseconds(20));

    [[nodiscard]] const std::string& base_url() const noexcept { return base_url_; }

private:
    class Impl;
    std::string base_url_;
    std::unique_ptr<Impl> impl_;
};

/// WebSocket subscriber to /ws. Frames are read on a background thread and
/// queued until taken with next().
class EventStream {
public:
    /// `url` may be "ws://host:port/ws" or the server's http base URL.
    explicit EventStream(const std::string& url);
    ~EventStream();

    EventStream(const EventStream&) = delete;
    EventStream& operator=(const EventStream&) = delete;

    std::optional<std::string> next_raw(std::chrono::milliseconds timeout);
    std::optional<TrainingEvent> next(std::chrono::milliseconds timeout);

    /// True once the connection has ended and the queue is drained.
    [[nodiscard]] bool finished() const;
    void close();

    class Impl;

private:
    std::shared_ptr<Impl> impl_;
};

struct UrlParts {
    std::string scheme;
    std::string host;
    std::uint16_t port = 0;
    std::string path;
};

/// Throws Error(invalid_value) for anything but http/https/ws URLs with a host.
[[nodiscard]] UrlParts parse_url(const std::string& url);

}  // namespace itrain
