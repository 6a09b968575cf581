// SPDX-License-Identifier: Apache-2.0
#include "itrain/client.hpp"

#include <httplib.h>

#include <boost/asio/connect.hpp>
#include <boost/asio/ip/tcp.hpp>
#include <boost/asio/post.hpp>
#include <boost/asio/steady_timer.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/websocket.hpp>

#include <charconv>

namespace itrain {

namespace asio = boost::asio;
namespace beast = boost::beast;
namespace websocket = beast::websocket;
using tcp = asio::ip::tcp;

UrlParts parse_url(const std::string& url) {
    UrlParts parts;
    const auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) {
        throw Error(ErrorCode::invalid_value, "url must start with http://, https:// or ws://: " + url, "url");
    }
    parts.scheme = url.substr(0, scheme_end);
    if (parts.scheme != "http" && parts.scheme != "https" && parts.scheme != "ws") {
        throw Error(ErrorCode::invalid_value, "unsupported url scheme " + parts.scheme, "url");
    }
    const std::string rest = url.substr(scheme_end + 3);
    const auto slash = rest.find('/');
    std::string authority = rest.substr(0, slash);
    parts.path = slash == std::string::npos ? "/" : rest.substr(slash);
    parts.port = parts.scheme == "https" ? 443 : 80;
    const auto colon = authority.rfind(':');
    if (colon != std::string::npos) {
        const std::string digits = authority.substr(colon + 1);
        unsigned port = 0;
        auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), port);
        if (ec != std::errc() || ptr != digits.data() + digits.size() || port == 0 || port > 65535) {
            throw Error(ErrorCode::invalid_value, "bad port in url " + url, "url");
        }
        parts.port = static_cast<std::uint16_t>(port);
        authority.resize(colon);
    }
    if (authority.empty()) {
        throw Error(ErrorCode::invalid_value, "url has no host: " + url, "url");
    }
    parts.host = authority;
    return parts;
}

class ControlClient::Impl {
public:
    Impl(const std::string& base_url, std::chrono::milliseconds timeout) : client(base_url) {
        client.set_connection_timeout(timeout);
        client.set_read_timeout(timeout);
        client.set_write_timeout(timeout);
    }
    httplib::Client client;
};

namespace {

HttpResponse to_response(const httplib::Result& result, const std::string& base_url, const std::string& what) {
    if (!result) {
        throw Error(ErrorCode::connection_error,
                    "cannot reach " + base_url + " (" + what + "): " + httplib::to_string(result.error()));
    }
    HttpResponse response;
    response.status = result->status;
    response.body = Json::parse(result->body, nullptr, false);
    if (response.body.is_discarded()) {
        response.body = Json{{"error", result->body}};
    }
    return response;
}

}  // namespace

ControlClient::ControlClient(std::string base_url, std::chrono::milliseconds timeout)
    : base_url_(std::move(base_url)) {
    while (!base_url_.empty() && base_url_.back() == '/') {
        base_url_.pop_back();
    }
    (void)parse_url(base_url_);
    impl_ = std::make_unique<Impl>(base_url_, timeout);
}

ControlClient::~ControlClient() = default;

HttpResponse ControlClient::post_command(const CommandEnvelope& envelope) {
    return post_raw(encode_command(envelope));
}

HttpResponse ControlClient::post_raw(const std::string& body) {
    return to_response(impl_->client.Post("/command", body, "application/json"), base_url_, "POST /command");
}

HttpResponse ControlClient::get(const std::string& target) {
    return to_response(impl_->client.Get(target), base_url_, "GET " + target);
}

Json ControlClient::get_ok(const std::string& target) {
    HttpResponse response = get(target);
    if (response.status != 200) {
        throw Error(ErrorCode::connection_error,
                    "GET " + target + " returned " + std::to_string(response.status) + ": " + response.body.dump());
    }
    return std::move(response.body);
}

std::optional<Json> ControlClient::wait_terminal(const std::string& uuid, std::chrono::milliseconds timeout,
                                                 std::chrono::milliseconds interval) {
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    while (true) {
        const Json history = get_ok("/commands");
        for (const auto& record : history) {
            if (record.at("uuid") == uuid) {
                const auto status = parse_command_status(record.at("status").get<std::string>());
                if (status && is_terminal(*status)) {
                    return record;
                }
            }
        }
        if (std::chrono::steady_clock::now() >= deadline) {
            return std::nullopt;
        }
        std::this_thread::sleep_for(interval);
    }
}

class EventStream::Impl : public std::enable_shared_from_this<EventStream::Impl> {
public:
    Impl() : ws(ioc) {}

    void connect(const UrlParts& url) {
        tcp::resolver resolver(ioc);
        beast::error_code ec;
        const auto results = resolver.resolve(url.host, std::to_string(url.port), ec);
        if (!ec) {
            beast::get_lowest_layer(ws).expires_after(std::chrono::seconds(10));
            beast::get_lowest_layer(ws).connect(results, ec);
        }
        if (!ec) {
            const std::string path = url.scheme == "ws" ? url.path : "/ws";
            ws.handshake(url.host + ":" + std::to_string(url.port), path, ec);
        }
        if (ec) {
            throw Error(ErrorCode::connection_error,
                        "cannot open event stream at " + url.host + ":" + std::to_string(url.port) + ": " + ec.message());
        }
        beast::get_lowest_layer(ws).expires_never();
    }

    void start() {
        read_loop();
        thread = std::thread([self = shared_from_this()] { self->ioc.run(); });
    }

    void read_loop() {
        ws.async_read(buffer, [self = shared_from_this()](beast::error_code ec, std::size_t) {
            if (ec) {
                self->mark_finished();
                return;
            }
            {
                std::lock_guard lock(self->mutex);
                self->frames.push_back(beast::buffers_to_string(self->buffer.data()));
            }
            self->buffer.consume(self->buffer.size());
            self->ready.notify_all();
            self->read_loop();
        });
    }

    void mark_finished() {
        {
            std::lock_guard lock(mutex);
            ended = true;
        }
        ready.notify_all();
    }

    void close() {
        if (!thread.joinable()) {
            return;
        }
        asio::post(ioc, [self = shared_from_this()] {
            if (self->closing) {
                return;
            }
            self->closing = true;
            self->deadline.expires_after(std::chrono::seconds(2));
            self->deadline.async_wait([self](beast::error_code ec) {
                if (!ec) {
                    beast::error_code ignored;
                    beast::get_lowest_layer(self->ws).socket().close(ignored);
                }
            });
            self->ws.async_close(websocket::close_code::normal, [self](beast::error_code) {
                self->deadline.cancel();
                beast::error_code ignored;
                beast::get_lowest_layer(self->ws).socket().close(ignored);
            });
        });
        thread.join();
        mark_finished();
    }

    asio::io_context ioc;
    websocket::stream<beast::tcp_stream> ws;
    asio::steady_timer deadline{ioc};
    beast::flat_buffer buffer;
    std::thread thread;
    bool closing = false;

    mutable std::mutex mutex;
    std::condition_variable ready;
    std::deque<std::string> frames;
    bool ended = false;
};

EventStream::EventStream(const std::string& url) : impl_(std::make_shared<Impl>()) {
    impl_->connect(parse_url(url));
    impl_->start();
}

EventStream::~EventStream() { close(); }

void EventStream::close() { impl_->close(); }

std::optional<std::string> EventStream::next_raw(std::chrono::milliseconds timeout) {
    std::unique_lock lock(impl_->mutex);
    impl_->ready.wait_for(lock, timeout, [&] { return impl_->ended || !impl_->frames.empty(); });
    if (impl_->frames.empty()) {
        return std::nullopt;
    }
    std::string frame = std::move(impl_->frames.front());
    impl_->frames.pop_front();
    return frame;
}

std::optional<TrainingEvent> EventStream::next(std::chrono::milliseconds timeout) {
    auto raw = next_raw(timeout);
    if (!raw) {
        return std::nullopt;
    }
    return decode_event(*raw);
}

bool EventStream::finished() const {
    std::lock_guard lock(impl_->mutex);
    return impl_->ended && impl_->frames.empty();
}

}  // namespace itrain
