// SPDX-License-Identifier: Apache-2.0
#include "itrain/http_server.hpp"

#include <boost/asio/ip/tcp.hpp>
#include <boost/asio/post.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/http.hpp>
#include <boost/beast/websocket.hpp>

#include <future>
#include <map>
#include <mutex>
#include <thread>

namespace itrain {

namespace asio = boost::asio;
namespace beast = boost::beast;
namespace http = beast::http;
namespace websocket = beast::websocket;
using tcp = asio::ip::tcp;

namespace {

std::string percent_decode(std::string_view in) {
    std::string out;
    out.reserve(in.size());
    for (std::size_t i = 0; i < in.size(); ++i) {
        if (in[i] == '+') {
            out.push_back(' ');
        } else if (in[i] == '%' && i + 2 < in.size()) {
            auto hex = [](char c) -> int {
                if (c >= '0' && c <= '9') return c - '0';
                if (c >= 'a' && c <= 'f') return c - 'a' + 10;
                if (c >= 'A' && c <= 'F') return c - 'A' + 10;
                return -1;
            };
            const int hi = hex(in[i + 1]);
            const int lo = hex(in[i + 2]);
            if (hi < 0 || lo < 0) {
                out.push_back(in[i]);
                continue;
            }
            out.push_back(static_cast<char>(hi * 16 + lo));
            i += 2;
        } else {
            out.push_back(in[i]);
        }
    }
    return out;
}

std::map<std::string, std::string> parse_query(std::string_view query) {
    std::map<std::string, std::string> out;
    while (!query.empty()) {
        const auto amp = query.find('&');
        const std::string_view pair = query.substr(0, amp);
        const auto eq = pair.find('=');
        if (!pair.empty()) {
            out[percent_decode(pair.substr(0, eq))] =
                eq == std::string_view::npos ? std::string() : percent_decode(pair.substr(eq + 1));
        }
        if (amp == std::string_view::npos) {
            break;
        }
        query.remove_prefix(amp + 1);
    }
    return out;
}

HttpReply error_reply(unsigned status, std::string message, std::string field = {}) {
    Json body = {{"error", std::move(message)}};
    if (!field.empty()) {
        body["field"] = std::move(field);
    }
    return {status, std::move(body)};
}

unsigned submit_status(const SubmitResult& result) {
    if (result.accepted) {
        return 200;
    }
    switch (*result.error) {
    case ErrorCode::duplicate_uuid:
    case ErrorCode::run_ended: return 409;
    default: return 400;
    }
}

}  // namespace

HttpReply handle_request(ControlServer& server, std::string_view method, std::string_view target,
                         std::string_view body) {
    const auto question = target.find('?');
    const std::string_view path = target.substr(0, question);
    const auto query = parse_query(question == std::string_view::npos ? std::string_view{} : target.substr(question + 1));

    if (path == "/command") {
        if (method != "POST") {
            return error_reply(405, "use POST for /command");
        }
        const SubmitResult result = server.submit_command(body);
        return {submit_status(result), result.to_json()};
    }
    if (method != "GET") {
        if (path == "/commands" || path == "/state" || path == "/branches" || path == "/metrics") {
            return error_reply(405, "use GET for " + std::string(path));
        }
        return error_reply(404, "no such endpoint " + std::string(path));
    }
    if (path == "/commands") {
        return {200, server.history_json()};
    }
    if (path == "/state") {
        return {200, server.snapshot_state().to_json()};
    }
    if (path == "/branches") {
        return {200, server.branches_json()};
    }
    if (path == "/metrics") {
        auto it = query.find("branch_id");
        if (it == query.end() || it->second.empty()) {
            return error_reply(400, "branch_id: query parameter is required", "branch_id");
        }
        auto metrics = server.metrics_json(it->second);
        if (!metrics) {
            return error_reply(404, "unknown branch " + it->second, "branch_id");
        }
        return {200, std::move(*metrics)};
    }
    return error_reply(404, "no such endpoint " + std::string(path));
}

class WsSession : public std::enable_shared_from_this<WsSession> {
public:
    WsSession(tcp::socket socket, ControlServer& server, HttpServer::Impl& owner)
        : ws_(std::move(socket)), server_(server), owner_(owner) {}

    ~WsSession() {
        if (sub_) {
            server_.unsubscribe(sub_);
        }
    }

    void run(http::request<http::string_body> request);

    void force_close() {
        done_ = true;
        beast::error_code ignored;
        beast::get_lowest_layer(ws_).socket().shutdown(tcp::socket::shutdown_both, ignored);
        beast::get_lowest_layer(ws_).socket().close(ignored);
    }

private:
    void on_accept(beast::error_code ec);
    void do_read();
    void pump();
    void finish();

    websocket::stream<beast::tcp_stream> ws_;
    ControlServer& server_;
    HttpServer::Impl& owner_;
    std::shared_ptr<Subscription> sub_;
    beast::flat_buffer in_;
    std::string out_;
    bool writing_ = false;
    bool done_ = false;
};

class HttpServer::Impl {
public:
    Impl(ControlServer& server, HttpOptions options) : server_(server), options_(std::move(options)) {}

    void start() {
        if (thread_.joinable()) {
            return;
        }
        beast::error_code ec;
        const auto address = asio::ip::make_address(options_.host, ec);
        if (ec) {
            throw Error(ErrorCode::io_error, "bad listen address " + options_.host + ": " + ec.message(), "host");
        }
        const tcp::endpoint endpoint{address, options_.port};
        acceptor_.open(endpoint.protocol(), ec);
        if (!ec) acceptor_.set_option(asio::socket_base::reuse_address(true), ec);
        if (!ec) acceptor_.bind(endpoint, ec);
        if (!ec) acceptor_.listen(asio::socket_base::max_listen_connections, ec);
        if (ec) {
            throw Error(ErrorCode::io_error,
                        "cannot listen on " + options_.host + ":" + std::to_string(options_.port) + ": " + ec.message(),
                        "port");
        }
        port_ = acceptor_.local_endpoint().port();
        do_accept();
        thread_ = std::thread([this] { ioc_.run(); });
    }

    void stop() {
        if (!thread_.joinable()) {
            return;
        }
        auto closed = std::make_shared<std::promise<void>>();
        asio::post(ioc_, [this, closed] {
            beast::error_code ignored;
            acceptor_.close(ignored);
            std::vector<std::weak_ptr<WsSession>> sessions;
            {
                std::lock_guard lock(subs_mutex_);
                sessions.swap(sessions_);
            }
            for (auto& weak : sessions) {
                if (auto session = weak.lock()) {
                    session->force_close();
                }
            }
            closed->set_value();
        });
        (void)closed->get_future().wait_for(std::chrono::seconds(2));
        ioc_.stop();
        thread_.join();
        std::vector<std::weak_ptr<Subscription>> subs;
        {
            std::lock_guard lock(subs_mutex_);
            subs.swap(subs_);
        }
        for (auto& weak : subs) {
            if (auto sub = weak.lock()) {
                server_.unsubscribe(sub);
            }
        }
    }

    void track(const std::shared_ptr<Subscription>& sub, const std::shared_ptr<WsSession>& session) {
        std::lock_guard lock(subs_mutex_);
        std::erase_if(subs_, [](const auto& w) { return w.expired(); });
        std::erase_if(sessions_, [](const auto& w) { return w.expired(); });
        subs_.push_back(sub);
        sessions_.push_back(session);
    }

    [[nodiscard]] std::uint16_t port() const noexcept { return port_; }
    [[nodiscard]] const HttpOptions& options() const noexcept { return options_; }

private:
    void do_accept();

    ControlServer& server_;
    HttpOptions options_;
    asio::io_context ioc_{1};
    tcp::acceptor acceptor_{ioc_};
    std::thread thread_;
    std::uint16_t port_ = 0;
    std::mutex subs_mutex_;
    std::vector<std::weak_ptr<Subscription>> subs_;
    std::vector<std::weak_ptr<WsSession>> sessions_;
};

class HttpSession : public std::enable_shared_from_this<HttpSession> {
public:
    HttpSession(tcp::socket socket, ControlServer& server, HttpServer::Impl& owner)
        : stream_(std::move(socket)), server_(server), owner_(owner) {}

    void run() { do_read(); }

private:
    void do_read() {
        request_ = {};
        stream_.expires_after(std::chrono::seconds(60));
        http::async_read(stream_, buffer_, request_,
                         [self = shared_from_this()](beast::error_code ec, std::size_t) { self->on_read(ec); });
    }

    void on_read(beast::error_code ec) {
        if (ec) {
            beast::error_code ignored;
            stream_.socket().shutdown(tcp::socket::shutdown_send, ignored);
            return;
        }
        if (websocket::is_upgrade(request_)) {
            const std::string_view target(request_.target().data(), request_.target().size());
            if (target.substr(0, target.find('?')) == "/ws") {
                stream_.expires_never();
                std::make_shared<WsSession>(stream_.release_socket(), server_, owner_)->run(std::move(request_));
                return;
            }
        }
        respond();
    }

    void respond() {
        auto response = std::make_shared<http::response<http::string_body>>();
        response->version(request_.version());
        response->keep_alive(request_.keep_alive());
        response->set(http::field::content_type, "application/json; charset=utf-8");
        response->set(http::field::access_control_allow_origin, "*");
        if (request_.method() == http::verb::options) {
            response->result(http::status::no_content);
            response->set(http::field::access_control_allow_methods, "GET, POST, OPTIONS");
            response->set(http::field::access_control_allow_headers, "Content-Type");
        } else {
            HttpReply reply;
            try {
                const auto method = request_.method_string();
                const auto target = request_.target();
                reply = handle_request(server_, std::string_view(method.data(), method.size()),
                                       std::string_view(target.data(), target.size()), request_.body());
            } catch (const std::exception& e) {
                reply = {500, Json{{"error", e.what()}}};
            }
            response->result(reply.status);
            response->body() = reply.body.dump();
        }
        response->prepare_payload();
        http::async_write(stream_, *response,
                          [self = shared_from_this(), response](beast::error_code ec, std::size_t) {
                              if (ec || response->need_eof()) {
                                  beast::error_code ignored;
                                  self->stream_.socket().shutdown(tcp::socket::shutdown_send, ignored);
                                  return;
                              }
                              self->do_read();
                          });
    }

    beast::tcp_stream stream_;
    ControlServer& server_;
    HttpServer::Impl& owner_;
    beast::flat_buffer buffer_;
    http::request<http::string_body> request_;
};

void HttpServer::Impl::do_accept() {
    acceptor_.async_accept(ioc_, [this](beast::error_code ec, tcp::socket socket) {
        if (ec == asio::error::operation_aborted) {
            return;
        }
        if (!ec) {
            std::make_shared<HttpSession>(std::move(socket), server_, *this)->run();
        }
        do_accept();
    });
}

void WsSession::run(http::request<http::string_body> request) {
    ws_.set_option(websocket::stream_base::timeout::suggested(beast::role_type::server));
    ws_.async_accept(request, [self = shared_from_this()](beast::error_code ec) { self->on_accept(ec); });
}

void WsSession::on_accept(beast::error_code ec) {
    if (ec) {
        return;
    }
    sub_ = server_.subscribe(owner_.options().subscriber_capacity, true);
    owner_.track(sub_, shared_from_this());
    std::weak_ptr<WsSession> weak = weak_from_this();
    auto executor = ws_.get_executor();
    sub_->set_notify([weak, executor] {
        if (auto self = weak.lock()) {
            asio::post(executor, [self] { self->pump(); });
        }
    });
    ws_.text(true);
    pump();
    do_read();
}

void WsSession::do_read() {
    ws_.async_read(in_, [self = shared_from_this()](beast::error_code ec, std::size_t) {
        if (ec) {
            self->finish();
            return;
        }
        self->in_.consume(self->in_.size());
        self->do_read();
    });
}

void WsSession::pump() {
    if (writing_ || done_) {
        return;
    }
    auto frame = sub_->pop(std::chrono::milliseconds(0));
    if (!frame) {
        if (sub_->closed()) {
            done_ = true;
            ws_.async_close(websocket::close_code::policy_error, [self = shared_from_this()](beast::error_code) {});
        }
        return;
    }
    writing_ = true;
    out_ = std::move(*frame);
    ws_.async_write(asio::buffer(out_), [self = shared_from_this()](beast::error_code ec, std::size_t) {
        self->writing_ = false;
        if (ec) {
            self->finish();
            return;
        }
        self->pump();
    });
}

void WsSession::finish() {
    done_ = true;
    if (sub_) {
        server_.unsubscribe(sub_);
    }
}

HttpServer::HttpServer(ControlServer& server, HttpOptions options)
    : impl_(std::make_unique<Impl>(server, std::move(options))) {}

HttpServer::~HttpServer() { stop(); }

void HttpServer::start() { impl_->start(); }

void HttpServer::stop() { impl_->stop(); }

std::uint16_t HttpServer::port() const noexcept { return impl_->port(); }

}  // namespace itrain
