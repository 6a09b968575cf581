// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "itrain/protocol.hpp"

namespace itrain {

enum ExitCode : int {
    kExitOk = 0,
    kExitValidation = 1,
    kExitConnection = 2,
    kExitMismatch = 3,
};

struct ServeOptions {
    std::filesystem::path config;
    std::string host = "127.0.0.1";
    std::uint16_t port = 8080;
    std::filesystem::path run_dir = "run";
    std::optional<std::filesystem::path> schedule;
    /// Keep serving this long after training ends so clients can read the final state.
    std::chrono::milliseconds linger{0};
    /// Turn SIGINT/SIGTERM into a logged stop_training command.
    bool handle_signals = false;
    /// Called once listening, with the bound port and a function that requests a stop.
    std::function<void(std::uint16_t port, std::function<void()> request_stop)> on_ready;
};

int cmd_serve(const ServeOptions& options, std::ostream& out, std::ostream& err);

/// Builds command args from k=v pairs. Values are parsed as JSON when they
/// can be (string-typed keys excepted), dotted keys nest, and for
/// update_optimizer bare scalars become {"value": v}. Throws Error(invalid_args).
[[nodiscard]] Json parse_kv_args(std::string_view command, const std::vector<std::string>& pairs);

struct SendOptions {
    std::string url;
    std::string command;
    std::vector<std::string> args;
    bool wait = false;
    bool json = false;
    std::chrono::milliseconds timeout = std::chrono::seconds(60);
};

int cmd_send(const SendOptions& options, std::ostream& out, std::ostream& err);

struct AgentOptions {
    std::string url;
    std::string policy = "rule";
    std::uint64_t cadence = 10;
    std::optional<std::filesystem::path> template_path;
    std::string llm_endpoint;
    std::string llm_model;
    int reconnect_attempts = 5;
};

int cmd_agent(const AgentOptions& options, std::ostream& out, std::ostream& err);

int cmd_replay(const std::filesystem::path& run_dir, bool json, std::ostream& out, std::ostream& err);

struct ScheduleOptions {
    std::string url;
    std::filesystem::path file;
    std::chrono::milliseconds poll{10};
};

int cmd_schedule(const ScheduleOptions& options, std::ostream& out, std::ostream& err);

}  // namespace itrain
