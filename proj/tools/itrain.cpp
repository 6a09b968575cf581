// SPDX-License-Identifier: Apache-2.0
#include <CLI11.hpp>

#include <iostream>

#include "itrain/cli.hpp"

int main(int argc, char** argv) {
    CLI::App app{"itrain: interactive training server and clients"};
    app.require_subcommand(1);

    itrain::ServeOptions serve;
    std::string run_dir = "run";
    std::string schedule_file;
    double linger_s = 0.0;
    auto* serve_cmd = app.add_subcommand("serve", "Run a training job behind the control server");
    serve_cmd->add_option("--config", serve.config, "Run configuration JSON")->required()->envname("ITRAIN_CONFIG");
    serve_cmd->add_option("--port", serve.port, "Listen port (0 picks one)")->envname("ITRAIN_PORT");
    serve_cmd->add_option("--host", serve.host, "Listen address")->envname("ITRAIN_HOST");
    serve_cmd->add_option("--run-dir", run_dir, "Directory for logs and checkpoints")->envname("ITRAIN_RUN_DIR");
    serve_cmd->add_option("--schedule", schedule_file, "Intervention schedule (JSON lines)")
        ->envname("ITRAIN_SCHEDULE");
    serve_cmd->add_option("--linger", linger_s, "Seconds to keep serving after training ends")
        ->envname("ITRAIN_LINGER");

    itrain::SendOptions send;
    double send_timeout_s = 60.0;
    auto* send_cmd = app.add_subcommand("send", "Submit one command");
    send_cmd->add_option("url", send.url, "Server URL, e.g. http://127.0.0.1:8080")->required()->envname("ITRAIN_URL");
    send_cmd->add_option("command", send.command, "Command name")->required();
    send_cmd->add_option("args", send.args, "key=value arguments");
    send_cmd->add_flag("--wait", send.wait, "Wait for success or failure")->envname("ITRAIN_WAIT");
    send_cmd->add_flag("--json", send.json, "Machine-readable output")->envname("ITRAIN_JSON");
    send_cmd->add_option("--timeout", send_timeout_s, "Seconds to wait with --wait")->envname("ITRAIN_TIMEOUT");

    itrain::AgentOptions agent;
    std::string template_file;
    auto* agent_cmd = app.add_subcommand("agent", "Run the learning-rate agent against a server");
    agent_cmd->add_option("url", agent.url, "Server URL")->required()->envname("ITRAIN_URL");
    agent_cmd->add_option("--policy", agent.policy, "rule or llm")
        ->check(CLI::IsMember({"rule", "llm"}))
        ->envname("ITRAIN_POLICY");
    agent_cmd->add_option("--cadence", agent.cadence, "Decide every N steps")->envname("ITRAIN_CADENCE");
    agent_cmd->add_option("--template", template_file, "Prompt template for the llm policy")
        ->envname("ITRAIN_TEMPLATE");
    agent_cmd->add_option("--llm-endpoint", agent.llm_endpoint, "Chat-completions URL")
        ->envname("ITRAIN_LLM_ENDPOINT");
    agent_cmd->add_option("--llm-model", agent.llm_model, "Model name")->envname("ITRAIN_LLM_MODEL");

    std::string replay_dir;
    bool replay_json = false;
    auto* replay_cmd = app.add_subcommand("replay", "Replay a run directory and diff its metric logs");
    replay_cmd->add_option("run_dir", replay_dir, "Run directory")->required()->envname("ITRAIN_RUN_DIR");
    replay_cmd->add_flag("--json", replay_json, "Machine-readable output")->envname("ITRAIN_JSON");

    itrain::ScheduleOptions schedule;
    auto* schedule_cmd = app.add_subcommand("schedule", "Submit a schedule file's commands to a live server");
    schedule_cmd->add_option("url", schedule.url, "Server URL")->required()->envname("ITRAIN_URL");
    schedule_cmd->add_option("--file", schedule.file, "Schedule (JSON lines)")->required()->envname("ITRAIN_SCHEDULE");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : itrain::kExitValidation;
    }

    if (*serve_cmd) {
        serve.run_dir = run_dir;
        if (!schedule_file.empty()) {
            serve.schedule = schedule_file;
        }
        serve.linger = std::chrono::milliseconds(static_cast<long>(linger_s * 1000));
        serve.handle_signals = true;
        return itrain::cmd_serve(serve, std::cout, std::cerr);
    }
    if (*send_cmd) {
        send.timeout = std::chrono::milliseconds(static_cast<long>(send_timeout_s * 1000));
        return itrain::cmd_send(send, std::cout, std::cerr);
    }
    if (*agent_cmd) {
        if (!template_file.empty()) {
            agent.template_path = template_file;
        }
        return itrain::cmd_agent(agent, std::cout, std::cerr);
    }
    if (*replay_cmd) {
        return itrain::cmd_replay(replay_dir, replay_json, std::cout, std::cerr);
    }
    return itrain::cmd_schedule(schedule, std::cout, std::cerr);
}
