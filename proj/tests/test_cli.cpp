// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <sys/wait.h>

#include <csignal>
#include <future>
#include <sstream>
#include <thread>

#include "itrain/cli.hpp"
#include "itrain/replay.hpp"
#include "support.hpp"

using namespace itrain;

namespace {

struct Captured {
    int code = -1;
    std::string out;
    std::string err;
};

template <typename F>
Captured capture(F&& f) {
    std::ostringstream out;
    std::ostringstream err;
    Captured c;
    c.code = f(out, err);
    c.out = out.str();
    c.err = err.str();
    return c;
}

std::filesystem::path write_config(const support::TempDir& dir, const RunConfig& config,
                                   const std::string& name = "config.json") {
    const auto path = dir / name;
    support::write_file(path, config.to_json().dump());
    return path;
}

Captured send(const std::string& url, const std::string& command, std::vector<std::string> args, bool wait = true,
              bool json = false) {
    SendOptions o;
    o.url = url;
    o.command = command;
    o.args = std::move(args);
    o.wait = wait;
    o.json = json;
    o.timeout = std::chrono::seconds(20);
    return capture([&](std::ostream& out, std::ostream& err) { return cmd_send(o, out, err); });
}

// Runs cmd_serve on this thread and `client` on another once the port is known.
Captured serve_with(const ServeOptions& base, const std::function<void(const std::string& url)>& client) {
    ServeOptions options = base;
    options.port = 0;
    std::thread worker;
    options.on_ready = [&](std::uint16_t port, std::function<void()> request_stop) {
        worker = std::thread([&, port, request_stop] {
            client("http://127.0.0.1:" + std::to_string(port));
            (void)request_stop;
        });
    };
    Captured c = capture([&](std::ostream& out, std::ostream& err) { return cmd_serve(options, out, err); });
    if (worker.joinable()) {
        worker.join();
    }
    return c;
}

}  // namespace

TEST(ParseKvArgs, TypesAndNesting) {
    EXPECT_EQ(parse_kv_args("update_optimizer", {"lr=0.1", "momentum=0.9"}),
              (Json{{"lr", {{"value", 0.1}}}, {"momentum", {{"value", 0.9}}}}));
    EXPECT_EQ(parse_kv_args("update_optimizer", {"grad_clip=null"}), (Json{{"grad_clip", {{"value", nullptr}}}}));
    EXPECT_EQ(parse_kv_args("update_optimizer", {"lr.value=0.5"}), (Json{{"lr", {{"value", 0.5}}}}));
    EXPECT_EQ(parse_kv_args("load_checkpoint", {"uuid=123"}), (Json{{"uuid", "123"}}));
    EXPECT_EQ(parse_kv_args("update_dataset_runtime_hyperparameters", {"weights.train=0", "weights.new=3"}),
              (Json{{"weights", {{"train", 0}, {"new", 3}}}}));
    EXPECT_EQ(parse_kv_args("model_layer_operation", {"layer=h1", "op=reset"}),
              (Json{{"layer", "h1"}, {"op", "reset"}}));
    EXPECT_THROW((void)parse_kv_args("x", {"novalue"}), Error);
    EXPECT_THROW((void)parse_kv_args("x", {"=1"}), Error);
    EXPECT_THROW((void)parse_kv_args("x", {"a..b=1"}), Error);
    EXPECT_THROW((void)parse_kv_args("x", {"a=1", "a.b=2"}), Error);
}

TEST(CmdSend, ValidatesBeforeConnecting) {
    EXPECT_EQ(send("http://127.0.0.1:1", "nonsense", {}).code, kExitValidation);
    EXPECT_EQ(send("http://127.0.0.1:1", "update_optimizer", {"lr=-1"}).code, kExitValidation);
    EXPECT_EQ(send("http://127.0.0.1:1", "update_optimizer", {}).code, kExitValidation);
    EXPECT_EQ(send("not a url", "pause_training", {}).code, kExitValidation);
    EXPECT_EQ(send("http://127.0.0.1:1", "pause_training", {}).code, kExitConnection);
}

TEST(CmdServe, EndToEndWithSendAndReplay) {
    support::TempDir dir;
    RunConfig config = support::small_mlp(300);
    config.step_delay_ms = 2.0;
    ServeOptions options;
    options.config = write_config(dir, config);
    options.run_dir = dir / "run";

    std::vector<Captured> results;
    const Captured served = serve_with(options, [&](const std::string& url) {
        results.push_back(send(url, "update_optimizer", {"lr=0.02"}));
        results.push_back(send(url, "save_checkpoint", {}, true, true));
        results.push_back(send(url, "load_checkpoint", {"uuid=bogus"}));
        results.push_back(send(url, "pause_training", {}));
        results.push_back(send(url, "resume_training", {}));
        results.push_back(send(url, "do_evaluate", {}, false));
    });
    EXPECT_EQ(served.code, kExitOk) << served.err;
    EXPECT_NE(served.out.find("listening on http://127.0.0.1:"), std::string::npos);
    EXPECT_NE(served.out.find("training ended (completed) after 300 updates"), std::string::npos);
    ASSERT_EQ(results.size(), 6u);
    EXPECT_EQ(results[0].code, kExitOk) << results[0].err;
    EXPECT_NE(results[0].out.find("success: lr=0.02"), std::string::npos) << results[0].out;
    EXPECT_EQ(results[1].code, kExitOk);
    const Json saved = Json::parse(results[1].out);
    EXPECT_EQ(saved["status"], "success");
    EXPECT_EQ(results[2].code, kExitValidation);
    EXPECT_NE(results[2].out.find("failed"), std::string::npos);
    EXPECT_EQ(results[3].code, kExitOk);
    EXPECT_EQ(results[4].code, kExitOk);
    EXPECT_EQ(results[5].code, kExitOk);
    EXPECT_NE(results[5].out.find("pending"), std::string::npos);

    EXPECT_TRUE(std::filesystem::exists(dir / "run" / "config.json"));
    EXPECT_TRUE(std::filesystem::exists(dir / "run" / "commands.jsonl"));
    const auto replayed = capture([&](std::ostream& out, std::ostream& err) {
        return cmd_replay(dir / "run", false, out, err);
    });
    EXPECT_EQ(replayed.code, kExitOk) << replayed.out << replayed.err;
    EXPECT_EQ(replayed.out.rfind("identical: ", 0), 0u) << replayed.out;

    const auto again = capture([&](std::ostream& out, std::ostream& err) { return cmd_serve(options, out, err); });
    EXPECT_EQ(again.code, kExitValidation);
}

TEST(CmdServe, RequestStopEndsRun) {
    support::TempDir dir;
    RunConfig config = support::small_mlp(100000);
    config.step_delay_ms = 1.0;
    ServeOptions options;
    options.config = write_config(dir, config);
    options.run_dir = dir / "run";
    options.port = 0;
    std::thread stopper;
    options.on_ready = [&](std::uint16_t, std::function<void()> request_stop) {
        stopper = std::thread([request_stop] {
            std::this_thread::sleep_for(std::chrono::milliseconds(50));
            request_stop();
        });
    };
    const auto c = capture([&](std::ostream& out, std::ostream& err) { return cmd_serve(options, out, err); });
    stopper.join();
    EXPECT_EQ(c.code, kExitOk);
    EXPECT_NE(c.out.find("training ended (stopped)"), std::string::npos);
}

TEST(CmdServe, BadInputs) {
    support::TempDir dir;
    ServeOptions options;
    options.config = dir / "missing.json";
    options.run_dir = dir / "run";
    EXPECT_EQ(capture([&](std::ostream& o, std::ostream& e) { return cmd_serve(options, o, e); }).code,
              kExitValidation);
    support::write_file(dir / "bad.json", R"({"task": "chess"})");
    options.config = dir / "bad.json";
    EXPECT_EQ(capture([&](std::ostream& o, std::ostream& e) { return cmd_serve(options, o, e); }).code,
              kExitValidation);
    options.config = write_config(dir, support::small_mlp(5));
    options.host = "256.0.0.1";
    EXPECT_EQ(capture([&](std::ostream& o, std::ostream& e) { return cmd_serve(options, o, e); }).code,
              kExitConnection);
}

TEST(CmdServe, ScheduleFileDrivesRun) {
    support::TempDir dir;
    ServeOptions options;
    options.config = write_config(dir, support::small_mlp(30));
    options.run_dir = dir / "run";
    support::write_file(dir / "s.jsonl", "# lr bump\n{\"at_step\": 5, \"command\": \"update_optimizer\", "
                                         "\"args\": {\"lr\": {\"value\": 0.3}}}\n");
    options.schedule = dir / "s.jsonl";
    options.port = 0;
    const auto c = capture([&](std::ostream& o, std::ostream& e) { return cmd_serve(options, o, e); });
    EXPECT_EQ(c.code, kExitOk) << c.err;
    const auto log = InterventionLog::read(dir / "run" / "interventions.jsonl");
    ASSERT_EQ(log.entries().size(), 1u);
    EXPECT_EQ(log.entries()[0].applied_at_step, 5u);
}

TEST(CmdReplay, ExitCodes) {
    support::TempDir dir;
    EXPECT_EQ(capture([&](std::ostream& o, std::ostream& e) { return cmd_replay(dir / "none", false, o, e); }).code,
              kExitValidation);

    ServeOptions options;
    options.config = write_config(dir, support::small_mlp(40));
    options.run_dir = dir / "run";
    options.port = 0;
    ASSERT_EQ(capture([&](std::ostream& o, std::ostream& e) { return cmd_serve(options, o, e); }).code, kExitOk);

    const auto empty_log = capture([&](std::ostream& o, std::ostream& e) { return cmd_replay(dir / "run", true, o, e); });
    EXPECT_EQ(empty_log.code, kExitOk);
    EXPECT_EQ(Json::parse(empty_log.out)["identical"], true);

    const auto metrics = dir / "run" / "metrics" / "b0.jsonl";
    std::string text = support::read_file(metrics);
    text.erase(text.rfind('{'));
    support::write_file(metrics, text);
    EXPECT_EQ(capture([&](std::ostream& o, std::ostream& e) { return cmd_replay(dir / "run", false, o, e); }).code,
              kExitMismatch);

    support::write_file(dir / "run" / "config.json", support::small_mlp(41).to_json().dump());
    EXPECT_EQ(capture([&](std::ostream& o, std::ostream& e) { return cmd_replay(dir / "run", false, o, e); }).code,
              kExitMismatch);
}

TEST(CmdAgent, RejectsBadOptions) {
    AgentOptions o;
    o.url = "http://127.0.0.1:1";
    o.cadence = 0;
    EXPECT_EQ(capture([&](std::ostream& out, std::ostream& err) { return cmd_agent(o, out, err); }).code,
              kExitValidation);
    o.cadence = 10;
    o.policy = "oracle";
    EXPECT_EQ(capture([&](std::ostream& out, std::ostream& err) { return cmd_agent(o, out, err); }).code,
              kExitValidation);
    o.policy = "rule";
    o.reconnect_attempts = 0;
    EXPECT_EQ(capture([&](std::ostream& out, std::ostream& err) { return cmd_agent(o, out, err); }).code,
              kExitConnection);
}

TEST(CmdAgent, HalvesLrOnDivergingQuadratic) {
    support::TempDir dir;
    RunConfig config = support::quadratic(200);
    config.step_delay_ms = 1.0;
    ServeOptions options;
    options.config = write_config(dir, config);
    options.run_dir = dir / "run";
    Captured agent;
    const auto served = serve_with(options, [&](const std::string& url) {
        AgentOptions o;
        o.url = url;
        o.cadence = 10;
        agent = capture([&](std::ostream& out, std::ostream& err) { return cmd_agent(o, out, err); });
    });
    EXPECT_EQ(served.code, kExitOk);
    EXPECT_EQ(agent.code, kExitOk) << agent.err;
    EXPECT_NE(agent.out.find("-> halve"), std::string::npos) << agent.out;
    const auto history = support::read_file(dir / "run" / "commands.jsonl");
    EXPECT_NE(history.find("update_optimizer"), std::string::npos);
}

TEST(CmdSchedule, SubmitsAgainstLiveServer) {
    support::TempDir dir;
    RunConfig config = support::small_mlp(200);
    config.step_delay_ms = 1.0;
    ServeOptions options;
    options.config = write_config(dir, config);
    options.run_dir = dir / "run";
    support::write_file(dir / "s.jsonl", R"({"at_step": 20, "command": "do_evaluate", "args": {}})" "\n");
    Captured sched;
    (void)serve_with(options, [&](const std::string& url) {
        ScheduleOptions o;
        o.url = url;
        o.file = dir / "s.jsonl";
        sched = capture([&](std::ostream& out, std::ostream& err) { return cmd_schedule(o, out, err); });
    });
    EXPECT_EQ(sched.code, kExitOk) << sched.err;
    EXPECT_NE(sched.out.find("do_evaluate -> 200"), std::string::npos);
    ScheduleOptions bad;
    bad.url = "http://127.0.0.1:1";
    bad.file = dir / "missing.jsonl";
    EXPECT_EQ(capture([&](std::ostream& out, std::ostream& err) { return cmd_schedule(bad, out, err); }).code,
              kExitValidation);
}

TEST(Binary, ServeSignalSendReplay) {
    support::TempDir dir;
    RunConfig config = support::small_mlp(1000000);
    config.step_delay_ms = 1.0;
    const auto cfg = write_config(dir, config);
    const std::string bin = ITRAIN_BINARY;
    const auto log = dir / "serve.log";
    const auto pidfile = dir / "pid";
    const std::string launch = "'" + bin + "' serve --config '" + cfg.string() + "' --port 0 --run-dir '" +
                               (dir / "run").string() + "' > '" + log.string() + "' 2>&1 & echo $! > '" +
                               pidfile.string() + "'";
    ASSERT_EQ(std::system(launch.c_str()), 0);
    std::string url;
    ASSERT_TRUE(support::eventually([&] {
        const std::string text = support::read_file(log);
        const auto at = text.find("http://");
        if (at == std::string::npos || text.find('\n', at) == std::string::npos) return false;
        url = text.substr(at, text.find('\n', at) - at);
        return true;
    }));
    const pid_t pid = std::stoi(support::read_file(pidfile));

    const std::string send_cmd = "'" + bin + "' send " + url + " update_optimizer lr=0.01 --wait > /dev/null";
    EXPECT_EQ(WEXITSTATUS(std::system(send_cmd.c_str())), 0);
    const std::string bad_cmd = "'" + bin + "' send " + url + " update_optimizer lr=-3 2> /dev/null";
    EXPECT_EQ(WEXITSTATUS(std::system(bad_cmd.c_str())), 1);

    ASSERT_EQ(::kill(pid, SIGTERM), 0);
    EXPECT_TRUE(support::eventually(
        [&] { return support::read_file(log).find("training ended (stopped)") != std::string::npos; }));
    EXPECT_TRUE(support::eventually([&] { return ::kill(pid, 0) != 0; }));

    const std::string replay_cmd = "'" + bin + "' replay '" + (dir / "run").string() + "' > /dev/null";
    EXPECT_EQ(WEXITSTATUS(std::system(replay_cmd.c_str())), 0);
    const std::string help = "'" + bin + "' --help > /dev/null";
    EXPECT_EQ(WEXITSTATUS(std::system(help.c_str())), 0);
    const std::string nothing = "'" + bin + "' > /dev/null 2>&1";
    EXPECT_EQ(WEXITSTATUS(std::system(nothing.c_str())), 1);
}
