// SPDX-License-Identifier: Apache-2.0
// Runs every primary acceptance criterion once and prints one PASS/FAIL line
// per criterion. Exits nonzero if any criterion fails.
#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <random>
#include <set>
#include <sstream>

#include "../checks.hpp"
#include "../scenarios.hpp"
#include "../support.hpp"
#include "itrain/cli.hpp"
#include "itrain/client.hpp"
#include "itrain/codec.hpp"
#include "itrain/http_server.hpp"

using namespace itrain;
namespace sup = itrain::support;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

struct Criterion {
    std::string name;
    double limit_s;
    std::function<Outcome()> run;
};

std::string fmt(const char* format, double a, double b = 0.0, double c = 0.0) {
    char buf[256];
    std::snprintf(buf, sizeof buf, format, a, b, c);
    return buf;
}

// ---------------------------------------------------------------- protocol

Outcome protocol_fidelity() {
    const std::vector<std::pair<std::string, std::string>> examples = {
        {R"({"command": "update_optimizer", "args": "{\"lr\": {\"value\": 1e-5}}", "time": 1717000000.25, )"
         R"("uuid": "5b0f6a0e-3f1c-4e4a-9d55-3f3b8d1f2a10", "status": "requested"})",
         R"({"lr": {"value": 1e-5}})"},
        {R"({"command": "load_checkpoint", "args": "{\"uuid\": \"0c9e2f7a-1111-4222-8333-944455556666\"}", )"
         R"("time": 1717000001.5, "uuid": "a1d3c1f4-0000-4000-8000-000000000001", "status": "requested"})",
         R"({"uuid": "0c9e2f7a-1111-4222-8333-944455556666"})"},
    };
    for (const auto& [wire, args] : examples) {
        const Json original = Json::parse(wire);
        const CommandEnvelope e = decode_command(wire);
        const Json again = Json::parse(encode_command(e));
        if (again.size() != 5 || again != original || !again["args"].is_string() || e.args != args) {
            return {false, "example did not survive re-encoding: " + wire};
        }
    }

    std::mt19937_64 gen(7);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const std::vector<std::string> alphabet = {"a", "Z", "0", " ", "-", "\"", "\\", "/", "{", "]", ":", ",",
                                               "\t", "\n", "\xc3\xa9", "\xe2\x82\xac"};
    auto text = [&](std::size_t max_len) {
        std::string s;
        for (std::size_t n = 1 + gen() % max_len; n > 0; --n) s += alphabet[gen() % alphabet.size()];
        return s;
    };
    for (int i = 0; i < 1000; ++i) {
        CommandEnvelope e;
        e.command = std::string(to_string(kAllCommandKinds[gen() % kAllCommandKinds.size()]));
        Json args = Json::object();
        switch (e.kind().value()) {
        case CommandKind::update_optimizer:
            args["lr"] = {{"value", (unit(gen) + 1e-3) * std::pow(10.0, -double(gen() % 12))}};
            if (gen() % 2) args["momentum"] = {{"value", unit(gen) * 0.9}};
            break;
        case CommandKind::load_checkpoint: args["uuid"] = text(36); break;
        case CommandKind::model_layer_operation: args = {{"layer", text(6)}, {"op", "reset"}}; break;
        case CommandKind::model_layer_parameter_update:
            args = {{"layer", text(6)}, {"param", "dropout_rate"}, {"value", unit(gen) * 0.9}};
            break;
        case CommandKind::update_dataset: args = {{"source", text(8)}, {"data_path", text(24)}}; break;
        case CommandKind::update_dataset_runtime_hyperparameters:
            args = {{"weights", {{text(6), unit(gen) * 4}}}};
            break;
        default: break;
        }
        e.args = args.dump(gen() % 2 ? -1 : 2);
        e.time = 1.7e9 + unit(gen) * 1e8;
        e.uuid = text(40);
        e.status = kAllStatuses[gen() % kAllStatuses.size()];
        const std::string wire = encode_command(e);
        const CommandEnvelope back = decode_command(wire);
        if (!(back == e) || encode_command(back) != wire) {
            return {false, "fuzz case " + std::to_string(i) + " changed: " + wire};
        }
    }
    return {true, "2 examples, 1000 fuzz cases"};
}

// --------------------------------------------------------------- lifecycle

Outcome lifecycle_soundness() {
    using S = CommandStatus;
    const std::set<std::pair<S, S>> dag = {
        {S::requested, S::pending}, {S::pending, S::running},   {S::pending, S::failed},
        {S::running, S::success},   {S::running, S::failed},    {S::running, S::completed},
        {S::completed, S::success}, {S::completed, S::failed},
    };
    for (S from : kAllStatuses) {
        for (S to : kAllStatuses) {
            if (validate_transition(from, to) != dag.contains({from, to})) {
                return {false, std::string("transition table wrong at ") + std::string(to_string(from)) + " -> " +
                                   std::string(to_string(to))};
            }
        }
    }

    RunConfig config = sup::quadratic(100000, 1e-4);
    config.step_delay_ms = 1.0;
    ControlServer server;
    HttpServer http(server, HttpOptions{"127.0.0.1", 0, std::nullopt});
    http.start();
    const std::string host = "127.0.0.1:" + std::to_string(http.port());
    sup::TempDir dir;
    TrainerOptions options;
    options.run_dir = dir.path();
    Trainer trainer(config, server, server, options);
    std::thread training([&] { (void)trainer.run(); });

    std::vector<std::string> seen;
    {
        EventStream stream("ws://" + host + "/ws");
        ControlClient client("http://" + host);
        const auto env = make_envelope("update_optimizer", Json{{"lr", {{"value", 5e-5}}}});
        const auto posted = client.post_command(env);
        const auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(4);
        while (posted.status == 200 && seen.size() < 4 && std::chrono::steady_clock::now() < deadline) {
            const auto event = stream.next(std::chrono::milliseconds(500));
            if (event && event->type == EventType::command_status && event->payload["uuid"] == env.uuid) {
                seen.push_back(event->payload["status"]);
            }
        }
        (void)server.submit(make_envelope("stop_training", Json::object()));
    }
    training.join();
    http.stop();
    const std::vector<std::string> expected = {"requested", "pending", "running", "success"};
    if (seen != expected) {
        std::string got;
        for (const auto& s : seen) got += s + " ";
        return {false, "stream showed: " + got};
    }
    return {true, "36 transitions, ws stream requested->pending->running->success"};
}

// ------------------------------------------------------------------ replay

struct HookedRun {
    std::vector<TrainingEvent> events;
    Json branches;  // GET /branches body at the end of the run
    TrainResult result;
};

// Runs `config` recorded into run_dir with `hook` called at every boundary.
HookedRun hooked_run(const RunConfig& config, const std::filesystem::path& run_dir,
                     const std::function<void(ControlServer&, const TrainerState&)>& hook) {
    sup::write_config(config, run_dir);
    ServerOptions so;
    so.run_dir = run_dir;
    ControlServer server(so);
    HookedRun out;
    std::mutex mutex;
    server.add_listener([&](const TrainingEvent& e) {
        std::lock_guard lock(mutex);
        out.events.push_back(e);
    });
    TrainerOptions to;
    to.run_dir = run_dir;
    to.pause_poll = std::chrono::milliseconds(1);
    Trainer trainer(config, server, server, to);
    trainer.set_boundary_hook([&](const TrainerState& s) { hook(server, s); });
    out.result = trainer.run();
    const auto reply = handle_request(server, "GET", "/branches", "");
    out.branches = reply.status == 200 ? reply.body : Json();
    return out;
}

Outcome replay_determinism() {
    sup::TempDir dir;
    const auto run_dir = dir / "run";
    std::string save_uuid;
    std::set<std::uint64_t> fired;
    auto once = [&](std::uint64_t at, const TrainerState& s) {
        return s.branch_id == "b0" && s.step == at && fired.insert(at).second;
    };
    const auto run = hooked_run(sup::small_mlp(500), run_dir, [&](ControlServer& server, const TrainerState& s) {
        if (once(50, s)) (void)server.submit(make_envelope("update_optimizer", Json{{"lr", {{"value", 0.02}}}}));
        if (once(120, s)) {
            (void)server.submit(make_envelope("pause_training", Json::object()));
        } else if (s.step == 120 && s.paused && fired.insert(121).second) {
            (void)server.submit(make_envelope("resume_training", Json::object()));
        }
        if (once(200, s)) {
            auto env = make_envelope("save_checkpoint", Json::object());
            save_uuid = env.uuid;
            (void)server.submit(env);
        }
        if (once(300, s)) (void)server.submit(make_envelope("load_checkpoint", Json{{"uuid", save_uuid}}));
    });
    std::size_t successes = 0;
    for (const auto& e : run.events) {
        successes += e.type == EventType::command_status && e.payload["status"] == "success" ? 1 : 0;
    }
    if (successes != 5 || run.result.state.branch_id != "b0.1") {
        return {false, "interventions did not all apply (" + std::to_string(successes) + " succeeded)"};
    }
    const auto report = verify_run(run_dir);
    std::ostringstream out;
    std::ostringstream err;
    const int code = cmd_replay(run_dir, false, out, err);
    if (!report.identical || code != kExitOk) {
        return {false, "replay differed, cmd_replay exit " + std::to_string(code) + ": " + out.str()};
    }
    return {true, std::to_string(report.lines) + " metric lines over " + std::to_string(report.branches) +
                      " branches identical, cmd_replay exit 0"};
}

// --------------------------------------------------------------- quadratic

Outcome quadratic_analog() {
    sup::TempDir dir;
    const RunConfig config = sup::quadratic(200);
    const auto plain = sup::quadratic_run(config, std::nullopt, dir / "static");
    const auto agent = sup::quadratic_run(config, 10, dir / "agent");

    // Scalar recurrence w <- (1 - lr*lambda) w, with the agent's single halving after update 10.
    double w_static = 1.0;
    double w_agent = 1.0;
    for (int i = 1; i <= 200; ++i) {
        w_static -= 5e-3 * (500.0 * w_static);
        w_agent -= (i <= 10 ? 5e-3 : 2.5e-3) * (500.0 * w_agent);
    }
    const double oracle_static = 250.0 * w_static * w_static;
    const double oracle_agent = 250.0 * w_agent * w_agent;

    if (!(plain.final_loss > plain.initial_loss)) {
        return {false, fmt("static run did not diverge: %.3e <= %.3e", plain.final_loss, plain.initial_loss)};
    }
    if (!(agent.final_loss < 1e-6 && agent.final_lr < 4e-3)) {
        return {false, fmt("agent run: loss %.3e lr %.3e", agent.final_loss, agent.final_lr)};
    }
    std::size_t last_change = 0;
    for (std::size_t i = 1; i < agent.lrs.size(); ++i) {
        if (agent.lrs[i] > agent.lrs[i - 1]) return {false, "agent raised lr"};
        if (agent.lrs[i] != agent.lrs[i - 1]) last_change = i;
    }
    for (std::size_t i = last_change + 1; i < agent.losses.size(); ++i) {
        if (!(agent.losses[i] < agent.losses[i - 1])) return {false, "loss not monotone after last lr change"};
    }
    const double rel_static = std::abs(plain.final_loss / oracle_static - 1.0);
    const double rel_agent = std::abs(agent.final_loss / oracle_agent - 1.0);
    if (rel_static > 1e-12 || rel_agent > 1e-12) {
        return {false, fmt("recurrence mismatch: static %.2e agent %.2e", rel_static, rel_agent)};
    }
    return {true, fmt("static %.3e > 250; agent loss %.3e, lr %.4g", plain.final_loss, agent.final_loss,
                      agent.final_lr)};
}

// --------------------------------------------------------------------- mlp

Outcome mlp_analog() {
    const std::filesystem::path root = ITRAIN_SOURCE_DIR;
    const RunConfig base = RunConfig::load(root / "configs" / "mlp_baseline.json");
    const auto schedule = load_schedule(root / "schedules" / "mlp_interactive.jsonl");
    if (base.total_steps != 2000 || base.seed != 0 || base.lr0 != 1e-5) {
        return {false, "baseline config drifted"};
    }
    sup::TempDir dir;
    const double baseline = sup::mlp_final_val(base, {}, dir / "baseline");
    const double interactive = sup::mlp_final_val(base, schedule, dir / "interactive");
    const double golden_baseline = 0.468613712602679;
    const double golden_interactive = 0.008410364766457765;
    const bool golden = std::abs(baseline / golden_baseline - 1.0) <= 1e-9 &&
                        std::abs(interactive / golden_interactive - 1.0) <= 1e-9;
    const bool ratio = interactive <= 0.5 * baseline;
    return {golden && ratio, fmt("baseline %.6g, interactive %.6g, ratio %.4f", baseline, interactive,
                                 interactive / baseline) +
                                 (golden ? "" : " (golden mismatch)")};
}

// ------------------------------------------------------------------ branch

Outcome branch_isolation() {
    sup::TempDir dir;
    const auto run_dir = dir / "run";
    const auto parent_log = run_dir / "metrics" / "b0.jsonl";
    std::string save_uuid;
    std::string parent_hash;
    bool loaded = false;
    bool lr_set = false;
    const auto run = hooked_run(sup::small_mlp(300), run_dir, [&](ControlServer& server, const TrainerState& s) {
        if (s.branch_id == "b0" && s.step == 100 && save_uuid.empty()) {
            auto env = make_envelope("save_checkpoint", Json::object());
            save_uuid = env.uuid;
            (void)server.submit(env);
        }
        if (s.branch_id == "b0" && s.step == 200 && !loaded) {
            loaded = true;
            parent_hash = sha256_hex(sup::read_file(parent_log));
            (void)server.submit(make_envelope("load_checkpoint", Json{{"uuid", save_uuid}}));
        }
        if (s.branch_id == "b0.1" && !lr_set) {
            lr_set = true;
            (void)server.submit(make_envelope("update_optimizer", Json{{"lr", {{"value", 0.01}}}}));
        }
    });
    const std::string after = sha256_hex(sup::read_file(parent_log));
    const auto child_metrics = sup::of_type(run.events, EventType::metric, "b0.1");
    if (parent_hash.empty() || parent_hash != after) {
        return {false, "parent metric log changed after the fork"};
    }
    if (child_metrics.size() != 200 || child_metrics.back().payload["lr"] != 0.01) {
        return {false, "child trained " + std::to_string(child_metrics.size()) + " steps, final lr " +
                           (child_metrics.empty() ? "-" : child_metrics.back().payload["lr"].dump())};
    }

    const Json& branches = run.branches;
    int roots = 0;
    int children = 0;
    bool fork_ok = false;
    for (const auto& node : branches) {
        if (node["parent_branch_id"].is_null()) {
            ++roots;
        } else {
            ++children;
            fork_ok = node["parent_branch_id"] == "b0" && node["fork_step"] == 100;
        }
    }
    if (roots != 1 || children != 1 || !fork_ok) {
        return {false, "/branches reported " + branches.dump()};
    }
    return {true, "parent hash " + after.substr(0, 12) + " unchanged; child b0.1 forked at 100, 200 steps"};
}

// ---------------------------------------------------------------- clipping

Outcome clipping_property() {
    const double worst = sup::clip_property_worst(10000, 11);
    sup::TempDir dir;
    RunConfig c = sup::small_mlp(300);
    c.grad_clip = 0.05;
    c.lr0 = 0.2;
    const auto metrics = sup::of_type(sup::run_scripted(c, {}, dir.path()).events, EventType::metric);
    double max_effective = 0.0;
    int clipped = 0;
    for (const auto& m : metrics) {
        max_effective = std::max(max_effective, m.payload["effective_grad_norm"].get<double>());
        clipped += m.payload["grad_norm"].get<double>() > 0.05 ? 1 : 0;
    }
    const bool pass = worst <= 1e-12 && max_effective <= 0.05 && clipped > 0 && metrics.size() == 300;
    return {pass, fmt("worst relative error %.2e; trajectory max effective norm %.17g (%g steps clipped)", worst,
                      max_effective, clipped)};
}

// --------------------------------------------------------------- gradients

Outcome gradient_correctness() {
    const double worst = sup::finite_difference_worst(100, 5);
    return {worst <= 1e-6, fmt("worst relative error %.2e over 100 configurations", worst)};
}

// ----------------------------------------------------------------- dataset

Outcome dataset_intervention() {
    sup::TempDir dir;
    const auto audit = sup::dataset_intervention(dir.path());
    if (!audit.commands_succeeded || audit.after_examples == 0 || audit.after_new != audit.after_examples) {
        return {false, "after switch: " + std::to_string(audit.after_new) + "/" + std::to_string(audit.after_examples) +
                           " new-source examples"};
    }
    InteractiveDataset ds;
    std::vector<Sample> samples(16);
    for (std::size_t i = 0; i < samples.size(); ++i) samples[i] = {double(i), -double(i)};
    ds.update_data("a", samples);
    ds.update_data("b", samples);
    ds.set_mixture_weights({{"a", 3.0}, {"b", 1.0}});
    const double fraction = sup::mixture_fraction(ds, "a", 100000, 21);
    return {std::abs(fraction - 0.75) <= 0.01,
            fmt("%g/%g new-source examples after step %g", double(audit.after_new), double(audit.after_examples),
                double(audit.switch_step)) +
                fmt("; weights {3,1} gave %.4f", fraction)};
}

// ------------------------------------------------------------------- pause

Outcome pause_conservation() {
    std::size_t pauses = 0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        sup::TempDir dir;
        RunConfig c = sup::small_mlp(150, seed);
        c.step_delay_ms = 0.1;
        const auto r = sup::pause_fuzz_threaded(c, 1000 + seed, dir.path());
        pauses += r.pauses;
        if (r.updates != 150 || r.metrics != 150 || !r.consecutive) {
            return {false, "schedule " + std::to_string(seed) + " made " + std::to_string(r.updates) + " updates"};
        }
    }
    return {true, "20 schedules, 150 updates each, " + std::to_string(pauses) + " pauses injected"};
}

}  // namespace

int main() {
    const std::vector<Criterion> criteria = {
        {"protocol fidelity", 5, protocol_fidelity},
        {"lifecycle soundness", 5, lifecycle_soundness},
        {"replay determinism", 30, replay_determinism},
        {"quadratic stability analog", 10, quadratic_analog},
        {"mlp interactive schedule analog", 60, mlp_analog},
        {"branch isolation", 30, branch_isolation},
        {"gradient clipping property", 10, clipping_property},
        {"gradient correctness", 30, gradient_correctness},
        {"dataset intervention", 30, dataset_intervention},
        {"pause conservation", 60, pause_conservation},
    };
    int failures = 0;
    for (const auto& c : criteria) {
        const auto start = std::chrono::steady_clock::now();
        Outcome outcome;
        try {
            outcome = c.run();
        } catch (const std::exception& e) {
            outcome = {false, std::string("threw: ") + e.what()};
        }
        const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        if (seconds > c.limit_s) {
            outcome.pass = false;
            outcome.detail += fmt(" (over the %gs budget)", c.limit_s);
        }
        failures += outcome.pass ? 0 : 1;
        std::cout << (outcome.pass ? "PASS " : "FAIL ") << c.name << " [" << fmt("%.2fs", seconds) << "] "
                  << outcome.detail << '\n'
                  << std::flush;
    }
    std::cout << (criteria.size() - failures) << "/" << criteria.size() << " criteria passed\n";
    return failures == 0 ? 0 : 1;
}
