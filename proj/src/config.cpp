// SPDX-License-Identifier: Apache-2.0
#include "itrain/config.hpp"

#include <cmath>
#include <fstream>

#include "itrain/codec.hpp"
#include "itrain/error.hpp"

namespace itrain {

namespace {

using Json = nlohmann::json;

template <typename T>
void read(const Json& j, const char* key, T& out) {
    auto it = j.find(key);
    if (it == j.end()) {
        return;
    }
    try {
        out = it->get<T>();
    } catch (const Json::exception&) {
        throw Error(ErrorCode::invalid_field, std::string("config.") + key + " has the wrong type", key);
    }
}

[[noreturn]] void bad(const char* key, const std::string& why) {
    throw Error(ErrorCode::invalid_field, std::string("config.") + key + ": " + why, key);
}

}  // namespace

RunConfig RunConfig::from_json(const Json& j) {
    if (!j.is_object()) {
        throw Error(ErrorCode::invalid_field, "config must be a JSON object", "config");
    }
    static const char* const kKnown[] = {
        "task", "lambda", "w0", "total_steps", "seed", "lr0", "momentum", "weight_decay", "grad_clip",
        "schedule", "eval_cadence", "hidden_width", "batch_size", "train_size", "val_size", "noise_std",
        "step_delay_ms",
    };
    for (const auto& [key, _] : j.items()) {
        bool known = false;
        for (const char* k : kKnown) {
            known = known || key == k;
        }
        if (!known) {
            throw Error(ErrorCode::invalid_field, "config: unknown key \"" + key + "\"", key);
        }
    }

    RunConfig c;
    std::string task = "mlp_sin";
    read(j, "task", task);
    if (task == "quadratic") {
        c.task = TaskKind::quadratic;
    } else if (task == "mlp_sin") {
        c.task = TaskKind::mlp_sin;
    } else {
        bad("task", "must be \"quadratic\" or \"mlp_sin\"");
    }
    std::string schedule = "none";
    read(j, "schedule", schedule);
    if (schedule == "none") {
        c.schedule = LrSchedule::none;
    } else if (schedule == "linear") {
        c.schedule = LrSchedule::linear;
    } else {
        bad("schedule", "must be \"none\" or \"linear\"");
    }
    read(j, "lambda", c.lambda);
    read(j, "w0", c.w0);
    read(j, "total_steps", c.total_steps);
    read(j, "seed", c.seed);
    read(j, "lr0", c.lr0);
    read(j, "momentum", c.momentum);
    read(j, "weight_decay", c.weight_decay);
    if (auto it = j.find("grad_clip"); it != j.end() && !it->is_null()) {
        if (!it->is_number()) {
            bad("grad_clip", "must be a number or null");
        }
        c.grad_clip = it->get<double>();
    }
    read(j, "eval_cadence", c.eval_cadence);
    read(j, "hidden_width", c.hidden_width);
    read(j, "batch_size", c.batch_size);
    read(j, "train_size", c.train_size);
    read(j, "val_size", c.val_size);
    read(j, "noise_std", c.noise_std);
    read(j, "step_delay_ms", c.step_delay_ms);

    if (!(c.lr0 > 0.0)) bad("lr0", "must be > 0");
    if (!(c.momentum >= 0.0 && c.momentum < 1.0)) bad("momentum", "must be in [0, 1)");
    if (!(c.weight_decay >= 0.0)) bad("weight_decay", "must be >= 0");
    if (c.grad_clip && !(*c.grad_clip > 0.0)) bad("grad_clip", "must be > 0");
    if (!(c.lambda > 0.0) || !std::isfinite(c.lambda)) bad("lambda", "must be > 0");
    if (!std::isfinite(c.w0)) bad("w0", "must be finite");
    if (c.hidden_width == 0) bad("hidden_width", "must be > 0");
    if (c.batch_size == 0) bad("batch_size", "must be > 0");
    if (c.train_size == 0) bad("train_size", "must be > 0");
    if (c.val_size == 0) bad("val_size", "must be > 0");
    if (!(c.noise_std >= 0.0)) bad("noise_std", "must be >= 0");
    if (!(c.step_delay_ms >= 0.0)) bad("step_delay_ms", "must be >= 0");
    return c;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw Error(ErrorCode::io_error, "cannot read config " + path.string(), "config");
    }
    try {
        return from_json(Json::parse(in));
    } catch (const Json::parse_error& e) {
        throw Error(ErrorCode::parse_error, "config is not valid JSON: " + std::string(e.what()), "config");
    }
}

Json RunConfig::to_json() const {
    Json j = {
        {"task", task == TaskKind::quadratic ? "quadratic" : "mlp_sin"},
        {"lambda", lambda},
        {"w0", w0},
        {"total_steps", total_steps},
        {"seed", seed},
        {"lr0", lr0},
        {"momentum", momentum},
        {"weight_decay", weight_decay},
        {"grad_clip", grad_clip ? Json(*grad_clip) : Json(nullptr)},
        {"schedule", schedule == LrSchedule::linear ? "linear" : "none"},
        {"eval_cadence", eval_cadence},
        {"hidden_width", hidden_width},
        {"batch_size", batch_size},
        {"train_size", train_size},
        {"val_size", val_size},
        {"noise_std", noise_std},
        {"step_delay_ms", step_delay_ms},
    };
    return j;
}

std::string RunConfig::identity_hash() const {
    Json j = to_json();
    j.erase("step_delay_ms");
    return sha256_hex(j.dump());
}

}  // namespace itrain
