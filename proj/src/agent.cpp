// SPDX-License-Identifier: Apache-2.0
#include "itrain/agent.hpp"

#include <httplib.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <regex>
#include <sstream>

#include "itrain/client.hpp"
#include "itrain/codec.hpp"

namespace itrain {

std::string_view to_string(Action action) noexcept {
    switch (action) {
    case Action::double_lr: return "double";
    case Action::halve: return "halve";
    case Action::keep: return "keep";
    }
    return "keep";
}

const std::string& default_prompt_template() {
    static const std::string text = R"(You are supervising a neural network training run and may adjust its learning rate.

Current step: {{current_step}}
Current learning rate: {{current_lr}}

Learning rate so far, as [step, lr] pairs:
{{lr_history}}

Training loss, as [step, loss] pairs:
{{train_loss_history}}

Validation loss, as [step, loss] pairs:
{{valid_loss_history}}

Pick exactly one action for the learning rate:
- "double": loss is falling steadily but slowly.
- "halve": loss is rising, oscillating, or exploding.
- "keep": anything else.

Reply with one JSON object and nothing else, e.g.
{"action": "keep", "explanation": "one or two sentences"}
)";
    return text;
}

namespace {

constexpr std::string_view kPlaceholders[] = {
    "{{current_step}}", "{{current_lr}}", "{{lr_history}}", "{{train_loss_history}}", "{{valid_loss_history}}",
};

std::string render_history(const std::vector<std::pair<std::uint64_t, double>>& history) {
    std::string out = "[";
    for (std::size_t i = 0; i < history.size(); ++i) {
        if (i > 0) {
            out += ", ";
        }
        out += "[" + std::to_string(history[i].first) + ", " + format_double(history[i].second) + "]";
    }
    return out + "]";
}

void replace_all(std::string& text, std::string_view from, const std::string& to) {
    std::size_t pos = 0;
    while ((pos = text.find(from, pos)) != std::string::npos) {
        text.replace(pos, from.size(), to);
        pos += to.size();
    }
}

std::string lowercase(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return s;
}

std::string first_words(const std::string& text, std::size_t limit) {
    std::istringstream in(text);
    std::string word;
    std::string out;
    std::size_t count = 0;
    while (count < limit && in >> word) {
        if (!out.empty()) {
            out += ' ';
        }
        out += word;
        ++count;
    }
    return out;
}

// End of the balanced {...} starting at `open`, honouring JSON strings.
std::size_t matching_brace(std::string_view text, std::size_t open) {
    int depth = 0;
    bool in_string = false;
    for (std::size_t i = open; i < text.size(); ++i) {
        const char c = text[i];
        if (in_string) {
            if (c == '\\') {
                ++i;
            } else if (c == '"') {
                in_string = false;
            }
        } else if (c == '"') {
            in_string = true;
        } else if (c == '{') {
            ++depth;
        } else if (c == '}' && --depth == 0) {
            return i;
        }
    }
    return std::string_view::npos;
}

}  // namespace

std::string render_prompt(const AgentObservation& obs, const std::string& template_text) {
    for (auto placeholder : kPlaceholders) {
        if (template_text.find(placeholder) == std::string::npos) {
            throw Error(ErrorCode::invalid_value, "prompt template lacks " + std::string(placeholder), "template");
        }
    }
    std::string out = template_text;
    replace_all(out, "{{current_step}}", std::to_string(obs.current_step));
    replace_all(out, "{{current_lr}}", format_double(obs.current_lr));
    replace_all(out, "{{lr_history}}", render_history(obs.lr_history));
    replace_all(out, "{{train_loss_history}}", render_history(obs.train_loss_history));
    replace_all(out, "{{valid_loss_history}}", render_history(obs.valid_loss_history));
    static const std::regex leftover(R"(\{\{[^{}]*\}\})");
    std::smatch match;
    if (std::regex_search(out, match, leftover)) {
        throw Error(ErrorCode::invalid_value, "prompt template has unknown placeholder " + match.str(), "template");
    }
    return out;
}

AgentDecision decide_rule(const AgentObservation& obs) {
    const auto& history = obs.train_loss_history;
    if (history.size() < 2) {
        return {Action::keep, "not enough loss history"};
    }
    const std::size_t n = std::min(kRuleWindow, history.size());
    std::vector<double> window;
    for (std::size_t i = history.size() - n; i < history.size(); ++i) {
        window.push_back(history[i].second);
    }
    const double first = window.front();
    const double last = window.back();
    if (last > first) {
        return {Action::halve, "loss rose over the last " + std::to_string(n) + " steps"};
    }

    std::vector<double> diffs;
    for (std::size_t i = 1; i < n; ++i) {
        diffs.push_back(window[i] - window[i - 1]);
    }
    int sign_changes = 0;
    double mean_abs = 0.0;
    for (std::size_t i = 0; i < diffs.size(); ++i) {
        mean_abs += std::abs(diffs[i]);
        if (i > 0 && ((diffs[i] > 0 && diffs[i - 1] < 0) || (diffs[i] < 0 && diffs[i - 1] > 0))) {
            ++sign_changes;
        }
    }
    mean_abs /= static_cast<double>(diffs.size());
    double mean = 0.0;
    for (double v : window) {
        mean += v;
    }
    mean /= static_cast<double>(n);
    if (sign_changes >= 2 && mean_abs > 0.1 * mean) {
        return {Action::halve, "loss is oscillating"};
    }

    const bool decreasing = std::all_of(diffs.begin(), diffs.end(), [](double d) { return d < 0; });
    if (decreasing && first > 0 && (first - last) / first < 0.01) {
        return {Action::double_lr, "loss is decreasing slowly"};
    }
    return {Action::keep, "loss is behaving"};
}

AgentDecision parse_decision(std::string_view text) {
    for (std::size_t open = text.find('{'); open != std::string_view::npos; open = text.find('{', open + 1)) {
        const std::size_t close = matching_brace(text, open);
        if (close == std::string_view::npos) {
            break;
        }
        const Json j = Json::parse(text.substr(open, close - open + 1), nullptr, false);
        if (j.is_discarded() || !j.is_object() || !j.contains("action")) {
            continue;
        }
        if (!j["action"].is_string()) {
            throw Error(ErrorCode::parse_error, "decision action is not a string", "action");
        }
        const std::string action = lowercase(j["action"].get<std::string>());
        AgentDecision decision;
        if (action == "double") {
            decision.action = Action::double_lr;
        } else if (action == "halve") {
            decision.action = Action::halve;
        } else if (action == "keep") {
            decision.action = Action::keep;
        } else {
            throw Error(ErrorCode::parse_error, "unknown decision action \"" + j["action"].get<std::string>() + "\"",
                        "action");
        }
        if (j.contains("explanation") && j["explanation"].is_string()) {
            decision.explanation = first_words(j["explanation"].get<std::string>(), 100);
        }
        return decision;
    }
    throw Error(ErrorCode::parse_error, "no JSON object with an \"action\" field in the reply");
}

std::optional<double> decided_lr(const AgentDecision& decision, double current_lr) {
    switch (decision.action) {
    case Action::double_lr: return current_lr * 2.0;
    case Action::halve: return current_lr / 2.0;
    case Action::keep: return std::nullopt;
    }
    return std::nullopt;
}

std::optional<CommandEnvelope> act(const AgentDecision& decision, double current_lr,
                                   const std::function<void(const CommandEnvelope&)>& submit) {
    if (!(current_lr > 0.0)) {
        throw Error(ErrorCode::invalid_value, "current lr must be positive", "lr");
    }
    const auto lr = decided_lr(decision, current_lr);
    if (!lr) {
        return std::nullopt;
    }
    CommandEnvelope envelope = make_envelope("update_optimizer", Json{{"lr", {{"value", *lr}}}});
    submit(envelope);
    return envelope;
}

LlmPolicy::LlmPolicy(LlmOptions options) : options_(std::move(options)) {
    (void)parse_url(options_.endpoint);
    AgentObservation probe;
    (void)render_prompt(probe, options_.prompt_template);
}

AgentDecision LlmPolicy::decide(const AgentObservation& obs) {
    const UrlParts url = parse_url(options_.endpoint);
    const std::string base = url.scheme + "://" + url.host + ":" + std::to_string(url.port);
    httplib::Client client(base);
    client.set_connection_timeout(options_.timeout);
    client.set_read_timeout(options_.timeout);
    httplib::Headers headers;
    if (const char* key = std::getenv(options_.api_key_env.c_str()); key != nullptr && *key != '\0') {
        headers.emplace("Authorization", std::string("Bearer ") + key);
    }
    const Json request = {
        {"model", options_.model},
        {"messages", Json::array({{{"role", "user"}, {"content", render_prompt(obs, options_.prompt_template)}}})},
    };
    last_reply_.clear();
    const auto result = client.Post(url.path, headers, request.dump(), "application/json");
    if (!result) {
        return {Action::keep, "llm request failed: " + httplib::to_string(result.error())};
    }
    if (result->status != 200) {
        return {Action::keep, "llm returned HTTP " + std::to_string(result->status)};
    }
    const Json reply = Json::parse(result->body, nullptr, false);
    try {
        last_reply_ = reply.at("choices").at(0).at("message").at("content").get<std::string>();
    } catch (const Json::exception&) {
        return {Action::keep, "llm reply has no choices[0].message.content"};
    }
    try {
        return parse_decision(last_reply_);
    } catch (const Error& e) {
        return {Action::keep, std::string("unparsable llm decision: ") + e.what()};
    }
}

AgentLoop::AgentLoop(DecisionPolicy& policy, std::uint64_t cadence, Submit submit)
    : policy_(policy), cadence_(std::max<std::uint64_t>(cadence, 1)), submit_(std::move(submit)) {}

void AgentLoop::observe(const TrainingEvent& event) {
    if (event.type != EventType::metric && event.type != EventType::evaluation_result) {
        return;
    }
    if (event.branch_id != branch_) {
        branch_ = event.branch_id;
        obs_ = {};
    }
    if (event.type == EventType::evaluation_result) {
        obs_.valid_loss_history.emplace_back(event.step, event.payload.at("val_loss").get<double>());
        return;
    }
    const double lr = event.payload.at("lr").get<double>();
    obs_.current_step = event.step;
    obs_.current_lr = lr;
    obs_.lr_history.emplace_back(event.step, lr);
    obs_.train_loss_history.emplace_back(event.step, event.payload.at("train_loss").get<double>());
    if (event.step % cadence_ != 0) {
        return;
    }
    AgentStep record;
    record.step = event.step;
    record.lr = lr;
    record.decision = policy_.decide(obs_);
    try {
        if (auto envelope = act(record.decision, lr, submit_)) {
            record.submitted_uuid = envelope->uuid;
        }
    } catch (const std::exception& e) {
        record.error = e.what();
    }
    steps_.push_back(std::move(record));
}

}  // namespace itrain
