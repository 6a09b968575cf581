// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "itrain/protocol.hpp"

namespace itrain {

struct AgentObservation {
    std::uint64_t current_step = 0;
    double current_lr = 0.0;
    std::vector<std::pair<std::uint64_t, double>> lr_history;
    std::vector<std::pair<std::uint64_t, double>> train_loss_history;
    std::vector<std::pair<std::uint64_t, double>> valid_loss_history;
};

enum class Action { double_lr, halve, keep };

[[nodiscard]] std::string_view to_string(Action action) noexcept;

struct AgentDecision {
    Action action = Action::keep;
    std::string explanation;
};

[[nodiscard]] const std::string& default_prompt_template();

/// Substitutes {{current_step}}, {{current_lr}}, {{lr_history}},
/// {{train_loss_history}} and {{valid_loss_history}}. Throws
/// Error(invalid_value) if the template lacks one of them or leaves any
/// other {{...}} marker behind.
[[nodiscard]] std::string render_prompt(const AgentObservation& obs, const std::string& template_text);

inline constexpr std::size_t kRuleWindow = 5;

[[nodiscard]] AgentDecision decide_rule(const AgentObservation& obs);

/// First JSON object in `text` that has an "action" key. Throws Error(parse_error).
[[nodiscard]] AgentDecision parse_decision(std::string_view text);

/// Learning rate the decision asks for; nullopt for keep.
[[nodiscard]] std::optional<double> decided_lr(const AgentDecision& decision, double current_lr);

/// Submits update_optimizer for double/halve through `submit`, which throws
/// on rejection. Returns the submitted envelope.
std::optional<CommandEnvelope> act(const AgentDecision& decision, double current_lr,
                                   const std::function<void(const CommandEnvelope&)>& submit);

class DecisionPolicy {
public:
    virtual ~DecisionPolicy() = default;
    virtual AgentDecision decide(const AgentObservation& obs) = 0;
};

class RulePolicy final : public DecisionPolicy {
public:
    AgentDecision decide(const AgentObservation& obs) override { return decide_rule(obs); }
};

struct LlmOptions {
    std::string endpoint;  // full chat-completions URL
    std::string model;
    std::string api_key_env = "ITRAIN_LLM_API_KEY";
    std::string prompt_template = default_prompt_template();
    std::chrono::milliseconds timeout = std::chrono::seconds(60);
};

/// Chat-completion backend. Any transport or parse failure yields keep, with
/// the reason in the explanation.
class LlmPolicy final : public DecisionPolicy {
public:
    explicit LlmPolicy(LlmOptions options);
    AgentDecision decide(const AgentObservation& obs) override;

    /// Raw assistant text of the last reply.
    [[nodiscard]] const std::string& last_reply() const noexcept { return last_reply_; }

private:
    LlmOptions options_;
    std::string last_reply_;
};

struct AgentStep {
    std::uint64_t step = 0;
    double lr = 0.0;
    AgentDecision decision;
    std::optional<std::string> submitted_uuid;
    std::string error;
};

/// Builds observations from the event stream and decides every `cadence`
/// steps. Histories restart when the active branch changes.
class AgentLoop {
public:
    using Submit = std::function<void(const CommandEnvelope&)>;

    AgentLoop(DecisionPolicy& policy, std::uint64_t cadence, Submit submit);

    void observe(const TrainingEvent& event);

    [[nodiscard]] const AgentObservation& observation() const noexcept { return obs_; }
    [[nodiscard]] const std::vector<AgentStep>& steps() const noexcept { return steps_; }

private:
    DecisionPolicy& policy_;
    std::uint64_t cadence_;
    Submit submit_;
    std::string branch_;
    AgentObservation obs_;
    std::vector<AgentStep> steps_;
};

}  // namespace itrain
