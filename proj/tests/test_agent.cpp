// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <httplib.h>

#include <iterator>
#include <random>
#include <sstream>
#include <thread>

#include "itrain/agent.hpp"

using namespace itrain;

namespace {

AgentObservation with_losses(std::vector<double> losses, double lr = 0.01) {
    AgentObservation obs;
    obs.current_lr = lr;
    for (std::size_t i = 0; i < losses.size(); ++i) {
        obs.train_loss_history.emplace_back(i + 1, losses[i]);
        obs.lr_history.emplace_back(i + 1, lr);
    }
    obs.current_step = losses.size();
    return obs;
}

TrainingEvent metric(std::uint64_t step, double loss, double lr, const std::string& branch = "b0") {
    return {EventType::metric, step, branch, 0.0,
            Json{{"step", step}, {"train_loss", loss}, {"grad_norm", 1.0}, {"lr", lr}}};
}

class FixedPolicy final : public DecisionPolicy {
public:
    explicit FixedPolicy(Action a) : action_(a) {}
    AgentDecision decide(const AgentObservation& obs) override {
        seen.push_back(obs);
        return {action_, "fixed"};
    }
    std::vector<AgentObservation> seen;

private:
    Action action_;
};

}  // namespace

TEST(RulePolicy, DecisionTable) {
    EXPECT_EQ(decide_rule(with_losses({})).action, Action::keep);
    EXPECT_EQ(decide_rule(with_losses({1.0})).action, Action::keep);
    EXPECT_EQ(decide_rule(with_losses({1.0, 2.0})).action, Action::halve);
    EXPECT_EQ(decide_rule(with_losses({5, 4, 3, 2, 1})).action, Action::keep);
    EXPECT_EQ(decide_rule(with_losses({1.0, 0.999, 0.998, 0.997, 0.996})).action, Action::double_lr);
    EXPECT_EQ(decide_rule(with_losses({1.0, 2.0, 0.5, 2.0, 0.9})).action, Action::halve);
    EXPECT_EQ(decide_rule(with_losses({1.0, 1.0, 1.0})).action, Action::keep);
    // only the last five losses matter
    EXPECT_EQ(decide_rule(with_losses({0.1, 9, 8, 7, 6, 5})).action, Action::keep);
}

TEST(RulePolicy, SmallWobbleIsNotOscillation) {
    EXPECT_EQ(decide_rule(with_losses({1.0, 0.99, 0.995, 0.98, 0.985})).action, Action::keep);
}

TEST(ParseDecision, AcceptsEmbeddedJson) {
    auto d = parse_decision(R"(Sure! {"action": "halve", "explanation": "loss is spiking"} hope that helps)");
    EXPECT_EQ(d.action, Action::halve);
    EXPECT_EQ(d.explanation, "loss is spiking");
    EXPECT_EQ(parse_decision(R"({"note": {"x": "}"}} {"action":"DOUBLE"})").action, Action::double_lr);
    EXPECT_EQ(parse_decision("```json\n{\"action\": \"keep\"}\n```").action, Action::keep);
}

TEST(ParseDecision, CapsExplanationAt100Words) {
    std::string words;
    for (int i = 0; i < 150; ++i) words += "w" + std::to_string(i) + " ";
    const auto d = parse_decision(Json{{"action", "keep"}, {"explanation", words}}.dump());
    std::istringstream in(d.explanation);
    EXPECT_EQ(std::distance(std::istream_iterator<std::string>(in), std::istream_iterator<std::string>()), 100);
}

TEST(ParseDecision, RejectsGarbage) {
    EXPECT_THROW((void)parse_decision(""), Error);
    EXPECT_THROW((void)parse_decision("keep"), Error);
    EXPECT_THROW((void)parse_decision(R"({"action": "triple"})"), Error);
    EXPECT_THROW((void)parse_decision(R"({"action": 3})"), Error);
    EXPECT_THROW((void)parse_decision(R"({"explanation": "none"})"), Error);
}

TEST(ParseDecision, FuzzNeverCrashes) {
    std::mt19937_64 gen(5);
    const std::string alphabet = "{}[]\":,\\ actionkeephalvedouble";
    for (int i = 0; i < 5000; ++i) {
        std::string s;
        for (std::size_t n = gen() % 60; n > 0; --n) s += alphabet[gen() % alphabet.size()];
        try {
            const auto d = parse_decision(s);
            EXPECT_TRUE(d.action == Action::keep || d.action == Action::halve || d.action == Action::double_lr);
        } catch (const Error&) {
        }
    }
}

TEST(Prompt, RendersEveryPlaceholder) {
    AgentObservation obs;
    obs.current_step = 20;
    obs.current_lr = 0.005;
    obs.lr_history = {{10, 0.005}, {20, 0.005}};
    obs.train_loss_history = {{10, 1.5}, {20, 0.25}};
    const std::string tmpl =
        "s={{current_step}} lr={{current_lr}} L={{lr_history}} T={{train_loss_history}} V={{valid_loss_history}}";
    EXPECT_EQ(render_prompt(obs, tmpl),
              "s=20 lr=0.005 L=[[10, 0.005], [20, 0.005]] T=[[10, 1.5], [20, 0.25]] V=[]");
    const std::string full = render_prompt(obs, default_prompt_template());
    EXPECT_EQ(full.find("{{"), std::string::npos);
    EXPECT_NE(full.find("[[10, 1.5], [20, 0.25]]"), std::string::npos);
}

TEST(Prompt, RejectsBadTemplates) {
    AgentObservation obs;
    EXPECT_THROW((void)render_prompt(obs, "{{current_step}} only"), Error);
    EXPECT_THROW((void)render_prompt(obs, default_prompt_template() + "{{mystery}}"), Error);
}

TEST(Act, HalveAndDoubleAreInverse) {
    std::mt19937_64 gen(1);
    std::uniform_real_distribution<double> exponent(-8, 1);
    for (int i = 0; i < 1000; ++i) {
        const double lr = std::pow(10.0, exponent(gen));
        const double up = *decided_lr({Action::double_lr, ""}, lr);
        EXPECT_EQ(*decided_lr({Action::halve, ""}, up), lr);
    }
    EXPECT_FALSE(decided_lr({Action::keep, ""}, 0.1).has_value());
}

TEST(Act, SubmitsUpdateOptimizer) {
    std::vector<CommandEnvelope> sent;
    const auto env = act({Action::halve, "x"}, 0.01, [&](const CommandEnvelope& e) { sent.push_back(e); });
    ASSERT_TRUE(env.has_value());
    ASSERT_EQ(sent.size(), 1u);
    EXPECT_EQ(sent[0].command, "update_optimizer");
    EXPECT_EQ(sent[0].args_json()["lr"]["value"], 0.005);
    EXPECT_NO_THROW(validate_envelope(sent[0]));
    EXPECT_FALSE(act({Action::keep, ""}, 0.01, [&](const CommandEnvelope& e) { sent.push_back(e); }).has_value());
    EXPECT_EQ(sent.size(), 1u);
    EXPECT_THROW((void)act({Action::halve, ""}, 0.0, [](const CommandEnvelope&) {}), Error);
}

TEST(AgentLoop, DecidesOnCadenceAndResetsOnBranchChange) {
    FixedPolicy policy(Action::halve);
    std::vector<CommandEnvelope> sent;
    AgentLoop loop(policy, 5, [&](const CommandEnvelope& e) { sent.push_back(e); });
    for (std::uint64_t s = 1; s <= 12; ++s) {
        loop.observe(metric(s, 1.0 / s, 0.1));
    }
    loop.observe({EventType::evaluation_result, 12, "b0", 0.0, Json{{"step", 12}, {"val_loss", 0.3}}});
    EXPECT_EQ(loop.steps().size(), 2u);
    EXPECT_EQ(loop.steps()[0].step, 5u);
    EXPECT_EQ(sent.size(), 2u);
    EXPECT_EQ(policy.seen[0].train_loss_history.size(), 5u);
    EXPECT_EQ(loop.observation().valid_loss_history.size(), 1u);

    loop.observe(metric(6, 0.5, 0.05, "b0.1"));
    EXPECT_EQ(loop.observation().train_loss_history.size(), 1u);
    EXPECT_TRUE(loop.observation().valid_loss_history.empty());
}

TEST(AgentLoop, SubmitFailureIsRecorded) {
    FixedPolicy policy(Action::double_lr);
    AgentLoop loop(policy, 1, [](const CommandEnvelope&) { throw Error(ErrorCode::run_ended, "ended"); });
    loop.observe(metric(1, 1.0, 0.1));
    ASSERT_EQ(loop.steps().size(), 1u);
    EXPECT_EQ(loop.steps()[0].error, "ended");
    EXPECT_FALSE(loop.steps()[0].submitted_uuid.has_value());
}

TEST(AgentLoop, ZeroCadenceMeansEveryStep) {
    FixedPolicy policy(Action::keep);
    AgentLoop loop(policy, 0, [](const CommandEnvelope&) {});
    for (std::uint64_t s = 1; s <= 3; ++s) loop.observe(metric(s, 1.0, 0.1));
    EXPECT_EQ(loop.steps().size(), 3u);
}

namespace {

class MockLlm {
public:
    explicit MockLlm(std::function<void(const httplib::Request&, httplib::Response&)> handler) {
        server_.Post("/v1/chat/completions", std::move(handler));
        port_ = server_.bind_to_any_port("127.0.0.1");
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
    }
    ~MockLlm() {
        server_.stop();
        thread_.join();
    }
    [[nodiscard]] std::string url() const {
        return "http://127.0.0.1:" + std::to_string(port_) + "/v1/chat/completions";
    }

private:
    httplib::Server server_;
    int port_ = 0;
    std::thread thread_;
};

std::string reply_with(const std::string& content) {
    return Json{{"choices", Json::array({{{"message", {{"role", "assistant"}, {"content", content}}}}})}}.dump();
}

}  // namespace

TEST(LlmPolicy, SendsPromptAndParsesReply) {
    Json seen;
    std::string auth;
    MockLlm mock([&](const httplib::Request& req, httplib::Response& res) {
        seen = Json::parse(req.body);
        auth = req.get_header_value("Authorization");
        res.set_content(reply_with(R"({"action": "halve", "explanation": "too hot"})"), "application/json");
    });
    ::setenv("ITRAIN_TEST_KEY", "sekret", 1);
    LlmOptions options;
    options.endpoint = mock.url();
    options.model = "tiny";
    options.api_key_env = "ITRAIN_TEST_KEY";
    LlmPolicy policy(options);
    const auto d = policy.decide(with_losses({1, 2, 3}));
    EXPECT_EQ(d.action, Action::halve);
    EXPECT_EQ(d.explanation, "too hot");
    EXPECT_EQ(seen["model"], "tiny");
    EXPECT_EQ(seen["messages"][0]["role"], "user");
    EXPECT_NE(seen["messages"][0]["content"].get<std::string>().find("Current step: 3"), std::string::npos);
    EXPECT_EQ(auth, "Bearer sekret");
}

TEST(LlmPolicy, FallsBackToKeep) {
    int mode = 0;
    MockLlm mock([&](const httplib::Request&, httplib::Response& res) {
        switch (mode) {
        case 0: res.status = 500; break;
        case 1: res.set_content("not json", "application/json"); break;
        default: res.set_content(reply_with("I would halve it"), "application/json"); break;
        }
    });
    LlmOptions options;
    options.endpoint = mock.url();
    LlmPolicy policy(options);
    for (mode = 0; mode < 3; ++mode) {
        EXPECT_EQ(policy.decide(with_losses({1, 2})).action, Action::keep) << mode;
    }
    options.endpoint = "http://127.0.0.1:1/v1";
    options.timeout = std::chrono::milliseconds(500);
    LlmPolicy dead(options);
    EXPECT_EQ(dead.decide(with_losses({1, 2})).action, Action::keep);
}

TEST(LlmPolicy, RejectsBadConfiguration) {
    LlmOptions options;
    options.endpoint = "nowhere";
    EXPECT_THROW(LlmPolicy{options}, Error);
    options.endpoint = "http://127.0.0.1:9/v1";
    options.prompt_template = "no placeholders";
    EXPECT_THROW(LlmPolicy{options}, Error);
}
