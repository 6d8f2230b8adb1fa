#include <cmath>

#include <gtest/gtest.h>

#include <cia/attack.hpp>
#include <cia/image.hpp>
#include <cia/model.hpp>

using namespace cia;

namespace {

const MicroVlm& model() {
    static const MicroVlm m = make_micro_vlm(42);
    return m;
}

AttackConfig base_config(std::size_t iters) {
    AttackConfig c;
    c.max_iters = iters;
    c.train_prompts = {"classify the content of this image .", "describe the content of this image .",
                       "how many animals are present in the image ?"};
    return c;
}

Image grey(float v = 0.5f) {
    Image img(16, 16, 3);
    for (auto& x : img.values) x = v;
    return img;
}

}  // namespace

// ---- projection and steps ---------------------------------------------------

TEST(ProjectLinf, Examples) {
    const double eps = 16.0 / 255.0;
    auto d = project_linf(std::vector<float>{0.5f, -1.0f, 0.01f}, eps);
    EXPECT_FLOAT_EQ(d[0], static_cast<float>(eps));
    EXPECT_FLOAT_EQ(d[1], -static_cast<float>(eps));
    EXPECT_FLOAT_EQ(d[2], 0.01f);
    EXPECT_THROW(project_linf(std::vector<float>{0.0f}, -1.0), std::invalid_argument);
    EXPECT_EQ(project_linf(std::vector<float>{0.3f, -0.2f}, 0.0), (std::vector<float>{0.0f, 0.0f}));
}

TEST(PgdStep, SignRule) {
    Image orig(1, 1, 3);
    orig.values = {0.5f, 0.5f, 0.5f};
    const std::vector<float> g{0.3f, -0.2f, 0.0f};
    EXPECT_EQ(pgd_step({0, 0, 0}, g, 0.05, 1.0, orig), (std::vector<float>{-0.05f, 0.05f, 0.0f}));
}

TEST(PgdStep, ZeroStepLeavesDelta) {
    Image orig(1, 1, 3);
    orig.values = {0.2f, 0.5f, 0.9f};
    const std::vector<float> d{0.01f, -0.02f, 0.03f};
    EXPECT_EQ(pgd_step(d, std::vector<float>{1, -1, 1}, 0.0, 0.1, orig), d);
}

TEST(PgdStep, ImageFloorAndCeiling) {
    Image orig(1, 1, 3);
    orig.values = {0.0f, 1.0f, 0.98f};
    const auto d = pgd_step({0, 0, 0}, std::vector<float>{1, -1, -1}, 0.05, 16.0 / 255.0, orig);
    EXPECT_EQ(d[0], 0.0f);
    EXPECT_EQ(d[1], 0.0f);
    EXPECT_LE(orig.values[2] + d[2], 1.0f);
    EXPECT_GT(d[2], 0.0f);
}

TEST(PgdStep, ShapeMismatch) {
    Image orig(1, 1, 3);
    EXPECT_THROW(pgd_step({0, 0}, std::vector<float>{1, 1, 1}, 0.05, 0.1, orig), std::invalid_argument);
    EXPECT_THROW(pgd_step({0, 0, 0}, std::vector<float>{1, 1}, 0.05, 0.1, orig), std::invalid_argument);
}

TEST(PgdStep, NeverLeavesBallOrRange) {
    SplitMix64 rng(5);
    Image orig(4, 4, 3);
    for (auto& v : orig.values) v = static_cast<float>(rng.uniform());
    std::vector<float> d(orig.size(), 0.0f), g(orig.size());
    const double eps = 16.0 / 255.0;
    for (int step = 0; step < 200; ++step) {
        for (auto& v : g) v = static_cast<float>(rng.uniform(-1, 1));
        d = pgd_step(std::move(d), g, 0.05, eps, orig);
        const auto adv = apply_perturbation(orig, d);
        for (std::size_t i = 0; i < d.size(); ++i) {
            ASSERT_LE(std::abs(d[i]), static_cast<float>(eps));
            ASSERT_GE(adv.values[i], 0.0f);
            ASSERT_LE(adv.values[i], 1.0f);
            ASSERT_EQ(adv.values[i], orig.values[i] + d[i]);
        }
    }
}

// ---- configuration ----------------------------------------------------------

TEST(AttackConfigTest, VariantNames) {
    for (auto v : kAllVariants) EXPECT_EQ(parse_variant(to_string(v)), v);
    EXPECT_THROW(parse_variant("cropa"), std::invalid_argument);
}

TEST(AttackConfigTest, EffectiveWeightsAndPrompts) {
    auto c = base_config(0);
    c.weights = {0.4, 0.7};
    c.variant = Variant::cia;
    EXPECT_EQ(effective_weights(c), (LossWeights{0.4, 0.7}));
    c.variant = Variant::cia_image;
    EXPECT_EQ(effective_weights(c), (LossWeights{0.4, 1.0}));
    c.variant = Variant::cia_text;
    EXPECT_EQ(effective_weights(c), (LossWeights{0.4, 0.0}));
    c.variant = Variant::multi_p;
    EXPECT_EQ(effective_weights(c).alpha, 0.0);
    EXPECT_EQ(effective_prompts(c).size(), 3u);
    c.variant = Variant::single_p;
    EXPECT_EQ(effective_weights(c).alpha, 0.0);
    EXPECT_EQ(effective_prompts(c), std::vector<std::string>{c.train_prompts.front()});
}

TEST(AttackConfigTest, Validation) {
    auto c = base_config(1);
    c.train_prompts.clear();
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = base_config(1);
    c.epsilon_v = -0.1;
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = base_config(1);
    c.eta = std::nan("");
    EXPECT_THROW(c.validate(), std::invalid_argument);
    c = base_config(1);
    c.injection.target_text = "zebra";
    EXPECT_THROW(run_attack(model(), grey(), c), std::invalid_argument);
}

TEST(AttackConfigTest, PromptScheduleIsSeededRoundRobin) {
    EXPECT_EQ(prompt_slot(0, 0, 3), 0u);
    EXPECT_EQ(prompt_slot(0, 4, 3), 1u);
    EXPECT_EQ(prompt_slot(5, 0, 3), 2u);
    EXPECT_EQ(prompt_slot(5, 1, 3), 0u);
}

// ---- run_attack -------------------------------------------------------------

TEST(RunAttack, ZeroIterationsReturnsOriginal) {
    const auto img = synthetic_image(42);
    const auto r = run_attack(model(), img, base_config(0));
    EXPECT_EQ(r.adversarial, img);
    EXPECT_TRUE(r.state.loss_history.empty());
}

TEST(RunAttack, ZeroEpsilonReturnsOriginal) {
    const auto img = synthetic_image(42);
    auto c = base_config(20);
    c.epsilon_v = 0.0;
    const auto r = run_attack(model(), img, c);
    EXPECT_EQ(r.adversarial, img);
    EXPECT_EQ(r.state.loss_history.size(), 20u);
}

TEST(RunAttack, LossDecreasesOverThreeHundredIterations) {
    auto c = base_config(300);
    const auto r = run_attack(model(), synthetic_image(42), c);
    ASSERT_EQ(r.state.loss_history.size(), 300u);
    EXPECT_LT(r.state.loss_history.back().l_total, r.state.loss_history.front().l_total);
}

TEST(RunAttack, InvariantsHoldEveryIteration) {
    const auto img = synthetic_image(42);
    auto c = base_config(200);
    const float eps = static_cast<float>(c.epsilon_v);
    std::size_t seen = 0;
    run_attack(model(), img, c, [&](const PerturbationState& s, const Image& adv) {
        ++seen;
        for (std::size_t i = 0; i < s.delta.size(); ++i) {
            ASSERT_LE(std::abs(s.delta[i]), eps);
            ASSERT_GE(adv.values[i], 0.0f);
            ASSERT_LE(adv.values[i], 1.0f);
        }
    });
    EXPECT_EQ(seen, 200u);
}

TEST(RunAttack, LossBreakdownIsConsistent) {
    auto c = base_config(5);
    const auto r = run_attack(model(), synthetic_image(1), c);
    for (const auto& b : r.state.loss_history) {
        EXPECT_GE(b.l_v, 0.0);
        EXPECT_GE(b.l_t, 0.0);
        EXPECT_GE(b.l_o, 0.0);
        EXPECT_NEAR(b.l_total, total_loss(b.l_v, b.l_t, b.l_o, b.weights), 1e-6);
        EXPECT_EQ(b.weights, c.weights);
    }
}

TEST(RunAttack, Deterministic) {
    auto c = base_config(40);
    const auto a = run_attack(model(), synthetic_image(3), c), b = run_attack(model(), synthetic_image(3), c);
    EXPECT_EQ(a.state, b.state);
    EXPECT_EQ(a.adversarial, b.adversarial);
}

TEST(RunAttack, NonFiniteLossNamesIteration) {
    auto img = grey();
    img.values[7] = std::nanf("");
    try {
        run_attack(model(), img, base_config(3));
        FAIL() << "expected an error";
    } catch (const std::runtime_error& e) {
        EXPECT_NE(std::string(e.what()).find("iteration 0"), std::string::npos) << e.what();
    }
}

TEST(RunAttack, EarlyStop) {
    auto c = base_config(50);
    c.early_stop_loss = 1e9;
    const auto r = run_attack(model(), synthetic_image(42), c);
    EXPECT_EQ(r.state.loss_history.size(), 1u);
    EXPECT_TRUE(r.state.converged);
    EXPECT_EQ(r.adversarial, synthetic_image(42));
}

TEST(RunAttack, TooLongPromptRejected) {
    auto c = base_config(1);
    std::string longp;
    for (int i = 0; i < 50; ++i) longp += "the ";
    c.train_prompts = {longp};
    EXPECT_THROW(run_attack(model(), grey(), c), std::length_error);
}

// ---- resume ------------------------------------------------------------------

TEST(Resume, ZeroExtraIsIdentity) {
    const auto img = synthetic_image(42);
    auto c = base_config(30);
    const auto r = run_attack(model(), img, c);
    const auto again = resume(model(), img, c, r.state, 0);
    EXPECT_EQ(again.state, r.state);
    EXPECT_EQ(again.adversarial, r.adversarial);
}

TEST(Resume, SplitRunEqualsSingleRun) {
    const auto img = synthetic_image(42);
    auto c = base_config(200);
    const auto whole = run_attack(model(), img, c);
    auto first = c;
    first.max_iters = 100;
    const auto half = run_attack(model(), img, first);
    const auto rest = resume(model(), img, c, half.state, 100);
    EXPECT_EQ(rest.state.delta, whole.state.delta);
    EXPECT_EQ(rest.state.loss_history, whole.state.loss_history);
    EXPECT_EQ(rest.state.loss_history.size(), 200u);
    EXPECT_EQ(rest.state.iteration, 200u);
    EXPECT_EQ(rest.adversarial, whole.adversarial);
}

TEST(Resume, RejectsInconsistentState) {
    const auto img = synthetic_image(42);
    auto c = base_config(10);
    PerturbationState s;
    s.delta.assign(img.size() - 1, 0.0f);
    EXPECT_THROW(resume(model(), img, c, s, 1), std::invalid_argument);
    s.delta.assign(img.size(), 0.0f);
    s.iteration = 3;
    EXPECT_THROW(resume(model(), img, c, s, 1), std::invalid_argument);
    s.iteration = 0;
    s.delta[0] = 0.5f;
    EXPECT_THROW(resume(model(), img, c, s, 1), std::invalid_argument);
}

// ---- variant relations -------------------------------------------------------

TEST(Variants, BetaOneCollapsesCiaToCiaImage) {
    auto c = base_config(30);
    c.weights = {0.6, 1.0};
    auto ci = c;
    ci.variant = Variant::cia_image;
    const auto a = run_attack(model(), synthetic_image(42), c), b = run_attack(model(), synthetic_image(42), ci);
    EXPECT_EQ(a.state, b.state);
}

TEST(Variants, BetaZeroCollapsesCiaToCiaText) {
    auto c = base_config(30);
    c.weights = {0.6, 0.0};
    auto ct = c;
    ct.variant = Variant::cia_text;
    const auto a = run_attack(model(), synthetic_image(42), c), b = run_attack(model(), synthetic_image(42), ct);
    EXPECT_EQ(a.state, b.state);
}

TEST(Variants, SinglePEqualsMultiPWithOnePrompt) {
    auto c = base_config(30);
    c.train_prompts = {"what category best describes this image ?"};
    c.variant = Variant::single_p;
    auto m = c;
    m.variant = Variant::multi_p;
    const auto a = run_attack(model(), synthetic_image(42), c), b = run_attack(model(), synthetic_image(42), m);
    EXPECT_EQ(a.state, b.state);
    EXPECT_EQ(a.adversarial, b.adversarial);
}

TEST(Variants, SinglePUsesOnlyFirstPrompt) {
    auto c = base_config(6);
    c.variant = Variant::single_p;
    auto one = c;
    one.train_prompts = {c.train_prompts.front()};
    EXPECT_EQ(run_attack(model(), synthetic_image(2), c).state, run_attack(model(), synthetic_image(2), one).state);
}

TEST(Variants, NearDescentWithSmallStep) {
    // One fixed prompt, so consecutive losses are directly comparable.
    auto c = base_config(11);
    c.train_prompts = {"classify the content of this image ."};
    c.eta = 1e-3;
    const auto r = run_attack(model(), synthetic_image(42), c);
    const auto& h = r.state.loss_history;
    int non_increasing = 0;
    for (std::size_t i = 1; i < h.size(); ++i) non_increasing += h[i].l_total <= h[i - 1].l_total;
    EXPECT_GE(non_increasing, 9);
}
