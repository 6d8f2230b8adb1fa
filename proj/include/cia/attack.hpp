#pragma once

// Sign-gradient PGD on the image perturbation (contextual injection and the
// output-only baselines).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "autodiff.hpp"
#include "image.hpp"
#include "model.hpp"
#include "objective.hpp"

namespace cia {

enum class Variant { cia, cia_image, cia_text, single_p, multi_p };

inline constexpr Variant kAllVariants[] = {Variant::single_p, Variant::multi_p, Variant::cia_image, Variant::cia_text,
                                           Variant::cia};

inline std::string_view to_string(Variant v) {
    switch (v) {
        case Variant::cia: return "cia";
        case Variant::cia_image: return "cia_image";
        case Variant::cia_text: return "cia_text";
        case Variant::single_p: return "single_p";
        case Variant::multi_p: return "multi_p";
    }
    return "cia";
}

inline Variant parse_variant(std::string_view s) {
    for (auto v : kAllVariants)
        if (to_string(v) == s) return v;
    throw std::invalid_argument("unknown attack variant '" + std::string(s) + "'");
}

struct AttackConfig {
    double epsilon_v = 16.0 / 255.0;
    double eta = 0.05;
    std::size_t max_iters = 2000;
    LossWeights weights{0.6, 0.6};
    Variant variant = Variant::cia;
    std::vector<std::string> train_prompts;
    InjectionSpec injection;
    std::uint64_t seed = 42;
    std::optional<double> early_stop_loss;

    void validate() const {
        if (!(epsilon_v >= 0.0) || !std::isfinite(epsilon_v)) throw std::invalid_argument("attack: epsilon_v must be >= 0");
        if (!(eta >= 0.0) || !std::isfinite(eta)) throw std::invalid_argument("attack: eta must be >= 0");
        if (train_prompts.empty()) throw std::invalid_argument("attack: no training prompts");
        weights.validate();
    }

    friend bool operator==(const AttackConfig&, const AttackConfig&) = default;
};

/// Weights after the variant's forcing rule.
inline LossWeights effective_weights(const AttackConfig& c) {
    switch (c.variant) {
        case Variant::cia: return c.weights;
        case Variant::cia_image: return {c.weights.alpha, 1.0};
        case Variant::cia_text: return {c.weights.alpha, 0.0};
        case Variant::single_p:
        case Variant::multi_p: return {0.0, c.weights.beta};
    }
    return c.weights;
}

inline std::vector<std::string> effective_prompts(const AttackConfig& c) {
    if (c.variant == Variant::single_p && !c.train_prompts.empty()) return {c.train_prompts.front()};
    return c.train_prompts;
}

/// Prompt consumed at a given iteration: round-robin, offset by the seed.
inline std::size_t prompt_slot(std::uint64_t seed, std::size_t iteration, std::size_t count) {
    return static_cast<std::size_t>((seed % count + iteration % count) % count);
}

struct PerturbationState {
    std::vector<float> delta;
    std::size_t iteration = 0;
    std::vector<LossBreakdown> loss_history;
    bool converged = false;

    friend bool operator==(const PerturbationState&, const PerturbationState&) = default;
};

/// Clamp each value into [−ε, ε].
inline void project_linf(std::span<float> delta, double epsilon) {
    if (!(epsilon >= 0.0)) throw std::invalid_argument("project_linf: epsilon must be >= 0");
    const float eps = static_cast<float>(epsilon);
    for (auto& v : delta) v = std::clamp(v, -eps, eps);
}

inline std::vector<float> project_linf(std::vector<float> delta, double epsilon) {
    project_linf(std::span<float>(delta), epsilon);
    return delta;
}

/// Shrinks delta wherever original + delta would leave [0, 1]; the result
/// never grows in magnitude.
inline void clamp_to_image_range(std::span<float> delta, std::span<const float> original) {
    for (std::size_t i = 0; i < delta.size(); ++i) {
        const double s = double(original[i]) + double(delta[i]);
        if (s > 1.0) delta[i] = static_cast<float>(1.0 - double(original[i]));
        else if (s < 0.0) delta[i] = 0.0f - original[i];
    }
}

/// δ ← clip_[0,1](clip_ε(δ − η·sign(g))), sign(0) = 0.
inline std::vector<float> pgd_step(std::vector<float> delta, std::span<const float> grad, double eta, double epsilon,
                                   const Image& original) {
    if (delta.size() != grad.size() || delta.size() != original.size())
        throw std::invalid_argument("pgd_step: shape mismatch (delta " + std::to_string(delta.size()) + ", grad " +
                                    std::to_string(grad.size()) + ", image " + std::to_string(original.size()) + ")");
    if (!(eta >= 0.0)) throw std::invalid_argument("pgd_step: eta must be >= 0");
    const float step = static_cast<float>(eta);
    for (std::size_t i = 0; i < delta.size(); ++i) {
        if (grad[i] > 0.0f) delta[i] -= step;
        else if (grad[i] < 0.0f) delta[i] += step;
    }
    project_linf(std::span<float>(delta), epsilon);
    clamp_to_image_range(delta, original.values);
    return delta;
}

/// clamp(original + delta, 0, 1).
inline Image apply_perturbation(const Image& original, std::span<const float> delta) {
    if (delta.size() != original.size()) throw std::invalid_argument("apply_perturbation: size mismatch");
    Image out = original;
    for (std::size_t i = 0; i < delta.size(); ++i) out.values[i] = std::clamp(original.values[i] + delta[i], 0.0f, 1.0f);
    return out;
}

struct AttackResult {
    Image adversarial;
    PerturbationState state;
};

/// Called after every update with the new state and adversarial image.
using IterationObserver = std::function<void(const PerturbationState&, const Image&)>;

namespace detail {

inline void check_state(const PerturbationState& s, const Image& original, double epsilon) {
    if (s.delta.size() != original.size())
        throw std::invalid_argument("attack state: delta has " + std::to_string(s.delta.size()) + " values, image has " +
                                    std::to_string(original.size()));
    if (s.loss_history.size() != s.iteration)
        throw std::invalid_argument("attack state: loss history length " + std::to_string(s.loss_history.size()) +
                                    " != iteration " + std::to_string(s.iteration));
    const float eps = static_cast<float>(epsilon);
    for (std::size_t i = 0; i < s.delta.size(); ++i) {
        const float d = s.delta[i];
        const double px = double(original.values[i]) + d;
        if (!(std::abs(d) <= eps) || px < -1e-6 || px > 1.0 + 1e-6)
            throw std::invalid_argument("attack state: delta violates the epsilon ball or image range at index " +
                                        std::to_string(i));
    }
}

}  // namespace detail

/// One forward pass: loss breakdown, and the gradient w.r.t. the image when requested.
inline LossBreakdown evaluate_losses(const MicroVlm& model, const Image& image, const AttackSequence& seq,
                                     const LossWeights& weights, std::vector<float>* grad_out = nullptr) {
    ad::Tape<float> tape;
    auto img = tape.leaf(image_tensor(image));
    auto logits = forward(tape, model.weights, img, seq.tokens);
    auto lv = loss_visual(logits, seq.visual_targets);
    auto lt = loss_textual(logits, seq.misleading, seq.layout);
    auto lo = loss_output(logits, seq.output_targets, seq.layout);
    auto total = total_loss(lv, lt, lo, weights);

    LossBreakdown b;
    b.l_v = lv.value().item();
    b.l_t = lt.value().item();
    b.l_o = lo.value().item();
    b.l_total = total_loss(b.l_v, b.l_t, b.l_o, weights);
    b.weights = weights;
    if (grad_out && std::isfinite(b.l_total)) *grad_out = tape.backward(total).wrt(img).data();
    return b;
}

inline std::vector<AttackSequence> build_sequences(const MicroVlm& model, const AttackConfig& config) {
    config.validate();
    config.injection.validate(model.tokenizer);
    std::vector<AttackSequence> seqs;
    for (const auto& p : effective_prompts(config)) {
        auto s = build_attack_sequence(model.tokenizer, p, config.injection, model.end_v());
        if (s.layout.n > model.weights.dims.max_seq)
            throw std::length_error("attack: prompt '" + p + "' gives a sequence of " + std::to_string(s.layout.n) +
                                    " tokens, max is " + std::to_string(model.weights.dims.max_seq));
        seqs.push_back(std::move(s));
    }
    return seqs;
}

/// Continues an attack for `extra_iters` iterations. Splitting a run into
/// several resumes gives bitwise the same state as one uninterrupted run.
inline AttackResult resume(const MicroVlm& model, const Image& original, const AttackConfig& config,
                           PerturbationState state, std::size_t extra_iters, const IterationObserver& observer = {}) {
    detail::check_state(state, original, config.epsilon_v);
    const auto seqs = build_sequences(model, config);
    const auto weights = effective_weights(config);

    std::vector<float> grad;
    for (std::size_t k = 0; k < extra_iters; ++k) {
        if (state.converged && config.early_stop_loss) break;
        const auto& seq = seqs[prompt_slot(config.seed, state.iteration, seqs.size())];
        const Image current = apply_perturbation(original, state.delta);
        auto b = evaluate_losses(model, current, seq, weights, &grad);
        if (!std::isfinite(b.l_v) || !std::isfinite(b.l_t) || !std::isfinite(b.l_o) || !std::isfinite(b.l_total))
            throw std::runtime_error("attack: non-finite loss at iteration " + std::to_string(state.iteration));
        state.loss_history.push_back(b);
        ++state.iteration;
        if (config.early_stop_loss && b.l_total < *config.early_stop_loss) {
            state.converged = true;
            break;
        }
        state.delta = pgd_step(std::move(state.delta), grad, config.eta, config.epsilon_v, original);
        if (observer) observer(state, apply_perturbation(original, state.delta));
    }
    return {apply_perturbation(original, state.delta), std::move(state)};
}

inline AttackResult run_attack(const MicroVlm& model, const Image& original, const AttackConfig& config,
                               const IterationObserver& observer = {}) {
    PerturbationState state;
    state.delta.assign(original.size(), 0.0f);
    return resume(model, original, config, std::move(state), config.max_iters, observer);
}

}  // namespace cia
