#pragma once

// Injection losses over one teacher-forced sequence
//
//     [ visual (end_v) | <bos> prompt+padding | template target <eos> ]
//       0 .. end_v-1     end_v .. end_t-1       end_t .. n-1
//
// Row i of the logits predicts position i+1, except visual rows, which are
// scored directly against the tiled target. Each loss is the mean
// cross-entropy over its segment (a per-segment rescaling of the summed
// log-likelihood).

#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "autodiff.hpp"
#include "tokenizer.hpp"

namespace cia {

struct LossWeights {
    double alpha = 0.6;
    double beta = 0.6;

    void validate() const {
        if (!(alpha >= 0.0 && alpha <= 1.0) || !(beta >= 0.0 && beta <= 1.0))
            throw std::invalid_argument("loss weights: alpha and beta must lie in [0,1]");
    }
    friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

enum class PaddingStrategy { none, prefix, suffix, mixed };

inline std::string_view to_string(PaddingStrategy s) {
    switch (s) {
        case PaddingStrategy::none: return "none";
        case PaddingStrategy::prefix: return "prefix";
        case PaddingStrategy::suffix: return "suffix";
        case PaddingStrategy::mixed: return "mixed";
    }
    return "none";
}

inline PaddingStrategy parse_padding_strategy(std::string_view s) {
    if (s == "none") return PaddingStrategy::none;
    if (s == "prefix") return PaddingStrategy::prefix;
    if (s == "suffix") return PaddingStrategy::suffix;
    if (s == "mixed") return PaddingStrategy::mixed;
    throw std::invalid_argument("unknown padding strategy '" + std::string(s) + "'");
}

inline constexpr std::string_view kDefaultTemplate = "this image shows a {target}";
inline constexpr std::string_view kPlaceholder = "{target}";

struct InjectionSpec {
    std::string target_text = "dog";
    std::string misleading_template = std::string(kDefaultTemplate);
    std::string padding_token = "@";
    PaddingStrategy padding_strategy = PaddingStrategy::none;
    std::size_t padding_count = 0;

    /// Template with the placeholder replaced by the target.
    std::string filled() const {
        const auto pos = misleading_template.find(kPlaceholder);
        if (pos == std::string::npos || misleading_template.find(kPlaceholder, pos + 1) != std::string::npos)
            throw std::invalid_argument("injection: template must contain exactly one " + std::string(kPlaceholder));
        std::string out = misleading_template;
        out.replace(pos, kPlaceholder.size(), target_text);
        return out;
    }

    void validate(const Tokenizer& tok) const {
        (void)filled();
        const auto ids = tok.tokenize(target_text);
        if (ids.empty()) throw std::invalid_argument("injection: empty target");
        for (auto id : ids)
            if (id == Tokenizer::kUnk)
                throw std::invalid_argument("injection: target '" + target_text + "' is not in the vocabulary");
        if (padding_token.size() != 1 || !tok.find(padding_token))
            throw std::invalid_argument("injection: padding token '" + padding_token + "' is not a vocabulary character");
    }

    friend bool operator==(const InjectionSpec&, const InjectionSpec&) = default;
};

struct TokenLayout {
    std::size_t end_v = 0;  // visual tokens occupy [0, end_v)
    std::size_t end_t = 0;  // input text occupies [end_v, end_t)
    std::size_t n = 0;      // output occupies [end_t, n)
    std::size_t vocab = 0;
    std::size_t horizon = 0;  // n − end_t

    void validate() const {
        if (!(0 < end_v && end_v < end_t && end_t <= n))
            throw std::invalid_argument("token layout: require 0 < end_v < end_t <= n, got " + std::to_string(end_v) +
                                        ", " + std::to_string(end_t) + ", " + std::to_string(n));
        if (horizon != n - end_t) throw std::invalid_argument("token layout: horizon must equal n - end_t");
    }
    friend bool operator==(const TokenLayout&, const TokenLayout&) = default;
};

struct LossBreakdown {
    double l_v = 0.0, l_t = 0.0, l_o = 0.0, l_total = 0.0;
    LossWeights weights;
    friend bool operator==(const LossBreakdown&, const LossBreakdown&) = default;
};

namespace detail {
inline TokenSeq tile(const TokenSeq& src, std::size_t len, std::string_view what) {
    if (src.empty()) throw std::invalid_argument(std::string(what) + ": nothing to tile");
    TokenSeq out(len);
    for (std::size_t i = 0; i < len; ++i) out[i] = src[i % src.size()];
    return out;
}
}  // namespace detail

/// Cyclic repetition of the target tokens over the visual positions.
inline TokenSeq tile_targets_visual(const TokenSeq& target_tokens, std::size_t end_v) {
    if (end_v == 0) throw std::invalid_argument("tile_targets_visual: end_v must be >= 1");
    return detail::tile(target_tokens, end_v, "tile_targets_visual");
}

/// Filled template, cyclically tiled or truncated to the text segment length.
inline TokenSeq build_misleading_tokens(const Tokenizer& tok, const InjectionSpec& spec, std::size_t text_segment_len) {
    if (text_segment_len == 0) throw std::invalid_argument("build_misleading_tokens: segment length must be >= 1");
    auto ids = tok.tokenize(spec.filled());
    if (ids.empty()) throw std::invalid_argument("build_misleading_tokens: template tokenizes to nothing");
    return detail::tile(ids, text_segment_len, "build_misleading_tokens");
}

inline TokenSeq apply_padding(const Tokenizer& tok, const TokenSeq& prompt, const InjectionSpec& spec) {
    if (spec.padding_strategy == PaddingStrategy::none || spec.padding_count == 0) return prompt;
    auto pad = tok.find(spec.padding_token);
    if (!pad || spec.padding_token.size() != 1)
        throw std::invalid_argument("apply_padding: padding token '" + spec.padding_token + "' is not in the vocabulary");
    const std::size_t count = spec.padding_count;
    TokenSeq out;
    out.reserve(prompt.size() + count);
    switch (spec.padding_strategy) {
        case PaddingStrategy::prefix:
            out.assign(count, *pad);
            out.insert(out.end(), prompt.begin(), prompt.end());
            break;
        case PaddingStrategy::suffix:
            out = prompt;
            out.insert(out.end(), count, *pad);
            break;
        case PaddingStrategy::mixed: {
            std::size_t placed = 0;
            for (auto id : prompt) {
                out.push_back(id);
                if (placed < count) {
                    out.push_back(*pad);
                    ++placed;
                }
            }
            out.insert(out.end(), count - placed, *pad);
            break;
        }
        case PaddingStrategy::none: break;
    }
    return out;
}

/// Everything one optimisation step needs for a single prompt.
struct AttackSequence {
    TokenSeq tokens;  // text + output tokens fed after the visual tokens
    TokenLayout layout;
    TokenSeq visual_targets;
    TokenSeq misleading;
    TokenSeq output_targets;
};

/// Teacher-forced output target: filled template followed by <eos>.
inline TokenSeq output_target_tokens(const Tokenizer& tok, const InjectionSpec& spec) {
    auto ids = tok.tokenize(spec.filled());
    ids.push_back(Tokenizer::kEos);
    return ids;
}

/// Prompt as the model sees it at inference: <bos> followed by the words.
inline TokenSeq prompt_tokens(const Tokenizer& tok, std::string_view prompt) {
    TokenSeq ids{Tokenizer::kBos};
    auto words = tok.tokenize(prompt);
    ids.insert(ids.end(), words.begin(), words.end());
    return ids;
}

inline AttackSequence build_attack_sequence(const Tokenizer& tok, std::string_view prompt, const InjectionSpec& spec,
                                            std::size_t end_v) {
    auto words = tok.tokenize(prompt);
    if (words.empty()) throw std::invalid_argument("attack sequence: prompt '" + std::string(prompt) + "' is empty");
    auto padded = apply_padding(tok, words, spec);

    AttackSequence s;
    s.tokens.push_back(Tokenizer::kBos);
    s.tokens.insert(s.tokens.end(), padded.begin(), padded.end());
    s.output_targets = output_target_tokens(tok, spec);
    s.layout.end_v = end_v;
    s.layout.end_t = end_v + s.tokens.size();
    s.tokens.insert(s.tokens.end(), s.output_targets.begin(), s.output_targets.end());
    s.layout.n = end_v + s.tokens.size();
    s.layout.vocab = tok.size();
    s.layout.horizon = s.layout.n - s.layout.end_t;
    s.layout.validate();

    s.visual_targets = tile_targets_visual(tok.tokenize(spec.target_text), end_v);
    s.misleading = build_misleading_tokens(tok, spec, s.layout.end_t - s.layout.end_v - 1);
    return s;
}

namespace detail {
template <class T>
ad::Var<T> segment_ce(ad::Var<T> logits, std::size_t first_row, const TokenSeq& targets, std::string_view what) {
    const std::size_t L = logits.shape()[0];
    if (first_row + targets.size() > L)
        throw std::invalid_argument(std::string(what) + ": segment rows [" + std::to_string(first_row) + ", " +
                                    std::to_string(first_row + targets.size()) + ") exceed " + std::to_string(L) +
                                    " logit rows");
    std::vector<std::size_t> rows(targets.size()), ids(targets.size());
    for (std::size_t i = 0; i < targets.size(); ++i) {
        rows[i] = first_row + i;
        ids[i] = static_cast<std::size_t>(targets[i]);
    }
    return ad::cross_entropy_rows(logits, rows, ids);
}
}  // namespace detail

/// Mean CE of visual rows 0..end_v−1 against the tiled target.
template <class T>
ad::Var<T> loss_visual(ad::Var<T> logits, const TokenSeq& tiled_targets) {
    if (tiled_targets.empty()) throw std::invalid_argument("loss_visual: no visual targets");
    return detail::segment_ce(logits, 0, tiled_targets, "loss_visual");
}

/// Mean CE of rows end_v..end_t−2 (predicting text positions end_v+1..end_t−1).
template <class T>
ad::Var<T> loss_textual(ad::Var<T> logits, const TokenSeq& misleading, const TokenLayout& layout) {
    if (misleading.size() + 1 != layout.end_t - layout.end_v)
        throw std::invalid_argument("loss_textual: " + std::to_string(misleading.size()) +
                                    " misleading tokens for a text segment of " +
                                    std::to_string(layout.end_t - layout.end_v));
    return detail::segment_ce(logits, layout.end_v, misleading, "loss_textual");
}

/// Mean CE of rows end_t−1..n−2 against the teacher-forced output.
template <class T>
ad::Var<T> loss_output(ad::Var<T> logits, const TokenSeq& output_targets, const TokenLayout& layout) {
    if (output_targets.empty()) throw std::invalid_argument("loss_output: empty target output");
    if (output_targets.size() != layout.n - layout.end_t)
        throw std::invalid_argument("loss_output: " + std::to_string(output_targets.size()) +
                                    " targets for an output segment of " + std::to_string(layout.n - layout.end_t));
    return detail::segment_ce(logits, layout.end_t - 1, output_targets, "loss_output");
}

/// α·(β·l_v + (1−β)·l_t) + (1−α)·l_o
inline double total_loss(double l_v, double l_t, double l_o, const LossWeights& w) {
    return w.alpha * (w.beta * l_v + (1.0 - w.beta) * l_t) + (1.0 - w.alpha) * l_o;
}

template <class T>
ad::Var<T> total_loss(ad::Var<T> l_v, ad::Var<T> l_t, ad::Var<T> l_o, const LossWeights& w) {
    auto context = ad::add(ad::scale(l_v, w.beta), ad::scale(l_t, 1.0 - w.beta));
    return ad::add(ad::scale(context, w.alpha), ad::scale(l_o, 1.0 - w.alpha));
}

}  // namespace cia
