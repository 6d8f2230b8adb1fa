#pragma once

// Cross-prompt evaluation: ASR over prompt sets, per-position CE and top-k
// diagnostics, method comparison and hyperparameter sweeps.

#include <algorithm>
#include <atomic>
#include <exception>
#include <functional>
#include <mutex>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <unordered_set>
#include <vector>

#include "attack.hpp"
#include "corpus.hpp"
#include "model.hpp"
#include "objective.hpp"
#include "rng.hpp"

namespace cia {

inline constexpr std::size_t kDefaultMaxNew = 8;

enum class Split { train, eval };

inline std::string_view to_string(Split s) { return s == Split::train ? "train" : "eval"; }

struct PromptSet {
    Category category = Category::cls;
    std::vector<std::string> prompts;
    Split split = Split::eval;

    void validate() const {
        if (prompts.empty()) throw std::invalid_argument("prompt set " + std::string(to_string(category)) + " is empty");
        std::unordered_set<std::string> seen;
        for (const auto& p : prompts)
            if (!seen.insert(p).second) throw std::invalid_argument("prompt set: duplicate prompt '" + p + "'");
    }
    friend bool operator==(const PromptSet&, const PromptSet&) = default;
};

inline std::vector<PromptSet> bundled_corpus() {
    std::vector<PromptSet> sets;
    for (auto c : kCategories) {
        PromptSet s{c, {}, Split::eval};
        for (auto p : bundled_prompts(c)) s.prompts.emplace_back(p);
        sets.push_back(std::move(s));
    }
    return sets;
}

struct CorpusSplit {
    std::vector<PromptSet> train;
    std::vector<PromptSet> eval;
};

/// Seeded shuffle per category, then the first `train_per_category` prompts
/// go to train and the rest to eval.
inline CorpusSplit split_corpus(const std::vector<PromptSet>& sets, std::size_t train_per_category, std::uint64_t seed) {
    CorpusSplit out;
    for (const auto& s : sets) {
        s.validate();
        if (train_per_category >= s.prompts.size())
            throw std::invalid_argument("split: category " + std::string(to_string(s.category)) + " has " +
                                        std::to_string(s.prompts.size()) + " prompts, cannot hold out any for eval");
        auto shuffled = s.prompts;
        shuffle(std::span<std::string>(shuffled), seed ^ (0x9e37ULL * (static_cast<std::uint64_t>(s.category) + 1)));
        PromptSet train{s.category, {shuffled.begin(), shuffled.begin() + std::ptrdiff_t(train_per_category)}, Split::train};
        PromptSet eval{s.category, {shuffled.begin() + std::ptrdiff_t(train_per_category), shuffled.end()}, Split::eval};
        if (!train.prompts.empty()) out.train.push_back(std::move(train));
        out.eval.push_back(std::move(eval));
    }
    return out;
}

/// Up to `count` prompts taken round-robin across the sets (first of each
/// category, then second of each, ...).
inline std::vector<std::string> interleave_prompts(const std::vector<PromptSet>& sets, std::size_t count) {
    std::vector<std::string> out;
    for (std::size_t i = 0; out.size() < count; ++i) {
        bool any = false;
        for (const auto& s : sets) {
            if (i < s.prompts.size() && out.size() < count) {
                out.push_back(s.prompts[i]);
                any = true;
            }
        }
        if (!any) break;
    }
    return out;
}

// ---------------------------------------------------------------------------
// ASR
// ---------------------------------------------------------------------------

struct PromptVerdict {
    std::string prompt;
    Category category = Category::cls;
    std::string generated;
    bool hit = false;
    friend bool operator==(const PromptVerdict&, const PromptVerdict&) = default;
};

struct CategoryAsr {
    Category category = Category::cls;
    std::size_t hits = 0;
    std::size_t total = 0;
    double asr = 0.0;
    friend bool operator==(const CategoryAsr&, const CategoryAsr&) = default;
};

struct AsrReport {
    std::string target;
    std::size_t max_new = kDefaultMaxNew;
    std::vector<PromptVerdict> verdicts;
    std::vector<CategoryAsr> per_category;  // in kCategories order, only categories present
    double overall = 0.0;

    const CategoryAsr* category(Category c) const {
        for (const auto& a : per_category)
            if (a.category == c) return &a;
        return nullptr;
    }
    friend bool operator==(const AsrReport&, const AsrReport&) = default;
};

/// Whole-word, case-insensitive containment.
inline bool contains_word(std::string_view text, std::string_view word) {
    const auto needle = Tokenizer::split_words(word);
    if (needle.empty()) return false;
    const auto hay = Tokenizer::split_words(text);
    if (hay.size() < needle.size()) return false;
    for (std::size_t i = 0; i + needle.size() <= hay.size(); ++i)
        if (std::equal(needle.begin(), needle.end(), hay.begin() + std::ptrdiff_t(i))) return true;
    return false;
}

inline AsrReport aggregate_asr(std::vector<PromptVerdict> verdicts, std::string target, std::size_t max_new) {
    AsrReport r;
    r.target = std::move(target);
    r.max_new = max_new;
    std::size_t hits = 0;
    for (auto c : kCategories) {
        CategoryAsr a{c, 0, 0, 0.0};
        for (const auto& v : verdicts)
            if (v.category == c) {
                ++a.total;
                a.hits += v.hit;
            }
        if (a.total == 0) continue;
        a.asr = double(a.hits) / double(a.total);
        r.per_category.push_back(a);
    }
    for (const auto& v : verdicts) hits += v.hit;
    r.overall = verdicts.empty() ? 0.0 : double(hits) / double(verdicts.size());
    r.verdicts = std::move(verdicts);
    return r;
}

inline PromptVerdict judge_prompt(const MicroVlm& model, const Image& image, Category category, const std::string& prompt,
                                  std::string_view target, std::size_t max_new) {
    const auto out = generate_greedy(model.weights, image, prompt_tokens(model.tokenizer, prompt), max_new);
    PromptVerdict v{prompt, category, model.tokenizer.detokenize(out), false};
    v.hit = contains_word(v.generated, target);
    return v;
}

inline AsrReport evaluate_asr(const MicroVlm& model, const Image& image, const std::vector<PromptSet>& sets,
                              std::string_view target, std::size_t max_new = kDefaultMaxNew) {
    if (sets.empty()) throw std::invalid_argument("evaluate_asr: no prompt sets");
    if (!model.tokenizer.find(std::string(target)) || Tokenizer::is_reserved(model.tokenizer.id(target)))
        throw std::invalid_argument("evaluate_asr: target '" + std::string(target) + "' is not a vocabulary word");
    std::vector<PromptVerdict> verdicts;
    for (const auto& s : sets) {
        s.validate();
        for (const auto& p : s.prompts) verdicts.push_back(judge_prompt(model, image, s.category, p, target, max_new));
    }
    return aggregate_asr(std::move(verdicts), std::string(target), max_new);
}

inline AsrReport evaluate_asr(const MicroVlm& model, const Image& image, const PromptSet& set, std::string_view target,
                              std::size_t max_new = kDefaultMaxNew) {
    return evaluate_asr(model, image, std::vector<PromptSet>{set}, target, max_new);
}

/// Same as evaluate_asr with `misleading` prepended to every prompt; an
/// empty `misleading` leaves prompts untouched.
inline AsrReport textual_injection_eval(const MicroVlm& model, const Image& image, const std::vector<PromptSet>& sets,
                                        std::string_view misleading, std::string_view target,
                                        std::size_t max_new = kDefaultMaxNew) {
    if (misleading.empty()) return evaluate_asr(model, image, sets, target, max_new);
    std::vector<PromptSet> injected = sets;
    for (auto& s : injected)
        for (auto& p : s.prompts) p = std::string(misleading) + " " + p;
    auto report = evaluate_asr(model, image, injected, target, max_new);
    // Report the original prompt text.
    std::size_t k = 0;
    for (const auto& s : sets)
        for (const auto& p : s.prompts) report.verdicts[k++].prompt = p;
    return report;
}

inline AsrReport textual_injection_eval(const MicroVlm& model, const Image& image, const std::vector<PromptSet>& sets,
                                        const InjectionSpec& injection, std::size_t max_new = kDefaultMaxNew) {
    return textual_injection_eval(model, image, sets, injection.filled(), injection.target_text, max_new);
}

// ---------------------------------------------------------------------------
// Position diagnostics
// ---------------------------------------------------------------------------

struct CeProfile {
    std::string prompt;
    std::string target;
    std::vector<double> ce;  // one entry per logit row
    std::size_t end_v = 0, end_t = 0, n = 0;
    double visual_mean = 0.0;
    double text_mean = 0.0;
    std::optional<double> generated_mean;  // empty when generation stopped immediately

    friend bool operator==(const CeProfile&, const CeProfile&) = default;
};

namespace detail {
inline double mean_of(const std::vector<double>& v, std::size_t begin, std::size_t end) {
    double s = 0.0;
    for (std::size_t i = begin; i < end; ++i) s += v[i];
    return s / double(end - begin);
}
}  // namespace detail

/// CE of the target token at every row of [visual | <bos> prompt | greedy output].
inline CeProfile ce_by_position(const MicroVlm& model, const Image& image, const std::string& prompt,
                                const std::string& target, const InjectionSpec& injection = {},
                                std::size_t max_new = kDefaultMaxNew) {
    const auto target_ids = model.tokenizer.tokenize(target);
    if (target_ids.size() != 1 || target_ids[0] == Tokenizer::kUnk)
        throw std::invalid_argument("ce_by_position: target '" + target + "' must be a single vocabulary token");
    const auto words = model.tokenizer.tokenize(prompt);
    TokenSeq text{Tokenizer::kBos};
    const auto padded = apply_padding(model.tokenizer, words, injection);
    text.insert(text.end(), padded.begin(), padded.end());

    const auto generated = generate_greedy(model.weights, image, text, max_new);
    TokenSeq full = text;
    full.insert(full.end(), generated.begin(), generated.end());
    const auto logits = forward_logits(model.weights, image, full);
    const std::size_t V = logits.cols();

    CeProfile p;
    p.prompt = prompt;
    p.target = target;
    p.end_v = model.end_v();
    p.end_t = p.end_v + text.size();
    p.n = logits.rows();
    p.ce.resize(p.n);
    for (std::size_t i = 0; i < p.n; ++i)
        p.ce[i] = ad::cross_entropy_value(logits.values().subspan(i * V, V), static_cast<std::size_t>(target_ids[0]));
    p.visual_mean = detail::mean_of(p.ce, 0, p.end_v);
    p.text_mean = detail::mean_of(p.ce, p.end_v, p.end_t);
    if (p.n > p.end_t) p.generated_mean = detail::mean_of(p.ce, p.end_t, p.n);
    return p;
}

struct TokenProb {
    TokenId token = 0;
    double prob = 0.0;
    friend bool operator==(const TokenProb&, const TokenProb&) = default;
};

/// Top-k next-token candidates for every visual and input-text row,
/// descending by probability, ties to the lower id.
inline std::vector<std::vector<TokenProb>> topk_decode_by_position(const MicroVlm& model, const Image& image,
                                                                   const std::string& prompt, std::size_t k) {
    const std::size_t V = model.weights.dims.vocab;
    if (k < 1 || k > V) throw std::invalid_argument("topk: k must be in [1, " + std::to_string(V) + "]");
    const auto logits = forward_logits(model.weights, image, prompt_tokens(model.tokenizer, prompt));
    std::vector<std::vector<TokenProb>> out;
    std::vector<TokenProb> row(V);
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        auto z = logits.values().subspan(i * V, V);
        const double mx = *std::max_element(z.begin(), z.end());
        double total = 0.0;
        for (std::size_t j = 0; j < V; ++j) {
            row[j] = {static_cast<TokenId>(j), std::exp(double(z[j]) - mx)};
            total += row[j].prob;
        }
        for (auto& t : row) t.prob /= total;
        std::stable_sort(row.begin(), row.end(), [](const TokenProb& a, const TokenProb& b) { return a.prob > b.prob; });
        out.emplace_back(row.begin(), row.begin() + std::ptrdiff_t(k));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Experiments
// ---------------------------------------------------------------------------

/// Runs fn(0..n-1) on up to `workers` threads; results keep index order.
template <class R>
std::vector<R> parallel_map(std::size_t n, std::size_t workers, const std::function<R(std::size_t)>& fn) {
    std::vector<std::optional<R>> slots(n);
    if (workers <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) slots[i].emplace(fn(i));
    } else {
        std::atomic<std::size_t> next{0};
        std::exception_ptr error;
        std::mutex error_mu;
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < std::min(workers, n); ++w)
            pool.emplace_back([&] {
                for (std::size_t i; (i = next++) < n;) {
                    try {
                        slots[i].emplace(fn(i));
                    } catch (...) {
                        std::lock_guard lock(error_mu);
                        if (!error) error = std::current_exception();
                    }
                }
            });
        for (auto& t : pool) t.join();
        if (error) std::rethrow_exception(error);
    }
    std::vector<R> out;
    out.reserve(n);
    for (auto& s : slots) out.push_back(std::move(*s));
    return out;
}

struct AttackEval {
    AsrReport report;
    LossBreakdown final_loss;
    Image adversarial;
};

inline AttackEval attack_and_evaluate(const MicroVlm& model, const Image& image, const AttackConfig& config,
                                      const std::vector<PromptSet>& eval_prompts, std::size_t max_new) {
    auto result = run_attack(model, image, config);
    AttackEval e;
    e.report = evaluate_asr(model, result.adversarial, eval_prompts, config.injection.target_text, max_new);
    if (!result.state.loss_history.empty()) e.final_loss = result.state.loss_history.back();
    e.adversarial = std::move(result.adversarial);
    return e;
}

struct MethodRow {
    std::string label;
    AttackConfig config;
    AsrReport report;
};

struct MethodTable {
    std::vector<MethodRow> rows;
};

/// One attack + evaluation per config; rows follow the input order.
inline MethodTable compare_methods(const MicroVlm& model, const Image& image, const std::string& target,
                                   std::vector<AttackConfig> configs, const std::vector<PromptSet>& eval_prompts,
                                   std::size_t max_new = kDefaultMaxNew, std::size_t workers = 1) {
    if (configs.empty()) throw std::invalid_argument("compare_methods: no configurations");
    for (auto& c : configs) c.injection.target_text = target;
    auto evals = parallel_map<AttackEval>(configs.size(), workers, [&](std::size_t i) {
        return attack_and_evaluate(model, image, configs[i], eval_prompts, max_new);
    });
    MethodTable t;
    for (std::size_t i = 0; i < configs.size(); ++i)
        t.rows.push_back({std::string(to_string(configs[i].variant)), configs[i], std::move(evals[i].report)});
    return t;
}

/// The five variants sharing one base configuration.
inline std::vector<AttackConfig> variant_configs(const AttackConfig& base) {
    std::vector<AttackConfig> out;
    for (auto v : kAllVariants) {
        auto c = base;
        c.variant = v;
        out.push_back(std::move(c));
    }
    return out;
}

struct AbCell {
    double alpha = 0.0;
    double beta = 0.0;
    double overall = 0.0;
    std::vector<CategoryAsr> per_category;
    double final_loss = 0.0;
    friend bool operator==(const AbCell&, const AbCell&) = default;
};

inline std::vector<AbCell> sweep_alpha_beta(const MicroVlm& model, const Image& image, const std::string& target,
                                            const AttackConfig& base, const std::vector<std::pair<double, double>>& grid,
                                            const std::vector<PromptSet>& eval_prompts,
                                            std::size_t max_new = kDefaultMaxNew, std::size_t workers = 1) {
    if (grid.empty()) throw std::invalid_argument("sweep_alpha_beta: empty grid");
    for (auto [a, b] : grid)
        if (!(a >= 0 && a <= 1 && b >= 0 && b <= 1))
            throw std::invalid_argument("sweep_alpha_beta: cell (" + std::to_string(a) + ", " + std::to_string(b) +
                                        ") outside [0,1]^2");
    return parallel_map<AbCell>(grid.size(), workers, [&](std::size_t i) {
        const auto [a, b] = grid[i];
        auto c = base;
        c.variant = Variant::cia;
        c.weights = {a, b};
        c.injection.target_text = target;
        try {
            auto e = attack_and_evaluate(model, image, c, eval_prompts, max_new);
            return AbCell{a, b, e.report.overall, e.report.per_category, e.final_loss.l_total};
        } catch (const std::exception& ex) {
            throw std::runtime_error("sweep cell (alpha=" + std::to_string(a) + ", beta=" + std::to_string(b) +
                                     "): " + ex.what());
        }
    });
}

/// Cartesian product alphas × betas, alpha-major.
inline std::vector<std::pair<double, double>> make_grid(const std::vector<double>& alphas, const std::vector<double>& betas) {
    std::vector<std::pair<double, double>> g;
    for (double a : alphas)
        for (double b : betas) g.emplace_back(a, b);
    return g;
}

struct EpsResult {
    double epsilon = 0.0;
    AsrReport report;
    friend bool operator==(const EpsResult&, const EpsResult&) = default;
};

inline std::vector<EpsResult> sweep_epsilon(const MicroVlm& model, const Image& image, const std::string& target,
                                            const AttackConfig& base, const std::vector<double>& eps_list,
                                            const std::vector<PromptSet>& eval_prompts,
                                            std::size_t max_new = kDefaultMaxNew, std::size_t workers = 1) {
    if (eps_list.empty()) throw std::invalid_argument("sweep_epsilon: empty epsilon list");
    for (double e : eps_list)
        if (!(e > 0.0)) throw std::invalid_argument("sweep_epsilon: epsilon values must be > 0");
    return parallel_map<EpsResult>(eps_list.size(), workers, [&](std::size_t i) {
        auto c = base;
        c.epsilon_v = eps_list[i];
        c.injection.target_text = target;
        try {
            return EpsResult{eps_list[i], attack_and_evaluate(model, image, c, eval_prompts, max_new).report};
        } catch (const std::exception& ex) {
            throw std::runtime_error("sweep epsilon=" + std::to_string(eps_list[i]) + ": " + ex.what());
        }
    });
}

}  // namespace cia
