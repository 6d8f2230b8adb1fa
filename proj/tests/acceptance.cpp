// Prints one PASS/FAIL line per acceptance criterion; exits non-zero on any FAIL.
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <iostream>
#include <sstream>
#include <thread>

#include <cia/cia.hpp>

using namespace cia;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
    bool pass;
    std::string detail;
};

int failures = 0;

void report(int id, const char* name, const std::function<Outcome()>& check) {
    Outcome o;
    try {
        o = check();
    } catch (const std::exception& e) {
        o = {false, std::string("exception: ") + e.what()};
    }
    if (!o.pass) ++failures;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << " (" << name << "): " << o.detail << std::endl;
}

std::string fmt(double v) { return detail::fmt_num(v); }

std::size_t workers() { return std::max(1u, std::min(8u, std::thread::hardware_concurrency())); }

const MicroVlm& fixture_model() {
    static const MicroVlm m = make_micro_vlm(42);
    return m;
}

const CorpusSplit& fixture_split() {
    static const CorpusSplit s = split_corpus(bundled_corpus(), 6, 42);
    return s;
}

AttackConfig fixture_config(std::size_t iters) {
    AttackConfig c;
    c.max_iters = iters;
    c.injection.target_text = "dog";
    c.train_prompts = interleave_prompts(fixture_split().train, 6);
    return c;
}

// The 600-iteration CIA run is shared by criteria 4, 5 and 7.
const AttackResult& fixture_attack() {
    static const AttackResult r = run_attack(fixture_model(), synthetic_image(42), fixture_config(600));
    return r;
}

Outcome gradient_correctness() {
    const auto t0 = Clock::now();
    ModelDims dims;
    dims.image = 8;
    const auto model = make_micro_vlm(42, dims);
    const std::vector<std::string> targets{"dog", "cat", "bomb", "bird", "yes", "sorry", "virus", "flower"};
    std::vector<std::string> prompts;
    for (const auto& s : bundled_corpus())
        for (const auto& p : s.prompts) prompts.push_back(p);

    SplitMix64 rng(2024);
    double worst = 0.0;
    std::size_t checked = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const auto img = synthetic_image(rng.next(), 8, 8);
        InjectionSpec spec;
        spec.target_text = targets[rng.below(targets.size())];
        const auto seq = build_attack_sequence(model.tokenizer, prompts[rng.below(prompts.size())], spec, model.end_v());
        LossWeights w{rng.uniform(), rng.uniform()};
        auto loss = [&](ad::Tape<double>& t, ad::Var<double> x) {
            auto logits = forward(t, model.weights, x, seq.tokens);
            return total_loss(loss_visual(logits, seq.visual_targets), loss_textual(logits, seq.misleading, seq.layout),
                              loss_output(logits, seq.output_targets, seq.layout), w);
        };
        const auto x0 = image_tensor(img).cast<double>();
        ad::Tape<double> tape;
        auto x = tape.leaf(x0);
        const auto analytic = tape.backward(loss(tape, x)).wrt(x);
        const auto numeric = ad::finite_difference_gradient(
            [&](const ad::Tensor<double>& v) {
                ad::Tape<double> t;
                return loss(t, t.leaf(v)).value().item();
            },
            x0, 1e-5);
        for (std::size_t i = 0; i < analytic.size(); ++i) {
            const double a = analytic[i], n = numeric[i];
            if (std::abs(a) <= 1e-6) continue;
            ++checked;
            worst = std::max(worst, std::abs(a - n) / std::abs(a));
        }
    }
    const double secs = seconds_since(t0);
    return {worst <= 1e-3 && checked > 0 && secs < 120.0,
            "100 triples, " + std::to_string(checked) + " coordinates, worst rel err " + fmt(worst) + ", " + fmt(secs) +
                " s"};
}

Outcome loss_algebra() {
    SplitMix64 rng(7);
    double worst = 0.0;
    bool collapses = true;
    for (int i = 0; i < 1000; ++i) {
        const double lv = rng.uniform(0, 10), lt = rng.uniform(0, 10), lo = rng.uniform(0, 10);
        const LossWeights w{rng.uniform(), rng.uniform()};
        const long double a = w.alpha, b = w.beta;
        const long double expect = a * (b * lv + (1 - b) * lt) + (1 - a) * lo;
        worst = std::max(worst, double(std::abs(total_loss(lv, lt, lo, w) - expect)));
        collapses = collapses && total_loss(lv, lt, lo, {1.0, 1.0}) == lv && total_loss(lv, lt, lo, {0.0, w.beta}) == lo;
    }
    ad::Tape<float> tape;
    auto logits = tape.constant(ad::Tensor<float>::zeros({5, 64}));
    const std::vector<std::size_t> rows{0, 1, 2, 3, 4}, targets{4, 9, 17, 40, 63};
    const double ce = ad::cross_entropy_rows(logits, rows, targets).value().item();
    const double ce_err = std::abs(ce - std::log(64.0));
    return {worst <= 1e-9 && collapses && ce_err <= 1e-5,
            "1000 tuples, worst abs err " + fmt(worst) + ", collapses " + (collapses ? "exact" : "inexact") +
                ", uniform CE - ln 64 = " + fmt(ce_err)};
}

Outcome pgd_invariants() {
    const auto& model = fixture_model();
    const auto img = synthetic_image(42);
    auto cfg = fixture_config(2000);
    const float eps = static_cast<float>(cfg.epsilon_v);
    std::size_t iterations = 0, violations = 0;
    const auto full = run_attack(model, img, cfg, [&](const PerturbationState& s, const Image& adv) {
        ++iterations;
        for (std::size_t i = 0; i < s.delta.size(); ++i)
            if (!(std::abs(s.delta[i]) <= eps) || adv.values[i] < 0.0f || adv.values[i] > 1.0f) ++violations;
    });
    PerturbationState zero;
    zero.delta.assign(img.size(), 0.0f);
    const auto first = resume(model, img, cfg, zero, 1300);
    const auto second = resume(model, img, cfg, first.state, 700);
    const bool bitwise = second.state == full.state &&
                         std::equal(second.adversarial.values.begin(), second.adversarial.values.end(),
                                    full.adversarial.values.begin(), [](float a, float b) {
                                        return std::bit_cast<std::uint32_t>(a) == std::bit_cast<std::uint32_t>(b);
                                    });
    return {iterations == 2000 && violations == 0 && bitwise,
            std::to_string(iterations) + " iterations, " + std::to_string(violations) +
                " violations, resume(1300)+resume(700) " + (bitwise ? "bitwise equal" : "differs")};
}

Outcome attack_efficacy() {
    const auto t0 = Clock::now();
    const auto& r = fixture_attack();
    const auto& h = r.state.loss_history;
    const auto clean = evaluate_asr(fixture_model(), synthetic_image(42), fixture_split().eval, "dog");
    const auto adv = evaluate_asr(fixture_model(), r.adversarial, fixture_split().eval, "dog");
    const double secs = seconds_since(t0);
    return {h.back().l_total < h.front().l_total && adv.overall > clean.overall && secs < 300.0,
            "loss " + fmt(h.front().l_total) + " -> " + fmt(h.back().l_total) + ", ASR clean " + fmt(clean.overall) +
                " -> CIA " + fmt(adv.overall) + ", " + fmt(secs) + " s"};
}

Outcome method_ordering() {
    const auto table = compare_methods(fixture_model(), synthetic_image(42), "dog",
                                       variant_configs(fixture_config(600)), fixture_split().eval, 8, workers());
    bool shape = table.rows.size() == 5;
    double sp = 0, mp = 0, cia_asr = 0;
    std::ostringstream line;
    for (const auto& row : table.rows) {
        shape = shape && row.report.per_category.size() == 3;
        line << row.label << " " << fmt(row.report.overall) << ", ";
        if (row.label == "single_p") sp = row.report.overall;
        if (row.label == "multi_p") mp = row.report.overall;
        if (row.label == "cia") cia_asr = row.report.overall;
    }
    line << "table " << (shape ? "5x(3+overall)" : "malformed");
    return {shape && cia_asr >= std::max(sp, mp), line.str()};
}

Outcome epsilon_monotone() {
    const auto r = sweep_epsilon(fixture_model(), synthetic_image(42), "dog", fixture_config(600),
                                 {8.0 / 255.0, 32.0 / 255.0}, fixture_split().eval, 8, workers());
    return {r.size() == 2 && r[1].report.overall >= r[0].report.overall,
            "ASR eps 8/255 " + fmt(r[0].report.overall) + ", eps 32/255 " + fmt(r[1].report.overall)};
}

Outcome ce_shift() {
    const auto& model = fixture_model();
    const auto img = synthetic_image(42);
    const auto cfg = fixture_config(600);
    const std::string prompt = "classify the content of this image .";
    const auto clean = ce_by_position(model, img, prompt, "dog", cfg.injection);
    const auto adv = ce_by_position(model, fixture_attack().adversarial, prompt, "dog", cfg.injection);
    const auto zero = ce_by_position(model, apply_perturbation(img, std::vector<float>(img.size(), 0.0f)), prompt, "dog",
                                     cfg.injection);
    const bool lower = adv.visual_mean < clean.visual_mean && adv.text_mean < clean.text_mean;
    return {lower && zero == clean, "visual CE " + fmt(clean.visual_mean) + " -> " + fmt(adv.visual_mean) +
                                        ", text CE " + fmt(clean.text_mean) + " -> " + fmt(adv.text_mean) +
                                        ", delta=0 profile " + (zero == clean ? "identical" : "differs")};
}

Outcome cli_determinism() {
    const auto dir = fs::temp_directory_path() / "cia_acceptance_cli";
    fs::remove_all(dir);
    const std::string cmd = std::string(CIA_TOOL_PATH) + " attack --iters 300 --target dog --seed 42 --out " +
                            dir.string() + " > " + (fs::temp_directory_path() / "cia_acceptance_cli.log").string() +
                            " 2>&1";
    if (std::system(cmd.c_str()) != 0) return {false, "first run failed"};
    const auto ciaf = detail::read_file(dir / "adversarial.ciaf"), rep = detail::read_file(dir / "report.json");
    if (std::system(cmd.c_str()) != 0) return {false, "second run failed"};
    const bool same = ciaf == detail::read_file(dir / "adversarial.ciaf") && rep == detail::read_file(dir / "report.json");
    fs::remove_all(dir);
    return {same, std::string("two attack runs: CIAF1 and report.json ") + (same ? "byte-identical" : "differ")};
}

Outcome io_contracts() {
    SplitMix64 rng(11);
    Image img(16, 16, 3);
    for (auto& v : img.values) v = static_cast<float>(rng.uniform());
    const auto back = decode_ciaf(encode_ciaf(img));
    bool ciaf = back.values.size() == img.values.size();
    for (std::size_t i = 0; ciaf && i < img.size(); ++i)
        ciaf = std::bit_cast<std::uint32_t>(back.values[i]) == std::bit_cast<std::uint32_t>(img.values[i]);

    Image grid(16, 16, 3);
    for (std::size_t i = 0; i < grid.size(); ++i) grid.values[i] = float(i % 256) / 255.0f;
    const auto grid_back = decode_ppm(encode_ppm(grid));
    const bool ppm = grid_back.values == grid.values;

    bool prompts = true;
    const std::pair<const char*, Category> files[] = {
        {"cls.txt", Category::cls}, {"cap.txt", Category::cap}, {"vqa.txt", Category::vqa}};
    std::string counts;
    for (const auto& [file, cat] : files) {
        const auto set = load_prompts(fs::path(CIA_DATA_DIR) / "prompts" / file, cat);
        const auto& bundled = bundled_prompts(cat);
        prompts = prompts && set.prompts.size() == 10 && std::equal(set.prompts.begin(), set.prompts.end(), bundled.begin());
        counts += (counts.empty() ? "" : "/") + std::to_string(set.prompts.size());
    }
    return {ciaf && ppm && prompts, std::string("CIAF1 ") + (ciaf ? "bitwise" : "lossy") + ", PPM 8-bit grid " +
                                        (ppm ? "exact" : "inexact") + ", prompts " + counts};
}

}  // namespace

int main() {
    report(1, "gradient correctness", gradient_correctness);
    report(2, "loss algebra", loss_algebra);
    report(3, "PGD invariants", pgd_invariants);
    report(4, "attack efficacy", attack_efficacy);
    report(5, "method ordering", method_ordering);
    report(6, "epsilon monotonicity", epsilon_monotone);
    report(7, "CE shift", ce_shift);
    report(8, "end-to-end determinism", cli_determinism);
    report(9, "I/O contracts", io_contracts);
    return failures == 0 ? 0 : 1;
}
