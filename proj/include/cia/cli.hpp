#pragma once

// Command-line front end: `cia <subcommand> [options]`.
//
// Every subcommand resolves a RunConfig (defaults, then --config file, then
// flags), does its work, and writes report.json plus flat tables into the
// output directory. Output directory precedence: --out, then $CIA_OUT_DIR,
// then the config's output_dir.

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "attack.hpp"
#include "eval.hpp"
#include "image.hpp"
#include "io.hpp"
#include "model.hpp"

namespace cia {

inline constexpr const char* kOutDirEnv = "CIA_OUT_DIR";

namespace cli {

/// Raw flag values; unset optionals leave the config untouched.
struct Flags {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> target, image, adversarial, out, eps, eta, alpha, beta, variant, padding_token,
        padding_strategy, early_stop, prompt, alphas, betas, prompts_cls, prompts_cap, prompts_vqa, misleading_template;
    std::optional<std::size_t> iters, max_new, padding_count, train_prompts, workers, k;
    std::vector<std::string> variants;
    bool record_time = false;
};

inline void add_common(CLI::App& app, Flags& f) {
    app.add_option("--config", f.config_path, "run-config JSON (a previous report.json also works)");
    app.add_option("--seed", f.seed, "seed for model weights, corpus split and attack schedule");
    app.add_option("--target", f.target, "target word to inject");
    app.add_option("--image", f.image, "input image (P6 PPM or CIAF1); default: synthetic image");
    app.add_option("--out", f.out, std::string("output directory (env ") + kOutDirEnv + ")");
    app.add_option("--max-new", f.max_new, "tokens generated per evaluation prompt");
    app.add_option("--train-prompts", f.train_prompts, "training prompts per category in the split");
    app.add_option("--prompts-cls", f.prompts_cls, "CLS prompt file");
    app.add_option("--prompts-cap", f.prompts_cap, "CAP prompt file");
    app.add_option("--prompts-vqa", f.prompts_vqa, "VQA prompt file");
    app.add_option("--template", f.misleading_template, "misleading description, containing {target}");
    app.add_option("--padding-token", f.padding_token, "padding character");
    app.add_option("--padding-strategy", f.padding_strategy, "none, prefix, suffix or mixed");
    app.add_option("--padding-count", f.padding_count, "number of padding characters");
    app.add_flag("--record-time", f.record_time, "store wall-clock timestamps in the report");
}

inline void add_attack_opts(CLI::App& app, Flags& f, bool eps_list) {
    app.add_option("--iters", f.iters, "PGD iterations");
    app.add_option("--eps", f.eps, eps_list ? "comma-separated epsilon list, fractions allowed" : "L-inf budget, e.g. 16/255");
    app.add_option("--eta", f.eta, "step size");
    app.add_option("--alpha", f.alpha, "weight of context injection vs output loss");
    app.add_option("--beta", f.beta, "weight of visual vs textual context");
    app.add_option("--early-stop", f.early_stop, "stop once the total loss drops below this value");
    app.add_option("--workers", f.workers, "worker threads for multi-attack commands");
}

inline std::string utc_now() {
    const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

inline void set_prompt_file(RunConfig& c, const char* key, const std::optional<std::string>& path) {
    if (path) c.prompts[key] = PromptSource{*path, "", ""};
}

inline RunConfig resolve_config(const Flags& f, bool eps_list) {
    RunConfig c = f.config_path.empty() ? RunConfig{} : load_config(f.config_path);
    if (f.seed) c.model_seed = c.split_seed = c.attack.seed = *f.seed;
    if (f.target) c.attack.injection.target_text = *f.target;
    if (f.image) c.image = *f.image;
    if (f.adversarial) c.adversarial = *f.adversarial;
    if (f.out) c.output_dir = *f.out;
    else if (const char* env = std::getenv(kOutDirEnv); env && *env) c.output_dir = env;
    if (f.max_new) c.max_new = *f.max_new;
    if (f.train_prompts) c.train_per_category = *f.train_prompts;
    set_prompt_file(c, "CLS", f.prompts_cls);
    set_prompt_file(c, "CAP", f.prompts_cap);
    set_prompt_file(c, "VQA", f.prompts_vqa);
    if (f.misleading_template) c.attack.injection.misleading_template = *f.misleading_template;
    if (f.padding_token) c.attack.injection.padding_token = *f.padding_token;
    if (f.padding_strategy) c.attack.injection.padding_strategy = parse_padding_strategy(*f.padding_strategy);
    if (f.padding_count) c.attack.injection.padding_count = *f.padding_count;
    if (f.iters) c.attack.max_iters = *f.iters;
    if (f.eps) {
        if (eps_list) c.eps_list = parse_number_list(*f.eps);
        else c.attack.epsilon_v = parse_number(*f.eps);
    }
    if (f.eta) c.attack.eta = parse_number(*f.eta);
    if (f.alpha) c.attack.weights.alpha = parse_number(*f.alpha);
    if (f.beta) c.attack.weights.beta = parse_number(*f.beta);
    if (f.variant) c.attack.variant = parse_variant(*f.variant);
    if (f.early_stop) c.attack.early_stop_loss = parse_number(*f.early_stop);
    if (f.workers) c.workers = *f.workers;
    if (f.prompt) c.analyze_prompt = *f.prompt;
    if (f.k) c.topk = *f.k;
    if (f.alphas) c.alpha_grid = parse_number_list(*f.alphas);
    if (f.betas) c.beta_grid = parse_number_list(*f.betas);
    if (!f.variants.empty()) c.variants = f.variants;
    for (const auto& v : c.variants) (void)parse_variant(v);
    c.dims.validate();
    c.attack.weights.validate();
    return c;
}

/// Everything a subcommand needs, built once from the config.
struct Session {
    RunConfig config;
    MicroVlm model;
    Image image;
    CorpusSplit split;
    AttackConfig attack;
    ResultRecord record;
    fs::path dir;
};

inline Session open_session(const RunConfig& c, const std::string& command, bool record_time) {
    Session s{c, make_micro_vlm(c.model_seed, c.dims), {}, {}, {}, {}, c.output_dir};
    s.image = c.image.empty() ? synthetic_image(c.model_seed, c.dims.image, c.dims.image) : load_image(c.image);
    s.split = resolve_prompts(c);
    s.attack = resolved_attack(c, s.split);
    s.attack.injection.validate(s.model.tokenizer);
    s.record.command = command;
    s.record.config = c;
    s.record.run_id = compute_run_id(c, command);
    if (record_time) s.record.timestamps = Timestamps{utc_now(), ""};
    return s;
}

inline void finish(Session& s, std::ostream& out) {
    if (s.record.timestamps) s.record.timestamps->finished = utc_now();
    write_report(s.record, s.dir);
    out << "report: " << (s.dir / "report.json").string() << "\n";
}

inline void print_asr(std::ostream& out, const std::string& name, const AsrReport& r) {
    out << name << ": overall " << detail::fmt_num(r.overall);
    for (const auto& c : r.per_category) out << "  " << to_string(c.category) << " " << detail::fmt_num(c.asr);
    out << "\n";
}

inline void cmd_attack(Session& s, std::ostream& out) {
    const auto& tgt = s.attack.injection.target_text;
    auto result = run_attack(s.model, s.image, s.attack);
    fs::create_directories(s.dir);
    save_image_f32(result.adversarial, s.dir / "adversarial.ciaf");
    save_image_ppm(result.adversarial, s.dir / "adversarial.ppm");
    s.record.artifacts["adversarial_ciaf"] = "adversarial.ciaf";
    s.record.artifacts["adversarial_ppm"] = "adversarial.ppm";
    s.record.loss_history = result.state.loss_history;
    s.record.asr.push_back({"clean", evaluate_asr(s.model, s.image, s.split.eval, tgt, s.config.max_new)});
    s.record.asr.push_back({"adversarial", evaluate_asr(s.model, result.adversarial, s.split.eval, tgt, s.config.max_new)});
    const auto& h = result.state.loss_history;
    if (!h.empty())
        out << "loss: " << detail::fmt_num(h.front().l_total) << " -> " << detail::fmt_num(h.back().l_total) << " over "
            << h.size() << " iterations\n";
    for (const auto& n : s.record.asr) print_asr(out, n.name, n.report);
}

inline void cmd_evaluate(Session& s, std::ostream& out) {
    const auto& tgt = s.attack.injection.target_text;
    s.record.asr.push_back({"image", evaluate_asr(s.model, s.image, s.split.eval, tgt, s.config.max_new)});
    if (!s.config.adversarial.empty())
        s.record.asr.push_back(
            {"adversarial", evaluate_asr(s.model, load_image(s.config.adversarial), s.split.eval, tgt, s.config.max_new)});
    for (const auto& n : s.record.asr) print_asr(out, n.name, n.report);
}

inline void cmd_analyze(Session& s, std::ostream& out) {
    const auto& inj = s.attack.injection;
    std::vector<std::pair<std::string, Image>> images{{"image", s.image}};
    if (!s.config.adversarial.empty()) images.emplace_back("adversarial", load_image(s.config.adversarial));
    fs::create_directories(s.dir);
    for (const auto& [name, img] : images) {
        auto p = ce_by_position(s.model, img, s.config.analyze_prompt, inj.target_text, inj, s.config.max_new);
        out << name << ": visual CE " << detail::fmt_num(p.visual_mean) << ", text CE " << detail::fmt_num(p.text_mean)
            << "\n";
        s.record.ce_profiles.push_back({name, std::move(p)});
        const auto file = "topk_" + name + ".csv";
        detail::write_file(s.dir / file,
                           topk_csv(s.model.tokenizer,
                                    topk_decode_by_position(s.model, img, s.config.analyze_prompt, s.config.topk),
                                    s.model.end_v()));
        s.record.artifacts["topk_" + name] = file;
    }
}

inline void cmd_compare(Session& s, std::ostream& out) {
    const auto& tgt = s.attack.injection.target_text;
    std::vector<AttackConfig> configs;
    for (const auto& v : s.config.variants) {
        auto c = s.attack;
        c.variant = parse_variant(v);
        configs.push_back(std::move(c));
    }
    s.record.asr.push_back({"clean", evaluate_asr(s.model, s.image, s.split.eval, tgt, s.config.max_new)});
    auto table = compare_methods(s.model, s.image, tgt, configs, s.split.eval, s.config.max_new, s.config.workers);
    for (auto& row : table.rows) s.record.asr.push_back({row.label, std::move(row.report)});
    for (const auto& n : s.record.asr) print_asr(out, n.name, n.report);
}

inline void cmd_sweep_ab(Session& s, std::ostream& out) {
    s.record.ab_grid = sweep_alpha_beta(s.model, s.image, s.attack.injection.target_text, s.attack,
                                        make_grid(s.config.alpha_grid, s.config.beta_grid), s.split.eval,
                                        s.config.max_new, s.config.workers);
    for (const auto& c : s.record.ab_grid)
        out << "alpha " << detail::fmt_num(c.alpha) << " beta " << detail::fmt_num(c.beta) << ": asr "
            << detail::fmt_num(c.overall) << "\n";
}

inline void cmd_sweep_eps(Session& s, std::ostream& out) {
    auto results = sweep_epsilon(s.model, s.image, s.attack.injection.target_text, s.attack, s.config.eps_list,
                                 s.split.eval, s.config.max_new, s.config.workers);
    for (auto& r : results) {
        s.record.asr.push_back({"eps_" + detail::fmt_num(r.epsilon * 255.0) + "_255", std::move(r.report)});
        print_asr(out, s.record.asr.back().name, s.record.asr.back().report);
    }
}

inline void cmd_inject_text(Session& s, std::ostream& out) {
    const auto& inj = s.attack.injection;
    s.record.asr.push_back({"plain", textual_injection_eval(s.model, s.image, s.split.eval, "", inj.target_text,
                                                            s.config.max_new)});
    s.record.asr.push_back({"injected", textual_injection_eval(s.model, s.image, s.split.eval, inj, s.config.max_new)});
    for (const auto& n : s.record.asr) print_asr(out, n.name, n.report);
}

}  // namespace cli

/// Entry point for the `cia` tool. Returns the process exit code.
inline int cli_main(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Contextual-injection attacks on a seeded micro vision-language model", "cia"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(kToolVersion));

    cli::Flags f;
    struct Cmd {
        const char* name;
        const char* help;
        void (*run)(cli::Session&, std::ostream&);
        bool attack_opts;
        bool eps_list;
    };
    const Cmd cmds[] = {
        {"attack", "optimise one adversarial image and save it", cli::cmd_attack, true, false},
        {"evaluate", "attack success rate of an image on the eval prompts", cli::cmd_evaluate, false, false},
        {"analyze", "target-token CE profile and top-k decodes per position", cli::cmd_analyze, false, false},
        {"compare", "attack every variant and tabulate ASR", cli::cmd_compare, true, false},
        {"sweep-ab", "ASR over an alpha x beta grid", cli::cmd_sweep_ab, true, false},
        {"sweep-eps", "ASR over a list of epsilon budgets", cli::cmd_sweep_eps, true, true},
        {"inject-text", "ASR with the misleading text prepended to each prompt", cli::cmd_inject_text, false, false},
    };
    std::vector<CLI::App*> subs;
    for (const auto& c : cmds) {
        auto* sub = app.add_subcommand(c.name, c.help);
        cli::add_common(*sub, f);
        if (c.attack_opts) cli::add_attack_opts(*sub, f, c.eps_list);
        subs.push_back(sub);
    }
    subs[0]->add_option("--variant", f.variant, "cia, cia_image, cia_text, single_p or multi_p");
    subs[1]->add_option("--adversarial", f.adversarial, "second image to evaluate");
    subs[2]->add_option("--adversarial", f.adversarial, "perturbed image to profile alongside --image");
    subs[2]->add_option("--prompt", f.prompt, "prompt to profile");
    subs[2]->add_option("--k", f.k, "candidates per position");
    subs[3]->add_option("--variants", f.variants, "subset of variants to run")->delimiter(',');
    subs[4]->add_option("--alphas", f.alphas, "comma-separated alpha values");
    subs[4]->add_option("--betas", f.betas, "comma-separated beta values");

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n" << app.help();
        return 2;
    }

    try {
        for (std::size_t i = 0; i < subs.size(); ++i) {
            if (!subs[i]->parsed()) continue;
            const auto config = cli::resolve_config(f, cmds[i].eps_list);
            auto session = cli::open_session(config, cmds[i].name, f.record_time);
            cmds[i].run(session, out);
            cli::finish(session, out);
        }
    } catch (const std::exception& e) {
        std::string msg = e.what();
        for (auto& ch : msg)
            if (ch == '\n') ch = ' ';
        err << "error: " << msg << "\n";
        return 1;
    }
    return 0;
}

}  // namespace cia
