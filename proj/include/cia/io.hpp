#pragma once

// File formats: PPM (P6), CIAF1 float images, prompt lists, run configs and
// result reports.
//
// CIAF1 layout, all little-endian:
//   bytes 0-4   "CIAF1"
//   bytes 5-16  uint32 height, width, channels
//   then        height*width*channels float32, row-major (y, x, c)

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "attack.hpp"
#include "eval.hpp"
#include "image.hpp"
#include "model.hpp"
#include "objective.hpp"

namespace cia {

inline constexpr std::string_view kToolVersion = "0.1.0";

class IoError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

namespace fs = std::filesystem;

namespace detail {

inline std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const fs::path& path, std::string_view bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out.write(bytes.data(), std::streamsize(bytes.size()));
    if (!out) throw IoError("write failed for '" + path.string() + "'");
}

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint32_t get_u32(std::string_view in, std::size_t at) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t(static_cast<unsigned char>(in[at + i])) << (8 * i);
    return v;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Images
// ---------------------------------------------------------------------------

inline Image decode_ppm(std::string_view bytes, const std::string& name = "<memory>") {
    std::size_t pos = 0;
    auto fail = [&](const std::string& why) -> Image { throw IoError("ppm '" + name + "': " + why); };
    auto skip_space = [&] {
        while (pos < bytes.size()) {
            if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
                ++pos;
            } else {
                break;
            }
        }
    };
    auto read_int = [&](const char* what) -> long {
        skip_space();
        const std::size_t start = pos;
        while (pos < bytes.size() && std::isdigit(static_cast<unsigned char>(bytes[pos]))) ++pos;
        if (start == pos || pos - start > 9) {
            fail(std::string("malformed header, expected ") + what);
        }
        return std::stol(std::string(bytes.substr(start, pos - start)));
    };
    if (bytes.size() < 2 || bytes.substr(0, 2) != "P6") return fail("wrong magic, expected P6");
    pos = 2;
    const long w = read_int("width"), h = read_int("height"), maxval = read_int("maxval");
    if (w <= 0 || h <= 0) return fail("non-positive dimensions");
    if (maxval != 255) return fail("maxval " + std::to_string(maxval) + " unsupported, expected 255");
    if (pos >= bytes.size() || !std::isspace(static_cast<unsigned char>(bytes[pos])))
        return fail("malformed header, missing separator before pixel data");
    ++pos;
    const std::size_t n = std::size_t(w) * std::size_t(h) * 3;
    if (bytes.size() - pos < n)
        return fail("truncated payload, expected " + std::to_string(n) + " bytes, got " + std::to_string(bytes.size() - pos));
    Image img(std::size_t(h), std::size_t(w), 3);
    for (std::size_t i = 0; i < n; ++i)
        img.values[i] = static_cast<float>(static_cast<unsigned char>(bytes[pos + i]) / 255.0);
    return img;
}

inline std::string encode_ppm(const Image& img) {
    if (img.channels != 3) throw IoError("ppm: only 3-channel images can be saved");
    std::string out = "P6\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
    for (float v : img.values) {
        const double b = std::floor(double(v) * 255.0 + 0.5);
        out.push_back(static_cast<char>(static_cast<unsigned char>(std::clamp(b, 0.0, 255.0))));
    }
    return out;
}

inline Image load_image_ppm(const fs::path& path) { return decode_ppm(detail::read_file(path), path.string()); }
inline void save_image_ppm(const Image& img, const fs::path& path) { detail::write_file(path, encode_ppm(img)); }

inline constexpr std::string_view kCiafMagic = "CIAF1";

inline std::string encode_ciaf(const Image& img) {
    std::string out(kCiafMagic);
    detail::put_u32(out, static_cast<std::uint32_t>(img.height));
    detail::put_u32(out, static_cast<std::uint32_t>(img.width));
    detail::put_u32(out, static_cast<std::uint32_t>(img.channels));
    for (float v : img.values) detail::put_u32(out, std::bit_cast<std::uint32_t>(v));
    return out;
}

inline Image decode_ciaf(std::string_view bytes, const std::string& name = "<memory>") {
    const std::size_t header = kCiafMagic.size() + 12;
    if (bytes.size() < kCiafMagic.size() || bytes.substr(0, kCiafMagic.size()) != kCiafMagic)
        throw IoError("ciaf '" + name + "': bad magic, expected CIAF1");
    if (bytes.size() < header) throw IoError("ciaf '" + name + "': truncated header");
    const std::uint64_t h = detail::get_u32(bytes, 5), w = detail::get_u32(bytes, 9), c = detail::get_u32(bytes, 13);
    const std::uint64_t n = h * w * c;
    if (n == 0) throw IoError("ciaf '" + name + "': zero-sized image");
    if (bytes.size() - header != n * 4)
        throw IoError("ciaf '" + name + "': header declares " + std::to_string(n) + " floats, payload holds " +
                      std::to_string((bytes.size() - header) / 4.0));
    Image img(h, w, c);
    for (std::size_t i = 0; i < n; ++i) img.values[i] = std::bit_cast<float>(detail::get_u32(bytes, header + 4 * i));
    try {
        img.validate_range();
    } catch (const std::exception& e) {
        throw IoError("ciaf '" + name + "': " + e.what());
    }
    return img;
}

inline Image load_image_f32(const fs::path& path) { return decode_ciaf(detail::read_file(path), path.string()); }
inline void save_image_f32(const Image& img, const fs::path& path) { detail::write_file(path, encode_ciaf(img)); }

/// Dispatches on the file's magic bytes.
inline Image load_image(const fs::path& path) {
    const auto bytes = detail::read_file(path);
    if (bytes.starts_with(kCiafMagic)) return decode_ciaf(bytes, path.string());
    if (bytes.starts_with("P6")) return decode_ppm(bytes, path.string());
    throw IoError("'" + path.string() + "' is neither a P6 PPM nor a CIAF1 image");
}

// ---------------------------------------------------------------------------
// Prompts
// ---------------------------------------------------------------------------

/// One prompt per line; '#' comments and blank lines skipped; duplicates dropped.
inline PromptSet parse_prompts(std::string_view text, Category category, Split split = Split::eval,
                               const std::string& name = "<memory>") {
    PromptSet set{category, {}, split};
    std::unordered_set<std::string> seen;
    std::istringstream in{std::string(text)};
    for (std::string line; std::getline(in, line);) {
        const auto b = line.find_first_not_of(" \t\r");
        if (b == std::string::npos || line[b] == '#') continue;
        const auto e = line.find_last_not_of(" \t\r");
        auto p = line.substr(b, e - b + 1);
        if (seen.insert(p).second) set.prompts.push_back(std::move(p));
    }
    if (set.prompts.empty()) throw IoError("prompts '" + name + "': no prompts after removing comments and blanks");
    return set;
}

inline PromptSet load_prompts(const fs::path& path, Category category, Split split = Split::eval) {
    return parse_prompts(detail::read_file(path), category, split, path.string());
}

// ---------------------------------------------------------------------------
// Numbers
// ---------------------------------------------------------------------------

/// Decimal or fraction ("16/255").
inline double parse_number(std::string_view s) {
    auto trim = [](std::string_view v) {
        while (!v.empty() && std::isspace(static_cast<unsigned char>(v.front()))) v.remove_prefix(1);
        while (!v.empty() && std::isspace(static_cast<unsigned char>(v.back()))) v.remove_suffix(1);
        return v;
    };
    auto one = [&](std::string_view v) {
        v = trim(v);
        std::string str(v);
        std::size_t used = 0;
        double x = 0;
        try {
            x = std::stod(str, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (str.empty() || used != str.size() || !std::isfinite(x))
            throw std::invalid_argument("not a number: '" + std::string(s) + "'");
        return x;
    };
    const auto slash = s.find('/');
    if (slash == std::string_view::npos) return one(s);
    const double den = one(s.substr(slash + 1));
    if (den == 0.0) throw std::invalid_argument("zero denominator in '" + std::string(s) + "'");
    return one(s.substr(0, slash)) / den;
}

inline std::vector<double> parse_number_list(std::string_view s) {
    std::vector<double> out;
    std::size_t start = 0;
    while (start <= s.size()) {
        const auto comma = s.find(',', start);
        const auto item = s.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start);
        out.push_back(parse_number(item));
        if (comma == std::string_view::npos) break;
        start = comma + 1;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

/// Prompt files for one category: either a single file split by seed, or
/// explicit train/eval files. All empty means the bundled corpus.
struct PromptSource {
    std::string all;
    std::string train;
    std::string eval;
    friend bool operator==(const PromptSource&, const PromptSource&) = default;
};

struct RunConfig {
    ModelDims dims;
    std::uint64_t model_seed = 42;
    AttackConfig attack;
    std::map<std::string, PromptSource> prompts;  // keyed by "CLS" / "CAP" / "VQA"
    std::size_t train_per_category = 6;
    std::size_t attack_prompt_count = 6;
    std::uint64_t split_seed = 42;
    std::size_t max_new = kDefaultMaxNew;
    std::string image;        // empty: synthetic image from model_seed
    std::string adversarial;  // analyze/evaluate: perturbed image to compare
    std::string output_dir = "cia-out";
    std::vector<double> eps_list{8.0 / 255.0, 16.0 / 255.0, 32.0 / 255.0};
    std::vector<double> alpha_grid{0.0, 0.3, 0.6, 1.0};
    std::vector<double> beta_grid{0.0, 0.3, 0.6, 1.0};
    std::vector<std::string> variants{"single_p", "multi_p", "cia_image", "cia_text", "cia"};
    std::string analyze_prompt = "classify the content of this image .";
    std::size_t topk = 5;
    std::size_t workers = 1;

    friend bool operator==(const RunConfig&, const RunConfig&) = default;
};

using nlohmann::json;

namespace detail {

template <class T>
void get_to(const json& j, std::string_view key, T& out) {
    if (auto it = j.find(key); it != j.end() && !it->is_null()) it->get_to(out);
}

inline void get_number(const json& j, std::string_view key, double& out) {
    auto it = j.find(key);
    if (it == j.end() || it->is_null()) return;
    if (it->is_string()) out = parse_number(it->get<std::string>());
    else out = it->get<double>();
}

inline void get_numbers(const json& j, std::string_view key, std::vector<double>& out) {
    auto it = j.find(key);
    if (it == j.end() || it->is_null()) return;
    if (it->is_string()) {
        out = parse_number_list(it->get<std::string>());
        return;
    }
    out.clear();
    for (const auto& v : *it) out.push_back(v.is_string() ? parse_number(v.get<std::string>()) : v.get<double>());
}

}  // namespace detail

inline void to_json(json& j, const ModelDims& d) {
    j = json{{"vocab", d.vocab},       {"width", d.width}, {"blocks", d.blocks}, {"patch", d.patch},
             {"image", d.image},       {"channels", d.channels}, {"ffn_mult", d.ffn_mult},
             {"max_seq", d.max_seq},   {"end_v", d.end_v}};
}
inline void from_json(const json& j, ModelDims& d) {
    detail::get_to(j, "vocab", d.vocab);
    detail::get_to(j, "width", d.width);
    detail::get_to(j, "blocks", d.blocks);
    detail::get_to(j, "patch", d.patch);
    detail::get_to(j, "image", d.image);
    detail::get_to(j, "channels", d.channels);
    detail::get_to(j, "ffn_mult", d.ffn_mult);
    detail::get_to(j, "max_seq", d.max_seq);
    detail::get_to(j, "end_v", d.end_v);
}

inline void to_json(json& j, const InjectionSpec& s) {
    j = json{{"target", s.target_text},
             {"template", s.misleading_template},
             {"padding_token", s.padding_token},
             {"padding_strategy", std::string(to_string(s.padding_strategy))},
             {"padding_count", s.padding_count}};
}
inline void from_json(const json& j, InjectionSpec& s) {
    detail::get_to(j, "target", s.target_text);
    detail::get_to(j, "template", s.misleading_template);
    detail::get_to(j, "padding_token", s.padding_token);
    if (auto it = j.find("padding_strategy"); it != j.end())
        s.padding_strategy = parse_padding_strategy(it->get<std::string>());
    detail::get_to(j, "padding_count", s.padding_count);
}

inline void to_json(json& j, const LossWeights& w) { j = json{{"alpha", w.alpha}, {"beta", w.beta}}; }
inline void from_json(const json& j, LossWeights& w) {
    detail::get_number(j, "alpha", w.alpha);
    detail::get_number(j, "beta", w.beta);
}

inline void to_json(json& j, const AttackConfig& c) {
    j = json{{"epsilon_v", c.epsilon_v},
             {"eta", c.eta},
             {"max_iters", c.max_iters},
             {"weights", c.weights},
             {"variant", std::string(to_string(c.variant))},
             {"train_prompts", c.train_prompts},
             {"injection", c.injection},
             {"seed", c.seed},
             {"early_stop_loss", c.early_stop_loss ? json(*c.early_stop_loss) : json(nullptr)}};
}
inline void from_json(const json& j, AttackConfig& c) {
    detail::get_number(j, "epsilon_v", c.epsilon_v);
    detail::get_number(j, "eta", c.eta);
    detail::get_to(j, "max_iters", c.max_iters);
    detail::get_to(j, "weights", c.weights);
    if (auto it = j.find("variant"); it != j.end()) c.variant = parse_variant(it->get<std::string>());
    detail::get_to(j, "train_prompts", c.train_prompts);
    detail::get_to(j, "injection", c.injection);
    detail::get_to(j, "seed", c.seed);
    if (auto it = j.find("early_stop_loss"); it != j.end()) {
        if (it->is_null()) c.early_stop_loss.reset();
        else {
            double v = 0;
            detail::get_number(j, "early_stop_loss", v);
            c.early_stop_loss = v;
        }
    }
}

inline void to_json(json& j, const PromptSource& p) { j = json{{"all", p.all}, {"train", p.train}, {"eval", p.eval}}; }
inline void from_json(const json& j, PromptSource& p) {
    if (j.is_string()) {
        p.all = j.get<std::string>();
        return;
    }
    detail::get_to(j, "all", p.all);
    detail::get_to(j, "train", p.train);
    detail::get_to(j, "eval", p.eval);
}

inline void to_json(json& j, const RunConfig& c) {
    j = json{{"model", {{"dims", c.dims}, {"seed", c.model_seed}}},
             {"attack", c.attack},
             {"prompts", c.prompts},
             {"train_per_category", c.train_per_category},
             {"attack_prompt_count", c.attack_prompt_count},
             {"split_seed", c.split_seed},
             {"max_new", c.max_new},
             {"image", c.image},
             {"adversarial", c.adversarial},
             {"output_dir", c.output_dir},
             {"eps_list", c.eps_list},
             {"alpha_grid", c.alpha_grid},
             {"beta_grid", c.beta_grid},
             {"variants", c.variants},
             {"analyze_prompt", c.analyze_prompt},
             {"topk", c.topk},
             {"workers", c.workers}};
}
inline void from_json(const json& j, RunConfig& c) {
    if (auto m = j.find("model"); m != j.end()) {
        detail::get_to(*m, "dims", c.dims);
        detail::get_to(*m, "seed", c.model_seed);
    }
    detail::get_to(j, "attack", c.attack);
    detail::get_to(j, "prompts", c.prompts);
    detail::get_to(j, "train_per_category", c.train_per_category);
    detail::get_to(j, "attack_prompt_count", c.attack_prompt_count);
    detail::get_to(j, "split_seed", c.split_seed);
    detail::get_to(j, "max_new", c.max_new);
    detail::get_to(j, "image", c.image);
    detail::get_to(j, "adversarial", c.adversarial);
    detail::get_to(j, "output_dir", c.output_dir);
    detail::get_numbers(j, "eps_list", c.eps_list);
    detail::get_numbers(j, "alpha_grid", c.alpha_grid);
    detail::get_numbers(j, "beta_grid", c.beta_grid);
    detail::get_to(j, "variants", c.variants);
    detail::get_to(j, "analyze_prompt", c.analyze_prompt);
    detail::get_to(j, "topk", c.topk);
    detail::get_to(j, "workers", c.workers);
}

inline std::string serialize_config(const RunConfig& c) { return json(c).dump(2) + "\n"; }

inline RunConfig parse_config(std::string_view text) {
    const auto j = json::parse(text);
    // A report file carries its config under "config".
    if (j.contains("config") && j.contains("run_id")) return j.at("config").get<RunConfig>();
    return j.get<RunConfig>();
}

inline RunConfig load_config(const fs::path& path) {
    try {
        return parse_config(detail::read_file(path));
    } catch (const json::exception& e) {
        throw IoError("config '" + path.string() + "': " + e.what());
    }
}

/// Resolves the configured prompt sources into train/eval splits.
inline CorpusSplit resolve_prompts(const RunConfig& c) {
    std::vector<PromptSet> whole;
    CorpusSplit explicit_split;
    for (auto cat : kCategories) {
        const auto key = std::string(to_string(cat));
        const auto it = c.prompts.find(key);
        if (it == c.prompts.end() || it->second == PromptSource{}) {
            PromptSet s{cat, {}, Split::eval};
            for (auto p : bundled_prompts(cat)) s.prompts.emplace_back(p);
            whole.push_back(std::move(s));
        } else if (!it->second.train.empty() || !it->second.eval.empty()) {
            if (it->second.train.empty() || it->second.eval.empty())
                throw IoError("prompts " + key + ": train and eval files must be given together");
            auto train = load_prompts(it->second.train, cat, Split::train);
            auto eval = load_prompts(it->second.eval, cat, Split::eval);
            for (const auto& p : train.prompts)
                for (const auto& q : eval.prompts)
                    if (p == q) throw IoError("prompts " + key + ": '" + p + "' appears in both train and eval");
            explicit_split.train.push_back(std::move(train));
            explicit_split.eval.push_back(std::move(eval));
        } else {
            whole.push_back(load_prompts(it->second.all, cat));
        }
    }
    auto split = split_corpus(whole, c.train_per_category, c.split_seed);
    for (auto& s : explicit_split.train) split.train.push_back(std::move(s));
    for (auto& s : explicit_split.eval) split.eval.push_back(std::move(s));
    auto by_category = [](const PromptSet& a, const PromptSet& b) { return a.category < b.category; };
    std::stable_sort(split.train.begin(), split.train.end(), by_category);
    std::stable_sort(split.eval.begin(), split.eval.end(), by_category);
    return split;
}

/// Attack config with training prompts filled from the train split when the
/// config does not list them explicitly.
inline AttackConfig resolved_attack(const RunConfig& c, const CorpusSplit& split) {
    auto a = c.attack;
    if (a.train_prompts.empty()) a.train_prompts = interleave_prompts(split.train, c.attack_prompt_count);
    return a;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct NamedAsr {
    std::string name;
    AsrReport report;
    friend bool operator==(const NamedAsr&, const NamedAsr&) = default;
};

struct NamedProfile {
    std::string name;
    CeProfile profile;
    friend bool operator==(const NamedProfile&, const NamedProfile&) = default;
};

struct Timestamps {
    std::string started;
    std::string finished;
    friend bool operator==(const Timestamps&, const Timestamps&) = default;
};

struct ResultRecord {
    std::string run_id;
    std::string tool_version{kToolVersion};
    std::string command;
    RunConfig config;
    std::optional<Timestamps> timestamps;
    std::vector<LossBreakdown> loss_history;
    std::vector<NamedAsr> asr;
    std::vector<NamedProfile> ce_profiles;
    std::vector<AbCell> ab_grid;
    std::map<std::string, std::string> artifacts;  // name -> path relative to the report directory

    friend bool operator==(const ResultRecord&, const ResultRecord&) = default;
};

inline void to_json(json& j, const LossBreakdown& b) {
    j = json{{"l_v", b.l_v}, {"l_t", b.l_t}, {"l_o", b.l_o}, {"l_total", b.l_total}, {"weights", b.weights}};
}
inline void from_json(const json& j, LossBreakdown& b) {
    j.at("l_v").get_to(b.l_v);
    j.at("l_t").get_to(b.l_t);
    j.at("l_o").get_to(b.l_o);
    j.at("l_total").get_to(b.l_total);
    j.at("weights").get_to(b.weights);
}

inline Category parse_category(std::string_view s) {
    for (auto c : kCategories)
        if (to_string(c) == s) return c;
    throw std::invalid_argument("unknown prompt category '" + std::string(s) + "'");
}

inline void to_json(json& j, const PromptVerdict& v) {
    j = json{{"prompt", v.prompt}, {"category", std::string(to_string(v.category))}, {"generated", v.generated}, {"hit", v.hit}};
}
inline void from_json(const json& j, PromptVerdict& v) {
    j.at("prompt").get_to(v.prompt);
    v.category = parse_category(j.at("category").get<std::string>());
    j.at("generated").get_to(v.generated);
    j.at("hit").get_to(v.hit);
}

inline void to_json(json& j, const CategoryAsr& a) {
    j = json{{"category", std::string(to_string(a.category))}, {"hits", a.hits}, {"total", a.total}, {"asr", a.asr}};
}
inline void from_json(const json& j, CategoryAsr& a) {
    a.category = parse_category(j.at("category").get<std::string>());
    j.at("hits").get_to(a.hits);
    j.at("total").get_to(a.total);
    j.at("asr").get_to(a.asr);
}

inline void to_json(json& j, const AsrReport& r) {
    j = json{{"target", r.target}, {"max_new", r.max_new}, {"verdicts", r.verdicts}, {"per_category", r.per_category},
             {"overall", r.overall}};
}
inline void from_json(const json& j, AsrReport& r) {
    j.at("target").get_to(r.target);
    j.at("max_new").get_to(r.max_new);
    j.at("verdicts").get_to(r.verdicts);
    j.at("per_category").get_to(r.per_category);
    j.at("overall").get_to(r.overall);
}

inline void to_json(json& j, const CeProfile& p) {
    j = json{{"prompt", p.prompt},           {"target", p.target},       {"ce", p.ce},
             {"end_v", p.end_v},             {"end_t", p.end_t},         {"n", p.n},
             {"visual_mean", p.visual_mean}, {"text_mean", p.text_mean},
             {"generated_mean", p.generated_mean ? json(*p.generated_mean) : json(nullptr)}};
}
inline void from_json(const json& j, CeProfile& p) {
    j.at("prompt").get_to(p.prompt);
    j.at("target").get_to(p.target);
    j.at("ce").get_to(p.ce);
    j.at("end_v").get_to(p.end_v);
    j.at("end_t").get_to(p.end_t);
    j.at("n").get_to(p.n);
    j.at("visual_mean").get_to(p.visual_mean);
    j.at("text_mean").get_to(p.text_mean);
    if (const auto& g = j.at("generated_mean"); g.is_null()) p.generated_mean.reset();
    else p.generated_mean = g.get<double>();
}

inline void to_json(json& j, const AbCell& c) {
    j = json{{"alpha", c.alpha}, {"beta", c.beta}, {"overall", c.overall}, {"per_category", c.per_category},
             {"final_loss", c.final_loss}};
}
inline void from_json(const json& j, AbCell& c) {
    j.at("alpha").get_to(c.alpha);
    j.at("beta").get_to(c.beta);
    j.at("overall").get_to(c.overall);
    j.at("per_category").get_to(c.per_category);
    j.at("final_loss").get_to(c.final_loss);
}

inline void to_json(json& j, const NamedAsr& n) { j = json{{"name", n.name}, {"report", n.report}}; }
inline void from_json(const json& j, NamedAsr& n) {
    j.at("name").get_to(n.name);
    j.at("report").get_to(n.report);
}
inline void to_json(json& j, const NamedProfile& n) { j = json{{"name", n.name}, {"profile", n.profile}}; }
inline void from_json(const json& j, NamedProfile& n) {
    j.at("name").get_to(n.name);
    j.at("profile").get_to(n.profile);
}

inline void to_json(json& j, const ResultRecord& r) {
    j = json{{"run_id", r.run_id},
             {"tool_version", r.tool_version},
             {"command", r.command},
             {"config", r.config},
             {"loss_history", r.loss_history},
             {"asr", r.asr},
             {"ce_profiles", r.ce_profiles},
             {"ab_grid", r.ab_grid},
             {"artifacts", r.artifacts}};
    if (r.timestamps) j["timestamps"] = json{{"started", r.timestamps->started}, {"finished", r.timestamps->finished}};
}
inline void from_json(const json& j, ResultRecord& r) {
    j.at("run_id").get_to(r.run_id);
    j.at("tool_version").get_to(r.tool_version);
    j.at("command").get_to(r.command);
    j.at("config").get_to(r.config);
    j.at("loss_history").get_to(r.loss_history);
    j.at("asr").get_to(r.asr);
    j.at("ce_profiles").get_to(r.ce_profiles);
    j.at("ab_grid").get_to(r.ab_grid);
    j.at("artifacts").get_to(r.artifacts);
    if (auto t = j.find("timestamps"); t != j.end())
        r.timestamps = Timestamps{t->at("started").get<std::string>(), t->at("finished").get<std::string>()};
    else r.timestamps.reset();
}

/// FNV-1a over the canonical config text, command and tool version.
inline std::string compute_run_id(const RunConfig& c, std::string_view command,
                                  std::string_view version = kToolVersion) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&](std::string_view s) {
        for (unsigned char ch : s) {
            h ^= ch;
            h *= 0x100000001b3ULL;
        }
        h ^= 0xff;
        h *= 0x100000001b3ULL;
    };
    mix(json(c).dump());
    mix(command);
    mix(version);
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

namespace detail {

inline std::string fmt_num(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

inline std::string csv_field(std::string_view s) {
    if (s.find_first_of(",\"\n") == std::string_view::npos) return std::string(s);
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += "\"\"";
        else out.push_back(c);
    }
    return out + "\"";
}

inline std::string safe_name(std::string_view s) {
    std::string out;
    for (char c : s) out.push_back(std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' ? c : '_');
    return out;
}

}  // namespace detail

inline std::string loss_history_csv(const std::vector<LossBreakdown>& h) {
    std::string out = "iteration,l_v,l_t,l_o,l_total,alpha,beta\n";
    for (std::size_t i = 0; i < h.size(); ++i) {
        const auto& b = h[i];
        out += std::to_string(i) + "," + detail::fmt_num(b.l_v) + "," + detail::fmt_num(b.l_t) + "," +
               detail::fmt_num(b.l_o) + "," + detail::fmt_num(b.l_total) + "," + detail::fmt_num(b.weights.alpha) + "," +
               detail::fmt_num(b.weights.beta) + "\n";
    }
    return out;
}

/// name,category,hits,total,asr rows; category "overall" holds the mean over prompts.
inline std::string asr_summary_csv(const std::vector<NamedAsr>& reports) {
    std::string out = "name,category,hits,total,asr\n";
    for (const auto& [name, r] : reports) {
        std::size_t hits = 0;
        for (const auto& c : r.per_category) {
            out += detail::csv_field(name) + "," + std::string(to_string(c.category)) + "," + std::to_string(c.hits) +
                   "," + std::to_string(c.total) + "," + detail::fmt_num(c.asr) + "\n";
            hits += c.hits;
        }
        out += detail::csv_field(name) + ",overall," + std::to_string(hits) + "," + std::to_string(r.verdicts.size()) +
               "," + detail::fmt_num(r.overall) + "\n";
    }
    return out;
}

inline std::string verdicts_csv(const AsrReport& r) {
    std::string out = "category,prompt,hit,generated\n";
    for (const auto& v : r.verdicts)
        out += std::string(to_string(v.category)) + "," + detail::csv_field(v.prompt) + "," + (v.hit ? "1" : "0") + "," +
               detail::csv_field(v.generated) + "\n";
    return out;
}

/// position,segment,ce; one row per sequence position.
inline std::string ce_profile_csv(const CeProfile& p) {
    std::string out = "position,segment,ce\n";
    for (std::size_t i = 0; i < p.ce.size(); ++i) {
        const char* seg = i < p.end_v ? "visual" : i < p.end_t ? "text" : "generated";
        out += std::to_string(i) + "," + seg + "," + detail::fmt_num(p.ce[i]) + "\n";
    }
    return out;
}

inline std::string ab_grid_csv(const std::vector<AbCell>& grid) {
    std::string out = "alpha,beta,asr,final_loss\n";
    for (const auto& c : grid)
        out += detail::fmt_num(c.alpha) + "," + detail::fmt_num(c.beta) + "," + detail::fmt_num(c.overall) + "," +
               detail::fmt_num(c.final_loss) + "\n";
    return out;
}

inline std::string topk_csv(const Tokenizer& tok, const std::vector<std::vector<TokenProb>>& table, std::size_t end_v) {
    std::string out = "position,segment,rank,token,probability\n";
    for (std::size_t i = 0; i < table.size(); ++i)
        for (std::size_t r = 0; r < table[i].size(); ++r)
            out += std::to_string(i) + "," + (i < end_v ? "visual" : "text") + "," + std::to_string(r + 1) + "," +
                   detail::csv_field(tok.word(table[i][r].token)) + "," + detail::fmt_num(table[i][r].prob) + "\n";
    return out;
}

inline std::string report_json(const ResultRecord& r) { return json(r).dump(2) + "\n"; }

inline ResultRecord parse_report(std::string_view text) { return json::parse(text).get<ResultRecord>(); }

inline ResultRecord read_report(const fs::path& path) {
    try {
        return parse_report(detail::read_file(path));
    } catch (const json::exception& e) {
        throw IoError("report '" + path.string() + "': " + e.what());
    }
}

/// Writes report.json plus flat tables into `dir`, registering each table in
/// record.artifacts (paths relative to `dir`). Returns every path written.
inline std::vector<fs::path> write_report(ResultRecord& record, const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create '" + dir.string() + "': " + ec.message());

    std::vector<std::pair<std::string, std::string>> tables;
    if (!record.loss_history.empty()) tables.emplace_back("loss_history.csv", loss_history_csv(record.loss_history));
    if (!record.asr.empty()) {
        tables.emplace_back("asr_summary.csv", asr_summary_csv(record.asr));
        for (const auto& n : record.asr)
            tables.emplace_back("verdicts_" + detail::safe_name(n.name) + ".csv", verdicts_csv(n.report));
    }
    for (const auto& n : record.ce_profiles)
        tables.emplace_back("ce_" + detail::safe_name(n.name) + ".csv", ce_profile_csv(n.profile));
    if (!record.ab_grid.empty()) tables.emplace_back("ab_grid.csv", ab_grid_csv(record.ab_grid));

    std::vector<fs::path> written;
    for (const auto& [name, body] : tables) {
        detail::write_file(dir / name, body);
        record.artifacts[fs::path(name).stem().string()] = name;
        written.push_back(dir / name);
    }
    for (const auto& [name, rel] : record.artifacts)
        if (name != "report" && !fs::exists(dir / rel)) throw IoError("artifact '" + name + "' missing at '" + (dir / rel).string() + "'");
    record.artifacts["report"] = "report.json";
    detail::write_file(dir / "report.json", report_json(record));
    written.push_back(dir / "report.json");
    return written;
}

}  // namespace cia
