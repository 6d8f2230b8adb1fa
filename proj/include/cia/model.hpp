#pragma once

// Frozen, seeded miniature vision-language model.
//
// Pixels are normalised ((x - 0.5) / 0.25), patches linearly projected into
// visual tokens, text tokens embedded, and the concatenation runs through
// pre-norm causal transformer blocks (single head, tanh feed-forward). Every
// position, visual ones included, is decoded through the shared unembedding,
// so row i of the logits is the next-token distribution after position i.
//
// Block projections are rescaled by 1 / (sigma_w * sqrt(fan_in)) so each one
// is variance preserving; without it the +-0.08 weights shrink every residual
// branch by ~4x per matrix and the image barely reaches the text positions.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "autodiff.hpp"
#include "image.hpp"
#include "rng.hpp"
#include "tokenizer.hpp"

namespace cia {

struct ModelDims {
    std::size_t vocab = 64;
    std::size_t width = 32;
    std::size_t blocks = 2;
    std::size_t patch = 4;
    std::size_t image = 16;
    std::size_t channels = 3;
    std::size_t ffn_mult = 4;
    std::size_t max_seq = 64;
    std::size_t end_v = 0;  // 0: derive from image/patch

    std::size_t visual_tokens() const { return (image / patch) * (image / patch); }
    std::size_t patch_dim() const { return patch * patch * channels; }

    void validate() const {
        auto fail = [](const std::string& why) { throw std::invalid_argument("model dims: " + why); };
        if (vocab < 8) fail("vocab must be >= 8");
        if (width < 8) fail("width must be >= 8");
        if (blocks < 1) fail("need at least one block");
        if (patch == 0 || image == 0 || image % patch != 0) fail("image size must be a positive multiple of patch size");
        if (channels == 0 || ffn_mult == 0) fail("channels and ffn_mult must be positive");
        if (end_v != 0 && end_v != visual_tokens())
            fail("end_v " + std::to_string(end_v) + " != (image/patch)^2 = " + std::to_string(visual_tokens()));
        if (max_seq <= visual_tokens()) fail("max_seq must exceed the visual token count");
    }

    friend bool operator==(const ModelDims&, const ModelDims&) = default;
};

struct BlockWeights {
    ad::Tensor<float> wq, wk, wv, wo, w1, w2;
    friend bool operator==(const BlockWeights&, const BlockWeights&) = default;
};

struct ModelWeights {
    ModelDims dims;
    std::uint64_t seed = 0;
    ad::Tensor<float> patch_proj;  // patch_dim × d
    ad::Tensor<float> tok_emb;     // V × d
    ad::Tensor<float> pos_emb;     // max_seq × d
    std::vector<BlockWeights> blocks;
    ad::Tensor<float> unembed;  // d × V

    std::size_t end_v() const { return dims.visual_tokens(); }

    friend bool operator==(const ModelWeights&, const ModelWeights&) = default;
};

inline constexpr double kInitRange = 0.08;
inline constexpr double kPixelMean = 0.5;
inline constexpr double kPixelStd = 0.25;

/// Weights drawn uniformly from [−0.08, 0.08] by a splitmix64 stream, in
/// declaration order.
inline ModelWeights init_model(std::uint64_t seed, ModelDims dims = {}) {
    dims.validate();
    SplitMix64 rng(seed);
    auto draw = [&](std::size_t r, std::size_t c) {
        std::vector<float> v(r * c);
        for (auto& x : v) x = static_cast<float>(rng.uniform(-kInitRange, kInitRange));
        return ad::Tensor<float>({r, c}, std::move(v));
    };
    const std::size_t d = dims.width;
    ModelWeights w;
    w.dims = dims;
    w.seed = seed;
    w.patch_proj = draw(dims.patch_dim(), d);
    w.tok_emb = draw(dims.vocab, d);
    w.pos_emb = draw(dims.max_seq, d);
    for (std::size_t b = 0; b < dims.blocks; ++b) {
        BlockWeights bw;
        bw.wq = draw(d, d);
        bw.wk = draw(d, d);
        bw.wv = draw(d, d);
        bw.wo = draw(d, d);
        bw.w1 = draw(d, d * dims.ffn_mult);
        bw.w2 = draw(d * dims.ffn_mult, d);
        w.blocks.push_back(std::move(bw));
    }
    w.unembed = draw(d, dims.vocab);
    return w;
}

namespace detail {

template <class T>
ad::Var<T> constant(ad::Tape<T>& tape, const ad::Tensor<float>& t) {
    if constexpr (std::is_same_v<T, float>) return tape.constant(t);
    else return tape.constant(t.template cast<T>());
}

inline void check_image(const ModelWeights& w, const ad::Shape& shape) {
    const auto& d = w.dims;
    if (shape != ad::Shape{d.image, d.image, d.channels})
        throw std::invalid_argument("model: image shape " + ad::shape_str(shape) + " does not match configured " +
                                    ad::shape_str({d.image, d.image, d.channels}));
}

/// Flat image index for every (patch, within-patch) slot, patches in raster order.
inline std::vector<std::size_t> patch_index(const ModelDims& d) {
    const std::size_t grid = d.image / d.patch;
    std::vector<std::size_t> idx;
    idx.reserve(d.image * d.image * d.channels);
    for (std::size_t py = 0; py < grid; ++py)
        for (std::size_t px = 0; px < grid; ++px)
            for (std::size_t dy = 0; dy < d.patch; ++dy)
                for (std::size_t dx = 0; dx < d.patch; ++dx)
                    for (std::size_t c = 0; c < d.channels; ++c)
                        idx.push_back(((py * d.patch + dy) * d.image + px * d.patch + dx) * d.channels + c);
    return idx;
}

/// h · m, rescaled to unit gain for weights uniform in [-0.08, 0.08].
template <class T>
ad::Var<T> projection(ad::Tape<T>& tape, ad::Var<T> h, const ad::Tensor<float>& m) {
    const double sigma_w = kInitRange / std::sqrt(3.0);
    return ad::scale(ad::matmul(h, constant(tape, m)), 1.0 / (sigma_w * std::sqrt(double(m.rows()))));
}

template <class T>
ad::Tensor<T> rows_of(const ad::Tensor<float>& m, std::size_t begin, std::size_t end) {
    const std::size_t c = m.cols();
    return ad::Tensor<T>({end - begin, c}, std::vector<T>(m.values().begin() + begin * c, m.values().begin() + end * c));
}

}  // namespace detail

inline ad::Tensor<float> image_tensor(const Image& img) {
    return ad::Tensor<float>({img.height, img.width, img.channels}, img.values);
}

/// Visual token embeddings (end_v × d) for an image variable of shape H×W×C.
template <class T>
ad::Var<T> encode_image(ad::Tape<T>& tape, const ModelWeights& w, ad::Var<T> image) {
    detail::check_image(w, image.shape());
    const auto& d = w.dims;
    auto patches = ad::gather(image, detail::patch_index(d), {d.visual_tokens(), d.patch_dim()});
    patches = ad::scale(ad::add(patches, tape.constant(ad::Tensor<T>::full(patches.shape(), T(-kPixelMean)))),
                        1.0 / kPixelStd);
    auto emb = ad::matmul(patches, detail::constant(tape, w.patch_proj));
    return ad::add(emb, tape.constant(detail::rows_of<T>(w.pos_emb, 0, d.visual_tokens())));
}

inline ad::Tensor<float> encode_image(const ModelWeights& w, const Image& img) {
    ad::Tape<float> tape;
    return encode_image(tape, w, tape.constant(image_tensor(img))).value();
}

/// Logits (L × V) for [visual tokens; tokens], L = end_v + tokens.size().
template <class T>
ad::Var<T> forward(ad::Tape<T>& tape, const ModelWeights& w, ad::Var<T> image, const TokenSeq& tokens) {
    const auto& dims = w.dims;
    const std::size_t nv = dims.visual_tokens(), d = dims.width;
    if (tokens.empty()) throw std::invalid_argument("forward: token sequence is empty");
    const std::size_t L = nv + tokens.size();
    if (L > dims.max_seq)
        throw std::length_error("forward: sequence length " + std::to_string(L) + " exceeds max " +
                                std::to_string(dims.max_seq));

    std::vector<T> text(tokens.size() * d);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        const auto tok = tokens[i];
        if (tok < 0 || static_cast<std::size_t>(tok) >= dims.vocab)
            throw std::out_of_range("forward: token id " + std::to_string(tok) + " out of range");
        for (std::size_t j = 0; j < d; ++j)
            text[i * d + j] = static_cast<T>(w.tok_emb.at(tok, j)) + static_cast<T>(w.pos_emb.at(nv + i, j));
    }
    auto x = ad::concat({encode_image(tape, w, image), tape.constant(ad::Tensor<T>({tokens.size(), d}, std::move(text)))});

    std::vector<T> mask(L * L, T(0));
    for (std::size_t i = 0; i < L; ++i)
        for (std::size_t j = i + 1; j < L; ++j) mask[i * L + j] = T(-1e9);
    auto causal = tape.constant(ad::Tensor<T>({L, L}, std::move(mask)));
    const double inv_sqrt_d = 1.0 / std::sqrt(double(d));

    for (const auto& b : w.blocks) {
        auto h = ad::rms_norm(x);
        auto q = detail::projection(tape, h, b.wq);
        auto k = detail::projection(tape, h, b.wk);
        auto v = detail::projection(tape, h, b.wv);
        auto scores = ad::add(ad::scale(ad::matmul(q, ad::transpose(k)), inv_sqrt_d), causal);
        auto attn = detail::projection(tape, ad::matmul(ad::softmax(scores), v), b.wo);
        x = ad::add(x, attn);
        auto h2 = ad::rms_norm(x);
        auto ff = detail::projection(tape, ad::tanh(detail::projection(tape, h2, b.w1)), b.w2);
        x = ad::add(x, ff);
    }
    return ad::matmul(ad::rms_norm(x), detail::constant(tape, w.unembed));
}

inline ad::Tensor<float> forward_logits(const ModelWeights& w, const Image& img, const TokenSeq& tokens) {
    ad::Tape<float> tape;
    return forward(tape, w, tape.constant(image_tensor(img)), tokens).value();
}

/// Index of the largest value; ties go to the lowest index.
inline TokenId argmax(std::span<const float> row) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < row.size(); ++j)
        if (row[j] > row[best]) best = j;
    return static_cast<TokenId>(best);
}

/// Greedy continuation of `prompt`; stops after <eos> (not included) or `max_new` tokens.
inline TokenSeq generate_greedy(const ModelWeights& w, const Image& img, const TokenSeq& prompt, std::size_t max_new) {
    TokenSeq seq = prompt;
    TokenSeq out;
    for (std::size_t step = 0; step < max_new; ++step) {
        auto logits = forward_logits(w, img, seq);
        const std::size_t V = logits.cols();
        auto next = argmax(logits.values().subspan((logits.rows() - 1) * V, V));
        if (next == Tokenizer::kEos) break;
        out.push_back(next);
        seq.push_back(next);
    }
    return out;
}

/// Weights plus the tokenizer that matches their vocabulary.
struct MicroVlm {
    Tokenizer tokenizer;
    ModelWeights weights;

    std::size_t end_v() const { return weights.end_v(); }
};

inline MicroVlm make_micro_vlm(std::uint64_t seed, ModelDims dims = {}, Tokenizer tokenizer = {}) {
    if (dims.vocab != tokenizer.size())
        throw std::invalid_argument("model: vocab size " + std::to_string(dims.vocab) + " != tokenizer size " +
                                    std::to_string(tokenizer.size()));
    return MicroVlm{std::move(tokenizer), init_model(seed, dims)};
}

}  // namespace cia
