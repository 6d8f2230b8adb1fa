#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "rng.hpp"

namespace cia {

/// H×W×C float image, row-major (y, x, c), values in [0, 1].
struct Image {
    std::size_t height = 0;
    std::size_t width = 0;
    std::size_t channels = 3;
    std::vector<float> values;

    Image() = default;
    Image(std::size_t h, std::size_t w, std::size_t c, float fill = 0.0f)
        : height(h), width(w), channels(c), values(h * w * c, fill) {}
    Image(std::size_t h, std::size_t w, std::size_t c, std::vector<float> v)
        : height(h), width(w), channels(c), values(std::move(v)) {
        if (values.size() != h * w * c)
            throw std::invalid_argument("image: " + std::to_string(values.size()) + " values for " +
                                        std::to_string(h) + "x" + std::to_string(w) + "x" + std::to_string(c));
    }

    std::size_t size() const { return values.size(); }
    float at(std::size_t y, std::size_t x, std::size_t c) const { return values[(y * width + x) * channels + c]; }
    float& at(std::size_t y, std::size_t x, std::size_t c) { return values[(y * width + x) * channels + c]; }

    bool same_shape(const Image& o) const {
        return height == o.height && width == o.width && channels == o.channels;
    }

    /// Throws unless every value is finite and inside [0, 1].
    void validate_range() const {
        for (std::size_t i = 0; i < values.size(); ++i)
            if (!(values[i] >= 0.0f && values[i] <= 1.0f))
                throw std::domain_error("image: value " + std::to_string(values[i]) + " at index " +
                                        std::to_string(i) + " outside [0,1]");
    }

    friend bool operator==(const Image&, const Image&) = default;
};

/// Deterministic stand-in for a natural photo: smooth colour gradients, a
/// bright disc and mild seeded noise, all inside [0.05, 0.95].
inline Image synthetic_image(std::uint64_t seed, std::size_t height = 16, std::size_t width = 16) {
    SplitMix64 rng(seed ^ 0x1a2b3c4d5e6f7788ULL);
    Image img(height, width, 3);
    const double cx = rng.uniform(0.3, 0.7) * double(width), cy = rng.uniform(0.3, 0.7) * double(height);
    const double radius = 0.25 * double(std::min(height, width));
    const double tint[3] = {rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8)};
    for (std::size_t y = 0; y < height; ++y)
        for (std::size_t x = 0; x < width; ++x) {
            const double dist = std::hypot(double(x) + 0.5 - cx, double(y) + 0.5 - cy);
            const double disc = dist < radius ? 0.35 : 0.0;
            for (std::size_t c = 0; c < 3; ++c) {
                const double grad = c == 0 ? double(x) / double(width) : c == 1 ? double(y) / double(height)
                                                                                : 0.5;
                double v = 0.5 * tint[c] + 0.3 * grad + disc + rng.uniform(-0.05, 0.05);
                img.at(y, x, c) = static_cast<float>(std::clamp(v, 0.05, 0.95));
            }
        }
    return img;
}

}  // namespace cia
