#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include <cia/autodiff.hpp>
#include <cia/rng.hpp>

namespace cia::testing {

template <class T = double>
ad::Tensor<T> random_tensor(SplitMix64& rng, ad::Shape shape, double lo = -1.0, double hi = 1.0) {
    std::vector<T> v(ad::numel(shape));
    for (auto& x : v) x = static_cast<T>(rng.uniform(lo, hi));
    return ad::Tensor<T>(std::move(shape), std::move(v));
}

struct GradCheck {
    std::size_t checked = 0;
    double worst = 0.0;
};

/// Relative error on coordinates where |analytic| exceeds `floor`.
template <class T>
GradCheck compare_gradients(const ad::Tensor<T>& analytic, const ad::Tensor<T>& numeric, double floor = 1e-6) {
    GradCheck r;
    for (std::size_t i = 0; i < analytic.size(); ++i) {
        const double a = analytic[i], n = numeric[i];
        if (std::abs(a) <= floor) continue;
        ++r.checked;
        r.worst = std::max(r.worst, std::abs(a - n) / std::max(std::abs(a), std::abs(n)));
    }
    return r;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
  public:
    explicit TempDir(const std::string& tag) {
        const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
        std::string name = "cia_" + tag;
        if (info) name += std::string("_") + info->test_suite_name() + "_" + info->name();
        path_ = std::filesystem::temp_directory_path() / name;
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

  private:
    std::filesystem::path path_;
};

}  // namespace cia::testing
