#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <utility>
#include <vector>

#include "ddpe/rng.hpp"
#include "ddpe/tensor.hpp"

namespace ddpe {

struct GradCheckReport {
    double max_relative_error = 0.0;
    std::size_t coordinates = 0;
};

// Compares reverse-mode gradients of a scalar function against central
// differences on up to `max_coordinates` parameter entries (all of them when
// there are fewer). The function must be deterministic and rebuild its graph
// on every call.
template <typename T>
GradCheckReport finite_diff_check(const std::function<Tensor<T>()>& fn, std::vector<Tensor<T>> params,
                                  double eps, std::size_t max_coordinates = 64, std::uint64_t seed = 0) {
    for (auto& p : params) {
        p.zero_grad();
    }
    backward(fn());

    std::vector<std::pair<std::size_t, std::size_t>> coords;
    for (std::size_t i = 0; i < params.size(); ++i) {
        for (std::size_t j = 0; j < params[i].numel(); ++j) {
            coords.emplace_back(i, j);
        }
    }
    if (coords.size() > max_coordinates) {
        Rng rng(seed);
        rng.shuffle(coords);
        coords.resize(max_coordinates);
        std::sort(coords.begin(), coords.end());
    }

    std::vector<std::vector<T>> analytic;
    analytic.reserve(params.size());
    for (const auto& p : params) {
        analytic.push_back(p.grad());
    }

    GradCheckReport report;
    report.coordinates = coords.size();
    for (const auto& [i, j] : coords) {
        auto values = params[i].data();
        const T original = values[j];
        values[j] = original + static_cast<T>(eps);
        const double plus = static_cast<double>(fn().item());
        values[j] = original - static_cast<T>(eps);
        const double minus = static_cast<double>(fn().item());
        values[j] = original;
        const double numeric = (plus - minus) / (2.0 * eps);
        const double a = static_cast<double>(analytic[i][j]);
        const double rel = std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + 1e-12);
        report.max_relative_error = std::max(report.max_relative_error, rel);
    }
    return report;
}

} // namespace ddpe
