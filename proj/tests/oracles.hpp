#pragma once

// Independent reference implementations used as test oracles. These stay
// deliberately naive (triple loops, sorts, dense sampling) and must not
// call into the code paths they check.

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "bf/tensor.hpp"

namespace oracle {

inline std::vector<float> naive_matmul(std::span<const float> a, std::span<const float> b, int m,
                                       int k, int n) {
    std::vector<float> out(static_cast<size_t>(m) * n, 0.0f);
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) {
            float acc = 0.0f;
            for (int p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
            out[i * n + j] = acc;
        }
    }
    return out;
}

inline double rel_err(double analytic, double numeric) {
    return std::abs(analytic - numeric) /
           std::max({1e-4, std::abs(analytic), std::abs(numeric)});
}

/// Central finite differences on f32 parameters against already-populated
/// analytic grads. `loss_fn` must recompute the loss from current parameter
/// values. Checks every element of every listed tensor; returns the max
/// relative error.
inline double finite_diff_max_rel_err(const std::function<double()>& loss_fn,
                                      std::span<bf::Tensor> params, float step = 1e-3f,
                                      int max_per_tensor = -1) {
    double worst = 0.0;
    for (auto& p : params) {
        auto values = p.mutable_data();
        auto grads = p.grad();
        const int64_t n = static_cast<int64_t>(values.size());
        const int64_t stride =
            max_per_tensor > 0 && n > max_per_tensor ? (n + max_per_tensor - 1) / max_per_tensor : 1;
        for (int64_t i = 0; i < n; i += stride) {
            const float saved = values[i];
            values[i] = saved + step;
            const double up = loss_fn();
            values[i] = saved - step;
            const double down = loss_fn();
            values[i] = saved;
            const double numeric = (up - down) / (2.0 * static_cast<double>(step));
            const double analytic = i < static_cast<int64_t>(grads.size()) ? grads[i] : 0.0;
            worst = std::max(worst, rel_err(analytic, numeric));
        }
    }
    return worst;
}

/// Linear-interpolation percentile (C=1 convention) by direct sort.
inline double percentile_sorted(std::vector<double> xs, double p) {
    std::sort(xs.begin(), xs.end());
    const double rank = p / 100.0 * static_cast<double>(xs.size() - 1);
    const size_t lo = static_cast<size_t>(std::floor(rank));
    const size_t hi = static_cast<size_t>(std::ceil(rank));
    const double frac = rank - static_cast<double>(lo);
    return xs[lo] + (xs[hi] - xs[lo]) * frac;
}

}  // namespace oracle
