#pragma once

// Central finite-difference oracle shared by the gradient tests. It only
// evaluates scalar functions; it never calls any backward pass.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "latent_unlearn/network.hpp"
#include "latent_unlearn/rng.hpp"

namespace grad_check {

using latent_unlearn::Parameter;
using latent_unlearn::Rng;

/// Random direction over all parameter arrays, scaled to unit Euclidean norm.
inline std::vector<std::vector<double>> random_direction(const std::vector<Parameter*>& params, Rng& rng) {
    std::vector<std::vector<double>> dir;
    double sq = 0.0;
    for (const auto* p : params) {
        std::vector<double> d(p->size());
        for (auto& x : d) {
            x = rng.normal();
            sq += x * x;
        }
        dir.push_back(std::move(d));
    }
    const double inv = 1.0 / std::sqrt(sq);
    for (auto& d : dir)
        for (auto& x : d) x *= inv;
    return dir;
}

/// (f(theta + h v) - f(theta - h v)) / 2h, restoring theta afterwards.
inline double directional_fd(const std::vector<Parameter*>& params, const std::vector<std::vector<double>>& dir,
                             const std::function<double()>& f, double h = 1e-5) {
    std::vector<std::vector<double>> saved;
    for (const auto* p : params) saved.push_back(p->value);
    auto shift = [&](double s) {
        for (std::size_t k = 0; k < params.size(); ++k)
            for (std::size_t i = 0; i < params[k]->size(); ++i) params[k]->value[i] = saved[k][i] + s * dir[k][i];
    };
    shift(h);
    const double fp = f();
    shift(-h);
    const double fm = f();
    for (std::size_t k = 0; k < params.size(); ++k) params[k]->value = saved[k];
    return (fp - fm) / (2.0 * h);
}

inline double dot(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b) {
    double s = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k)
        for (std::size_t i = 0; i < a[k].size(); ++i) s += a[k][i] * b[k][i];
    return s;
}

inline double rel_err(double a, double b) {
    const double scale = std::max({std::abs(a), std::abs(b), 1e-12});
    return std::abs(a - b) / scale;
}

}  // namespace grad_check
