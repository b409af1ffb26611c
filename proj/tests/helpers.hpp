// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "kesconv/tensor.hpp"

namespace kesconv::testing {

// Central finite differences against analytic grads for a scalar-valued
// forward pass. `forward` must rebuild the whole graph from the live param
// data on every call. Returns the worst relative error across all elements
// of all params.
inline double fd_worst_rel_err(const std::function<Tensor()>& forward,
                               const std::vector<Tensor>& params, double h = 1e-5) {
    for (Tensor p : params) {
        p.zero_grad();
    }
    Tensor loss = forward();
    backward(loss);
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (const auto& p : params) {
        analytic.push_back(p.grad());
    }
    double worst = 0.0;
    NoGradGuard ng;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor param = params[pi];
        auto& data = param.data();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double keep = data[i];
            data[i] = keep + h;
            const double up = forward().item();
            data[i] = keep - h;
            const double down = forward().item();
            data[i] = keep;
            const double fd = (up - down) / (2.0 * h);
            const double a = analytic[pi][i];
            const double rel = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-4});
            worst = std::max(worst, rel);
        }
    }
    return worst;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        m = std::max(m, std::abs(a[i] - b[i]));
    }
    return m;
}

inline bool bitwise_equal(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) {
        return false;
    }
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i] != b[i]) {
            return false;
        }
    }
    return true;
}

}  // namespace kesconv::testing
