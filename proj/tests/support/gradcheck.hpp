#pragma once

// Central finite-difference oracle for analytic gradients. Test-only.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

#include "ehrgan/graph.hpp"
#include "ehrgan/params.hpp"

namespace ehrgan::testing {

struct GradCheckResult {
    bool ok = true;
    double worst_excess = 0;  // max of |a-n| - allowed over entries
    std::string worst_entry;
    std::size_t checked = 0;
};

inline bool grad_close(double analytic, double numeric, double rel = 1e-4, double abs_floor = 1e-6) {
    const double allowed = std::max(rel * std::max(std::abs(analytic), std::abs(numeric)), abs_floor);
    return std::abs(analytic - numeric) <= allowed;
}

/// `loss` records a forward pass on the given graph and returns the scalar node.
/// Every trainable entry of `params` is checked (up to `max_per_param` entries each).
inline GradCheckResult check_gradients(ParamSet& params, const std::function<Var(Graph&)>& loss, double h = 1e-5,
                                       std::size_t max_per_param = 0, double rel = 1e-4, double abs_floor = 1e-6) {
    params.zero_grad();
    {
        Graph g;
        g.backward(loss(g));
    }
    auto eval = [&] {
        Graph g;
        return loss(g).value()[0];
    };
    GradCheckResult r;
    for (auto& [name, p] : params) {
        if (!p.trainable) continue;
        const std::size_t n = p.value.size();
        const std::size_t stride = (max_per_param && n > max_per_param) ? n / max_per_param : 1;
        for (std::size_t i = 0; i < n; i += stride) {
            const double orig = p.value[i];
            p.value[i] = orig + h;
            const double up = eval();
            p.value[i] = orig - h;
            const double down = eval();
            p.value[i] = orig;
            const double numeric = (up - down) / (2 * h);
            const double analytic = p.grad[i];
            ++r.checked;
            const double allowed = std::max(rel * std::max(std::abs(analytic), std::abs(numeric)), abs_floor);
            const double excess = std::abs(analytic - numeric) - allowed;
            if (excess > r.worst_excess || (r.ok && excess > 0)) {
                r.worst_excess = std::max(r.worst_excess, excess);
                r.worst_entry = name + "[" + std::to_string(i) + "] analytic=" + std::to_string(analytic) +
                                " numeric=" + std::to_string(numeric);
            }
            if (excess > 0) r.ok = false;
        }
    }
    return r;
}

}  // namespace ehrgan::testing
