#include "ehrgan/optim.hpp"

#include <cmath>

#include "ehrgan/error.hpp"

namespace ehrgan {

void OptimConfig::validate() const {
    if (!(learning_rate > 0)) throw InvalidArgument("learning rate must be > 0");
    if (!(beta1 > 0 && beta1 < 1) || !(beta2 > 0 && beta2 < 1)) throw InvalidArgument("Adam betas must lie in (0,1)");
    if (!(epsilon > 0)) throw InvalidArgument("Adam epsilon must be > 0");
    if (!(clip_norm > 0)) throw InvalidArgument("clip threshold must be > 0");
    if (!(l2_discriminator >= 0)) throw InvalidArgument("l2 coefficient must be >= 0");
}

StepReport clip_gradients(ParamSet& params, Real clip_norm) {
    StepReport r;
    r.grad_norm = params.grad_norm();
    r.clipped_norm = r.grad_norm;
    if (r.grad_norm > clip_norm) {
        const Real s = clip_norm / r.grad_norm;
        for (auto& [_, p] : params)
            if (p.trainable)
                for (auto& g : p.grad.values()) g *= s;
        r.clipped = true;
        r.clipped_norm = params.grad_norm();
    }
    return r;
}

StepReport clip_and_step(ParamSet& params, const OptimConfig& cfg) {
    for (const auto& [name, p] : params)
        if (p.trainable && !p.grad.all_finite()) throw NonFiniteError("non-finite gradient in parameter '" + name + "'");

    StepReport r = clip_gradients(params, cfg.clip_norm);
    params.advance_step();
    const Real t = static_cast<Real>(params.step());
    const Real c1 = 1 - std::pow(cfg.beta1, t);
    const Real c2 = 1 - std::pow(cfg.beta2, t);
    for (auto& [_, p] : params) {
        if (!p.trainable) continue;
        Real* w = p.value.data();
        const Real* g = p.grad.data();
        Real* m = p.first_moment.data();
        Real* v = p.second_moment.data();
        for (std::size_t i = 0; i < p.value.size(); ++i) {
            m[i] = cfg.beta1 * m[i] + (1 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1 - cfg.beta2) * g[i] * g[i];
            w[i] -= cfg.learning_rate * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg.epsilon);
        }
    }
    return r;
}

}  // namespace ehrgan
