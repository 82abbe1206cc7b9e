#pragma once

#include "ehrgan/params.hpp"

namespace ehrgan {

struct OptimConfig {
    Real learning_rate = 0.001;
    Real beta1 = 0.9;
    Real beta2 = 0.999;
    Real epsilon = 1e-8;
    /// Global gradient norm threshold.
    Real clip_norm = 5.0;
    /// l2 coefficient on discriminator weights.
    Real l2_discriminator = 1e-4;

    void validate() const;
};

struct StepReport {
    Real grad_norm = 0;     // before clipping
    Real clipped_norm = 0;  // after clipping
    bool clipped = false;
};

/// Rescale all trainable gradients by c/g when their global norm g exceeds c.
StepReport clip_gradients(ParamSet& params, Real clip_norm);

/// Clip, then one bias-corrected Adam update of every trainable parameter.
/// Throws NonFiniteError (leaving parameters untouched) if any gradient is NaN/Inf.
StepReport clip_and_step(ParamSet& params, const OptimConfig& cfg);

}  // namespace ehrgan
