#pragma once

#include <cstddef>
#include <vector>

#include "ehrgan/graph.hpp"
#include "ehrgan/tensor.hpp"

namespace ehrgan {

// ---------------------------------------------------------------------------
// Plain tensor kernels. Sequences are [batch, time, channels]; a conv kernel
// bank is [width, in_channels, maps].
// ---------------------------------------------------------------------------

/// Valid correlation along time: y[b,t,f] = bias[f] + sum_{j,c} x[b,t*s+j,c] k[j,c,f].
Tensor conv1d(const Tensor& x, const Tensor& kernel, const Tensor& bias, std::size_t stride = 1);

/// Transposed convolution, the linear adjoint of conv1d with the same kernel.
/// Input [B,T,F], kernel [w,C,F], bias [C]; output [B,(T-1)*stride+w,C].
Tensor deconv1d(const Tensor& y, const Tensor& kernel, const Tensor& bias, std::size_t stride = 1);

struct PoolResult {
    Tensor values;                     // [B, F]
    std::vector<std::size_t> argmax;   // B*F time indices, first occurrence on ties
};
PoolResult max_over_time(const Tensor& x);

/// Elementwise select: mask 1 takes z, mask 0 keeps h.
Tensor mix_latent(const Tensor& h, const Tensor& z, const Tensor& mask);

std::vector<Real> softmax_row(std::span<const Real> logits);

namespace nn {

// ---------------------------------------------------------------------------
// Differentiable operations recorded on a Graph.
// ---------------------------------------------------------------------------

Var conv1d(Var x, Var kernel, Var bias, std::size_t stride = 1);
Var deconv1d(Var y, Var kernel, Var bias, std::size_t stride = 1);
Var max_over_time(Var x);
/// Max over each of `segments` contiguous time slices; output [B, segments*F]
/// laid out segment-major. segments == 1 is max_over_time.
Var segment_max(Var x, std::size_t segments);

/// x [B,K] * w [K,N] + b [N].
Var dense(Var x, Var w, Var b);
Var relu(Var x);
Var tanh(Var x);
Var sigmoid(Var x);
/// Multiply the last axis by a constant per-channel vector.
Var scale_channels(Var x, const Tensor& scale);

Var reshape(Var x, Shape shape);
/// Concatenate [B, F_i] tensors along the last axis.
Var concat(const std::vector<Var>& parts);
/// Stack [1, ...] tensors along the batch axis.
Var stack(const std::vector<Var>& rows);
/// Keep the first `length` time steps of [B,T,C].
Var crop_time(Var x, std::size_t length);

struct BatchNormOptions {
    Real momentum = 0.1;
    Real eps = 1e-5;
    bool training = true;
};
/// Normalizes over all axes but the last. Running statistics live in
/// `running_mean` / `running_var` and are updated in training mode.
Var batch_norm(Var x, Var gamma, Var beta, Tensor& running_mean, Tensor& running_var,
               const BatchNormOptions& opt);

Var mix_latent(Var h, const Tensor& z, const Tensor& mask);

Var add(Var a, Var b);
Var scale(Var a, Real s);
Var sum(Var a);
/// Sum of squares of all entries.
Var sum_squares(Var a);
/// Mean over the batch axis of per-example squared Frobenius distance.
Var squared_error(Var a, Var b);

/// Row-wise softmax probabilities (no gradient through this helper).
Tensor softmax(const Tensor& logits);
/// Mean over rows of -log softmax(logits)[label].
Var softmax_xent(Var logits, const std::vector<int>& labels);
/// Mean binary cross entropy of probabilities against targets in [0,1].
/// Probabilities are clamped to [1e-7, 1-1e-7].
Var binary_xent(Var prob, const std::vector<Real>& targets);
/// Numerically stable binary cross entropy of sigmoid(logits), mean over entries.
Var sigmoid_xent(Var logits, const std::vector<Real>& targets);

inline constexpr Real kProbClamp = 1e-7;

}  // namespace nn
}  // namespace ehrgan
