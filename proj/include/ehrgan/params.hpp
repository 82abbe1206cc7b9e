#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ehrgan/tensor.hpp"

namespace ehrgan {

class Rng;

/// One named array of a model: value, accumulated gradient, Adam moments.
/// Non-trainable entries (batch-norm running statistics) carry no moments
/// and are skipped by the optimizer.
struct Parameter {
    Tensor value;
    Tensor grad;
    Tensor first_moment;
    Tensor second_moment;
    bool trainable = true;
    /// Subject to l2 weight decay (weights yes, biases and norm shifts no).
    bool decay = false;
};

class ParamSet {
public:
    Parameter& add(const std::string& name, Tensor init, bool decay);
    Parameter& add_buffer(const std::string& name, Tensor init);

    Parameter& operator[](const std::string& name);
    const Parameter& operator[](const std::string& name) const;
    bool contains(const std::string& name) const { return params_.count(name) != 0; }

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }
    std::size_t size() const { return params_.size(); }

    void zero_grad();
    /// Euclidean norm of the concatenated gradients of trainable entries.
    Real grad_norm() const;
    std::size_t trainable_count() const;

    std::uint64_t step() const { return step_; }
    void set_step(std::uint64_t s) { step_ = s; }
    void advance_step() { ++step_; }

private:
    std::map<std::string, Parameter> params_;
    std::uint64_t step_ = 0;
};

/// Weight init: uniform in +-sqrt(6 / fan_in).
Tensor he_uniform(Shape shape, std::size_t fan_in, Rng& rng);

}  // namespace ehrgan
