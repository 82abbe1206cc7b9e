#include "ehrgan/params.hpp"

#include <cmath>

#include "ehrgan/error.hpp"
#include "ehrgan/rng.hpp"

namespace ehrgan {

std::uint64_t derive_seed(std::uint64_t root, std::string_view stream, std::uint64_t index) {
    // FNV-1a over the stream name, then splitmix64 finalization.
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : stream) {
        h ^= c;
        h *= 1099511628211ull;
    }
    std::uint64_t x = root ^ (h + 0x9e3779b97f4a7c15ull + (index << 6) + (index >> 2));
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
}

Parameter& ParamSet::add(const std::string& name, Tensor init, bool decay) {
    if (params_.count(name)) throw InvalidArgument("duplicate parameter name '" + name + "'");
    Parameter p;
    p.grad = Tensor(init.shape());
    p.first_moment = Tensor(init.shape());
    p.second_moment = Tensor(init.shape());
    p.value = std::move(init);
    p.trainable = true;
    p.decay = decay;
    return params_.emplace(name, std::move(p)).first->second;
}

Parameter& ParamSet::add_buffer(const std::string& name, Tensor init) {
    if (params_.count(name)) throw InvalidArgument("duplicate parameter name '" + name + "'");
    Parameter p;
    p.value = std::move(init);
    p.trainable = false;
    return params_.emplace(name, std::move(p)).first->second;
}

Parameter& ParamSet::operator[](const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw InvalidArgument("unknown parameter '" + name + "'");
    return it->second;
}

const Parameter& ParamSet::operator[](const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw InvalidArgument("unknown parameter '" + name + "'");
    return it->second;
}

void ParamSet::zero_grad() {
    for (auto& [_, p] : params_)
        if (p.trainable) p.grad.fill(0);
}

Real ParamSet::grad_norm() const {
    Real s = 0;
    for (const auto& [_, p] : params_)
        if (p.trainable) s += squared_norm(p.grad);
    return std::sqrt(s);
}

std::size_t ParamSet::trainable_count() const {
    std::size_t n = 0;
    for (const auto& [_, p] : params_)
        if (p.trainable) n += p.value.size();
    return n;
}

Tensor he_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
    Tensor t(std::move(shape));
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (auto& v : t.values()) v = rng.uniform(-bound, bound);
    return t;
}

}  // namespace ehrgan
