#pragma once

#include <string>
#include <vector>

#include "ehrgan/graph.hpp"
#include "ehrgan/params.hpp"
#include "ehrgan/rng.hpp"

namespace ehrgan {

/// Binds named parameters of a ParamSet into a graph, either as trainable
/// leaves or as read-only ones.
class Binding {
public:
    static Binding trainable(ParamSet& ps) { return Binding(&ps, &ps); }
    static Binding frozen(const ParamSet& ps) { return Binding(nullptr, &ps); }

    Var operator()(Graph& g, const std::string& name) const {
        return mutable_ ? g.param((*mutable_)[name]) : g.frozen((*params_)[name]);
    }
    const ParamSet& params() const { return *params_; }
    /// The bound set when trainable, otherwise null.
    ParamSet* mutable_params() const { return mutable_; }
    bool is_trainable() const { return mutable_ != nullptr; }

private:
    Binding(ParamSet* m, const ParamSet* p) : mutable_(m), params_(p) {}
    ParamSet* mutable_;
    const ParamSet* params_;
};

/// Parallel conv banks of several widths, each followed by ReLU and max
/// pooling over `segments` contiguous time slices, concatenated.
struct TrunkConfig {
    std::vector<std::size_t> widths = {3, 4, 5};
    std::size_t maps = 100;
    std::size_t segments = 1;

    std::size_t features() const { return widths.size() * maps * segments; }
    /// Shortest input the trunk accepts.
    std::size_t min_length() const;
    void validate() const;
};

void add_trunk_params(ParamSet& ps, const std::string& prefix, std::size_t in_dim, const TrunkConfig& cfg, Rng& rng);

/// x [B,T,M] -> [B, features()].
Var trunk_forward(Graph& g, const Binding& p, const std::string& prefix, Var x, const TrunkConfig& cfg);

/// Dense layer parameters "<name>.w" [in,out] (decayed) and "<name>.b" [out].
void add_dense_params(ParamSet& ps, const std::string& name, std::size_t in, std::size_t out, Rng& rng);
Var dense_forward(Graph& g, const Binding& p, const std::string& name, Var x);

}  // namespace ehrgan
