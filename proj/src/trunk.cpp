#include "ehrgan/trunk.hpp"

#include <algorithm>

#include "ehrgan/error.hpp"
#include "ehrgan/ops.hpp"

namespace ehrgan {

std::size_t TrunkConfig::min_length() const {
    return *std::max_element(widths.begin(), widths.end()) + segments - 1;
}

void TrunkConfig::validate() const {
    if (widths.empty()) throw InvalidArgument("conv trunk needs at least one filter width");
    for (auto w : widths)
        if (w == 0) throw InvalidArgument("conv filter width must be positive");
    if (maps == 0) throw InvalidArgument("conv trunk needs at least one feature map");
    if (segments == 0) throw InvalidArgument("pooling segment count must be positive");
}

void add_trunk_params(ParamSet& ps, const std::string& prefix, std::size_t in_dim, const TrunkConfig& cfg, Rng& rng) {
    cfg.validate();
    for (auto w : cfg.widths) {
        const std::string name = prefix + "conv" + std::to_string(w);
        ps.add(name + ".w", he_uniform({w, in_dim, cfg.maps}, w * in_dim, rng), true);
        ps.add(name + ".b", Tensor({cfg.maps}), false);
    }
}

Var trunk_forward(Graph& g, const Binding& p, const std::string& prefix, Var x, const TrunkConfig& cfg) {
    if (x.shape().size() != 3) throw ShapeError("conv trunk input must be [batch,time,channels]");
    if (x.shape()[1] < cfg.min_length())
        throw InvalidArgument("sequence of " + std::to_string(x.shape()[1]) + " rows is shorter than the " +
                              std::to_string(cfg.min_length()) + " the conv trunk needs");
    std::vector<Var> pooled;
    for (auto w : cfg.widths) {
        const std::string name = prefix + "conv" + std::to_string(w);
        Var h = nn::relu(nn::conv1d(x, p(g, name + ".w"), p(g, name + ".b")));
        pooled.push_back(cfg.segments == 1 ? nn::max_over_time(h) : nn::segment_max(h, cfg.segments));
    }
    return pooled.size() == 1 ? pooled[0] : nn::concat(pooled);
}

void add_dense_params(ParamSet& ps, const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
    ps.add(name + ".w", he_uniform({in, out}, in, rng), true);
    ps.add(name + ".b", Tensor({out}), false);
}

Var dense_forward(Graph& g, const Binding& p, const std::string& name, Var x) {
    return nn::dense(x, p(g, name + ".w"), p(g, name + ".b"));
}

}  // namespace ehrgan
