#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "ehrgan/params.hpp"
#include "ehrgan/tensor.hpp"

namespace ehrgan {

class Graph;

/// Handle to a node of a computation record.
class Var {
public:
    Var() = default;
    Var(Graph* graph, std::uint32_t id) : graph_(graph), id_(id) {}

    Graph& graph() const { return *graph_; }
    std::uint32_t id() const { return id_; }
    const Tensor& value() const;
    const Shape& shape() const { return value().shape(); }
    bool valid() const { return graph_ != nullptr; }

private:
    Graph* graph_ = nullptr;
    std::uint32_t id_ = 0;
};

/// Tape of forward computations supporting one reverse-mode sweep.
///
/// Parameter leaves reference ParamSet storage; backward() adds their
/// gradients into Parameter::grad. A record must be cleared (or a new one
/// made) before backward can run again.
class Graph {
public:
    using BackwardFn = std::function<void(Graph&, std::uint32_t self)>;

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Var constant(Tensor value);
    /// Leaf bound to a parameter. With trainable=false no gradient is routed to it.
    Var param(Parameter& p, bool trainable = true);
    /// Read-only leaf referencing a parameter; never receives a gradient.
    Var frozen(const Parameter& p);

    /// Append an interior node; `needs_grad` is true if any parent needs one.
    Var node(Tensor value, bool needs_grad, BackwardFn backward);

    const Tensor& value(std::uint32_t id) const;
    bool needs_grad(std::uint32_t id) const { return nodes_[id].needs_grad; }
    /// Gradient buffer of a node, allocated as zeros on first access.
    Tensor& grad(std::uint32_t id);
    bool has_grad(std::uint32_t id) const { return !nodes_[id].grad.empty(); }

    bool needs_grad(const Var& v) const { return needs_grad(v.id()); }
    Tensor& grad(const Var& v) { return grad(v.id()); }
    const Tensor& value(const Var& v) const { return value(v.id()); }

    /// Reverse accumulation from a single-element loss node.
    void backward(const Var& loss);

    void clear();
    std::size_t size() const { return nodes_.size(); }
    bool backward_done() const { return backward_done_; }

private:
    struct Node {
        Tensor value;
        const Tensor* ref = nullptr;
        Tensor grad;
        Tensor* sink = nullptr;
        bool needs_grad = false;
        BackwardFn backward;
    };

    std::vector<Node> nodes_;
    bool backward_done_ = false;
};

inline const Tensor& Var::value() const { return graph_->value(id_); }

}  // namespace ehrgan
