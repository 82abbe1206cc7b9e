#include "ehrgan/graph.hpp"

#include "ehrgan/error.hpp"

namespace ehrgan {

Var Graph::constant(Tensor value) {
    Node n;
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Var Graph::param(Parameter& p, bool trainable) {
    Node n;
    n.ref = &p.value;
    n.needs_grad = trainable && p.trainable;
    if (n.needs_grad) n.sink = &p.grad;
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Var Graph::frozen(const Parameter& p) {
    Node n;
    n.ref = &p.value;
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

Var Graph::node(Tensor value, bool needs_grad, BackwardFn backward) {
    if (backward_done_) throw Error("computation record already differentiated; clear it before recording");
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    if (needs_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var(this, static_cast<std::uint32_t>(nodes_.size() - 1));
}

const Tensor& Graph::value(std::uint32_t id) const {
    const Node& n = nodes_[id];
    return n.ref ? *n.ref : n.value;
}

Tensor& Graph::grad(std::uint32_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor(value(id).shape());
    return n.grad;
}

void Graph::backward(const Var& loss) {
    if (backward_done_) throw Error("backward called twice on the same computation record");
    if (loss.id() >= nodes_.size() || &loss.graph() != this) throw InvalidArgument("loss node is not part of this record");
    if (value(loss.id()).size() != 1)
        throw ShapeError("backward requires a single-element loss, got " + shape_string(value(loss.id()).shape()));
    backward_done_ = true;
    if (!nodes_[loss.id()].needs_grad) return;

    grad(loss.id())[0] = 1;
    for (std::uint32_t id = loss.id() + 1; id-- > 0;) {
        Node& n = nodes_[id];
        if (!n.needs_grad || n.grad.empty()) continue;
        if (n.backward) n.backward(*this, id);
        if (n.sink) {
            Real* dst = n.sink->data();
            const Real* src = n.grad.data();
            for (std::size_t i = 0; i < n.grad.size(); ++i) dst[i] += src[i];
        }
    }
}

void Graph::clear() {
    nodes_.clear();
    backward_done_ = false;
}

}  // namespace ehrgan
