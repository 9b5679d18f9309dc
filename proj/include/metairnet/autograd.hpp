#pragma once

// Minimal reverse-mode automatic differentiation over Tensor<S>.
//
// A Var is a shared handle to a graph node. Ops record their parents and a
// backward closure when gradient recording is enabled and at least one input
// requires a gradient; otherwise the result is a plain constant.

#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

#include "metairnet/tensor.hpp"

namespace metairnet {

namespace detail {

inline bool& grad_mode() {
    static thread_local bool enabled = true;
    return enabled;
}

template <typename S>
struct Node {
    Tensor<S> value;
    Tensor<S> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    /// Gradient storage, zero-initialized on first use.
    typename Tensor<S>::Array& grad_buffer() {
        if (grad.empty()) grad = Tensor<S>(value.shape);
        return grad.data;
    }

    Node& parent(std::size_t i) { return *parents[i]; }
};

}  // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = previous_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

template <typename S>
class Var {
public:
    using Node = detail::Node<S>;

    Var() = default;
    explicit Var(Tensor<S> value, bool requires_grad = false) : node_(std::make_shared<Node>()) {
        node_->value = std::move(value);
        node_->requires_grad = requires_grad;
    }

    bool defined() const { return node_ != nullptr; }

    const Tensor<S>& value() const { return node_->value; }
    Tensor<S>& mutable_value() { return node_->value; }
    const Shape& shape() const { return node_->value.shape; }
    Index dim(int i) const { return node_->value.dim(i); }
    Index size() const { return node_->value.size(); }
    S item() const {
        if (size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
        return node_->value.data[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool r) { node_->requires_grad = r; }

    bool has_grad() const { return !node_->grad.empty(); }
    const Tensor<S>& grad() const { return node_->grad; }
    void zero_grad() { node_->grad = Tensor<S>(); }

    const std::shared_ptr<Node>& node() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

/// Wrap a computed value into a graph node with the given parents.
template <typename S>
Var<S> make_result(Tensor<S> value, std::initializer_list<Var<S>> parents,
                   std::function<void(detail::Node<S>&)> backward) {
    Var<S> out(std::move(value));
    if (!grad_enabled()) return out;
    bool any = false;
    for (const auto& p : parents) any = any || p.requires_grad();
    if (!any) return out;
    auto& node = *out.node();
    node.requires_grad = true;
    for (const auto& p : parents) node.parents.push_back(p.node());
    node.backward = std::move(backward);
    return out;
}

template <typename S>
Var<S> make_result(Tensor<S> value, const std::vector<Var<S>>& parents,
                   std::function<void(detail::Node<S>&)> backward) {
    Var<S> out(std::move(value));
    if (!grad_enabled()) return out;
    bool any = false;
    for (const auto& p : parents) any = any || p.requires_grad();
    if (!any) return out;
    auto& node = *out.node();
    node.requires_grad = true;
    for (const auto& p : parents) node.parents.push_back(p.node());
    node.backward = std::move(backward);
    return out;
}

/// Accumulate d(root)/d(x) into every reachable node that requires a gradient.
template <typename S>
void backward(const Var<S>& root) {
    if (root.size() != 1) throw ShapeError("backward() needs a scalar root, got " + to_string(root.shape()));
    if (!root.requires_grad()) return;

    using Node = detail::Node<S>;
    std::vector<Node*> order;
    std::unordered_set<Node*> seen{root.node().get()};
    std::vector<std::pair<Node*, std::size_t>> stack{{root.node().get(), 0}};
    while (!stack.empty()) {
        Node* n = stack.back().first;
        std::size_t& i = stack.back().second;
        if (i < n->parents.size()) {
            Node* p = n->parents[i++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    root.node()->grad_buffer().setConstant(S(1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward && !n->grad.empty()) n->backward(*n);
    }
}

template <typename S>
Var<S> detach(const Var<S>& x) {
    return Var<S>(x.value());
}

template <typename S>
Var<S> constant(Tensor<S> t) {
    return Var<S>(std::move(t));
}

/// Learnable leaf with value semantics: copying a Parameter copies its value
/// into a fresh node, so copies of a module never share state.
template <typename S>
class Parameter {
public:
    Parameter() = default;
    explicit Parameter(Tensor<S> value) : var_(std::move(value), true) {}
    Parameter(const Parameter& other)
        : var_(other.var_.defined() ? Var<S>(other.var_.value(), other.var_.requires_grad()) : Var<S>()) {}
    Parameter& operator=(const Parameter& other) {
        if (this != &other)
            var_ = other.var_.defined() ? Var<S>(other.var_.value(), other.var_.requires_grad()) : Var<S>();
        return *this;
    }
    Parameter(Parameter&&) noexcept = default;
    Parameter& operator=(Parameter&&) noexcept = default;

    const Var<S>& var() const { return var_; }
    operator const Var<S>&() const { return var_; }

    const Tensor<S>& value() const { return var_.value(); }
    Tensor<S>& mutable_value() { return var_.mutable_value(); }
    const Shape& shape() const { return var_.shape(); }

private:
    Var<S> var_;
};

}  // namespace metairnet
