// Dense tensors and a small reverse-mode autodiff engine.
//
// The engine records a graph of nodes while operations run. Each node owns its
// forward value and a closure that pushes its gradient into its parents.
// Calling backward() on a scalar node walks that graph in reverse topological
// order. Only nodes that (transitively) depend on a requires_grad leaf record
// a closure, so inference builds no graph at all.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace kpreg {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

inline std::size_t shape_numel(const Shape &dims) {
    return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape &dims) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < dims.size(); ++i) {
        os << (i ? "x" : "") << dims[i];
    }
    os << ']';
    return os.str();
}

// Row-major dense array. Extents are positive; product(extents) == size().
template <typename T> class BasicTensor {
  public:
    using value_type = T;

    BasicTensor() = default;

    explicit BasicTensor(Shape dims, T fill = T(0)) : dims_(std::move(dims)) {
        for (std::size_t a = 0; a < dims_.size(); ++a) {
            if (dims_[a] == 0) {
                throw ShapeError("tensor extent on axis " + std::to_string(a) + " must be positive");
            }
        }
        data_.assign(shape_numel(dims_), fill);
    }

    BasicTensor(Shape dims, std::vector<T> values) : dims_(std::move(dims)), data_(std::move(values)) {
        if (shape_numel(dims_) != data_.size()) {
            throw ShapeError("tensor " + shape_str(dims_) + " cannot hold " + std::to_string(data_.size()) +
                             " values");
        }
    }

    const Shape &shape() const { return dims_; }
    std::size_t dim(std::size_t axis) const { return dims_.at(axis); }
    std::size_t ndim() const { return dims_.size(); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    std::span<T> values() { return data_; }
    std::span<const T> values() const { return data_; }
    T *data() { return data_.data(); }
    const T *data() const { return data_.data(); }
    std::vector<T> &storage() { return data_; }
    const std::vector<T> &storage() const { return data_; }

    T &operator[](std::size_t i) { return data_[i]; }
    const T &operator[](std::size_t i) const { return data_[i]; }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    BasicTensor reshaped(Shape dims) const {
        BasicTensor out;
        if (shape_numel(dims) != data_.size()) {
            throw ShapeError("cannot reshape " + shape_str(dims_) + " to " + shape_str(dims));
        }
        out.dims_ = std::move(dims);
        out.data_ = data_;
        return out;
    }

    template <typename U> BasicTensor<U> cast() const {
        return BasicTensor<U>(dims_, std::vector<U>(data_.begin(), data_.end()));
    }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    }

    friend bool operator==(const BasicTensor &a, const BasicTensor &b) {
        return a.dims_ == b.dims_ && a.data_ == b.data_;
    }

  private:
    Shape dims_;
    std::vector<T> data_;
};

using Tensor = BasicTensor<float>;

namespace detail {

template <typename T> struct Node {
    BasicTensor<T> value;
    BasicTensor<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    // Reads this node's grad and accumulates into parents' grads.
    std::function<void(Node &)> backward_fn;

    BasicTensor<T> &ensure_grad() {
        if (grad.empty()) {
            grad = BasicTensor<T>(value.shape(), T(0));
        }
        return grad;
    }
};

} // namespace detail

// Handle to a graph node. Copies share the node.
template <typename T> class Var {
  public:
    using NodePtr = std::shared_ptr<detail::Node<T>>;

    Var() = default;
    explicit Var(BasicTensor<T> value, bool requires_grad = false) : node_(std::make_shared<detail::Node<T>>()) {
        node_->value = std::move(value);
        node_->requires_grad = requires_grad;
    }

    bool defined() const { return static_cast<bool>(node_); }
    const BasicTensor<T> &value() const { return node_->value; }
    BasicTensor<T> &mutable_value() { return node_->value; }
    const Shape &shape() const { return node_->value.shape(); }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    const NodePtr &node() const { return node_; }

    // Builds a result node. `fn` is recorded only if some parent needs a gradient.
    static Var make_result(BasicTensor<T> value, std::vector<Var> parents,
                           std::function<void(detail::Node<T> &)> fn) {
        Var out(std::move(value));
        bool any = false;
        for (const auto &p : parents) {
            any = any || p.requires_grad();
        }
        if (any) {
            out.node_->requires_grad = true;
            for (auto &p : parents) {
                out.node_->parents.push_back(p.node_);
            }
            out.node_->backward_fn = std::move(fn);
        }
        return out;
    }

  private:
    NodePtr node_;
};

// Reverse pass from a scalar loss. Returns one gradient per entry of `params`,
// zero-filled for parameters the loss does not depend on.
template <typename T>
std::vector<BasicTensor<T>> backward(const Var<T> &loss, std::span<const Var<T>> params) {
    if (!loss.defined()) {
        throw std::logic_error("backward called without a recorded forward pass");
    }
    if (loss.value().size() != 1) {
        throw ShapeError("backward requires a scalar loss, got " + shape_str(loss.shape()));
    }

    std::vector<detail::Node<T> *> order;
    std::unordered_set<detail::Node<T> *> seen;
    // Iterative post-order DFS; the graph can be hundreds of nodes deep.
    std::vector<std::pair<detail::Node<T> *, std::size_t>> stack;
    if (loss.requires_grad()) {
        stack.emplace_back(loss.node().get(), 0);
        seen.insert(loss.node().get());
    }
    while (!stack.empty()) {
        auto &[node, next] = stack.back();
        if (next < node->parents.size()) {
            auto *parent = node->parents[next++].get();
            if (parent->requires_grad && seen.insert(parent).second) {
                stack.emplace_back(parent, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (auto *n : order) {
        n->grad = BasicTensor<T>(n->value.shape(), T(0));
    }
    if (!order.empty()) {
        loss.node()->grad[0] = T(1);
    }
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backward_fn) {
            (*it)->backward_fn(**it);
        }
    }

    std::vector<BasicTensor<T>> grads;
    grads.reserve(params.size());
    for (const auto &p : params) {
        auto *n = p.node().get();
        if (n != nullptr && seen.count(n) != 0) {
            grads.push_back(n->grad);
        } else {
            grads.emplace_back(p.shape(), T(0));
        }
    }
    for (auto *n : order) {
        n->grad = BasicTensor<T>();
    }
    return grads;
}

template <typename T> std::vector<BasicTensor<T>> backward(const Var<T> &loss, const std::vector<Var<T>> &params) {
    return backward(loss, std::span<const Var<T>>(params.data(), params.size()));
}

} // namespace kpreg
