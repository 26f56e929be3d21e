#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "atmskd/errors.hpp"

namespace atmskd {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ')';
    return os.str();
}

namespace detail {

/// One node of the reverse-mode graph. Parents are held by shared_ptr so the
/// subgraph reachable from a loss stays alive until the loss handle is dropped.
struct TensorNode {
    Shape shape;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // allocated lazily, same length as data
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward;  // reads this->grad, accumulates into parents
    const char* op = "leaf";

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }

    std::vector<double>& ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
        return grad;
    }
};

}  // namespace detail

/// Dense 64-bit tensor handle with optional autograd tracking. Copying a
/// Tensor copies the handle, not the storage.
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return full(std::move(shape), 0.0, requires_grad);
    }

    static Tensor full(Shape shape, double value, bool requires_grad = false) {
        auto node = std::make_shared<detail::TensorNode>();
        node->data.assign(static_cast<std::size_t>(shape_numel(shape)), value);
        node->shape = std::move(shape);
        node->requires_grad = requires_grad;
        return Tensor(std::move(node));
    }

    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false) {
        if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
            throw DimensionError("tensor: shape " + shape_str(shape) + " does not match data length " +
                                 std::to_string(data.size()));
        auto node = std::make_shared<detail::TensorNode>();
        node->shape = std::move(shape);
        node->data = std::move(data);
        node->requires_grad = requires_grad;
        return Tensor(std::move(node));
    }

    static Tensor scalar(double value, bool requires_grad = false) {
        return from_data({1}, {value}, requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::int64_t numel() const { return node_->numel(); }
    int dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t rank() const { return node_->shape.size(); }

    std::vector<double>& data() { return node_->data; }
    const std::vector<double>& data() const { return node_->data; }
    double* ptr() { return node_->data.data(); }
    const double* ptr() const { return node_->data.data(); }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool rg) { node_->requires_grad = rg; }

    bool has_grad() const { return node_->grad.size() == node_->data.size(); }
    std::vector<double>& grad() {
        if (!has_grad()) throw UsageError("tensor: gradient not populated; run backward() first");
        return node_->grad;
    }
    const std::vector<double>& grad() const {
        if (!has_grad()) throw UsageError("tensor: gradient not populated; run backward() first");
        return node_->grad;
    }

    void zero_grad() {
        if (node_->requires_grad) node_->ensure_grad().assign(node_->data.size(), 0.0);
    }

    double item() const {
        if (numel() != 1) throw UsageError("tensor: item() requires a single-element tensor, shape is " +
                                           shape_str(node_->shape));
        return node_->data[0];
    }

    /// Copy of the values with no graph history.
    Tensor detach() const { return from_data(node_->shape, node_->data, false); }

    const char* op_name() const { return node_->op; }

    /// Reverse-mode accumulation from this scalar. Each reachable node is
    /// visited exactly once in reverse topological order.
    void backward() const {
        if (numel() != 1) throw UsageError("backward: loss must be scalar, shape is " + shape_str(node_->shape));
        if (!node_->requires_grad)
            throw UsageError("backward: loss does not require grad (nothing recorded on tape)");

        std::vector<detail::TensorNode*> order = topo_order(node_.get());
        node_->ensure_grad()[0] = 1.0;
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            detail::TensorNode* n = *it;
            if (n->backward) n->backward(*n);
        }
    }

    std::shared_ptr<detail::TensorNode> node() const { return node_; }

    explicit Tensor(std::shared_ptr<detail::TensorNode> node) : node_(std::move(node)) {}

  private:
    static std::vector<detail::TensorNode*> topo_order(detail::TensorNode* root) {
        std::vector<detail::TensorNode*> order;
        std::unordered_set<detail::TensorNode*> seen;
        // Iterative post-order DFS; graphs from deep networks overflow the
        // call stack with the recursive version.
        std::vector<std::pair<detail::TensorNode*, std::size_t>> stack;
        stack.emplace_back(root, 0);
        seen.insert(root);
        while (!stack.empty()) {
            auto& [node, next_child] = stack.back();
            if (next_child < node->parents.size()) {
                detail::TensorNode* child = node->parents[next_child++].get();
                if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
            } else {
                order.push_back(node);
                stack.pop_back();
            }
        }
        return order;
    }

    std::shared_ptr<detail::TensorNode> node_;
};

namespace detail {

inline thread_local bool autograd_enabled = true;

}  // namespace detail

/// Scoped autograd switch: ops inside the scope record no history, so
/// inference passes allocate no graph.
struct NoGradGuard {
    NoGradGuard() : prev_(detail::autograd_enabled) { detail::autograd_enabled = false; }
    ~NoGradGuard() { detail::autograd_enabled = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool prev_;
};

namespace detail {

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw DimensionError(msg);
}

inline void check_finite(const std::vector<double>& values, const char* op) {
    for (double v : values) {
        if (!std::isfinite(v))
            throw NumericError(std::string(op) + " produced a non-finite value");
    }
}

/// Build a result node. Parents are recorded (and the backward rule kept)
/// only when some input requires grad, so inference builds no graph.
inline Tensor make_result(Shape shape, std::vector<double> data, const char* op,
                          std::vector<Tensor> inputs,
                          std::function<void(TensorNode&)> backward) {
    check_finite(data, op);
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->data = std::move(data);
    node->op = op;
    bool any_rg = false;
    for (const auto& t : inputs) any_rg = any_rg || t.requires_grad();
    any_rg = any_rg && autograd_enabled;
    node->requires_grad = any_rg;
    if (any_rg) {
        node->parents.reserve(inputs.size());
        for (const auto& t : inputs) node->parents.push_back(t.node());
        node->backward = std::move(backward);
    }
    return Tensor(std::move(node));
}

}  // namespace detail

}  // namespace atmskd
