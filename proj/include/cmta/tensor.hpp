#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

namespace cmta {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);

// One node of the dynamic differentiation graph. Non-leaf nodes hold edges to
// their parents plus a closure that pushes this node's gradient into them.
// Graphs are rebuilt per forward pass; a node's values are immutable while any
// graph referencing it is alive (parameters are mutated only between passes).
struct TensorNode {
    Shape shape;
    std::vector<double> values;
    bool requires_grad = false;
    std::vector<double> grad;  // filled by backward(); empty before
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(const TensorNode&)> backward_fn;

    std::size_t numel() const { return values.size(); }
    bool is_leaf() const { return parents.empty(); }
};

// Value-semantics handle to a graph node. Copies share the node.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}

    static Tensor zeros(const Shape& shape);
    static Tensor full(const Shape& shape, double value);
    static Tensor from(const Shape& shape, std::vector<double> values, bool requires_grad = false);
    static Tensor from_rows(const std::vector<std::vector<double>>& rows);
    static Tensor scalar(double value);
    static Tensor identity(std::size_t n);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->values.size(); }
    std::size_t rows() const;  // rank-2 only
    std::size_t cols() const;  // rank-2 only

    const std::vector<double>& values() const { return node_->values; }
    double value() const;                       // 1-element tensors only
    double at(std::size_t i, std::size_t j) const;

    // Direct access for parameter updates and finite-difference probes.
    // Mutating a node that participates in an already-built graph invalidates
    // that graph; only touch leaves between passes.
    std::vector<double>& mutable_values() { return node_->values; }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool flag);
    bool is_leaf() const { return node_->is_leaf(); }

    // Gradient buffer populated by the most recent backward() that reached
    // this node; nullptr before any backward.
    const std::vector<double>* grad() const;

    const TensorNode* node() const { return node_.get(); }
    const std::shared_ptr<TensorNode>& node_ptr() const { return node_; }

private:
    std::shared_ptr<TensorNode> node_;
};

// Gradients keyed by parameter identity. Holds exactly the requires_grad
// leaves reachable from the loss passed to backward().
class GradientMap {
public:
    bool contains(const Tensor& param) const { return grads_.count(param.node()) != 0; }
    const Tensor& at(const Tensor& param) const;
    std::size_t size() const { return grads_.size(); }

    void insert(const TensorNode* key, Tensor grad) { grads_.emplace(key, std::move(grad)); }

    auto begin() const { return grads_.begin(); }
    auto end() const { return grads_.end(); }

private:
    std::unordered_map<const TensorNode*, Tensor> grads_;
};

enum class UnaryKind { Sigmoid, Relu, Exp, Log, Gelu, Sqrt, Abs, Reciprocal };

// ---- differentiable operations ---------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor reshape(const Tensor& a, const Shape& shape);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise

Tensor scale(const Tensor& a, double c);
Tensor add_const(const Tensor& a, double c);
Tensor scalar_mul(const Tensor& a, const Tensor& s);  // s has one element
Tensor scalar_add(const Tensor& a, const Tensor& s);

Tensor sum(const Tensor& a);         // full reduction to a 1-element tensor
Tensor reduce_max(const Tensor& a);  // gradient routes to the first argmax

Tensor unary(UnaryKind kind, const Tensor& a);
inline Tensor sigmoid(const Tensor& a) { return unary(UnaryKind::Sigmoid, a); }
inline Tensor relu(const Tensor& a) { return unary(UnaryKind::Relu, a); }
inline Tensor exp(const Tensor& a) { return unary(UnaryKind::Exp, a); }
inline Tensor log(const Tensor& a) { return unary(UnaryKind::Log, a); }
inline Tensor gelu(const Tensor& a) { return unary(UnaryKind::Gelu, a); }
inline Tensor sqrt(const Tensor& a) { return unary(UnaryKind::Sqrt, a); }
inline Tensor abs(const Tensor& a) { return unary(UnaryKind::Abs, a); }
inline Tensor reciprocal(const Tensor& a) { return unary(UnaryKind::Reciprocal, a); }

Tensor clamp(const Tensor& a, double lo, double hi);

Tensor softmax(const Tensor& a, std::size_t axis);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias);

Tensor concat(const Tensor& a, const Tensor& b, std::size_t axis);      // rank-2
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t count);  // rank-2
Tensor add_row_broadcast(const Tensor& x, const Tensor& row);  // x: n×d, row: d

Tensor depthwise_conv2d(const Tensor& x, const Tensor& kernel);  // x: c×h×w, kernel: c×k×k

// Same values, no graph edges, requires_grad false. Gradients never cross it.
Tensor detach(const Tensor& a);

// Reverse sweep from a scalar loss. Fan-out accumulates additively; leaf
// gradients are also left on the nodes themselves (Tensor::grad).
GradientMap backward(const Tensor& loss);

}  // namespace cmta
