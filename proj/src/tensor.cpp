#include "cmta/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "cmta/errors.hpp"

namespace cmta {

std::string shape_str(const Shape& shape) {
    std::ostringstream out;
    out << "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out << "x";
        out << shape[i];
    }
    out << "]";
    return out.str();
}

namespace {

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

std::shared_ptr<TensorNode> make_node(Shape shape, std::vector<double> values) {
    auto node = std::make_shared<TensorNode>();
    node->shape = std::move(shape);
    node->values = std::move(values);
    return node;
}

void require_rank2(const Tensor& t, const char* op) {
    if (t.rank() != 2) {
        throw ShapeError(std::string(op) + ": expected a rank-2 tensor, got " +
                         shape_str(t.shape()));
    }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

// Links `out` to its differentiable parents. No-grad inputs produce a graph
// leaf, so evaluation without parameters stays edge-free.
void link(const std::shared_ptr<TensorNode>& out,
          std::vector<std::shared_ptr<TensorNode>> parents,
          std::function<void(const TensorNode&)> backward_fn) {
    bool any = false;
    for (const auto& p : parents) any = any || p->requires_grad;
    if (!any) return;
    out->requires_grad = true;
    out->parents = std::move(parents);
    out->backward_fn = std::move(backward_fn);
}

// C += A·B with optional transposes; all matrices row-major.
void gemm_accum(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
                const std::vector<double>& a, const std::vector<double>& b,
                std::vector<double>& c) {
    if (!trans_a && !trans_b) {
        for (std::size_t i = 0; i < m; ++i) {
            const double* arow = a.data() + i * k;
            double* crow = c.data() + i * n;
            for (std::size_t p = 0; p < k; ++p) {
                double av = arow[p];
                if (av == 0.0) continue;
                const double* brow = b.data() + p * n;
                for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    } else if (!trans_a && trans_b) {
        // A: m×k, B: n×k
        for (std::size_t i = 0; i < m; ++i) {
            const double* arow = a.data() + i * k;
            double* crow = c.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) {
                const double* brow = b.data() + j * k;
                double acc = 0.0;
                for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
                crow[j] += acc;
            }
        }
    } else if (trans_a && !trans_b) {
        // A: k×m, B: k×n
        for (std::size_t p = 0; p < k; ++p) {
            const double* arow = a.data() + p * m;
            const double* brow = b.data() + p * n;
            for (std::size_t i = 0; i < m; ++i) {
                double av = arow[i];
                if (av == 0.0) continue;
                double* crow = c.data() + i * n;
                for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
        }
    } else {
        // A: k×m, B: n×k
        for (std::size_t i = 0; i < m; ++i) {
            double* crow = c.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) {
                const double* brow = b.data() + j * k;
                double acc = 0.0;
                for (std::size_t p = 0; p < k; ++p) acc += a[p * m + i] * brow[p];
                crow[j] += acc;
            }
        }
    }
}

}  // namespace

// ---- Tensor -----------------------------------------------------------------

Tensor Tensor::zeros(const Shape& shape) { return full(shape, 0.0); }

Tensor Tensor::full(const Shape& shape, double value) {
    if (shape.empty()) throw ShapeError("tensor shape must have at least one dimension");
    for (std::size_t d : shape) {
        if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
    }
    return Tensor(make_node(shape, std::vector<double>(shape_numel(shape), value)));
}

Tensor Tensor::from(const Shape& shape, std::vector<double> values, bool requires_grad) {
    if (shape.empty()) throw ShapeError("tensor shape must have at least one dimension");
    if (shape_numel(shape) != values.size()) {
        throw ShapeError("values length " + std::to_string(values.size()) +
                         " does not match shape " + shape_str(shape));
    }
    auto node = make_node(shape, std::move(values));
    node->requires_grad = requires_grad;
    return Tensor(std::move(node));
}

Tensor Tensor::from_rows(const std::vector<std::vector<double>>& rows) {
    if (rows.empty()) throw ShapeError("from_rows: need at least one row");
    std::size_t cols = rows[0].size();
    std::vector<double> values;
    values.reserve(rows.size() * cols);
    for (const auto& r : rows) {
        if (r.size() != cols) throw ShapeError("from_rows: ragged rows");
        values.insert(values.end(), r.begin(), r.end());
    }
    return from({rows.size(), cols}, std::move(values));
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

Tensor Tensor::identity(std::size_t n) {
    Tensor t = zeros({n, n});
    for (std::size_t i = 0; i < n; ++i) t.mutable_values()[i * n + i] = 1.0;
    return t;
}

std::size_t Tensor::rows() const {
    if (rank() != 2) throw ShapeError("rows(): tensor is not rank-2: " + shape_str(shape()));
    return shape()[0];
}

std::size_t Tensor::cols() const {
    if (rank() != 2) throw ShapeError("cols(): tensor is not rank-2: " + shape_str(shape()));
    return shape()[1];
}

double Tensor::value() const {
    if (numel() != 1) {
        throw ContractError("value(): tensor has " + std::to_string(numel()) + " elements");
    }
    return node_->values[0];
}

double Tensor::at(std::size_t i, std::size_t j) const {
    if (rank() != 2) throw ShapeError("at(i,j): tensor is not rank-2: " + shape_str(shape()));
    return node_->values[i * shape()[1] + j];
}

void Tensor::set_requires_grad(bool flag) {
    if (!node_->is_leaf()) throw ContractError("requires_grad can only be toggled on leaves");
    node_->requires_grad = flag;
}

const std::vector<double>* Tensor::grad() const {
    return node_->grad.empty() ? nullptr : &node_->grad;
}

const Tensor& GradientMap::at(const Tensor& param) const {
    auto it = grads_.find(param.node());
    if (it == grads_.end()) {
        throw ContractError("GradientMap: parameter was not reached by backward()");
    }
    return it->second;
}

// ---- linear algebra ---------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank2(a, "matmul");
    require_rank2(b, "matmul");
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    if (b.rows() != k) {
        throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
    std::vector<double> values(m * n, 0.0);
    gemm_accum(false, false, m, n, k, a.values(), b.values(), values);
    auto out = make_node({m, n}, std::move(values));
    link(out, {a.node_ptr(), b.node_ptr()},
         [an = a.node_ptr(), bn = b.node_ptr(), m, n, k](const TensorNode& self) {
             if (an->requires_grad) gemm_accum(false, true, m, k, n, self.grad, bn->values, an->grad);
             if (bn->requires_grad) gemm_accum(true, false, k, n, m, an->values, self.grad, bn->grad);
         });
    return Tensor(out);
}

Tensor transpose(const Tensor& a) {
    require_rank2(a, "transpose");
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<double> values(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) values[j * m + i] = a.values()[i * n + j];
    auto out = make_node({n, m}, std::move(values));
    link(out, {a.node_ptr()}, [an = a.node_ptr(), m, n](const TensorNode& self) {
        if (!an->requires_grad) return;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) an->grad[i * n + j] += self.grad[j * m + i];
    });
    return Tensor(out);
}

Tensor reshape(const Tensor& a, const Shape& shape) {
    if (shape_numel(shape) != a.numel()) {
        throw ShapeError("reshape: element count mismatch, " + shape_str(a.shape()) + " -> " +
                         shape_str(shape));
    }
    auto out = make_node(shape, a.values());
    link(out, {a.node_ptr()}, [an = a.node_ptr()](const TensorNode& self) {
        if (!an->requires_grad) return;
        for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    });
    return Tensor(out);
}

// ---- elementwise ------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    std::vector<double> values(a.numel());
    for (std::size_t i = 0; i < values.size(); ++i) values[i] = a.values()[i] + b.values()[i];
    auto out = make_node(a.shape(), std::move(values));
    link(out, {a.node_ptr(), b.node_ptr()},
         [an = a.node_ptr(), bn = b.node_ptr()](const TensorNode& self) {
             if (an->requires_grad)
                 for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
             if (bn->requires_grad)
                 for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i];
         });
    return Tensor(out);
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    std::vector<double> values(a.numel());
    for (std::size_t i = 0; i < values.size(); ++i) values[i] = a.values()[i] - b.values()[i];
    auto out = make_node(a.shape(), std::move(values));
    link(out, {a.node_ptr(), b.node_ptr()},
         [an = a.node_ptr(), bn = b.node_ptr()](const TensorNode& self) {
             if (an->requires_grad)
                 for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
             if (bn->requires_grad)
                 for (std::size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] -= self.grad[i];
         });
    return Tensor(out);
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    std::vector<double> values(a.numel());
    for (std::size_t i = 0; i < values.size(); ++i) values[i] = a.values()[i] * b.values()[i];
    auto out = make_node(a.shape(), std::move(values));
    link(out, {a.node_ptr(), b.node_ptr()},
         [an = a.node_ptr(), bn = b.node_ptr()](const TensorNode& self) {
             if (an->requires_grad)
                 for (std::size_t i = 0; i < self.grad.size(); ++i)
                     an->grad[i] += self.grad[i] * bn->values[i];
             if (bn->requires_grad)
                 for (std::size_t i = 0; i < self.grad.size(); ++i)
                     bn->grad[i] += self.grad[i] * an->values[i];
         });
    return Tensor(out);
}

Tensor scale(const Tensor& a, double c) {
    std::vector<double> values(a.numel());
    for (std::size_t i = 0; i < values.size(); ++i) values[i] = a.values()[i] * c;
    auto out = make_node(a.shape(), std::move(values));
    link(out, {a.node_ptr()}, [an = a.node_ptr(), c](const TensorNode& self) {
        if (!an->requires_grad) return;
        for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * c;
    });
    return Tensor(out);
}

Tensor add_const(const Tensor& a, double c) {
    std::vector<double> values(a.numel());
    for (std::size_t i = 0; i < values.size(); ++i) values[i] = a.values()[i] + c;
    auto out = make_node(a.shape(), std::move(values));
    link(out, {a.node_ptr()}, [an = a.node_ptr()](const TensorNode& self) {
        if (!an->requires_grad) return;
        for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    });
    return Tensor(out);
}

Tensor scalar_mul(const Tensor& a, const Tensor& s) {
    if (s.numel() != 1) throw ShapeError("scalar_mul: scale factor must have one element");
    const double sv = s.values()[0];
    std::vector<double> values(a.numel());
    for (std::size_t i = 0; i < values.size(); ++i) values[i] = a.values()[i] * sv;
    auto out = make_node(a.shape(), std::move(values));
    link(out, {a.node_ptr(), s.node_ptr()},
         [an = a.node_ptr(), sn = s.node_ptr(), sv](const TensorNode& self) {
             if (an->requires_grad)
                 for (std::size_t i = 0; i < self.grad.size(); ++i)
                     an->grad[i] += self.grad[i] * sv;
             if (sn->requires_grad) {
                 double acc = 0.0;
                 for (std::size_t i = 0; i < self.grad.size(); ++i)
                     acc += self.grad[i] * an->values[i];
                 sn->grad[0] += acc;
             }
         });
    return Tensor(out);
}

Tensor scalar_add(const Tensor& a, const Tensor& s) {
    if (s.numel() != 1) throw ShapeError("scalar_add: addend must have one element");
    const double sv = s.values()[0];
    std::vector<double> values(a.numel());
    for (std::size_t i = 0; i < values.size(); ++i) values[i] = a.values()[i] + sv;
    auto out = make_node(a.shape(), std::move(values));
    link(out, {a.node_ptr(), s.node_ptr()},
         [an = a.node_ptr(), sn = s.node_ptr()](const TensorNode& self) {
             if (an->requires_grad)
                 for (std::size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
             if (sn->requires_grad) {
                 double acc = 0.0;
                 for (double g : self.grad) acc += g;
                 sn->grad[0] += acc;
             }
         });
    return Tensor(out);
}

// ---- reductions ---------------------------------------------------------------

Tensor sum(const Tensor& a) {
    double acc = 0.0;
    for (double v : a.values()) acc += v;
    auto out = make_node({1}, {acc});
    link(out, {a.node_ptr()}, [an = a.node_ptr()](const TensorNode& self) {
        if (!an->requires_grad) return;
        const double g = self.grad[0];
        for (double& gi : an->grad) gi += g;
    });
    return Tensor(out);
}

Tensor reduce_max(const Tensor& a) {
    std::size_t arg = 0;
    for (std::size_t i = 1; i < a.numel(); ++i)
        if (a.values()[i] > a.values()[arg]) arg = i;
    auto out = make_node({1}, {a.values()[arg]});
    link(out, {a.node_ptr()}, [an = a.node_ptr(), arg](const TensorNode& self) {
        if (!an->requires_grad) return;
        an->grad[arg] += self.grad[0];
    });
    return Tensor(out);
}

// ---- unary ------------------------------------------------------------------

namespace {

inline double gelu_value(double x) { return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2)); }

inline double gelu_derivative(double x) {
    constexpr double inv_sqrt_2pi = 0.3989422804014326779;
    return 0.5 * (1.0 + std::erf(x * M_SQRT1_2)) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
}

}  // namespace

Tensor unary(UnaryKind kind, const Tensor& a) {
    std::vector<double> values(a.numel());
    const auto& x = a.values();
    switch (kind) {
        case UnaryKind::Sigmoid:
            for (std::size_t i = 0; i < x.size(); ++i) values[i] = 1.0 / (1.0 + std::exp(-x[i]));
            break;
        case UnaryKind::Relu:
            for (std::size_t i = 0; i < x.size(); ++i) values[i] = x[i] > 0.0 ? x[i] : 0.0;
            break;
        case UnaryKind::Exp:
            for (std::size_t i = 0; i < x.size(); ++i) values[i] = std::exp(x[i]);
            break;
        case UnaryKind::Log:
            for (std::size_t i = 0; i < x.size(); ++i) {
                if (x[i] <= 0.0) {
                    throw DomainError("log: non-positive input " + std::to_string(x[i]) +
                                      " at flat index " + std::to_string(i));
                }
                values[i] = std::log(x[i]);
            }
            break;
        case UnaryKind::Gelu:
            for (std::size_t i = 0; i < x.size(); ++i) values[i] = gelu_value(x[i]);
            break;
        case UnaryKind::Sqrt:
            for (std::size_t i = 0; i < x.size(); ++i) {
                if (x[i] < 0.0) {
                    throw DomainError("sqrt: negative input " + std::to_string(x[i]) +
                                      " at flat index " + std::to_string(i));
                }
                values[i] = std::sqrt(x[i]);
            }
            break;
        case UnaryKind::Abs:
            for (std::size_t i = 0; i < x.size(); ++i) values[i] = std::abs(x[i]);
            break;
        case UnaryKind::Reciprocal:
            for (std::size_t i = 0; i < x.size(); ++i) values[i] = 1.0 / x[i];
            break;
    }
    auto out = make_node(a.shape(), std::move(values));
    link(out, {a.node_ptr()}, [an = a.node_ptr(), kind](const TensorNode& self) {
        if (!an->requires_grad) return;
        const auto& x = an->values;
        const auto& y = self.values;
        for (std::size_t i = 0; i < x.size(); ++i) {
            double d;
            switch (kind) {
                case UnaryKind::Sigmoid: d = y[i] * (1.0 - y[i]); break;
                case UnaryKind::Relu: d = x[i] > 0.0 ? 1.0 : 0.0; break;
                case UnaryKind::Exp: d = y[i]; break;
                case UnaryKind::Log: d = 1.0 / x[i]; break;
                case UnaryKind::Gelu: d = gelu_derivative(x[i]); break;
                case UnaryKind::Sqrt: d = 0.5 / y[i]; break;
                case UnaryKind::Abs: d = x[i] > 0.0 ? 1.0 : (x[i] < 0.0 ? -1.0 : 0.0); break;
                case UnaryKind::Reciprocal: d = -y[i] * y[i]; break;
                default: d = 0.0; break;
            }
            an->grad[i] += self.grad[i] * d;
        }
    });
    return Tensor(out);
}

Tensor clamp(const Tensor& a, double lo, double hi) {
    if (lo > hi) throw ContractError("clamp: lo > hi");
    std::vector<double> values(a.numel());
    for (std::size_t i = 0; i < values.size(); ++i)
        values[i] = std::min(hi, std::max(lo, a.values()[i]));
    auto out = make_node(a.shape(), std::move(values));
    link(out, {a.node_ptr()}, [an = a.node_ptr(), lo, hi](const TensorNode& self) {
        if (!an->requires_grad) return;
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            if (an->values[i] >= lo && an->values[i] <= hi) an->grad[i] += self.grad[i];
        }
    });
    return Tensor(out);
}

// ---- softmax / layer norm -----------------------------------------------------

namespace {

// Iterates the slices of a rank-1/2 tensor along `axis`: base index plus stride.
struct SliceIter {
    std::size_t count;   // number of slices
    std::size_t length;  // elements per slice
    std::size_t stride;  // between consecutive slice elements
    std::size_t step;    // between slice base offsets
};

SliceIter slices_along(const Shape& shape, std::size_t axis) {
    if (shape.size() == 1) {
        if (axis != 0) throw ShapeError("softmax: axis " + std::to_string(axis) +
                                        " invalid for shape " + shape_str(shape));
        return {1, shape[0], 1, 0};
    }
    if (shape.size() == 2) {
        if (axis == 0) return {shape[1], shape[0], shape[1], 1};  // columns
        if (axis == 1) return {shape[0], shape[1], 1, shape[1]};  // rows
    }
    throw ShapeError("softmax: axis " + std::to_string(axis) + " invalid for shape " +
                     shape_str(shape));
}

}  // namespace

Tensor softmax(const Tensor& a, std::size_t axis) {
    const SliceIter it = slices_along(a.shape(), axis);
    std::vector<double> values(a.numel());
    for (std::size_t s = 0; s < it.count; ++s) {
        const std::size_t base = s * it.step;
        double mx = a.values()[base];
        for (std::size_t i = 1; i < it.length; ++i)
            mx = std::max(mx, a.values()[base + i * it.stride]);
        double denom = 0.0;
        for (std::size_t i = 0; i < it.length; ++i) {
            double e = std::exp(a.values()[base + i * it.stride] - mx);
            values[base + i * it.stride] = e;
            denom += e;
        }
        for (std::size_t i = 0; i < it.length; ++i) values[base + i * it.stride] /= denom;
    }
    auto out = make_node(a.shape(), std::move(values));
    link(out, {a.node_ptr()}, [an = a.node_ptr(), it](const TensorNode& self) {
        if (!an->requires_grad) return;
        for (std::size_t s = 0; s < it.count; ++s) {
            const std::size_t base = s * it.step;
            double dot = 0.0;
            for (std::size_t i = 0; i < it.length; ++i) {
                const std::size_t idx = base + i * it.stride;
                dot += self.grad[idx] * self.values[idx];
            }
            for (std::size_t i = 0; i < it.length; ++i) {
                const std::size_t idx = base + i * it.stride;
                an->grad[idx] += self.values[idx] * (self.grad[idx] - dot);
            }
        }
    });
    return Tensor(out);
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
    require_rank2(x, "layer_norm");
    const std::size_t n = x.rows(), d = x.cols();
    if (gain.rank() != 1 || gain.shape()[0] != d || bias.rank() != 1 || bias.shape()[0] != d) {
        throw ShapeError("layer_norm: gain/bias must have shape [" + std::to_string(d) + "]");
    }
    constexpr double eps = 1e-5;
    std::vector<double> values(n * d);
    std::vector<double> inv_std(n), normed(n * d);
    for (std::size_t i = 0; i < n; ++i) {
        const double* row = x.values().data() + i * d;
        double mean = 0.0;
        for (std::size_t j = 0; j < d; ++j) mean += row[j];
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
        var /= static_cast<double>(d);
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) {
            normed[i * d + j] = (row[j] - mean) * inv_std[i];
            values[i * d + j] = normed[i * d + j] * gain.values()[j] + bias.values()[j];
        }
    }
    auto out = make_node({n, d}, std::move(values));
    link(out, {x.node_ptr(), gain.node_ptr(), bias.node_ptr()},
         [xn = x.node_ptr(), gn = gain.node_ptr(), bn = bias.node_ptr(), n, d,
          inv_std = std::move(inv_std), normed = std::move(normed)](const TensorNode& self) {
             for (std::size_t i = 0; i < n; ++i) {
                 const double* dy = self.grad.data() + i * d;
                 const double* xh = normed.data() + i * d;
                 if (xn->requires_grad) {
                     // dL/dx = (g·dy - mean(g·dy) - xh·mean(g·dy·xh)) / std
                     double m1 = 0.0, m2 = 0.0;
                     for (std::size_t j = 0; j < d; ++j) {
                         const double gdy = gn->values[j] * dy[j];
                         m1 += gdy;
                         m2 += gdy * xh[j];
                     }
                     m1 /= static_cast<double>(d);
                     m2 /= static_cast<double>(d);
                     for (std::size_t j = 0; j < d; ++j) {
                         const double gdy = gn->values[j] * dy[j];
                         xn->grad[i * d + j] += (gdy - m1 - xh[j] * m2) * inv_std[i];
                     }
                 }
                 if (gn->requires_grad)
                     for (std::size_t j = 0; j < d; ++j) gn->grad[j] += dy[j] * xh[j];
                 if (bn->requires_grad)
                     for (std::size_t j = 0; j < d; ++j) bn->grad[j] += dy[j];
             }
         });
    return Tensor(out);
}

// ---- structural ---------------------------------------------------------------

Tensor concat(const Tensor& a, const Tensor& b, std::size_t axis) {
    require_rank2(a, "concat");
    require_rank2(b, "concat");
    if (axis > 1) throw ShapeError("concat: axis must be 0 or 1");
    const std::size_t other = 1 - axis;
    if (a.shape()[other] != b.shape()[other]) {
        throw ShapeError("concat: shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " disagree off axis " + std::to_string(axis));
    }
    Shape shape = a.shape();
    shape[axis] += b.shape()[axis];
    std::vector<double> values(shape[0] * shape[1]);
    if (axis == 0) {
        std::copy(a.values().begin(), a.values().end(), values.begin());
        std::copy(b.values().begin(), b.values().end(), values.begin() + a.numel());
    } else {
        const std::size_t n = shape[0], ca = a.cols(), cb = b.cols();
        for (std::size_t i = 0; i < n; ++i) {
            std::copy_n(a.values().data() + i * ca, ca, values.data() + i * (ca + cb));
            std::copy_n(b.values().data() + i * cb, cb, values.data() + i * (ca + cb) + ca);
        }
    }
    auto out = make_node(shape, std::move(values));
    link(out, {a.node_ptr(), b.node_ptr()},
         [an = a.node_ptr(), bn = b.node_ptr(), axis](const TensorNode& self) {
             if (axis == 0) {
                 const std::size_t na = an->values.size();
                 if (an->requires_grad)
                     for (std::size_t i = 0; i < na; ++i) an->grad[i] += self.grad[i];
                 if (bn->requires_grad)
                     for (std::size_t i = 0; i < bn->values.size(); ++i)
                         bn->grad[i] += self.grad[na + i];
             } else {
                 const std::size_t n = self.shape[0];
                 const std::size_t ca = an->shape[1], cb = bn->shape[1];
                 for (std::size_t i = 0; i < n; ++i) {
                     if (an->requires_grad)
                         for (std::size_t j = 0; j < ca; ++j)
                             an->grad[i * ca + j] += self.grad[i * (ca + cb) + j];
                     if (bn->requires_grad)
                         for (std::size_t j = 0; j < cb; ++j)
                             bn->grad[i * cb + j] += self.grad[i * (ca + cb) + ca + j];
                 }
             }
         });
    return Tensor(out);
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t count) {
    require_rank2(a, "slice");
    if (axis > 1) throw ShapeError("slice: axis must be 0 or 1");
    if (count == 0 || start + count > a.shape()[axis]) {
        throw ShapeError("slice: range [" + std::to_string(start) + ", " +
                         std::to_string(start + count) + ") exceeds axis " + std::to_string(axis) +
                         " of " + shape_str(a.shape()));
    }
    const std::size_t n = a.rows(), c = a.cols();
    Shape shape = a.shape();
    shape[axis] = count;
    std::vector<double> values(shape[0] * shape[1]);
    if (axis == 0) {
        std::copy_n(a.values().data() + start * c, count * c, values.data());
    } else {
        for (std::size_t i = 0; i < n; ++i)
            std::copy_n(a.values().data() + i * c + start, count, values.data() + i * count);
    }
    auto out = make_node(shape, std::move(values));
    link(out, {a.node_ptr()},
         [an = a.node_ptr(), axis, start, n, c, count](const TensorNode& self) {
             if (!an->requires_grad) return;
             if (axis == 0) {
                 for (std::size_t i = 0; i < count * c; ++i)
                     an->grad[start * c + i] += self.grad[i];
             } else {
                 for (std::size_t i = 0; i < n; ++i)
                     for (std::size_t j = 0; j < count; ++j)
                         an->grad[i * c + start + j] += self.grad[i * count + j];
             }
         });
    return Tensor(out);
}

Tensor add_row_broadcast(const Tensor& x, const Tensor& row) {
    require_rank2(x, "add_row_broadcast");
    const std::size_t n = x.rows(), d = x.cols();
    if (row.rank() != 1 || row.shape()[0] != d) {
        throw ShapeError("add_row_broadcast: row shape " + shape_str(row.shape()) +
                         " does not match columns of " + shape_str(x.shape()));
    }
    std::vector<double> values(n * d);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j)
            values[i * d + j] = x.values()[i * d + j] + row.values()[j];
    auto out = make_node({n, d}, std::move(values));
    link(out, {x.node_ptr(), row.node_ptr()},
         [xn = x.node_ptr(), rn = row.node_ptr(), n, d](const TensorNode& self) {
             if (xn->requires_grad)
                 for (std::size_t i = 0; i < n * d; ++i) xn->grad[i] += self.grad[i];
             if (rn->requires_grad)
                 for (std::size_t i = 0; i < n; ++i)
                     for (std::size_t j = 0; j < d; ++j) rn->grad[j] += self.grad[i * d + j];
         });
    return Tensor(out);
}

// ---- depthwise convolution ----------------------------------------------------

Tensor depthwise_conv2d(const Tensor& x, const Tensor& kernel) {
    if (x.rank() != 3) throw ShapeError("depthwise_conv2d: input must be c×h×w, got " +
                                        shape_str(x.shape()));
    if (kernel.rank() != 3) throw ShapeError("depthwise_conv2d: kernel must be c×k×k, got " +
                                             shape_str(kernel.shape()));
    const std::size_t c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
    const std::size_t k = kernel.shape()[1];
    if (kernel.shape()[0] != c || kernel.shape()[2] != k) {
        throw ShapeError("depthwise_conv2d: kernel " + shape_str(kernel.shape()) +
                         " does not match input " + shape_str(x.shape()));
    }
    if (k % 2 == 0) throw ContractError("depthwise_conv2d: kernel size must be odd");
    const std::ptrdiff_t r = static_cast<std::ptrdiff_t>(k / 2);
    const std::ptrdiff_t hh = static_cast<std::ptrdiff_t>(h), ww = static_cast<std::ptrdiff_t>(w);

    std::vector<double> values(c * h * w, 0.0);
    for (std::size_t ch = 0; ch < c; ++ch) {
        const double* xc = x.values().data() + ch * h * w;
        const double* kc = kernel.values().data() + ch * k * k;
        double* oc = values.data() + ch * h * w;
        for (std::ptrdiff_t i = 0; i < hh; ++i)
            for (std::ptrdiff_t j = 0; j < ww; ++j) {
                double acc = 0.0;
                for (std::ptrdiff_t u = -r; u <= r; ++u) {
                    const std::ptrdiff_t ii = i + u;
                    if (ii < 0 || ii >= hh) continue;
                    for (std::ptrdiff_t v = -r; v <= r; ++v) {
                        const std::ptrdiff_t jj = j + v;
                        if (jj < 0 || jj >= ww) continue;
                        acc += xc[ii * ww + jj] * kc[(u + r) * k + (v + r)];
                    }
                }
                oc[i * ww + j] = acc;
            }
    }
    auto out = make_node({c, h, w}, std::move(values));
    link(out, {x.node_ptr(), kernel.node_ptr()},
         [xn = x.node_ptr(), kn = kernel.node_ptr(), c, h, w, k, r](const TensorNode& self) {
             const std::ptrdiff_t hh = static_cast<std::ptrdiff_t>(h);
             const std::ptrdiff_t ww = static_cast<std::ptrdiff_t>(w);
             for (std::size_t ch = 0; ch < c; ++ch) {
                 const double* dy = self.grad.data() + ch * h * w;
                 const double* xc = xn->values.data() + ch * h * w;
                 const double* kc = kn->values.data() + ch * k * k;
                 for (std::ptrdiff_t i = 0; i < hh; ++i)
                     for (std::ptrdiff_t j = 0; j < ww; ++j) {
                         const double g = dy[i * ww + j];
                         if (g == 0.0) continue;
                         for (std::ptrdiff_t u = -r; u <= r; ++u) {
                             const std::ptrdiff_t ii = i + u;
                             if (ii < 0 || ii >= hh) continue;
                             for (std::ptrdiff_t v = -r; v <= r; ++v) {
                                 const std::ptrdiff_t jj = j + v;
                                 if (jj < 0 || jj >= ww) continue;
                                 const std::size_t kidx = (u + r) * k + (v + r);
                                 if (xn->requires_grad)
                                     xn->grad[ch * h * w + ii * ww + jj] += g * kc[kidx];
                                 if (kn->requires_grad)
                                     kn->grad[ch * k * k + kidx] += g * xc[ii * ww + jj];
                             }
                         }
                     }
             }
         });
    return Tensor(out);
}

// ---- detach / backward ----------------------------------------------------------

Tensor detach(const Tensor& a) {
    return Tensor(make_node(a.shape(), a.values()));
}

GradientMap backward(const Tensor& loss) {
    if (loss.numel() != 1) {
        throw ContractError("backward: loss must be scalar, got " + shape_str(loss.shape()));
    }

    // Post-order DFS so parents precede children in `topo`.
    std::vector<TensorNode*> topo;
    std::unordered_map<TensorNode*, bool> seen;
    std::vector<std::pair<TensorNode*, std::size_t>> stack;
    stack.emplace_back(const_cast<TensorNode*>(loss.node()), 0);
    seen[stack.back().first] = true;
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            TensorNode* parent = node->parents[next++].get();
            if (!seen[parent]) {
                seen[parent] = true;
                stack.emplace_back(parent, 0);
            }
        } else {
            topo.push_back(node);
            stack.pop_back();
        }
    }

    for (TensorNode* node : topo) {
        if (node->requires_grad) node->grad.assign(node->numel(), 0.0);
    }
    TensorNode* root = const_cast<TensorNode*>(loss.node());
    if (root->requires_grad) root->grad[0] = 1.0;

    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        TensorNode* node = *it;
        if (node->backward_fn && node->requires_grad) node->backward_fn(*node);
    }

    GradientMap map;
    for (TensorNode* node : topo) {
        if (node->is_leaf() && node->requires_grad) {
            map.insert(node, Tensor::from(node->shape, node->grad));
        }
    }
    return map;
}

}  // namespace cmta
