#pragma once

// Tape-free reverse-mode autodiff over Tensor-valued nodes.
//
// A Var is a shared handle to a Node. Operations build a DAG whose nodes keep
// strong references to their parents; dropping the output releases the graph.
// Gradients of leaf nodes (parameters) accumulate across `backward` calls
// until `zero_grad` is called explicitly. Intermediate gradients are reset at
// the start of every `backward`.

#include <trajflow/tensor.hpp>

#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace trajflow {

struct Node {
    Tensor value;
    Tensor grad;  // empty until something flows into it
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backprop;

    void accumulate(const Tensor& g) {
        if (grad.empty()) {
            grad = g;
        } else {
            grad += g;
        }
    }
};

class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    static Var constant(Tensor value) {
        auto n = std::make_shared<Node>();
        n->value = std::move(value);
        return Var(std::move(n));
    }

    static Var parameter(Tensor value) {
        auto n = std::make_shared<Node>();
        n->value = std::move(value);
        n->requires_grad = true;
        return Var(std::move(n));
    }

    bool valid() const noexcept { return node_ != nullptr; }
    const Tensor& value() const { return node_->value; }
    /// Direct access for optimizers; does not touch the graph.
    Tensor& mutable_value() { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }

    /// Gradient, or zeros when nothing has flowed in yet.
    Tensor grad() const {
        if (node_->grad.empty()) {
            return Tensor::zeros(node_->value.shape());
        }
        return node_->grad;
    }

    void zero_grad() { node_->grad = Tensor(); }
    bool requires_grad() const noexcept { return node_ && node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }

    Node& node() const { return *node_; }
    const std::shared_ptr<Node>& ptr() const noexcept { return node_; }

private:
    std::shared_ptr<Node> node_;
};

namespace detail {

inline Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backprop,
                       const char* op) {
    if (!value.all_finite()) {
        throw NumericError(std::string(op) + ": non-finite value produced");
    }
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    for (const Var& in : inputs) {
        n->requires_grad = n->requires_grad || in.requires_grad();
    }
    if (n->requires_grad) {
        for (Var& in : inputs) {
            n->parents.push_back(in.ptr());
        }
        n->backprop = std::move(backprop);
    }
    return Var(std::move(n));
}

inline void push_grad(Node& parent, const Tensor& g) {
    if (parent.requires_grad) {
        parent.accumulate(g);
    }
}

// a[m×k] · b[n×k]ᵀ
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    return matmul_raw(a, transpose_raw(b));
}

// a[k×m]ᵀ · b[k×n]
inline Tensor matmul_tn(const Tensor& a, const Tensor& b) {
    const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
    Tensor out(Shape{m, n});
    const double* ap = a.data().data();
    const double* bp = b.data().data();
    double* op = out.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        double* orow = op + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ap[p * m + i];
            if (av == 0.0) {
                continue;
            }
            const double* brow = bp + p * n;
            for (std::size_t j = 0; j < n; ++j) {
                orow[j] += av * brow[j];
            }
        }
    }
    return out;
}

inline void require_same(const Var& a, const Var& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
}

inline void require_rank2(const Var& a, const char* op) {
    if (a.shape().size() != 2) {
        throw DimensionError(std::string(op) + ": expected rank-2 operand, got " + shape_str(a.shape()));
    }
}

}  // namespace detail

inline Var matmul(const Var& a, const Var& b) {
    detail::require_rank2(a, "matmul");
    detail::require_rank2(b, "matmul");
    Tensor out = matmul_raw(a.value(), b.value());
    return detail::make_result(std::move(out), {a, b}, [](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        if (pa.requires_grad) {
            pa.accumulate(detail::matmul_nt(self.grad, pb.value));
        }
        if (pb.requires_grad) {
            pb.accumulate(detail::matmul_tn(pa.value, self.grad));
        }
    }, "matmul");
}

inline Var add(const Var& a, const Var& b) {
    detail::require_same(a, b, "add");
    return detail::make_result(a.value() + b.value(), {a, b}, [](Node& self) {
        detail::push_grad(*self.parents[0], self.grad);
        detail::push_grad(*self.parents[1], self.grad);
    }, "add");
}

inline Var sub(const Var& a, const Var& b) {
    detail::require_same(a, b, "sub");
    return detail::make_result(a.value() - b.value(), {a, b}, [](Node& self) {
        detail::push_grad(*self.parents[0], self.grad);
        detail::push_grad(*self.parents[1], self.grad * -1.0);
    }, "sub");
}

/// Elementwise product.
inline Var mul(const Var& a, const Var& b) {
    detail::require_same(a, b, "mul");
    Tensor out = a.value();
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] *= b.value()[i];
    }
    return detail::make_result(std::move(out), {a, b}, [](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        if (pa.requires_grad) {
            Tensor g = self.grad;
            for (std::size_t i = 0; i < g.size(); ++i) {
                g[i] *= pb.value[i];
            }
            pa.accumulate(g);
        }
        if (pb.requires_grad) {
            Tensor g = self.grad;
            for (std::size_t i = 0; i < g.size(); ++i) {
                g[i] *= pa.value[i];
            }
            pb.accumulate(g);
        }
    }, "mul");
}

inline Var scale(const Var& a, double s) {
    return detail::make_result(a.value() * s, {a}, [s](Node& self) {
        detail::push_grad(*self.parents[0], self.grad * s);
    }, "scale");
}

/// x[B×n] + bias[1×n], the bias added to every row. The only broadcasting op.
inline Var add_bias(const Var& x, const Var& bias) {
    detail::require_rank2(x, "add_bias");
    if (bias.shape() != Shape{1, x.shape()[1]}) {
        throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " does not fit " +
                             shape_str(x.shape()));
    }
    Tensor out = x.value();
    const std::size_t rows = out.rows(), cols = out.cols();
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
            out.at(r, c) += bias.value()[c];
        }
    }
    return detail::make_result(std::move(out), {x, bias}, [](Node& self) {
        detail::push_grad(*self.parents[0], self.grad);
        Node& pb = *self.parents[1];
        if (pb.requires_grad) {
            const std::size_t rows = self.grad.rows(), cols = self.grad.cols();
            Tensor g(Shape{1, cols});
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t c = 0; c < cols; ++c) {
                    g[c] += self.grad.at(r, c);
                }
            }
            pb.accumulate(g);
        }
    }, "add_bias");
}

/// Row r of x[B×n] multiplied by the constant weights[r].
inline Var mul_rows(const Var& x, std::span<const double> weights) {
    detail::require_rank2(x, "mul_rows");
    if (weights.size() != x.shape()[0]) {
        throw DimensionError("mul_rows: " + std::to_string(weights.size()) + " weights for " +
                             shape_str(x.shape()));
    }
    std::vector<double> w(weights.begin(), weights.end());
    auto apply = [](const Tensor& t, const std::vector<double>& w) {
        Tensor out = t;
        const std::size_t cols = out.cols();
        for (std::size_t r = 0; r < w.size(); ++r) {
            for (std::size_t c = 0; c < cols; ++c) {
                out.at(r, c) *= w[r];
            }
        }
        return out;
    };
    Tensor out = apply(x.value(), w);
    return detail::make_result(std::move(out), {x}, [w = std::move(w), apply](Node& self) {
        detail::push_grad(*self.parents[0], apply(self.grad, w));
    }, "mul_rows");
}

inline constexpr double kGeluSqrt2OverPi = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluCubic = 0.044715;

/// GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
inline double gelu_scalar(double x) {
    const double u = kGeluSqrt2OverPi * (x + kGeluCubic * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
}

inline double gelu_derivative(double x) {
    const double u = kGeluSqrt2OverPi * (x + kGeluCubic * x * x * x);
    const double th = std::tanh(u);
    const double du = kGeluSqrt2OverPi * (1.0 + 3.0 * kGeluCubic * x * x);
    return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
}

inline Var gelu(const Var& x) {
    Tensor out = x.value();
    for (double& v : out.data()) {
        v = gelu_scalar(v);
    }
    return detail::make_result(std::move(out), {x}, [](Node& self) {
        Node& px = *self.parents[0];
        if (px.requires_grad) {
            Tensor g = self.grad;
            for (std::size_t i = 0; i < g.size(); ++i) {
                g[i] *= gelu_derivative(px.value[i]);
            }
            px.accumulate(g);
        }
    }, "gelu");
}

/// [B×p] | [B×q] -> [B×(p+q)]
inline Var concat_cols(const Var& a, const Var& b) {
    detail::require_rank2(a, "concat_cols");
    detail::require_rank2(b, "concat_cols");
    const std::size_t rows = a.shape()[0], p = a.shape()[1], q = b.shape()[1];
    if (b.shape()[0] != rows) {
        throw DimensionError("concat_cols: row counts differ " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
    Tensor out(Shape{rows, p + q});
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < p; ++c) {
            out.at(r, c) = a.value().at(r, c);
        }
        for (std::size_t c = 0; c < q; ++c) {
            out.at(r, p + c) = b.value().at(r, c);
        }
    }
    return detail::make_result(std::move(out), {a, b}, [rows, p, q](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        if (pa.requires_grad) {
            Tensor g(Shape{rows, p});
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t c = 0; c < p; ++c) {
                    g.at(r, c) = self.grad.at(r, c);
                }
            }
            pa.accumulate(g);
        }
        if (pb.requires_grad) {
            Tensor g(Shape{rows, q});
            for (std::size_t r = 0; r < rows; ++r) {
                for (std::size_t c = 0; c < q; ++c) {
                    g.at(r, c) = self.grad.at(r, p + c);
                }
            }
            pb.accumulate(g);
        }
    }, "concat_cols");
}

/// Sum of all entries as a 1×1 node.
inline Var sum(const Var& x) {
    double s = 0.0;
    for (double v : x.value().data()) {
        s += v;
    }
    return detail::make_result(Tensor::scalar(s), {x}, [](Node& self) {
        Node& px = *self.parents[0];
        detail::push_grad(px, Tensor(px.value.shape(), self.grad.item()));
    }, "sum");
}

inline Var mean(const Var& x) {
    if (x.value().empty()) {
        throw DimensionError("mean: empty tensor");
    }
    return scale(sum(x), 1.0 / static_cast<double>(x.value().size()));
}

/// Mean of squared differences, 1×1.
inline Var mse(const Var& a, const Var& b) {
    detail::require_same(a, b, "mse");
    const std::size_t n = a.value().size();
    if (n == 0) {
        throw DimensionError("mse: empty tensors");
    }
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = a.value()[i] - b.value()[i];
        s += d * d;
    }
    return detail::make_result(Tensor::scalar(s / static_cast<double>(n)), {a, b}, [n](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        const double k = 2.0 * self.grad.item() / static_cast<double>(n);
        Tensor g = pa.value - pb.value;
        g *= k;
        if (pa.requires_grad) {
            pa.accumulate(g);
        }
        if (pb.requires_grad) {
            pb.accumulate(g * -1.0);
        }
    }, "mse");
}

inline std::size_t image_gradient_count(std::size_t height, std::size_t width) {
    return height * (width - 1) + (height - 1) * width;
}

/// Forward differences of row-flattened H×W images: each row of x[B×(H·W)]
/// maps to [horizontal diffs (H·(W-1)) | vertical diffs ((H-1)·W)].
inline Var image_gradients(const Var& x, std::size_t height, std::size_t width) {
    detail::require_rank2(x, "image_gradients");
    if (height < 2 || width < 2 || x.shape()[1] != height * width) {
        throw DimensionError("image_gradients: " + shape_str(x.shape()) + " is not a batch of " +
                             std::to_string(height) + "x" + std::to_string(width) + " images");
    }
    const std::size_t rows = x.shape()[0];
    const std::size_t nh = height * (width - 1);
    Tensor out(Shape{rows, image_gradient_count(height, width)});
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t i = 0; i < height; ++i) {
            for (std::size_t j = 0; j + 1 < width; ++j) {
                out.at(r, i * (width - 1) + j) = x.value().at(r, i * width + j + 1) - x.value().at(r, i * width + j);
            }
        }
        for (std::size_t i = 0; i + 1 < height; ++i) {
            for (std::size_t j = 0; j < width; ++j) {
                out.at(r, nh + i * width + j) = x.value().at(r, (i + 1) * width + j) - x.value().at(r, i * width + j);
            }
        }
    }
    return detail::make_result(std::move(out), {x}, [rows, height, width, nh](Node& self) {
        Node& px = *self.parents[0];
        if (!px.requires_grad) {
            return;
        }
        Tensor g(Shape{rows, height * width});
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t i = 0; i < height; ++i) {
                for (std::size_t j = 0; j + 1 < width; ++j) {
                    const double gv = self.grad.at(r, i * (width - 1) + j);
                    g.at(r, i * width + j + 1) += gv;
                    g.at(r, i * width + j) -= gv;
                }
            }
            for (std::size_t i = 0; i + 1 < height; ++i) {
                for (std::size_t j = 0; j < width; ++j) {
                    const double gv = self.grad.at(r, nh + i * width + j);
                    g.at(r, (i + 1) * width + j) += gv;
                    g.at(r, i * width + j) -= gv;
                }
            }
        }
        px.accumulate(g);
    }, "image_gradients");
}

/// Same value, cut from the graph.
inline Var detach(const Var& x) { return Var::constant(x.value()); }

/// Reverse-mode sweep from a scalar output. Leaf gradients accumulate;
/// intermediate gradients are recomputed from scratch on every call.
inline void backward(const Var& output) {
    if (output.value().size() != 1) {
        throw ContractError("backward: output must be scalar, got shape " + shape_str(output.shape()));
    }
    if (!output.requires_grad()) {
        return;
    }

    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{&output.node(), 0}};
    seen.insert(&output.node());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) {
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (Node* n : order) {
        if (n->backprop) {
            n->grad = Tensor();
        }
    }
    if (output.node().backprop) {
        output.node().grad = Tensor(output.shape(), 1.0);
    } else {
        output.node().accumulate(Tensor(output.shape(), 1.0));
    }
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backprop && !n->grad.empty()) {
            n->backprop(*n);
        }
    }
}

}  // namespace trajflow
