#include "fedafd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace fedafd {

namespace {

thread_local bool g_grad_enabled = true;

constexpr double kSigmoidClamp = 1e-12;

std::shared_ptr<TensorNode> new_node(Shape shape, std::vector<double> value) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    return n;
}

void check_2d(const Tensor& t, const char* who) {
    if (t.shape().size() > 2) throw DimensionError(std::string(who) + ": rank > 2 not supported");
}

/// Adds v into parent's grad if it participates in differentiation.
inline void accum(TensorNode& p, std::size_t i, double v) {
    if (!p.requires_grad) return;
    if (p.grad.empty()) p.grad.assign(p.numel(), 0.0);
    p.grad[i] += v;
}

inline void ensure_grad(TensorNode& p) {
    if (p.requires_grad && p.grad.empty()) p.grad.assign(p.numel(), 0.0);
}

bool should_record(std::initializer_list<const Tensor*> inputs) {
    if (!g_grad_enabled) return false;
    for (const Tensor* t : inputs)
        if (t->requires_grad()) return true;
    return false;
}

/// Finishes an op node: wires parents + backward when recording is active.
Tensor finish(std::shared_ptr<TensorNode> n, std::initializer_list<const Tensor*> inputs,
              std::function<void(TensorNode&)> backward_fn) {
    if (should_record(inputs)) {
        n->requires_grad = true;
        n->parents.reserve(inputs.size());
        for (const Tensor* t : inputs) n->parents.push_back(t->node());
        n->backward_fn = std::move(backward_fn);
    }
    return Tensor::wrap(std::move(n));
}

// Row-major C[M x N] += or = A[M x K] * B[K x N].
void gemm_kernel(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                 std::size_t n, bool accumulate) {
    if (!accumulate) std::fill(c, c + m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

std::vector<double> transpose_copy(const double* src, std::size_t rows, std::size_t cols) {
    std::vector<double> out(rows * cols);
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = src[i * cols + j];
    return out;
}

/// General matrix product on raw buffers with optional transposes.
/// a is stored [ar x ac], b is [br x bc]; the logical operands after the
/// transpose flags must conform. Result is m x n.
std::vector<double> gemm(const double* a, std::size_t ar, std::size_t ac, bool ta, const double* b,
                         std::size_t br, std::size_t bc, bool tb, std::size_t& out_m,
                         std::size_t& out_n) {
    std::vector<double> abuf, bbuf;
    if (ta) {
        abuf = transpose_copy(a, ar, ac);
        a = abuf.data();
        std::swap(ar, ac);
    }
    if (tb) {
        bbuf = transpose_copy(b, br, bc);
        b = bbuf.data();
        std::swap(br, bc);
    }
    if (ac != br) throw DimensionError("matmul: inner dimensions do not conform");
    out_m = ar;
    out_n = bc;
    std::vector<double> c(ar * bc);
    gemm_kernel(a, b, c.data(), ar, ac, bc, false);
    return c;
}

std::size_t dim_rows(const Shape& s) { return s.empty() ? 1 : s[0]; }
std::size_t dim_cols(const Shape& s) { return s.size() > 1 ? s[1] : 1; }

enum class Broadcast { same, row, col, scalar };

Broadcast broadcast_kind(const Tensor& a, const Tensor& b, const char* who) {
    const std::size_t ar = a.rows(), ac = a.cols();
    const std::size_t br = b.rows(), bc = b.cols();
    if (ar == br && ac == bc) return Broadcast::same;
    if (b.numel() == 1) return Broadcast::scalar;
    if (br == 1 && bc == ac) return Broadcast::row;
    // A 1-D vector of length ac also broadcasts as a row.
    if (b.shape().size() == 1 && br == ac && ar > 1) return Broadcast::row;
    if (bc == 1 && br == ar) return Broadcast::col;
    throw DimensionError(std::string(who) + ": shapes do not broadcast");
}

inline std::size_t broadcast_index(Broadcast k, std::size_t i, std::size_t j, std::size_t cols) {
    switch (k) {
        case Broadcast::same: return i * cols + j;
        case Broadcast::row: return j;
        case Broadcast::col: return i;
        case Broadcast::scalar: return 0;
    }
    return 0;
}

void check_axis(int axis) {
    if (axis != 0 && axis != 1) throw ContractError("axis must be 0 or 1");
}

}  // namespace

std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) {
        if (d == 0) throw DimensionError("shape dimensions must be positive");
        n *= d;
    }
    return n;
}

// --- Tensor handle ---------------------------------------------------------

Tensor Tensor::leaf(Shape shape, std::vector<double> values, bool requires_grad) {
    if (values.size() != shape_numel(shape))
        throw DimensionError("leaf: values length does not match shape");
    auto n = new_node(std::move(shape), std::move(values));
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    std::size_t n = shape_numel(shape);
    return leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
    std::size_t n = shape_numel(shape);
    return leaf(std::move(shape), std::vector<double>(n, v), requires_grad);
}

Tensor Tensor::scalar(double v, bool requires_grad) {
    return leaf(Shape{1}, std::vector<double>{v}, requires_grad);
}

Tensor Tensor::from_matrix(const FeatureMatrix& m, bool requires_grad) {
    return leaf(Shape{m.rows, m.cols}, m.data, requires_grad);
}

std::size_t Tensor::rows() const { return dim_rows(node_->shape); }
std::size_t Tensor::cols() const { return dim_cols(node_->shape); }

double Tensor::item() const {
    if (numel() != 1) throw ContractError("item: tensor is not a scalar");
    return node_->value[0];
}

double Tensor::value_at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }

void Tensor::set_values(std::span<const double> v) {
    if (!node_->is_leaf()) throw ContractError("set_values: only leaves are mutable");
    if (v.size() != node_->value.size()) throw DimensionError("set_values: length mismatch");
    std::copy(v.begin(), v.end(), node_->value.begin());
}

Tensor Tensor::detach() const { return leaf(node_->shape, node_->value, false); }

Tensor Tensor::clone(bool requires_grad) const { return leaf(node_->shape, node_->value, requires_grad); }

FeatureMatrix Tensor::to_matrix() const {
    FeatureMatrix m(rows(), cols());
    m.data = node_->value;
    return m;
}

// --- Autodiff control ------------------------------------------------------

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
bool grad_enabled() { return g_grad_enabled; }

void backward(const Tensor& loss, bool accumulate) {
    if (!loss.defined()) throw ContractError("backward: undefined tensor");
    if (loss.numel() != 1) throw ContractError("backward: loss must be a scalar");
    if (!loss.requires_grad())
        throw ContractError("backward: loss does not depend on any tracked parameter");

    // Iterative DFS post-order over requires_grad ancestors: producers first.
    std::vector<TensorNode*> topo;
    std::unordered_set<TensorNode*> visited;
    struct Frame {
        TensorNode* node;
        std::size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({loss.node().get(), 0});
    visited.insert(loss.node().get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_parent < f.node->parents.size()) {
            TensorNode* p = f.node->parents[f.next_parent++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            topo.push_back(f.node);
            stack.pop_back();
        }
    }

    for (TensorNode* n : topo) {
        if (n->is_leaf() && accumulate) {
            ensure_grad(*n);
        } else {
            n->grad.assign(n->numel(), 0.0);
        }
    }
    loss.node()->grad[0] = 1.0;

    // topo has producers before consumers; replay it backwards.
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        TensorNode* n = *it;
        if (n->backward_fn) n->backward_fn(*n);
    }
}

void zero_grad(const std::vector<Tensor*>& params) {
    for (Tensor* p : params) p->node()->grad.clear();
}

namespace {
void apply_step(const std::vector<Tensor*>& params, double lr, double sign) {
    if (!(lr > 0.0)) throw ConfigError("sgd step: learning rate must be positive");
    for (Tensor* p : params) {
        TensorNode& n = *p->node();
        if (n.grad.empty()) continue;  // no gradient reached this leaf
        if (n.grad.size() != n.value.size()) throw DimensionError("sgd step: grad shape mismatch");
        for (std::size_t i = 0; i < n.value.size(); ++i) n.value[i] += sign * lr * n.grad[i];
    }
}
}  // namespace

void sgd_step(const std::vector<Tensor*>& params, double lr) { apply_step(params, lr, -1.0); }
void sgd_ascent_step(const std::vector<Tensor*>& params, double lr) { apply_step(params, lr, 1.0); }

// --- Ops --------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
    check_2d(a, "matmul");
    check_2d(b, "matmul");
    std::size_t m = 0, n = 0;
    auto value = gemm(a.values().data(), a.rows(), a.cols(), trans_a, b.values().data(), b.rows(),
                      b.cols(), trans_b, m, n);
    auto node = new_node(Shape{m, n}, std::move(value));
    return finish(node, {&a, &b}, [trans_a, trans_b, m, n](TensorNode& self) {
        TensorNode& A = *self.parents[0];
        TensorNode& B = *self.parents[1];
        const double* g = self.grad.data();
        std::size_t r = 0, c = 0;
        if (A.requires_grad) {
            ensure_grad(A);
            std::vector<double> da;
            if (!trans_a) {
                // dA = G * op(B)^T
                da = gemm(g, m, n, false, B.value.data(), dim_rows(B.shape), dim_cols(B.shape),
                          !trans_b, r, c);
            } else {
                // A stored transposed: dA = op(B) * G^T
                da = gemm(B.value.data(), dim_rows(B.shape), dim_cols(B.shape), trans_b, g, m, n,
                          true, r, c);
            }
            for (std::size_t i = 0; i < da.size(); ++i) A.grad[i] += da[i];
        }
        if (B.requires_grad) {
            ensure_grad(B);
            std::vector<double> db;
            if (!trans_b) {
                // dB = op(A)^T * G
                db = gemm(A.value.data(), dim_rows(A.shape), dim_cols(A.shape), !trans_a, g, m, n,
                          false, r, c);
            } else {
                // B stored transposed: dB = G^T * op(A)
                db = gemm(g, m, n, true, A.value.data(), dim_rows(A.shape), dim_cols(A.shape),
                          trans_a, r, c);
            }
            for (std::size_t i = 0; i < db.size(); ++i) B.grad[i] += db[i];
        }
    });
}

namespace {

Tensor binary_elementwise(const Tensor& a, const Tensor& b, const char* who, bool subtract,
                          bool multiply) {
    check_2d(a, who);
    check_2d(b, who);
    const Broadcast k = broadcast_kind(a, b, who);
    const std::size_t rows = a.rows(), cols = a.cols();
    std::vector<double> out(a.numel());
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < cols; ++j) {
            const double x = av[i * cols + j];
            const double y = bv[broadcast_index(k, i, j, cols)];
            out[i * cols + j] = multiply ? x * y : (subtract ? x - y : x + y);
        }
    }
    auto node = new_node(a.shape(), std::move(out));
    return finish(node, {&a, &b}, [k, rows, cols, subtract, multiply](TensorNode& self) {
        TensorNode& A = *self.parents[0];
        TensorNode& B = *self.parents[1];
        const double sign_b = subtract ? -1.0 : 1.0;
        for (std::size_t i = 0; i < rows; ++i) {
            for (std::size_t j = 0; j < cols; ++j) {
                const std::size_t ai = i * cols + j;
                const std::size_t bi = broadcast_index(k, i, j, cols);
                const double g = self.grad[ai];
                if (multiply) {
                    accum(A, ai, g * B.value[bi]);
                    accum(B, bi, g * A.value[ai]);
                } else {
                    accum(A, ai, g);
                    accum(B, bi, sign_b * g);
                }
            }
        }
    });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary_elementwise(a, b, "add", false, false); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_elementwise(a, b, "sub", true, false); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_elementwise(a, b, "mul", false, true); }

Tensor neg(const Tensor& x) {
    std::vector<double> out(x.numel());
    const auto& v = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = -v[i];
    auto node = new_node(x.shape(), std::move(out));
    return finish(node, {&x}, [](TensorNode& self) {
        TensorNode& X = *self.parents[0];
        for (std::size_t i = 0; i < self.grad.size(); ++i) accum(X, i, -self.grad[i]);
    });
}

Tensor add_scalar(const Tensor& x, double c) {
    std::vector<double> out(x.numel());
    const auto& v = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] + c;
    auto node = new_node(x.shape(), std::move(out));
    return finish(node, {&x}, [](TensorNode& self) {
        TensorNode& X = *self.parents[0];
        for (std::size_t i = 0; i < self.grad.size(); ++i) accum(X, i, self.grad[i]);
    });
}

Tensor mul_scalar(const Tensor& x, double c) {
    std::vector<double> out(x.numel());
    const auto& v = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] * c;
    auto node = new_node(x.shape(), std::move(out));
    return finish(node, {&x}, [c](TensorNode& self) {
        TensorNode& X = *self.parents[0];
        for (std::size_t i = 0; i < self.grad.size(); ++i) accum(X, i, c * self.grad[i]);
    });
}

Tensor leaky_relu(const Tensor& x, double negative_slope) {
    std::vector<double> out(x.numel());
    const auto& v = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = v[i] > 0.0 ? v[i] : negative_slope * v[i];
    auto node = new_node(x.shape(), std::move(out));
    return finish(node, {&x}, [negative_slope](TensorNode& self) {
        TensorNode& X = *self.parents[0];
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            accum(X, i, self.grad[i] * (X.value[i] > 0.0 ? 1.0 : negative_slope));
    });
}

Tensor sigmoid(const Tensor& x) {
    std::vector<double> out(x.numel());
    const auto& v = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) {
        double p;
        if (v[i] >= 0.0) {
            p = 1.0 / (1.0 + std::exp(-v[i]));
        } else {
            const double e = std::exp(v[i]);
            p = e / (1.0 + e);
        }
        out[i] = std::clamp(p, kSigmoidClamp, 1.0 - kSigmoidClamp);
    }
    auto node = new_node(x.shape(), std::move(out));
    return finish(node, {&x}, [](TensorNode& self) {
        TensorNode& X = *self.parents[0];
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const double p = self.value[i];
            accum(X, i, self.grad[i] * p * (1.0 - p));
        }
    });
}

Tensor log(const Tensor& x) {
    std::vector<double> out(x.numel());
    const auto& v = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (!(v[i] > 0.0)) throw DomainError("log: nonpositive input");
        out[i] = std::log(v[i]);
    }
    auto node = new_node(x.shape(), std::move(out));
    return finish(node, {&x}, [](TensorNode& self) {
        TensorNode& X = *self.parents[0];
        for (std::size_t i = 0; i < self.grad.size(); ++i) accum(X, i, self.grad[i] / X.value[i]);
    });
}

Tensor exp(const Tensor& x) {
    std::vector<double> out(x.numel());
    const auto& v = x.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::exp(v[i]);
    auto node = new_node(x.shape(), std::move(out));
    return finish(node, {&x}, [](TensorNode& self) {
        TensorNode& X = *self.parents[0];
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            accum(X, i, self.grad[i] * self.value[i]);
    });
}

namespace {

// Iterates the slices of a 2-D tensor along `axis`: axis 1 walks each row,
// axis 0 walks each column.
template <typename F>
void for_each_slice(std::size_t rows, std::size_t cols, int axis, F&& f) {
    if (axis == 1) {
        for (std::size_t i = 0; i < rows; ++i) f(i * cols, 1, cols);
    } else {
        for (std::size_t j = 0; j < cols; ++j) f(j, cols, rows);
    }
}

}  // namespace

Tensor softmax(const Tensor& x, int axis) {
    check_2d(x, "softmax");
    check_axis(axis);
    const std::size_t rows = x.rows(), cols = x.cols();
    std::vector<double> out(x.numel());
    const auto& v = x.values();
    for_each_slice(rows, cols, axis, [&](std::size_t base, std::size_t stride, std::size_t len) {
        double mx = v[base];
        for (std::size_t t = 1; t < len; ++t) mx = std::max(mx, v[base + t * stride]);
        double sum = 0.0;
        for (std::size_t t = 0; t < len; ++t) {
            const double e = std::exp(v[base + t * stride] - mx);
            out[base + t * stride] = e;
            sum += e;
        }
        for (std::size_t t = 0; t < len; ++t) out[base + t * stride] /= sum;
    });
    auto node = new_node(x.shape(), std::move(out));
    return finish(node, {&x}, [rows, cols, axis](TensorNode& self) {
        TensorNode& X = *self.parents[0];
        for_each_slice(rows, cols, axis,
                       [&](std::size_t base, std::size_t stride, std::size_t len) {
                           double dot = 0.0;
                           for (std::size_t t = 0; t < len; ++t) {
                               const std::size_t i = base + t * stride;
                               dot += self.grad[i] * self.value[i];
                           }
                           for (std::size_t t = 0; t < len; ++t) {
                               const std::size_t i = base + t * stride;
                               accum(X, i, self.value[i] * (self.grad[i] - dot));
                           }
                       });
    });
}

Tensor log_softmax(const Tensor& x, int axis) {
    check_2d(x, "log_softmax");
    check_axis(axis);
    const std::size_t rows = x.rows(), cols = x.cols();
    std::vector<double> out(x.numel());
    const auto& v = x.values();
    for_each_slice(rows, cols, axis, [&](std::size_t base, std::size_t stride, std::size_t len) {
        double mx = v[base];
        for (std::size_t t = 1; t < len; ++t) mx = std::max(mx, v[base + t * stride]);
        double sum = 0.0;
        for (std::size_t t = 0; t < len; ++t) sum += std::exp(v[base + t * stride] - mx);
        const double lse = mx + std::log(sum);
        for (std::size_t t = 0; t < len; ++t) out[base + t * stride] = v[base + t * stride] - lse;
    });
    auto node = new_node(x.shape(), std::move(out));
    return finish(node, {&x}, [rows, cols, axis](TensorNode& self) {
        TensorNode& X = *self.parents[0];
        for_each_slice(rows, cols, axis,
                       [&](std::size_t base, std::size_t stride, std::size_t len) {
                           double gsum = 0.0;
                           for (std::size_t t = 0; t < len; ++t) gsum += self.grad[base + t * stride];
                           for (std::size_t t = 0; t < len; ++t) {
                               const std::size_t i = base + t * stride;
                               accum(X, i, self.grad[i] - std::exp(self.value[i]) * gsum);
                           }
                       });
    });
}

Tensor mean_all(const Tensor& x) {
    const std::size_t n = x.numel();
    double sum = 0.0;
    for (double v : x.values()) sum += v;
    auto node = new_node(Shape{1}, {sum / static_cast<double>(n)});
    return finish(node, {&x}, [n](TensorNode& self) {
        TensorNode& X = *self.parents[0];
        const double g = self.grad[0] / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) accum(X, i, g);
    });
}

namespace {

Tensor axis_reduce(const Tensor& x, int axis, bool mean) {
    check_2d(x, "axis reduce");
    check_axis(axis);
    const std::size_t rows = x.rows(), cols = x.cols();
    const std::size_t out_len = axis == 0 ? cols : rows;
    const double denom = mean ? static_cast<double>(axis == 0 ? rows : cols) : 1.0;
    std::vector<double> out(out_len, 0.0);
    const auto& v = x.values();
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) out[axis == 0 ? j : i] += v[i * cols + j];
    for (auto& o : out) o /= denom;
    Shape shape = axis == 0 ? Shape{1, cols} : Shape{rows, 1};
    auto node = new_node(std::move(shape), std::move(out));
    return finish(node, {&x}, [rows, cols, axis, denom](TensorNode& self) {
        TensorNode& X = *self.parents[0];
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < cols; ++j)
                accum(X, i * cols + j, self.grad[axis == 0 ? j : i] / denom);
    });
}

}  // namespace

Tensor mean_axis(const Tensor& x, int axis) { return axis_reduce(x, axis, true); }
Tensor sum_axis(const Tensor& x, int axis) { return axis_reduce(x, axis, false); }

Tensor l2norm_rows(const Tensor& x) {
    check_2d(x, "l2norm_rows");
    const std::size_t rows = x.rows(), cols = x.cols();
    std::vector<double> out(rows, 0.0);
    const auto& v = x.values();
    for (std::size_t i = 0; i < rows; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < cols; ++j) s += v[i * cols + j] * v[i * cols + j];
        out[i] = std::sqrt(s);
    }
    auto node = new_node(Shape{rows, 1}, std::move(out));
    return finish(node, {&x}, [rows, cols](TensorNode& self) {
        TensorNode& X = *self.parents[0];
        for (std::size_t i = 0; i < rows; ++i) {
            const double norm = self.value[i];
            if (norm == 0.0) continue;  // subgradient 0 at the kink
            const double g = self.grad[i] / norm;
            for (std::size_t j = 0; j < cols; ++j) accum(X, i * cols + j, g * X.value[i * cols + j]);
        }
    });
}

Tensor sumsq_rows(const Tensor& x) {
    check_2d(x, "sumsq_rows");
    const std::size_t rows = x.rows(), cols = x.cols();
    std::vector<double> out(rows, 0.0);
    const auto& v = x.values();
    for (std::size_t i = 0; i < rows; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < cols; ++j) s += v[i * cols + j] * v[i * cols + j];
        out[i] = s;
    }
    auto node = new_node(Shape{rows, 1}, std::move(out));
    return finish(node, {&x}, [rows, cols](TensorNode& self) {
        TensorNode& X = *self.parents[0];
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < cols; ++j)
                accum(X, i * cols + j, 2.0 * self.grad[i] * X.value[i * cols + j]);
    });
}

Tensor cosine_rows(const Tensor& a, const Tensor& b) {
    check_2d(a, "cosine_rows");
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw DimensionError("cosine_rows: shape mismatch");
    const std::size_t rows = a.rows(), cols = a.cols();
    std::vector<double> out(rows), na(rows), nb(rows);
    const auto& av = a.values();
    const auto& bv = b.values();
    for (std::size_t i = 0; i < rows; ++i) {
        double dot = 0.0, sa = 0.0, sb = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
            const double x = av[i * cols + j], y = bv[i * cols + j];
            dot += x * y;
            sa += x * x;
            sb += y * y;
        }
        if (sa == 0.0 || sb == 0.0)
            throw DegenerateFeatureError("cosine_rows: zero-norm feature row");
        na[i] = std::sqrt(sa);
        nb[i] = std::sqrt(sb);
        out[i] = dot / (na[i] * nb[i]);
    }
    auto node = new_node(Shape{rows, 1}, std::move(out));
    return finish(node, {&a, &b}, [rows, cols, na, nb](TensorNode& self) {
        TensorNode& A = *self.parents[0];
        TensorNode& B = *self.parents[1];
        for (std::size_t i = 0; i < rows; ++i) {
            const double g = self.grad[i];
            if (g == 0.0) continue;
            const double c = self.value[i];
            for (std::size_t j = 0; j < cols; ++j) {
                const double x = A.value[i * cols + j], y = B.value[i * cols + j];
                accum(A, i * cols + j, g * (y / (na[i] * nb[i]) - c * x / (na[i] * na[i])));
                accum(B, i * cols + j, g * (x / (na[i] * nb[i]) - c * y / (nb[i] * nb[i])));
            }
        }
    });
}

Tensor row_normalize(const Tensor& x) {
    check_2d(x, "row_normalize");
    const std::size_t rows = x.rows(), cols = x.cols();
    std::vector<double> out(x.numel()), norms(rows);
    const auto& v = x.values();
    for (std::size_t i = 0; i < rows; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < cols; ++j) s += v[i * cols + j] * v[i * cols + j];
        if (s == 0.0) throw DegenerateFeatureError("row_normalize: zero-norm row");
        norms[i] = std::sqrt(s);
        for (std::size_t j = 0; j < cols; ++j) out[i * cols + j] = v[i * cols + j] / norms[i];
    }
    auto node = new_node(x.shape(), std::move(out));
    return finish(node, {&x}, [rows, cols, norms](TensorNode& self) {
        TensorNode& X = *self.parents[0];
        for (std::size_t i = 0; i < rows; ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < cols; ++j)
                dot += self.grad[i * cols + j] * self.value[i * cols + j];
            for (std::size_t j = 0; j < cols; ++j) {
                const std::size_t idx = i * cols + j;
                accum(X, idx, (self.grad[idx] - self.value[idx] * dot) / norms[i]);
            }
        }
    });
}

Tensor batchnorm_train(const Tensor& x) {
    check_2d(x, "batchnorm");
    const std::size_t n = x.rows(), d = x.cols();
    if (n < 2) throw ContractError("batchnorm: training mode needs a batch of at least 2");
    constexpr double eps = 1e-8;
    const auto& v = x.values();
    std::vector<double> mean(d, 0.0), inv_std(d, 0.0), out(x.numel());
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) mean[j] += v[i * d + j];
    for (auto& m : mean) m /= static_cast<double>(n);
    for (std::size_t j = 0; j < d; ++j) {
        double var = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double c = v[i * d + j] - mean[j];
            var += c * c;
        }
        var /= static_cast<double>(n);  // biased, the normalization convention
        inv_std[j] = 1.0 / std::sqrt(var + eps);
    }
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) out[i * d + j] = (v[i * d + j] - mean[j]) * inv_std[j];
    auto node = new_node(x.shape(), std::move(out));
    return finish(node, {&x}, [n, d, inv_std](TensorNode& self) {
        TensorNode& X = *self.parents[0];
        const double nn = static_cast<double>(n);
        for (std::size_t j = 0; j < d; ++j) {
            double gsum = 0.0, gxsum = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                gsum += self.grad[i * d + j];
                gxsum += self.grad[i * d + j] * self.value[i * d + j];
            }
            for (std::size_t i = 0; i < n; ++i) {
                const std::size_t idx = i * d + j;
                accum(X, idx,
                      inv_std[j] / nn * (nn * self.grad[idx] - gsum - self.value[idx] * gxsum));
            }
        }
    });
}

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
    check_2d(logits, "cross_entropy");
    const std::size_t n = logits.rows(), c = logits.cols();
    if (n == 0) throw ContractError("cross_entropy: empty batch");
    if (labels.size() != n) throw DimensionError("cross_entropy: labels length mismatch");
    const auto& v = logits.values();
    std::vector<double> probs(n * c);
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c)
            throw ContractError("cross_entropy: label out of range");
        double mx = v[i * c];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, v[i * c + j]);
        double sum = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            probs[i * c + j] = std::exp(v[i * c + j] - mx);
            sum += probs[i * c + j];
        }
        for (std::size_t j = 0; j < c; ++j) probs[i * c + j] /= sum;
        loss -= (v[i * c + labels[i]] - mx) - std::log(sum);
    }
    auto node = new_node(Shape{1}, {loss / static_cast<double>(n)});
    return finish(node, {&logits}, [n, c, probs, labels](TensorNode& self) {
        TensorNode& X = *self.parents[0];
        const double g = self.grad[0] / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < c; ++j) {
                const double target = static_cast<std::size_t>(labels[i]) == j ? 1.0 : 0.0;
                accum(X, i * c + j, g * (probs[i * c + j] - target));
            }
    });
}

Tensor transpose(const Tensor& x) {
    check_2d(x, "transpose");
    const std::size_t rows = x.rows(), cols = x.cols();
    auto node = new_node(Shape{cols, rows}, transpose_copy(x.values().data(), rows, cols));
    return finish(node, {&x}, [rows, cols](TensorNode& self) {
        TensorNode& X = *self.parents[0];
        for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < cols; ++j) accum(X, i * cols + j, self.grad[j * rows + i]);
    });
}

}  // namespace fedafd
