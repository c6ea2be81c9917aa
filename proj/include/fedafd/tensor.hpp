#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "fedafd/common.hpp"

namespace fedafd {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& s);

/// One node of the recorded computation. Forward ops append nodes whose
/// parents precede them; backward replays the topological order once.
struct TensorNode {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // sized lazily during backward
    bool requires_grad = false;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;  // empty for leaves

    std::size_t numel() const { return value.size(); }
    bool is_leaf() const { return !backward_fn; }
};

/// Handle to a tensor in the autodiff graph. Copying the handle aliases the
/// underlying node. All values are double precision; shapes are 1-D or 2-D.
class Tensor {
   public:
    Tensor() = default;

    static Tensor leaf(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double v, bool requires_grad = false);
    static Tensor scalar(double v, bool requires_grad = false);
    static Tensor from_matrix(const FeatureMatrix& m, bool requires_grad = false);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t rows() const;
    std::size_t cols() const;
    std::size_t numel() const { return node_->value.size(); }
    const std::vector<double>& values() const { return node_->value; }
    const std::vector<double>& grad() const { return node_->grad; }
    bool requires_grad() const { return node_->requires_grad; }
    bool is_leaf() const { return node_->is_leaf(); }
    double item() const;
    double value_at(std::size_t r, std::size_t c) const;

    /// Overwrite a leaf's values in place (same length).
    void set_values(std::span<const double> v);
    /// Deep copy into a fresh constant leaf (cuts the graph).
    Tensor detach() const;
    Tensor clone(bool requires_grad) const;
    FeatureMatrix to_matrix() const;

    std::shared_ptr<TensorNode> node() const { return node_; }
    static Tensor wrap(std::shared_ptr<TensorNode> n) { return Tensor(std::move(n)); }

   private:
    explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}
    std::shared_ptr<TensorNode> node_;
};

/// Disables graph recording for its lifetime (thread-local).
struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

   private:
    bool prev_;
};
bool grad_enabled();

/// Reverse-mode sweep from a scalar loss. Default semantics overwrite the
/// gradients of every leaf reached by this graph; accumulate=true adds into
/// existing leaf gradients instead.
void backward(const Tensor& loss, bool accumulate = false);

void zero_grad(const std::vector<Tensor*>& params);
/// p <- p - lr * p.grad for every param with a computed gradient; lr > 0.
void sgd_step(const std::vector<Tensor*>& params, double lr);
/// p <- p + lr * p.grad (gradient ascent); lr > 0.
void sgd_ascent_step(const std::vector<Tensor*>& params, double lr);

// --- Forward ops ----------------------------------------------------------
// Each op validates shapes, computes values eagerly and records a backward
// closure when recording is enabled and any input requires a gradient.

Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);
/// add/sub/mul support equal shapes, plus a second operand that is a row
/// [1 x m], a column [n x 1] or a scalar, broadcast against the first.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& x);
Tensor add_scalar(const Tensor& x, double c);
Tensor mul_scalar(const Tensor& x, double c);
Tensor leaky_relu(const Tensor& x, double negative_slope);
/// Numerically stable logistic; output clamped to [1e-12, 1 - 1e-12] so that
/// downstream log(p) and log(1-p) stay finite.
Tensor sigmoid(const Tensor& x);
Tensor log(const Tensor& x);
Tensor exp(const Tensor& x);
/// axis 0 normalizes down each column, axis 1 across each row.
Tensor softmax(const Tensor& x, int axis);
Tensor log_softmax(const Tensor& x, int axis);
Tensor mean_all(const Tensor& x);
Tensor mean_axis(const Tensor& x, int axis);
Tensor sum_axis(const Tensor& x, int axis);
/// Euclidean norm of each row: [n x d] -> [n x 1].
Tensor l2norm_rows(const Tensor& x);
Tensor sumsq_rows(const Tensor& x);
/// Row-wise cosine similarity of two [n x d] tensors -> [n x 1].
Tensor cosine_rows(const Tensor& a, const Tensor& b);
/// Each row scaled to unit Euclidean norm.
Tensor row_normalize(const Tensor& x);
/// Training-mode batch normalization over the batch (row) axis, before any
/// affine parameters. Requires at least 2 rows.
Tensor batchnorm_train(const Tensor& x);
/// Mean softmax cross-entropy of row logits against integer labels.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels);
Tensor transpose(const Tensor& x);

}  // namespace fedafd
