#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "protodet/rng.hpp"

namespace protodet {

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);

class Tensor;

// Differentiation record attached to an op result. `apply` receives the
// gradient of the output and accumulates into the parents' grad buffers.
struct Node {
    const char* op;
    std::vector<Tensor> parents;
    std::function<void(const std::vector<double>&)> apply;
};

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until a gradient reaches this tensor
    bool requires_grad = false;
    std::shared_ptr<Node> node;
};

// Dense row-major f64 tensor with define-by-run reverse-mode autodiff.
// Value-semantic handle: copies share the underlying buffer.
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor from_data(Shape shape, std::vector<double> data);
    static Tensor scalar(double value);
    // Uniform in [lo, hi), row-major fill order.
    static Tensor uniform(Shape shape, double lo, double hi, Rng& rng);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int rank() const { return static_cast<int>(impl_->shape.size()); }
    int dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
    int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }

    std::vector<double>& data() { return impl_->data; }
    const std::vector<double>& data() const { return impl_->data; }
    double item() const;

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool value);
    bool has_node() const { return impl_->node != nullptr; }
    // True when gradients must flow into or through this tensor.
    bool tracked() const { return impl_->requires_grad || impl_->node != nullptr; }

    // Gradient buffer, zero-initialized to the tensor's size on first access.
    std::vector<double>& grad();
    const std::vector<double>& grad() const;
    bool has_grad() const { return !impl_->grad.empty(); }
    void zero_grad() { impl_->grad.clear(); }

    // Copy of the values with no graph attachment.
    Tensor detach() const;

    // Reverse topological traversal from this scalar; accumulates gradients
    // into every reachable tracked tensor.
    void backward() const;

    std::shared_ptr<TensorImpl> impl() const { return impl_; }

  private:
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<TensorImpl> impl_;

    friend Tensor make_op(const char* tag, Shape shape, std::vector<double> data,
                          std::vector<Tensor> parents,
                          std::function<void(const std::vector<double>&)> apply);
};

// Builds an op result; attaches the differentiation record only when some
// parent is tracked. Extension point for composite ops and test doubles.
Tensor make_op(const char* tag, Shape shape, std::vector<double> data,
               std::vector<Tensor> parents,
               std::function<void(const std::vector<double>&)> apply);

// --- primitive operations -------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor softmax(const Tensor& x, int axis);
// x: [C_in,H,W], weight: [C_out,C_in,k,k] with k in {1,3}, bias: [C_out].
// Stride 1; k=3 uses zero same-padding, k=1 none.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias);
Tensor gap(const Tensor& x);  // [C,H,W] -> [C] spatial mean
Tensor gmp(const Tensor& x);  // [C,H,W] -> [C] spatial max
// out[i,j] = <v, x[:,i,j]> / (max(|v|,eps) * max(|x[:,i,j]|,eps))
Tensor cosine_map(const Tensor& v, const Tensor& x, double eps = 1e-8);
// add/hadamard accept equal shapes, or an [H,W] mask against a [C,H,W]
// tensor (mask broadcast across channels, in either argument order).
Tensor add(const Tensor& a, const Tensor& b);
Tensor hadamard(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double c);
// Multiply by a one-element tensor; gradients flow to both arguments.
Tensor mul_scalar(const Tensor& x, const Tensor& s);
Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor reciprocal(const Tensor& x);
// x / max(|x|_2, eps) over the whole tensor
Tensor l2_normalize(const Tensor& x, double eps = 1e-8);
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);
// logits: [N,M]; mean over rows of -log softmax(logits)[label].
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels);
// Mean absolute difference; target receives no gradient.
Tensor l1_loss(const Tensor& pred, const Tensor& target);
Tensor reshape(const Tensor& x, Shape shape);
Tensor stack_rows(const std::vector<Tensor>& rows);
Tensor concat(const std::vector<Tensor>& parts);  // rank-1 tensors
// Mean over window [y0,y1)x[x0,x1) per channel of a [C,H,W] tensor.
Tensor crop_mean(const Tensor& x, int y0, int y1, int x0, int x1);
Tensor avgpool2(const Tensor& x);  // 2x2 average pool, even dims

}  // namespace protodet
