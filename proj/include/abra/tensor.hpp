#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace abra {

using Shape = std::vector<std::int64_t>;

std::int64_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

// One node of the recorded computation graph. Edges point from a node to
// the inputs it was computed from; backward traverses in reverse
// topological order and accumulates additively into parent grads.
struct TensorNode {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // allocated on first backward touch
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void()> backward_fn;  // reads this->grad, accumulates into parents

  bool is_leaf() const { return parents.empty(); }
  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }
};

// Value-semantics handle over a shared graph node. Row-major contiguous
// storage; reshape copies, there are no strided views.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorNode> n) : n_(std::move(n)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  std::int64_t numel() const { return static_cast<std::int64_t>(n_->data.size()); }
  std::int64_t dim(int i) const { return n_->shape[static_cast<std::size_t>(i)]; }
  int ndim() const { return static_cast<int>(n_->shape.size()); }

  std::vector<double>& data() { return n_->data; }
  const std::vector<double>& data() const { return n_->data; }
  std::vector<double>& grad() { return n_->grad; }
  const std::vector<double>& grad() const { return n_->grad; }
  bool has_grad() const { return !n_->grad.empty(); }
  bool requires_grad() const { return n_->requires_grad; }

  double item() const;

  // Value-identical tensor through which no gradient flows.
  Tensor detach() const;

  void zero_grad() { n_->grad.assign(n_->data.size(), 0.0); }

  std::shared_ptr<TensorNode> node() const { return n_; }

 private:
  std::shared_ptr<TensorNode> n_;
};

// Reverse-mode sweep from a scalar loss. Leaf grads accumulate across
// calls; interior grads are reset at the start of each sweep.
void backward(const Tensor& loss);

// ---- op vocabulary -------------------------------------------------------

// elementwise, same shape
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor divide(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);

Tensor relu(const Tensor& x);
Tensor sqrt_t(const Tensor& x);
Tensor exp_t(const Tensor& x);
Tensor log_t(const Tensor& x);

// a: M x K, b: K x N
Tensor matmul(const Tensor& a, const Tensor& b);

// x: N x D, w: O x D, bias: O  ->  N x O  (x w^T + bias)
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias);

// x: N x C x H x W, w: O x C x k x k
Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad);

Tensor avg_pool2(const Tensor& x);        // 2x2, stride 2
Tensor global_avg_pool(const Tensor& x);  // NCHW -> N x C

Tensor reshape(const Tensor& x, Shape shape);  // copies

// first n rows of a rank-2 tensor; backward scatters into those rows
Tensor slice_rows(const Tensor& x, std::int64_t n);

Tensor mean_all(const Tensor& x);  // scalar
Tensor sum_all(const Tensor& x);   // scalar

// reductions to per-channel / per-instance statistics
Tensor channel_mean(const Tensor& x);   // NCHW -> C
Tensor instance_mean(const Tensor& x);  // NCHW -> N x C

// broadcast arithmetic of NCHW against a C vector
Tensor chan_add(const Tensor& x, const Tensor& v);
Tensor chan_sub(const Tensor& x, const Tensor& v);
Tensor chan_mul(const Tensor& x, const Tensor& v);
Tensor chan_div(const Tensor& x, const Tensor& v);

// broadcast arithmetic of NCHW against an N x C matrix
Tensor inst_add(const Tensor& x, const Tensor& v);
Tensor inst_sub(const Tensor& x, const Tensor& v);
Tensor inst_mul(const Tensor& x, const Tensor& v);
Tensor inst_div(const Tensor& x, const Tensor& v);

Tensor softmax_rows(const Tensor& x);        // N x O
Tensor l2_normalize_rows(const Tensor& x);   // N x D, unit-length rows

// cosine of the angle between every row pair; a: N x D, b: O x D -> N x O
Tensor cosine_rows(const Tensor& a, const Tensor& b);

// identity forward, negated gradient backward
Tensor gradient_reversal(const Tensor& x);

// fused losses (scalar outputs)
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels);
Tensor arcface_loss(const Tensor& cosphi, const std::vector<int>& labels,
                    double margin, double s);
Tensor js_divergence(const Tensor& p, const Tensor& q);

}  // namespace abra
