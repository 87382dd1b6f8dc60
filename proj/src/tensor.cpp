#include "abra/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace abra {

std::int64_t numel_of(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

namespace {

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                              shape_str(a) + " vs " + shape_str(b));
}

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

std::shared_ptr<TensorNode> make_node(
    Shape shape, std::vector<double> data,
    std::vector<std::shared_ptr<TensorNode>> parents) {
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->parents = std::move(parents);
  for (const auto& p : n->parents) {
    if (p->requires_grad) {
      n->requires_grad = true;
      break;
    }
  }
  return n;
}

// Drop graph edges when no parent tracks gradients: the node becomes a
// constant and the recording cost disappears.
Tensor finish(std::shared_ptr<TensorNode> n, std::function<void()> bw) {
  if (n->requires_grad) {
    n->backward_fn = std::move(bw);
  } else {
    n->parents.clear();
  }
  return Tensor(std::move(n));
}

}  // namespace

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto n = std::make_shared<TensorNode>();
  n->data.assign(static_cast<std::size_t>(numel_of(shape)), value);
  n->shape = std::move(shape);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data,
                         bool requires_grad) {
  require(numel_of(shape) == static_cast<std::int64_t>(data.size()),
          "from_data: element count does not match shape " + shape_str(shape));
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

double Tensor::item() const {
  require(numel() == 1, "item: tensor is not scalar, shape " + shape_str(shape()));
  return n_->data[0];
}

Tensor Tensor::detach() const {
  auto n = std::make_shared<TensorNode>();
  n->shape = n_->shape;
  n->data = n_->data;
  n->requires_grad = false;
  return Tensor(std::move(n));
}

void backward(const Tensor& loss) {
  if (loss.numel() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got shape " +
                                shape_str(loss.shape()));
  auto root = loss.node();

  // topological order over the subgraph reachable through parents
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> seen;
  std::vector<std::pair<TensorNode*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      TensorNode* p = node->parents[idx].get();
      ++idx;
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  // interior grads reset per sweep; leaf grads accumulate across sweeps
  for (TensorNode* n : order) {
    if (n->is_leaf()) {
      n->ensure_grad();
    } else {
      n->grad.assign(n->data.size(), 0.0);
    }
  }
  root->ensure_grad();
  root->grad[0] += 1.0;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorNode* n = *it;
    if (n->backward_fn) n->backward_fn();
  }
}

// ---- elementwise ---------------------------------------------------------

namespace {

template <typename Fwd, typename Bwd>
Tensor binary_elemwise(const char* name, const Tensor& a, const Tensor& b,
                       Fwd fwd, Bwd bwd) {
  if (a.shape() != b.shape()) shape_error(name, a.shape(), b.shape());
  const auto& da = a.data();
  const auto& db = b.data();
  std::vector<double> out(da.size());
  for (std::size_t i = 0; i < da.size(); ++i) out[i] = fwd(da[i], db[i]);
  auto n = make_node(a.shape(), std::move(out), {a.node(), b.node()});
  TensorNode* self = n.get();
  auto pa = a.node();
  auto pb = b.node();
  return finish(n, [self, pa, pb, bwd]() {
    const bool ga = pa->requires_grad;
    const bool gb = pb->requires_grad;
    if (ga) pa->ensure_grad();
    if (gb) pb->ensure_grad();
    for (std::size_t i = 0; i < self->data.size(); ++i) {
      auto [dda, ddb] = bwd(pa->data[i], pb->data[i], self->data[i]);
      if (ga) pa->grad[i] += self->grad[i] * dda;
      if (gb) pb->grad[i] += self->grad[i] * ddb;
    }
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_elemwise(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double) { return std::pair<double, double>{1.0, 1.0}; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_elemwise(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double) { return std::pair<double, double>{1.0, -1.0}; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_elemwise(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double x, double y, double) { return std::pair<double, double>{y, x}; });
}

Tensor divide(const Tensor& a, const Tensor& b) {
  return binary_elemwise(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double x, double y, double) {
        return std::pair<double, double>{1.0 / y, -x / (y * y)};
      });
}

namespace {

template <typename Fwd, typename Bwd>
Tensor unary_elemwise(const Tensor& x, Fwd fwd, Bwd bwd) {
  const auto& dx = x.data();
  std::vector<double> out(dx.size());
  for (std::size_t i = 0; i < dx.size(); ++i) out[i] = fwd(dx[i]);
  auto n = make_node(x.shape(), std::move(out), {x.node()});
  TensorNode* self = n.get();
  auto px = x.node();
  return finish(n, [self, px, bwd]() {
    px->ensure_grad();
    for (std::size_t i = 0; i < self->data.size(); ++i)
      px->grad[i] += self->grad[i] * bwd(px->data[i], self->data[i]);
  });
}

}  // namespace

Tensor scale(const Tensor& a, double c) {
  return unary_elemwise(
      a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Tensor add_scalar(const Tensor& a, double c) {
  return unary_elemwise(
      a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Tensor relu(const Tensor& x) {
  return unary_elemwise(
      x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor sqrt_t(const Tensor& x) {
  return unary_elemwise(
      x, [](double v) { return std::sqrt(v); },
      [](double, double y) { return 0.5 / y; });
}

Tensor exp_t(const Tensor& x) {
  return unary_elemwise(
      x, [](double v) { return std::exp(v); },
      [](double, double y) { return y; });
}

Tensor log_t(const Tensor& x) {
  return unary_elemwise(
      x, [](double v) { return std::log(v); },
      [](double v, double) { return 1.0 / v; });
}

// ---- matmul / linear -----------------------------------------------------

namespace {

// c (MxN) += a (MxK) * b (KxN)
void gemm_acc(const double* a, const double* b, double* c, std::int64_t M,
              std::int64_t K, std::int64_t N) {
  for (std::int64_t i = 0; i < M; ++i) {
    const double* ai = a + i * K;
    double* ci = c + i * N;
    for (std::int64_t k = 0; k < K; ++k) {
      const double aik = ai[k];
      if (aik == 0.0) continue;
      const double* bk = b + k * N;
      for (std::int64_t j = 0; j < N; ++j) ci[j] += aik * bk[j];
    }
  }
}

// c (MxN) += a (MxK) * b^T where b is NxK
void gemm_bt_acc(const double* a, const double* b, double* c, std::int64_t M,
                 std::int64_t K, std::int64_t N) {
  for (std::int64_t i = 0; i < M; ++i) {
    const double* ai = a + i * K;
    double* ci = c + i * N;
    for (std::int64_t j = 0; j < N; ++j) {
      const double* bj = b + j * K;
      double s = 0.0;
      for (std::int64_t k = 0; k < K; ++k) s += ai[k] * bj[k];
      ci[j] += s;
    }
  }
}

// c (KxN) += a^T * b where a is MxK, b is MxN
void gemm_at_acc(const double* a, const double* b, double* c, std::int64_t M,
                 std::int64_t K, std::int64_t N) {
  for (std::int64_t i = 0; i < M; ++i) {
    const double* ai = a + i * K;
    const double* bi = b + i * N;
    for (std::int64_t k = 0; k < K; ++k) {
      const double aik = ai[k];
      if (aik == 0.0) continue;
      double* ck = c + k * N;
      for (std::int64_t j = 0; j < N; ++j) ck[j] += aik * bi[j];
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.ndim() == 2 && b.ndim() == 2,
          "matmul: expects rank-2 inputs, got " + shape_str(a.shape()) +
              " and " + shape_str(b.shape()));
  if (a.dim(1) != b.dim(0)) shape_error("matmul", a.shape(), b.shape());
  const std::int64_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  std::vector<double> out(static_cast<std::size_t>(M * N), 0.0);
  gemm_acc(a.data().data(), b.data().data(), out.data(), M, K, N);
  auto n = make_node({M, N}, std::move(out), {a.node(), b.node()});
  TensorNode* self = n.get();
  auto pa = a.node();
  auto pb = b.node();
  return finish(n, [self, pa, pb, M, K, N]() {
    if (pa->requires_grad) {
      pa->ensure_grad();
      // dA = dC * B^T
      gemm_bt_acc(self->grad.data(), pb->data.data(), pa->grad.data(), M, N, K);
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      // dB = A^T * dC
      gemm_at_acc(pa->data.data(), self->grad.data(), pb->grad.data(), M, K, N);
    }
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  require(x.ndim() == 2 && w.ndim() == 2 && bias.ndim() == 1,
          "linear: expects x rank-2, w rank-2, bias rank-1");
  if (x.dim(1) != w.dim(1)) shape_error("linear", x.shape(), w.shape());
  if (bias.dim(0) != w.dim(0)) shape_error("linear", w.shape(), bias.shape());
  const std::int64_t N = x.dim(0), D = x.dim(1), O = w.dim(0);
  std::vector<double> out(static_cast<std::size_t>(N * O));
  for (std::int64_t i = 0; i < N * O; ++i) out[i] = bias.data()[i % O];
  gemm_bt_acc(x.data().data(), w.data().data(), out.data(), N, D, O);
  auto n = make_node({N, O}, std::move(out), {x.node(), w.node(), bias.node()});
  TensorNode* self = n.get();
  auto px = x.node();
  auto pw = w.node();
  auto pbias = bias.node();
  return finish(n, [self, px, pw, pbias, N, D, O]() {
    if (px->requires_grad) {
      px->ensure_grad();
      gemm_acc(self->grad.data(), pw->data.data(), px->grad.data(), N, O, D);
    }
    if (pw->requires_grad) {
      pw->ensure_grad();
      gemm_at_acc(self->grad.data(), px->data.data(), pw->grad.data(), N, O, D);
    }
    if (pbias->requires_grad) {
      pbias->ensure_grad();
      for (std::int64_t i = 0; i < N; ++i)
        for (std::int64_t j = 0; j < O; ++j)
          pbias->grad[static_cast<std::size_t>(j)] +=
              self->grad[static_cast<std::size_t>(i * O + j)];
    }
  });
}

// ---- conv2d --------------------------------------------------------------

namespace {

void im2col(const double* x, std::int64_t C, std::int64_t H, std::int64_t W,
            std::int64_t k, std::int64_t stride, std::int64_t pad,
            std::int64_t OH, std::int64_t OW, double* col) {
  // col layout: (C*k*k) x (OH*OW)
  for (std::int64_t c = 0; c < C; ++c) {
    for (std::int64_t ki = 0; ki < k; ++ki) {
      for (std::int64_t kj = 0; kj < k; ++kj) {
        double* row = col + ((c * k + ki) * k + kj) * OH * OW;
        for (std::int64_t oh = 0; oh < OH; ++oh) {
          const std::int64_t ih = oh * stride - pad + ki;
          for (std::int64_t ow = 0; ow < OW; ++ow) {
            const std::int64_t iw = ow * stride - pad + kj;
            row[oh * OW + ow] =
                (ih >= 0 && ih < H && iw >= 0 && iw < W)
                    ? x[(c * H + ih) * W + iw]
                    : 0.0;
          }
        }
      }
    }
  }
}

void col2im_acc(const double* col, std::int64_t C, std::int64_t H,
                std::int64_t W, std::int64_t k, std::int64_t stride,
                std::int64_t pad, std::int64_t OH, std::int64_t OW,
                double* x) {
  for (std::int64_t c = 0; c < C; ++c) {
    for (std::int64_t ki = 0; ki < k; ++ki) {
      for (std::int64_t kj = 0; kj < k; ++kj) {
        const double* row = col + ((c * k + ki) * k + kj) * OH * OW;
        for (std::int64_t oh = 0; oh < OH; ++oh) {
          const std::int64_t ih = oh * stride - pad + ki;
          if (ih < 0 || ih >= H) continue;
          for (std::int64_t ow = 0; ow < OW; ++ow) {
            const std::int64_t iw = ow * stride - pad + kj;
            if (iw < 0 || iw >= W) continue;
            x[(c * H + ih) * W + iw] += row[oh * OW + ow];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad) {
  require(x.ndim() == 4 && w.ndim() == 4,
          "conv2d: expects NCHW input and OCkk kernel, got " +
              shape_str(x.shape()) + " and " + shape_str(w.shape()));
  if (x.dim(1) != w.dim(1)) shape_error("conv2d", x.shape(), w.shape());
  require(w.dim(2) == w.dim(3), "conv2d: kernel must be square, got " +
                                    shape_str(w.shape()));
  const std::int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const std::int64_t O = w.dim(0), k = w.dim(2);
  const std::int64_t OH = (H + 2 * pad - k) / stride + 1;
  const std::int64_t OW = (W + 2 * pad - k) / stride + 1;
  require(OH >= 1 && OW >= 1, "conv2d: kernel larger than padded input");

  const std::int64_t CKK = C * k * k;
  auto col = std::make_shared<std::vector<double>>(
      static_cast<std::size_t>(N * CKK * OH * OW));
  std::vector<double> out(static_cast<std::size_t>(N * O * OH * OW), 0.0);
  for (std::int64_t n = 0; n < N; ++n) {
    double* coln = col->data() + n * CKK * OH * OW;
    im2col(x.data().data() + n * C * H * W, C, H, W, k, stride, pad, OH, OW,
           coln);
    gemm_acc(w.data().data(), coln, out.data() + n * O * OH * OW, O, CKK,
             OH * OW);
  }

  auto node = make_node({N, O, OH, OW}, std::move(out), {x.node(), w.node()});
  TensorNode* self = node.get();
  auto px = x.node();
  auto pw = w.node();
  return finish(node, [self, px, pw, col, N, C, H, W, O, k, CKK, OH, OW,
                       stride, pad]() {
    std::vector<double> dcol;
    if (px->requires_grad) {
      px->ensure_grad();
      dcol.resize(static_cast<std::size_t>(CKK * OH * OW));
    }
    if (pw->requires_grad) pw->ensure_grad();
    for (std::int64_t n = 0; n < N; ++n) {
      const double* dy = self->grad.data() + n * O * OH * OW;
      const double* coln = col->data() + n * CKK * OH * OW;
      if (pw->requires_grad) {
        // dW += dY * col^T
        gemm_bt_acc(dy, coln, pw->grad.data(), O, OH * OW, CKK);
      }
      if (px->requires_grad) {
        std::fill(dcol.begin(), dcol.end(), 0.0);
        // dcol = W^T * dY
        gemm_at_acc(pw->data.data(), dy, dcol.data(), O, CKK, OH * OW);
        col2im_acc(dcol.data(), C, H, W, k, stride, pad, OH, OW,
                   px->grad.data() + n * C * H * W);
      }
    }
  });
}

// ---- pooling / reshape ---------------------------------------------------

Tensor avg_pool2(const Tensor& x) {
  require(x.ndim() == 4, "avg_pool2: expects NCHW, got " + shape_str(x.shape()));
  const std::int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  require(H % 2 == 0 && W % 2 == 0,
          "avg_pool2: spatial dims must be even, got " + shape_str(x.shape()));
  const std::int64_t OH = H / 2, OW = W / 2;
  std::vector<double> out(static_cast<std::size_t>(N * C * OH * OW));
  const double* in = x.data().data();
  for (std::int64_t nc = 0; nc < N * C; ++nc) {
    const double* p = in + nc * H * W;
    double* q = out.data() + nc * OH * OW;
    for (std::int64_t i = 0; i < OH; ++i)
      for (std::int64_t j = 0; j < OW; ++j)
        q[i * OW + j] = 0.25 * (p[2 * i * W + 2 * j] + p[2 * i * W + 2 * j + 1] +
                                p[(2 * i + 1) * W + 2 * j] +
                                p[(2 * i + 1) * W + 2 * j + 1]);
  }
  auto n = make_node({N, C, OH, OW}, std::move(out), {x.node()});
  TensorNode* self = n.get();
  auto px = x.node();
  return finish(n, [self, px, N, C, H, W, OH, OW]() {
    px->ensure_grad();
    for (std::int64_t nc = 0; nc < N * C; ++nc) {
      const double* g = self->grad.data() + nc * OH * OW;
      double* d = px->grad.data() + nc * H * W;
      for (std::int64_t i = 0; i < OH; ++i)
        for (std::int64_t j = 0; j < OW; ++j) {
          const double v = 0.25 * g[i * OW + j];
          d[2 * i * W + 2 * j] += v;
          d[2 * i * W + 2 * j + 1] += v;
          d[(2 * i + 1) * W + 2 * j] += v;
          d[(2 * i + 1) * W + 2 * j + 1] += v;
        }
    }
  });
}

Tensor global_avg_pool(const Tensor& x) {
  require(x.ndim() == 4,
          "global_avg_pool: expects NCHW, got " + shape_str(x.shape()));
  const std::int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  std::vector<double> out(static_cast<std::size_t>(N * C));
  for (std::int64_t nc = 0; nc < N * C; ++nc) {
    double s = 0.0;
    const double* p = x.data().data() + nc * HW;
    for (std::int64_t i = 0; i < HW; ++i) s += p[i];
    out[static_cast<std::size_t>(nc)] = s / static_cast<double>(HW);
  }
  auto n = make_node({N, C}, std::move(out), {x.node()});
  TensorNode* self = n.get();
  auto px = x.node();
  return finish(n, [self, px, N, C, HW]() {
    px->ensure_grad();
    const double inv = 1.0 / static_cast<double>(HW);
    for (std::int64_t nc = 0; nc < N * C; ++nc) {
      const double g = self->grad[static_cast<std::size_t>(nc)] * inv;
      double* d = px->grad.data() + nc * HW;
      for (std::int64_t i = 0; i < HW; ++i) d[i] += g;
    }
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  require(numel_of(shape) == x.numel(),
          "reshape: cannot reshape " + shape_str(x.shape()) + " to " +
              shape_str(shape));
  auto n = make_node(std::move(shape), x.data(), {x.node()});
  TensorNode* self = n.get();
  auto px = x.node();
  return finish(n, [self, px]() {
    px->ensure_grad();
    for (std::size_t i = 0; i < self->grad.size(); ++i)
      px->grad[i] += self->grad[i];
  });
}

Tensor slice_rows(const Tensor& x, std::int64_t n) {
  require(x.ndim() == 2, "slice_rows: expected rank-2, got " + shape_str(x.shape()));
  require(n >= 1 && n <= x.dim(0),
          "slice_rows: row count " + std::to_string(n) + " out of range for " +
              shape_str(x.shape()));
  const std::int64_t D = x.dim(1);
  std::vector<double> out(x.data().begin(), x.data().begin() + n * D);
  auto node = make_node({n, D}, std::move(out), {x.node()});
  TensorNode* self = node.get();
  auto px = x.node();
  return finish(node, [self, px]() {
    px->ensure_grad();
    for (std::size_t i = 0; i < self->grad.size(); ++i)
      px->grad[i] += self->grad[i];
  });
}

// ---- reductions ----------------------------------------------------------

Tensor mean_all(const Tensor& x) {
  const std::int64_t n = x.numel();
  require(n >= 1, "mean_all: empty tensor");
  double s = 0.0;
  for (double v : x.data()) s += v;
  auto node = make_node({1}, {s / static_cast<double>(n)}, {x.node()});
  TensorNode* self = node.get();
  auto px = x.node();
  return finish(node, [self, px, n]() {
    px->ensure_grad();
    const double g = self->grad[0] / static_cast<double>(n);
    for (auto& d : px->grad) d += g;
  });
}

Tensor sum_all(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  auto node = make_node({1}, {s}, {x.node()});
  TensorNode* self = node.get();
  auto px = x.node();
  return finish(node, [self, px]() {
    px->ensure_grad();
    const double g = self->grad[0];
    for (auto& d : px->grad) d += g;
  });
}

Tensor channel_mean(const Tensor& x) {
  require(x.ndim() == 4,
          "channel_mean: expects NCHW, got " + shape_str(x.shape()));
  const std::int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  require(N * HW >= 1, "channel_mean: empty batch");
  std::vector<double> out(static_cast<std::size_t>(C), 0.0);
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t c = 0; c < C; ++c) {
      const double* p = x.data().data() + (n * C + c) * HW;
      double s = 0.0;
      for (std::int64_t i = 0; i < HW; ++i) s += p[i];
      out[static_cast<std::size_t>(c)] += s;
    }
  const double inv = 1.0 / static_cast<double>(N * HW);
  for (auto& v : out) v *= inv;
  auto node = make_node({C}, std::move(out), {x.node()});
  TensorNode* self = node.get();
  auto px = x.node();
  return finish(node, [self, px, N, C, HW, inv]() {
    px->ensure_grad();
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t c = 0; c < C; ++c) {
        const double g = self->grad[static_cast<std::size_t>(c)] * inv;
        double* d = px->grad.data() + (n * C + c) * HW;
        for (std::int64_t i = 0; i < HW; ++i) d[i] += g;
      }
  });
}

Tensor instance_mean(const Tensor& x) {
  require(x.ndim() == 4,
          "instance_mean: expects NCHW, got " + shape_str(x.shape()));
  const std::int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  require(HW >= 1, "instance_mean: empty spatial extent");
  std::vector<double> out(static_cast<std::size_t>(N * C));
  const double inv = 1.0 / static_cast<double>(HW);
  for (std::int64_t nc = 0; nc < N * C; ++nc) {
    const double* p = x.data().data() + nc * HW;
    double s = 0.0;
    for (std::int64_t i = 0; i < HW; ++i) s += p[i];
    out[static_cast<std::size_t>(nc)] = s * inv;
  }
  auto node = make_node({N, C}, std::move(out), {x.node()});
  TensorNode* self = node.get();
  auto px = x.node();
  return finish(node, [self, px, N, C, HW, inv]() {
    px->ensure_grad();
    for (std::int64_t nc = 0; nc < N * C; ++nc) {
      const double g = self->grad[static_cast<std::size_t>(nc)] * inv;
      double* d = px->grad.data() + nc * HW;
      for (std::int64_t i = 0; i < HW; ++i) d[i] += g;
    }
  });
}

// ---- broadcast arithmetic ------------------------------------------------

namespace {

enum class BinKind { Add, Sub, Mul, Div };

Tensor chan_binary(const char* name, BinKind kind, const Tensor& x,
                   const Tensor& v) {
  require(x.ndim() == 4 && v.ndim() == 1,
          std::string(name) + ": expects NCHW and C vector");
  if (x.dim(1) != v.dim(0)) shape_error(name, x.shape(), v.shape());
  const std::int64_t N = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  std::vector<double> out(x.data().size());
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t c = 0; c < C; ++c) {
      const double vc = v.data()[static_cast<std::size_t>(c)];
      const double* p = x.data().data() + (n * C + c) * HW;
      double* q = out.data() + (n * C + c) * HW;
      switch (kind) {
        case BinKind::Add: for (std::int64_t i = 0; i < HW; ++i) q[i] = p[i] + vc; break;
        case BinKind::Sub: for (std::int64_t i = 0; i < HW; ++i) q[i] = p[i] - vc; break;
        case BinKind::Mul: for (std::int64_t i = 0; i < HW; ++i) q[i] = p[i] * vc; break;
        case BinKind::Div: for (std::int64_t i = 0; i < HW; ++i) q[i] = p[i] / vc; break;
      }
    }
  auto node = make_node(x.shape(), std::move(out), {x.node(), v.node()});
  TensorNode* self = node.get();
  auto px = x.node();
  auto pv = v.node();
  return finish(node, [self, px, pv, kind, N, C, HW]() {
    if (px->requires_grad) px->ensure_grad();
    if (pv->requires_grad) pv->ensure_grad();
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t c = 0; c < C; ++c) {
        const double vc = pv->data[static_cast<std::size_t>(c)];
        const double* g = self->grad.data() + (n * C + c) * HW;
        const double* p = px->data.data() + (n * C + c) * HW;
        double* dx = px->requires_grad ? px->grad.data() + (n * C + c) * HW : nullptr;
        double dv = 0.0;
        for (std::int64_t i = 0; i < HW; ++i) {
          double dxi = 0.0, dvi = 0.0;
          switch (kind) {
            case BinKind::Add: dxi = g[i]; dvi = g[i]; break;
            case BinKind::Sub: dxi = g[i]; dvi = -g[i]; break;
            case BinKind::Mul: dxi = g[i] * vc; dvi = g[i] * p[i]; break;
            case BinKind::Div: dxi = g[i] / vc; dvi = -g[i] * p[i] / (vc * vc); break;
          }
          if (dx) dx[i] += dxi;
          dv += dvi;
        }
        if (pv->requires_grad) pv->grad[static_cast<std::size_t>(c)] += dv;
      }
  });
}

Tensor inst_binary(const char* name, BinKind kind, const Tensor& x,
                   const Tensor& v) {
  require(x.ndim() == 4 && v.ndim() == 2,
          std::string(name) + ": expects NCHW and NxC matrix");
  if (x.dim(0) != v.dim(0) || x.dim(1) != v.dim(1))
    shape_error(name, x.shape(), v.shape());
  const std::int64_t NC = x.dim(0) * x.dim(1), HW = x.dim(2) * x.dim(3);
  std::vector<double> out(x.data().size());
  for (std::int64_t nc = 0; nc < NC; ++nc) {
    const double vc = v.data()[static_cast<std::size_t>(nc)];
    const double* p = x.data().data() + nc * HW;
    double* q = out.data() + nc * HW;
    switch (kind) {
      case BinKind::Add: for (std::int64_t i = 0; i < HW; ++i) q[i] = p[i] + vc; break;
      case BinKind::Sub: for (std::int64_t i = 0; i < HW; ++i) q[i] = p[i] - vc; break;
      case BinKind::Mul: for (std::int64_t i = 0; i < HW; ++i) q[i] = p[i] * vc; break;
      case BinKind::Div: for (std::int64_t i = 0; i < HW; ++i) q[i] = p[i] / vc; break;
    }
  }
  auto node = make_node(x.shape(), std::move(out), {x.node(), v.node()});
  TensorNode* self = node.get();
  auto px = x.node();
  auto pv = v.node();
  return finish(node, [self, px, pv, kind, NC, HW]() {
    if (px->requires_grad) px->ensure_grad();
    if (pv->requires_grad) pv->ensure_grad();
    for (std::int64_t nc = 0; nc < NC; ++nc) {
      const double vc = pv->data[static_cast<std::size_t>(nc)];
      const double* g = self->grad.data() + nc * HW;
      const double* p = px->data.data() + nc * HW;
      double* dx = px->requires_grad ? px->grad.data() + nc * HW : nullptr;
      double dv = 0.0;
      for (std::int64_t i = 0; i < HW; ++i) {
        double dxi = 0.0, dvi = 0.0;
        switch (kind) {
          case BinKind::Add: dxi = g[i]; dvi = g[i]; break;
          case BinKind::Sub: dxi = g[i]; dvi = -g[i]; break;
          case BinKind::Mul: dxi = g[i] * vc; dvi = g[i] * p[i]; break;
          case BinKind::Div: dxi = g[i] / vc; dvi = -g[i] * p[i] / (vc * vc); break;
        }
        if (dx) dx[i] += dxi;
        dv += dvi;
      }
      if (pv->requires_grad) pv->grad[static_cast<std::size_t>(nc)] += dv;
    }
  });
}

}  // namespace

Tensor chan_add(const Tensor& x, const Tensor& v) { return chan_binary("chan_add", BinKind::Add, x, v); }
Tensor chan_sub(const Tensor& x, const Tensor& v) { return chan_binary("chan_sub", BinKind::Sub, x, v); }
Tensor chan_mul(const Tensor& x, const Tensor& v) { return chan_binary("chan_mul", BinKind::Mul, x, v); }
Tensor chan_div(const Tensor& x, const Tensor& v) { return chan_binary("chan_div", BinKind::Div, x, v); }
Tensor inst_add(const Tensor& x, const Tensor& v) { return inst_binary("inst_add", BinKind::Add, x, v); }
Tensor inst_sub(const Tensor& x, const Tensor& v) { return inst_binary("inst_sub", BinKind::Sub, x, v); }
Tensor inst_mul(const Tensor& x, const Tensor& v) { return inst_binary("inst_mul", BinKind::Mul, x, v); }
Tensor inst_div(const Tensor& x, const Tensor& v) { return inst_binary("inst_div", BinKind::Div, x, v); }

// ---- row-wise ops --------------------------------------------------------

Tensor softmax_rows(const Tensor& x) {
  require(x.ndim() == 2, "softmax: expects rank-2, got " + shape_str(x.shape()));
  const std::int64_t N = x.dim(0), O = x.dim(1);
  std::vector<double> out(x.data().size());
  for (std::int64_t i = 0; i < N; ++i) {
    const double* r = x.data().data() + i * O;
    double* q = out.data() + i * O;
    double mx = r[0];
    for (std::int64_t j = 1; j < O; ++j) mx = std::max(mx, r[j]);
    double s = 0.0;
    for (std::int64_t j = 0; j < O; ++j) {
      q[j] = std::exp(r[j] - mx);
      s += q[j];
    }
    for (std::int64_t j = 0; j < O; ++j) q[j] /= s;
  }
  auto node = make_node(x.shape(), std::move(out), {x.node()});
  TensorNode* self = node.get();
  auto px = x.node();
  return finish(node, [self, px, N, O]() {
    px->ensure_grad();
    for (std::int64_t i = 0; i < N; ++i) {
      const double* p = self->data.data() + i * O;
      const double* g = self->grad.data() + i * O;
      double dot = 0.0;
      for (std::int64_t j = 0; j < O; ++j) dot += p[j] * g[j];
      double* d = px->grad.data() + i * O;
      for (std::int64_t j = 0; j < O; ++j) d[j] += p[j] * (g[j] - dot);
    }
  });
}

Tensor l2_normalize_rows(const Tensor& x) {
  require(x.ndim() == 2,
          "l2_normalize_rows: expects rank-2, got " + shape_str(x.shape()));
  const std::int64_t N = x.dim(0), D = x.dim(1);
  std::vector<double> out(x.data().size());
  std::vector<double> norms(static_cast<std::size_t>(N));
  for (std::int64_t i = 0; i < N; ++i) {
    const double* r = x.data().data() + i * D;
    double s = 0.0;
    for (std::int64_t j = 0; j < D; ++j) s += r[j] * r[j];
    const double nrm = std::sqrt(s);
    require(nrm > 0.0, "l2_normalize_rows: zero-norm row " + std::to_string(i));
    norms[static_cast<std::size_t>(i)] = nrm;
    for (std::int64_t j = 0; j < D; ++j) out[static_cast<std::size_t>(i * D + j)] = r[j] / nrm;
  }
  auto node = make_node(x.shape(), std::move(out), {x.node()});
  TensorNode* self = node.get();
  auto px = x.node();
  return finish(node, [self, px, norms, N, D]() {
    px->ensure_grad();
    for (std::int64_t i = 0; i < N; ++i) {
      const double* u = self->data.data() + i * D;  // normalized row
      const double* g = self->grad.data() + i * D;
      double dot = 0.0;
      for (std::int64_t j = 0; j < D; ++j) dot += u[j] * g[j];
      const double inv = 1.0 / norms[static_cast<std::size_t>(i)];
      double* d = px->grad.data() + i * D;
      for (std::int64_t j = 0; j < D; ++j) d[j] += inv * (g[j] - dot * u[j]);
    }
  });
}

Tensor cosine_rows(const Tensor& a, const Tensor& b) {
  require(a.ndim() == 2 && b.ndim() == 2,
          "cosine_rows: expects rank-2 inputs");
  if (a.dim(1) != b.dim(1)) shape_error("cosine_rows", a.shape(), b.shape());
  const std::int64_t N = a.dim(0), D = a.dim(1), O = b.dim(0);

  auto row_norms = [](const Tensor& t, const char* side) {
    std::vector<double> ns(static_cast<std::size_t>(t.dim(0)));
    const std::int64_t d = t.dim(1);
    for (std::int64_t i = 0; i < t.dim(0); ++i) {
      const double* r = t.data().data() + i * d;
      double s = 0.0;
      for (std::int64_t j = 0; j < d; ++j) s += r[j] * r[j];
      const double nrm = std::sqrt(s);
      require(nrm > 0.0, std::string("cosine_rows: zero-norm ") + side +
                             " row " + std::to_string(i));
      ns[static_cast<std::size_t>(i)] = nrm;
    }
    return ns;
  };
  std::vector<double> na = row_norms(a, "left");
  std::vector<double> nb = row_norms(b, "right");

  std::vector<double> out(static_cast<std::size_t>(N * O));
  for (std::int64_t i = 0; i < N; ++i) {
    const double* ra = a.data().data() + i * D;
    for (std::int64_t j = 0; j < O; ++j) {
      const double* rb = b.data().data() + j * D;
      double s = 0.0;
      for (std::int64_t d = 0; d < D; ++d) s += ra[d] * rb[d];
      out[static_cast<std::size_t>(i * O + j)] =
          s / (na[static_cast<std::size_t>(i)] * nb[static_cast<std::size_t>(j)]);
    }
  }
  auto node = make_node({N, O}, std::move(out), {a.node(), b.node()});
  TensorNode* self = node.get();
  auto pa = a.node();
  auto pb = b.node();
  return finish(node, [self, pa, pb, na, nb, N, D, O]() {
    if (pa->requires_grad) pa->ensure_grad();
    if (pb->requires_grad) pb->ensure_grad();
    // dC_{ij}/da_i = (b_j/|b_j| - C_{ij} a_i/|a_i|) / |a_i|, symmetric for b
    for (std::int64_t i = 0; i < N; ++i) {
      const double* ra = pa->data.data() + i * D;
      const double nai = na[static_cast<std::size_t>(i)];
      for (std::int64_t j = 0; j < O; ++j) {
        const double g = self->grad[static_cast<std::size_t>(i * O + j)];
        if (g == 0.0) continue;
        const double* rb = pb->data.data() + j * D;
        const double nbj = nb[static_cast<std::size_t>(j)];
        const double cij = self->data[static_cast<std::size_t>(i * O + j)];
        if (pa->requires_grad) {
          double* da = pa->grad.data() + i * D;
          for (std::int64_t d = 0; d < D; ++d)
            da[d] += g * (rb[d] / nbj - cij * ra[d] / nai) / nai;
        }
        if (pb->requires_grad) {
          double* db = pb->grad.data() + j * D;
          for (std::int64_t d = 0; d < D; ++d)
            db[d] += g * (ra[d] / nai - cij * rb[d] / nbj) / nbj;
        }
      }
    }
  });
}

Tensor gradient_reversal(const Tensor& x) {
  auto node = make_node(x.shape(), x.data(), {x.node()});
  TensorNode* self = node.get();
  auto px = x.node();
  return finish(node, [self, px]() {
    px->ensure_grad();
    for (std::size_t i = 0; i < self->grad.size(); ++i)
      px->grad[i] -= self->grad[i];
  });
}

// ---- fused losses --------------------------------------------------------

namespace {

void check_labels(const std::vector<int>& labels, std::int64_t N,
                  std::int64_t O, const char* op) {
  require(static_cast<std::int64_t>(labels.size()) == N,
          std::string(op) + ": label count does not match batch size");
  for (std::size_t i = 0; i < labels.size(); ++i)
    require(labels[i] >= 0 && labels[i] < O,
            std::string(op) + ": label out of range at index " +
                std::to_string(i) + ": " + std::to_string(labels[i]));
}

}  // namespace

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  require(logits.ndim() == 2,
          "cross_entropy: expects rank-2 logits, got " + shape_str(logits.shape()));
  const std::int64_t N = logits.dim(0), O = logits.dim(1);
  check_labels(labels, N, O, "cross_entropy");
  auto probs = std::make_shared<std::vector<double>>(logits.data().size());
  double loss = 0.0;
  for (std::int64_t i = 0; i < N; ++i) {
    const double* r = logits.data().data() + i * O;
    double* p = probs->data() + i * O;
    double mx = r[0];
    for (std::int64_t j = 1; j < O; ++j) mx = std::max(mx, r[j]);
    double s = 0.0;
    for (std::int64_t j = 0; j < O; ++j) {
      p[j] = std::exp(r[j] - mx);
      s += p[j];
    }
    for (std::int64_t j = 0; j < O; ++j) p[j] /= s;
    loss -= (r[labels[static_cast<std::size_t>(i)]] - mx) - std::log(s);
  }
  loss /= static_cast<double>(N);
  auto node = make_node({1}, {loss}, {logits.node()});
  TensorNode* self = node.get();
  auto px = logits.node();
  return finish(node, [self, px, probs, labels, N, O]() {
    px->ensure_grad();
    const double g = self->grad[0] / static_cast<double>(N);
    for (std::int64_t i = 0; i < N; ++i) {
      const double* p = probs->data() + i * O;
      double* d = px->grad.data() + i * O;
      for (std::int64_t j = 0; j < O; ++j) d[j] += g * p[j];
      d[labels[static_cast<std::size_t>(i)]] -= g;
    }
  });
}

Tensor arcface_loss(const Tensor& cosphi, const std::vector<int>& labels,
                    double margin, double s) {
  require(cosphi.ndim() == 2,
          "arcface_loss: expects rank-2 cos matrix, got " + shape_str(cosphi.shape()));
  const std::int64_t N = cosphi.dim(0), O = cosphi.dim(1);
  check_labels(labels, N, O, "arcface_loss");
  const double cm = std::cos(margin), sm = std::sin(margin);
  const double clamp = 1.0 - 1e-7;

  // margined logits: s*cos(phi_j) off the true class, s*cos(phi_y + m) on it
  auto probs = std::make_shared<std::vector<double>>(cosphi.data().size());
  auto dlog = std::make_shared<std::vector<double>>(cosphi.data().size());
  double loss = 0.0;
  for (std::int64_t i = 0; i < N; ++i) {
    const double* c = cosphi.data().data() + i * O;
    const int y = labels[static_cast<std::size_t>(i)];
    std::vector<double> t(static_cast<std::size_t>(O));
    for (std::int64_t j = 0; j < O; ++j) {
      double cj = std::clamp(c[j], -clamp, clamp);
      if (j == y) {
        const double sphi = std::sqrt(1.0 - cj * cj);
        t[static_cast<std::size_t>(j)] = s * (cj * cm - sphi * sm);
        // d(cos(phi+m))/d(cos phi) = cos m + cos phi * sin m / sin phi
        (*dlog)[static_cast<std::size_t>(i * O + j)] =
            (c[j] > -clamp && c[j] < clamp) ? s * (cm + cj * sm / sphi) : 0.0;
      } else {
        t[static_cast<std::size_t>(j)] = s * cj;
        (*dlog)[static_cast<std::size_t>(i * O + j)] =
            (c[j] > -clamp && c[j] < clamp) ? s : 0.0;
      }
    }
    double mx = t[0];
    for (std::int64_t j = 1; j < O; ++j) mx = std::max(mx, t[static_cast<std::size_t>(j)]);
    double z = 0.0;
    double* p = probs->data() + i * O;
    for (std::int64_t j = 0; j < O; ++j) {
      p[j] = std::exp(t[static_cast<std::size_t>(j)] - mx);
      z += p[j];
    }
    for (std::int64_t j = 0; j < O; ++j) p[j] /= z;
    loss -= (t[static_cast<std::size_t>(y)] - mx) - std::log(z);
  }
  loss /= static_cast<double>(N);
  auto node = make_node({1}, {loss}, {cosphi.node()});
  TensorNode* self = node.get();
  auto px = cosphi.node();
  return finish(node, [self, px, probs, dlog, labels, N, O]() {
    px->ensure_grad();
    const double g = self->grad[0] / static_cast<double>(N);
    for (std::int64_t i = 0; i < N; ++i) {
      const double* p = probs->data() + i * O;
      const int y = labels[static_cast<std::size_t>(i)];
      double* d = px->grad.data() + i * O;
      for (std::int64_t j = 0; j < O; ++j) {
        const double sm = p[j] - (j == y ? 1.0 : 0.0);
        d[j] += g * sm * (*dlog)[static_cast<std::size_t>(i * O + j)];
      }
    }
  });
}

Tensor js_divergence(const Tensor& p, const Tensor& q) {
  require(p.ndim() == 2 && q.ndim() == 2, "js_divergence: expects rank-2 inputs");
  if (p.shape() != q.shape()) shape_error("js_divergence", p.shape(), q.shape());
  const std::int64_t N = p.dim(0), O = p.dim(1);
  for (std::int64_t i = 0; i < N; ++i) {
    double sp = 0.0, sq = 0.0;
    for (std::int64_t j = 0; j < O; ++j) {
      const double pv = p.data()[static_cast<std::size_t>(i * O + j)];
      const double qv = q.data()[static_cast<std::size_t>(i * O + j)];
      require(pv >= 0.0 && qv >= 0.0,
              "js_divergence: negative entry in row " + std::to_string(i));
      sp += pv;
      sq += qv;
    }
    require(std::abs(sp - 1.0) <= 1e-6 && std::abs(sq - 1.0) <= 1e-6,
            "js_divergence: row " + std::to_string(i) + " does not sum to 1");
  }
  constexpr double tiny = 1e-300;  // 0*log 0 := 0
  double loss = 0.0;
  for (std::int64_t i = 0; i < N * O; ++i) {
    const double pv = p.data()[static_cast<std::size_t>(i)];
    const double qv = q.data()[static_cast<std::size_t>(i)];
    const double mv = 0.5 * (pv + qv);
    // both contributions join through one commutative addition so swapping
    // the arguments gives a bitwise identical total
    double term = 0.0;
    if (pv > tiny) term += 0.5 * pv * std::log(pv / mv);
    if (qv > tiny) term += 0.5 * qv * std::log(qv / mv);
    loss += term;
  }
  loss /= static_cast<double>(N);
  auto node = make_node({1}, {loss}, {p.node(), q.node()});
  TensorNode* self = node.get();
  auto pp = p.node();
  auto pq = q.node();
  return finish(node, [self, pp, pq, N, O]() {
    if (pp->requires_grad) pp->ensure_grad();
    if (pq->requires_grad) pq->ensure_grad();
    const double g = self->grad[0] / static_cast<double>(N);
    constexpr double tiny = 1e-300;
    for (std::int64_t i = 0; i < N * O; ++i) {
      const double pv = std::max(pp->data[static_cast<std::size_t>(i)], tiny);
      const double qv = std::max(pq->data[static_cast<std::size_t>(i)], tiny);
      const double mv = 0.5 * (pv + qv);
      if (pp->requires_grad)
        pp->grad[static_cast<std::size_t>(i)] += g * 0.5 * std::log(pv / mv);
      if (pq->requires_grad)
        pq->grad[static_cast<std::size_t>(i)] += g * 0.5 * std::log(qv / mv);
    }
  });
}

}  // namespace abra
