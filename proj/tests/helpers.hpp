#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "abra/tensor.hpp"

namespace testutil {

// Central finite differences against the recorded gradient of `leaf`.
// `make_loss` must rebuild the scalar loss from the leaf's current data.
// Scaled tolerance: |fd - g| <= tol * max(1, |fd|, |g|).
inline void check_gradient(const std::function<abra::Tensor()>& make_loss,
                           abra::Tensor leaf, double tol = 1e-3,
                           double h = 1e-3) {
  leaf.zero_grad();
  abra::backward(make_loss());
  REQUIRE(leaf.has_grad());
  const std::vector<double> grad = leaf.grad();
  auto& data = leaf.data();
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double saved = data[i];
    data[i] = saved + h;
    const double lp = make_loss().item();
    data[i] = saved - h;
    const double lm = make_loss().item();
    data[i] = saved;
    const double fd = (lp - lm) / (2.0 * h);
    const double scale = std::max({1.0, std::fabs(fd), std::fabs(grad[i])});
    INFO("element ", i, ": fd=", fd, " analytic=", grad[i]);
    CHECK(std::fabs(fd - grad[i]) <= tol * scale);
  }
}

inline abra::Tensor random_tensor(abra::Shape shape, std::mt19937_64& eng,
                                  bool requires_grad = true, double lo = -1.0,
                                  double hi = 1.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  std::vector<double> v(static_cast<std::size_t>(abra::numel_of(shape)));
  for (auto& x : v) x = d(eng);
  return abra::Tensor::from_data(std::move(shape), std::move(v), requires_grad);
}

// rows sum to one, strictly positive
inline abra::Tensor random_rows_simplex(std::int64_t n, std::int64_t k,
                                        std::mt19937_64& eng) {
  std::uniform_real_distribution<double> d(0.05, 1.0);
  std::vector<double> v(static_cast<std::size_t>(n * k));
  for (std::int64_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::int64_t j = 0; j < k; ++j) {
      v[static_cast<std::size_t>(i * k + j)] = d(eng);
      s += v[static_cast<std::size_t>(i * k + j)];
    }
    for (std::int64_t j = 0; j < k; ++j)
      v[static_cast<std::size_t>(i * k + j)] /= s;
  }
  return abra::Tensor::from_data({n, k}, std::move(v), false);
}

inline std::vector<int> random_labels(std::int64_t n, int classes,
                                      std::mt19937_64& eng) {
  std::uniform_int_distribution<int> d(0, classes - 1);
  std::vector<int> v(static_cast<std::size_t>(n));
  for (auto& x : v) x = d(eng);
  return v;
}

// ---- independent naive oracles -------------------------------------------

// direct quadruple-loop convolution, stride 1
inline std::vector<double> conv2d_oracle(const std::vector<double>& x,
                                         const std::vector<double>& w,
                                         std::int64_t N, std::int64_t C,
                                         std::int64_t H, std::int64_t W,
                                         std::int64_t O, std::int64_t k,
                                         std::int64_t pad) {
  const std::int64_t OH = H + 2 * pad - k + 1, OW = W + 2 * pad - k + 1;
  std::vector<double> out(static_cast<std::size_t>(N * O * OH * OW), 0.0);
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t o = 0; o < O; ++o)
      for (std::int64_t oh = 0; oh < OH; ++oh)
        for (std::int64_t ow = 0; ow < OW; ++ow) {
          double acc = 0.0;
          for (std::int64_t c = 0; c < C; ++c)
            for (std::int64_t i = 0; i < k; ++i)
              for (std::int64_t j = 0; j < k; ++j) {
                const std::int64_t ih = oh + i - pad, iw = ow + j - pad;
                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                acc += x[static_cast<std::size_t>(((n * C + c) * H + ih) * W + iw)] *
                       w[static_cast<std::size_t>(((o * C + c) * k + i) * k + j)];
              }
          out[static_cast<std::size_t>(((n * O + o) * OH + oh) * OW + ow)] = acc;
        }
  return out;
}

// sequential two-pass per-channel moments over (n, h, w)
inline void batch_stats_oracle(const std::vector<double>& x, std::int64_t N,
                               std::int64_t C, std::int64_t H, std::int64_t W,
                               std::vector<double>& mu,
                               std::vector<double>& sigma2) {
  mu.assign(static_cast<std::size_t>(C), 0.0);
  sigma2.assign(static_cast<std::size_t>(C), 0.0);
  const double cnt = static_cast<double>(N * H * W);
  for (std::int64_t c = 0; c < C; ++c) {
    double s = 0.0;
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t h = 0; h < H; ++h)
        for (std::int64_t w = 0; w < W; ++w)
          s += x[static_cast<std::size_t>(((n * C + c) * H + h) * W + w)];
    mu[static_cast<std::size_t>(c)] = s / cnt;
    double ss = 0.0;
    for (std::int64_t n = 0; n < N; ++n)
      for (std::int64_t h = 0; h < H; ++h)
        for (std::int64_t w = 0; w < W; ++w) {
          const double d =
              x[static_cast<std::size_t>(((n * C + c) * H + h) * W + w)] -
              mu[static_cast<std::size_t>(c)];
          ss += d * d;
        }
    sigma2[static_cast<std::size_t>(c)] = ss / cnt;
  }
}

// mean over rows of -log softmax probability of the label
inline double cross_entropy_oracle(const std::vector<double>& logits,
                                   const std::vector<int>& labels,
                                   std::int64_t n, std::int64_t k) {
  double total = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    double mx = logits[static_cast<std::size_t>(i * k)];
    for (std::int64_t j = 1; j < k; ++j)
      mx = std::max(mx, logits[static_cast<std::size_t>(i * k + j)]);
    double z = 0.0;
    for (std::int64_t j = 0; j < k; ++j)
      z += std::exp(logits[static_cast<std::size_t>(i * k + j)] - mx);
    const double lp =
        logits[static_cast<std::size_t>(
            i * k + labels[static_cast<std::size_t>(i)])] -
        mx - std::log(z);
    total -= lp;
  }
  return total / static_cast<double>(n);
}

// 0.5 KL(p||m) + 0.5 KL(q||m), m = (p+q)/2, mean over rows
inline double js_oracle(const std::vector<double>& p,
                        const std::vector<double>& q, std::int64_t n,
                        std::int64_t k) {
  double total = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    double row = 0.0;
    for (std::int64_t j = 0; j < k; ++j) {
      const double pi = p[static_cast<std::size_t>(i * k + j)];
      const double qi = q[static_cast<std::size_t>(i * k + j)];
      const double mi = 0.5 * (pi + qi);
      if (pi > 0.0) row += 0.5 * pi * std::log(pi / mi);
      if (qi > 0.0) row += 0.5 * qi * std::log(qi / mi);
    }
    total += row;
  }
  return total / static_cast<double>(n);
}

}  // namespace testutil
