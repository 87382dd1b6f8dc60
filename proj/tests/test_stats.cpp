#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <random>

#include "abra/stats.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace abra;
using testutil::check_gradient;
using testutil::random_tensor;

TEST_CASE("batch stats: constant input and two-point example") {
  Tensor c = Tensor::full({2, 3, 2, 2}, 3.0);
  BatchStats st = batch_channel_stats(c);
  for (int i = 0; i < 3; ++i) {
    CHECK(st.mu.data()[static_cast<std::size_t>(i)] == doctest::Approx(3.0));
    CHECK(st.sigma2.data()[static_cast<std::size_t>(i)] ==
          doctest::Approx(0.0).epsilon(1e-15));
  }

  Tensor two = Tensor::from_data({1, 1, 1, 2}, {1.0, 3.0});
  BatchStats st2 = batch_channel_stats(two);
  CHECK(st2.mu.data()[0] == doctest::Approx(2.0));
  CHECK(st2.sigma2.data()[0] == doctest::Approx(1.0));  // biased variance
}

TEST_CASE("batch stats match the sequential two-pass oracle") {
  for (int seed = 0; seed < 20; ++seed) {
    std::mt19937_64 eng(static_cast<std::uint64_t>(seed));
    Tensor x = random_tensor({8, 4, 5, 5}, eng, false, -2.0, 2.0);
    BatchStats st = batch_channel_stats(x);
    std::vector<double> mu, sigma2;
    testutil::batch_stats_oracle(x.data(), 8, 4, 5, 5, mu, sigma2);
    for (int c = 0; c < 4; ++c) {
      const auto i = static_cast<std::size_t>(c);
      CHECK(std::fabs(st.mu.data()[i] - mu[i]) <=
            1e-12 * std::max(1.0, std::fabs(mu[i])));
      CHECK(std::fabs(st.sigma2.data()[i] - sigma2[i]) <=
            1e-12 * std::max(1.0, std::fabs(sigma2[i])));
      CHECK(st.sigma2.data()[i] >= 0.0);
    }
  }
}

TEST_CASE("batch stats are differentiable") {
  for (int seed = 0; seed < 5; ++seed) {
    std::mt19937_64 eng(50 + static_cast<std::uint64_t>(seed));
    Tensor x = random_tensor({2, 2, 3, 3}, eng);
    check_gradient([&] { return mean_all(batch_channel_stats(x).mu); }, x);
    check_gradient([&] { return mean_all(batch_channel_stats(x).sigma2); }, x);
  }
}

TEST_CASE("instance stats: constants, symmetry and mean identity") {
  Tensor c = Tensor::full({2, 2, 3, 3}, 1.5);
  InstanceStats st = instance_channel_stats(c);
  CHECK(st.mu.shape() == Shape{2, 2});
  for (double v : st.mu.data()) CHECK(v == doctest::Approx(1.5));
  for (double v : st.sigma2.data()) CHECK(v == doctest::Approx(0.0).epsilon(1e-15));

  // batch of identical images: rows equal across n
  std::mt19937_64 eng(1);
  Tensor one = random_tensor({1, 3, 4, 4}, eng, false);
  std::vector<double> rep = one.data();
  rep.insert(rep.end(), one.data().begin(), one.data().end());
  Tensor both = Tensor::from_data({2, 3, 4, 4}, std::move(rep));
  InstanceStats sb = instance_channel_stats(both);
  for (int c = 0; c < 3; ++c)
    CHECK(sb.mu.data()[static_cast<std::size_t>(c)] ==
          doctest::Approx(sb.mu.data()[static_cast<std::size_t>(3 + c)])
              .epsilon(1e-15));

  // mean over n of instance means equals the batch mean
  Tensor x = random_tensor({4, 3, 5, 5}, eng, false);
  InstanceStats si = instance_channel_stats(x);
  BatchStats bs = batch_channel_stats(x);
  for (int c = 0; c < 3; ++c) {
    double m = 0.0;
    for (int n = 0; n < 4; ++n)
      m += si.mu.data()[static_cast<std::size_t>(n * 3 + c)];
    m /= 4.0;
    CHECK(std::fabs(m - bs.mu.data()[static_cast<std::size_t>(c)]) <= 1e-12);
  }
}

TEST_CASE("bn_transform standardizes and inverts") {
  std::mt19937_64 eng(2);
  Tensor x = random_tensor({4, 3, 5, 5}, eng, false, -2.0, 3.0);
  BatchStats st = batch_channel_stats(x);
  Tensor ones = Tensor::full({3}, 1.0);
  Tensor zeros = Tensor::zeros({3});

  Tensor y = bn_transform(x, st, ones, zeros);
  BatchStats sy = batch_channel_stats(y);
  for (int c = 0; c < 3; ++c) {
    CHECK(std::fabs(sy.mu.data()[static_cast<std::size_t>(c)]) <= 1e-6);
    CHECK(sy.sigma2.data()[static_cast<std::size_t>(c)] ==
          doctest::Approx(1.0).epsilon(1e-4));
  }

  // gamma = sigma(x), beta = mu(x), eps = 0 recovers x
  std::vector<double> sig(3);
  for (int c = 0; c < 3; ++c)
    sig[static_cast<std::size_t>(c)] =
        std::sqrt(st.sigma2.data()[static_cast<std::size_t>(c)]);
  Tensor inv = bn_transform(x, st, Tensor::from_data({3}, sig), st.mu, 0.0);
  for (std::size_t i = 0; i < x.data().size(); ++i)
    CHECK(std::fabs(inv.data()[i] - x.data()[i]) <= 1e-10);
}

TEST_CASE("bn_transform gradient check") {
  for (int seed = 0; seed < 10; ++seed) {
    std::mt19937_64 eng(100 + static_cast<std::uint64_t>(seed));
    Tensor x = random_tensor({2, 2, 3, 3}, eng);
    Tensor gamma = random_tensor({2}, eng, true, 0.5, 1.5);
    Tensor beta = random_tensor({2}, eng);
    Tensor w = random_tensor({2, 2, 3, 3}, eng, false);
    auto loss = [&] {
      return mean_all(
          mul(bn_transform(x, batch_channel_stats(x), gamma, beta), w));
    };
    check_gradient(loss, x);
    check_gradient(loss, gamma);
    check_gradient(loss, beta);
  }
}

TEST_CASE("adain_renormalize: zero deltas, pure shift, formula oracle") {
  std::mt19937_64 eng(3);
  Tensor x = random_tensor({2, 3, 4, 4}, eng, false, -1.0, 2.0);
  Tensor zero = Tensor::zeros({2, 3});

  Tensor same = adain_renormalize(x, zero, zero);
  for (std::size_t i = 0; i < x.data().size(); ++i)
    CHECK(std::fabs(same.data()[i] - x.data()[i]) <= 1e-10);

  Tensor d = Tensor::full({2, 3}, 0.7);
  Tensor shifted = adain_renormalize(x, d, zero);
  for (std::size_t i = 0; i < x.data().size(); ++i)
    CHECK(shifted.data()[i] == doctest::Approx(x.data()[i] + 0.7).epsilon(1e-12));

  // direct re-evaluation of the textbook form
  Tensor dmu = random_tensor({2, 3}, eng, false);
  Tensor dsig = random_tensor({2, 3}, eng, false);
  Tensor out = adain_renormalize(x, dmu, dsig);
  InstanceStats st = instance_channel_stats(x);
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 3; ++c) {
      const auto nc = static_cast<std::size_t>(n * 3 + c);
      const double mu = st.mu.data()[nc];
      const double sigma =
          std::max(std::sqrt(st.sigma2.data()[nc]), kStatsEps);
      for (int hw = 0; hw < 16; ++hw) {
        const auto i = static_cast<std::size_t>((n * 3 + c) * 16 + hw);
        const double expect = (sigma + dsig.data()[nc]) *
                                  (x.data()[i] - mu) / sigma +
                              (mu + dmu.data()[nc]);
        CHECK(std::fabs(out.data()[i] - expect) <= 1e-10);
      }
    }
}

TEST_CASE("adain_renormalize gradient check") {
  for (int seed = 0; seed < 10; ++seed) {
    std::mt19937_64 eng(200 + static_cast<std::uint64_t>(seed));
    Tensor x = random_tensor({2, 2, 3, 3}, eng, true, -1.0, 2.0);
    Tensor dmu = random_tensor({2, 2}, eng, true, -0.3, 0.3);
    Tensor dsig = random_tensor({2, 2}, eng, true, -0.2, 0.2);
    Tensor w = random_tensor({2, 2, 3, 3}, eng, false);
    auto loss = [&] { return mean_all(mul(adain_renormalize(x, dmu, dsig), w)); };
    check_gradient(loss, x, 2e-3);
    check_gradient(loss, dmu);
    check_gradient(loss, dsig);
  }
}

TEST_CASE("clamp_min floors values and passes gradient above the floor") {
  Tensor v = Tensor::from_data({4}, {-1.0, 0.0, 0.5, 2.0}, true);
  Tensor c = clamp_min(v, 0.25);
  CHECK(c.data()[0] == 0.25);
  CHECK(c.data()[1] == 0.25);
  CHECK(c.data()[2] == 0.5);
  CHECK(c.data()[3] == 2.0);
  v.zero_grad();
  backward(sum_all(c));
  CHECK(v.grad()[0] == 0.0);
  CHECK(v.grad()[1] == 0.0);
  CHECK(v.grad()[2] == 1.0);
  CHECK(v.grad()[3] == 1.0);
}
