// Acceptance harness: one pass/fail line per criterion, nonzero exit on any
// failure. Heavier criteria reuse one shared desk-scale dataset and model
// pool; everything is seeded and single-threaded.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <vector>

// the shared test helpers are written against doctest's macros; here they
// only need to compile (the harness uses its own bookkeeping)
#define REQUIRE(x) \
  do {             \
    if (!(x)) throw std::runtime_error("requirement failed: " #x); \
  } while (0)
#define CHECK(x) REQUIRE(x)
#define INFO(...) (void)0

#include "abra/checkpoint.hpp"
#include "abra/data.hpp"
#include "abra/losses.hpp"
#include "abra/model.hpp"
#include "abra/optim.hpp"
#include "abra/stats.hpp"
#include "abra/tensor.hpp"
#include "abra/train.hpp"
#include "abra/uncertainty.hpp"
#include "helpers.hpp"

using namespace abra;
using testutil::random_labels;
using testutil::random_tensor;

namespace {

using Clock = std::chrono::steady_clock;

int g_failures = 0;
std::vector<int> g_only;  // empty = run everything

void run_criterion(int number, const std::string& name,
                   const std::function<bool(std::string&)>& body) {
  if (!g_only.empty() &&
      std::find(g_only.begin(), g_only.end(), number) == g_only.end())
    return;
  std::string detail;
  bool ok = false;
  const auto t0 = Clock::now();
  try {
    ok = body(detail);
  } catch (const std::exception& e) {
    detail = std::string("exception: ") + e.what();
  }
  const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
  if (!ok) ++g_failures;
  std::printf("criterion %2d %-24s %s  (%.1f s)%s%s\n", number, name.c_str(),
              ok ? "PASS" : "FAIL", secs, detail.empty() ? "" : "  ",
              detail.c_str());
  std::fflush(stdout);
}

// ---- finite differences ---------------------------------------------------

// max scaled error |fd - g| / max(1, |fd|, |g|) over every element of `leaf`
double fd_error(const std::function<Tensor()>& make_loss, Tensor leaf,
                double h = 1e-3) {
  leaf.zero_grad();
  backward(make_loss());
  const std::vector<double> grad = leaf.grad();
  auto& data = leaf.data();
  double worst = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const double saved = data[i];
    data[i] = saved + h;
    const double lp = make_loss().item();
    data[i] = saved - h;
    const double lm = make_loss().item();
    data[i] = saved;
    const double fd = (lp - lm) / (2.0 * h);
    const double scale = std::max({1.0, std::fabs(fd), std::fabs(grad[i])});
    worst = std::max(worst, std::fabs(fd - grad[i]) / scale);
  }
  return worst;
}

// ---- shared desk-scale artifacts ------------------------------------------

const PlateDataset& desk_dataset() {
  static PlateDataset ds = generate(PlateSpec{}, 100);  // 6 train + 2 test
  return ds;
}

TrainConfig desk_config(Method m, std::uint64_t seed) {
  TrainConfig cfg;
  cfg.method = m;
  cfg.epochs = 20;
  cfg.batch_size = 32;
  cfg.sites = {-1, 0};
  cfg.ascent_lr = 0.05;
  cfg.k_clamp = 0.25;
  cfg.augment = false;  // the smooth prototypes are not flip-invariant
  cfg.seed = seed;
  return cfg;
}

double test_accuracy(Backbone& model, const PlateDataset& ds, EvalMode mode) {
  return evaluate(model, ds, ds.test_plate_indices(), mode).total_accuracy;
}

// the five baseline models are shared between criteria 7 and 8
std::vector<TrainResult>& erm_pool() {
  static std::vector<TrainResult> pool = [] {
    std::vector<TrainResult> v;
    for (std::uint64_t seed = 1; seed <= 5; ++seed)
      v.push_back(train(desk_dataset(), desk_config(Method::Erm, seed)));
    return v;
  }();
  return pool;
}

// ---- criteria -------------------------------------------------------------

bool criterion_gradients(std::string& detail) {
  const double tol = 1e-3;
  double worst = 0.0;
  std::string worst_op;
  auto track = [&](const char* op, double err) {
    if (err > worst) {
      worst = err;
      worst_op = op;
    }
  };

  for (int seed = 0; seed < 10; ++seed) {
    std::mt19937_64 eng(static_cast<std::uint64_t>(seed));

    Tensor cx = random_tensor({2, 2, 4, 4}, eng);
    Tensor cw = random_tensor({3, 2, 3, 3}, eng);
    track("conv2d/x", fd_error([&] { return mean_all(conv2d(cx, cw, 1, 1)); }, cx));
    track("conv2d/w", fd_error([&] { return mean_all(conv2d(cx, cw, 1, 1)); }, cw));

    Tensor lx = random_tensor({3, 4}, eng);
    Tensor lw = random_tensor({5, 4}, eng);
    Tensor lb = random_tensor({5}, eng);
    auto lin = [&] { return mean_all(linear(lx, lw, lb)); };
    track("linear/x", fd_error(lin, lx));
    track("linear/w", fd_error(lin, lw));
    track("linear/b", fd_error(lin, lb));

    Tensor bx = random_tensor({2, 2, 3, 3}, eng);
    Tensor gamma = random_tensor({2}, eng, true, 0.5, 1.5);
    Tensor beta = random_tensor({2}, eng);
    Tensor bw = random_tensor({2, 2, 3, 3}, eng, false);
    auto bn = [&] {
      return mean_all(mul(bn_transform(bx, batch_channel_stats(bx), gamma, beta), bw));
    };
    track("bn/x", fd_error(bn, bx));
    track("bn/gamma", fd_error(bn, gamma));
    track("bn/beta", fd_error(bn, beta));

    Tensor ax = random_tensor({2, 2, 3, 3}, eng, true, -1.0, 2.0);
    Tensor admu = random_tensor({2, 2}, eng, true, -0.3, 0.3);
    Tensor adsg = random_tensor({2, 2}, eng, true, -0.2, 0.2);
    Tensor aw = random_tensor({2, 2, 3, 3}, eng, false);
    auto adain = [&] {
      return mean_all(mul(adain_renormalize(ax, admu, adsg), aw));
    };
    track("adain/x", fd_error(adain, ax));
    track("adain/dmu", fd_error(adain, admu));
    track("adain/dsigma", fd_error(adain, adsg));

    UncertaintySite site;
    site.init(0, 2);
    RngStream noise(900 + static_cast<std::uint64_t>(seed), "noise");
    site.sample_noise(noise);
    for (auto& k : site.k_mu.data()) k = 0.1;
    for (auto& k : site.k_sigma.data()) k = 0.1;
    Tensor px = random_tensor({2, 2, 3, 3}, eng, true, -1.0, 2.0);
    Tensor pw = random_tensor({2, 2, 3, 3}, eng, false);
    auto pert = [&] { return mean_all(mul(abra_transform(px, site), pw)); };
    track("perturb/k_mu", fd_error(pert, site.k_mu));
    track("perturb/k_sigma", fd_error(pert, site.k_sigma));
    track("perturb/x", fd_error(pert, px));

    Tensor logits = random_tensor({4, 5}, eng, true, -2.0, 2.0);
    auto labels = random_labels(4, 5, eng);
    track("ce", fd_error([&] { return cross_entropy(logits, labels); }, logits));

    Tensor cosphi = random_tensor({4, 5}, eng, true, -0.8, 0.8);
    track("arcface",
          fd_error([&] { return arcface_loss(cosphi, labels, 0.2, 16.0); },
                   cosphi, 1e-4));

    Tensor z = random_tensor({3, 4}, eng, true, -1.0, 1.0);
    Tensor q = testutil::random_rows_simplex(3, 4, eng);
    track("js", fd_error([&] { return js_divergence(softmax_rows(z), q); }, z,
                         1e-4));
  }

  std::ostringstream os;
  os << "worst " << worst_op << " rel err " << worst;
  detail = os.str();
  return worst < tol;
}

bool criterion_identities(std::string& detail) {
  std::mt19937_64 eng(21);

  // zero-K perturbation is the identity
  Tensor x = random_tensor({4, 3, 5, 5}, eng, false, -2.0, 2.0);
  UncertaintySite site;
  site.init(0, 3);
  RngStream noise(5, "noise");
  site.sample_noise(noise);
  Tensor xt = abra_transform(x, site);
  for (std::size_t i = 0; i < x.data().size(); ++i)
    if (std::fabs(xt.data()[i] - x.data()[i]) > 1e-10) {
      detail = "zero-K transform moved the input";
      return false;
    }

  // m = 0 angular loss equals CE on scaled cosines
  for (int seed = 0; seed < 10; ++seed) {
    std::mt19937_64 e2(100 + static_cast<std::uint64_t>(seed));
    Tensor cosphi = random_tensor({5, 4}, e2, false, -0.9, 0.9);
    auto labels = random_labels(5, 4, e2);
    const double arc = arcface_loss(cosphi, labels, 0.0, 16.0).item();
    std::vector<double> scaled = cosphi.data();
    for (auto& v : scaled) v *= 16.0;
    const double ce =
        cross_entropy(Tensor::from_data({5, 4}, std::move(scaled)), labels).item();
    if (std::fabs(arc - ce) > 1e-12 * std::max(1.0, std::fabs(ce))) {
      detail = "m=0 angular loss differs from CE";
      return false;
    }
  }

  // JS identity, bound, bitwise symmetry
  Tensor p = testutil::random_rows_simplex(6, 5, eng);
  Tensor q = testutil::random_rows_simplex(6, 5, eng);
  if (js_divergence(p, p).item() != 0.0 ||
      js_divergence(p, q).item() > std::log(2.0) ||
      js_divergence(p, q).item() != js_divergence(q, p).item()) {
    detail = "JS identity/bound/symmetry violated";
    return false;
  }

  // AdaIN with zero deltas is the identity
  Tensor zero = Tensor::zeros({4, 3});
  Tensor same = adain_renormalize(x, zero, zero);
  for (std::size_t i = 0; i < x.data().size(); ++i)
    if (std::fabs(same.data()[i] - x.data()[i]) > 1e-10) {
      detail = "zero-delta AdaIN moved the input";
      return false;
    }
  return true;
}

bool criterion_oracles(std::string& detail) {
  double worst = 0.0;
  std::string worst_op;
  auto track = [&](const char* op, double got, double ref) {
    const double err = std::fabs(got - ref) / std::max(1.0, std::fabs(ref));
    if (err > worst) {
      worst = err;
      worst_op = op;
    }
  };

  for (int seed = 0; seed < 20; ++seed) {
    std::mt19937_64 eng(300 + static_cast<std::uint64_t>(seed));

    Tensor sx = random_tensor({8, 4, 5, 5}, eng, false, -2.0, 2.0);
    BatchStats st = batch_channel_stats(sx);
    std::vector<double> mu, sigma2;
    testutil::batch_stats_oracle(sx.data(), 8, 4, 5, 5, mu, sigma2);
    for (int c = 0; c < 4; ++c) {
      track("batch_mu", st.mu.data()[static_cast<std::size_t>(c)],
            mu[static_cast<std::size_t>(c)]);
      track("batch_var", st.sigma2.data()[static_cast<std::size_t>(c)],
            sigma2[static_cast<std::size_t>(c)]);
    }

    // instance stats against per-image two-pass loops
    InstanceStats ist = instance_channel_stats(sx);
    for (int n = 0; n < 8; ++n)
      for (int c = 0; c < 4; ++c) {
        double s = 0.0;
        const double* img = sx.data().data() + (n * 4 + c) * 25;
        for (int i = 0; i < 25; ++i) s += img[i];
        const double m = s / 25.0;
        double ss = 0.0;
        for (int i = 0; i < 25; ++i) ss += (img[i] - m) * (img[i] - m);
        track("inst_mu", ist.mu.data()[static_cast<std::size_t>(n * 4 + c)], m);
        track("inst_var",
              ist.sigma2.data()[static_cast<std::size_t>(n * 4 + c)], ss / 25.0);
      }

    Tensor cx = random_tensor({2, 3, 5, 5}, eng, false);
    Tensor cw = random_tensor({4, 3, 3, 3}, eng, false);
    Tensor cy = conv2d(cx, cw, 1, 1);
    auto ref = testutil::conv2d_oracle(cx.data(), cw.data(), 2, 3, 5, 5, 4, 3, 1);
    for (std::size_t i = 0; i < ref.size(); ++i)
      track("conv2d", cy.data()[i], ref[i]);

    Tensor logits = random_tensor({6, 5}, eng, false, -3.0, 3.0);
    auto labels = random_labels(6, 5, eng);
    track("ce", cross_entropy(logits, labels).item(),
          testutil::cross_entropy_oracle(logits.data(), labels, 6, 5));

    Tensor p = testutil::random_rows_simplex(4, 6, eng);
    Tensor q = testutil::random_rows_simplex(4, 6, eng);
    track("js", js_divergence(p, q).item(),
          testutil::js_oracle(p.data(), q.data(), 4, 6));
  }

  std::ostringstream os;
  os << "worst " << worst_op << " rel err " << worst;
  detail = os.str();
  return worst <= 1e-12;
}

bool criterion_phase_discipline(std::string& detail) {
  BackboneConfig mcfg;
  mcfg.in_channels = 2;
  mcfg.blocks = {{6, true}, {8, true}};
  mcfg.feature_dim = 6;
  mcfg.num_classes = 4;
  Backbone model(mcfg);
  RngStream init(11, "init");
  model.init(init);
  auto params = model.parameters();

  std::mt19937_64 eng(12);
  Tensor x = random_tensor({8, 2, 8, 8}, eng, false, -1.0, 2.0);
  auto labels = random_labels(8, 4, eng);
  LossConfig lcfg;
  lcfg.num_classes = 4;

  UncertaintySite site;
  site.init(-1, 2);
  RngStream noise(13, "noise");
  AdamOptimizer opt(params, 1e-3, 0.0, 1);

  auto theta_copy = [&] {
    std::vector<std::vector<double>> v;
    for (auto& p : params) v.push_back(p.tensor.data());
    return v;
  };
  auto theta_grads_zero = [&] {
    for (auto& p : params)
      if (p.tensor.has_grad())
        for (double g : p.tensor.grad())
          if (g != 0.0) return false;
    return true;
  };

  for (int iter = 0; iter < 3; ++iter) {
    site.sample_noise(noise);

    // Phase 1: theta frozen, K ascends
    const auto theta_before = theta_copy();
    const auto k_before = site.k_mu.data();
    for (auto& p : params) p.tensor.zero_grad();

    std::vector<BatchStats> clean_stats;
    (void)model.forward(x, {}, nullptr, BnMode::Frozen, true, &clean_stats);
    std::vector<UncertaintySite*> sites{&site};
    auto forward_loss = [&] {
      Tensor xt = abra_transform(x, site, false);
      Heads h = model.forward(xt, {}, nullptr, BnMode::Frozen, true, nullptr,
                              &clean_stats);
      return adversarial_objective(h.logits, h.cosphi, labels, lcfg);
    };
    AdvOptState ascent;
    ascent.step_size = 0.05;
    ascent.steps = 1;
    AscentResult ar = adversarial_ascent(sites, forward_loss, ascent);
    if (ar.aborted) {
      detail = "ascent aborted";
      return false;
    }
    if (theta_copy() != theta_before) {
      detail = "theta moved during Phase 1";
      return false;
    }
    if (!theta_grads_zero()) {
      detail = "theta accumulated gradient during Phase 1";
      return false;
    }
    if (site.k_mu.data() == k_before) {
      detail = "K did not move during Phase 1";
      return false;
    }

    // Phase 2: K frozen inside the transform, theta descends
    site.sample_noise(noise);
    const auto k_frozen_mu = site.k_mu.data();
    const auto k_frozen_sigma = site.k_sigma.data();
    site.k_mu.zero_grad();
    site.k_sigma.zero_grad();
    for (auto& p : params) p.tensor.zero_grad();

    std::vector<BatchStats> stats2;
    Heads hc = model.forward(x, {}, nullptr, BnMode::Train, false, &stats2);
    Tensor xt = abra_transform(x, site, true);
    Heads hp =
        model.forward(xt, {}, nullptr, BnMode::Frozen, false, nullptr, &stats2);
    Tensor loss =
        robust_objective(hc.logits, hc.cosphi, hp.logits, hp.cosphi, labels, lcfg);
    opt.zero_grad();
    backward(loss);
    opt.step();

    if (site.k_mu.data() != k_frozen_mu ||
        site.k_sigma.data() != k_frozen_sigma) {
      detail = "K moved during Phase 2";
      return false;
    }
    for (double g : site.k_mu.grad())
      if (g != 0.0) {
        detail = "K accumulated gradient during Phase 2";
        return false;
      }
    if (theta_copy() == theta_before) {
      detail = "theta did not move during Phase 2";
      return false;
    }
  }
  detail = "3 iterations, exact snapshots";
  return true;
}

bool criterion_ascent_monotone(std::string& detail) {
  const PlateDataset& ds = desk_dataset();
  std::vector<int> first32(32);
  for (int i = 0; i < 32; ++i) first32[static_cast<std::size_t>(i)] = i;
  Tensor x = ds.batch(0, first32);
  std::vector<int> labels = ds.batch_labels(0, first32);
  LossConfig lcfg;
  lcfg.num_classes = ds.spec.num_classes;

  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    Backbone model{BackboneConfig{}};
    RngStream init(seed, "init");
    model.init(init);

    UncertaintySite site_in, site0;
    site_in.init(-1, 3);
    site0.init(0, model.block(0).bn.gamma.dim(0));
    RngStream noise(seed, "noise");
    site_in.sample_noise(noise);
    site0.sample_noise(noise);  // eps stays fixed for the whole ascent

    std::vector<BatchStats> clean_stats;
    (void)model.forward(x, {}, nullptr, BnMode::Frozen, true, &clean_stats);
    SiteHook hook = [&](const Tensor& t, int) {
      return abra_transform(t, site0, false);
    };
    auto forward_loss = [&] {
      Tensor xt = abra_transform(x, site_in, false);
      Heads h = model.forward(xt, {0}, hook, BnMode::Frozen, true, nullptr,
                              &clean_stats);
      return adversarial_objective(h.logits, h.cosphi, labels, lcfg);
    };

    std::vector<UncertaintySite*> sites{&site_in, &site0};
    AdvOptState ascent;
    ascent.step_size = 1e-2;
    ascent.steps = 5;
    AscentResult ar = adversarial_ascent(sites, forward_loss, ascent);
    if (ar.aborted || ar.trace.size() != 5) {
      detail = "ascent aborted at seed " + std::to_string(seed);
      return false;
    }
    for (std::size_t i = 1; i < ar.trace.size(); ++i)
      if (ar.trace[i] < ar.trace[i - 1] - 1e-6) {
        std::ostringstream os;
        os << "seed " << seed << " step " << i << ": " << ar.trace[i - 1]
           << " -> " << ar.trace[i];
        detail = os.str();
        return false;
      }
  }
  detail = "5/5 seeds non-decreasing";
  return true;
}

bool criterion_affine_tta(std::string& detail) {
  // single BN + linear toy model; per-channel affine test shift
  const int C = 4, N = 32, HW = 4;
  std::mt19937_64 eng(31);
  // wide dynamic range keeps the BN variance epsilon far below the 1e-6
  // exactness budget after the affine shift rescales the variance
  Tensor src = random_tensor({N, C, 2, 2}, eng, false, -30.0, 60.0);

  BatchNorm bn;
  bn.init(C);
  for (auto& g : bn.gamma.data()) g = 0.8 + 0.1 * g;  // non-trivial affine
  Tensor w = random_tensor({3, C * HW}, eng, false);
  Tensor b = random_tensor({3}, eng, false);

  auto recalibrate = [&](const Tensor& batch) {
    BatchStats st = batch_channel_stats(batch);
    bn.running_mu = st.mu.data();
    bn.running_var = st.sigma2.data();
  };
  auto predict = [&](const Tensor& batch) {
    Tensor y = bn.forward(batch, BnMode::Eval, true);
    return linear(reshape(y, {N, C * HW}), w, b);
  };
  auto argmax = [](const Tensor& logits) {
    std::vector<int> out;
    for (std::int64_t i = 0; i < logits.dim(0); ++i) {
      const double* row = logits.data().data() + i * logits.dim(1);
      out.push_back(static_cast<int>(
          std::max_element(row, row + logits.dim(1)) - row));
    }
    return out;
  };

  recalibrate(src);
  Tensor logits_src = predict(src);

  Tensor gain = Tensor::from_data({C}, {1.7, 0.4, 2.3, 0.9});
  Tensor offset = Tensor::from_data({C}, {3.0, -1.5, 0.25, -4.0});
  Tensor shifted = chan_add(chan_mul(src, gain), offset);

  Tensor logits_plain = predict(shifted);  // stale source stats
  recalibrate(shifted);                    // per-plate recalibration
  Tensor logits_tta = predict(shifted);

  double worst = 0.0;
  for (std::size_t i = 0; i < logits_src.data().size(); ++i)
    worst = std::max(worst,
                     std::fabs(logits_tta.data()[i] - logits_src.data()[i]));
  if (worst > 1e-6) {
    detail = "recalibrated outputs drifted by " + std::to_string(worst);
    return false;
  }
  if (argmax(logits_tta) != argmax(logits_src)) {
    detail = "recalibrated argmax changed";
    return false;
  }
  // sanity: the shift itself must matter, or the check is vacuous
  double moved = 0.0;
  for (std::size_t i = 0; i < logits_src.data().size(); ++i)
    moved = std::max(moved,
                     std::fabs(logits_plain.data()[i] - logits_src.data()[i]));
  if (moved < 1e-3) {
    detail = "affine shift did not move the stale-stat outputs";
    return false;
  }
  std::ostringstream os;
  os << "max output drift " << worst;
  detail = os.str();
  return true;
}

bool criterion_directional_dg(std::string& detail) {
  const PlateDataset& ds = desk_dataset();
  double erm_sum = 0.0, abra_sum = 0.0, tta_sum = 0.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    TrainResult& erm = erm_pool()[static_cast<std::size_t>(seed - 1)];
    erm_sum += test_accuracy(erm.model, ds, EvalMode::Plain);
    tta_sum += test_accuracy(erm.model, ds, EvalMode::Tta);
    TrainResult abra = train(ds, desk_config(Method::Abra, seed));
    abra_sum += test_accuracy(abra.model, ds, EvalMode::Plain);
  }
  const double erm_mean = erm_sum / 5.0;
  const double abra_mean = abra_sum / 5.0;
  const double tta_mean = tta_sum / 5.0;
  std::ostringstream os;
  os << "erm " << erm_mean << ", perturbation-trained " << abra_mean
     << ", recalibrated " << tta_mean;
  detail = os.str();
  return abra_mean >= erm_mean + 0.03 && tta_mean >= erm_mean + 0.05;
}

bool criterion_sweep(std::string& detail) {
  const PlateDataset& ds = desk_dataset();
  // a saturated model has zero accuracy variance everywhere; pick the pool
  // model with the most headroom on the unseen plates
  std::size_t pick = 0;
  double best_gap = -1.0;
  for (std::size_t i = 0; i < erm_pool().size(); ++i) {
    const double acc = test_accuracy(erm_pool()[i].model, ds, EvalMode::Plain);
    const double gap = std::min(1.0 - acc, acc - 1.0 / ds.spec.num_classes);
    if (gap > best_gap) {
      best_gap = gap;
      pick = i;
    }
  }
  Backbone& model = erm_pool()[pick].model;
  auto rows = batch_size_sweep(model, ds, {8, 128}, 10, 99);
  std::ostringstream os;
  os << "std@8 " << rows[0].tta_std << ", std@128 " << rows[1].tta_std
     << " (model seed " << pick + 1 << ")";
  detail = os.str();
  if (rows[0].plain_std != 0.0 || rows[1].plain_std != 0.0) {
    detail += "; plain std nonzero";
    return false;
  }
  return rows[0].tta_std > rows[1].tta_std;
}

bool criterion_ablation(std::string& detail) {
  const PlateDataset& ds = desk_dataset();
  struct Variant {
    const char* name;
    double lambda, js_weight;
    double mean = 0.0;
  };
  std::vector<Variant> variants = {
      {"ce", 1.0, 0.0, 0.0},
      {"ce+arc", 0.5, 0.0, 0.0},
      {"ce+arc+js", 0.5, 1.0, 0.0},
      {"arc", 0.0, 0.0, 0.0},
  };
  for (auto& v : variants) {
    double sum = 0.0;
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      TrainConfig cfg = desk_config(Method::Abra, seed);
      cfg.loss.lambda = v.lambda;
      cfg.loss.js_weight = v.js_weight;
      TrainResult r = train(ds, cfg);
      sum += test_accuracy(r.model, ds, EvalMode::Plain);
    }
    v.mean = sum / 5.0;
  }
  std::ostringstream os;
  for (const auto& v : variants) os << v.name << " " << v.mean << "  ";
  detail = os.str();
  const double ce = variants[0].mean, cearc = variants[1].mean,
               full = variants[2].mean, arc = variants[3].mean;
  return full >= cearc - 0.01 && cearc >= ce - 0.01 && arc < ce;
}

bool criterion_shift_diagnostics(std::string& detail) {
  // the stat-distance degeneracies first
  std::vector<double> mu = {0.0, 1.0, -2.0}, var = {1.0, 0.5, 2.0};
  if (gaussian_kl_mean(mu, var, mu, var) != 0.0 ||
      std::fabs(stats_mmd(mu, var, mu, var)) > 1e-10) {
    detail = "identical stat sets gave nonzero distances";
    return false;
  }

  int wins = 0;
  std::ostringstream os;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    double kl_by_tau[2] = {0.0, 0.0};
    const double taus[2] = {0.25, 1.0};
    for (int t = 0; t < 2; ++t) {
      PlateSpec spec;
      spec.shift_severity = taus[t];
      PlateDataset ds = generate(spec, seed);
      TrainConfig cfg = desk_config(Method::Erm, seed);
      cfg.epochs = 3;  // source stats only need to reflect the train plates
      TrainResult r = train(ds, cfg);
      auto shifts = bn_shift_diagnostics(r.model, ds, ds.test_plate_indices()[0]);
      kl_by_tau[t] = shifts[0].kl;  // first BN layer
    }
    if (kl_by_tau[1] > kl_by_tau[0]) ++wins;
    os << "seed " << seed << ": " << kl_by_tau[0] << " vs " << kl_by_tau[1]
       << "; ";
  }
  detail = os.str() + std::to_string(wins) + "/5";
  return wins == 5;
}

}  // namespace

int main(int argc, char** argv) {
  for (int i = 1; i < argc; ++i) g_only.push_back(std::atoi(argv[i]));
  run_criterion(1, "gradient-suite", criterion_gradients);
  run_criterion(2, "identity-degeneracy", criterion_identities);
  run_criterion(3, "oracle-suite", criterion_oracles);
  run_criterion(4, "phase-discipline", criterion_phase_discipline);
  run_criterion(5, "ascent-monotonicity", criterion_ascent_monotone);
  run_criterion(6, "affine-tta-exactness", criterion_affine_tta);
  run_criterion(7, "directional-dg", criterion_directional_dg);
  run_criterion(8, "batch-size-sweep", criterion_sweep);
  run_criterion(9, "loss-ablation", criterion_ablation);
  run_criterion(10, "shift-diagnostics", criterion_shift_diagnostics);

  if (g_failures == 0) {
    std::printf("all criteria passed\n");
    return 0;
  }
  std::printf("%d criteria failed\n", g_failures);
  return 1;
}
