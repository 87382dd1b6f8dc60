#include "abra/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <deque>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include "abra/optim.hpp"
#include "abra/stats.hpp"

namespace abra {

namespace {

std::vector<int> all_indices(int n) {
  std::vector<int> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  return idx;
}

std::vector<int> argmax_rows(const Tensor& logits) {
  const std::int64_t n = logits.dim(0), o = logits.dim(1);
  std::vector<int> out(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) {
    const double* row = logits.data().data() + i * o;
    out[static_cast<std::size_t>(i)] =
        static_cast<int>(std::max_element(row, row + o) - row);
  }
  return out;
}

double k_norm(const UncertaintySite& site) {
  double s = 0.0;
  for (double v : site.k_mu.data()) s += v * v;
  for (double v : site.k_sigma.data()) s += v * v;
  return std::sqrt(s);
}

std::string config_echo_text(const TrainConfig& cfg) {
  std::ostringstream os;
  os << "method: " << method_name(cfg.method) << "\n"
     << "epochs: " << cfg.epochs << "\n"
     << "batch_size: " << cfg.batch_size << "\n"
     << "lr: " << cfg.lr << "\n"
     << "weight_decay: " << cfg.weight_decay << "\n"
     << "lambda: " << cfg.loss.lambda << "\n"
     << "margin: " << cfg.loss.margin << "\n"
     << "scale: " << cfg.loss.scale << "\n"
     << "js_weight: " << cfg.loss.js_weight << "\n"
     << "sites:";
  if (cfg.sites.empty()) {
    os << " last";
  } else {
    for (int s : cfg.sites) os << " " << s;
  }
  os << "\n"
     << "ascent_steps: " << cfg.ascent_steps << "\n"
     << "ascent_lr: " << (cfg.ascent_lr > 0 ? std::to_string(cfg.ascent_lr)
                                            : std::string("(descent schedule)"))
     << "\n"
     << "k_clamp: " << cfg.k_clamp << "\n"
     << "spike_threshold: " << cfg.spike_threshold << "\n"
     << "grad_clip: " << cfg.grad_clip << "\n"
     << "augment: " << (cfg.augment ? "true" : "false") << "\n"
     << "standardize: " << (cfg.standardize ? "true" : "false") << "\n"
     << "seed: " << cfg.seed << "\n";
  return os.str();
}

// Fills per-plate rows plus the sample-weighted total.
void fill_accuracy(RunReport& report, const PlateDataset& ds,
                   const std::vector<int>& plate_indices,
                   const std::vector<std::pair<int, int>>& correct_total) {
  long correct = 0, total = 0;
  for (std::size_t i = 0; i < plate_indices.size(); ++i) {
    const Plate& plate = ds.plates[static_cast<std::size_t>(plate_indices[i])];
    PlateAccuracy pa;
    pa.plate_id = plate.plate_id;
    pa.is_test = plate.is_test;
    pa.correct = correct_total[i].first;
    pa.total = correct_total[i].second;
    report.plates.push_back(pa);
    correct += pa.correct;
    total += pa.total;
  }
  report.total_accuracy =
      total > 0 ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

}  // namespace

Method method_from_string(const std::string& s) {
  if (s == "erm") return Method::Erm;
  if (s == "adabn") return Method::Adabn;
  if (s == "advstyle") return Method::Advstyle;
  if (s == "abra") return Method::Abra;
  throw std::invalid_argument("unknown method '" + s +
                              "' (expected erm|adabn|advstyle|abra)");
}

std::string method_name(Method m) {
  switch (m) {
    case Method::Erm: return "erm";
    case Method::Adabn: return "adabn";
    case Method::Advstyle: return "advstyle";
    case Method::Abra: return "abra";
  }
  return "?";
}

EvalMode eval_mode_from_string(const std::string& s) {
  if (s == "plain") return EvalMode::Plain;
  if (s == "tta") return EvalMode::Tta;
  throw std::invalid_argument("unknown eval mode '" + s + "' (expected plain|tta)");
}

void TrainConfig::validate() const {
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (batch_size < 2) throw std::invalid_argument("batch_size must be >= 2");
  if (lr <= 0) throw std::invalid_argument("lr must be > 0");
  if (weight_decay < 0) throw std::invalid_argument("weight_decay must be >= 0");
  if (ascent_steps < 1) throw std::invalid_argument("ascent_steps must be >= 1");
  if (k_clamp < 0) throw std::invalid_argument("k_clamp must be >= 0");
  if (spike_threshold < 0)
    throw std::invalid_argument("spike_threshold must be >= 0");
  if (grad_clip < 0) throw std::invalid_argument("grad_clip must be >= 0");
  for (int s : sites)
    if (s < -1)
      throw std::invalid_argument(
          "sites must be block indices or -1 for the input");
  loss.validate();
}

std::string report_text(const RunReport& report) {
  std::ostringstream os;
  os.precision(6);
  os << report.config_echo;
  os << "iterations: " << report.iterations << "\n"
     << "rejected_spikes: " << report.spikes << "\n"
     << "wall_seconds: " << report.wall_seconds << "\n"
     << "total_accuracy: " << report.total_accuracy << "\n"
     << "plates:\n"
     << "  plate_id split correct total accuracy\n";
  for (const auto& p : report.plates) {
    os << "  " << p.plate_id << " " << (p.is_test ? "test" : "train") << " "
       << p.correct << " " << p.total << " " << p.accuracy() << "\n";
  }
  return os.str();
}

std::string trace_csv(const RunReport& report) {
  std::ostringstream os;
  os.precision(17);
  os << "epoch,adv_loss,rob_loss,js_term\n";
  for (std::size_t e = 0; e < report.trace.size(); ++e) {
    const auto& t = report.trace[e];
    os << (e + 1) << "," << t.adv_loss << "," << t.rob_loss << "," << t.js_term
       << "\n";
  }
  return os.str();
}

BnSnapshot snapshot_bn(const Backbone& model) {
  BnSnapshot snap;
  for (int i = 0; i < model.num_blocks(); ++i) {
    const auto& bn = model.block(i).bn;
    snap.emplace_back(bn.running_mu, bn.running_var);
  }
  return snap;
}

void restore_bn(Backbone& model, const BnSnapshot& snap) {
  for (int i = 0; i < model.num_blocks(); ++i) {
    auto& bn = model.block(i).bn;
    bn.running_mu = snap[static_cast<std::size_t>(i)].first;
    bn.running_var = snap[static_cast<std::size_t>(i)].second;
  }
}

TrainResult train(const PlateDataset& ds, const TrainConfig& cfg) {
  cfg.validate();
  const auto t_start = std::chrono::steady_clock::now();

  BackboneConfig mcfg;
  mcfg.in_channels = ds.spec.channels;
  mcfg.num_classes = ds.spec.num_classes;

  TrainResult result;
  result.model = Backbone(mcfg);

  RngStream init_rng(cfg.seed, "init");
  RngStream sampler_rng(cfg.seed, "sampler");
  RngStream noise_rng(cfg.seed, "noise");
  RngStream aug_rng(cfg.seed, "aug");
  result.model.init(init_rng);

  Backbone& model = result.model;
  const int nblocks = model.num_blocks();

  // site -1 is the raw input; the plate shift itself lives on input-channel
  // statistics, so the default perturbs there plus after the first block
  std::set<int> active_sites = cfg.sites;
  if (active_sites.empty()) active_sites = {-1, 0};
  for (int s : active_sites) {
    if (s >= nblocks)
      throw std::invalid_argument("site " + std::to_string(s) +
                                  " out of range for " + std::to_string(nblocks) +
                                  " blocks");
  }
  auto site_channels = [&](int s) {
    return s < 0 ? ds.spec.channels
                 : static_cast<int>(model.block(s).bn.gamma.dim(0));
  };

  // perturbation-magnitude parameters, one pair of C-vectors per site
  std::map<int, UncertaintySite> site_map;
  if (cfg.method == Method::Abra) {
    for (int s : active_sites) {
      UncertaintySite site;
      site.init(s, site_channels(s));
      site_map.emplace(s, std::move(site));
    }
  }

  // AdvStyle keeps one batch-slot perturbation matrix pair per site, shared
  // across iterations; ascent happens through the reversed gradient.
  std::map<int, std::pair<Tensor, Tensor>> style_map;
  if (cfg.method == Method::Advstyle) {
    for (int s : active_sites) {
      const std::int64_t c = site_channels(s);
      style_map.emplace(s, std::make_pair(
                               Tensor::zeros({cfg.batch_size, c}, true),
                               Tensor::zeros({cfg.batch_size, c}, true)));
    }
  }

  PlateSampler sampler(ds, ds.train_plate_indices(), cfg.batch_size);
  const long iters_per_epoch =
      static_cast<long>(sampler.epoch(sampler_rng).size());
  // the probe epoch above consumed sampler draws; rebuild the stream so the
  // realized schedule starts from the seed
  sampler_rng = RngStream(cfg.seed, "sampler");
  const long total_steps = iters_per_epoch * cfg.epochs;
  const long warmup_steps = std::max<long>(1, total_steps / 10);

  AdamOptimizer opt(model.parameters(), cfg.lr, cfg.weight_decay, warmup_steps);
  opt.set_clip_norm(cfg.grad_clip);

  LossConfig adv_cfg = cfg.loss;
  adv_cfg.num_classes = ds.spec.num_classes;
  LossConfig rob_cfg = adv_cfg;

  int consecutive_bad = 0;
  std::deque<double> recent_losses;
  auto record_loss = [&recent_losses](double v) {
    recent_losses.push_back(v);
    if (recent_losses.size() > 8) recent_losses.pop_front();
  };
  auto divergence_dump = [&]() -> std::string {
    std::ostringstream os;
    os << "training aborted: non-finite loss on " << consecutive_bad
       << " consecutive iterations\n  recent losses:";
    for (double v : recent_losses) os << " " << v;
    os << "\n  lr: " << opt.current_lr();
    for (const auto& [sid, site] : site_map)
      os << "\n  |K| site " << sid << ": " << k_norm(site);
    return os.str();
  };
  auto note_bad = [&](double loss_value) {
    record_loss(loss_value);
    ++consecutive_bad;
    if (consecutive_bad >= 3) throw TrainError(divergence_dump());
  };
  // finite but absurd losses (heavy-tailed noise draws through the statistic
  // mismatch) would take a converged model apart over one epoch; the
  // iteration is recorded but the parameter update is rejected. The relative
  // branch compares against the median of recently *accepted* losses: once
  // the model has converged to small losses, even sub-threshold outliers are
  // destructive, and a spiked value must not poison its own baseline.
  std::deque<double> accepted_losses;
  auto spiked = [&cfg, &accepted_losses](double v) {
    if (cfg.spike_threshold <= 0) return false;
    if (v > cfg.spike_threshold) return true;
    if (accepted_losses.size() < 8) return false;
    std::vector<double> w(accepted_losses.begin(), accepted_losses.end());
    std::nth_element(w.begin(), w.begin() + w.size() / 2, w.end());
    return v > 0.5 && v > 10.0 * w[w.size() / 2];
  };
  auto accept_loss = [&accepted_losses](double v) {
    accepted_losses.push_back(v);
    if (accepted_losses.size() > 8) accepted_losses.pop_front();
  };

  result.report.seed = cfg.seed;
  result.report.config_echo = config_echo_text(cfg);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    EpochTrace tr;
    long counted = 0;
    for (const auto& b : sampler.epoch(sampler_rng)) {
      Tensor x = ds.batch(b.plate_index, b.sample_indices);
      std::vector<int> labels = ds.batch_labels(b.plate_index, b.sample_indices);
      if (cfg.augment) x = augment_flips_rotations(x, aug_rng);
      if (cfg.standardize) x = self_standardize(x);
      ++result.report.iterations;
      ++counted;

      double adv_value = 0.0, rob_value = 0.0, js_value = 0.0;

      if (cfg.method == Method::Erm || cfg.method == Method::Adabn) {
        Heads h = model.forward(x, {}, nullptr, BnMode::Train);
        Tensor loss = adversarial_objective(h.logits, h.cosphi, labels, adv_cfg);
        rob_value = loss.item();
        if (!std::isfinite(rob_value)) {
          note_bad(rob_value);
          continue;
        }
        consecutive_bad = 0;
        record_loss(rob_value);
        if (spiked(rob_value)) {
          ++result.report.spikes;
        } else {
          accept_loss(rob_value);
          opt.zero_grad();
          backward(loss);
          opt.step();
        }
      } else if (cfg.method == Method::Advstyle) {
        const std::int64_t n = x.dim(0);
        SiteHook hook = [&](const Tensor& feat, int sid) {
          auto& [sig_mu, sig_sigma] = style_map.at(sid);
          Tensor dmu = sig_mu, dsg = sig_sigma;
          if (n < dmu.dim(0)) {
            dmu = slice_rows(dmu, n);
            dsg = slice_rows(dsg, n);
          }
          return adain_renormalize(feat, gradient_reversal(dmu),
                                   gradient_reversal(dsg));
        };
        Tensor xin = x;
        std::set<int> block_sites = active_sites;
        if (block_sites.erase(-1)) xin = hook(x, -1);
        Heads h = model.forward(xin, block_sites, hook, BnMode::Train);
        Tensor loss = cross_entropy(h.logits, labels);
        rob_value = loss.item();
        if (!std::isfinite(rob_value)) {
          note_bad(rob_value);
          continue;
        }
        consecutive_bad = 0;
        record_loss(rob_value);
        if (spiked(rob_value)) {
          ++result.report.spikes;
        } else {
          accept_loss(rob_value);
          opt.zero_grad();
          for (auto& [sid, pair] : style_map) {
            pair.first.zero_grad();
            pair.second.zero_grad();
          }
          const double style_lr = opt.current_lr();
          backward(loss);
          opt.step();
          // reversed gradient: descending it ascends the classification loss
          for (auto& [sid, pair] : style_map) {
            for (auto* t : {&pair.first, &pair.second}) {
              auto& data = t->data();
              const auto& grad = t->grad();
              for (std::size_t j = 0; j < data.size(); ++j)
                data[j] -= style_lr * grad[j];
            }
          }
        }
      } else {  // Method::Abra, two-phase iteration
        for (auto& [sid, site] : site_map) site.sample_noise(noise_rng);

        if (!cfg.freeze_k) {
          // Phase 1: theta frozen. The prefix below the first site is a
          // constant for every ascent step, so it is computed once.
          const int first = *active_sites.begin();
          Tensor prefix =
              first < 0
                  ? x
                  : model.run_blocks(x, 0, first + 1, BnMode::Frozen, true)
                        .detach();
          std::vector<UncertaintySite*> site_ptrs;
          for (auto& [sid, site] : site_map) site_ptrs.push_back(&site);
          // clean-branch batch statistics of the suffix, fixed for the
          // whole ascent: the perturbed data is normalized against these
          std::vector<BatchStats> clean_stats(static_cast<std::size_t>(nblocks));
          {
            Tensor yc = prefix;
            for (int i = first + 1; i < nblocks; ++i)
              yc = model.block(i).forward(yc, BnMode::Frozen, true, nullptr,
                                          &clean_stats[static_cast<std::size_t>(i)]);
          }
          auto forward_loss = [&]() {
            Tensor y = abra_transform(prefix, site_map.at(first), false);
            for (int i = first + 1; i < nblocks; ++i) {
              y = model.block(i).forward(
                  y, BnMode::Frozen, true,
                  &clean_stats[static_cast<std::size_t>(i)]);
              if (active_sites.count(i))
                y = abra_transform(y, site_map.at(i), false);
            }
            Heads h = model.run_heads(y, true);
            return adversarial_objective(h.logits, h.cosphi, labels, adv_cfg);
          };
          AdvOptState ascent;
          ascent.step_size = cfg.ascent_lr > 0 ? cfg.ascent_lr : opt.current_lr();
          ascent.steps = cfg.ascent_steps;
          ascent.k_clamp = cfg.k_clamp;
          AscentResult ar = adversarial_ascent(site_ptrs, forward_loss, ascent);
          if (ar.aborted) {
            note_bad(std::numeric_limits<double>::quiet_NaN());
            continue;
          }
          adv_value = ar.trace.empty() ? 0.0 : ar.trace.back();

          // fresh noise draws for the robust phase
          for (auto& [sid, site] : site_map) site.sample_noise(noise_rng);
        }

        // Phase 2: K frozen inside the transform, theta descends.
        SiteHook hook = [&](const Tensor& feat, int sid) {
          return abra_transform(feat, site_map.at(sid), true);
        };
        Heads hc, hp;
        if (active_sites.count(-1)) {
          // input-site perturbation forks the branches before the network,
          // so there is no shared prefix to exploit; the perturbed branch
          // still normalizes against the clean branch's batch statistics
          std::vector<BatchStats> clean_stats;
          hc = model.forward(x, {}, nullptr, BnMode::Train, false, &clean_stats);
          std::set<int> block_sites = active_sites;
          block_sites.erase(-1);
          Tensor xt = abra_transform(x, site_map.at(-1), true);
          hp = model.forward(xt, block_sites, hook, BnMode::Frozen, false,
                             nullptr, &clean_stats);
        } else {
          std::tie(hc, hp) =
              model.forward_dual(x, active_sites, hook, BnMode::Train);
        }
        Tensor loss = robust_objective(hc.logits, hc.cosphi, hp.logits, hp.cosphi,
                                       labels, rob_cfg);
        rob_value = loss.item();
        if (!std::isfinite(rob_value)) {
          note_bad(rob_value);
          continue;
        }
        consecutive_bad = 0;
        record_loss(rob_value);
        js_value = js_divergence(softmax_rows(hc.logits.detach()),
                                 softmax_rows(hp.logits.detach()))
                       .item();
        if (spiked(rob_value)) {
          ++result.report.spikes;
        } else {
          accept_loss(rob_value);
          opt.zero_grad();
          backward(loss);
          opt.step();
        }
      }

      tr.adv_loss += adv_value;
      tr.rob_loss += rob_value;
      tr.js_term += js_value;
    }
    if (counted > 0) {
      tr.adv_loss /= static_cast<double>(counted);
      tr.rob_loss /= static_cast<double>(counted);
      tr.js_term /= static_cast<double>(counted);
    }
    result.report.trace.push_back(tr);
  }

  for (auto& [sid, site] : site_map) result.sites.push_back(std::move(site));

  // final plain-mode accuracy over every plate
  std::vector<int> plate_indices = all_indices(static_cast<int>(ds.plates.size()));
  std::vector<std::pair<int, int>> per_plate;
  for (int pi : plate_indices) {
    const Plate& plate = ds.plates[static_cast<std::size_t>(pi)];
    Tensor x = ds.batch(pi, all_indices(static_cast<int>(plate.labels.size())));
    if (cfg.standardize) x = self_standardize(x);
    InferResult r = infer(model, x, EvalMode::Plain);
    int correct = 0;
    for (std::size_t i = 0; i < plate.labels.size(); ++i)
      if (r.predictions[i] == plate.labels[i]) ++correct;
    per_plate.emplace_back(correct, static_cast<int>(plate.labels.size()));
  }
  fill_accuracy(result.report, ds, plate_indices, per_plate);

  result.report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start)
          .count();
  return result;
}

InferResult infer(Backbone& model, const Tensor& images, EvalMode mode) {
  if (mode == EvalMode::Tta) adabn_recalibrate(model, images);
  Heads h = model.forward(images, {}, nullptr, BnMode::Eval, true);
  InferResult r;
  r.predictions = argmax_rows(h.logits);
  r.embeddings = h.embedding.data();
  return r;
}

RunReport evaluate(Backbone& model, const PlateDataset& ds,
                   const std::vector<int>& plate_indices, EvalMode mode,
                   bool standardize) {
  const auto t_start = std::chrono::steady_clock::now();
  BnSnapshot snap = snapshot_bn(model);
  RunReport report;
  std::vector<std::pair<int, int>> per_plate;
  for (int pi : plate_indices) {
    const Plate& plate = ds.plates[static_cast<std::size_t>(pi)];
    Tensor x = ds.batch(pi, all_indices(static_cast<int>(plate.labels.size())));
    if (standardize) x = self_standardize(x);
    InferResult r = infer(model, x, mode);
    int correct = 0;
    for (std::size_t i = 0; i < plate.labels.size(); ++i)
      if (r.predictions[i] == plate.labels[i]) ++correct;
    per_plate.emplace_back(correct, static_cast<int>(plate.labels.size()));
  }
  restore_bn(model, snap);
  fill_accuracy(report, ds, plate_indices, per_plate);
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start)
          .count();
  return report;
}

std::vector<SweepRow> batch_size_sweep(Backbone& model, const PlateDataset& ds,
                                       const std::vector<int>& chunk_sizes,
                                       int repeats, std::uint64_t seed,
                                       bool standardize) {
  if (repeats < 1) throw std::invalid_argument("sweep repeats must be >= 1");
  const std::vector<int> test_plates = ds.test_plate_indices();
  if (test_plates.empty())
    throw std::invalid_argument("batch_size_sweep: dataset has no test plates");
  for (int size : chunk_sizes) {
    if (size < 1) throw std::invalid_argument("sweep chunk size must be >= 1");
    for (int pi : test_plates) {
      const auto n = static_cast<int>(
          ds.plates[static_cast<std::size_t>(pi)].labels.size());
      if (size > n)
        throw std::invalid_argument("sweep chunk size " + std::to_string(size) +
                                    " exceeds plate size " + std::to_string(n));
    }
  }

  BnSnapshot snap = snapshot_bn(model);
  RngStream rng(seed, "sweep");

  auto mean_std = [](const std::vector<double>& v) {
    // identical repeats (the plain control) must report a std of exactly 0;
    // summing and dividing would leave ~1e-17 of rounding residue
    if (std::adjacent_find(v.begin(), v.end(), std::not_equal_to<>()) ==
        v.end())
      return std::make_pair(v.front(), 0.0);
    double mean = std::accumulate(v.begin(), v.end(), 0.0) /
                  static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    double sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1))
                             : 0.0;
    return std::make_pair(mean, sd);
  };

  std::vector<SweepRow> rows;
  for (int size : chunk_sizes) {
    std::vector<double> tta_accs, plain_accs;
    for (int rep = 0; rep < repeats; ++rep) {
      long tta_correct = 0, plain_correct = 0, total = 0;
      for (int pi : test_plates) {
        const Plate& plate = ds.plates[static_cast<std::size_t>(pi)];
        const int n = static_cast<int>(plate.labels.size());
        std::vector<int> order = all_indices(n);
        // independent chunk resampling per repeat
        for (int i = n - 1; i > 0; --i) {
          const int j = static_cast<int>(
              rng.uniform_index(static_cast<std::size_t>(i) + 1));
          std::swap(order[static_cast<std::size_t>(i)],
                    order[static_cast<std::size_t>(j)]);
        }
        for (int start = 0; start < n; start += size) {
          const int stop = std::min(start + size, n);
          std::vector<int> chunk(order.begin() + start, order.begin() + stop);
          Tensor x = ds.batch(pi, chunk);
          if (standardize) x = self_standardize(x);
          InferResult tta = infer(model, x, EvalMode::Tta);
          restore_bn(model, snap);
          InferResult plain = infer(model, x, EvalMode::Plain);
          for (std::size_t i = 0; i < chunk.size(); ++i) {
            const int label = plate.labels[static_cast<std::size_t>(
                chunk[i])];
            if (tta.predictions[i] == label) ++tta_correct;
            if (plain.predictions[i] == label) ++plain_correct;
          }
          total += stop - start;
        }
      }
      tta_accs.push_back(static_cast<double>(tta_correct) /
                         static_cast<double>(total));
      plain_accs.push_back(static_cast<double>(plain_correct) /
                           static_cast<double>(total));
    }
    SweepRow row;
    row.chunk_size = size;
    std::tie(row.tta_mean, row.tta_std) = mean_std(tta_accs);
    std::tie(row.plain_mean, row.plain_std) = mean_std(plain_accs);
    rows.push_back(row);
  }
  restore_bn(model, snap);
  return rows;
}

double gaussian_kl_mean(const std::vector<double>& mu_src,
                        const std::vector<double>& var_src,
                        const std::vector<double>& mu_tgt,
                        const std::vector<double>& var_tgt) {
  double acc = 0.0;
  for (std::size_t c = 0; c < mu_src.size(); ++c) {
    const double vs = std::max(var_src[c], kStatsEps);
    const double vt = std::max(var_tgt[c], kStatsEps);
    const double d = mu_src[c] - mu_tgt[c];
    acc += 0.5 * (std::log(vt / vs) + vs / vt + d * d / vt - 1.0);
  }
  return acc / static_cast<double>(mu_src.size());
}

double stats_mmd(const std::vector<double>& mu_src,
                 const std::vector<double>& var_src,
                 const std::vector<double>& mu_tgt,
                 const std::vector<double>& var_tgt) {
  const std::size_t m = mu_src.size();
  // the unbiased estimator is negative for identical deterministic sets;
  // the population value there is 0, so report that directly
  if (mu_src == mu_tgt && var_src == var_tgt) return 0.0;
  auto point = [](const std::vector<double>& mu, const std::vector<double>& var,
                  std::size_t c) {
    return std::make_pair(mu[c], std::sqrt(std::max(var[c], 0.0)));
  };
  auto sqdist = [](std::pair<double, double> a, std::pair<double, double> b) {
    const double dx = a.first - b.first, dy = a.second - b.second;
    return dx * dx + dy * dy;
  };

  // median heuristic over the pooled sample; degenerate (all-equal) sets
  // fall back to bandwidth 1, which makes the estimate exactly zero there
  std::vector<std::pair<double, double>> pts;
  for (std::size_t c = 0; c < m; ++c) pts.push_back(point(mu_src, var_src, c));
  for (std::size_t c = 0; c < m; ++c) pts.push_back(point(mu_tgt, var_tgt, c));
  std::vector<double> d2;
  for (std::size_t i = 0; i < pts.size(); ++i)
    for (std::size_t j = i + 1; j < pts.size(); ++j)
      d2.push_back(sqdist(pts[i], pts[j]));
  std::nth_element(d2.begin(), d2.begin() + static_cast<long>(d2.size() / 2),
                   d2.end());
  double bw = d2[d2.size() / 2];
  if (!(bw > 0)) bw = 1.0;
  auto kern = [bw, &sqdist](std::pair<double, double> a,
                            std::pair<double, double> b) {
    return std::exp(-sqdist(a, b) / (2.0 * bw));
  };

  double kxx = 0.0, kyy = 0.0, kxy = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      const auto xi = point(mu_src, var_src, i);
      const auto yj = point(mu_tgt, var_tgt, j);
      kxy += kern(xi, yj);
      if (i != j) {
        kxx += kern(xi, point(mu_src, var_src, j));
        kyy += kern(point(mu_tgt, var_tgt, i), yj);
      }
    }
  }
  const double md = static_cast<double>(m);
  return kxx / (md * (md - 1.0)) + kyy / (md * (md - 1.0)) -
         2.0 * kxy / (md * md);
}

std::vector<LayerShift> bn_shift_diagnostics(Backbone& model,
                                             const PlateDataset& ds,
                                             int target_plate_index,
                                             bool standardize) {
  BnSnapshot source = snapshot_bn(model);
  const Plate& plate =
      ds.plates[static_cast<std::size_t>(target_plate_index)];
  Tensor x = ds.batch(target_plate_index,
                      all_indices(static_cast<int>(plate.labels.size())));
  if (standardize) x = self_standardize(x);
  adabn_recalibrate(model, x);

  std::vector<LayerShift> shifts;
  for (int i = 0; i < model.num_blocks(); ++i) {
    const auto& bn = model.block(i).bn;
    const auto& [src_mu, src_var] = source[static_cast<std::size_t>(i)];
    LayerShift s;
    s.layer = i;
    s.kl = gaussian_kl_mean(src_mu, src_var, bn.running_mu, bn.running_var);
    s.mmd = stats_mmd(src_mu, src_var, bn.running_mu, bn.running_var);
    shifts.push_back(s);
  }
  restore_bn(model, source);
  return shifts;
}

void export_embeddings(Backbone& model, const PlateDataset& ds,
                       const std::string& path, bool standardize) {
  std::ofstream os(path);
  if (!os)
    throw std::runtime_error("export_embeddings: cannot open for writing: " +
                             path);
  os.precision(17);
  long sample_id = 0;
  for (std::size_t pi = 0; pi < ds.plates.size(); ++pi) {
    const Plate& plate = ds.plates[pi];
    Tensor x = ds.batch(static_cast<int>(pi),
                        all_indices(static_cast<int>(plate.labels.size())));
    if (standardize) x = self_standardize(x);
    InferResult r = infer(model, x, EvalMode::Plain);
    const std::size_t d = r.embeddings.size() / plate.labels.size();
    for (std::size_t i = 0; i < plate.labels.size(); ++i) {
      os << sample_id++ << "," << plate.plate_id << "," << plate.labels[i]
         << "," << (plate.is_test ? "test" : "train");
      for (std::size_t j = 0; j < d; ++j) os << "," << r.embeddings[i * d + j];
      os << "\n";
    }
  }
  if (!os) throw std::runtime_error("export_embeddings: write failure: " + path);
}

}  // namespace abra
