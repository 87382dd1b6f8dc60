#pragma once

#include <cstdint>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "abra/data.hpp"
#include "abra/losses.hpp"
#include "abra/model.hpp"
#include "abra/uncertainty.hpp"

namespace abra {

// Divergence abort: thrown after repeated non-finite losses, carrying the
// diagnostic dump (recent losses, K norms, current lr).
struct TrainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class Method { Erm, Adabn, Advstyle, Abra };

Method method_from_string(const std::string& s);  // throws invalid_argument
std::string method_name(Method m);

struct TrainConfig {
  Method method = Method::Abra;
  int epochs = 20;
  int batch_size = 32;
  double lr = 1e-3;           // flat after linear warmup over the first 10% of steps
  double weight_decay = 1e-5; // excluded for K and other no_decay params
  LossConfig loss;
  std::set<int> sites;        // perturbation insertion sites; empty = last block
  int ascent_steps = 1;
  double ascent_lr = 0.0;     // <= 0 keys the ascent step to the descent lr
  double k_clamp = 0.25;      // elementwise K trust region (0 = unconstrained)
  double spike_threshold = 100.0;  // skip the descent update when the
                                   // iteration loss exceeds this, or exceeds
                                   // 30x the recent accepted median once
                                   // warm (0 disables both); heavy-tailed
                                   // noise draws occasionally produce huge
                                   // but finite perturbed losses that would
                                   // wreck a converged model
  double grad_clip = 5.0;  // global gradient-norm clip for the descent
                           // optimizer (0 = off); bounds the damage a single
                           // exploding iteration can do
  std::uint64_t seed = 1;
  bool augment = true;
  bool standardize = false;   // per-image channel standardization (off: it would
                              // cancel the planted plate shift outright)
  bool freeze_k = false;      // diagnostic hook: skip Phase 1 K updates

  void validate() const;  // throws invalid_argument naming the field
};

struct EpochTrace {
  double adv_loss = 0.0;  // mean Phase-1 objective (post-ascent value)
  double rob_loss = 0.0;  // mean Phase-2 objective
  double js_term = 0.0;   // mean stability term inside rob_loss
};

struct PlateAccuracy {
  std::uint32_t plate_id = 0;
  bool is_test = false;
  int correct = 0;
  int total = 0;

  double accuracy() const {
    return total > 0 ? static_cast<double>(correct) / total : 0.0;
  }
};

struct RunReport {
  std::vector<PlateAccuracy> plates;
  double total_accuracy = 0.0;  // sample-weighted mean over reported plates
  std::vector<EpochTrace> trace;
  long iterations = 0;
  long spikes = 0;  // iterations whose update was rejected as a loss spike
  std::string config_echo;
  std::uint64_t seed = 0;
  double wall_seconds = 0.0;
};

// key: value blocks plus a per-plate table, human-readable
std::string report_text(const RunReport& report);
// epoch,adv_loss,rob_loss,js_term rows for plotting
std::string trace_csv(const RunReport& report);

struct TrainResult {
  Backbone model;
  std::vector<UncertaintySite> sites;
  RunReport report;
};

// The full two-phase loop of the selected method. The report carries loss
// traces plus a final plain-mode accuracy pass over every plate.
TrainResult train(const PlateDataset& ds, const TrainConfig& cfg);

enum class EvalMode { Plain, Tta };

EvalMode eval_mode_from_string(const std::string& s);

struct InferResult {
  std::vector<int> predictions;
  std::vector<double> embeddings;  // N x feature_dim, row-major
};

// Plain: frozen running stats. Tta: recalibrate BN on this batch first (the
// caller restores source stats afterwards if it needs them back).
// Perturbation sites are inactive in both modes.
InferResult infer(Backbone& model, const Tensor& images, EvalMode mode);

// Per-plate and total accuracy over the given plates. Tta recalibrates per
// plate and restores the source running stats before returning.
RunReport evaluate(Backbone& model, const PlateDataset& ds,
                   const std::vector<int>& plate_indices, EvalMode mode,
                   bool standardize = false);

// BN running statistics of every block, for save/restore around TTA.
using BnSnapshot = std::vector<std::pair<std::vector<double>, std::vector<double>>>;
BnSnapshot snapshot_bn(const Backbone& model);
void restore_bn(Backbone& model, const BnSnapshot& snap);

struct SweepRow {
  int chunk_size = 0;
  double tta_mean = 0.0, tta_std = 0.0;
  double plain_mean = 0.0, plain_std = 0.0;  // control; std is identically 0
};

// For each chunk size, `repeats` independent shuffles of every test plate
// into recalibration chunks; accuracy mean/std across repeats. The plain
// columns run the same chunking without recalibration.
std::vector<SweepRow> batch_size_sweep(Backbone& model, const PlateDataset& ds,
                                       const std::vector<int>& chunk_sizes,
                                       int repeats, std::uint64_t seed,
                                       bool standardize = false);

struct LayerShift {
  int layer = 0;
  double kl = 0.0;   // mean over channels, closed-form diagonal Gaussian KL
  double mmd = 0.0;  // unbiased squared MMD over per-channel (mu, sigma) pairs
};

// Distance between the model's source running stats and the stats induced
// by recalibrating on the target plate, one row per BN layer. The model's
// running stats are restored before returning.
std::vector<LayerShift> bn_shift_diagnostics(Backbone& model,
                                             const PlateDataset& ds,
                                             int target_plate_index,
                                             bool standardize = false);

// Closed-form KL and unbiased Gaussian-kernel MMD between two per-channel
// stat sets; exposed for direct verification.
double gaussian_kl_mean(const std::vector<double>& mu_src,
                        const std::vector<double>& var_src,
                        const std::vector<double>& mu_tgt,
                        const std::vector<double>& var_tgt);
double stats_mmd(const std::vector<double>& mu_src,
                 const std::vector<double>& var_src,
                 const std::vector<double>& mu_tgt,
                 const std::vector<double>& var_tgt);

// sample_id,plate_id,label,split,f0..fD-1 rows for external projection.
void export_embeddings(Backbone& model, const PlateDataset& ds,
                       const std::string& path, bool standardize = false);

}  // namespace abra
