// Operator entry point: dataset generation, training, evaluation, sweeps
// and diagnostics, reproducible from flags and/or a key=value config file
// (flags win on conflict).

#include <openssl/evp.h>

#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "abra/checkpoint.hpp"
#include "abra/data.hpp"
#include "abra/train.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kExitBadInput = 2;
constexpr int kExitTrainAbort = 3;

std::string sha256_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open for hashing: " + path);
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  char buf[1 << 16];
  while (is) {
    is.read(buf, sizeof(buf));
    EVP_DigestUpdate(ctx, buf, static_cast<std::size_t>(is.gcount()));
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream os;
  os << std::hex;
  for (unsigned int i = 0; i < len; ++i) {
    os.width(2);
    os.fill('0');
    os << static_cast<int>(digest[i]);
  }
  return os.str();
}

std::string timestamp_utc() {
  const std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

int num_threads_cap() {
  // single-threaded implementation; the cap is parsed, echoed and honored
  // trivially
  const char* env = std::getenv("ABRA_NUM_THREADS");
  if (!env) return 1;
  const int n = std::atoi(env);
  return n >= 1 ? n : 1;
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open for writing: " + path);
  os << content;
  if (!os) throw std::runtime_error("write failure: " + path);
}

std::string manifest_text(const std::string& command,
                          const std::string& config_echo,
                          const std::string& data_path,
                          const std::string& out_dir) {
  std::ostringstream os;
  os << "command: " << command << "\n"
     << "timestamp: " << timestamp_utc() << "\n"
     << "threads_cap: " << num_threads_cap() << "\n"
     << "output: " << out_dir << "\n";
  if (!data_path.empty())
    os << "dataset: " << data_path << "\n"
       << "dataset_sha256: " << sha256_file(data_path) << "\n";
  os << "config:\n";
  std::istringstream lines(config_echo);
  for (std::string line; std::getline(lines, line);) os << "  " << line << "\n";
  return os.str();
}

struct GenArgs {
  abra::PlateSpec spec;
  std::uint64_t seed = 1;
  std::string out = "ds.plt";
};

int run_gen(const GenArgs& a) {
  a.spec.validate();
  abra::PlateDataset ds = abra::generate(a.spec, a.seed);
  abra::save_dataset(a.out, ds);
  std::ostringstream echo;
  echo << "plates: " << a.spec.num_plates << "\n"
       << "test_plates: " << a.spec.test_plates << "\n"
       << "images_per_plate: " << a.spec.images_per_plate << "\n"
       << "classes: " << a.spec.num_classes << "\n"
       << "channels: " << a.spec.channels << "\n"
       << "image_size: " << a.spec.image_size << "\n"
       << "shift_severity: " << a.spec.shift_severity << "\n"
       << "noise_level: " << a.spec.noise_level << "\n"
       << "seed: " << a.seed << "\n";
  write_file(a.out + ".run.txt",
             manifest_text("gen", echo.str(), a.out, a.out));
  std::cout << "wrote " << a.out << " (" << ds.plates.size() << " plates)\n";
  return 0;
}

struct TrainArgs {
  std::string data;
  std::string out = "run";
  abra::TrainConfig cfg;
  std::string method = "abra";
  std::vector<int> sites;
  bool no_augment = false;
};

int run_train(TrainArgs& a) {
  if (!fs::exists(a.data)) {
    std::cerr << "error: dataset file not found: " << a.data << "\n";
    return kExitBadInput;
  }
  a.cfg.method = abra::method_from_string(a.method);
  a.cfg.sites = std::set<int>(a.sites.begin(), a.sites.end());
  a.cfg.augment = !a.no_augment;
  a.cfg.validate();

  abra::PlateDataset ds = abra::load_dataset(a.data);
  abra::TrainResult result = abra::train(ds, a.cfg);

  fs::create_directories(a.out);
  const std::string manifest_path = a.out + "/manifest.txt";
  write_file(manifest_path,
             manifest_text("train", result.report.config_echo, a.data, a.out));
  abra::save_checkpoint(a.out + "/checkpoint.abra", result.model, result.sites);
  write_file(a.out + "/report.txt", "manifest: " + manifest_path + "\n" +
                                        abra::report_text(result.report));
  write_file(a.out + "/trace.csv", abra::trace_csv(result.report));
  std::cout << abra::report_text(result.report);
  return 0;
}

struct EvalArgs {
  std::string checkpoint;
  std::string data;
  std::string mode = "plain";
  std::string split = "test";
  std::string out;
  std::vector<int> sweep_sizes;
  int repeats = 10;
  std::string diagnostics;
  std::string embeddings;
  std::uint64_t seed = 1;
  bool standardize = false;
};

int run_eval(const EvalArgs& a) {
  if (!fs::exists(a.data)) {
    std::cerr << "error: dataset file not found: " << a.data << "\n";
    return kExitBadInput;
  }
  abra::Checkpoint ck = abra::load_checkpoint(a.checkpoint);
  abra::PlateDataset ds = abra::load_dataset(a.data);
  const abra::EvalMode mode = abra::eval_mode_from_string(a.mode);

  std::vector<int> plate_indices;
  if (a.split == "train") {
    plate_indices = ds.train_plate_indices();
  } else if (a.split == "test") {
    plate_indices = ds.test_plate_indices();
  } else if (a.split == "all") {
    plate_indices = ds.train_plate_indices();
    for (int pi : ds.test_plate_indices()) plate_indices.push_back(pi);
  } else {
    throw std::invalid_argument("unknown split '" + a.split +
                                "' (expected train|test|all)");
  }

  std::ostringstream out;
  abra::RunReport report =
      abra::evaluate(ck.model, ds, plate_indices, mode, a.standardize);
  report.seed = a.seed;
  report.config_echo = "mode: " + a.mode + "\nsplit: " + a.split + "\n";
  out << abra::report_text(report);

  if (!a.sweep_sizes.empty()) {
    auto rows = abra::batch_size_sweep(ck.model, ds, a.sweep_sizes, a.repeats,
                                       a.seed, a.standardize);
    out << "sweep:\n  size tta_mean tta_std plain_mean plain_std\n";
    out.precision(6);
    for (const auto& r : rows)
      out << "  " << r.chunk_size << " " << r.tta_mean << " " << r.tta_std
          << " " << r.plain_mean << " " << r.plain_std << "\n";
  }

  if (a.diagnostics == "bnshift") {
    out << "bn_shift:\n  layer kl mmd\n";
    for (int pi : ds.test_plate_indices()) {
      out << "  target plate " << ds.plates[static_cast<std::size_t>(pi)].plate_id
          << ":\n";
      for (const auto& s :
           abra::bn_shift_diagnostics(ck.model, ds, pi, a.standardize))
        out << "  " << s.layer << " " << s.kl << " " << s.mmd << "\n";
    }
  } else if (!a.diagnostics.empty()) {
    throw std::invalid_argument("unknown diagnostics '" + a.diagnostics +
                                "' (expected bnshift)");
  }

  if (!a.embeddings.empty())
    abra::export_embeddings(ck.model, ds, a.embeddings, a.standardize);

  std::cout << out.str();
  if (!a.out.empty()) {
    fs::create_directories(a.out);
    write_file(a.out + "/manifest.txt",
               manifest_text("eval", report.config_echo, a.data, a.out));
    write_file(a.out + "/eval.txt",
               "manifest: " + a.out + "/manifest.txt\n" + out.str());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"plate-shift robustness toolkit: synthetic dataset generation, "
               "statistic-perturbation training and batch-effect evaluation"};
  app.require_subcommand(1);
  app.set_config("--config", "", "key=value config file; flags win");

  GenArgs gen;
  CLI::App* cgen = app.add_subcommand("gen", "generate a plate dataset");
  cgen->add_option("--plates", gen.spec.num_plates, "number of plates")
      ->capture_default_str();
  cgen->add_option("--test-plates", gen.spec.test_plates,
                   "held-out plates (the last ids)")
      ->capture_default_str();
  cgen->add_option("--per-plate", gen.spec.images_per_plate, "images per plate")
      ->capture_default_str();
  cgen->add_option("--classes", gen.spec.num_classes, "number of classes")
      ->capture_default_str();
  cgen->add_option("--channels", gen.spec.channels, "image channels")
      ->capture_default_str();
  cgen->add_option("--size", gen.spec.image_size, "image height = width")
      ->capture_default_str();
  cgen->add_option("--tau", gen.spec.shift_severity,
                   "plate shift severity (gain/offset stddev)")
      ->capture_default_str();
  cgen->add_option("--noise", gen.spec.noise_level, "pixel noise stddev")
      ->capture_default_str();
  cgen->add_option("--seed", gen.seed, "master seed")->capture_default_str();
  cgen->add_option("-o,--out", gen.out, "output dataset path")
      ->capture_default_str();

  TrainArgs tr;
  CLI::App* ctrain = app.add_subcommand("train", "train a model");
  ctrain->add_option("--data", tr.data, "dataset file")->required();
  ctrain->add_option("--method", tr.method, "erm|adabn|advstyle|abra")
      ->capture_default_str();
  ctrain->add_option("--epochs", tr.cfg.epochs, "training epochs")
      ->capture_default_str();
  ctrain->add_option("--batch-size", tr.cfg.batch_size, "mini-batch size")
      ->capture_default_str();
  ctrain->add_option("--lr", tr.cfg.lr, "peak learning rate (linear warmup)")
      ->capture_default_str();
  ctrain->add_option("--weight-decay", tr.cfg.weight_decay, "L2 coefficient")
      ->capture_default_str();
  ctrain->add_option("--lambda", tr.cfg.loss.lambda,
                     "CE weight; 1-lambda goes to the angular term")
      ->capture_default_str();
  ctrain->add_option("--margin", tr.cfg.loss.margin, "angular margin (radians)")
      ->capture_default_str();
  ctrain->add_option("--scale", tr.cfg.loss.scale, "cosine logit scale")
      ->capture_default_str();
  ctrain->add_option("--js-weight", tr.cfg.loss.js_weight,
                     "stability term coefficient")
      ->capture_default_str();
  ctrain->add_option("--sites", tr.sites,
                     "perturbation insertion sites (block indices)")
      ->delimiter(',');
  ctrain->add_option("--ascent-steps", tr.cfg.ascent_steps,
                     "inner maximization steps")
      ->capture_default_str();
  ctrain->add_option("--ascent-lr", tr.cfg.ascent_lr,
                     "ascent step size (<=0: descent schedule)")
      ->capture_default_str();
  ctrain->add_option("--k-clamp", tr.cfg.k_clamp,
                     "elementwise K trust region (0 = unconstrained)")
      ->capture_default_str();
  ctrain->add_option("--spike-threshold", tr.cfg.spike_threshold,
                     "reject updates whose loss exceeds this (0 = off)")
      ->capture_default_str();
  ctrain->add_option("--grad-clip", tr.cfg.grad_clip,
                     "global gradient-norm clip (0 = off)")
      ->capture_default_str();
  ctrain->add_option("--seed", tr.cfg.seed, "master seed")->capture_default_str();
  ctrain->add_flag("--no-augment", tr.no_augment, "disable flip/rotate augmentation");
  ctrain->add_flag("--standardize", tr.cfg.standardize,
                   "per-image channel standardization");
  ctrain->add_option("--out", tr.out, "output directory")->capture_default_str();

  EvalArgs ev;
  CLI::App* ceval = app.add_subcommand("eval", "evaluate a checkpoint");
  ceval->add_option("--checkpoint", ev.checkpoint, "model checkpoint")->required();
  ceval->add_option("--data", ev.data, "dataset file")->required();
  ceval->add_option("--mode", ev.mode, "plain|tta")->capture_default_str();
  ceval->add_option("--split", ev.split, "train|test|all")->capture_default_str();
  ceval->add_option("--sweep", ev.sweep_sizes,
                    "recalibration chunk sizes for the batch-size sweep")
      ->delimiter(',');
  ceval->add_option("--repeats", ev.repeats, "sweep resamplings per size")
      ->capture_default_str();
  ceval->add_option("--diagnostics", ev.diagnostics,
                    "bnshift: per-layer KL/MMD against each test plate");
  ceval->add_option("--embeddings", ev.embeddings,
                    "export per-sample embeddings to this path");
  ceval->add_option("--seed", ev.seed, "sweep resampling seed")
      ->capture_default_str();
  ceval->add_flag("--standardize", ev.standardize,
                  "per-image channel standardization");
  ceval->add_option("--out", ev.out, "optional output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitBadInput;
  }

  try {
    if (cgen->parsed()) return run_gen(gen);
    if (ctrain->parsed()) return run_train(tr);
    if (ceval->parsed()) return run_eval(ev);
  } catch (const abra::TrainError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitTrainAbort;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitBadInput;
  }
  return 0;
}
