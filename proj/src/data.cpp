#include "abra/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

namespace abra {

void PlateSpec::validate() const {
  auto fail = [](const std::string& msg) { throw DatasetError("PlateSpec: " + msg); };
  if (num_plates < 2) fail("num_plates must be >= 2");
  if (test_plates < 1 || test_plates >= num_plates)
    fail("test_plates must be in [1, num_plates)");
  if (num_classes < 2) fail("num_classes must be >= 2");
  if (images_per_plate < num_classes || images_per_plate % num_classes != 0)
    fail("images_per_plate must be a positive multiple of num_classes");
  if (channels < 1) fail("channels must be >= 1");
  if (image_size < 2) fail("image_size must be >= 2");
  if (shift_severity < 0.0) fail("shift_severity must be >= 0");
  if (noise_level < 0.0) fail("noise_level must be >= 0");
}

std::vector<int> PlateDataset::train_plate_indices() const {
  std::vector<int> idx;
  for (std::size_t i = 0; i < plates.size(); ++i)
    if (!plates[i].is_test) idx.push_back(static_cast<int>(i));
  return idx;
}

std::vector<int> PlateDataset::test_plate_indices() const {
  std::vector<int> idx;
  for (std::size_t i = 0; i < plates.size(); ++i)
    if (plates[i].is_test) idx.push_back(static_cast<int>(i));
  return idx;
}

Tensor PlateDataset::batch(int plate_index,
                           const std::vector<int>& sample_indices) const {
  const Plate& p = plates[static_cast<std::size_t>(plate_index)];
  const std::int64_t chw =
      static_cast<std::int64_t>(spec.channels) * spec.image_size * spec.image_size;
  std::vector<double> out(sample_indices.size() * static_cast<std::size_t>(chw));
  for (std::size_t i = 0; i < sample_indices.size(); ++i)
    std::copy_n(p.images.data() + sample_indices[i] * chw, chw,
                out.data() + static_cast<std::int64_t>(i) * chw);
  return Tensor::from_data({static_cast<std::int64_t>(sample_indices.size()),
                            spec.channels, spec.image_size, spec.image_size},
                           std::move(out));
}

std::vector<int> PlateDataset::batch_labels(
    int plate_index, const std::vector<int>& sample_indices) const {
  const Plate& p = plates[static_cast<std::size_t>(plate_index)];
  std::vector<int> ys(sample_indices.size());
  for (std::size_t i = 0; i < sample_indices.size(); ++i)
    ys[i] = p.labels[static_cast<std::size_t>(sample_indices[i])];
  return ys;
}

namespace {

// smooth random spatial field: iid normal, box-blurred twice, then
// standardized to zero mean / unit std over the spatial extent
std::vector<double> smooth_field(int H, int W, RngStream& rng) {
  std::vector<double> f(static_cast<std::size_t>(H) * W);
  for (auto& v : f) v = rng.normal();
  std::vector<double> tmp(f.size());
  for (int pass = 0; pass < 2; ++pass) {
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) {
        double s = 0.0;
        int cnt = 0;
        for (int di = -1; di <= 1; ++di)
          for (int dj = -1; dj <= 1; ++dj) {
            const int ii = i + di, jj = j + dj;
            if (ii >= 0 && ii < H && jj >= 0 && jj < W) {
              s += f[static_cast<std::size_t>(ii) * W + jj];
              ++cnt;
            }
          }
        tmp[static_cast<std::size_t>(i) * W + j] = s / cnt;
      }
    f.swap(tmp);
  }
  double mean = 0.0;
  for (double v : f) mean += v;
  mean /= static_cast<double>(f.size());
  double var = 0.0;
  for (double v : f) var += (v - mean) * (v - mean);
  var /= static_cast<double>(f.size());
  const double inv = 1.0 / std::sqrt(var + 1e-12);
  for (auto& v : f) v = (v - mean) * inv;
  return f;
}

constexpr double kJitterScale = 0.3;

}  // namespace

PlateDataset generate(const PlateSpec& spec, std::uint64_t seed) {
  spec.validate();
  RngStream rng(seed, "data");
  const int H = spec.image_size, W = spec.image_size, C = spec.channels;
  const int HW = H * W;

  // fixed class prototypes
  std::vector<std::vector<double>> protos(static_cast<std::size_t>(spec.num_classes));
  for (auto& proto : protos) {
    proto.reserve(static_cast<std::size_t>(C) * HW);
    for (int c = 0; c < C; ++c) {
      auto field = smooth_field(H, W, rng);
      proto.insert(proto.end(), field.begin(), field.end());
    }
  }

  PlateDataset ds;
  ds.spec = spec;
  ds.seed = seed;
  for (int k = 0; k < spec.num_plates; ++k) {
    Plate plate;
    plate.plate_id = static_cast<std::uint32_t>(k);
    plate.is_test = k >= spec.num_plates - spec.test_plates;
    for (int c = 0; c < C; ++c) {
      plate.gain.push_back(rng.normal(1.0, spec.shift_severity));
      plate.offset.push_back(rng.normal(0.0, spec.shift_severity));
    }
    plate.images.resize(static_cast<std::size_t>(spec.images_per_plate) * C * HW);
    plate.labels.resize(static_cast<std::size_t>(spec.images_per_plate));
    for (int i = 0; i < spec.images_per_plate; ++i) {
      const int y = i % spec.num_classes;  // exactly balanced
      plate.labels[static_cast<std::size_t>(i)] = y;
      double* img = plate.images.data() + static_cast<std::size_t>(i) * C * HW;
      for (int c = 0; c < C; ++c) {
        auto jitter = smooth_field(H, W, rng);
        const double* proto = protos[static_cast<std::size_t>(y)].data() + c * HW;
        for (int p = 0; p < HW; ++p)
          img[c * HW + p] =
              plate.gain[static_cast<std::size_t>(c)] *
                  (proto[p] + kJitterScale * jitter[static_cast<std::size_t>(p)]) +
              plate.offset[static_cast<std::size_t>(c)] +
              spec.noise_level * rng.normal();
      }
    }
    ds.plates.push_back(std::move(plate));
  }
  return ds;
}

// ---- on-disk format ------------------------------------------------------

namespace {

template <typename T>
void wr(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T rd(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw DatasetError("dataset: truncated file");
  return v;
}

}  // namespace

void save_dataset(const std::string& path, const PlateDataset& ds) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DatasetError("dataset: cannot open for writing: " + path);
  const auto& s = ds.spec;
  os.write("PLT1", 4);
  wr<std::uint32_t>(os, static_cast<std::uint32_t>(s.num_plates));
  wr<std::uint32_t>(os, static_cast<std::uint32_t>(s.num_classes));
  wr<std::uint32_t>(os, static_cast<std::uint32_t>(s.channels));
  wr<std::uint32_t>(os, static_cast<std::uint32_t>(s.image_size));
  wr<std::uint32_t>(os, static_cast<std::uint32_t>(s.image_size));
  for (const auto& p : ds.plates) {
    wr<std::uint32_t>(os, p.plate_id);
    wr<std::uint32_t>(os, static_cast<std::uint32_t>(p.labels.size()));
    for (int y : p.labels) wr<std::uint16_t>(os, static_cast<std::uint16_t>(y));
    for (double v : p.images) wr<float>(os, static_cast<float>(v));
  }
  if (!os) throw DatasetError("dataset: write failure: " + path);

  std::ofstream man(path + ".manifest.txt");
  if (!man) throw DatasetError("dataset: cannot write manifest for " + path);
  man << "# plate dataset manifest\n";
  man << "plates: " << s.num_plates << "\n";
  man << "test_plates: " << s.test_plates << "\n";
  man << "images_per_plate: " << s.images_per_plate << "\n";
  man << "classes: " << s.num_classes << "\n";
  man << "channels: " << s.channels << "\n";
  man << "image_size: " << s.image_size << "\n";
  man << "shift_severity: " << s.shift_severity << "\n";
  man << "noise_level: " << s.noise_level << "\n";
  man << "seed: " << ds.seed << "\n";
  man.precision(17);
  for (const auto& p : ds.plates) {
    man << "plate " << p.plate_id << ": split="
        << (p.is_test ? "test" : "train") << " gain=";
    for (std::size_t c = 0; c < p.gain.size(); ++c)
      man << (c ? "," : "") << p.gain[c];
    man << " offset=";
    for (std::size_t c = 0; c < p.offset.size(); ++c)
      man << (c ? "," : "") << p.offset[c];
    man << "\n";
  }
}

PlateDataset load_dataset(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DatasetError("dataset: cannot open: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "PLT1", 4) != 0)
    throw DatasetError("dataset: bad magic in " + path);
  PlateDataset ds;
  auto& s = ds.spec;
  s.num_plates = static_cast<int>(rd<std::uint32_t>(is));
  s.num_classes = static_cast<int>(rd<std::uint32_t>(is));
  s.channels = static_cast<int>(rd<std::uint32_t>(is));
  s.image_size = static_cast<int>(rd<std::uint32_t>(is));
  const int W = static_cast<int>(rd<std::uint32_t>(is));
  if (W != s.image_size) throw DatasetError("dataset: non-square images");

  for (int k = 0; k < s.num_plates; ++k) {
    Plate p;
    p.plate_id = rd<std::uint32_t>(is);
    const auto count = rd<std::uint32_t>(is);
    p.labels.resize(count);
    for (auto& y : p.labels) y = static_cast<int>(rd<std::uint16_t>(is));
    p.images.resize(static_cast<std::size_t>(count) * s.channels * s.image_size *
                    s.image_size);
    for (auto& v : p.images) v = static_cast<double>(rd<float>(is));
    ds.plates.push_back(std::move(p));
  }
  if (!ds.plates.empty())
    s.images_per_plate = static_cast<int>(ds.plates[0].labels.size());

  // split and planted shifts come from the sidecar manifest
  std::ifstream man(path + ".manifest.txt");
  if (man) {
    std::string line;
    while (std::getline(man, line)) {
      std::istringstream ls(line);
      std::string key;
      ls >> key;
      if (key == "test_plates:") ls >> s.test_plates;
      else if (key == "shift_severity:") ls >> s.shift_severity;
      else if (key == "noise_level:") ls >> s.noise_level;
      else if (key == "seed:") ls >> ds.seed;
      else if (key == "plate") {
        int id;
        ls >> id;
        std::string tok;
        while (ls >> tok) {
          auto& p = ds.plates[static_cast<std::size_t>(id)];
          if (tok.rfind("split=", 0) == 0) p.is_test = tok.substr(6) == "test";
          else if (tok.rfind("gain=", 0) == 0 || tok.rfind("offset=", 0) == 0) {
            auto& dst = tok[0] == 'g' ? p.gain : p.offset;
            std::istringstream vs(tok.substr(tok.find('=') + 1));
            std::string num;
            while (std::getline(vs, num, ',')) dst.push_back(std::stod(num));
          }
        }
      }
    }
  } else {
    // standalone PLT1 file: fall back to the default split shape
    s.test_plates = std::max(1, s.num_plates / 4);
    for (std::size_t i = 0; i < ds.plates.size(); ++i)
      ds.plates[i].is_test =
          static_cast<int>(i) >= s.num_plates - s.test_plates;
  }
  return ds;
}

// ---- sampling ------------------------------------------------------------

PlateSampler::PlateSampler(const PlateDataset& ds,
                           std::vector<int> plate_indices, int batch_size)
    : ds_(&ds), plate_indices_(std::move(plate_indices)), batch_size_(batch_size) {
  if (plate_indices_.empty())
    throw DatasetError("PlateSampler: no plates to sample from");
  std::size_t smallest = ds.plates[static_cast<std::size_t>(plate_indices_[0])].labels.size();
  for (int pi : plate_indices_)
    smallest = std::min(smallest, ds.plates[static_cast<std::size_t>(pi)].labels.size());
  if (batch_size < 1 || static_cast<std::size_t>(batch_size) > smallest)
    throw DatasetError("PlateSampler: batch_size " + std::to_string(batch_size) +
                       " exceeds smallest plate size " + std::to_string(smallest));
}

std::vector<PlateSampler::Batch> PlateSampler::epoch(RngStream& rng) const {
  std::vector<int> order = plate_indices_;
  // Fisher-Yates with the shared substream keeps runs reproducible
  for (std::size_t i = order.size(); i > 1; --i)
    std::swap(order[i - 1], order[rng.uniform_index(i)]);

  std::vector<Batch> batches;
  for (int pi : order) {
    const auto n = ds_->plates[static_cast<std::size_t>(pi)].labels.size();
    std::vector<int> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t i = n; i > 1; --i)
      std::swap(idx[i - 1], idx[rng.uniform_index(i)]);
    for (std::size_t start = 0; start < n; start += static_cast<std::size_t>(batch_size_)) {
      Batch b;
      b.plate_index = pi;
      const auto end = std::min(n, start + static_cast<std::size_t>(batch_size_));
      b.sample_indices.assign(idx.begin() + static_cast<std::ptrdiff_t>(start),
                              idx.begin() + static_cast<std::ptrdiff_t>(end));
      batches.push_back(std::move(b));
    }
  }
  return batches;
}

// ---- preprocessing / augmentation ----------------------------------------

Tensor self_standardize(const Tensor& x) {
  if (x.ndim() != 4)
    throw std::invalid_argument("self_standardize: expects NCHW, got " +
                                shape_str(x.shape()));
  const std::int64_t NC = x.dim(0) * x.dim(1), HW = x.dim(2) * x.dim(3);
  if (HW < 2)
    throw std::invalid_argument("self_standardize: needs H*W >= 2");
  std::vector<double> out(x.data().size());
  for (std::int64_t nc = 0; nc < NC; ++nc) {
    const double* p = x.data().data() + nc * HW;
    double mean = 0.0;
    for (std::int64_t i = 0; i < HW; ++i) mean += p[i];
    mean /= static_cast<double>(HW);
    double var = 0.0;
    for (std::int64_t i = 0; i < HW; ++i) var += (p[i] - mean) * (p[i] - mean);
    var /= static_cast<double>(HW);
    const double inv = 1.0 / std::sqrt(var + 1e-12);
    double* q = out.data() + nc * HW;
    for (std::int64_t i = 0; i < HW; ++i) q[i] = (p[i] - mean) * inv;
  }
  return Tensor::from_data(x.shape(), std::move(out));
}

Tensor augment_flips_rotations(const Tensor& x, RngStream& rng) {
  const std::int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  std::vector<double> out = x.data();
  auto at = [&](std::vector<double>& buf, std::int64_t n, std::int64_t c,
                std::int64_t i, std::int64_t j) -> double& {
    return buf[((n * C + c) * H + i) * W + j];
  };
  std::vector<double> tmp(static_cast<std::size_t>(C * H * W));
  for (std::int64_t n = 0; n < N; ++n) {
    const bool hflip = rng.bernoulli(0.5);
    const bool vflip = rng.bernoulli(0.5);
    const bool rot = H == W && rng.bernoulli(0.5);
    if (hflip)
      for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t i = 0; i < H; ++i)
          for (std::int64_t j = 0; j < W / 2; ++j)
            std::swap(at(out, n, c, i, j), at(out, n, c, i, W - 1 - j));
    if (vflip)
      for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t i = 0; i < H / 2; ++i)
          for (std::int64_t j = 0; j < W; ++j)
            std::swap(at(out, n, c, i, j), at(out, n, c, H - 1 - i, j));
    if (rot) {
      for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t i = 0; i < H; ++i)
          for (std::int64_t j = 0; j < W; ++j)
            tmp[(c * H + j) * W + (H - 1 - i)] = at(out, n, c, i, j);
      std::copy(tmp.begin(), tmp.end(),
                out.begin() + static_cast<std::ptrdiff_t>(n * C * H * W));
    }
  }
  return Tensor::from_data(x.shape(), std::move(out));
}

}  // namespace abra
