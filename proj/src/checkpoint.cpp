#include "abra/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>

namespace abra {

namespace {

// little-endian scalar IO (the build targets LE hosts; asserted via write)
template <typename T>
void write_pod(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw CheckpointError("checkpoint: truncated file");
  return v;
}

void write_named(std::ostream& os, const std::string& name, const Shape& shape,
                 const std::vector<double>& data) {
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(name.size()));
  os.write(name.data(), static_cast<std::streamsize>(name.size()));
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(shape.size()));
  for (auto d : shape) write_pod<std::uint64_t>(os, static_cast<std::uint64_t>(d));
  os.write(reinterpret_cast<const char*>(data.data()),
           static_cast<std::streamsize>(data.size() * sizeof(double)));
}

struct NamedTensor {
  Shape shape;
  std::vector<double> data;
};

NamedTensor read_named(std::istream& is, std::string& name) {
  const auto name_len = read_pod<std::uint32_t>(is);
  name.resize(name_len);
  is.read(name.data(), name_len);
  NamedTensor t;
  const auto ndim = read_pod<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < ndim; ++i)
    t.shape.push_back(static_cast<std::int64_t>(read_pod<std::uint64_t>(is)));
  t.data.resize(static_cast<std::size_t>(numel_of(t.shape)));
  is.read(reinterpret_cast<char*>(t.data.data()),
          static_cast<std::streamsize>(t.data.size() * sizeof(double)));
  if (!is) throw CheckpointError("checkpoint: truncated tensor payload");
  return t;
}

}  // namespace

void save_checkpoint(const std::string& path, Backbone& model,
                     const std::vector<UncertaintySite>& sites) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw CheckpointError("checkpoint: cannot open for writing: " + path);
  os.write("ABRA", 4);
  write_pod<std::uint32_t>(os, kCheckpointVersion);

  const auto& cfg = model.config();
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(cfg.in_channels));
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(cfg.blocks.size()));
  for (const auto& b : cfg.blocks) {
    write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(b.out_channels));
    write_pod<std::uint8_t>(os, b.downsample ? 1 : 0);
  }
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(cfg.feature_dim));
  write_pod<std::uint32_t>(os, static_cast<std::uint32_t>(cfg.num_classes));

  std::uint32_t count = 0;
  for ([[maybe_unused]] const auto& p : model.parameters()) ++count;
  count += static_cast<std::uint32_t>(model.num_blocks()) * 2;  // running stats
  count += static_cast<std::uint32_t>(sites.size()) * 2;        // K vectors
  write_pod<std::uint32_t>(os, count);

  for (auto& p : model.parameters())
    write_named(os, p.name, p.tensor.shape(), p.tensor.data());
  for (int i = 0; i < model.num_blocks(); ++i) {
    auto& bn = model.block(i).bn;
    const Shape s{static_cast<std::int64_t>(bn.running_mu.size())};
    write_named(os, "block" + std::to_string(i) + ".bn.running_mu", s, bn.running_mu);
    write_named(os, "block" + std::to_string(i) + ".bn.running_var", s, bn.running_var);
  }
  for (const auto& site : sites) {
    const std::string prefix = "site" + std::to_string(site.site_id);
    write_named(os, prefix + ".k_mu", site.k_mu.shape(), site.k_mu.data());
    write_named(os, prefix + ".k_sigma", site.k_sigma.shape(), site.k_sigma.data());
  }
  if (!os) throw CheckpointError("checkpoint: write failure: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("checkpoint: cannot open: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "ABRA", 4) != 0)
    throw CheckpointError("checkpoint: bad magic in " + path);
  const auto version = read_pod<std::uint32_t>(is);
  if (version != kCheckpointVersion)
    throw CheckpointError("checkpoint: version mismatch: file has " +
                          std::to_string(version) + ", expected " +
                          std::to_string(kCheckpointVersion));

  BackboneConfig cfg;
  cfg.in_channels = static_cast<int>(read_pod<std::uint32_t>(is));
  const auto nblocks = read_pod<std::uint32_t>(is);
  cfg.blocks.clear();
  for (std::uint32_t i = 0; i < nblocks; ++i) {
    BlockConfig b;
    b.out_channels = static_cast<int>(read_pod<std::uint32_t>(is));
    b.downsample = read_pod<std::uint8_t>(is) != 0;
    cfg.blocks.push_back(b);
  }
  cfg.feature_dim = static_cast<int>(read_pod<std::uint32_t>(is));
  cfg.num_classes = static_cast<int>(read_pod<std::uint32_t>(is));

  Checkpoint ck;
  ck.model = Backbone(cfg);
  RngStream dummy(0, "init");
  ck.model.init(dummy);

  const auto count = read_pod<std::uint32_t>(is);
  std::map<std::string, NamedTensor> tensors;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name;
    NamedTensor t = read_named(is, name);
    tensors.emplace(std::move(name), std::move(t));
  }

  auto take = [&tensors, &path](const std::string& name) -> NamedTensor& {
    auto it = tensors.find(name);
    if (it == tensors.end())
      throw CheckpointError("checkpoint: missing tensor '" + name + "' in " + path);
    return it->second;
  };

  for (auto& p : ck.model.parameters()) {
    NamedTensor& t = take(p.name);
    if (t.shape != p.tensor.shape())
      throw CheckpointError("checkpoint: shape mismatch for '" + p.name + "'");
    p.tensor.data() = t.data;
  }
  for (int i = 0; i < ck.model.num_blocks(); ++i) {
    auto& bn = ck.model.block(i).bn;
    bn.running_mu = take("block" + std::to_string(i) + ".bn.running_mu").data;
    bn.running_var = take("block" + std::to_string(i) + ".bn.running_var").data;
  }
  for (const auto& [name, t] : tensors) {
    if (name.rfind("site", 0) == 0 && name.find(".k_mu") != std::string::npos) {
      const int site_id = std::stoi(name.substr(4, name.find('.') - 4));
      UncertaintySite site;
      site.init(site_id, static_cast<int>(t.shape[0]));
      site.k_mu.data() = t.data;
      site.k_sigma.data() = take("site" + std::to_string(site_id) + ".k_sigma").data;
      ck.sites.push_back(std::move(site));
    }
  }
  return ck;
}

}  // namespace abra
