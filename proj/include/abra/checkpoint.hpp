#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "abra/model.hpp"
#include "abra/uncertainty.hpp"

namespace abra {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Self-describing binary: header {magic "ABRA", version u32, backbone
// config}, then named parameter tensors (length-prefixed UTF-8 name,
// shape, raw little-endian doubles). Running BN statistics and the
// per-site K vectors are stored as named tensors so training can resume;
// inference ignores K.
void save_checkpoint(const std::string& path, Backbone& model,
                     const std::vector<UncertaintySite>& sites);

struct Checkpoint {
  Backbone model;
  std::vector<UncertaintySite> sites;
};

Checkpoint load_checkpoint(const std::string& path);

}  // namespace abra
