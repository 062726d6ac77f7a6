#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "icd/nn.hpp"

namespace icd {

/// On-disk model snapshot: a text manifest of key = value lines followed by
/// one ICDT blob per parameter in canonical order (stage<i>.weight,
/// stage<i>.bias, ..., classifier.weight).
struct Checkpoint {
  ConvNetSpec spec;
  std::map<std::string, std::string> meta;
  std::vector<std::pair<std::string, Tensor>> tensors;
};

void save_checkpoint(const std::filesystem::path& path, const ConvNet& net,
                     const std::map<std::string, std::string>& extra_meta);

Checkpoint load_checkpoint(const std::filesystem::path& path);

ConvNet checkpoint_to_net(const Checkpoint& ckpt, bool trainable);

/// Meta value helpers (doubles round-trip through %.17g).
std::string meta_double(double v);
double meta_get_double(const Checkpoint& ckpt, const std::string& key);

}  // namespace icd
