#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <string>

#include "icd/data.hpp"
#include "icd/nn.hpp"
#include "icd/train.hpp"

namespace icd {

/// Everything a run needs, populated from a line-based "key = value" config
/// file plus command-line overrides. Unknown keys are rejected.
struct RunConfig {
  DatasetSpec dataset;
  std::optional<std::array<double, 3>> norm_mean;  // unset = dataset statistics
  std::optional<std::array<double, 3>> norm_std;
  std::vector<StageSpec> teacher_stages{{16, 2}, {32, 2}, {64, 2}, {128, 1}};
  std::vector<StageSpec> student_stages{{16, 2}, {32, 2}, {64, 2}};
  TrainConfig train;
  std::string method = "icd";
  std::string out_dir = "runs/out";
  std::string teacher_ckpt;
  std::string student_ckpt;

  /// Resolves defaults that depend on other fields (kd_weight follows alpha
  /// unless set explicitly) and validates the bundle.
  void finalize();

  bool kd_weight_set = false;
};

RunConfig parse_config_file(const std::filesystem::path& path);

/// Applies one key/value pair; throws ConfigError for unknown keys or
/// unparsable values.
void apply_config_entry(RunConfig& cfg, const std::string& key, const std::string& value);

/// The fully resolved configuration as sorted key/value text, echoed into
/// run summaries so outputs are self-describing.
std::map<std::string, std::string> config_echo(const RunConfig& cfg);

}  // namespace icd
