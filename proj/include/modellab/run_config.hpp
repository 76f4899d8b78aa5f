#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "modellab/train.hpp"

namespace mlab {

struct AblationSpec {
  std::vector<std::uint64_t> seeds{1, 2, 3};
  Index single_tap = 5;              // baseline: penultimate encoder layer
  std::vector<Index> multi_taps{2, 4, 5};
};

struct RunConfig {
  ExperimentConfig experiment;
  AblationSpec ablation;
};

/// Defaults: toy model, default stage recipes, 3x3 grid task.
RunConfig default_run_config();

/// Key/value file with sections [model] [vision] [stage.pretrain]
/// [stage.finetune] [data] [seed] [ablation]. Lines are `key = value`;
/// `#` starts a comment. Unknown sections or keys are errors. Keys absent
/// from the file keep their defaults.
RunConfig parse_run_config(std::string_view text);
RunConfig load_run_config(const std::filesystem::path& path);

/// Inverse of parse_run_config for every key it accepts.
std::string format_run_config(const RunConfig& cfg);

}  // namespace mlab
