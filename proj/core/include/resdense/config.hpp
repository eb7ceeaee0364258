#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "resdense/data.hpp"
#include "resdense/model.hpp"
#include "resdense/train.hpp"

namespace resdense {

struct DataConfig {
  // Empty means "supplied on the command line".
  std::filesystem::path root;
  double split_ratio = 0.75;
  AugmentOptions augment;
};

// One file drives model, training and data. The top-level seed also seeds
// training (train.seed mirrors it and is not read from JSON).
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  DataConfig data;
  std::filesystem::path output_dir = "runs/default";
  std::uint64_t seed = 42;

  // Field violations, excluding filesystem checks.
  std::vector<std::string> validate() const;
  // Referenced inputs that do not exist.
  std::vector<std::string> validate_paths() const;
};

// Missing keys keep their defaults; unknown keys, wrong types and invalid
// values are all collected into one ConfigError.
RunConfig parse_run_config(std::string_view json_text);
RunConfig load_run_config(const std::filesystem::path& path);

// Every field, defaults included.
std::string run_config_to_json(const RunConfig& config);

std::string model_config_to_json(const ModelConfig& config);
ModelConfig parse_model_config(std::string_view json_text);

}  // namespace resdense
