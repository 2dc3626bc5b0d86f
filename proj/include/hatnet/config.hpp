#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <json.hpp>

#include "hatnet/model.hpp"
#include "hatnet/synthetic.hpp"

namespace hatnet {

// Optimizer and schedule knobs. Defaults: warm up 1e-7 -> 1e-4 over 600
// updates, hold for phase 1, halve for phase 2; 8-step gradient accumulation;
// best-5 checkpoint averaging.
struct TrainConfig {
  double lr_start = 1e-7;
  double lr_peak = 1e-4;
  std::size_t warmup_iters = 600;
  std::size_t epochs_phase1 = 50;
  std::size_t epochs_phase2 = 50;
  double decay_factor = 0.5;
  std::size_t accum_steps = 8;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  bool augment = true;
  std::size_t checkpoint_top_k = 5;

  void validate() const;
};

// One experiment: model geometry + schedule + data recipe + paths + master
// seed. The master seed also drives synthetic generation (synth.seed mirrors
// it on load).
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  SyntheticSpec synth;
  std::string data_dir;
  std::string out_dir;
  std::uint32_t seed = 0;

  void validate() const;
};

// Strict JSON (de)serialization: unknown keys are rejected by full path,
// missing keys fall back to the defaults above, wrong types name the key.
nlohmann::json model_config_to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j, const std::string& prefix = "model");
nlohmann::json train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j, const std::string& prefix = "train");
nlohmann::json synth_spec_to_json(const SyntheticSpec& spec);
SyntheticSpec synth_spec_from_json(const nlohmann::json& j, const std::string& prefix = "synth");
nlohmann::json run_config_to_json(const RunConfig& cfg);
RunConfig run_config_from_json(const nlohmann::json& j);

// Reads, parses, and validates a config file. IoError on unreadable files,
// ConfigError on malformed or invalid content.
RunConfig load_run_config(const std::filesystem::path& file);
void save_run_config(const std::filesystem::path& file, const RunConfig& cfg);

}  // namespace hatnet
