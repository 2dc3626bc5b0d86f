#include "hatnet/config.hpp"

#include <fstream>
#include <initializer_list>
#include <set>

#include "hatnet/tensor_io.hpp"

namespace hatnet {

namespace {

using nlohmann::json;

std::string join_key(const std::string& prefix, const std::string& key) {
  return prefix.empty() ? key : prefix + "." + key;
}

void reject_unknown_keys(const json& j, const std::string& prefix,
                         std::initializer_list<const char*> allowed) {
  if (!j.is_object())
    throw ConfigError("config: " + (prefix.empty() ? std::string("document") : prefix) +
                      ": expected an object");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, value] : j.items())
    if (!ok.contains(key)) throw ConfigError("config: unknown key \"" + join_key(prefix, key) + "\"");
}

// Accepts any integral JSON number >= 0 (parsers store small literals signed).
bool nonnegative_integer(const json& v) {
  return v.is_number_unsigned() || (v.is_number_integer() && v.get<std::int64_t>() >= 0);
}

void read_size(const json& j, const char* key, const std::string& prefix, std::size_t& out) {
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  if (!nonnegative_integer(v))
    throw ConfigError("config: " + join_key(prefix, key) + ": expected a non-negative integer");
  out = v.get<std::size_t>();
}

void read_u32(const json& j, const char* key, const std::string& prefix, std::uint32_t& out) {
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  if (!nonnegative_integer(v) || v.get<std::uint64_t>() > 0xffffffffull)
    throw ConfigError("config: " + join_key(prefix, key) +
                      ": expected a non-negative 32-bit integer");
  out = v.get<std::uint32_t>();
}

void read_double(const json& j, const char* key, const std::string& prefix, double& out) {
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  if (!v.is_number())
    throw ConfigError("config: " + join_key(prefix, key) + ": expected a number");
  out = v.get<double>();
}

void read_bool(const json& j, const char* key, const std::string& prefix, bool& out) {
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  if (!v.is_boolean())
    throw ConfigError("config: " + join_key(prefix, key) + ": expected a boolean");
  out = v.get<bool>();
}

void read_string(const json& j, const char* key, const std::string& prefix, std::string& out) {
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  if (!v.is_string())
    throw ConfigError("config: " + join_key(prefix, key) + ": expected a string");
  out = v.get<std::string>();
}

}  // namespace

void TrainConfig::validate() const {
  if (warmup_iters < 1) throw ConfigError("train.warmup_iters: must be >= 1");
  if (accum_steps < 1) throw ConfigError("train.accum_steps: must be >= 1");
  if (!(decay_factor > 0.0) || !(decay_factor < 1.0))
    throw ConfigError("train.decay_factor: must lie in (0, 1), got " +
                      std::to_string(decay_factor));
  if (!(lr_start > 0.0) || !(lr_peak > 0.0) || lr_peak < lr_start)
    throw ConfigError("train.lr_start/lr_peak: need 0 < lr_start <= lr_peak");
  if (!(beta1 >= 0.0) || beta1 >= 1.0 || !(beta2 >= 0.0) || beta2 >= 1.0)
    throw ConfigError("train.beta1/beta2: must lie in [0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("train.adam_eps: must be positive");
  if (checkpoint_top_k < 1) throw ConfigError("train.checkpoint_top_k: must be >= 1");
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  synth.validate();
  if (model.encoder == EncoderMode::toy) model.tiling.validate_geometry();
}

nlohmann::json model_config_to_json(const ModelConfig& cfg) {
  return json{{"n", cfg.tiling.n},
              {"m", cfg.tiling.m},
              {"bag_px", cfg.tiling.bag_px},
              {"word_px", cfg.tiling.word_px},
              {"channels", cfg.tiling.channels},
              {"d", cfg.tiling.d},
              {"heads", cfg.heads},
              {"classes", cfg.classes},
              {"psi", to_string(cfg.psi)},
              {"encoder", to_string(cfg.encoder)},
              {"patch", cfg.enc.patch},
              {"f1", cfg.enc.f1},
              {"f2", cfg.enc.f2},
              {"bias", cfg.bias},
              {"residual_norm", cfg.residual_norm}};
}

ModelConfig model_config_from_json(const nlohmann::json& j, const std::string& prefix) {
  reject_unknown_keys(j, prefix,
                      {"n", "m", "bag_px", "word_px", "channels", "d", "heads", "classes", "psi",
                       "encoder", "patch", "f1", "f2", "bias", "residual_norm"});
  ModelConfig cfg;
  read_size(j, "n", prefix, cfg.tiling.n);
  read_size(j, "m", prefix, cfg.tiling.m);
  read_size(j, "bag_px", prefix, cfg.tiling.bag_px);
  read_size(j, "word_px", prefix, cfg.tiling.word_px);
  read_size(j, "channels", prefix, cfg.tiling.channels);
  read_size(j, "d", prefix, cfg.tiling.d);
  read_size(j, "heads", prefix, cfg.heads);
  read_size(j, "classes", prefix, cfg.classes);
  std::string psi = to_string(cfg.psi);
  read_string(j, "psi", prefix, psi);
  cfg.psi = psi_kind_from_string(psi);
  std::string encoder = to_string(cfg.encoder);
  read_string(j, "encoder", prefix, encoder);
  cfg.encoder = encoder_mode_from_string(encoder);
  read_size(j, "patch", prefix, cfg.enc.patch);
  read_size(j, "f1", prefix, cfg.enc.f1);
  read_size(j, "f2", prefix, cfg.enc.f2);
  read_bool(j, "bias", prefix, cfg.bias);
  read_bool(j, "residual_norm", prefix, cfg.residual_norm);
  return cfg;
}

nlohmann::json train_config_to_json(const TrainConfig& cfg) {
  return json{{"lr_start", cfg.lr_start},
              {"lr_peak", cfg.lr_peak},
              {"warmup_iters", cfg.warmup_iters},
              {"epochs_phase1", cfg.epochs_phase1},
              {"epochs_phase2", cfg.epochs_phase2},
              {"decay_factor", cfg.decay_factor},
              {"accum_steps", cfg.accum_steps},
              {"beta1", cfg.beta1},
              {"beta2", cfg.beta2},
              {"adam_eps", cfg.adam_eps},
              {"augment", cfg.augment},
              {"checkpoint_top_k", cfg.checkpoint_top_k}};
}

TrainConfig train_config_from_json(const nlohmann::json& j, const std::string& prefix) {
  reject_unknown_keys(j, prefix,
                      {"lr_start", "lr_peak", "warmup_iters", "epochs_phase1", "epochs_phase2",
                       "decay_factor", "accum_steps", "beta1", "beta2", "adam_eps", "augment",
                       "checkpoint_top_k"});
  TrainConfig cfg;
  read_double(j, "lr_start", prefix, cfg.lr_start);
  read_double(j, "lr_peak", prefix, cfg.lr_peak);
  read_size(j, "warmup_iters", prefix, cfg.warmup_iters);
  read_size(j, "epochs_phase1", prefix, cfg.epochs_phase1);
  read_size(j, "epochs_phase2", prefix, cfg.epochs_phase2);
  read_double(j, "decay_factor", prefix, cfg.decay_factor);
  read_size(j, "accum_steps", prefix, cfg.accum_steps);
  read_double(j, "beta1", prefix, cfg.beta1);
  read_double(j, "beta2", prefix, cfg.beta2);
  read_double(j, "adam_eps", prefix, cfg.adam_eps);
  read_bool(j, "augment", prefix, cfg.augment);
  read_size(j, "checkpoint_top_k", prefix, cfg.checkpoint_top_k);
  return cfg;
}

nlohmann::json synth_spec_to_json(const SyntheticSpec& spec) {
  return json{{"classes", spec.classes},
              {"samples_per_class", spec.samples_per_class},
              {"n", spec.n},
              {"m", spec.m},
              {"word_px", spec.word_px},
              {"density", spec.density},
              {"noise", spec.noise},
              {"train_only", spec.train_only}};
}

SyntheticSpec synth_spec_from_json(const nlohmann::json& j, const std::string& prefix) {
  reject_unknown_keys(j, prefix,
                      {"classes", "samples_per_class", "n", "m", "word_px", "density", "noise",
                       "train_only"});
  SyntheticSpec spec;
  read_size(j, "classes", prefix, spec.classes);
  read_size(j, "samples_per_class", prefix, spec.samples_per_class);
  read_size(j, "n", prefix, spec.n);
  read_size(j, "m", prefix, spec.m);
  read_size(j, "word_px", prefix, spec.word_px);
  read_double(j, "density", prefix, spec.density);
  read_double(j, "noise", prefix, spec.noise);
  read_bool(j, "train_only", prefix, spec.train_only);
  return spec;
}

nlohmann::json run_config_to_json(const RunConfig& cfg) {
  return json{{"model", model_config_to_json(cfg.model)},
              {"train", train_config_to_json(cfg.train)},
              {"synth", synth_spec_to_json(cfg.synth)},
              {"data_dir", cfg.data_dir},
              {"out_dir", cfg.out_dir},
              {"seed", cfg.seed}};
}

RunConfig run_config_from_json(const nlohmann::json& j) {
  reject_unknown_keys(j, "", {"model", "train", "synth", "data_dir", "out_dir", "seed"});
  RunConfig cfg;
  if (j.contains("model")) cfg.model = model_config_from_json(j.at("model"));
  if (j.contains("train")) cfg.train = train_config_from_json(j.at("train"));
  if (j.contains("synth")) cfg.synth = synth_spec_from_json(j.at("synth"));
  read_string(j, "data_dir", "", cfg.data_dir);
  read_string(j, "out_dir", "", cfg.out_dir);
  read_u32(j, "seed", "", cfg.seed);
  cfg.synth.seed = cfg.seed;
  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw IoError("config: cannot open " + file.string());
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw ConfigError("config: " + file.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

void save_run_config(const std::filesystem::path& file, const RunConfig& cfg) {
  std::ofstream out(file);
  if (!out) throw IoError("config: cannot write " + file.string());
  out << run_config_to_json(cfg).dump(2) << "\n";
}

}  // namespace hatnet
