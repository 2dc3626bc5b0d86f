#include "hatnet/checkpoint.hpp"

#include <algorithm>
#include <fstream>
#include <string>

#include <json.hpp>

#include "hatnet/config.hpp"
#include "hatnet/rng.hpp"
#include "hatnet/tensor_io.hpp"

namespace hatnet {

namespace {

using nlohmann::json;

constexpr const char* kFormat = "hatnet-checkpoint";
constexpr int kVersion = 1;

std::string file_for(const std::string& param_name) {
  std::string f = param_name;
  std::replace(f.begin(), f.end(), '.', '_');
  return "params/" + f + ".htnt";
}

}  // namespace

void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ck) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "params", ec);
  if (ec) throw IoError("checkpoint: cannot create " + (dir / "params").string());

  json files = json::object();
  for (const auto& [name, tensor] : ck.params.named_params()) {
    const std::string rel = file_for(name);
    write_htnt(dir / rel, tensor);
    files[name] = rel;
  }
  const json manifest{{"format", kFormat},
                      {"version", kVersion},
                      {"epoch", ck.epoch},
                      {"val_accuracy", ck.val_accuracy},
                      {"model", model_config_to_json(ck.params.cfg)},
                      {"params", files}};
  std::ofstream out(dir / "manifest.json");
  if (!out) throw IoError("checkpoint: cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(2) << "\n";
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw IoError("checkpoint: cannot open " + (dir / "manifest.json").string());
  json manifest;
  try {
    in >> manifest;
  } catch (const json::parse_error& e) {
    throw IoError("checkpoint: " + (dir / "manifest.json").string() + ": " + e.what());
  }
  if (!manifest.is_object() || manifest.value("format", "") != kFormat)
    throw IoError("checkpoint: " + dir.string() + " is not a " + kFormat + " directory");
  if (manifest.value("version", -1) != kVersion)
    throw IoError("checkpoint: unsupported version in " + dir.string());
  if (!manifest.contains("model") || !manifest.contains("params"))
    throw IoError("checkpoint: manifest in " + dir.string() + " lacks model/params");

  Checkpoint ck;
  const ModelConfig cfg = model_config_from_json(manifest.at("model"));
  Rng rng(0);  // shapes only; every value is overwritten below
  ck.params = HatnetParams::init(cfg, rng);
  ck.epoch = manifest.value("epoch", std::size_t{0});
  ck.val_accuracy = manifest.value("val_accuracy", 0.0);

  const json& files = manifest.at("params");
  std::size_t used = 0;
  for (auto& [name, tensor] : ck.params.named_params()) {
    if (!files.contains(name))
      throw IoError("checkpoint: missing parameter \"" + name + "\" in " + dir.string());
    const auto rel = files.at(name).get<std::string>();
    if (!std::filesystem::exists(dir / rel))
      throw IoError("checkpoint: missing tensor file for \"" + name + "\": " +
                    (dir / rel).string());
    Tensor loaded = read_htnt(dir / rel);
    if (loaded.dims() != tensor.dims())
      throw IoError("checkpoint: parameter \"" + name + "\" has dims " +
                    dims_to_string(loaded.dims()) + ", expected " + dims_to_string(tensor.dims()));
    std::copy(loaded.values().begin(), loaded.values().end(), tensor.values_mut().begin());
    ++used;
  }
  if (files.size() != used)
    throw IoError("checkpoint: manifest in " + dir.string() + " lists " +
                  std::to_string(files.size()) + " parameters, model has " + std::to_string(used));
  return ck;
}

}  // namespace hatnet
