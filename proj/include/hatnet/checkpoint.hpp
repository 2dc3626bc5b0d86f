#pragma once

#include <cstddef>
#include <filesystem>

#include "hatnet/model.hpp"

namespace hatnet {

// A parameter snapshot with its selection metadata.
struct Checkpoint {
  HatnetParams params;
  double val_accuracy = 0.0;
  std::size_t epoch = 0;
};

// On-disk layout: <dir>/manifest.json (format tag, model config, metadata,
// parameter-name -> file map) plus <dir>/params/<name>.htnt, one tensor per
// named parameter. Loading rebuilds the model from the embedded config and
// fails with IoError if any parameter is missing, extra, or misshapen.
void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace hatnet
