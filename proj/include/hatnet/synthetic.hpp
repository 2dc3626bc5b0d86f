#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "hatnet/tensor.hpp"

namespace hatnet {

// Desk-scale synthetic task: each class plants a distinct grating motif
// (horizontal, vertical, diagonal stripes, checkerboard) into a seeded subset
// of bags/words on a zero background with Gaussian pixel noise. The planted
// cells are recorded as ground-truth masks so attention localization is
// checkable.
struct SyntheticSpec {
  std::size_t classes = 4;
  std::size_t samples_per_class = 50;
  std::size_t n = 16;       // bags per image
  std::size_t m = 16;       // words per bag
  std::size_t word_px = 32;
  double density = 0.6;     // fraction of bags planted; same fraction of words per planted bag
  double noise = 0.1;       // Gaussian pixel-noise sigma
  bool train_only = false;  // true: every sample goes to the train split
  std::uint32_t seed = 0;

  void validate() const;
};

struct Sample {
  Tensor words;  // [n, m, word_px, word_px, 1]
  std::size_t label = 0;
  std::string split;                    // "train" | "val" | "test"
  std::vector<std::uint8_t> bag_mask;   // n entries, 1 = motif planted
  std::vector<std::uint8_t> word_mask;  // n*m entries
};

struct Dataset {
  SyntheticSpec spec;
  std::vector<Sample> samples;

  std::vector<std::size_t> split_indices(std::string_view split) const;
};

// The class motif at unit amplitude, [word_px x word_px].
Tensor motif_template(std::size_t cls, std::size_t word_px);

// Deterministic generation: same spec -> identical dataset. Split sizes per
// class: train = round(0.39 k), val = round(0.10 k), test = remainder.
Dataset generate_synthetic(const SyntheticSpec& spec);

// On-disk layout: <dir>/dataset.json + <dir>/samples/NNNNN.htnt (rank-5 word
// pixels). Loading validates shapes against the embedded spec.
void save_dataset(const std::filesystem::path& dir, const Dataset& ds);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace hatnet
