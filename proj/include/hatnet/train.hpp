#pragma once

#include <cstdint>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "hatnet/checkpoint.hpp"
#include "hatnet/config.hpp"
#include "hatnet/image.hpp"
#include "hatnet/model.hpp"
#include "hatnet/rng.hpp"
#include "hatnet/synthetic.hpp"

namespace hatnet {

// Unrecoverable training-loop failures: empty splits, non-finite losses.
struct TrainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Piecewise learning-rate schedule, counted in optimizer updates: linear
// warm-up lr_start -> lr_peak over warmup_iters, lr_peak through phase 1,
// lr_peak * decay_factor for phase 2. Continuous at the warm-up end.
double lr_at(const TrainConfig& cfg, std::size_t global_iter, std::size_t epoch);

// ADAM with bias correction. Moments are kept per named parameter in double
// precision and persist across steps; the parameter registry must keep its
// names and shapes for the lifetime of the state.
class AdamState {
 public:
  AdamState() = default;
  AdamState(const HatnetParams& params, const TrainConfig& cfg);

  // One update from the gradients currently on `params`, each multiplied by
  // `grad_scale` (used to average accumulated gradients).
  void step(HatnetParams& params, double lr, double grad_scale = 1.0);

  std::size_t updates() const { return t_; }

 private:
  struct Slot {
    std::string name;
    std::vector<double> m, v;
  };
  std::vector<Slot> slots_;
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  std::size_t t_ = 0;
};

// One word's augmentation knobs. The default draw is the identity transform.
struct AugmentDraw {
  double resize_ratio = 1.0;  // from {0.75, 0.875, 1.0, 1.125, 1.25}
  bool hflip = false;
  bool vflip = false;
  double angle_deg = 0.0;  // uniform in [-10, 10]
};

AugmentDraw draw_augment(Rng& rng);

// Resize down/up and back, flips, then rotation about the center with
// reflected edges. Identity knobs reproduce the input bit-exactly.
ImageBuf apply_augment(const ImageBuf& word, const AugmentDraw& draw);

ImageBuf augment_word(const ImageBuf& word, Rng& rng);

// Applies an independent augment_word draw to every word of a rank-5
// [n, m, word_px, word_px, c] pixel tensor.
Tensor augment_words(const Tensor& words, Rng& rng);

// One pass over `order`: per-sample forward + backward, gradients accumulated
// for cfg.accum_steps samples (trailing partial group included) and applied
// as one averaged ADAM update. `global_iter` counts optimizer updates and
// feeds lr_at. Returns the mean per-sample loss.
double train_epoch(HatnetParams& params, AdamState& adam, const Dataset& ds,
                   std::span<const std::size_t> order, const TrainConfig& cfg, std::size_t epoch,
                   std::size_t& global_iter, Rng& aug_rng);

// Top-1 accuracy over the given sample indices.
double split_accuracy(const HatnetParams& params, const Dataset& ds,
                      std::span<const std::size_t> indices);

// Arithmetic per-parameter mean of the best `top_k` checkpoints, ranked by
// validation accuracy (ties broken toward the earlier epoch).
HatnetParams average_checkpoints(const std::vector<Checkpoint>& checkpoints, std::size_t top_k);

// One line-delimited JSON record per epoch.
struct TrainLogEntry {
  std::size_t epoch = 0;      // 0-based epoch index
  std::size_t iter = 0;       // optimizer updates completed so far
  double lr = 0.0;            // learning rate of the epoch's last update
  double loss = 0.0;          // mean per-sample training loss
  double val_accuracy = 0.0;  // selection-split accuracy after the epoch
};

nlohmann::json log_entry_to_json(const TrainLogEntry& entry);

struct TrainResult {
  HatnetParams params;  // average of the best checkpoints
  std::vector<TrainLogEntry> log;
  double best_val_accuracy = 0.0;
};

// Full recipe: seeded init, epochs_phase1 + epochs_phase2 epochs with
// per-epoch shuffling and optional augmentation, per-epoch checkpointing, and
// best-k averaging. Checkpoints are selected on the "val" split, falling back
// to "train" when the dataset has no validation samples. When `log_stream`
// is given, each epoch's record is written as one JSON line.
TrainResult train_model(const RunConfig& cfg, const Dataset& ds, std::ostream* log_stream = nullptr);

}  // namespace hatnet
