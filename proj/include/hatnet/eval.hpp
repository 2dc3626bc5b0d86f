#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "hatnet/image.hpp"
#include "hatnet/model.hpp"
#include "hatnet/synthetic.hpp"

namespace hatnet {

// ---------------------------------------------------------------------------
// Classification metrics
// ---------------------------------------------------------------------------

// C x C integer counts, rows = ground truth, columns = prediction.
struct ConfusionMatrix {
  std::size_t classes = 0;
  std::vector<std::size_t> counts;  // row-major

  std::size_t at(std::size_t truth, std::size_t pred) const {
    return counts[truth * classes + pred];
  }
  std::size_t total() const;
  std::size_t support(std::size_t cls) const;          // row sum
  std::size_t predicted_count(std::size_t cls) const;  // column sum
};

ConfusionMatrix confusion(std::span<const std::size_t> preds, std::span<const std::size_t> labels,
                          std::size_t classes);

struct ClassMetrics {
  std::size_t support = 0;
  bool defined = false;  // false when the class has zero support
  double precision = 0.0;
  double recall = 0.0;  // a.k.a. sensitivity
  double f1 = 0.0;
  double specificity = 0.0;
  bool auc_defined = false;  // needs at least one positive and one negative
  double auc = 0.0;          // one-vs-rest ROC-AUC
};

// Macro averages are unweighted means over classes with nonzero support;
// zero-support classes are reported undefined and excluded. Weighted F1 is
// support-weighted. Degenerate denominators use the documented conventions:
// precision 0/0 -> 0 (keeps F1 pessimistic), specificity 0/0 -> 1 (vacuous:
// there were no negatives to mislabel).
struct MetricsReport {
  double accuracy = 0.0;
  std::vector<ClassMetrics> per_class;
  double macro_f1 = 0.0;
  double weighted_f1 = 0.0;
  double macro_sensitivity = 0.0;
  double macro_specificity = 0.0;
  double macro_auc = 0.0;  // over classes where AUC is defined
};

// `scores[i]` is sample i's per-class score vector (e.g. probabilities) and
// feeds the one-vs-rest ROC-AUC: a deterministic descending threshold sweep
// over tied score groups, integrated with the trapezoid rule. Pass empty
// scores/labels to skip AUC (reported undefined).
MetricsReport report(const ConfusionMatrix& cm,
                     const std::vector<std::vector<double>>& scores = {},
                     std::span<const std::size_t> labels = {});

nlohmann::json confusion_to_json(const ConfusionMatrix& cm);
nlohmann::json metrics_to_json(const MetricsReport& m);

// ---------------------------------------------------------------------------
// Attention overlap
// ---------------------------------------------------------------------------

// 2|A∩B| / (|A| + |B|) over binary masks of equal size; 1.0 when both are
// empty (documented convention).
double dice(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b);

enum class OverlapLevel { bag, word };

struct OverlapOptions {
  // When set, the predicted mask keeps only top-k cells that fall inside the
  // annotation before scoring (the stricter in-region counting variant).
  bool restrict_to_mask = false;
};

// Builds the predicted mask from the record's top-k bags (or words) and
// scores it against the annotated mask with dice.
double attention_overlap(const AttentionRecord& rec, std::span<const std::uint8_t> mask,
                         double k_percent, OverlapLevel level, OverlapOptions opts = {});

// Downsamples a pixel-level {0,1} mask to a grid x grid mask: a cell is set
// when at least half of its pixels are set. Mask sides must be divisible by
// `grid`.
std::vector<std::uint8_t> rasterize_mask(const ImageBuf& pixel_mask, std::size_t grid);

// Mean per-class overlap at each k over the given samples.
struct DiceSweepRow {
  double k_percent = 0.0;
  std::size_t cls = 0;
  double dice = 0.0;
};

std::vector<DiceSweepRow> dice_sweep(const HatnetParams& params, const Dataset& ds,
                                     std::span<const std::size_t> indices,
                                     std::span<const double> k_percents, OverlapLevel level,
                                     OverlapOptions opts = {});

// "k_percent,class,dice" header plus one row per entry.
std::string dice_sweep_csv(std::span<const DiceSweepRow> rows);

// ---------------------------------------------------------------------------
// Whole-split evaluation
// ---------------------------------------------------------------------------

struct EvalOutcome {
  ConfusionMatrix cm;
  MetricsReport metrics;
};

EvalOutcome evaluate(const HatnetParams& params, const Dataset& ds,
                     std::span<const std::size_t> indices);

// ---------------------------------------------------------------------------
// Latency benchmark
// ---------------------------------------------------------------------------

struct BenchResult {
  double mean_seconds = 0.0;
  double std_seconds = 0.0;  // sample standard deviation
  std::size_t trials = 0;

  // "X s ± Y ms" layout.
  std::string formatted() const;
};

// Times `fn` over `trials` runs after `warmup` discarded passes. trials >= 2.
BenchResult benchmark(const std::function<void()>& fn, std::size_t trials = 100,
                      std::size_t warmup = 3);

// Forward-pass latency of the model on one fixed input.
BenchResult benchmark_forward(const HatnetParams& params, const Tensor& words,
                              std::size_t trials = 100);

}  // namespace hatnet
