#include "hatnet/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

namespace hatnet {

namespace {

// Trapezoidal ROC integration over a deterministic descending threshold
// sweep; tied scores advance as one group, which matches the half-credit
// rank statistic.
double roc_auc(const std::vector<double>& scores, const std::vector<bool>& positive) {
  std::size_t pos = 0;
  for (const bool p : positive) pos += p ? 1 : 0;
  const std::size_t neg = positive.size() - pos;
  if (pos == 0 || neg == 0) return -1.0;  // undefined, caller flags it

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return a < b;
  });

  double auc = 0.0;
  double tpr_prev = 0.0, fpr_prev = 0.0;
  std::size_t tp = 0, fp = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) {
      if (positive[order[j]]) ++tp;
      else ++fp;
      ++j;
    }
    const double tpr = static_cast<double>(tp) / static_cast<double>(pos);
    const double fpr = static_cast<double>(fp) / static_cast<double>(neg);
    auc += (fpr - fpr_prev) * (tpr + tpr_prev) / 2.0;
    tpr_prev = tpr;
    fpr_prev = fpr;
    i = j;
  }
  return auc;
}

std::vector<std::uint8_t> topk_mask(const AttentionRecord& rec, double k_percent,
                                    OverlapLevel level, std::size_t expected) {
  std::vector<std::uint8_t> pred(expected, 0);
  if (level == OverlapLevel::bag) {
    for (const std::size_t b : top_k_bags(rec, k_percent)) pred[b] = 1;
  } else {
    const std::size_t m = rec.word_coeffs.dims()[1];
    for (const auto& [b, w] : top_k_words(rec, k_percent)) pred[b * m + w] = 1;
  }
  return pred;
}

}  // namespace

std::size_t ConfusionMatrix::total() const {
  return std::accumulate(counts.begin(), counts.end(), std::size_t{0});
}

std::size_t ConfusionMatrix::support(std::size_t cls) const {
  std::size_t sum = 0;
  for (std::size_t p = 0; p < classes; ++p) sum += at(cls, p);
  return sum;
}

std::size_t ConfusionMatrix::predicted_count(std::size_t cls) const {
  std::size_t sum = 0;
  for (std::size_t t = 0; t < classes; ++t) sum += at(t, cls);
  return sum;
}

ConfusionMatrix confusion(std::span<const std::size_t> preds, std::span<const std::size_t> labels,
                          std::size_t classes) {
  if (classes < 2)
    throw ContractError("confusion: need at least 2 classes, got " + std::to_string(classes));
  if (preds.size() != labels.size())
    throw ShapeError("confusion: " + std::to_string(preds.size()) + " predictions vs " +
                     std::to_string(labels.size()) + " labels");
  ConfusionMatrix cm;
  cm.classes = classes;
  cm.counts.assign(classes * classes, 0);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i] >= classes || labels[i] >= classes)
      throw IndexError("confusion: sample " + std::to_string(i) + " has class " +
                       std::to_string(std::max(preds[i], labels[i])) + " >= " +
                       std::to_string(classes));
    ++cm.counts[labels[i] * classes + preds[i]];
  }
  return cm;
}

MetricsReport report(const ConfusionMatrix& cm, const std::vector<std::vector<double>>& scores,
                     std::span<const std::size_t> labels) {
  const std::size_t total = cm.total();
  if (total == 0) throw ContractError("report: empty confusion matrix");
  if (!scores.empty() && scores.size() != labels.size())
    throw ShapeError("report: " + std::to_string(scores.size()) + " score vectors vs " +
                     std::to_string(labels.size()) + " labels");

  MetricsReport out;
  std::size_t trace = 0;
  for (std::size_t c = 0; c < cm.classes; ++c) trace += cm.at(c, c);
  out.accuracy = static_cast<double>(trace) / static_cast<double>(total);

  out.per_class.resize(cm.classes);
  for (std::size_t c = 0; c < cm.classes; ++c) {
    ClassMetrics& m = out.per_class[c];
    const std::size_t tp = cm.at(c, c);
    const std::size_t fn = cm.support(c) - tp;
    const std::size_t fp = cm.predicted_count(c) - tp;
    const std::size_t tn = total - tp - fn - fp;
    m.support = cm.support(c);
    m.defined = m.support > 0;
    m.precision =
        (tp + fp) == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
    m.recall = m.defined ? static_cast<double>(tp) / static_cast<double>(m.support) : 0.0;
    m.f1 = (m.precision + m.recall) == 0.0
               ? 0.0
               : 2.0 * m.precision * m.recall / (m.precision + m.recall);
    m.specificity =
        (tn + fp) == 0 ? 1.0 : static_cast<double>(tn) / static_cast<double>(tn + fp);

    if (!scores.empty()) {
      std::vector<double> class_scores(scores.size());
      std::vector<bool> positive(scores.size());
      for (std::size_t i = 0; i < scores.size(); ++i) {
        if (scores[i].size() != cm.classes)
          throw ShapeError("report: sample " + std::to_string(i) + " has " +
                           std::to_string(scores[i].size()) + " scores, expected " +
                           std::to_string(cm.classes));
        class_scores[i] = scores[i][c];
        positive[i] = labels[i] == c;
      }
      const double auc = roc_auc(class_scores, positive);
      m.auc_defined = auc >= 0.0;
      m.auc = m.auc_defined ? auc : 0.0;
    }
  }

  std::size_t defined = 0, auc_defined = 0, weighted_support = 0;
  for (const ClassMetrics& m : out.per_class) {
    if (m.defined) {
      ++defined;
      out.macro_f1 += m.f1;
      out.macro_sensitivity += m.recall;
      out.macro_specificity += m.specificity;
      out.weighted_f1 += m.f1 * static_cast<double>(m.support);
      weighted_support += m.support;
    }
    if (m.auc_defined) {
      ++auc_defined;
      out.macro_auc += m.auc;
    }
  }
  if (defined > 0) {
    out.macro_f1 /= static_cast<double>(defined);
    out.macro_sensitivity /= static_cast<double>(defined);
    out.macro_specificity /= static_cast<double>(defined);
    out.weighted_f1 /= static_cast<double>(weighted_support);
  }
  if (auc_defined > 0) out.macro_auc /= static_cast<double>(auc_defined);
  return out;
}

nlohmann::json confusion_to_json(const ConfusionMatrix& cm) {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t t = 0; t < cm.classes; ++t) {
    nlohmann::json row = nlohmann::json::array();
    for (std::size_t p = 0; p < cm.classes; ++p) row.push_back(cm.at(t, p));
    rows.push_back(row);
  }
  return nlohmann::json{{"classes", cm.classes}, {"rows_are_truth", true}, {"counts", rows}};
}

nlohmann::json metrics_to_json(const MetricsReport& m) {
  nlohmann::json per_class = nlohmann::json::array();
  for (std::size_t c = 0; c < m.per_class.size(); ++c) {
    const ClassMetrics& cls = m.per_class[c];
    nlohmann::json j{{"class", c},
                     {"support", cls.support},
                     {"defined", cls.defined},
                     {"precision", cls.precision},
                     {"recall", cls.recall},
                     {"sensitivity", cls.recall},
                     {"f1", cls.f1},
                     {"specificity", cls.specificity}};
    if (cls.auc_defined) j["roc_auc"] = cls.auc;
    per_class.push_back(j);
  }
  return nlohmann::json{{"accuracy", m.accuracy},
                        {"macro_f1", m.macro_f1},
                        {"weighted_f1", m.weighted_f1},
                        {"macro_sensitivity", m.macro_sensitivity},
                        {"macro_specificity", m.macro_specificity},
                        {"macro_roc_auc", m.macro_auc},
                        {"per_class", per_class}};
}

double dice(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) {
  if (a.size() != b.size())
    throw ShapeError("dice: mask sizes differ, " + std::to_string(a.size()) + " vs " +
                     std::to_string(b.size()));
  std::size_t inter = 0, count = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool in_a = a[i] != 0, in_b = b[i] != 0;
    inter += (in_a && in_b) ? 1 : 0;
    count += (in_a ? 1 : 0) + (in_b ? 1 : 0);
  }
  if (count == 0) return 1.0;  // both empty
  return 2.0 * static_cast<double>(inter) / static_cast<double>(count);
}

double attention_overlap(const AttentionRecord& rec, std::span<const std::uint8_t> mask,
                         double k_percent, OverlapLevel level, OverlapOptions opts) {
  const std::size_t expected = level == OverlapLevel::bag
                                   ? rec.bag_coeffs.numel()
                                   : rec.word_coeffs.numel();
  if (mask.size() != expected)
    throw ShapeError("attention_overlap: mask has " + std::to_string(mask.size()) +
                     " cells, attention record has " + std::to_string(expected));
  std::vector<std::uint8_t> pred = topk_mask(rec, k_percent, level, expected);
  if (opts.restrict_to_mask)
    for (std::size_t i = 0; i < pred.size(); ++i) pred[i] = pred[i] && mask[i];
  return dice(pred, mask);
}

std::vector<std::uint8_t> rasterize_mask(const ImageBuf& pixel_mask, std::size_t grid) {
  if (grid == 0 || pixel_mask.h % grid != 0 || pixel_mask.w % grid != 0)
    throw ShapeError("rasterize_mask: " + std::to_string(pixel_mask.h) + "x" +
                     std::to_string(pixel_mask.w) + " mask does not tile a " +
                     std::to_string(grid) + "-cell grid");
  const std::size_t cell_h = pixel_mask.h / grid, cell_w = pixel_mask.w / grid;
  std::vector<std::uint8_t> out(grid * grid, 0);
  for (std::size_t gy = 0; gy < grid; ++gy)
    for (std::size_t gx = 0; gx < grid; ++gx) {
      std::size_t on = 0;
      for (std::size_t y = 0; y < cell_h; ++y)
        for (std::size_t x = 0; x < cell_w; ++x)
          on += pixel_mask.at(gy * cell_h + y, gx * cell_w + x) != 0.0f ? 1 : 0;
      out[gy * grid + gx] = 2 * on >= cell_h * cell_w ? 1 : 0;
    }
  return out;
}

std::vector<DiceSweepRow> dice_sweep(const HatnetParams& params, const Dataset& ds,
                                     std::span<const std::size_t> indices,
                                     std::span<const double> k_percents, OverlapLevel level,
                                     OverlapOptions opts) {
  for (auto& [name, tensor] : params.named_params()) tensor.set_requires_grad(false);
  // Per (k, class): sum of dice scores and sample count.
  std::vector<std::vector<double>> sums(k_percents.size(),
                                        std::vector<double>(params.cfg.classes, 0.0));
  std::vector<std::vector<std::size_t>> counts(
      k_percents.size(), std::vector<std::size_t>(params.cfg.classes, 0));
  for (const std::size_t idx : indices) {
    const Sample& s = ds.samples[idx];
    const ForwardResult res = forward(params, s.words);
    const auto& mask = level == OverlapLevel::bag ? s.bag_mask : s.word_mask;
    for (std::size_t ki = 0; ki < k_percents.size(); ++ki) {
      sums[ki][s.label] += attention_overlap(res.attention, mask, k_percents[ki], level, opts);
      counts[ki][s.label] += 1;
    }
  }
  for (auto& [name, tensor] : params.named_params()) tensor.set_requires_grad(true);

  std::vector<DiceSweepRow> rows;
  for (std::size_t ki = 0; ki < k_percents.size(); ++ki)
    for (std::size_t c = 0; c < params.cfg.classes; ++c)
      if (counts[ki][c] > 0)
        rows.push_back({k_percents[ki], c, sums[ki][c] / static_cast<double>(counts[ki][c])});
  return rows;
}

std::string dice_sweep_csv(std::span<const DiceSweepRow> rows) {
  std::ostringstream out;
  out << "k_percent,class,dice\n";
  for (const DiceSweepRow& r : rows) {
    char line[96];
    std::snprintf(line, sizeof line, "%.6g,%zu,%.6f\n", r.k_percent, r.cls, r.dice);
    out << line;
  }
  return out.str();
}

EvalOutcome evaluate(const HatnetParams& params, const Dataset& ds,
                     std::span<const std::size_t> indices) {
  if (indices.empty()) throw ContractError("evaluate: empty sample list");
  for (auto& [name, tensor] : params.named_params()) tensor.set_requires_grad(false);
  std::vector<std::size_t> preds, labels;
  std::vector<std::vector<double>> scores;
  for (const std::size_t idx : indices) {
    const Sample& s = ds.samples[idx];
    const ForwardResult res = forward(params, s.words);
    preds.push_back(res.predicted_class);
    labels.push_back(s.label);
    const auto probs = res.probs.values();
    scores.emplace_back(probs.begin(), probs.end());
  }
  for (auto& [name, tensor] : params.named_params()) tensor.set_requires_grad(true);

  EvalOutcome out;
  out.cm = confusion(preds, labels, params.cfg.classes);
  out.metrics = report(out.cm, scores, labels);
  return out;
}

std::string BenchResult::formatted() const {
  char buf[96];
  std::snprintf(buf, sizeof buf, "%.2f s ± %.2f ms", mean_seconds, std_seconds * 1e3);
  return buf;
}

BenchResult benchmark(const std::function<void()>& fn, std::size_t trials, std::size_t warmup) {
  if (trials < 2)
    throw ContractError("benchmark: need at least 2 trials, got " + std::to_string(trials));
  using clock = std::chrono::steady_clock;
  for (std::size_t i = 0; i < warmup; ++i) fn();
  std::vector<double> seconds(trials);
  for (std::size_t i = 0; i < trials; ++i) {
    const auto start = clock::now();
    fn();
    seconds[i] = std::chrono::duration<double>(clock::now() - start).count();
  }
  BenchResult out;
  out.trials = trials;
  out.mean_seconds =
      std::accumulate(seconds.begin(), seconds.end(), 0.0) / static_cast<double>(trials);
  double ss = 0.0;
  for (const double s : seconds) ss += (s - out.mean_seconds) * (s - out.mean_seconds);
  out.std_seconds = std::sqrt(ss / static_cast<double>(trials - 1));
  return out;
}

BenchResult benchmark_forward(const HatnetParams& params, const Tensor& words,
                              std::size_t trials) {
  for (auto& [name, tensor] : params.named_params()) tensor.set_requires_grad(false);
  volatile std::size_t sink = 0;  // keep the pass from being optimized away
  BenchResult out = benchmark([&] { sink = forward(params, words).predicted_class; }, trials);
  (void)sink;
  for (auto& [name, tensor] : params.named_params()) tensor.set_requires_grad(true);
  return out;
}

}  // namespace hatnet
