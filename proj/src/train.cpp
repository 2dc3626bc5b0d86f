#include "hatnet/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

namespace hatnet {

namespace {

constexpr double kResizeRatios[] = {0.75, 0.875, 1.0, 1.125, 1.25};

// Fresh parameter storage with the same names/shapes and copied values, so a
// snapshot no longer aliases the live training parameters.
HatnetParams clone_params(const HatnetParams& params) {
  Rng rng(0);  // shapes only; every value is overwritten below
  HatnetParams out = HatnetParams::init(params.cfg, rng);
  auto src = params.named_params();
  auto dst = out.named_params();
  for (std::size_t i = 0; i < src.size(); ++i) {
    const auto sv = src[i].second.values();
    std::copy(sv.begin(), sv.end(), dst[i].second.values_mut().begin());
  }
  return out;
}

ImageBuf word_to_image(const Tensor& words, std::size_t bag, std::size_t word) {
  const Dims& d = words.dims();
  const std::size_t wp = d[2], c = d[4];
  ImageBuf img(wp, wp, c);
  const auto v = words.values().subspan((bag * d[1] + word) * wp * wp * c, wp * wp * c);
  std::copy(v.begin(), v.end(), img.data.begin());
  return img;
}

}  // namespace

double lr_at(const TrainConfig& cfg, std::size_t global_iter, std::size_t epoch) {
  if (global_iter < cfg.warmup_iters) {
    const double frac = static_cast<double>(global_iter) / static_cast<double>(cfg.warmup_iters);
    return cfg.lr_start + (cfg.lr_peak - cfg.lr_start) * frac;
  }
  return epoch >= cfg.epochs_phase1 ? cfg.lr_peak * cfg.decay_factor : cfg.lr_peak;
}

AdamState::AdamState(const HatnetParams& params, const TrainConfig& cfg)
    : beta1_(cfg.beta1), beta2_(cfg.beta2), eps_(cfg.adam_eps) {
  for (const auto& [name, tensor] : params.named_params())
    slots_.push_back({name, std::vector<double>(tensor.numel(), 0.0),
                      std::vector<double>(tensor.numel(), 0.0)});
}

void AdamState::step(HatnetParams& params, double lr, double grad_scale) {
  auto named = params.named_params();
  if (named.size() != slots_.size())
    throw ShapeError("adam: parameter registry has " + std::to_string(named.size()) +
                     " tensors, state was built for " + std::to_string(slots_.size()));
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < named.size(); ++i) {
    auto& [name, tensor] = named[i];
    Slot& slot = slots_[i];
    if (name != slot.name || tensor.numel() != slot.m.size())
      throw ShapeError("adam: parameter \"" + name + "\" does not match state slot \"" +
                       slot.name + "\"");
    const auto grad = tensor.grad_mut();  // zero-filled if backward never reached it
    auto theta = tensor.values_mut();
    for (std::size_t k = 0; k < slot.m.size(); ++k) {
      const double g = static_cast<double>(grad[k]) * grad_scale;
      slot.m[k] = beta1_ * slot.m[k] + (1.0 - beta1_) * g;
      slot.v[k] = beta2_ * slot.v[k] + (1.0 - beta2_) * g * g;
      const double mhat = slot.m[k] / bc1;
      const double vhat = slot.v[k] / bc2;
      theta[k] = static_cast<float>(static_cast<double>(theta[k]) -
                                    lr * mhat / (std::sqrt(vhat) + eps_));
    }
  }
}

AugmentDraw draw_augment(Rng& rng) {
  AugmentDraw d;
  d.resize_ratio = kResizeRatios[rng.pick(5)];
  d.hflip = rng.coin();
  d.vflip = rng.coin();
  d.angle_deg = rng.uniform(-10.0, 10.0);
  return d;
}

ImageBuf apply_augment(const ImageBuf& word, const AugmentDraw& draw) {
  ImageBuf img = word;
  const auto target = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(draw.resize_ratio * static_cast<double>(word.h))));
  if (target != word.h) {
    img = resize_bilinear(img, target, target);
    img = resize_bilinear(img, word.h, word.w);
  }
  if (draw.hflip) img = flip_horizontal(img);
  if (draw.vflip) img = flip_vertical(img);
  if (draw.angle_deg != 0.0) img = rotate_deg(img, draw.angle_deg);
  return img;
}

ImageBuf augment_word(const ImageBuf& word, Rng& rng) {
  return apply_augment(word, draw_augment(rng));
}

Tensor augment_words(const Tensor& words, Rng& rng) {
  if (words.rank() != 5)
    throw ShapeError("augment: expected rank-5 word pixels, got dims " +
                     dims_to_string(words.dims()));
  const Dims& d = words.dims();
  std::vector<float> out;
  out.reserve(words.numel());
  for (std::size_t b = 0; b < d[0]; ++b)
    for (std::size_t w = 0; w < d[1]; ++w) {
      const ImageBuf aug = augment_word(word_to_image(words, b, w), rng);
      out.insert(out.end(), aug.data.begin(), aug.data.end());
    }
  return Tensor::from_data(d, std::move(out));
}

double train_epoch(HatnetParams& params, AdamState& adam, const Dataset& ds,
                   std::span<const std::size_t> order, const TrainConfig& cfg, std::size_t epoch,
                   std::size_t& global_iter, Rng& aug_rng) {
  if (order.empty()) throw TrainError("train: epoch received an empty sample list");
  params.zero_grad();
  double total_loss = 0.0;
  std::size_t group = 0;
  for (std::size_t pos = 0; pos < order.size(); ++pos) {
    const Sample& sample = ds.samples[order[pos]];
    const Tensor pixels =
        cfg.augment ? augment_words(sample.words, aug_rng) : sample.words;
    const ForwardResult res = forward(params, pixels);
    const Tensor loss = cross_entropy_logits(res.logits, static_cast<int>(sample.label));
    const double value = static_cast<double>(loss.values()[0]);
    if (!std::isfinite(value))
      throw TrainError("train: non-finite loss " + std::to_string(value) + " at sample " +
                       std::to_string(order[pos]) + " (epoch " + std::to_string(epoch) + ")");
    backward(loss);
    total_loss += value;
    ++group;
    if (group == cfg.accum_steps || pos + 1 == order.size()) {
      const double lr = lr_at(cfg, global_iter, epoch);
      adam.step(params, lr, 1.0 / static_cast<double>(group));
      params.zero_grad();
      ++global_iter;
      group = 0;
    }
  }
  return total_loss / static_cast<double>(order.size());
}

double split_accuracy(const HatnetParams& params, const Dataset& ds,
                      std::span<const std::size_t> indices) {
  if (indices.empty()) throw TrainError("accuracy: empty sample list");
  // Plain inference: detach the parameters so the forward passes build no
  // tape, then restore. The flags live on the shared tensor nodes.
  for (auto& [name, tensor] : params.named_params()) tensor.set_requires_grad(false);
  std::size_t correct = 0;
  for (const std::size_t i : indices) {
    const ForwardResult res = forward(params, ds.samples[i].words);
    if (res.predicted_class == ds.samples[i].label) ++correct;
  }
  for (auto& [name, tensor] : params.named_params()) tensor.set_requires_grad(true);
  return static_cast<double>(correct) / static_cast<double>(indices.size());
}

HatnetParams average_checkpoints(const std::vector<Checkpoint>& checkpoints, std::size_t top_k) {
  if (checkpoints.empty()) throw TrainError("average_checkpoints: no checkpoints given");
  if (top_k < 1) throw TrainError("average_checkpoints: top_k must be >= 1");
  std::vector<const Checkpoint*> ranked;
  for (const Checkpoint& ck : checkpoints) ranked.push_back(&ck);
  std::stable_sort(ranked.begin(), ranked.end(), [](const Checkpoint* a, const Checkpoint* b) {
    if (a->val_accuracy != b->val_accuracy) return a->val_accuracy > b->val_accuracy;
    return a->epoch < b->epoch;
  });
  ranked.resize(std::min(top_k, ranked.size()));

  HatnetParams out = clone_params(ranked.front()->params);
  auto dst = out.named_params();
  std::vector<std::vector<double>> acc(dst.size());
  for (std::size_t i = 0; i < dst.size(); ++i) acc[i].assign(dst[i].second.numel(), 0.0);
  for (const Checkpoint* ck : ranked) {
    const auto src = ck->params.named_params();
    if (src.size() != dst.size())
      throw ShapeError("average_checkpoints: registries differ in size");
    for (std::size_t i = 0; i < dst.size(); ++i) {
      if (src[i].first != dst[i].first || src[i].second.dims() != dst[i].second.dims())
        throw ShapeError("average_checkpoints: parameter \"" + src[i].first +
                         "\" differs in name or shape across checkpoints");
      const auto sv = src[i].second.values();
      for (std::size_t k = 0; k < sv.size(); ++k) acc[i][k] += static_cast<double>(sv[k]);
    }
  }
  const double inv = 1.0 / static_cast<double>(ranked.size());
  for (std::size_t i = 0; i < dst.size(); ++i) {
    auto values = dst[i].second.values_mut();
    for (std::size_t k = 0; k < values.size(); ++k)
      values[k] = static_cast<float>(acc[i][k] * inv);
  }
  return out;
}

nlohmann::json log_entry_to_json(const TrainLogEntry& entry) {
  return nlohmann::json{{"epoch", entry.epoch},
                        {"iter", entry.iter},
                        {"lr", entry.lr},
                        {"loss", entry.loss},
                        {"val_accuracy", entry.val_accuracy}};
}

TrainResult train_model(const RunConfig& cfg, const Dataset& ds, std::ostream* log_stream) {
  cfg.validate();
  const auto train_idx = ds.split_indices("train");
  if (train_idx.empty()) throw TrainError("train: dataset has no train split");
  auto select_idx = ds.split_indices("val");
  if (select_idx.empty()) select_idx = train_idx;  // selection falls back to train

  const Rng master(cfg.seed);
  Rng init_rng = master.fork(0);
  HatnetParams params = HatnetParams::init(cfg.model, init_rng);
  AdamState adam(params, cfg.train);

  TrainResult result;
  std::vector<Checkpoint> best;
  std::size_t global_iter = 0;
  std::vector<std::size_t> order = train_idx;
  const std::size_t epochs = cfg.train.epochs_phase1 + cfg.train.epochs_phase2;
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    Rng shuffle_rng = master.fork(static_cast<std::uint32_t>(1 + 2 * epoch));
    Rng aug_rng = master.fork(static_cast<std::uint32_t>(2 + 2 * epoch));
    shuffle_rng.shuffle(order);
    const double loss =
        train_epoch(params, adam, ds, order, cfg.train, epoch, global_iter, aug_rng);
    const double acc = split_accuracy(params, ds, select_idx);

    best.push_back({clone_params(params), acc, epoch});
    std::stable_sort(best.begin(), best.end(), [](const Checkpoint& a, const Checkpoint& b) {
      if (a.val_accuracy != b.val_accuracy) return a.val_accuracy > b.val_accuracy;
      return a.epoch < b.epoch;
    });
    if (best.size() > cfg.train.checkpoint_top_k) best.resize(cfg.train.checkpoint_top_k);

    const TrainLogEntry entry{epoch, global_iter,
                              lr_at(cfg.train, global_iter - 1, epoch), loss, acc};
    result.log.push_back(entry);
    result.best_val_accuracy = std::max(result.best_val_accuracy, acc);
    if (log_stream) *log_stream << log_entry_to_json(entry).dump() << "\n";
  }
  result.params = average_checkpoints(best, cfg.train.checkpoint_top_k);
  return result;
}

}  // namespace hatnet
