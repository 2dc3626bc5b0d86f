#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "hatnet/attention.hpp"
#include "hatnet/image.hpp"
#include "hatnet/rng.hpp"
#include "hatnet/tensor.hpp"

namespace hatnet {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

enum class PsiKind { euclidean, manhattan, mean };

inline std::string to_string(PsiKind kind) {
  switch (kind) {
    case PsiKind::euclidean: return "euclidean";
    case PsiKind::manhattan: return "manhattan";
    case PsiKind::mean: return "mean";
  }
  throw ConfigError("psi: unknown kind");
}

inline PsiKind psi_kind_from_string(const std::string& s) {
  if (s == "euclidean") return PsiKind::euclidean;
  if (s == "manhattan") return PsiKind::manhattan;
  if (s == "mean") return PsiKind::mean;
  throw ConfigError("psi: unknown kind \"" + s + "\" (expected euclidean|manhattan|mean)");
}

enum class EncoderMode { toy, precomputed };

inline std::string to_string(EncoderMode mode) {
  return mode == EncoderMode::toy ? "toy" : "precomputed";
}

inline EncoderMode encoder_mode_from_string(const std::string& s) {
  if (s == "toy") return EncoderMode::toy;
  if (s == "precomputed") return EncoderMode::precomputed;
  throw ConfigError("encoder: unknown mode \"" + s + "\" (expected toy|precomputed)");
}

// Geometry of the word/bag tiling. n and m must be perfect squares wherever
// pixels are touched (tiling, synthesis, heatmaps); the attention pipeline
// itself accepts any n, m >= 1 from precomputed features.
struct TilingConfig {
  std::size_t n = 49;         // bags per image (bag_grid^2 on pixel paths)
  std::size_t m = 49;         // words per bag (word_grid^2 on pixel paths)
  std::size_t bag_px = 1792;  // bag side in pixels
  std::size_t word_px = 256;  // word side in pixels
  std::size_t channels = 1;
  std::size_t d = 256;        // embedding dim

  std::size_t bag_grid() const { return int_sqrt(n, "tiling.n"); }
  std::size_t word_grid() const { return int_sqrt(m, "tiling.m"); }
  std::size_t image_px() const { return bag_grid() * bag_px; }
  std::size_t words_per_image() const { return n * m; }

  void validate_geometry() const {
    if (n == 0 || m == 0 || bag_px == 0 || word_px == 0 || channels == 0)
      throw ConfigError("tiling: all dims must be positive");
    const std::size_t gw = word_grid();
    (void)bag_grid();
    if (gw * word_px != bag_px)
      throw ConfigError("tiling.bag_px: " + std::to_string(bag_px) + " != word_grid " +
                        std::to_string(gw) + " * word_px " + std::to_string(word_px));
  }

 private:
  static std::size_t int_sqrt(std::size_t v, const char* field) {
    const auto r = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(v))));
    if (r * r != v)
      throw ConfigError(std::string(field) + ": " + std::to_string(v) +
                        " is not a perfect square grid");
    return r;
  }
};

struct EncoderConfig {
  std::size_t patch = 4;  // stage-1 patch side (stride = patch)
  std::size_t f1 = 8;     // stage-1 channels
  std::size_t f2 = 16;    // stage-2 channels
};

struct ModelConfig {
  TilingConfig tiling;
  std::size_t heads = 4;
  std::size_t classes = 4;
  PsiKind psi = PsiKind::euclidean;
  EncoderMode encoder = EncoderMode::toy;
  EncoderConfig enc;
  bool bias = false;
  bool residual_norm = false;
  bool keep_weights = false;

  void validate() const {
    if (tiling.n == 0) throw ConfigError("model.n: must be >= 1");
    if (tiling.m == 0) throw ConfigError("model.m: must be >= 1");
    if (tiling.d == 0) throw ConfigError("model.d: must be >= 1");
    if (heads == 0 || tiling.d % heads != 0)
      throw ConfigError("model.heads: " + std::to_string(heads) + " must divide d = " +
                        std::to_string(tiling.d));
    if (classes < 2) throw ConfigError("model.classes: need >= 2, got " + std::to_string(classes));
  }

  AttentionOptions attention_options() const {
    AttentionOptions opts;
    opts.keep_weights = keep_weights;
    opts.residual_norm = residual_norm;
    return opts;
  }
};

// ---------------------------------------------------------------------------
// Tiling
// ---------------------------------------------------------------------------

// Words of one image in pixel space: rank-5 tensor [n, m, word_px, word_px, c]
// with bags and words in row-major grid order (top-left to bottom-right),
// plus the invertible word -> pixel-rectangle map.
struct TiledImage {
  Tensor words;
  TilingConfig cfg;

  struct Rect {
    std::size_t y0, x0, size;
  };

  Rect word_rect(std::size_t bag, std::size_t word) const {
    const std::size_t gb = cfg.bag_grid(), gw = cfg.word_grid();
    if (bag >= cfg.n || word >= cfg.m)
      throw IndexError("word_rect: bag " + std::to_string(bag) + ", word " +
                       std::to_string(word) + " outside " + std::to_string(cfg.n) + "x" +
                       std::to_string(cfg.m));
    return Rect{(bag / gb) * cfg.bag_px + (word / gw) * cfg.word_px,
                (bag % gb) * cfg.bag_px + (word % gw) * cfg.word_px, cfg.word_px};
  }

  ImageBuf reassemble() const {
    const std::size_t side = cfg.image_px(), wp = cfg.word_px, c = cfg.channels;
    ImageBuf out(side, side, c);
    const auto wv = words.values();
    for (std::size_t b = 0; b < cfg.n; ++b)
      for (std::size_t w = 0; w < cfg.m; ++w) {
        const Rect r = word_rect(b, w);
        const std::size_t base = ((b * cfg.m + w) * wp) * wp * c;
        for (std::size_t y = 0; y < wp; ++y)
          for (std::size_t x = 0; x < wp; ++x)
            for (std::size_t ch = 0; ch < c; ++ch)
              out.at(r.y0 + y, r.x0 + x, ch) = wv[base + (y * wp + x) * c + ch];
      }
    return out;
  }
};

// Resizes the image (bilinear) to the configured square side and cuts it into
// n bags x m words, row-major.
inline TiledImage tile_image(const ImageBuf& image, const TilingConfig& cfg) {
  cfg.validate_geometry();
  if (image.h == 0 || image.w == 0)
    throw ConfigError("tile_image: image dims must be positive");
  if (image.c != cfg.channels)
    throw ConfigError("tile_image: image has " + std::to_string(image.c) +
                      " channels, config expects " + std::to_string(cfg.channels));
  const std::size_t side = cfg.image_px();
  const ImageBuf resized = resize_bilinear(image, side, side);
  const std::size_t wp = cfg.word_px, c = cfg.channels;
  TiledImage tiled;
  tiled.cfg = cfg;
  std::vector<float> data(cfg.n * cfg.m * wp * wp * c);
  const std::size_t gb = cfg.bag_grid(), gw = cfg.word_grid();
  for (std::size_t b = 0; b < cfg.n; ++b)
    for (std::size_t w = 0; w < cfg.m; ++w) {
      const std::size_t y0 = (b / gb) * cfg.bag_px + (w / gw) * wp;
      const std::size_t x0 = (b % gb) * cfg.bag_px + (w % gw) * wp;
      const std::size_t base = ((b * cfg.m + w) * wp) * wp * c;
      for (std::size_t y = 0; y < wp; ++y)
        for (std::size_t x = 0; x < wp; ++x)
          for (std::size_t ch = 0; ch < c; ++ch)
            data[base + (y * wp + x) * c + ch] = resized.at(y0 + y, x0 + x, ch);
    }
  tiled.words = Tensor::from_data({cfg.n, cfg.m, wp, wp, c}, std::move(data));
  return tiled;
}

// ---------------------------------------------------------------------------
// Word encoder (toy): two strided patch-linear stages with ReLU, global mean
// pooling, and a linear projection to d.
// ---------------------------------------------------------------------------

template <typename T>
struct WordEncoderT {
  EncoderConfig cfg;
  std::size_t word_px = 0, channels = 1;
  LinearT<T> stage1;  // [patch^2 * c  x f1]
  LinearT<T> stage2;  // [4 * f1      x f2]
  LinearT<T> proj;    // [f2          x d]

  static WordEncoderT init(const EncoderConfig& cfg, std::size_t word_px, std::size_t channels,
                           std::size_t d, bool with_bias, Rng& rng) {
    if (cfg.patch == 0 || word_px % cfg.patch != 0)
      throw ConfigError("encoder.patch: " + std::to_string(cfg.patch) + " must divide word_px " +
                        std::to_string(word_px));
    if ((word_px / cfg.patch) % 2 != 0)
      throw ConfigError("encoder.patch: word_px/patch = " + std::to_string(word_px / cfg.patch) +
                        " must be even for the 2x2 second stage");
    if (cfg.f1 == 0 || cfg.f2 == 0) throw ConfigError("encoder.f1/f2: must be positive");
    WordEncoderT enc;
    enc.cfg = cfg;
    enc.word_px = word_px;
    enc.channels = channels;
    enc.stage1 = LinearT<T>::init(cfg.patch * cfg.patch * channels, cfg.f1, with_bias, rng);
    enc.stage2 = LinearT<T>::init(4 * cfg.f1, cfg.f2, with_bias, rng);
    enc.proj = LinearT<T>::init(cfg.f2, d, with_bias, rng);
    return enc;
  }

  std::size_t stage1_grid() const { return word_px / cfg.patch; }
  std::size_t stage2_grid() const { return stage1_grid() / 2; }

  // words: rank-5 [n, m, word_px, word_px, c] -> features [n*m x d].
  TensorT<T> encode(const TensorT<T>& words) const {
    if (words.rank() != 5)
      throw ShapeError("encode_words: expected rank-5 word pixels, got dims " +
                       dims_to_string(words.dims()));
    const std::size_t n = words.dims()[0], m = words.dims()[1];
    const std::size_t wp = words.dims()[2], c = words.dims()[4];
    if (words.dims()[3] != wp || wp != word_px || c != channels)
      throw ShapeError("encode_words: word pixels " + dims_to_string(words.dims()) +
                       " do not match encoder geometry " + std::to_string(word_px) + "px x " +
                       std::to_string(channels) + "ch");
    const std::size_t p = cfg.patch, g1 = stage1_grid(), g2 = stage2_grid();
    const std::size_t cells1 = g1 * g1, cells2 = g2 * g2;
    const std::size_t nm = n * m;

    // Stage 1: gather non-overlapping patches into rows.
    std::vector<std::size_t> src1(nm * cells1 * p * p * c);
    {
      std::size_t k = 0;
      for (std::size_t word = 0; word < nm; ++word)
        for (std::size_t cy = 0; cy < g1; ++cy)
          for (std::size_t cx = 0; cx < g1; ++cx)
            for (std::size_t dy = 0; dy < p; ++dy)
              for (std::size_t dx = 0; dx < p; ++dx)
                for (std::size_t ch = 0; ch < c; ++ch)
                  src1[k++] = ((word * wp + cy * p + dy) * wp + cx * p + dx) * c + ch;
    }
    auto s1 = relu(stage1(permute_elements(words, {nm * cells1, p * p * c}, src1)));

    // Stage 2: gather 2x2 blocks of stage-1 cells.
    const std::size_t f1 = cfg.f1;
    std::vector<std::size_t> src2(nm * cells2 * 4 * f1);
    {
      std::size_t k = 0;
      for (std::size_t word = 0; word < nm; ++word)
        for (std::size_t cy = 0; cy < g2; ++cy)
          for (std::size_t cx = 0; cx < g2; ++cx)
            for (std::size_t by = 0; by < 2; ++by)
              for (std::size_t bx = 0; bx < 2; ++bx)
                for (std::size_t ch = 0; ch < f1; ++ch)
                  src2[k++] = (word * cells1 + (cy * 2 + by) * g1 + cx * 2 + bx) * f1 + ch;
    }
    auto s2 = relu(stage2(permute_elements(s1, {nm * cells2, 4 * f1}, src2)));

    // Global mean pool over cells, then project to d.
    const std::size_t f2 = cfg.f2;
    auto pool = TensorT<T>::zeros({cells2 * f2, f2});
    {
      auto pv = pool.values_mut();
      const T inv = static_cast<T>(1.0 / static_cast<double>(cells2));
      for (std::size_t cell = 0; cell < cells2; ++cell)
        for (std::size_t ch = 0; ch < f2; ++ch) pv[(cell * f2 + ch) * f2 + ch] = inv;
    }
    auto pooled = matmul(reshape(s2, {nm, cells2 * f2}), pool);
    return proj(pooled);
  }
};

using WordEncoder = WordEncoderT<float>;

// ---------------------------------------------------------------------------
// Features
// ---------------------------------------------------------------------------

template <typename T>
struct WordFeaturesT {
  TensorT<T> features;  // rank-3 [n, m, d]

  std::size_t n() const { return features.dims()[0]; }
  std::size_t m() const { return features.dims()[1]; }
  std::size_t d() const { return features.dims()[2]; }

  static WordFeaturesT from_tensor(TensorT<T> t) {
    if (t.rank() != 3)
      throw ShapeError("word_features: expected rank-3 [n, m, d], got dims " +
                       dims_to_string(t.dims()));
    if (!t.all_finite()) throw ContractError("word_features: non-finite values");
    return WordFeaturesT{std::move(t)};
  }
};

using WordFeatures = WordFeaturesT<float>;

template <typename T>
WordFeaturesT<T> encode_words(const WordEncoderT<T>& encoder, const TensorT<T>& words) {
  const std::size_t n = words.rank() == 5 ? words.dims()[0] : 0;
  const std::size_t m = words.rank() == 5 ? words.dims()[1] : 0;
  auto flat = encoder.encode(words);  // [n*m x d]
  return WordFeaturesT<T>{reshape(flat, {n, m, flat.dims()[1]})};
}

inline WordFeatures encode_words(const WordEncoder& encoder, const TiledImage& tiled) {
  return encode_words(encoder, tiled.words);
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

template <typename T>
struct HatnetParamsT {
  ModelConfig cfg;
  std::optional<WordEncoderT<T>> encoder;  // present in toy mode only
  MultiHeadParamsT<T> w2w_mha;
  FfnParamsT<T> w2w_ffn;
  TensorT<T> w2b_bar;  // [m x m]
  TensorT<T> w2b_hat;  // [m x m]
  MultiHeadParamsT<T> b2b_self;
  MultiHeadParamsT<T> b2b_cross;
  FfnParamsT<T> b2b_ffn;
  TensorT<T> b2i;  // [n x n]
  TensorT<T> cls;  // [d x C]

  static HatnetParamsT init(const ModelConfig& cfg, Rng& rng) {
    cfg.validate();
    const std::size_t n = cfg.tiling.n, m = cfg.tiling.m, d = cfg.tiling.d;
    HatnetParamsT p;
    p.cfg = cfg;
    if (cfg.encoder == EncoderMode::toy)
      p.encoder = WordEncoderT<T>::init(cfg.enc, cfg.tiling.word_px, cfg.tiling.channels, d,
                                        cfg.bias, rng);
    p.w2w_mha = MultiHeadParamsT<T>::init(d, cfg.heads, cfg.bias, rng);
    p.w2w_ffn = FfnParamsT<T>::init(d, cfg.bias, rng);
    p.w2b_bar = square_init(m, rng);
    p.w2b_hat = square_init(m, rng);
    p.b2b_self = MultiHeadParamsT<T>::init(d, cfg.heads, cfg.bias, rng);
    p.b2b_cross = MultiHeadParamsT<T>::init(d, cfg.heads, cfg.bias, rng);
    p.b2b_ffn = FfnParamsT<T>::init(d, cfg.bias, rng);
    p.b2i = square_init(n, rng);
    const double cls_bound = 1.0 / std::sqrt(static_cast<double>(d));
    p.cls = TensorT<T>::uniform({d, cfg.classes}, -cls_bound, cls_bound, rng, true);
    return p;
  }

  // Stable name -> tensor registry; iteration order is the serialization,
  // averaging, and optimizer-state order.
  std::vector<std::pair<std::string, TensorT<T>>> named_params() const {
    std::vector<std::pair<std::string, TensorT<T>>> out;
    auto add_linear = [&out](const std::string& name, const LinearT<T>& lin) {
      out.emplace_back(name + ".weight", lin.weight);
      if (lin.bias) out.emplace_back(name + ".bias", *lin.bias);
    };
    auto add_mha = [&add_linear](const std::string& name, const MultiHeadParamsT<T>& mha) {
      for (std::size_t h = 0; h < mha.heads(); ++h) {
        const std::string head = name + ".h" + std::to_string(h);
        add_linear(head + ".query", mha.query[h]);
        add_linear(head + ".key", mha.key[h]);
        add_linear(head + ".value", mha.value[h]);
      }
      add_linear(name + ".out", mha.out);
    };
    auto add_ffn = [&add_linear](const std::string& name, const FfnParamsT<T>& ffn) {
      add_linear(name + ".expand", ffn.expand);
      add_linear(name + ".reduce", ffn.reduce);
    };
    if (encoder) {
      add_linear("encoder.stage1", encoder->stage1);
      add_linear("encoder.stage2", encoder->stage2);
      add_linear("encoder.proj", encoder->proj);
    }
    add_mha("w2w.mha", w2w_mha);
    add_ffn("w2w.ffn", w2w_ffn);
    out.emplace_back("w2b.bar", w2b_bar);
    out.emplace_back("w2b.hat", w2b_hat);
    add_mha("b2b.self", b2b_self);
    add_mha("b2b.cross", b2b_cross);
    add_ffn("b2b.ffn", b2b_ffn);
    out.emplace_back("b2i", b2i);
    out.emplace_back("cls", cls);
    return out;
  }

  void set_requires_grad(bool enabled) {
    for (auto& [name, tensor] : named_params()) tensor.set_requires_grad(enabled);
  }

  void zero_grad() {
    for (auto& [name, tensor] : named_params()) tensor.zero_grad();
  }

  std::size_t param_count() const {
    std::size_t total = 0;
    for (const auto& [name, tensor] : named_params()) total += tensor.numel();
    return total;
  }

  bool all_finite() const {
    for (const auto& [name, tensor] : named_params())
      if (!tensor.all_finite()) return false;
    return true;
  }

 private:
  // Identity-dominant init for the score-mixing matrices: coefficients start
  // as softmax(psi(X)) pass-through (plus symmetry-breaking noise) instead of
  // a random mixture of the rows' psi scores. A random dense mixture scrambles
  // the psi ranking, and the diagonal receives far too little gradient to
  // recover at desk scale, leaving the attention maps at chance permanently.
  // The noise scale q^-1.5 keeps the summed off-diagonal contribution (q-1
  // terms, each of size psi * bound) well below the diagonal's own-score term.
  static TensorT<T> square_init(std::size_t q, Rng& rng) {
    const double bound = 1.0 / std::pow(static_cast<double>(q), 1.5);
    auto t = TensorT<T>::uniform({q, q}, -bound, bound, rng, true);
    auto tv = t.values_mut();
    for (std::size_t i = 0; i < q; ++i) tv[i * q + i] += T(1);
    return t;
  }
};

using HatnetParams = HatnetParamsT<float>;

// ---------------------------------------------------------------------------
// Pipeline stages
// ---------------------------------------------------------------------------

// Per-row projection to a score: L2 norm, L1 norm, or mean.
template <typename T>
TensorT<T> psi(PsiKind kind, const TensorT<T>& x) {
  switch (kind) {
    case PsiKind::euclidean: return row_l2_norm(x);
    case PsiKind::manhattan: return row_l1_norm(x);
    case PsiKind::mean: return row_mean(x);
  }
  throw ConfigError("psi: unknown kind");
}

template <typename T>
struct AggregateT {
  TensorT<T> pooled;  // [1 x d]
  TensorT<T> coeffs;  // [1 x rows]
};

// coeffs = softmax(psi(X) * beta); pooled = coeffs * X. The word_to_bag and
// bag_to_image stages are this mechanism at m- and n-row scale.
template <typename T>
AggregateT<T> aggregate_rows(const TensorT<T>& beta, const TensorT<T>& x, PsiKind kind) {
  detail::check_rank2(x, "aggregate_rows");
  const std::size_t rows = x.dims()[0];
  if (beta.rank() != 2 || beta.dims()[0] != rows || beta.dims()[1] != rows)
    throw ShapeError("aggregate_rows: mixing matrix " + dims_to_string(beta.dims()) +
                     " must be square over " + std::to_string(rows) + " rows");
  auto coeffs = softmax_rows(matmul(reshape(psi(kind, x), {1, rows}), beta));
  return {matmul(coeffs, x), coeffs};
}

template <typename T>
AggregateT<T> word_to_bag(const TensorT<T>& beta, const TensorT<T>& words, PsiKind kind) {
  return aggregate_rows(beta, words, kind);
}

template <typename T>
AggregateT<T> bag_to_image(const TensorT<T>& beta, const TensorT<T>& bags, PsiKind kind) {
  return aggregate_rows(beta, bags, kind);
}

template <typename T>
TensorT<T> word_to_word(const HatnetParamsT<T>& params, const TensorT<T>& bag_words,
                        std::vector<TensorT<T>>* head_weights = nullptr) {
  return transformer_unit(params.w2w_mha, params.w2w_ffn, bag_words, bag_words, bag_words,
                          params.cfg.attention_options(), head_weights);
}

// Self-attention over the raw-feature bags, then a transformer unit where
// those serve as queries against the word-to-word bags as keys/values.
template <typename T>
TensorT<T> bag_to_bag(const HatnetParamsT<T>& params, const TensorT<T>& bags_hat,
                      const TensorT<T>& bags_bar, std::vector<TensorT<T>>* self_weights = nullptr,
                      std::vector<TensorT<T>>* cross_weights = nullptr) {
  auto self_attended = multi_head(params.b2b_self, bags_hat, bags_hat, bags_hat, self_weights);
  return transformer_unit(params.b2b_cross, params.b2b_ffn, self_attended, bags_bar, bags_bar,
                          params.cfg.attention_options(), cross_weights);
}

template <typename T>
struct PredictionT {
  TensorT<T> probs;  // [1 x C]
  std::size_t predicted_class = 0;
};

using Prediction = PredictionT<float>;

template <typename T>
std::size_t argmax_index(std::span<const T> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;  // ties keep the lower index
  return best;
}

template <typename T>
PredictionT<T> classify(const TensorT<T>& cls, const TensorT<T>& image_repr) {
  auto probs = softmax_rows(matmul(image_repr, cls));
  return {probs, argmax_index(probs.values())};
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

template <typename T>
struct AttentionRecordT {
  TensorT<T> word_coeffs;      // [n x m], word-to-bag coefficients (transformer branch)
  TensorT<T> hat_word_coeffs;  // [n x m], word-to-bag coefficients (raw-feature branch)
  TensorT<T> bag_coeffs;       // [1 x n], bag-to-image coefficients
  // Per-head attention matrices, populated only when cfg.keep_weights:
  std::vector<TensorT<T>> w2w_weights;        // n bags x H heads, [m x m] each
  std::vector<TensorT<T>> b2b_self_weights;   // H heads, [n x n]
  std::vector<TensorT<T>> b2b_cross_weights;  // H heads, [n x n]
};

using AttentionRecord = AttentionRecordT<float>;

template <typename T>
struct ForwardResultT {
  TensorT<T> logits;  // [1 x C]
  TensorT<T> probs;   // [1 x C]
  std::size_t predicted_class = 0;
  AttentionRecordT<T> attention;
};

using ForwardResult = ForwardResultT<float>;

template <typename T>
ForwardResultT<T> forward(const HatnetParamsT<T>& params, const WordFeaturesT<T>& input) {
  const std::size_t n = params.cfg.tiling.n, m = params.cfg.tiling.m, d = params.cfg.tiling.d;
  if (input.n() != n || input.m() != m || input.d() != d)
    throw ShapeError("forward: features " + dims_to_string(input.features.dims()) +
                     " do not match model config [" + std::to_string(n) + ", " +
                     std::to_string(m) + ", " + std::to_string(d) + "]");
  const bool keep = params.cfg.keep_weights;
  const PsiKind kind = params.cfg.psi;
  auto packed = reshape(input.features, {n * m, d});

  std::vector<TensorT<T>> bar_rows, hat_rows, bar_coeff_rows, hat_coeff_rows;
  bar_rows.reserve(n);
  hat_rows.reserve(n);
  AttentionRecordT<T> rec;
  for (std::size_t i = 0; i < n; ++i) {
    auto bag_words = slice_rows(packed, i * m, m);  // B_cnn^i, [m x d]
    auto w2w = word_to_word(params, bag_words, keep ? &rec.w2w_weights : nullptr);
    auto bar = word_to_bag(params.w2b_bar, w2w, kind);
    auto hat = word_to_bag(params.w2b_hat, bag_words, kind);
    bar_rows.push_back(bar.pooled);
    hat_rows.push_back(hat.pooled);
    bar_coeff_rows.push_back(bar.coeffs);
    hat_coeff_rows.push_back(hat.coeffs);
  }
  auto bags_bar = concat_rows(bar_rows);  // [n x d]
  auto bags_hat = concat_rows(hat_rows);
  auto bags = bag_to_bag(params, bags_hat, bags_bar, keep ? &rec.b2b_self_weights : nullptr,
                         keep ? &rec.b2b_cross_weights : nullptr);
  auto image_repr = bag_to_image(params.b2i, bags, kind);
  rec.word_coeffs = concat_rows(bar_coeff_rows);  // [n x m]
  rec.hat_word_coeffs = concat_rows(hat_coeff_rows);
  rec.bag_coeffs = image_repr.coeffs;

  ForwardResultT<T> out;
  out.logits = matmul(image_repr.pooled, params.cls);
  out.probs = softmax_rows(out.logits);
  out.predicted_class = argmax_index(out.probs.values());
  out.attention = std::move(rec);
  return out;
}

template <typename T>
ForwardResultT<T> forward(const HatnetParamsT<T>& params, const TensorT<T>& word_pixels) {
  if (!params.encoder)
    throw ContractError("forward: model has no word encoder (precomputed-feature mode)");
  return forward(params, encode_words(*params.encoder, word_pixels));
}

inline ForwardResult forward(const HatnetParams& params, const TiledImage& tiled) {
  return forward(params, tiled.words);
}

// ---------------------------------------------------------------------------
// Attention ranking
// ---------------------------------------------------------------------------

inline std::size_t top_k_count(double k_percent, std::size_t total) {
  if (!(k_percent > 0.0) || k_percent > 100.0)
    throw ConfigError("top_k: k_percent must be in (0, 100], got " + std::to_string(k_percent));
  const auto count =
      static_cast<std::size_t>(std::ceil(k_percent * static_cast<double>(total) / 100.0));
  return std::min(std::max<std::size_t>(count, 1), total);
}

// Indices of the `count` largest values, ties broken toward the lower index.
template <typename T>
std::vector<std::size_t> rank_indices(std::span<const T> values, std::size_t count) {
  std::vector<std::size_t> idx(values.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (values[a] != values[b]) return values[a] > values[b];
    return a < b;
  });
  idx.resize(std::min(count, idx.size()));
  return idx;
}

template <typename T>
std::vector<std::size_t> top_k_bags(const AttentionRecordT<T>& rec, double k_percent) {
  const auto v = rec.bag_coeffs.values();
  return rank_indices(v, top_k_count(k_percent, v.size()));
}

// Words ranked by their word-to-bag coefficients across the whole image.
template <typename T>
std::vector<std::pair<std::size_t, std::size_t>> top_k_words(const AttentionRecordT<T>& rec,
                                                             double k_percent) {
  const auto v = rec.word_coeffs.values();
  const std::size_t m = rec.word_coeffs.dims()[1];
  auto flat = rank_indices(v, top_k_count(k_percent, v.size()));
  std::vector<std::pair<std::size_t, std::size_t>> out;
  out.reserve(flat.size());
  for (std::size_t f : flat) out.emplace_back(f / m, f % m);
  return out;
}

}  // namespace hatnet
