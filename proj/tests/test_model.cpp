#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "hatnet/image.hpp"
#include "hatnet/model.hpp"
#include "hatnet/rng.hpp"
#include "hatnet/tensor.hpp"
#include "oracles.hpp"
#include "reference_forward.hpp"
#include "support.hpp"

using namespace hatnet;
using testor::dvec;
using testor::to_d;
using testsup::random_tensor;

namespace {

// Small precomputed-feature config for pipeline tests.
ModelConfig feature_config(std::size_t n, std::size_t m, std::size_t d, std::size_t heads,
                           std::size_t classes, PsiKind psi = PsiKind::euclidean) {
  ModelConfig cfg;
  cfg.tiling.n = n;
  cfg.tiling.m = m;
  cfg.tiling.d = d;
  cfg.heads = heads;
  cfg.classes = classes;
  cfg.psi = psi;
  cfg.encoder = EncoderMode::precomputed;
  return cfg;
}

WordFeatures random_features(const ModelConfig& cfg, Rng& rng, double lo = -1.0, double hi = 1.0) {
  return WordFeatures::from_tensor(
      random_tensor<float>({cfg.tiling.n, cfg.tiling.m, cfg.tiling.d}, rng, lo, hi));
}

double worst_vs(std::span<const float> got, const dvec& want) {
  REQUIRE(got.size() == want.size());
  return testor::worst_abs_vs(got, want);
}

}  // namespace

// ---------------------------------------------------------------------------
// Tiling configuration
// ---------------------------------------------------------------------------

TEST_CASE("tiling config: full-scale arithmetic") {
  TilingConfig cfg;  // defaults: 49 bags x 49 words, 1792px bags of 256px words
  CHECK(cfg.bag_grid() == 7);
  CHECK(cfg.word_grid() == 7);
  CHECK(cfg.image_px() == 12544);
  CHECK(cfg.words_per_image() == 2401);
  CHECK_NOTHROW(cfg.validate_geometry());

  TilingConfig desk{16, 16, 128, 32, 1, 64};
  CHECK(desk.bag_grid() == 4);
  CHECK(desk.word_grid() == 4);
  CHECK(desk.image_px() == 512);
  CHECK_NOTHROW(desk.validate_geometry());
}

TEST_CASE("tiling config: rejects non-square grids and inconsistent pixel sizes") {
  TilingConfig cfg{16, 16, 128, 32, 1, 64};
  cfg.n = 5;
  CHECK_THROWS_AS(cfg.bag_grid(), ConfigError);
  cfg.n = 16;
  cfg.m = 3;
  CHECK_THROWS_AS(cfg.word_grid(), ConfigError);
  CHECK_THROWS_AS(cfg.validate_geometry(), ConfigError);
  cfg.m = 16;
  cfg.bag_px = 130;  // != word_grid * word_px
  CHECK_THROWS_AS(cfg.validate_geometry(), ConfigError);
  cfg.bag_px = 128;
  cfg.word_px = 0;
  CHECK_THROWS_AS(cfg.validate_geometry(), ConfigError);
}

TEST_CASE("model config: validates head divisibility and class count") {
  ModelConfig cfg = feature_config(4, 4, 8, 2, 3);
  CHECK_NOTHROW(cfg.validate());
  cfg.heads = 3;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.heads = 2;
  cfg.classes = 1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.classes = 3;
  cfg.tiling.d = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("psi kind and encoder mode round-trip through strings") {
  for (PsiKind k : {PsiKind::euclidean, PsiKind::manhattan, PsiKind::mean})
    CHECK(psi_kind_from_string(to_string(k)) == k);
  CHECK_THROWS_AS(psi_kind_from_string("cosine"), ConfigError);
  for (EncoderMode m : {EncoderMode::toy, EncoderMode::precomputed})
    CHECK(encoder_mode_from_string(to_string(m)) == m);
  CHECK_THROWS_AS(encoder_mode_from_string("cnn"), ConfigError);
}

// ---------------------------------------------------------------------------
// Tiling
// ---------------------------------------------------------------------------

TEST_CASE("tile_image: places every pixel in its word, and reassembles exactly") {
  // 4x4 image, 2px bags of 1px words: each pixel is its own word.
  TilingConfig cfg{4, 4, 2, 1, 1, 8};
  ImageBuf im(4, 4, 1);
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x) im.at(y, x, 0) = static_cast<float>(y * 4 + x);

  const TiledImage tiled = tile_image(im, cfg);
  REQUIRE(tiled.words.dims() == Dims{4, 4, 1, 1, 1});
  const auto wv = tiled.words.values();
  for (std::size_t b = 0; b < 4; ++b)
    for (std::size_t w = 0; w < 4; ++w) {
      const auto r = tiled.word_rect(b, w);
      CHECK(wv[b * 4 + w] == im.at(r.y0, r.x0, 0));
    }

  const ImageBuf back = tiled.reassemble();
  REQUIRE(back.h == 4);
  REQUIRE(back.w == 4);
  for (std::size_t i = 0; i < back.data.size(); ++i) CHECK(back.data[i] == im.data[i]);

  CHECK_THROWS_AS(tiled.word_rect(4, 0), IndexError);
  CHECK_THROWS_AS(tiled.word_rect(0, 4), IndexError);
}

TEST_CASE("tile_image: multi-word bags land at the documented rectangles") {
  // One 4px bag of four 2px words; 2 channels.
  TilingConfig cfg{1, 4, 4, 2, 2, 8};
  ImageBuf im(4, 4, 2);
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x)
      for (std::size_t c = 0; c < 2; ++c)
        im.at(y, x, c) = static_cast<float>(100 * c + y * 4 + x);

  const TiledImage tiled = tile_image(im, cfg);
  REQUIRE(tiled.words.dims() == Dims{1, 4, 2, 2, 2});
  // Word 3 is the bottom-right 2x2 block.
  const auto r = tiled.word_rect(0, 3);
  CHECK(r.y0 == 2);
  CHECK(r.x0 == 2);
  const auto wv = tiled.words.values();
  const std::size_t base = 3 * 2 * 2 * 2;
  for (std::size_t y = 0; y < 2; ++y)
    for (std::size_t x = 0; x < 2; ++x)
      for (std::size_t c = 0; c < 2; ++c)
        CHECK(wv[base + (y * 2 + x) * 2 + c] == im.at(2 + y, 2 + x, c));

  const ImageBuf back = tiled.reassemble();
  for (std::size_t i = 0; i < back.data.size(); ++i) CHECK(back.data[i] == im.data[i]);
}

TEST_CASE("tile_image: resizes mismatched inputs and validates channels") {
  TilingConfig cfg{4, 4, 2, 1, 1, 8};  // image side 4
  Rng rng(401);
  ImageBuf im(10, 6, 1);
  for (auto& v : im.data) v = static_cast<float>(rng.uniform());
  const ImageBuf resized = resize_bilinear(im, 4, 4);
  const TiledImage tiled = tile_image(im, cfg);
  const ImageBuf back = tiled.reassemble();
  for (std::size_t i = 0; i < back.data.size(); ++i) CHECK(back.data[i] == resized.data[i]);

  ImageBuf rgb(4, 4, 3);
  CHECK_THROWS_AS(tile_image(rgb, cfg), ConfigError);
  CHECK_THROWS_AS(tile_image(ImageBuf(0, 4, 1), cfg), ConfigError);
}

// ---------------------------------------------------------------------------
// Word encoder
// ---------------------------------------------------------------------------

TEST_CASE("word encoder: zero weights give zero features; projection bias shifts them") {
  EncoderConfig ec{2, 3, 4};
  Rng rng(77);
  auto enc = WordEncoder::init(ec, 8, 1, 5, true, rng);
  for (auto& [name, t] : std::vector<std::pair<std::string, Tensor>>{{"s1", enc.stage1.weight},
                                                                     {"s2", enc.stage2.weight},
                                                                     {"p", enc.proj.weight}})
    std::fill(t.values_mut().begin(), t.values_mut().end(), 0.0f);
  std::fill(enc.stage1.bias->values_mut().begin(), enc.stage1.bias->values_mut().end(), 0.0f);
  std::fill(enc.stage2.bias->values_mut().begin(), enc.stage2.bias->values_mut().end(), 0.0f);
  auto pb = enc.proj.bias->values_mut();
  for (std::size_t j = 0; j < pb.size(); ++j) pb[j] = static_cast<float>(j) - 2.0f;

  Rng drng(78);
  auto words = random_tensor<float>({2, 3, 8, 8, 1}, drng);
  const auto feats = encode_words(enc, words);
  REQUIRE(feats.features.dims() == Dims{2, 3, 5});
  const auto fv = feats.features.values();
  for (std::size_t w = 0; w < 6; ++w)
    for (std::size_t j = 0; j < 5; ++j) CHECK(fv[w * 5 + j] == static_cast<float>(j) - 2.0f);
}

TEST_CASE("word encoder: agrees with the straight-line reference") {
  EncoderConfig ec{2, 3, 5};
  for (const bool with_bias : {false, true}) {
    CAPTURE(with_bias);
    Rng rng(with_bias ? 501u : 502u);
    auto enc = WordEncoder::init(ec, 8, 2, 6, with_bias, rng);
    auto words = random_tensor<float>({2, 2, 8, 8, 2}, rng);
    const auto feats = encode_words(enc, words);
    REQUIRE(feats.n() == 2);
    REQUIRE(feats.m() == 2);
    REQUIRE(feats.d() == 6);
    const dvec want = testor::n_encode(enc, to_d(words), 4);
    CHECK(worst_vs(feats.features.values(), want) < 1e-5);
  }
}

TEST_CASE("word encoder: rejects invalid geometry") {
  Rng rng(91);
  EncoderConfig ec{3, 4, 4};
  // 3 does not divide 8.
  CHECK_THROWS_AS(WordEncoder::init(ec, 8, 1, 4, false, rng), ConfigError);
  // 8/8 = 1 stage-1 cell: no 2x2 second stage.
  ec.patch = 8;
  CHECK_THROWS_AS(WordEncoder::init(ec, 8, 1, 4, false, rng), ConfigError);
  ec.patch = 2;
  ec.f1 = 0;
  CHECK_THROWS_AS(WordEncoder::init(ec, 8, 1, 4, false, rng), ConfigError);

  ec.f1 = 4;
  auto enc = WordEncoder::init(ec, 8, 1, 4, false, rng);
  CHECK_THROWS_AS(enc.encode(random_tensor<float>({2, 2, 8, 8}, rng)), ShapeError);
  CHECK_THROWS_AS(enc.encode(random_tensor<float>({2, 2, 4, 4, 1}, rng)), ShapeError);
  CHECK_THROWS_AS(enc.encode(random_tensor<float>({2, 2, 8, 8, 3}, rng)), ShapeError);
}

TEST_CASE("word features: ingestion validates rank and finiteness") {
  Rng rng(92);
  auto ok = random_tensor<float>({2, 3, 4}, rng);
  const auto wf = WordFeatures::from_tensor(ok);
  CHECK(wf.n() == 2);
  CHECK(wf.m() == 3);
  CHECK(wf.d() == 4);
  for (std::size_t i = 0; i < ok.numel(); ++i)
    CHECK(wf.features.values()[i] == ok.values()[i]);

  CHECK_THROWS_AS(WordFeatures::from_tensor(random_tensor<float>({6, 4}, rng)), ShapeError);
  auto bad = random_tensor<float>({2, 3, 4}, rng);
  bad.values_mut()[5] = std::numeric_limits<float>::quiet_NaN();
  CHECK_THROWS_AS(WordFeatures::from_tensor(bad), ContractError);
}

// ---------------------------------------------------------------------------
// Attention pooling (word_to_bag / bag_to_image)
// ---------------------------------------------------------------------------

TEST_CASE("psi: hand values for all three kinds") {
  auto x = Tensor::from_data({2, 2}, {3.0f, 4.0f, 1.0f, -2.0f});
  const auto l2 = psi(PsiKind::euclidean, x);
  CHECK(l2.values()[0] == 5.0f);
  CHECK(l2.values()[1] == doctest::Approx(std::sqrt(5.0)).epsilon(1e-6));
  const auto l1 = psi(PsiKind::manhattan, x);
  CHECK(l1.values()[0] == 7.0f);
  CHECK(l1.values()[1] == 3.0f);
  const auto mean = psi(PsiKind::mean, x);
  CHECK(mean.values()[0] == 3.5f);
  CHECK(mean.values()[1] == -0.5f);
}

TEST_CASE("word_to_bag: a single word passes through with coefficient one") {
  Rng rng(11);
  auto beta = random_tensor<float>({1, 1}, rng);
  auto x = random_tensor<float>({1, 5}, rng);
  for (PsiKind kind : {PsiKind::euclidean, PsiKind::manhattan, PsiKind::mean}) {
    const auto agg = word_to_bag(beta, x, kind);
    CHECK(agg.coeffs.values()[0] == 1.0f);
    for (std::size_t j = 0; j < 5; ++j) CHECK(agg.pooled.values()[j] == x.values()[j]);
  }
}

TEST_CASE("word_to_bag: identical rows with an identity mixer pool uniformly") {
  const std::size_t m = 4, d = 3;
  auto beta = Tensor::zeros({m, m});
  for (std::size_t i = 0; i < m; ++i) beta.values_mut()[i * m + i] = 1.0f;
  std::vector<float> row{0.3f, -1.2f, 0.7f};
  std::vector<float> data;
  for (std::size_t i = 0; i < m; ++i) data.insert(data.end(), row.begin(), row.end());
  auto x = Tensor::from_data({m, d}, std::move(data));

  const auto agg = word_to_bag(beta, x, PsiKind::euclidean);
  for (std::size_t i = 0; i < m; ++i) CHECK(agg.coeffs.values()[i] == 0.25f);
  for (std::size_t j = 0; j < d; ++j)
    CHECK(agg.pooled.values()[j] == doctest::Approx(row[j]).epsilon(1e-6));
}

TEST_CASE("word_to_bag: hand-computed three-row case") {
  // Rows with L2 norms 5, 2, 3 and an identity mixer: coefficients are
  // softmax(5, 2, 3) and the pool is their convex blend.
  auto beta = Tensor::zeros({3, 3});
  for (std::size_t i = 0; i < 3; ++i) beta.values_mut()[i * 3 + i] = 1.0f;
  auto x = Tensor::from_data({3, 2}, {3.0f, 4.0f, 2.0f, 0.0f, 0.0f, -3.0f});

  const double e5 = std::exp(5.0), e2 = std::exp(2.0), e3 = std::exp(3.0);
  const double z = e5 + e2 + e3;
  const dvec want_coeffs{e5 / z, e2 / z, e3 / z};
  const dvec want_pooled{want_coeffs[0] * 3.0 + want_coeffs[1] * 2.0, want_coeffs[0] * 4.0 +
                                                                          want_coeffs[2] * -3.0};

  const auto agg = word_to_bag(beta, x, PsiKind::euclidean);
  CHECK(worst_vs(agg.coeffs.values(), want_coeffs) < 1e-6);
  CHECK(worst_vs(agg.pooled.values(), want_pooled) < 1e-6);
}

TEST_CASE("word_to_bag: scaling the rows sharpens the coefficients monotonically") {
  Rng rng(303);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t m = 2 + rng.below(5), d = 1 + rng.below(6);
    const PsiKind kind = trial % 2 == 0 ? PsiKind::euclidean : PsiKind::manhattan;
    auto beta = Tensor::zeros({m, m});
    for (std::size_t i = 0; i < m; ++i) beta.values_mut()[i * m + i] = 1.0f;

    // Redraw until the top-two scores are separated; softmax ordering checks
    // need a margin.
    Tensor x;
    dvec scores;
    while (true) {
      x = random_tensor<float>({m, d}, rng);
      scores = testor::n_psi(kind, to_d(x), m, d);
      dvec sorted = scores;
      std::sort(sorted.begin(), sorted.end(), std::greater<>());
      if (sorted[0] - sorted[1] > 1e-2) break;
    }

    const auto base = word_to_bag(beta, x, kind);
    const auto sharp = word_to_bag(beta, scale(x, 1.5f), kind);

    const std::size_t top = static_cast<std::size_t>(
        std::max_element(scores.begin(), scores.end()) - scores.begin());
    const auto bc = base.coeffs.values();
    const auto sc = sharp.coeffs.values();
    CHECK(argmax_index(bc) == top);
    CHECK(argmax_index(sc) == top);
    // Scaling multiplies every score by 1.5, which concentrates the softmax.
    CHECK(sc[top] > bc[top]);
  }
}

TEST_CASE("word_to_bag: the pool is a convex combination of the rows") {
  Rng rng(304);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t m = 1 + rng.below(6), d = 1 + rng.below(5);
    auto beta = random_tensor<float>({m, m}, rng);
    auto x = random_tensor<float>({m, d}, rng, -2.0, 2.0);
    const PsiKind kind = static_cast<PsiKind>(trial % 3);
    const auto agg = word_to_bag(beta, x, kind);

    double coeff_sum = 0.0;
    for (float c : agg.coeffs.values()) {
      CHECK(c >= 0.0f);
      coeff_sum += c;
    }
    CHECK(coeff_sum == doctest::Approx(1.0).epsilon(1e-6));

    const auto xv = x.values();
    for (std::size_t j = 0; j < d; ++j) {
      double lo = 1e30, hi = -1e30;
      for (std::size_t i = 0; i < m; ++i) {
        lo = std::min(lo, static_cast<double>(xv[i * d + j]));
        hi = std::max(hi, static_cast<double>(xv[i * d + j]));
      }
      const double p = agg.pooled.values()[j];
      CHECK(p >= lo - 1e-6);
      CHECK(p <= hi + 1e-6);
    }
  }
}

TEST_CASE("aggregate_rows: rejects a mixing matrix of the wrong shape") {
  Rng rng(305);
  auto x = random_tensor<float>({3, 4}, rng);
  CHECK_THROWS_WITH_AS(aggregate_rows(random_tensor<float>({2, 2}, rng), x, PsiKind::mean),
                       doctest::Contains("must be square over 3 rows"), ShapeError);
  CHECK_THROWS_AS(aggregate_rows(random_tensor<float>({3, 4}, rng), x, PsiKind::mean), ShapeError);
}

// ---------------------------------------------------------------------------
// Bag-to-bag
// ---------------------------------------------------------------------------

TEST_CASE("bag_to_bag: with one bag the query branch cannot influence the output") {
  // A single key/value row receives attention weight exactly 1 regardless of
  // the query, so the raw-feature branch drops out entirely.
  auto cfg = feature_config(1, 2, 6, 2, 3);
  Rng rng(611);
  const auto params = HatnetParams::init(cfg, rng);
  auto bar = random_tensor<float>({1, 6}, rng);
  auto hat_a = random_tensor<float>({1, 6}, rng);
  auto hat_b = random_tensor<float>({1, 6}, rng);

  const auto out_a = bag_to_bag(params, hat_a, bar);
  const auto out_b = bag_to_bag(params, hat_b, bar);
  for (std::size_t j = 0; j < 6; ++j) CHECK(out_a.values()[j] == out_b.values()[j]);

  // And the whole composition matches the straight-line reference.
  const dvec self_ref = testor::n_multi_head(params.b2b_self, to_d(hat_a), 1, to_d(hat_a),
                                             to_d(hat_a), 1);
  const dvec want = testor::n_transformer(params.b2b_cross, params.b2b_ffn, self_ref, 1,
                                          to_d(bar), to_d(bar), 1, false);
  CHECK(worst_vs(out_a.values(), want) < 1e-5);
}

TEST_CASE("bag_to_bag: identical key/value rows give identical output rows") {
  auto cfg = feature_config(3, 2, 8, 2, 3);
  Rng rng(612);
  const auto params = HatnetParams::init(cfg, rng);
  auto hat = random_tensor<float>({3, 8}, rng);
  std::vector<float> row;
  for (std::size_t j = 0; j < 8; ++j) row.push_back(static_cast<float>(rng.uniform(-1.0, 1.0)));
  std::vector<float> data;
  for (int i = 0; i < 3; ++i) data.insert(data.end(), row.begin(), row.end());
  auto bar = Tensor::from_data({3, 8}, std::move(data));

  const auto out = bag_to_bag(params, hat, bar);
  const auto ov = out.values();
  for (std::size_t i = 1; i < 3; ++i)
    for (std::size_t j = 0; j < 8; ++j)
      CHECK(ov[i * 8 + j] == doctest::Approx(ov[j]).epsilon(1e-5));
}

TEST_CASE("bag_to_bag: agrees with the straight-line reference") {
  for (int trial = 0; trial < 20; ++trial) {
    auto cfg = feature_config(3, 2, 8, trial % 2 == 0 ? 2 : 4, 3);
    cfg.bias = trial % 3 == 0;
    cfg.residual_norm = trial % 4 == 0;
    Rng rng(620 + static_cast<std::uint32_t>(trial));
    const auto params = HatnetParams::init(cfg, rng);
    auto hat = random_tensor<float>({3, 8}, rng);
    auto bar = random_tensor<float>({3, 8}, rng);

    const auto out = bag_to_bag(params, hat, bar);
    const dvec self_ref =
        testor::n_multi_head(params.b2b_self, to_d(hat), 3, to_d(hat), to_d(hat), 3);
    const dvec want = testor::n_transformer(params.b2b_cross, params.b2b_ffn, self_ref, 3,
                                            to_d(bar), to_d(bar), 3, cfg.residual_norm);
    CHECK(worst_vs(out.values(), want) < 2e-5);
  }
}

// ---------------------------------------------------------------------------
// Classifier
// ---------------------------------------------------------------------------

TEST_CASE("classify: zero representation gives exactly uniform probabilities") {
  Rng rng(701);
  auto cls = random_tensor<float>({8, 4}, rng);
  const auto pred = classify(cls, Tensor::zeros({1, 8}));
  for (std::size_t j = 0; j < 4; ++j) CHECK(pred.probs.values()[j] == 0.25f);
  CHECK(pred.predicted_class == 0);  // tie resolves to the lower index
}

TEST_CASE("classify: hand-computed two-class logits") {
  auto cls = Tensor::from_data({2, 2}, {5.0f, -5.0f, 0.0f, 0.0f});
  auto repr = Tensor::from_data({1, 2}, {1.0f, 0.0f});
  const auto pred = classify(cls, repr);
  const double p0 = 1.0 / (1.0 + std::exp(-10.0));
  CHECK(pred.probs.values()[0] == doctest::Approx(p0).epsilon(1e-6));
  CHECK(pred.probs.values()[1] == doctest::Approx(1.0 - p0).epsilon(1e-6));
  CHECK(pred.predicted_class == 0);
}

TEST_CASE("argmax_index: ties keep the lower index") {
  const std::vector<float> v{1.0f, 3.0f, 3.0f, 2.0f};
  CHECK(argmax_index(std::span<const float>(v)) == 1);
  const std::vector<float> single{-2.0f};
  CHECK(argmax_index(std::span<const float>(single)) == 0);
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

TEST_CASE("parameter registry: stable names, shapes, and gradient flags") {
  ModelConfig cfg = feature_config(4, 9, 8, 2, 3);
  cfg.bias = true;
  Rng rng(801);
  const auto params = HatnetParams::init(cfg, rng);
  const auto named = params.named_params();

  std::vector<std::string> names;
  for (const auto& [name, t] : named) {
    names.push_back(name);
    CHECK(t.requires_grad());
    CHECK(t.all_finite());
  }

  std::vector<std::string> want;
  auto mha_names = [&want](const std::string& base, std::size_t heads) {
    for (std::size_t h = 0; h < heads; ++h)
      for (const char* part : {"query", "key", "value"}) {
        want.push_back(base + ".h" + std::to_string(h) + "." + part + ".weight");
        want.push_back(base + ".h" + std::to_string(h) + "." + part + ".bias");
      }
    want.push_back(base + ".out.weight");
    want.push_back(base + ".out.bias");
  };
  auto ffn_names = [&want](const std::string& base) {
    for (const char* part : {"expand", "reduce"}) {
      want.push_back(base + "." + std::string(part) + ".weight");
      want.push_back(base + "." + std::string(part) + ".bias");
    }
  };
  mha_names("w2w.mha", 2);
  ffn_names("w2w.ffn");
  want.push_back("w2b.bar");
  want.push_back("w2b.hat");
  mha_names("b2b.self", 2);
  mha_names("b2b.cross", 2);
  ffn_names("b2b.ffn");
  want.push_back("b2i");
  want.push_back("cls");
  CHECK(names == want);

  // Shapes of the non-linear entries.
  for (const auto& [name, t] : named) {
    if (name == "w2b.bar" || name == "w2b.hat") CHECK(t.dims() == Dims{9, 9});
    if (name == "b2i") CHECK(t.dims() == Dims{4, 4});
    if (name == "cls") CHECK(t.dims() == Dims{8, 3});
  }

  // Hand count: 3 attention blocks of H*(3*(d*dh+dh)) + d*d+d, two FFNs of
  // d*4d+4d + 4d*d+d, two m x m mixers, one n x n mixer, and d x C.
  const std::size_t d = 8, dh = 4, mha = 2 * 3 * (d * dh + dh) + d * d + d;
  const std::size_t ffn = d * 4 * d + 4 * d + 4 * d * d + d;
  CHECK(params.param_count() == 3 * mha + 2 * ffn + 2 * 81 + 16 + 24);
}

TEST_CASE("parameter registry: toy mode prepends the encoder, no-bias drops biases") {
  ModelConfig cfg = feature_config(4, 4, 8, 2, 3);
  cfg.encoder = EncoderMode::toy;
  cfg.tiling.word_px = 8;
  cfg.tiling.bag_px = 16;
  cfg.enc = EncoderConfig{2, 3, 4};
  Rng rng(802);
  const auto params = HatnetParams::init(cfg, rng);
  REQUIRE(params.encoder.has_value());
  const auto named = params.named_params();
  REQUIRE(named.size() > 6);
  CHECK(named[0].first == "encoder.stage1.weight");
  CHECK(named[1].first == "encoder.stage2.weight");
  CHECK(named[2].first == "encoder.proj.weight");
  CHECK(named[3].first == "w2w.mha.h0.query.weight");
  for (const auto& [name, t] : named) CHECK(name.find(".bias") == std::string::npos);
  CHECK(named[0].second.dims() == Dims{4, 3});   // patch^2 * c x f1
  CHECK(named[1].second.dims() == Dims{12, 4});  // 4 * f1 x f2
  CHECK(named[2].second.dims() == Dims{4, 8});   // f2 x d
}

TEST_CASE("parameter registry: full-scale attention stack holds 1,843,235 weights") {
  ModelConfig cfg;  // full-scale defaults: n=m=49, d=256, H=4, C=4
  cfg.encoder = EncoderMode::precomputed;
  Rng rng(803);
  const auto params = HatnetParams::init(cfg, rng);
  CHECK(params.param_count() == 1843235u);
}

TEST_CASE("parameter init: uniform bounds follow the fan-in rule") {
  ModelConfig cfg = feature_config(6, 5, 8, 2, 3);
  Rng rng(804);
  const auto params = HatnetParams::init(cfg, rng);
  auto bound_of = [](const Tensor& t, double bound) {
    double worst = 0.0;
    for (float v : t.values()) worst = std::max(worst, std::abs(static_cast<double>(v)));
    return worst <= bound + 1e-12;
  };
  CHECK(bound_of(params.w2w_mha.query[0].weight, 1.0 / std::sqrt(8.0)));
  CHECK(bound_of(params.w2w_ffn.expand.weight, 1.0 / std::sqrt(8.0)));
  CHECK(bound_of(params.w2w_ffn.reduce.weight, 1.0 / std::sqrt(32.0)));
  CHECK(bound_of(params.w2b_bar, 1.0 / std::sqrt(5.0)));
  CHECK(bound_of(params.b2i, 1.0 / std::sqrt(6.0)));
  CHECK(bound_of(params.cls, 1.0 / std::sqrt(8.0)));

  // Same seed, same parameters.
  Rng rng2(804);
  const auto again = HatnetParams::init(cfg, rng2);
  const auto a = params.named_params();
  const auto b = again.named_params();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].second.numel(); ++j)
      CHECK(a[i].second.values()[j] == b[i].second.values()[j]);
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

TEST_CASE("forward: probabilities normalize and records are stochastic matrices") {
  Rng meta(900);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + meta.below(4), m = 1 + meta.below(4);
    const std::size_t d = meta.coin() ? 4 : 8, heads = meta.coin() ? 1 : 2;
    const std::size_t classes = 2 + meta.below(4);
    auto cfg = feature_config(n, m, d, heads, classes, static_cast<PsiKind>(trial % 3));
    cfg.bias = trial % 2 == 0;
    cfg.residual_norm = trial % 5 == 0;
    Rng rng(901 + static_cast<std::uint32_t>(trial));
    const auto params = HatnetParams::init(cfg, rng);
    const auto feats = random_features(cfg, rng);
    const auto out = forward(params, feats);

    REQUIRE(out.probs.dims() == Dims{1, classes});
    REQUIRE(out.logits.all_finite());
    double psum = 0.0;
    for (float p : out.probs.values()) {
      CHECK(p >= 0.0f);
      psum += p;
    }
    CHECK(psum == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(out.predicted_class == argmax_index(out.probs.values()));

    REQUIRE(out.attention.word_coeffs.dims() == Dims{n, m});
    REQUIRE(out.attention.hat_word_coeffs.dims() == Dims{n, m});
    REQUIRE(out.attention.bag_coeffs.dims() == Dims{1, n});
    for (std::size_t i = 0; i < n; ++i) {
      double row = 0.0;
      for (std::size_t w = 0; w < m; ++w)
        row += out.attention.word_coeffs.values()[i * m + w];
      CHECK(row == doctest::Approx(1.0).epsilon(1e-6));
    }
    double bags = 0.0;
    for (float c : out.attention.bag_coeffs.values()) bags += c;
    CHECK(bags == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("forward: single-bag single-word chain matches a hand-built composition") {
  auto cfg = feature_config(1, 1, 6, 2, 3);
  Rng rng(910);
  const auto params = HatnetParams::init(cfg, rng);
  const auto feats = random_features(cfg, rng);
  const auto out = forward(params, feats);

  // With one word and one bag every softmax pool is a pass-through, so the
  // pipeline collapses to transformer / attention blocks in sequence.
  const dvec f = to_d(feats.features);
  const dvec bar = testor::n_transformer(params.w2w_mha, params.w2w_ffn, f, 1, f, f, 1, false);
  const dvec self = testor::n_multi_head(params.b2b_self, f, 1, f, f, 1);
  const dvec image =
      testor::n_transformer(params.b2b_cross, params.b2b_ffn, self, 1, bar, bar, 1, false);
  const dvec logits = testor::n_matmul(image, 1, 6, to_d(params.cls), 3);
  const dvec probs = testor::n_softmax_rows(logits, 1, 3);

  CHECK(out.attention.word_coeffs.values()[0] == 1.0f);
  CHECK(out.attention.hat_word_coeffs.values()[0] == 1.0f);
  CHECK(out.attention.bag_coeffs.values()[0] == 1.0f);
  CHECK(worst_vs(out.logits.values(), logits) < 1e-5);
  CHECK(worst_vs(out.probs.values(), probs) < 1e-6);
}

TEST_CASE("forward: matches the straight-line reference on precomputed features") {
  int compared = 0;
  for (std::size_t n = 1; n <= 3; ++n)
    for (std::size_t m = 1; m <= 3; ++m)
      for (int seed = 0; seed < 6; ++seed) {
        auto cfg = feature_config(n, m, 4, 2, 3, static_cast<PsiKind>(seed % 3));
        cfg.bias = seed % 2 == 0;
        cfg.residual_norm = n % 2 == 0;
        Rng rng(1000 + static_cast<std::uint32_t>(9 * n + 3 * m) * 7 +
                static_cast<std::uint32_t>(seed));
        const auto params = HatnetParams::init(cfg, rng);
        const auto feats = random_features(cfg, rng);

        const auto out = forward(params, feats);
        const auto ref = testor::reference_forward(params, to_d(feats.features));

        CHECK(worst_vs(out.logits.values(), ref.logits) < 1e-5);
        CHECK(worst_vs(out.probs.values(), ref.probs) < 1e-6);
        CHECK(worst_vs(out.attention.word_coeffs.values(), ref.word_coeffs) < 1e-6);
        CHECK(worst_vs(out.attention.hat_word_coeffs.values(), ref.hat_word_coeffs) < 1e-6);
        CHECK(worst_vs(out.attention.bag_coeffs.values(), ref.bag_coeffs) < 1e-6);

        // Only compare the argmax when the reference separates the top two.
        dvec sorted = ref.probs;
        std::sort(sorted.begin(), sorted.end(), std::greater<>());
        if (sorted[0] - sorted[1] > 1e-5) CHECK(out.predicted_class == ref.predicted);
        ++compared;
      }
  CHECK(compared == 54);
}

TEST_CASE("forward: matches the straight-line reference from pixels") {
  ModelConfig cfg;
  cfg.tiling = TilingConfig{4, 4, 16, 8, 1, 8};
  cfg.heads = 2;
  cfg.classes = 3;
  cfg.encoder = EncoderMode::toy;
  cfg.enc = EncoderConfig{2, 3, 4};
  Rng rng(1100);
  const auto params = HatnetParams::init(cfg, rng);

  ImageBuf im(32, 32, 1);
  for (auto& v : im.data) v = static_cast<float>(rng.uniform());
  const TiledImage tiled = tile_image(im, cfg.tiling);
  const auto out = forward(params, tiled);
  const auto ref = testor::reference_forward_pixels(params, to_d(tiled.words));

  CHECK(worst_vs(out.logits.values(), ref.logits) < 1e-4);
  CHECK(worst_vs(out.probs.values(), ref.probs) < 1e-5);
  CHECK(worst_vs(out.attention.bag_coeffs.values(), ref.bag_coeffs) < 1e-5);
}

TEST_CASE("forward: permuting words inside bags with a conjugated mixer is invariant") {
  auto cfg = feature_config(2, 4, 6, 2, 3);
  Rng rng(1200);
  auto params = HatnetParams::init(cfg, rng);
  const auto feats = random_features(cfg, rng);
  const auto base = forward(params, feats);

  // sigma: new word i holds old word sigma[i]; mixers get conjugated to match.
  const std::vector<std::size_t> sigma{2, 0, 3, 1};
  const std::size_t n = 2, m = 4, d = 6;
  std::vector<float> permuted(n * m * d);
  const auto fv = feats.features.values();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t w = 0; w < m; ++w)
      for (std::size_t j = 0; j < d; ++j)
        permuted[(b * m + w) * d + j] = fv[(b * m + sigma[w]) * d + j];
  auto conjugate = [&sigma, m](const Tensor& beta) {
    auto out = Tensor::zeros({m, m});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < m; ++j)
        out.values_mut()[i * m + j] = beta.values()[sigma[i] * m + sigma[j]];
    return out;
  };
  auto mutated = params;
  mutated.w2b_bar = conjugate(params.w2b_bar);
  mutated.w2b_hat = conjugate(params.w2b_hat);
  const auto out = forward(
      mutated, WordFeatures::from_tensor(Tensor::from_data({n, m, d}, std::move(permuted))));

  CHECK(worst_vs(out.probs.values(), to_d(base.probs)) < 1e-6);
  // Word coefficients follow the words.
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t w = 0; w < m; ++w)
      CHECK(out.attention.word_coeffs.values()[b * m + w] ==
            doctest::Approx(base.attention.word_coeffs.values()[b * m + sigma[w]])
                .epsilon(1e-5));
}

TEST_CASE("forward: permuting bags with a conjugated mixer is invariant") {
  auto cfg = feature_config(3, 2, 6, 2, 4);
  Rng rng(1201);
  auto params = HatnetParams::init(cfg, rng);
  const auto feats = random_features(cfg, rng);
  const auto base = forward(params, feats);

  const std::vector<std::size_t> sigma{1, 2, 0};
  const std::size_t n = 3, m = 2, d = 6;
  std::vector<float> permuted(n * m * d);
  const auto fv = feats.features.values();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t i = 0; i < m * d; ++i) permuted[b * m * d + i] = fv[sigma[b] * m * d + i];
  auto mutated = params;
  auto b2i = Tensor::zeros({n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      b2i.values_mut()[i * n + j] = params.b2i.values()[sigma[i] * n + sigma[j]];
  mutated.b2i = b2i;
  const auto out = forward(
      mutated, WordFeatures::from_tensor(Tensor::from_data({n, m, d}, std::move(permuted))));

  CHECK(worst_vs(out.probs.values(), to_d(base.probs)) < 1e-6);
  for (std::size_t b = 0; b < n; ++b)
    CHECK(out.attention.bag_coeffs.values()[b] ==
          doctest::Approx(base.attention.bag_coeffs.values()[sigma[b]]).epsilon(1e-5));
}

TEST_CASE("forward: keep_weights records every attention head") {
  auto cfg = feature_config(2, 3, 4, 2, 3);
  cfg.keep_weights = true;
  Rng rng(1300);
  const auto params = HatnetParams::init(cfg, rng);
  const auto out = forward(params, random_features(cfg, rng));

  REQUIRE(out.attention.w2w_weights.size() == 2 * 2);  // n bags x H heads
  for (const auto& w : out.attention.w2w_weights) {
    REQUIRE(w.dims() == Dims{3, 3});
    for (std::size_t i = 0; i < 3; ++i) {
      double row = 0.0;
      for (std::size_t j = 0; j < 3; ++j) row += w.values()[i * 3 + j];
      CHECK(row == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
  REQUIRE(out.attention.b2b_self_weights.size() == 2);
  REQUIRE(out.attention.b2b_cross_weights.size() == 2);
  for (const auto& w : out.attention.b2b_self_weights) REQUIRE(w.dims() == Dims{2, 2});
  for (const auto& w : out.attention.b2b_cross_weights) REQUIRE(w.dims() == Dims{2, 2});

  cfg.keep_weights = false;
  Rng rng2(1300);
  const auto quiet = forward(HatnetParams::init(cfg, rng2), random_features(cfg, rng2));
  CHECK(quiet.attention.w2w_weights.empty());
  CHECK(quiet.attention.b2b_self_weights.empty());
  CHECK(quiet.attention.b2b_cross_weights.empty());
}

TEST_CASE("forward: shape and mode errors name the problem") {
  auto cfg = feature_config(2, 2, 4, 2, 3);
  Rng rng(1400);
  const auto params = HatnetParams::init(cfg, rng);
  auto bad = WordFeatures{random_tensor<float>({2, 2, 5}, rng)};
  CHECK_THROWS_WITH_AS(forward(params, bad), doctest::Contains("do not match model config"),
                       ShapeError);
  CHECK_THROWS_WITH_AS(forward(params, random_tensor<float>({2, 2, 8, 8, 1}, rng)),
                       doctest::Contains("no word encoder"), ContractError);
}

// ---------------------------------------------------------------------------
// Top-k attention ranking
// ---------------------------------------------------------------------------

TEST_CASE("top_k_count: ceiling semantics with bounds") {
  CHECK(top_k_count(50.0, 8) == 4);
  CHECK(top_k_count(10.0, 49) == 5);  // ceil(4.9)
  CHECK(top_k_count(100.0, 7) == 7);
  CHECK(top_k_count(0.5, 3) == 1);
  CHECK(top_k_count(30.0, 16) == 5);  // ceil(4.8)
  CHECK_THROWS_AS(top_k_count(0.0, 8), ConfigError);
  CHECK_THROWS_AS(top_k_count(-5.0, 8), ConfigError);
  CHECK_THROWS_AS(top_k_count(100.5, 8), ConfigError);
}

TEST_CASE("rank_indices: descending values with ties toward the lower index") {
  const std::vector<float> v{3.0f, 1.0f, 3.0f, 2.0f};
  CHECK(rank_indices(std::span<const float>(v), 3) == std::vector<std::size_t>{0, 2, 3});
  CHECK(rank_indices(std::span<const float>(v), 10) == std::vector<std::size_t>{0, 2, 3, 1});

  Rng rng(1500);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t count = 1 + rng.below(8);
    std::vector<float> vals(2 + rng.below(12));
    for (auto& x : vals) x = static_cast<float>(rng.below(5));  // force ties
    const auto got = rank_indices(std::span<const float>(vals), count);

    std::vector<std::size_t> idx(vals.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(),
                     [&vals](std::size_t a, std::size_t b) { return vals[a] > vals[b]; });
    idx.resize(std::min(count, idx.size()));
    CHECK(got == idx);
  }
}

TEST_CASE("top_k_bags and top_k_words: rank the recorded coefficients") {
  AttentionRecord rec;
  rec.bag_coeffs = Tensor::from_data({1, 4}, {0.1f, 0.4f, 0.2f, 0.3f});
  rec.word_coeffs =
      Tensor::from_data({2, 3}, {0.1f, 0.5f, 0.2f, 0.9f, 0.05f, 0.15f});

  CHECK(top_k_bags(rec, 50.0) == std::vector<std::size_t>{1, 3});
  CHECK(top_k_bags(rec, 100.0) == std::vector<std::size_t>{1, 3, 2, 0});

  const auto words = top_k_words(rec, 50.0);  // ceil(3) of 6
  REQUIRE(words.size() == 3);
  CHECK(words[0] == std::pair<std::size_t, std::size_t>{1, 0});
  CHECK(words[1] == std::pair<std::size_t, std::size_t>{0, 1});
  CHECK(words[2] == std::pair<std::size_t, std::size_t>{0, 2});
}

// ---------------------------------------------------------------------------
// End-to-end gradients (64-bit storage)
// ---------------------------------------------------------------------------

TEST_CASE("end-to-end gradients: every parameter matches finite differences (double)") {
  ModelConfig cfg;
  // 4px words keep the encoder's mean pool at a single cell, so the word
  // features stay diverse and every gradient is large enough for central
  // differences to resolve.
  cfg.tiling = TilingConfig{2, 2, 8, 4, 1, 8};
  cfg.heads = 2;
  cfg.classes = 3;
  cfg.encoder = EncoderMode::toy;
  cfg.enc = EncoderConfig{2, 3, 4};
  cfg.bias = true;

  // The conservative fan-in init cascades to near-constant logits at this
  // depth, which starves the deep branches of gradient signal. Re-randomize
  // every parameter to O(1) so all gradients are comfortably above the
  // central-difference noise floor; the seed keeps ReLU pre-activations clear
  // of their kinks.
  Rng rng(42);
  auto params = HatnetParamsT<double>::init(cfg, rng);
  // Amplify the conservative init: it keeps the fan-in-relative balance (so
  // the wide FFN cannot explode) while lifting the signal high enough that no
  // softmax goes flat and none saturates.
  for (auto& [name, tensor] : params.named_params())
    for (auto& v : tensor.values_mut()) v *= 2.5;
  // Give every word a distinct pixel range: statistically identical bags
  // would make the attention scores irrelevant and starve the query/key
  // branches of gradient.
  auto words = TensorT<double>::zeros({2, 2, 4, 4, 1});
  {
    auto wv = words.values_mut();
    for (std::size_t k = 0; k < 4; ++k) {
      const double lo = -1.0 + 0.7 * static_cast<double>(k);
      for (std::size_t i = 0; i < 16; ++i) wv[k * 16 + i] = rng.uniform(lo, lo + 0.8);
    }
  }
  const int label = 1;

  auto loss_value = [&]() {
    const auto out = forward(params, words);
    return static_cast<double>(cross_entropy_logits(out.logits, label).values()[0]);
  };

  params.set_requires_grad(true);
  params.zero_grad();
  {
    const auto out = forward(params, words);
    // The check only has teeth when the loss is far from flat: require
    // separated logits before trusting the sweep.
    const auto lv = out.logits.values();
    double lo = lv[0], hi = lv[0];
    for (double v : lv) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    REQUIRE(hi - lo > 0.1);
    auto loss = cross_entropy_logits(out.logits, label);
    backward(loss);
  }

  const double eps = 1e-5;
  double worst = 0.0;
  std::string worst_name;
  for (auto& [name, tensor] : params.named_params()) {
    REQUIRE(tensor.has_grad());
    const auto grad = tensor.grad();
    double scale = 0.0;
    for (std::size_t i = 0; i < tensor.numel(); ++i)
      scale = std::max(scale, std::abs(static_cast<double>(grad[i])));
    CAPTURE(name);
    // A key bias shifts every score in a softmax row by the same constant, so
    // it is structurally inert: its gradient must vanish identically.
    if (name.ends_with(".key.bias")) {
      CHECK(scale < 1e-12);
      continue;
    }
    CHECK(scale > 1e-6);  // every live branch must carry real signal
    for (std::size_t i = 0; i < tensor.numel(); ++i) {
      auto vals = tensor.values_mut();
      const double saved = vals[i];
      vals[i] = saved + eps;
      const double up = loss_value();
      vals[i] = saved - eps;
      const double down = loss_value();
      vals[i] = saved;
      const double fd = (up - down) / (2.0 * eps);
      const double diff = std::abs(fd - static_cast<double>(grad[i]));
      // Central differences on a double loss cannot resolve below
      // ~eps_machine * |loss| / eps; below that floor the two already agree.
      if (diff < 1e-10) continue;
      const double err =
          diff / std::max({std::abs(fd), std::abs(static_cast<double>(grad[i])), scale});
      if (err > worst) {
        worst = err;
        worst_name = name;
      }
    }
  }
  CAPTURE(worst_name);
  CHECK(worst < 1e-6);
}
