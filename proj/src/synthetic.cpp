#include "hatnet/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "hatnet/rng.hpp"
#include "hatnet/tensor_io.hpp"

namespace hatnet {

namespace {

using nlohmann::json;

constexpr const char* kFormat = "hatnet-dataset";
constexpr int kVersion = 1;

std::size_t planted_count(double density, std::size_t total) {
  const auto c = static_cast<std::size_t>(std::llround(density * static_cast<double>(total)));
  return std::min(std::max<std::size_t>(c, 1), total);
}

std::vector<std::size_t> pick_cells(std::size_t total, std::size_t count, Rng& rng) {
  std::vector<std::size_t> idx(total);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  rng.shuffle(idx);
  idx.resize(count);
  std::sort(idx.begin(), idx.end());
  return idx;
}

std::string sample_file(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "samples/%05zu.htnt", index);
  return buf;
}

}  // namespace

void SyntheticSpec::validate() const {
  if (classes < 2 || classes > 4)
    throw ConfigError("synth.classes: motif library covers 2..4 classes, got " +
                      std::to_string(classes));
  if (samples_per_class < 1) throw ConfigError("synth.samples_per_class: must be >= 1");
  if (n < 1 || m < 1 || word_px < 2)
    throw ConfigError("synth.n/m/word_px: need n, m >= 1 and word_px >= 2");
  if (!(density > 0.0) || density > 1.0)
    throw ConfigError("synth.density: must lie in (0, 1], got " + std::to_string(density));
  if (noise < 0.0) throw ConfigError("synth.noise: must be >= 0");
}

Tensor motif_template(std::size_t cls, std::size_t word_px) {
  if (cls >= 4) throw ConfigError("motif_template: class " + std::to_string(cls) + " out of 0..3");
  const std::size_t stripe = std::max<std::size_t>(1, word_px / 8);
  auto t = Tensor::zeros({word_px, word_px});
  auto tv = t.values_mut();
  for (std::size_t y = 0; y < word_px; ++y)
    for (std::size_t x = 0; x < word_px; ++x) {
      bool on = false;
      switch (cls) {
        case 0: on = (y / stripe) % 2 == 0; break;          // horizontal stripes
        case 1: on = (x / stripe) % 2 == 0; break;          // vertical stripes
        case 2: on = ((x + y) / stripe) % 2 == 0; break;    // diagonal stripes
        case 3: on = ((y / stripe) % 2) != ((x / stripe) % 2); break;  // checkerboard
      }
      if (on) tv[y * word_px + x] = 1.0f;
    }
  return t;
}

std::vector<std::size_t> Dataset::split_indices(std::string_view split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < samples.size(); ++i)
    if (samples[i].split == split) out.push_back(i);
  return out;
}

Dataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Dataset ds;
  ds.spec = spec;
  Rng rng(spec.seed);

  const std::size_t k = spec.samples_per_class;
  const std::size_t train_k =
      spec.train_only ? k : static_cast<std::size_t>(std::llround(0.39 * static_cast<double>(k)));
  const std::size_t val_k =
      spec.train_only ? 0 : static_cast<std::size_t>(std::llround(0.10 * static_cast<double>(k)));

  std::vector<Tensor> templates;
  for (std::size_t c = 0; c < spec.classes; ++c)
    templates.push_back(motif_template(c, spec.word_px));

  const std::size_t wp = spec.word_px, n = spec.n, m = spec.m;
  const std::size_t word_numel = wp * wp;
  for (std::size_t cls = 0; cls < spec.classes; ++cls) {
    const auto tmpl = templates[cls].values();
    for (std::size_t s = 0; s < k; ++s) {
      Sample sample;
      sample.label = cls;
      sample.split = s < train_k ? "train" : (s < train_k + val_k ? "val" : "test");
      sample.bag_mask.assign(n, 0);
      sample.word_mask.assign(n * m, 0);

      const auto bags = pick_cells(n, planted_count(spec.density, n), rng);
      for (std::size_t b : bags) {
        sample.bag_mask[b] = 1;
        for (std::size_t w : pick_cells(m, planted_count(spec.density, m), rng))
          sample.word_mask[b * m + w] = 1;
      }

      std::vector<float> px(n * m * word_numel, 0.0f);
      if (spec.noise > 0.0)
        for (auto& v : px) v = static_cast<float>(spec.noise * rng.normal());
      for (std::size_t cell = 0; cell < n * m; ++cell) {
        if (!sample.word_mask[cell]) continue;
        float* word = px.data() + cell * word_numel;
        for (std::size_t i = 0; i < word_numel; ++i) word[i] += tmpl[i];
      }
      sample.words = Tensor::from_data({n, m, wp, wp, 1}, std::move(px));
      ds.samples.push_back(std::move(sample));
    }
  }
  return ds;
}

void save_dataset(const std::filesystem::path& dir, const Dataset& ds) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "samples", ec);
  if (ec) throw IoError("dataset: cannot create " + (dir / "samples").string());

  json entries = json::array();
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const Sample& s = ds.samples[i];
    const std::string rel = sample_file(i);
    write_htnt(dir / rel, s.words);
    entries.push_back({{"file", rel},
                       {"label", s.label},
                       {"split", s.split},
                       {"bag_mask", s.bag_mask},
                       {"word_mask", s.word_mask}});
  }
  const json manifest{{"format", kFormat},
                      {"version", kVersion},
                      {"spec",
                       {{"classes", ds.spec.classes},
                        {"samples_per_class", ds.spec.samples_per_class},
                        {"n", ds.spec.n},
                        {"m", ds.spec.m},
                        {"word_px", ds.spec.word_px},
                        {"density", ds.spec.density},
                        {"noise", ds.spec.noise},
                        {"train_only", ds.spec.train_only},
                        {"seed", ds.spec.seed}}},
                      {"samples", entries}};
  std::ofstream out(dir / "dataset.json");
  if (!out) throw IoError("dataset: cannot write " + (dir / "dataset.json").string());
  out << manifest.dump(2) << "\n";
}

Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "dataset.json");
  if (!in) throw IoError("dataset: cannot open " + (dir / "dataset.json").string());
  json manifest;
  try {
    in >> manifest;
  } catch (const json::parse_error& e) {
    throw IoError("dataset: " + (dir / "dataset.json").string() + ": " + e.what());
  }
  if (!manifest.is_object() || manifest.value("format", "") != kFormat)
    throw IoError("dataset: " + dir.string() + " is not a " + kFormat + " directory");
  if (manifest.value("version", -1) != kVersion)
    throw IoError("dataset: unsupported version in " + dir.string());

  Dataset ds;
  const json& sp = manifest.at("spec");
  ds.spec.classes = sp.at("classes").get<std::size_t>();
  ds.spec.samples_per_class = sp.at("samples_per_class").get<std::size_t>();
  ds.spec.n = sp.at("n").get<std::size_t>();
  ds.spec.m = sp.at("m").get<std::size_t>();
  ds.spec.word_px = sp.at("word_px").get<std::size_t>();
  ds.spec.density = sp.at("density").get<double>();
  ds.spec.noise = sp.at("noise").get<double>();
  ds.spec.train_only = sp.value("train_only", false);
  ds.spec.seed = sp.at("seed").get<std::uint32_t>();
  ds.spec.validate();

  const Dims want{ds.spec.n, ds.spec.m, ds.spec.word_px, ds.spec.word_px, 1};
  for (const json& e : manifest.at("samples")) {
    Sample s;
    s.label = e.at("label").get<std::size_t>();
    if (s.label >= ds.spec.classes)
      throw IoError("dataset: sample label " + std::to_string(s.label) + " out of range");
    s.split = e.at("split").get<std::string>();
    if (s.split != "train" && s.split != "val" && s.split != "test")
      throw IoError("dataset: unknown split \"" + s.split + "\"");
    s.bag_mask = e.at("bag_mask").get<std::vector<std::uint8_t>>();
    s.word_mask = e.at("word_mask").get<std::vector<std::uint8_t>>();
    if (s.bag_mask.size() != ds.spec.n || s.word_mask.size() != ds.spec.n * ds.spec.m)
      throw IoError("dataset: mask sizes do not match spec in " + dir.string());
    s.words = read_htnt(dir / e.at("file").get<std::string>());
    if (s.words.dims() != want)
      throw IoError("dataset: sample " + e.at("file").get<std::string>() + " has dims " +
                    dims_to_string(s.words.dims()) + ", expected " + dims_to_string(want));
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace hatnet
