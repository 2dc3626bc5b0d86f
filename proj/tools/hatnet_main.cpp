// hatnet: command-line surface for the hierarchical attention network.
//
// Subcommands:
//   synth  generate a synthetic grating-motif dataset
//   train  fit a model on a dataset directory, writing checkpoints + logs
//   eval   score a checkpoint on a dataset split, writing a metrics report
//   attn   export attention coefficients, heatmaps, and top-k indices
//   bench  time the forward pass (mean +/- std over repeated trials)
//
// Every command is deterministic under fixed flags and seed, writes only
// beneath --out (synth treats --out as the dataset directory), and reports
// failures as one JSON object on stderr with exit code 1.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "hatnet/checkpoint.hpp"
#include "hatnet/config.hpp"
#include "hatnet/eval.hpp"
#include "hatnet/model.hpp"
#include "hatnet/rng.hpp"
#include "hatnet/synthetic.hpp"
#include "hatnet/tensor_io.hpp"
#include "hatnet/train.hpp"

namespace {

using nlohmann::json;

struct Options {
  std::string config;
  std::string data;
  std::string out;
  std::string checkpoint;
  std::string input;
  std::string split = "test";
  std::string level = "bag";
  double top_k = 30.0;
  std::size_t trials = 100;
  std::uint32_t seed = 0;
  bool config_given = false;
  bool seed_given = false;
};

int fail(const std::string& type, const std::string& message) {
  json err;
  err["error"] = {{"type", type}, {"message", message}};
  std::cerr << err.dump() << "\n";
  return 1;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw hatnet::IoError("cannot open for write: " + path.string());
  out << text;
  if (!out) throw hatnet::IoError("write failed: " + path.string());
}

// Loads the config file when given, otherwise starts from defaults; the
// --seed flag overrides the master seed (and its synthetic mirror).
hatnet::RunConfig resolve_config(const Options& opt) {
  hatnet::RunConfig cfg;
  if (opt.config_given) cfg = hatnet::load_run_config(opt.config);
  if (opt.seed_given) {
    cfg.seed = opt.seed;
    cfg.synth.seed = opt.seed;
  }
  cfg.validate();
  return cfg;
}

void check_geometry(const hatnet::ModelConfig& model, const hatnet::SyntheticSpec& spec,
                    const std::string& who) {
  const auto& t = model.tiling;
  if (t.n != spec.n || t.m != spec.m || t.word_px != spec.word_px || t.channels != 1)
    throw hatnet::ConfigError(
        who + ": model tiling [n=" + std::to_string(t.n) + ", m=" + std::to_string(t.m) +
        ", word_px=" + std::to_string(t.word_px) + ", channels=" + std::to_string(t.channels) +
        "] does not match dataset [n=" + std::to_string(spec.n) + ", m=" +
        std::to_string(spec.m) + ", word_px=" + std::to_string(spec.word_px) + ", channels=1]");
}

// Grayscale PGM (plain P2), one cell per coefficient, scaled so the largest
// coefficient maps to 255.
std::string pgm_from_grid(const std::vector<double>& vals, std::size_t rows, std::size_t cols) {
  const double peak = vals.empty() ? 0.0 : *std::max_element(vals.begin(), vals.end());
  std::string out = "P2\n" + std::to_string(cols) + " " + std::to_string(rows) + "\n255\n";
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) {
      const double v = vals[r * cols + c];
      const long level = peak > 0.0 ? std::lround(v / peak * 255.0) : 0;
      if (c > 0) out += ' ';
      out += std::to_string(std::clamp(level, 0L, 255L));
    }
    out += '\n';
  }
  return out;
}

std::string format_coeff(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

int run_synth(const Options& opt) {
  const hatnet::RunConfig cfg = resolve_config(opt);
  const hatnet::Dataset ds = hatnet::generate_synthetic(cfg.synth);
  hatnet::save_dataset(opt.out, ds);
  json summary;
  summary["command"] = "synth";
  summary["out"] = opt.out;
  summary["classes"] = cfg.synth.classes;
  summary["samples"] = ds.samples.size();
  summary["splits"] = {{"train", ds.split_indices("train").size()},
                       {"val", ds.split_indices("val").size()},
                       {"test", ds.split_indices("test").size()}};
  std::cout << summary.dump(2) << "\n";
  return 0;
}

int run_train(const Options& opt) {
  hatnet::RunConfig cfg = resolve_config(opt);
  const hatnet::Dataset ds = hatnet::load_dataset(opt.data);
  if (!opt.config_given) {
    // Without an explicit config the model tiling adopts the dataset geometry
    // so the default pipeline is runnable end to end.
    cfg.model.tiling.n = ds.spec.n;
    cfg.model.tiling.m = ds.spec.m;
    cfg.model.tiling.word_px = ds.spec.word_px;
    cfg.model.tiling.channels = 1;
    const auto grid = static_cast<std::size_t>(
        std::llround(std::sqrt(static_cast<double>(ds.spec.m))));
    if (grid * grid == ds.spec.m) cfg.model.tiling.bag_px = grid * ds.spec.word_px;
    cfg.model.classes = ds.spec.classes;
    cfg.synth = ds.spec;
    cfg.validate();
  }
  check_geometry(cfg.model, ds.spec, "train");
  if (cfg.model.classes < ds.spec.classes)
    throw hatnet::ConfigError("train: model has " + std::to_string(cfg.model.classes) +
                              " classes but dataset labels reach " +
                              std::to_string(ds.spec.classes));
  cfg.data_dir = opt.data;
  cfg.out_dir = opt.out;

  std::filesystem::create_directories(opt.out);
  hatnet::save_run_config(std::filesystem::path(opt.out) / "config.json", cfg);
  std::ofstream log(std::filesystem::path(opt.out) / "train_log.ndjson", std::ios::binary);
  if (!log) throw hatnet::IoError("cannot open for write: " + opt.out + "/train_log.ndjson");

  const hatnet::TrainResult result = hatnet::train_model(cfg, ds, &log);
  const std::size_t epochs = cfg.train.epochs_phase1 + cfg.train.epochs_phase2;
  hatnet::Checkpoint ck{result.params, result.best_val_accuracy, epochs};
  const std::filesystem::path ck_dir = std::filesystem::path(opt.out) / "checkpoint";
  hatnet::save_checkpoint(ck_dir, ck);

  json summary;
  summary["command"] = "train";
  summary["epochs"] = epochs;
  summary["updates"] = result.log.empty() ? 0 : result.log.back().iter;
  summary["best_val_accuracy"] = result.best_val_accuracy;
  summary["final_loss"] = result.log.empty() ? 0.0 : result.log.back().loss;
  summary["checkpoint"] = ck_dir.string();
  summary["log"] = (std::filesystem::path(opt.out) / "train_log.ndjson").string();
  std::cout << summary.dump(2) << "\n";
  return 0;
}

int run_eval(const Options& opt) {
  const hatnet::Checkpoint ck = hatnet::load_checkpoint(opt.checkpoint);
  const hatnet::Dataset ds = hatnet::load_dataset(opt.data);
  check_geometry(ck.params.cfg, ds.spec, "eval");

  std::vector<std::size_t> indices;
  if (opt.split == "all") {
    indices.resize(ds.samples.size());
    std::iota(indices.begin(), indices.end(), std::size_t{0});
  } else {
    indices = ds.split_indices(opt.split);
  }
  if (indices.empty())
    throw hatnet::ConfigError("eval: split \"" + opt.split + "\" has no samples");

  const hatnet::EvalOutcome outcome = hatnet::evaluate(ck.params, ds, indices);
  json report;
  report["command"] = "eval";
  report["split"] = opt.split;
  report["samples"] = indices.size();
  report["checkpoint"] = opt.checkpoint;
  report["checkpoint_epoch"] = ck.epoch;
  report["checkpoint_val_accuracy"] = ck.val_accuracy;
  report["confusion"] = hatnet::confusion_to_json(outcome.cm);
  report["metrics"] = hatnet::metrics_to_json(outcome.metrics);

  std::filesystem::create_directories(opt.out);
  write_text(std::filesystem::path(opt.out) / "metrics.json", report.dump(2) + "\n");
  std::cout << report.dump(2) << "\n";
  return 0;
}

int run_attn(const Options& opt) {
  const hatnet::Checkpoint ck = hatnet::load_checkpoint(opt.checkpoint);
  const hatnet::Tensor words = hatnet::read_htnt(opt.input);
  const hatnet::ForwardResult res = hatnet::forward(ck.params, words);
  const hatnet::AttentionRecord& rec = res.attention;
  const std::size_t n = ck.params.cfg.tiling.n;
  const std::size_t m = ck.params.cfg.tiling.m;

  std::filesystem::create_directories(opt.out);
  const std::filesystem::path out_dir(opt.out);

  const auto bag_coeffs = rec.bag_coeffs.values();
  std::string bag_csv = "bag,coeff\n";
  std::vector<double> bag_vals(n);
  for (std::size_t i = 0; i < n; ++i) {
    bag_vals[i] = bag_coeffs[i];
    bag_csv += std::to_string(i) + "," + format_coeff(bag_coeffs[i]) + "\n";
  }
  write_text(out_dir / "coeffs_bag.csv", bag_csv);

  const auto word_coeffs = rec.word_coeffs.values();
  std::string word_csv = "bag,word,coeff\n";
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t w = 0; w < m; ++w)
      word_csv +=
          std::to_string(b) + "," + std::to_string(w) + "," + format_coeff(word_coeffs[b * m + w]) + "\n";
  write_text(out_dir / "coeffs_word.csv", word_csv);

  // Heatmaps are laid out on the image grid when the bag/word counts form
  // perfect squares, otherwise as a single row / n-by-m matrix.
  const auto grid_of = [](std::size_t count) {
    const auto g =
        static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(count))));
    return g * g == count ? g : 0;
  };
  const std::size_t bg = grid_of(n), wg = grid_of(m);
  write_text(out_dir / "heatmap_bag.pgm",
             bg > 0 ? pgm_from_grid(bag_vals, bg, bg) : pgm_from_grid(bag_vals, 1, n));
  std::vector<double> word_vals(n * m);
  if (bg > 0 && wg > 0) {
    const std::size_t side = bg * wg;
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t w = 0; w < m; ++w) {
        const std::size_t row = (b / bg) * wg + w / wg;
        const std::size_t col = (b % bg) * wg + w % wg;
        word_vals[row * side + col] = word_coeffs[b * m + w];
      }
    write_text(out_dir / "heatmap_word.pgm", pgm_from_grid(word_vals, side, side));
  } else {
    for (std::size_t i = 0; i < n * m; ++i) word_vals[i] = word_coeffs[i];
    write_text(out_dir / "heatmap_word.pgm", pgm_from_grid(word_vals, n, m));
  }

  json topk;
  topk["command"] = "attn";
  topk["level"] = opt.level;
  topk["k_percent"] = opt.top_k;
  topk["predicted_class"] = res.predicted_class;
  const auto probs = res.probs.values();
  topk["probs"] = std::vector<double>(probs.begin(), probs.end());
  if (opt.level == "bag") {
    const auto idx = hatnet::top_k_bags(rec, opt.top_k);
    topk["count"] = idx.size();
    topk["indices"] = idx;
  } else {
    const auto idx = hatnet::top_k_words(rec, opt.top_k);
    topk["count"] = idx.size();
    auto arr = json::array();
    for (const auto& [b, w] : idx) arr.push_back({b, w});
    topk["indices"] = arr;
  }
  write_text(out_dir / "topk.json", topk.dump(2) + "\n");
  std::cout << topk.dump(2) << "\n";
  return 0;
}

int run_bench(const Options& opt) {
  hatnet::HatnetParams params = [&] {
    if (!opt.checkpoint.empty()) return hatnet::load_checkpoint(opt.checkpoint).params;
    hatnet::ModelConfig model;
    if (opt.config_given) {
      model = resolve_config(opt).model;
    } else {
      // Desk-scale demo geometry: 4x4 bags of 4x4 words, 32 px, d=256.
      model.tiling = hatnet::TilingConfig{16, 16, 128, 32, 1, 256};
    }
    hatnet::Rng rng(opt.seed);
    return hatnet::HatnetParams::init(model, rng);
  }();

  const auto& t = params.cfg.tiling;
  hatnet::Rng rng(opt.seed + 1);
  std::vector<float> px(t.n * t.m * t.word_px * t.word_px * t.channels);
  for (float& v : px) v = static_cast<float>(0.5 * rng.normal());
  const hatnet::Tensor words =
      hatnet::Tensor::from_data({t.n, t.m, t.word_px, t.word_px, t.channels}, std::move(px));

  const hatnet::BenchResult r = hatnet::benchmark_forward(params, words, opt.trials);
  json report;
  report["command"] = "bench";
  report["model"] = {{"n", t.n}, {"m", t.m}, {"word_px", t.word_px}, {"d", t.d}};
  report["trials"] = r.trials;
  report["warmup"] = 3;
  report["mean_seconds"] = r.mean_seconds;
  report["std_seconds"] = r.std_seconds;
  report["formatted"] = r.formatted();

  std::filesystem::create_directories(opt.out);
  write_text(std::filesystem::path(opt.out) / "bench.json", report.dump(2) + "\n");
  std::cout << report.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  Options opt;
  CLI::App app{"hatnet: hierarchical attention network for tiled image classification"};
  app.require_subcommand(1);

  const auto add_common = [&](CLI::App* cmd, bool need_out) {
    cmd->add_option("--config", opt.config, "JSON run configuration");
    auto* out = cmd->add_option("--out", opt.out, "Output directory (all writes land here)");
    if (need_out) out->required();
    cmd->add_option("--seed", opt.seed, "Master seed override");
    return cmd;
  };

  auto* synth = add_common(app.add_subcommand("synth", "Generate a synthetic dataset"), true);
  auto* train = add_common(app.add_subcommand("train", "Train a model"), true);
  train->add_option("--data", opt.data, "Dataset directory")->required();
  auto* eval = add_common(app.add_subcommand("eval", "Evaluate a checkpoint"), true);
  eval->add_option("--data", opt.data, "Dataset directory")->required();
  eval->add_option("--checkpoint", opt.checkpoint, "Checkpoint directory")->required();
  eval->add_option("--split", opt.split, "Dataset split to score")
      ->check(CLI::IsMember({"train", "val", "test", "all"}));
  auto* attn = add_common(app.add_subcommand("attn", "Export attention artifacts"), true);
  attn->add_option("--checkpoint", opt.checkpoint, "Checkpoint directory")->required();
  attn->add_option("--input", opt.input, "HTNT word-pixel tensor [n,m,px,px,c]")->required();
  attn->add_option("--top-k", opt.top_k, "Top percentage of cells to report");
  attn->add_option("--level", opt.level, "Ranking granularity")
      ->check(CLI::IsMember({"bag", "word"}));
  auto* bench = add_common(app.add_subcommand("bench", "Time the forward pass"), true);
  bench->add_option("--checkpoint", opt.checkpoint, "Checkpoint directory (optional)");
  bench->add_option("--trials", opt.trials, "Timed trials after 3 warm-ups");

  try {
    app.parse(argc, argv);
    opt.config_given = app.get_subcommands().front()->count("--config") > 0;
    opt.seed_given = app.get_subcommands().front()->count("--seed") > 0;
    if (app.got_subcommand(synth)) return run_synth(opt);
    if (app.got_subcommand(train)) return run_train(opt);
    if (app.got_subcommand(eval)) return run_eval(opt);
    if (app.got_subcommand(attn)) return run_attn(opt);
    if (app.got_subcommand(bench)) return run_bench(opt);
    return fail("UsageError", "no subcommand selected");
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("UsageError", e.what());
  } catch (const hatnet::ConfigError& e) {
    return fail("ConfigError", e.what());
  } catch (const hatnet::ShapeError& e) {
    return fail("ShapeError", e.what());
  } catch (const hatnet::IndexError& e) {
    return fail("IndexError", e.what());
  } catch (const hatnet::ContractError& e) {
    return fail("ContractError", e.what());
  } catch (const hatnet::IoError& e) {
    return fail("IoError", e.what());
  } catch (const hatnet::TrainError& e) {
    return fail("TrainError", e.what());
  } catch (const std::exception& e) {
    return fail("Error", e.what());
  }
}
