// Command-line front end: dataset generation, training, evaluation, cost
// reporting, kernel inspection, and the scale-shift study.
//
// Every subcommand exits 0 on success. Failures print exactly one JSON line
// to stderr ({"error": ..., "hint": ...}) and exit nonzero.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <thread>

#include <CLI11.hpp>

#include "ean/harness.hpp"
#include "ean/profiler.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CliError : std::runtime_error {
  std::string hint;
  CliError(const std::string& msg, std::string h) : std::runtime_error(msg), hint(std::move(h)) {}
};

json read_json_file(const std::string& path, const std::string& what) {
  if (!fs::exists(path))
    throw CliError(what + " not found: " + path,
                   "pass --config an existing JSON file or omit it to use defaults");
  std::ifstream in(path);
  json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw CliError(what + " " + path + " is not valid JSON: " + e.what(),
                   "fix the file or regenerate it");
  }
  return j;
}

void require_checkpoint(const std::string& dir) {
  if (!fs::exists(fs::path(dir) / "config.json"))
    throw CliError("checkpoint not found: " + dir,
                   "train a model first (ean_cli train --out DIR) and pass --checkpoint "
                   "DIR/checkpoint");
}

void require_dataset(const std::string& dir) {
  if (!fs::exists(fs::path(dir) / "manifest.jsonl"))
    throw CliError("dataset not found: " + dir,
                   "generate one first: ean_cli generate-data --out " + dir);
}

std::int64_t worker_threads() {
  const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("EAN_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v < 1) throw CliError("EAN_THREADS must be a positive integer, got \"" +
                                  std::string(env) + "\"",
                              "unset it or set a value >= 1");
    return v;
  }
  return static_cast<std::int64_t>(hw);
}

// The train config file carries the model, the optimizer schedule, and the
// dataset locations under one roof:
//   {"model": {...}, "train": {...}, "data": {"train_dir": ..., "val_dir": ...}}
struct TrainConfig {
  ean::ModelConfig model;
  ean::TrainOptions train;
  std::string train_dir, val_dir;
};

TrainConfig parse_train_config(const std::string& path) {
  TrainConfig cfg;
  if (path.empty()) return cfg;
  json j = read_json_file(path, "config");
  if (j.contains("model")) cfg.model = j.at("model").get<ean::ModelConfig>();
  if (j.contains("train")) cfg.train = j.at("train").get<ean::TrainOptions>();
  if (j.contains("data")) {
    cfg.train_dir = j.at("data").value("train_dir", "");
    cfg.val_dir = j.at("data").value("val_dir", "");
  }
  return cfg;
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

int run_generate(const std::string& config, const std::string& out, std::int64_t seed,
                 bool as_json) {
  ean::SyntheticSpec spec;
  if (!config.empty()) spec = read_json_file(config, "config").get<ean::SyntheticSpec>();
  if (seed >= 0) spec.seed = static_cast<std::uint64_t>(seed);
  const std::int64_t threads = worker_threads();
  ean::generate(spec, out, threads);
  const auto n = spec.num_classes * spec.videos_per_class;
  if (as_json)
    std::cout << json{{"command", "generate-data"},
                      {"out", out},
                      {"videos", n},
                      {"classes", spec.num_classes},
                      {"seed", spec.seed}}
                     .dump()
              << "\n";
  else
    std::cout << "wrote " << n << " videos (" << spec.num_classes << " classes) to " << out
              << "\n";
  return 0;
}

int run_train(const std::string& config, const std::string& data, const std::string& val_data,
              const std::string& out, std::int64_t seed, bool as_json) {
  TrainConfig cfg = parse_train_config(config);
  if (!data.empty()) cfg.train_dir = data;
  if (!val_data.empty()) cfg.val_dir = val_data;
  if (cfg.train_dir.empty() || cfg.val_dir.empty())
    throw CliError("no dataset locations given",
                   "pass --data/--val-data or set data.train_dir and data.val_dir in the config");
  if (seed >= 0) cfg.train.seed = static_cast<std::uint64_t>(seed);
  require_dataset(cfg.train_dir);
  require_dataset(cfg.val_dir);
  cfg.model.validate();

  ean::LoadedDataset train_set = ean::LoadedDataset::open(cfg.train_dir);
  ean::LoadedDataset val_set = ean::LoadedDataset::open(cfg.val_dir);

  fs::create_directories(out);
  std::ofstream log(fs::path(out) / "train_log.jsonl");
  {
    std::ofstream cfg_out(fs::path(out) / "config.json");
    cfg_out << json{{"model", cfg.model},
                    {"train", cfg.train},
                    {"data", {{"train_dir", cfg.train_dir}, {"val_dir", cfg.val_dir}}}}
                   .dump(2)
            << "\n";
  }

  ean::EanModel model(cfg.model, ean::DType::f32, cfg.train.seed);
  ean::Sgd opt(model.parameters(), cfg.train.lr, cfg.train.momentum, cfg.train.weight_decay,
               cfg.train.milestones, cfg.train.gamma);
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<ean::EpochStats> history;
  if (as_json) {
    // Mirror the epoch records to stdout as they are written to the log.
    struct Tee : std::ostream, std::streambuf {
      std::ostream &a, &b;
      Tee(std::ostream& a_, std::ostream& b_) : std::ostream(this), a(a_), b(b_) {}
      int overflow(int c) override {
        a.put(char(c));
        b.put(char(c));
        return c;
      }
    } tee(log, std::cout);
    history = ean::train_model(model, train_set, val_set, cfg.train, &tee);
  } else {
    history = ean::train_model(model, train_set, val_set, cfg.train, &log);
    for (const auto& st : history)
      std::cout << "epoch " << st.epoch << ": loss " << st.mean_loss << ", val acc "
                << st.val_accuracy << ", lr " << st.lr << " (" << st.seconds << "s)\n";
  }
  const double seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  const std::string ckpt = (fs::path(out) / "checkpoint").string();
  ean::save_checkpoint(ckpt, model, &opt,
                       json{{"epochs", cfg.train.epochs},
                            {"final_val_accuracy", history.back().val_accuracy},
                            {"seed", cfg.train.seed}});
  if (as_json)
    std::cout << json{{"command", "train"},
                      {"val_accuracy", history.back().val_accuracy},
                      {"epochs", cfg.train.epochs},
                      {"checkpoint", ckpt},
                      {"seconds", seconds}}
                     .dump()
              << "\n";
  else
    std::cout << "final val accuracy " << history.back().val_accuracy << "; checkpoint at "
              << ckpt << "\n";
  return 0;
}

void dump_saliency(ean::EanModel& model, const ean::LoadedDataset& data,
                   const std::string& path) {
  if (!model.soi)
    throw CliError("this model has no object-interaction head, so there is no saliency to dump",
                   "train a config with soitr_after_stage set to the final stage");
  std::ofstream out(path);
  ean::NoGradGuard ng;
  model.eval();
  ean::Rng rng(0);
  const std::int64_t batch = 10;
  for (std::int64_t lo = 0; lo < data.size(); lo += batch) {
    const std::int64_t hi = std::min(data.size(), lo + batch);
    std::vector<ean::Tensor> clips;
    for (std::int64_t i = lo; i < hi; ++i)
      clips.push_back(ean::make_clip(data.videos[std::size_t(i)], model.cfg, false, rng));
    std::vector<ean::Tensor> rows;
    for (auto& c : clips) {
      ean::Shape s = c.shape();
      s.insert(s.begin(), 1);
      rows.push_back(ean::reshape(c, s));
    }
    model.forward(ean::concat(rows, 0));
    const ean::Tensor& maps = model.soi->last_saliency;  // [B, N, T, H, W]
    const std::int64_t N = maps.dim(1), T = maps.dim(2), H = maps.dim(3), W = maps.dim(4);
    for (std::int64_t b = 0; b < hi - lo; ++b)
      for (std::int64_t n = 0; n < N; ++n)
        for (std::int64_t t = 0; t < T; ++t) {
          json grid = json::array();
          for (std::int64_t y = 0; y < H; ++y) {
            json row = json::array();
            for (std::int64_t x = 0; x < W; ++x)
              row.push_back(maps.at((((b * N + n) * T + t) * H + y) * W + x));
            grid.push_back(std::move(row));
          }
          out << json{{"sample_id", lo + b}, {"object", n}, {"frame", t}, {"map", grid}}.dump()
              << "\n";
        }
  }
}

int run_eval(const std::string& checkpoint, const std::string& data, std::int64_t batch,
             const std::string& saliency_path, bool as_json) {
  require_checkpoint(checkpoint);
  require_dataset(data);
  ean::ModelConfig cfg = ean::load_checkpoint_config(checkpoint);
  ean::EanModel model(cfg, ean::DType::f32, 0);
  ean::load_checkpoint(checkpoint, model, nullptr);
  ean::LoadedDataset set = ean::LoadedDataset::open(data);
  const double acc = ean::evaluate(model, set, batch);
  if (!saliency_path.empty()) dump_saliency(model, set, saliency_path);
  if (as_json)
    std::cout << json{{"command", "eval"},
                      {"accuracy", acc},
                      {"videos", set.size()},
                      {"checkpoint", checkpoint}}
                     .dump()
              << "\n";
  else
    std::cout << "accuracy " << acc << " over " << set.size() << " videos\n";
  return 0;
}

json cost_deltas(const ean::ModelConfig& cfg) {
  const ean::CostReport full = ean::count(cfg);
  ean::ModelConfig with_lmc = cfg;
  with_lmc.lmc_enabled = true;
  with_lmc.frames_per_segment = 5;
  const ean::CostReport lmc = ean::count(with_lmc);
  auto block = [](double macs, double params) {
    return json{{"macs", macs}, {"params", params}};
  };
  return json{{"eab", block(full.macs_with_prefix("eab"), full.params_with_prefix("eab"))},
              {"soi", block(full.macs_with_prefix("soi"), full.params_with_prefix("soi"))},
              {"lmc", block(lmc.macs_with_prefix("lmc"), lmc.params_with_prefix("lmc"))}};
}

int run_count_flops(const std::string& config, const std::string& backbone, bool sweep,
                    bool as_json) {
  ean::ModelConfig cfg = ean::ModelConfig::resnet50_shape();
  if (!config.empty()) {
    json j = read_json_file(config, "config");
    cfg = j.contains("model") ? j.at("model").get<ean::ModelConfig>()
                              : j.get<ean::ModelConfig>();
  } else if (backbone == "tiny") {
    cfg = ean::ModelConfig::tiny();
  } else if (!backbone.empty() && backbone != "resnet50-shape") {
    throw CliError("unknown backbone \"" + backbone + "\"",
                   "choose tiny or resnet50-shape, or pass a config file");
  }
  const ean::CostReport report = ean::count(cfg);
  const json deltas = cost_deltas(cfg);
  json sweep_rows = json::array();
  if (sweep)
    for (const auto& row : ean::placement_sweep(cfg))
      sweep_rows.push_back(json{{"eab_stages", row.eab_stages},
                                {"soi_stages", row.soi_stages},
                                {"gmacs", row.gmacs},
                                {"params_m", row.params_m}});

  if (as_json) {
    json items = json::array();
    for (const auto& it : report.items)
      items.push_back(json{{"name", it.name}, {"macs", it.macs}, {"params", it.params}});
    json out{{"command", "count-flops"}, {"backbone", cfg.backbone},
             {"gmacs", report.gmacs()},  {"params_m", report.params_m()},
             {"items", items},           {"deltas", deltas}};
    if (sweep) out["placement_sweep"] = sweep_rows;
    std::cout << out.dump() << "\n";
  } else {
    std::cout << report.to_text();
    auto line = [](const char* name, const json& d) {
      std::printf("%-6s +%.3f GMACs, +%.3fM params\n", name, d.at("macs").get<double>() / 1e9,
                  d.at("params").get<double>() / 1e6);
    };
    std::cout << "deltas over the plain backbone:\n";
    line("eab", deltas.at("eab"));
    line("soi", deltas.at("soi"));
    line("lmc", deltas.at("lmc"));
    if (sweep) {
      std::cout << "placement sweep:\n";
      for (const auto& row : sweep_rows) {
        std::cout << "  eab@" << row.at("eab_stages").dump() << " soi@"
                  << row.at("soi_stages").dump();
        std::printf("  %.1f GMACs  %.1fM params\n", row.at("gmacs").get<double>(),
                    row.at("params_m").get<double>());
      }
    }
  }
  return 0;
}

int run_inspect_kernels(const std::string& checkpoint, const std::string& data,
                        const std::string& out, bool as_json) {
  require_checkpoint(checkpoint);
  require_dataset(data);
  ean::ModelConfig cfg = ean::load_checkpoint_config(checkpoint);
  ean::EanModel model(cfg, ean::DType::f32, 0);
  ean::load_checkpoint(checkpoint, model, nullptr);
  ean::LoadedDataset set = ean::LoadedDataset::open(data);
  if (out.empty()) {
    ean::write_kernel_report(model, set, std::cout);
    return 0;
  }
  std::ofstream file(out);
  ean::write_kernel_report(model, set, file);
  if (as_json)
    std::cout << json{{"command", "inspect-kernels"},
                      {"out", out},
                      {"samples", set.size()},
                      {"blocks", static_cast<std::int64_t>(model.eabs.size())}}
                     .dump()
              << "\n";
  else
    std::cout << "wrote kernel weights for " << set.size() << " samples to " << out << "\n";
  return 0;
}

int run_fig10(const std::string& checkpoint, const std::string& data, const std::string& out,
              bool as_json) {
  require_checkpoint(checkpoint);
  require_dataset(data);
  ean::ModelConfig cfg = ean::load_checkpoint_config(checkpoint);
  ean::EanModel model(cfg, ean::DType::f32, 0);
  ean::load_checkpoint(checkpoint, model, nullptr);
  ean::LoadedDataset set = ean::LoadedDataset::open(data);
  const ean::ScaleShiftReport rep = ean::scale_shift_study(model, set);
  const json j = rep.to_json();
  if (!out.empty()) {
    std::ofstream file(out);
    file << j.dump(2) << "\n";
  }
  if (as_json) {
    std::cout << j.dump() << "\n";
  } else {
    std::printf("%-8s %8s %8s %8s\n", "branch", "anchor", "zoom", "halfrate");
    for (const char* b : {"S-1", "S-3", "S-5", "T-1", "T-3", "T-5"})
      std::printf("%-8s %8.4f %8.4f %8.4f\n", b, rep.anchor.at(b), rep.zoom.at(b),
                  rep.halfrate.at(b));
    std::cout << "zoom-in raises the small-spatial-kernel share: "
              << (rep.spatial_small_up ? "yes" : "no") << "\n"
              << "doubled frame rate raises the small-temporal-kernel share: "
              << (rep.temporal_small_up ? "yes" : "no") << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"event-adaptive video recognition toolkit"};
  app.require_subcommand(1);

  std::string config, out, checkpoint, data, val_data, backbone, saliency_path;
  std::int64_t seed = -1;  // -1: keep the seed from the config file
  std::int64_t batch = 10;
  bool as_json = false, sweep = false;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_flag("--json", as_json, "emit machine-readable JSON on stdout");
  };

  CLI::App* gen = app.add_subcommand("generate-data", "render a synthetic video corpus");
  gen->add_option("--config", config, "generation spec (JSON)");
  gen->add_option("--out", out, "output directory")->required();
  gen->add_option("--seed", seed, "override the spec seed");
  add_common(gen);

  CLI::App* train = app.add_subcommand("train", "train a model and write a checkpoint");
  train->add_option("--config", config, "train config (JSON: model/train/data)");
  train->add_option("--data", data, "training dataset directory");
  train->add_option("--val-data", val_data, "validation dataset directory");
  train->add_option("--out", out, "output directory for checkpoint and logs")->required();
  train->add_option("--seed", seed, "override the training seed");
  add_common(train);

  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  eval->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
  eval->add_option("--data", data, "dataset directory")->required();
  eval->add_option("--batch", batch, "evaluation batch size");
  eval->add_option("--dump-saliency", saliency_path, "write per-object saliency maps (JSONL)");
  add_common(eval);

  CLI::App* flops = app.add_subcommand("count-flops", "analytic cost report for a config");
  flops->add_option("--config", config, "model config (JSON, bare or under a model key)");
  flops->add_option("--backbone", backbone, "tiny or resnet50-shape (default resnet50-shape)");
  flops->add_flag("--sweep", sweep, "include the block-placement sweep");
  add_common(flops);

  CLI::App* kernels = app.add_subcommand("inspect-kernels",
                                         "per-sample fused-kernel branch weights (JSONL)");
  kernels->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
  kernels->add_option("--data", data, "dataset directory")->required();
  kernels->add_option("--out", out, "write records here instead of stdout");
  add_common(kernels);

  CLI::App* fig10 = app.add_subcommand(
      "fig10-sweep", "branch-share shifts under zoom and frame-rate changes");
  fig10->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
  fig10->add_option("--data", data, "dataset directory")->required();
  fig10->add_option("--out", out, "also write the full report (JSON) here");
  add_common(fig10);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << json{{"error", e.what()}, {"hint", "run with --help for usage"}}.dump() << "\n";
    return e.get_exit_code() == 0 ? 1 : e.get_exit_code();
  }

  try {
    if (gen->parsed()) return run_generate(config, out, seed, as_json);
    if (train->parsed()) return run_train(config, data, val_data, out, seed, as_json);
    if (eval->parsed()) return run_eval(checkpoint, data, batch, saliency_path, as_json);
    if (flops->parsed()) return run_count_flops(config, backbone, sweep, as_json);
    if (kernels->parsed()) return run_inspect_kernels(checkpoint, data, out, as_json);
    if (fig10->parsed()) return run_fig10(checkpoint, data, out, as_json);
  } catch (const CliError& e) {
    std::cerr << json{{"error", e.what()}, {"hint", e.hint}}.dump() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << json{{"error", e.what()}}.dump() << "\n";
    return 1;
  }
  return 0;
}
