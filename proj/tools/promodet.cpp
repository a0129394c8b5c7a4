// Command-line driver: train, eval, stats, ablate.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "promodet/harness/runs.hpp"

using namespace promodet;
using namespace promodet::harness;

namespace {

int train(const std::string& config_path, std::optional<std::uint64_t> seed, bool deterministic) {
  Config cfg = load_config(config_path);
  if (seed) {
    cfg.train.seed = *seed;
    cfg.model.seed = *seed;
  }
  if (deterministic) cfg.train.deterministic = true;
  const Dataset ds = load_dataset(cfg.train.dataset, cfg.model.backbone.input_size);
  cfg.model.num_classes = ds.num_classes();
  Model<float> model(cfg.model);
  std::cout << "dataset " << cfg.train.dataset << ": " << ds.size() << " images, "
            << ds.num_classes() << " classes; " << model.anchors().size() << " anchors, "
            << model.store().parameter_count() << " parameters\n";
  TrainOptions opt;
  opt.log = &std::cout;
  run_train(cfg, ds, model, opt);
  std::cout << "wrote " << cfg.train.out_dir << "/{model.ckpt,loss.csv,loss.svg}\n";
  return 0;
}

int eval(const std::string& checkpoint, const std::string& dataset, const std::string& out) {
  const LoadedModel lm = load_checkpoint(checkpoint);
  const Dataset ds = load_dataset(dataset, lm.model->input_size());
  if (ds.num_classes() != lm.model->config().num_classes) {
    throw ConfigError(dataset + ": dataset has " + std::to_string(ds.num_classes()) +
                      " classes, checkpoint was trained for " +
                      std::to_string(lm.model->config().num_classes));
  }
  const EvalResult r = run_eval(*lm.model, ds);
  std::cout << format_table(r.table);
  std::filesystem::create_directories(out);
  write_eval_csv(out + "/eval.csv", r.table);
  std::ofstream(out + "/eval.txt") << format_table(r.table);
  std::ofstream(out + "/detections.json") << coco_results(ds, r.detections).dump() << "\n";
  std::cout << "wrote " << out << "/{eval.csv,eval.txt,detections.json}\n";
  return 0;
}

int stats(const std::string& checkpoint, const std::string& dataset, const std::string& out) {
  const LoadedModel lm = load_checkpoint(checkpoint);
  const Dataset ds = load_dataset(dataset, lm.model->input_size());
  run_stats(*lm.model, ds, out);
  std::ifstream in(out + "/stats.csv");
  std::cout << in.rdbuf();
  std::cout << "wrote " << out << "/{stats.csv,iou_histogram.svg,positives.svg,negatives.svg}\n";
  return 0;
}

int ablate(const std::string& config_path, const std::string& out,
           const std::vector<std::string>& names) {
  const Config cfg = load_config(config_path);
  std::vector<AblationRow> rows;
  for (const auto& r : ablation_grid()) {
    if (names.empty() || std::find(names.begin(), names.end(), r.name) != names.end()) {
      rows.push_back(r);
    }
  }
  if (rows.size() < std::max<std::size_t>(names.size(), 1)) {
    std::cerr << "error: unknown ablation row in --rows\n";
    return 2;
  }
  const auto results = run_ablate(cfg, out, rows, &std::cout);
  std::ifstream in(out + "/ablation.md");
  std::cout << in.rdbuf();
  return results.empty() ? 1 : 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Single-shot detector with anchor promotion and feature alignment"};
  app.require_subcommand(1);

  std::string config, checkpoint, dataset, out = ".";
  std::vector<std::string> rows;
  std::uint64_t seed = 0;
  bool deterministic = false;

  auto* tr = app.add_subcommand("train", "train a model from a config file");
  tr->add_option("--config", config, "config file")->required()->check(CLI::ExistingFile);
  auto* seed_opt = tr->add_option("--seed", seed, "overrides train.seed and model.seed");
  tr->add_flag("--deterministic", deterministic, "force train.deterministic = true");

  auto* ev = app.add_subcommand("eval", "COCO-style mAP of a checkpoint");
  ev->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  ev->add_option("--dataset", dataset, "synth:N:SEED or COCO annotation json")->required();
  ev->add_option("--out", out, "output directory");

  auto* st = app.add_subcommand("stats", "anchor census before/after promotion");
  st->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  st->add_option("--dataset", dataset, "synth:N:SEED or COCO annotation json")->required();
  st->add_option("--out", out, "output directory")->required();

  auto* ab = app.add_subcommand("ablate", "train and evaluate the ablation grid");
  ab->add_option("--config", config, "config file")->required()->check(CLI::ExistingFile);
  ab->add_option("--out", out, "output directory")->required();
  ab->add_option("--rows", rows, "subset of rows, e.g. baseline,apm_cr")->delimiter(',');

  CLI11_PARSE(app, argc, argv);
  try {
    if (tr->parsed()) {
      return train(config, seed_opt->count() ? std::optional<std::uint64_t>(seed) : std::nullopt,
                   deterministic);
    }
    if (ev->parsed()) return eval(checkpoint, dataset, out);
    if (st->parsed()) return stats(checkpoint, dataset, out);
    if (ab->parsed()) return ablate(config, out, rows);
  } catch (const promodet::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 1;
}
