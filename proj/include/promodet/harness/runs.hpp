#pragma once

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "promodet/harness/augment.hpp"
#include "promodet/harness/checkpoint.hpp"
#include "promodet/harness/config.hpp"
#include "promodet/harness/dataset.hpp"
#include "promodet/harness/evaluate.hpp"
#include "promodet/harness/schedule.hpp"
#include "promodet/harness/svg.hpp"

namespace promodet::harness {

struct LossRow {
  long step = 0;
  double lr = 0;
  LossReport report;
};

struct TrainOptions {
  std::ostream* log = nullptr;
  bool write_outputs = true;  // loss.csv, loss.svg, model.ckpt under train.out_dir
};

inline int steps_per_epoch(const Config& cfg, std::size_t n) {
  return static_cast<int>((n + cfg.train.batch_size - 1) / cfg.train.batch_size);
}

// Images and targets of one batch, augmented per epoch when enabled.
inline std::pair<nn::Tensor<float>, std::vector<std::vector<GroundTruth>>> make_batch(
    const Config& cfg, const Dataset& ds, const std::vector<std::size_t>& idx, long epoch) {
  const int size = cfg.model.backbone.input_size;
  std::vector<Sample> aug;
  aug.reserve(idx.size());
  for (std::size_t k : idx) {
    const Sample& s = ds.samples[k];
    if (cfg.train.augment) {
      aug.push_back(augment(s, cfg.train.seed * 1000003ULL + static_cast<std::uint64_t>(epoch), size,
                            cfg.train.augment_options));
    } else if (s.image.width != size || s.image.height != size) {
      aug.push_back(resize_sample(s, size));
    } else {
      aug.push_back(s);
    }
  }
  std::vector<const Image*> imgs;
  std::vector<std::vector<GroundTruth>> gts;
  for (const auto& s : aug) {
    imgs.push_back(&s.image);
    gts.push_back(s.gts);
  }
  return {to_batch<float>(imgs), std::move(gts)};
}

inline void write_loss_csv(const std::string& path, const std::vector<LossRow>& rows) {
  std::ofstream out(path);
  if (!out) throw IoError(path + ": cannot write");
  out << "step,lr,total,apm_score,apm_box,det_cls,det_box,n_apm,n_det\n";
  out << std::setprecision(10);
  for (const auto& r : rows) {
    out << r.step << "," << r.lr << "," << r.report.total() << "," << r.report.apm_score << ","
        << r.report.apm_box << "," << r.report.det_cls << "," << r.report.det_box << ","
        << r.report.n_apm << "," << r.report.n_det << "\n";
  }
}

// Full schedule of SGD steps; every per-step loss is returned.
inline std::vector<LossRow> run_train(const Config& cfg, const Dataset& ds, Model<float>& model,
                                      const TrainOptions& opt = {}) {
  if (ds.size() == 0) throw ConfigError("train.dataset: no samples");
  LrSchedule sched = cfg.train.schedule;
  sched.steps_per_epoch = steps_per_epoch(cfg, ds.size());
  sched.validate();
  const long total = sched.total_steps();
  std::vector<LossRow> rows;
  std::vector<std::size_t> order(ds.size());
  const auto t0 = std::chrono::steady_clock::now();
  long step = 0;
  for (long epoch = 0; step < total; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    auto rng = stream(cfg.train.seed, static_cast<std::uint64_t>(epoch), 0x5E);
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t b = 0; b < order.size() && step < total; b += cfg.train.batch_size) {
      const std::vector<std::size_t> idx(
          order.begin() + b, order.begin() + std::min(order.size(), b + cfg.train.batch_size));
      auto [images, gts] = make_batch(cfg, ds, idx, epoch);
      SgdOptions sgd;
      sgd.lr = lr_at(step, sched);
      sgd.momentum = cfg.train.momentum;
      sgd.weight_decay = cfg.train.weight_decay;
      const LossReport rep = model.train_step(images, gts, sgd);
      if (!std::isfinite(rep.total())) {
        throw Error("training diverged at step " + std::to_string(step) + " (non-finite loss)");
      }
      rows.push_back({step, sgd.lr, rep});
      if (opt.log && (step % cfg.train.log_every == 0 || step + 1 == total)) {
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        *opt.log << "step " << step << "/" << total << " lr " << sgd.lr << " loss "
                 << rep.total() << " (apm " << rep.apm_score * rep.apm_norm() << "+"
                 << rep.apm_box * rep.apm_norm() << ", det " << rep.det_cls * rep.det_norm() << "+"
                 << rep.det_box * rep.det_norm() << ") " << std::fixed << std::setprecision(1)
                 << secs << "s" << std::defaultfloat << std::setprecision(6) << "\n";
      }
      ++step;
    }
  }
  if (opt.write_outputs) {
    std::filesystem::create_directories(cfg.train.out_dir);
    write_loss_csv(cfg.train.out_dir + "/loss.csv", rows);
    std::vector<double> x, y;
    for (const auto& r : rows) {
      x.push_back(static_cast<double>(r.step));
      y.push_back(r.report.total());
    }
    line_chart(cfg.train.out_dir + "/loss.svg", "training loss", x, {{"total", y}});
    save_checkpoint(model, cfg, cfg.train.out_dir + "/model.ckpt");
  }
  return rows;
}

// Inference over a dataset, `batch` images at a time.
inline std::vector<std::vector<Detection>> detect_all(const Model<float>& model, const Dataset& ds,
                                                      int batch = 8) {
  std::vector<std::vector<Detection>> out;
  const int size = model.input_size();
  for (std::size_t b = 0; b < ds.size(); b += batch) {
    std::vector<Sample> resized;
    std::vector<const Image*> imgs;
    for (std::size_t k = b; k < std::min(ds.size(), b + batch); ++k) {
      const Sample& s = ds.samples[k];
      resized.push_back(s.image.width == size && s.image.height == size ? s : resize_sample(s, size));
    }
    for (const auto& s : resized) imgs.push_back(&s.image);
    auto d = model.infer(to_batch<float>(imgs));
    out.insert(out.end(), d.begin(), d.end());
  }
  return out;
}

inline std::vector<std::vector<GroundTruth>> ground_truths(const Dataset& ds, int size) {
  std::vector<std::vector<GroundTruth>> out;
  for (const auto& s : ds.samples) {
    out.push_back(s.image.width == size && s.image.height == size ? s.gts
                                                                  : resize_sample(s, size).gts);
  }
  return out;
}

struct EvalResult {
  MapTable table;
  std::vector<std::vector<Detection>> detections;
};

inline EvalResult run_eval(const Model<float>& model, const Dataset& ds) {
  EvalResult r;
  r.detections = detect_all(model, ds);
  r.table = evaluate_map(r.detections, ground_truths(ds, model.input_size()),
                         model.config().num_classes);
  return r;
}

// AP, AP50, AP75, APs, APm, APl.
inline std::vector<double> headline(const MapTable& t) {
  return {t.ap_mean("all"),   t.ap_at(0.5),        t.ap_at(0.75),
          t.ap_mean("small"), t.ap_mean("medium"), t.ap_mean("large")};
}

inline std::string format_table(const MapTable& t) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(3);
  os << "AP     AP50   AP75   APs    APm    APl\n";
  for (double v : headline(t)) os << std::setw(7) << std::left << v;
  os << "\n";
  return os.str();
}

inline void write_eval_csv(const std::string& path, const MapTable& t) {
  std::ofstream out(path);
  if (!out) throw IoError(path + ": cannot write");
  out << "area";
  for (double thr : t.iou_thresholds) out << ",ap@" << std::setprecision(2) << thr;
  out << ",mean\n" << std::setprecision(6);
  for (const auto& a : area_ranges()) {
    out << a.name;
    for (double v : t.ap.at(a.name)) out << "," << v;
    out << "," << t.ap_mean(a.name) << "\n";
  }
}

// Averages per image of the anchor census at four stages: initial anchors,
// initial anchors gated by the APM score (C), promoted anchors ungated (R),
// promoted anchors gated (CR).
struct StageStats {
  std::string stage;
  double positives = 0, negatives = 0, ignored = 0;
  std::array<double, 5> iou_histogram{};

  double ratio() const { return negatives > 0 ? positives / negatives : 0.0; }
  double high_iou() const {
    return std::accumulate(iou_histogram.begin(), iou_histogram.end(), 0.0);
  }
};

inline std::vector<StageStats> anchor_stats(const Model<float>& model, const Dataset& ds) {
  std::vector<StageStats> out(4);
  out[0].stage = "initial";
  out[1].stage = "apm_c";
  out[2].stage = "apm_r";
  out[3].stage = "apm_cr";
  const int size = model.input_size();
  const auto all_gts = ground_truths(ds, size);
  const double theta = model.config().theta;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    Sample s = ds.samples[i];
    if (s.image.width != size || s.image.height != size) s = resize_sample(s, size);
    nn::Tape<float> tape(false);
    const auto r = model.forward(tape, to_batch<float>({&s.image}), false);
    const PromotedAnchors p = model.promoted(r, 0);
    std::vector<Box> gts;
    for (const auto& g : all_gts[i]) gts.push_back(g.box);
    const auto& cfg = model.config();
    const MatchResult before = match(model.anchors().boxes, gts, cfg.pos_iou, cfg.neg_iou);
    const MatchResult after = match(p.boxes, gts, cfg.pos_iou, cfg.neg_iou);
    const bool gate = r.apm && r.apm->scoring;
    const MatchResult stages[4] = {
        before, gate ? gate_negatives<double>(before, p.scores, theta) : before, after,
        gate ? gate_negatives<double>(after, p.scores, theta) : after};
    for (int k = 0; k < 4; ++k) {
      const ImbalanceStats st = summarize(stages[k]);
      out[k].positives += st.positives;
      out[k].negatives += st.negatives;
      out[k].ignored += st.ignored;
      for (int b = 0; b < 5; ++b) out[k].iou_histogram[b] += st.iou_histogram[b];
    }
  }
  const double n = std::max<std::size_t>(ds.size(), 1);
  for (auto& s : out) {
    s.positives /= n;
    s.negatives /= n;
    s.ignored /= n;
    for (auto& b : s.iou_histogram) b /= n;
  }
  return out;
}

inline void run_stats(const Model<float>& model, const Dataset& ds, const std::string& out_dir) {
  std::filesystem::create_directories(out_dir);
  const auto stats = anchor_stats(model, ds);
  {
    std::ofstream out(out_dir + "/stats.csv");
    if (!out) throw IoError(out_dir + "/stats.csv: cannot write");
    out << "stage,positives,negatives,ignored,bin_0.5,bin_0.6,bin_0.7,bin_0.8,bin_0.9\n";
    out << std::setprecision(8);
    for (const auto& s : stats) {
      out << s.stage << "," << s.positives << "," << s.negatives << "," << s.ignored;
      for (double b : s.iou_histogram) out << "," << b;
      out << "\n";
    }
  }
  const std::vector<std::string> bins{"0.5-0.6", "0.6-0.7", "0.7-0.8", "0.8-0.9", "0.9-1.0"};
  auto hist = [](const StageStats& s) {
    return std::vector<double>(s.iou_histogram.begin(), s.iou_histogram.end());
  };
  bar_chart(out_dir + "/iou_histogram.svg", "positive anchors per image by IoU", bins,
            {{"before promotion", hist(stats[0])}, {"after promotion", hist(stats[2])}},
            "anchors / image");
  std::vector<std::string> stages;
  std::vector<double> pos, neg;
  for (const auto& s : stats) {
    stages.push_back(s.stage);
    pos.push_back(s.positives);
    neg.push_back(s.negatives);
  }
  bar_chart(out_dir + "/positives.svg", "positive anchors per image", stages, {{"positives", pos}},
            "anchors / image");
  bar_chart(out_dir + "/negatives.svg", "negative anchors per image", stages, {{"negatives", neg}},
            "anchors / image");
}

struct AblationRow {
  std::string name;
  bool apm_c = false, apm_r = false;
  OffsetMode fa = OffsetMode::kNone;
};

// Toggle rows (no feature alignment) then the five offset strategies on
// top of the full promotion module.
inline std::vector<AblationRow> ablation_grid() {
  return {{"baseline", false, false, OffsetMode::kNone},
          {"apm_c", true, false, OffsetMode::kNone},
          {"apm_r", false, true, OffsetMode::kNone},
          {"apm_cr", true, true, OffsetMode::kNone},
          {"apm_cr+implicit", true, true, OffsetMode::kImplicit},
          {"apm_cr+explicit_loc", true, true, OffsetMode::kExplicitLoc},
          {"apm_cr+explicit_shape", true, true, OffsetMode::kExplicitShape},
          {"apm_cr+explicit_concat", true, true, OffsetMode::kExplicitConcat},
          {"apm_cr+disentangled", true, true, OffsetMode::kDisentangled}};
}

inline Config ablation_config(const Config& base, const AblationRow& row) {
  Config c = base;
  c.model.apm.enabled = row.apm_c || row.apm_r;
  c.model.apm.scoring = row.apm_c || !c.model.apm.enabled;
  c.model.apm.adjustment = row.apm_r || !c.model.apm.enabled;
  c.model.fam = FamConfig::uniform(row.fa);
  c.model.fam.detach = base.model.fam.detach;
  c.model.validate();
  return c;
}

struct AblationResult {
  AblationRow row;
  std::vector<double> metrics;  // headline()
  double final_loss = 0;
};

inline std::vector<AblationResult> run_ablate(const Config& base, const std::string& out_dir,
                                              const std::vector<AblationRow>& rows,
                                              std::ostream* log = nullptr) {
  std::filesystem::create_directories(out_dir);
  const int size = base.model.backbone.input_size;
  const Dataset train = load_dataset(base.train.dataset, size);
  const Dataset eval =
      base.train.eval_dataset.empty() ? train : load_dataset(base.train.eval_dataset, size);
  std::vector<AblationResult> results;
  for (const auto& row : rows) {
    Config c = ablation_config(base, row);
    c.model.num_classes = train.num_classes();
    c.train.out_dir = out_dir + "/" + row.name;
    if (log) *log << "== " << row.name << "\n";
    Model<float> model(c.model);
    TrainOptions topt;
    topt.log = log;
    const auto curve = run_train(c, train, model, topt);
    const auto ev = run_eval(model, eval);
    results.push_back({row, headline(ev.table), curve.empty() ? 0 : curve.back().report.total()});
    if (log) *log << format_table(ev.table);
  }
  std::ofstream csv(out_dir + "/ablation.csv");
  if (!csv) throw IoError(out_dir + "/ablation.csv: cannot write");
  csv << "row,apm_c,apm_r,fa_mode,ap,ap50,ap75,ap_s,ap_m,ap_l,final_loss\n";
  std::ofstream md(out_dir + "/ablation.md");
  md << "| row | APM_C | APM_R | FA | AP | AP50 | AP75 | APs | APm | APl |\n"
     << "|---|---|---|---|---|---|---|---|---|---|\n";
  csv << std::setprecision(6);
  md << std::fixed << std::setprecision(3);
  for (const auto& r : results) {
    csv << r.row.name << "," << r.row.apm_c << "," << r.row.apm_r << "," << to_string(r.row.fa);
    md << "| " << r.row.name << " | " << (r.row.apm_c ? "x" : "") << " | "
       << (r.row.apm_r ? "x" : "") << " | " << to_string(r.row.fa);
    for (double v : r.metrics) {
      csv << "," << v;
      md << " | " << v;
    }
    csv << "," << r.final_loss << "\n";
    md << " |\n";
  }
  return results;
}

}  // namespace promodet::harness
