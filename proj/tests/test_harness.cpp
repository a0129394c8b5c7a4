#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "oracles.hpp"
#include "promodet/harness/runs.hpp"

using namespace promodet;
using namespace promodet::harness;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("promodet_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Config tiny_config() {
  Config c;
  c.model.backbone.input_size = 128;
  c.model.backbone.encoder_width = 8;
  c.model.backbone.decoder_width = 8;
  c.model.num_classes = 3;
  c.model.seed = 1;
  c.train.batch_size = 4;
  c.train.seed = 5;
  return c;
}

std::string what_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.what();
  }
  return "";
}

}  // namespace

// ---- config

TEST(Config, DefaultsRoundTripThroughText) {
  const Config c;
  const std::string text = to_text(c);
  EXPECT_NE(text.find("fam.level1.mode = disentangled"), std::string::npos);
  EXPECT_NE(text.find("fam.level5.mode = none"), std::string::npos);
  EXPECT_NE(text.find("train.lr_peak = 0.002"), std::string::npos);
  EXPECT_NE(text.find("apm.theta = 0.01"), std::string::npos);
  EXPECT_EQ(to_text(parse_config(text)), text);
}

TEST(Config, ParsesOverrides) {
  const Config c = parse_config(
      "# comment\n"
      "backbone.input_size = 256\n"
      "fam.level2.mode = explicit_concat   # trailing\n"
      "apm.scoring = false\n"
      "train.dataset = synth:16:3\n");
  EXPECT_EQ(c.model.backbone.input_size, 256);
  EXPECT_EQ(c.model.fam.modes[1], OffsetMode::kExplicitConcat);
  EXPECT_FALSE(c.model.apm.scoring);
  EXPECT_EQ(c.train.dataset, "synth:16:3");
}

TEST(Config, ErrorsNameTheField) {
  EXPECT_NE(what_of([] { parse_config("backbone.input_size = 256\napm.theta = abc\n", "f.cfg"); })
                .find("f.cfg:2: apm.theta"),
            std::string::npos);
  EXPECT_NE(what_of([] { parse_config("apm.thetta = 0.1\n", "f.cfg"); }).find("apm.thetta"),
            std::string::npos);
  EXPECT_NE(what_of([] { parse_config("fam.level1.mode = warped\n", "f.cfg"); })
                .find("fam.level1.mode"),
            std::string::npos);
  EXPECT_NE(what_of([] { parse_config("apm.enabled = maybe\n"); }).find("apm.enabled"),
            std::string::npos);
  EXPECT_NE(what_of([] { parse_config("train.epochs = 4\n"); }).find("train.warmup_epochs"),
            std::string::npos);
  EXPECT_NE(what_of([] { parse_config("fam.level6.mode = implicit\n"); }).find("fam.level6.mode"),
            std::string::npos);
  EXPECT_NE(what_of([] { parse_config("a = 1\na = 2\n"); }).find("duplicate"), std::string::npos);
  EXPECT_NE(what_of([] { parse_config("no equals sign\n"); }).find(":1:"), std::string::npos);
  EXPECT_THROW(load_config("/nonexistent/x.cfg"), IoError);
}

// ---- synthetic data

TEST(Synth, SameSeedIsBitwiseIdentical) {
  const Dataset a = synth_dataset(8, 42), b = synth_dataset(8, 42), c = synth_dataset(8, 43);
  bool differs = false;
  for (int i = 0; i < 8; ++i) {
    EXPECT_EQ(a.samples[i].image.data, b.samples[i].image.data);
    ASSERT_EQ(a.samples[i].gts.size(), b.samples[i].gts.size());
    for (std::size_t k = 0; k < a.samples[i].gts.size(); ++k) {
      EXPECT_EQ(a.samples[i].gts[k].box, b.samples[i].gts[k].box);
      EXPECT_EQ(a.samples[i].gts[k].label, b.samples[i].gts[k].label);
    }
    differs = differs || a.samples[i].image.data != c.samples[i].image.data;
  }
  EXPECT_TRUE(differs);
}

TEST(Synth, SixteenImagesEachWithObjects) {
  const Dataset d = synth_dataset(16, 7);
  ASSERT_EQ(d.size(), 16u);
  EXPECT_EQ(d.num_classes(), 3);
  for (const auto& s : d.samples) {
    EXPECT_GE(s.gts.size(), 1u);
    EXPECT_LE(s.gts.size(), 5u);
    EXPECT_EQ(s.image.width, 256);
    for (const auto& g : s.gts) {
      EXPECT_TRUE(g.box.valid());
      EXPECT_GE(g.box.x1, 0);
      EXPECT_LE(g.box.x2, 256);
      EXPECT_GE(g.label, 1);
      EXPECT_LE(g.label, 3);
    }
    for (float v : s.image.data) {
      ASSERT_GE(v, 0.f);
      ASSERT_LE(v, 1.f);
    }
  }
}

TEST(Synth, ClassHistogramIsRoughlyUniform) {
  SynthOptions o;
  o.image_size = 64;  // labels do not depend on the canvas size
  const Dataset d = synth_dataset(1000, 11, o);
  std::array<double, 3> count{};
  double n = 0;
  bool small = false, large = false;
  for (const auto& s : d.samples) {
    for (const auto& g : s.gts) {
      count[g.label - 1] += 1;
      n += 1;
      small = small || g.box.width() < 0.15 * 64;
      large = large || g.box.width() > 0.4 * 64;
    }
  }
  double chi2 = 0;
  for (double c : count) chi2 += (c - n / 3) * (c - n / 3) / (n / 3);
  EXPECT_LT(chi2, 13.82);  // df = 2, p = 0.001
  EXPECT_TRUE(small);
  EXPECT_TRUE(large);
}

TEST(Synth, DatasetSpecs) {
  EXPECT_EQ(load_dataset("synth:3:1", 128).size(), 3u);
  EXPECT_EQ(load_dataset("synth:3:1", 128).samples[0].image.width, 128);
  EXPECT_THROW(load_dataset("synth:x", 128), ConfigError);
  EXPECT_THROW(load_dataset("/nonexistent/instances.json", 128), IoError);
}

TEST(Coco, LoadsTinyAnnotationFile) {
  const fs::path dir = scratch("coco");
  Image img(40, 20);
  write_ppm(img, (dir / "a.ppm").string());
  std::ofstream(dir / "ann.json") << R"({
    "images": [{"id": 7, "file_name": "a.ppm", "width": 40, "height": 20}],
    "categories": [{"id": 18, "name": "dog"}, {"id": 3, "name": "car"}],
    "annotations": [
      {"id": 1, "image_id": 7, "category_id": 18, "bbox": [10, 5, 20, 10], "iscrowd": 0},
      {"id": 2, "image_id": 7, "category_id": 3, "bbox": [0, 0, 4, 4], "iscrowd": 1}
    ]})";
  const Dataset d = load_coco((dir / "ann.json").string(), 80);
  ASSERT_EQ(d.size(), 1u);
  EXPECT_EQ(d.num_classes(), 2);
  EXPECT_EQ(d.class_names[1], "car");
  EXPECT_EQ(d.category_of_label.at(2), 18);
  ASSERT_EQ(d.samples[0].gts.size(), 1u);
  EXPECT_EQ(d.samples[0].gts[0].label, 2);
  EXPECT_EQ(d.samples[0].gts[0].box, (Box{20, 20, 60, 60}));
  EXPECT_EQ(d.samples[0].image_id, 7);
}

TEST(Image, PpmRoundTripAndResize) {
  const fs::path dir = scratch("ppm");
  Image img(5, 3);
  for (std::size_t i = 0; i < img.data.size(); ++i) img.data[i] = (i % 256) / 255.0f;
  write_ppm(img, (dir / "x.ppm").string());
  const Image back = read_image((dir / "x.ppm").string());
  ASSERT_EQ(back.width, 5);
  ASSERT_EQ(back.height, 3);
  for (std::size_t i = 0; i < img.data.size(); ++i) EXPECT_NEAR(back.data[i], img.data[i], 1e-6);
  const Image same = resize(img, 5, 3);
  EXPECT_EQ(same.data, img.data);
  EXPECT_THROW(read_image((dir / "missing.png").string()), IoError);
}

// ---- augmentation

TEST(Augment, FlipTwiceIsIdentity) {
  const Dataset d = synth_dataset(4, 2);
  for (const auto& s : d.samples) {
    const Sample f = flip_horizontal(s);
    const Sample ff = flip_horizontal(f);
    EXPECT_EQ(ff.image.data, s.image.data);
    for (std::size_t k = 0; k < s.gts.size(); ++k) {
      EXPECT_EQ(ff.gts[k].box, s.gts[k].box);
      EXPECT_DOUBLE_EQ(f.gts[k].box.x1, 256 - s.gts[k].box.x2);
    }
  }
}

TEST(Augment, ExpandAtOriginKeepsBoxes) {
  const Dataset d = synth_dataset(2, 3);
  const Sample& s = d.samples[0];
  const Sample e = expand(s, 2.0, 0, 0, {0.5f, 0.5f, 0.5f});
  EXPECT_EQ(e.image.width, 512);
  EXPECT_EQ(e.image.height, 512);
  for (std::size_t k = 0; k < s.gts.size(); ++k) EXPECT_EQ(e.gts[k].box, s.gts[k].box);
  EXPECT_EQ(e.image.at(1, 3, 4), s.image.at(1, 3, 4));
  EXPECT_EQ(e.image.at(0, 400, 400), 0.5f);
  EXPECT_THROW(expand(s, 2.0, 300, 0, {0.5f, 0.5f, 0.5f}), GeometryError);
}

TEST(Augment, OutputsStayInBounds) {
  const Dataset d = synth_dataset(20, 4);
  int changed = 0;
  for (std::uint64_t seed = 0; seed < 15; ++seed) {
    for (const auto& s : d.samples) {
      const Sample a = augment(s, seed, 128);
      ASSERT_EQ(a.image.width, 128);
      ASSERT_EQ(a.image.height, 128);
      ASSERT_FALSE(a.gts.empty());
      for (const auto& g : a.gts) {
        ASSERT_TRUE(g.box.valid());
        ASSERT_GE(g.box.x1, 0);
        ASSERT_GE(g.box.y1, 0);
        ASSERT_LE(g.box.x2, 128);
        ASSERT_LE(g.box.y2, 128);
      }
      changed += a.gts.size() != s.gts.size();
    }
  }
  EXPECT_GT(changed, 0);  // crops do drop objects sometimes
}

TEST(Augment, DeterministicPerSeed) {
  const Dataset d = synth_dataset(3, 4);
  const Sample a = augment(d.samples[1], 9, 128), b = augment(d.samples[1], 9, 128);
  EXPECT_EQ(a.image.data, b.image.data);
  ASSERT_EQ(a.gts.size(), b.gts.size());
}

// ---- schedule

TEST(Schedule, PaperSpotChecks) {
  LrSchedule s;
  s.steps_per_epoch = 10;
  EXPECT_DOUBLE_EQ(lr_at(0, s), 1e-6);
  EXPECT_NEAR(lr_at(25, s), 1e-6 + (2e-3 - 1e-6) * 0.5, 1e-15);
  EXPECT_DOUBLE_EQ(lr_at(50, s), 2e-3);
  EXPECT_DOUBLE_EQ(lr_at(999, s), 2e-3);
  EXPECT_NEAR(lr_at(1000, s), 2e-4, 1e-18);
  EXPECT_NEAR(lr_at(1400, s), 2e-5, 1e-18);
  EXPECT_NEAR(lr_at(1599, s), 2e-5, 1e-18);
  EXPECT_THROW(lr_at(-1, s), ConfigError);
  s.decay1_epoch = 2;
  EXPECT_THROW(s.validate(), ConfigError);
}

// ---- evaluation

TEST(Map, PerfectDetector) {
  const Dataset d = synth_dataset(6, 5);
  std::vector<std::vector<GroundTruth>> gts;
  std::vector<std::vector<Detection>> dets;
  for (const auto& s : d.samples) {
    gts.push_back(s.gts);
    std::vector<Detection> v;
    for (const auto& g : s.gts) v.push_back({g.box, g.label, 1.0});
    dets.push_back(v);
  }
  const MapTable t = evaluate_map(dets, gts, 3);
  for (double thr : t.iou_thresholds) EXPECT_DOUBLE_EQ(t.ap_at(thr), 1.0);
  EXPECT_DOUBLE_EQ(t.ap_mean(), 1.0);
}

TEST(Map, NoDetections) {
  const Dataset d = synth_dataset(6, 5);
  std::vector<std::vector<GroundTruth>> gts;
  for (const auto& s : d.samples) gts.push_back(s.gts);
  const MapTable t = evaluate_map(std::vector<std::vector<Detection>>(6), gts, 3);
  EXPECT_EQ(t.ap_mean(), 0.0);
  EXPECT_EQ(t.ap_at(0.5), 0.0);
}

TEST(Map, HandBuiltThreeDetectionsTwoGts) {
  // Ranked TP, FP, TP: recall 0.5, 0.5, 1.0; precision 1, 1/2, 2/3.
  const std::vector<std::vector<GroundTruth>> gts{{{{0, 0, 50, 50}, 1}, {{100, 100, 150, 150}, 1}}};
  const std::vector<std::vector<Detection>> dets{{{{1, 1, 50, 50}, 1, 0.9},
                                                  {{200, 0, 250, 50}, 1, 0.8},
                                                  {{100, 100, 149, 151}, 1, 0.7}}};
  const MapTable t = evaluate_map(dets, gts, 1, {0.5});
  const double want = oracle::ap101({0.5, 0.5, 1.0}, {1.0, 0.5, 2.0 / 3.0});
  EXPECT_NEAR(want, (51 + 50 * 2.0 / 3.0) / 101, 1e-12);
  EXPECT_NEAR(t.ap_at(0.5), want, 1e-12);
}

TEST(Map, ClassWithoutGroundTruthIsExcluded) {
  const std::vector<std::vector<GroundTruth>> gts{{{{0, 0, 50, 50}, 1}}};
  const std::vector<std::vector<Detection>> dets{{{{0, 0, 50, 50}, 1, 0.9},
                                                  {{60, 60, 90, 90}, 2, 0.9}}};
  const MapTable t = evaluate_map(dets, gts, 2, {0.5});
  EXPECT_DOUBLE_EQ(t.ap_at(0.5), 1.0);
  EXPECT_EQ(t.class_ap50.count(2), 0u);
}

TEST(Map, DuplicateDetectionIsFalsePositive) {
  const std::vector<std::vector<GroundTruth>> gts{{{{0, 0, 50, 50}, 1}}};
  const std::vector<std::vector<Detection>> dets{{{{0, 0, 50, 50}, 1, 0.8},
                                                  {{0, 0, 50, 49}, 1, 0.9}}};
  const MapTable t = evaluate_map(dets, gts, 1, {0.5});
  EXPECT_DOUBLE_EQ(t.ap_at(0.5), 1.0);  // the higher-scored one matches first
  const std::vector<std::vector<Detection>> miss{{{{60, 60, 90, 90}, 1, 0.9},
                                                  {{0, 0, 50, 50}, 1, 0.8}}};
  EXPECT_NEAR(evaluate_map(miss, gts, 1, {0.5}).ap_at(0.5),
              oracle::ap101({0.0, 1.0}, {0.0, 0.5}), 1e-12);
}

TEST(Map, CocoRecords) {
  Dataset ds = synth_dataset(1, 1);
  ds.category_of_label = {{1, 18}};
  const std::vector<std::vector<Detection>> dets{{{{10, 20, 40, 60}, 1, 0.5}}};
  const auto j = coco_results(ds, dets);
  ASSERT_EQ(j.size(), 1u);
  EXPECT_EQ(j[0]["image_id"], 1);
  EXPECT_EQ(j[0]["category_id"], 18);
  EXPECT_EQ(j[0]["bbox"][2].get<double>(), 30);
  EXPECT_EQ(j[0]["bbox"][3].get<double>(), 40);
}

// ---- checkpoint, training, stats, ablation

TEST(Checkpoint, RoundTripGivesIdenticalInference) {
  const fs::path dir = scratch("ckpt");
  Config c = tiny_config();
  Model<float> model(c.model);
  // perturb away from the initial state so loading really matters
  std::mt19937_64 rng(1);
  std::normal_distribution<float> g(0, 0.05f);
  for (auto& [_, p] : model.store().params()) {
    for (auto& v : p->value().vec()) v += g(rng);
  }
  for (auto& [_, s] : model.store().bn_states()) {
    for (auto& v : s->running_mean.vec()) v = g(rng);
  }
  save_checkpoint(model, c, (dir / "m.ckpt").string());
  const LoadedModel loaded = load_checkpoint((dir / "m.ckpt").string());
  EXPECT_EQ(to_text(loaded.config), to_text(c));
  const Dataset d = synth_dataset(3, 1, SynthOptions{128});
  const auto a = detect_all(model, d), b = detect_all(*loaded.model, d);
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    ASSERT_EQ(a[i].size(), b[i].size());
    for (std::size_t k = 0; k < a[i].size(); ++k) {
      EXPECT_EQ(a[i][k].box, b[i][k].box);
      EXPECT_EQ(a[i][k].score, b[i][k].score);
      EXPECT_EQ(a[i][k].label, b[i][k].label);
    }
  }
}

TEST(Checkpoint, CorruptFilesAreRejected) {
  const fs::path dir = scratch("ckpt_bad");
  EXPECT_THROW(load_checkpoint((dir / "none.ckpt").string()), IoError);
  std::ofstream(dir / "junk.ckpt") << "not a checkpoint";
  EXPECT_THROW(load_checkpoint((dir / "junk.ckpt").string()), IoError);
  Config c = tiny_config();
  Model<float> model(c.model);
  save_checkpoint(model, c, (dir / "m.ckpt").string());
  fs::resize_file(dir / "m.ckpt", fs::file_size(dir / "m.ckpt") / 2);
  EXPECT_THROW(load_checkpoint((dir / "m.ckpt").string()), IoError);
}

TEST(Training, FiftyStepsAreDeterministic) {
  Config c = tiny_config();
  c.train.schedule.warmup_epochs = 1;
  c.train.schedule.decay1_epoch = 8;
  c.train.schedule.decay2_epoch = 10;
  c.train.schedule.total_epochs = 12.5;  // 4 steps per epoch -> 50 steps
  const Dataset d = synth_dataset(16, 2, SynthOptions{128});
  TrainOptions opt;
  opt.write_outputs = false;
  Model<float> m1(c.model), m2(c.model);
  const auto r1 = run_train(c, d, m1, opt);
  const auto r2 = run_train(c, d, m2, opt);
  ASSERT_EQ(r1.size(), 50u);
  ASSERT_EQ(r2.size(), 50u);
  for (std::size_t k = 0; k < r1.size(); ++k) {
    EXPECT_NEAR(r1[k].report.total(), r2[k].report.total(), 1e-6) << "step " << k;
    EXPECT_EQ(r1[k].lr, r2[k].lr);
  }
  EXPECT_LT(r1.back().report.total(), r1.front().report.total());
}

TEST(Training, WritesOutputs) {
  const fs::path dir = scratch("train");
  Config c = tiny_config();
  c.train.schedule.warmup_epochs = 0;
  c.train.schedule.decay1_epoch = 1;
  c.train.schedule.decay2_epoch = 1.5;
  c.train.schedule.total_epochs = 2;
  c.train.out_dir = dir.string();
  const Dataset d = synth_dataset(4, 2, SynthOptions{128});
  Model<float> m(c.model);
  run_train(c, d, m);
  EXPECT_TRUE(fs::exists(dir / "loss.csv"));
  EXPECT_TRUE(fs::exists(dir / "loss.svg"));
  EXPECT_TRUE(fs::exists(dir / "model.ckpt"));
  std::ifstream in(dir / "loss.csv");
  int lines = 0;
  for (std::string l; std::getline(in, l);) ++lines;
  EXPECT_EQ(lines, 3);  // header + 2 steps
}

TEST(Stats, UntrainedModelHasIdenticalBeforeAfter) {
  const fs::path dir = scratch("stats");
  Config c = tiny_config();
  Model<float> m(c.model);
  const Dataset d = synth_dataset(4, 3, SynthOptions{128});
  const auto st = anchor_stats(m, d);
  ASSERT_EQ(st.size(), 4u);
  EXPECT_EQ(st[0].iou_histogram, st[2].iou_histogram);
  EXPECT_EQ(st[0].positives, st[2].positives);
  EXPECT_EQ(st[0].negatives, st[2].negatives);
  // scores start near 0.01: the gate turns part of the negatives into ignores
  EXPECT_EQ(st[1].positives, st[0].positives);
  EXPECT_LE(st[1].negatives, st[0].negatives);
  run_stats(m, d, dir.string());
  for (const char* f : {"stats.csv", "iou_histogram.svg", "positives.svg", "negatives.svg"}) {
    EXPECT_TRUE(fs::exists(dir / f)) << f;
  }
}

TEST(Ablation, GridHasTableStructure) {
  const auto g = ablation_grid();
  ASSERT_EQ(g.size(), 9u);
  int toggles = 0, offsets = 0;
  for (const auto& r : g) {
    if (r.fa == OffsetMode::kNone) {
      ++toggles;
    } else {
      ++offsets;
      EXPECT_TRUE(r.apm_c && r.apm_r);
    }
    const Config c = ablation_config(tiny_config(), r);
    EXPECT_EQ(c.model.apm.enabled, r.apm_c || r.apm_r);
    if (c.model.apm.enabled) {
      EXPECT_EQ(c.model.apm.scoring, r.apm_c);
      EXPECT_EQ(c.model.apm.adjustment, r.apm_r);
    }
    EXPECT_EQ(c.model.fam.modes[0], r.fa);
    EXPECT_EQ(c.model.fam.modes[4], OffsetMode::kNone);
  }
  EXPECT_EQ(toggles, 4);
  EXPECT_EQ(offsets, 5);
}

TEST(Ablation, RowsKeepOtherSettings) {
  Config base = tiny_config();
  base.model.fam.detach = true;
  base.model.theta = 0.05;
  for (const auto& r : ablation_grid()) {
    const Config c = ablation_config(base, r);
    EXPECT_TRUE(c.model.fam.detach) << r.name;
    EXPECT_EQ(c.model.theta, 0.05);
  }
}
