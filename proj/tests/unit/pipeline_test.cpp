#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "autoprom/autoprom.hpp"

using namespace autoprom;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("autoprom_pipeline_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

SynthConfig tiny_synth(std::size_t count, std::uint64_t seed) {
  SynthConfig c;
  c.seed = seed;
  c.count = count;
  c.image_size = 64;
  c.min_blobs = 1;
  c.max_blobs = 4;
  c.min_radius = 5;
  c.max_radius = 9;
  return c;
}

RunConfig tiny_run(const fs::path& out) {
  RunConfig c;
  c.model.encoder.image_size = 64;
  c.model.encoder.patch_size = 4;
  c.model.encoder.embed_dim = 4;
  c.model.decoder.channels = 8;
  c.model.head_depth = 1;
  c.epochs = 2;
  c.batch_size = 4;
  c.seed = 11;
  c.out_dir = out.string();
  c.overlays = 2;
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// curves.csv without the wall-clock column.
std::string curves_without_time(const fs::path& p) {
  std::istringstream in(slurp(p));
  std::string line, out;
  while (std::getline(in, line)) out += line.substr(0, line.rfind(',')) + "\n";
  return out;
}

}  // namespace

// ------------------------------------------------------------- scheduler

TEST(Plateau, ReducesOnlyAfterPatienceAndStopsAtFloor) {
  PlateauScheduler s(3e-4, PlateauOptions{});
  std::vector<double> trace;
  for (int e = 0; e < 60; ++e) {
    trace.push_back(s.lr());
    s.step(1.0);  // never improves after the first epoch
  }
  // epoch 1 sets the best; five bad epochs follow before each cut
  for (int e = 0; e < 6; ++e) EXPECT_EQ(trace[e], 3e-4) << e;
  EXPECT_NEAR(trace[6], 3e-5, 1e-18);
  EXPECT_NEAR(trace[11], 3e-6, 1e-18);
  EXPECT_NEAR(trace[16], 3e-7, 1e-18);
  for (std::size_t e = 1; e < trace.size(); ++e) {
    EXPECT_LE(trace[e], trace[e - 1]);
    EXPECT_GE(trace[e], 3e-7);
  }
  EXPECT_EQ(trace.back(), trace[16]);
}

TEST(Plateau, ImprovementResetsTheCount) {
  PlateauScheduler s(1e-3, PlateauOptions{});
  double v = 10.0;
  for (int e = 0; e < 4; ++e) s.step(v);
  v = 5.0;
  s.step(v);  // improves: counter back to zero
  EXPECT_EQ(s.bad_epochs(), 0u);
  for (int e = 0; e < 4; ++e) EXPECT_FALSE(s.step(v));
  EXPECT_TRUE(s.step(v));
  EXPECT_NEAR(s.lr(), 1e-4, 1e-18);
  // below the relative threshold does not count as improvement
  for (int e = 0; e < 4; ++e) s.step(v * (1 - 1e-5));
  EXPECT_TRUE(s.step(v));
}

TEST(Plateau, RejectsBadOptions) {
  EXPECT_THROW(PlateauScheduler(1e-3, PlateauOptions{1.5, 5, 1e-4, 1e-7}), ValidationError);
  EXPECT_THROW(PlateauScheduler(1e-3, PlateauOptions{0.1, 0, 1e-4, 1e-7}), ValidationError);
  EXPECT_THROW(PlateauScheduler(1e-7, PlateauOptions{0.1, 5, 1e-4, 3e-7}), ValidationError);
}

// ---------------------------------------------------------------- config

TEST(Config, RoundTripsAndRejectsUnknownKeys) {
  RunConfig c = tiny_run("x");
  c.mask_shape = StubMaskShape::kRectangle;
  const RunConfig back = parse_run_config(nlohmann::json(c));
  EXPECT_EQ(nlohmann::json(back), nlohmann::json(c));
  nlohmann::json j = c;
  j["epoch"] = 3;
  EXPECT_THROW(parse_run_config(j), ValidationError);
}

TEST(Config, OverridesUseDottedPaths) {
  nlohmann::json j = nlohmann::json(tiny_run("x"));
  apply_override(j, "model.decoder.channels=16");
  apply_override(j, "out_dir=runs/other");
  apply_override(j, "lr=1e-3");
  const RunConfig c = parse_run_config(j);
  EXPECT_EQ(c.model.decoder.channels, 16u);
  EXPECT_EQ(c.out_dir, "runs/other");
  EXPECT_DOUBLE_EQ(c.lr, 1e-3);
  EXPECT_THROW(apply_override(j, "novalue"), ValidationError);
}

TEST(Config, ValidationRules) {
  RunConfig c = tiny_run("x");
  c.batch_size = 1;
  EXPECT_THROW(c.validate(), ValidationError);
  c = tiny_run("x");
  c.epochs = 0;
  EXPECT_THROW(c.validate(), ValidationError);
  c = tiny_run("x");
  c.plateau.floor = 1.0;
  EXPECT_THROW(c.validate(), ValidationError);
}

// ----------------------------------------------------------- mask bridge

TEST(Bridge, SubstitutesForTheStub) {
  const fs::path dir = scratch("bridge_ok");
  const Sample s = synth_image(tiny_synth(1, 5), 0).sample;
  const std::vector<Detection> dets = {{{4, 6, 20, 18}, 1, 0.9}, {{30, 30, 50, 44}, 2, 0.7}};
  MaskProvider mp;
  mp.shape = StubMaskShape::kRectangle;
  mp.scratch = dir;
  const InstanceSegmentation stub = segment_instances(mp, s, dets);
  mp.bridge_command = AUTOPROM_FAKE_BRIDGE;
  const InstanceSegmentation bridged = segment_instances(mp, s, dets);
  EXPECT_EQ(bridged, stub);
  EXPECT_EQ(bridged.count(), 2u);
  const PromptFile pf = load_prompts(dir / (s.id + ".prompts.json"));
  EXPECT_EQ(pf.boxes.size(), 2u);
}

TEST(Bridge, WrongShapeIsRejected) {
  MaskProvider mp;
  mp.scratch = scratch("bridge_shape");
  mp.bridge_command = std::string(AUTOPROM_FAKE_BRIDGE) + " --mode wrong-shape";
  const Sample s = synth_image(tiny_synth(1, 5), 0).sample;
  EXPECT_THROW(segment_instances(mp, s, {{{4, 6, 20, 18}, 1, 0.9}}), ValidationError);
}

TEST(Bridge, FailureAborts) {
  MaskProvider mp;
  mp.scratch = scratch("bridge_fail");
  mp.bridge_command = std::string(AUTOPROM_FAKE_BRIDGE) + " --mode fail";
  const Sample s = synth_image(tiny_synth(1, 5), 0).sample;
  EXPECT_THROW(segment_instances(mp, s, {{{4, 6, 20, 18}, 1, 0.9}}), RuntimeAbort);
}

// -------------------------------------------------------------- evaluate

TEST(Evaluate, OracleIsPerfectAndWritesArtifacts) {
  const fs::path dir = scratch("oracle");
  const Dataset ds = synth_dataset(tiny_synth(6, 21));
  EvaluateOptions eo;
  eo.oracle = true;
  eo.out_dir = dir;
  eo.overlays = 3;
  const MetricsReport r = evaluate<float>(nullptr, nullptr, ds, eo);
  EXPECT_EQ(r.ap, 1.0);
  EXPECT_EQ(r.map, 1.0);
  EXPECT_EQ(r.bpq, 1.0);
  EXPECT_EQ(r.mpq, 1.0);
  EXPECT_EQ(r.dice, 1.0);
  EXPECT_EQ(r.detection.f1(), 1.0);
  EXPECT_TRUE(fs::exists(dir / "report.json"));
  EXPECT_TRUE(fs::exists(dir / "confusion.csv"));
  std::size_t overlays = 0;
  for ([[maybe_unused]] const auto& e : fs::directory_iterator(dir / "overlays")) ++overlays;
  EXPECT_EQ(overlays, 3u);
}

TEST(Evaluate, RequiresAModelWithoutOracle) {
  const Dataset ds = synth_dataset(tiny_synth(2, 21));
  EXPECT_THROW(evaluate<float>(nullptr, nullptr, ds, EvaluateOptions{}), ValidationError);
}

// --------------------------------------------------------------- training

class SmallRun : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    root_ = scratch("train");
    synth_generate(tiny_synth(12, 31), root_ / "train");
    synth_generate(tiny_synth(4, 32), root_ / "val");
    synth_generate(tiny_synth(4, 33), root_ / "test");
  }

  static RunConfig config(const std::string& run) {
    RunConfig c = tiny_run(root_ / run);
    c.data_root = (root_ / "train").string();
    c.val_root = (root_ / "val").string();
    c.test_root = (root_ / "test").string();
    return c;
  }

  static fs::path root_;
};

fs::path SmallRun::root_;

TEST_F(SmallRun, FillsTheRunDirectoryAndKeepsTheEncoderFrozen) {
  const RunConfig cfg = config("a");
  const TrainSummary s = train<float>(cfg);
  EXPECT_EQ(s.encoder_before, s.encoder_after);
  ASSERT_EQ(s.epochs.size(), 2u);
  for (const char* f : {"config.json", "curves.csv", "report.json", "confusion.csv", "checkpoints/best/manifest.json",
                        "checkpoints/last/manifest.json"})
    EXPECT_TRUE(fs::exists(s.run_dir / f)) << f;
  EXPECT_TRUE(fs::is_directory(s.run_dir / "overlays"));
  EXPECT_EQ(parse_run_config(read_json_file(s.run_dir / "config.json")).out_dir, cfg.out_dir);
  const nlohmann::json m = read_checkpoint_manifest(s.run_dir / "checkpoints" / "best");
  EXPECT_EQ(m.at("trainable_parameters").get<std::size_t>(), trainable_parameter_count(cfg.model));
  ASSERT_TRUE(s.test_report.has_value());
  EXPECT_EQ(s.test_report->per_class.size(), 2u);
}

TEST_F(SmallRun, IdenticalSeedsGiveIdenticalArtifacts) {
  const TrainSummary a = train<float>(config("det1"));
  const TrainSummary b = train<float>(config("det2"));
  EXPECT_EQ(directory_fingerprint(a.run_dir / "checkpoints"), directory_fingerprint(b.run_dir / "checkpoints"));
  EXPECT_EQ(slurp(a.run_dir / "report.json"), slurp(b.run_dir / "report.json"));
  EXPECT_EQ(curves_without_time(a.run_dir / "curves.csv"), curves_without_time(b.run_dir / "curves.csv"));

  RunConfig other = config("det3");
  other.seed = 12;
  const TrainSummary c = train<float>(other);
  EXPECT_NE(directory_fingerprint(a.run_dir / "checkpoints"), directory_fingerprint(c.run_dir / "checkpoints"));
}

TEST_F(SmallRun, ReloadedCheckpointReproducesTheReport) {
  const TrainSummary s = train<float>(config("reload"));
  LoadedModel lm = load_model(s.run_dir / "checkpoints" / "best");
  const Dataset test = load_dataset(root_ / "test");
  EvaluateOptions eo;
  eo.out_dir = root_ / "reload_eval";
  eo.overlays = 0;
  evaluate(lm.model.get(), lm.source.get(), test, eo);
  EXPECT_EQ(slurp(s.run_dir / "report.json"), slurp(eo.out_dir / "report.json"));
}

TEST_F(SmallRun, ImportedEmbeddingsMatchTheToyEncoder) {
  // archives are keyed by sample id, so validation is held out of one split
  auto single_split = [](const std::string& run) {
    RunConfig c = config(run);
    c.val_root.clear();
    c.val_fraction = 0.25;
    c.test_root.clear();
    c.augment = false;
    return c;
  };
  const TrainSummary a = train<float>(single_split("emb_toy"));

  const fs::path emb = root_ / "embeddings";
  const RunConfig base = single_split("x");
  FeatureSource<float> src = FeatureSource<float>::toy(base.model.encoder, base.encoder_seed);
  EXPECT_EQ(export_embeddings(load_dataset(root_ / "train"), src, emb), 12u);
  const EmbeddingIndex idx = import_embeddings(emb);
  EXPECT_EQ(idx.ids.size(), 12u);
  EXPECT_EQ(idx.config.grid_size(), 16u);
  EXPECT_TRUE(fs::exists(emb / "index.json"));

  RunConfig imported = single_split("emb_archive");
  imported.embeddings_dir = emb.string();
  const TrainSummary b = train<float>(imported);
  EXPECT_EQ(b.encoder_before, b.encoder_after);
  EXPECT_EQ(directory_fingerprint(a.run_dir / "checkpoints" / "best" / "tensors"),
            directory_fingerprint(b.run_dir / "checkpoints" / "best" / "tensors"));

  const Dataset larger = synth_dataset(tiny_synth(20, 40));
  EXPECT_THROW(import_embeddings(emb, &larger), ValidationError);
}

TEST_F(SmallRun, RejectsMismatchedImageSize) {
  RunConfig c = config("badsize");
  c.model.encoder.image_size = 128;
  EXPECT_THROW(train<float>(c), ValidationError);
}

TEST_F(SmallRun, CheckpointShapeMismatchNamesTensors) {
  const TrainSummary s = train<float>(config("mismatch"));
  DetectorConfig wider = config("x").model;
  wider.decoder.channels = 16;
  Detector<float> d(wider, 0);
  try {
    load_checkpoint(s.run_dir / "checkpoints" / "best", d);
    FAIL() << "expected a validation error";
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("~ head.cls.out.weight"), std::string::npos) << e.what();
  }
}
