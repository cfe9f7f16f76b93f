// Smallest end-to-end run: synthesize a few 64px images, train for a few
// epochs on top of the toy encoder, then evaluate with ellipse masks.
//
//   quickstart [work-dir]

#include <filesystem>
#include <iostream>

#include "autoprom/autoprom.hpp"

namespace fs = std::filesystem;

int main(int argc, char** argv) {
  const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::temp_directory_path() / "autoprom_quickstart";
  try {
    autoprom::SynthConfig synth;
    synth.image_size = 64;
    synth.min_blobs = 1;
    synth.max_blobs = 4;
    synth.min_radius = 5;
    synth.max_radius = 9;
    synth.count = 48;
    synth.seed = 1;
    autoprom::synth_generate(synth, work / "train");
    synth.count = 16;
    synth.seed = 2;
    autoprom::synth_generate(synth, work / "test");

    autoprom::RunConfig cfg;
    cfg.data_root = (work / "train").string();
    cfg.test_root = (work / "test").string();
    cfg.val_fraction = 0.2;
    cfg.model.encoder.image_size = 64;
    cfg.model.encoder.patch_size = 4;
    cfg.model.encoder.embed_dim = 8;
    cfg.model.decoder.channels = 16;
    cfg.model.head_depth = 2;
    cfg.epochs = 6;
    cfg.lr = 1e-3;
    cfg.out_dir = (work / "run").string();

    const auto summary = autoprom::train(cfg, &std::cout);
    const auto& r = *summary.test_report;
    std::cout << "trainable parameters: " << summary.trainable << "\n"
              << "test AP@0.5: " << r.ap.value_or(0) << "  centroid F1: " << r.detection.f1()
              << "  bPQ: " << r.bpq.value_or(0) << "\n"
              << "artifacts in " << summary.run_dir.string() << "\n";
  } catch (const autoprom::Error& e) {
    std::cerr << e.what() << "\n";
    return 1;
  }
  return 0;
}
