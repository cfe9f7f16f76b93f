// autoprom command-line front end.
//
//   autoprom train --config c.json [--set key=value]... [overrides]
//   autoprom evaluate --ckpt DIR --data DIR --mode {bbox,pq,full}
//   autoprom detect --ckpt DIR --image PNG --out DIR [--emit-masks] [--use-bridge CMD]
//   autoprom prompts --check FILE
//   autoprom synth --seed S --n N --size PX --classes K --out DIR
//   autoprom import-embeddings --dir DIR [--data DIR]
//   autoprom export-embeddings --data DIR --out DIR [--config c.json]
//   autoprom params --config c.json
//
// Exit codes: 0 ok, 2 validation error, 3 runtime abort.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "autoprom/autoprom.hpp"

namespace fs = std::filesystem;
using namespace autoprom;

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitAbort = 3;

nlohmann::json load_config_json(const std::string& path) {
  if (path.empty()) return nlohmann::json::object();
  return read_json_file(path);
}

StubMaskShape parse_mask_shape(const std::string& s) {
  if (s == "ellipse") return StubMaskShape::kEllipse;
  if (s == "rectangle") return StubMaskShape::kRectangle;
  throw ValidationError("mask shape must be ellipse or rectangle, got " + s);
}

EvalMode parse_mode(const std::string& s) {
  if (s == "bbox") return EvalMode::kBbox;
  if (s == "pq") return EvalMode::kPq;
  if (s == "full") return EvalMode::kFull;
  throw ValidationError("mode must be bbox, pq or full, got " + s);
}

void print_report(const MetricsReport& r) {
  auto show = [](const char* name, const std::optional<double>& v) {
    std::cout << "  " << name << ": ";
    if (v) std::cout << *v;
    else std::cout << "n/a";
    std::cout << "\n";
  };
  std::cout << "images: " << r.images << "\n";
  show("AP", r.ap);
  show("mAP", r.map);
  show("bPQ", r.bpq);
  show("mPQ", r.mpq);
  show("dice", r.dice);
  std::cout << "  detection P/R/F1: " << r.detection.precision() << " / " << r.detection.recall() << " / "
            << r.detection.f1() << "\n";
}

// ------------------------------------------------------------------ train

struct TrainArgs {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::string> data_root, val_root, test_root, out_dir, embeddings;
  std::optional<std::size_t> epochs, batch_size;
  std::optional<double> lr;
  std::optional<std::uint64_t> seed;
  bool no_augment = false;
  bool quiet = false;
};

int cmd_train(const TrainArgs& a) {
  nlohmann::json j = load_config_json(a.config);
  if (a.data_root) j["data_root"] = *a.data_root;
  if (a.val_root) j["val_root"] = *a.val_root;
  if (a.test_root) j["test_root"] = *a.test_root;
  if (a.out_dir) j["out_dir"] = *a.out_dir;
  if (a.embeddings) j["embeddings_dir"] = *a.embeddings;
  if (a.epochs) j["epochs"] = *a.epochs;
  if (a.batch_size) j["batch_size"] = *a.batch_size;
  if (a.lr) j["lr"] = *a.lr;
  if (a.seed) j["seed"] = *a.seed;
  if (a.no_augment) j["augment"] = false;
  for (const auto& s : a.sets) apply_override(j, s);
  const RunConfig cfg = parse_run_config(j);
  const TrainSummary sum = train<float>(cfg, a.quiet ? nullptr : &std::cout);
  std::cout << "run directory: " << sum.run_dir.string() << "\n"
            << "best epoch: " << sum.best_epoch << " (val loss " << sum.best_val << ")\n"
            << "encoder fingerprint: " << sum.encoder_before << " -> " << sum.encoder_after << "\n";
  if (sum.test_report) print_report(*sum.test_report);
  return 0;
}

// --------------------------------------------------------------- evaluate

struct EvaluateArgs {
  std::string ckpt, data, mode = "full", out, bridge, embeddings, mask_shape = "ellipse";
  bool oracle = false;
  std::optional<double> score_threshold, nms_iou, match_radius;
  std::size_t overlays = 4;
};

int cmd_evaluate(const EvaluateArgs& a) {
  const Dataset data = load_dataset(a.data);
  EvaluateOptions eo;
  eo.mode = parse_mode(a.mode);
  eo.oracle = a.oracle;
  eo.masks.shape = parse_mask_shape(a.mask_shape);
  eo.masks.bridge_command = a.bridge;
  if (!a.out.empty()) eo.masks.scratch = fs::path(a.out) / "bridge";
  if (a.score_threshold) eo.decode.score_threshold = *a.score_threshold;
  if (a.nms_iou) eo.nms_iou = *a.nms_iou;
  if (a.match_radius) eo.eval.match_radius = *a.match_radius;
  eo.out_dir = a.out;
  eo.overlays = a.overlays;
  MetricsReport r;
  if (a.oracle) {
    r = evaluate<float>(nullptr, nullptr, data, eo);
  } else {
    if (a.ckpt.empty()) throw ValidationError("evaluate: --ckpt is required unless --oracle is given");
    LoadedModel lm = load_model(a.ckpt, a.embeddings);
    if (static_cast<std::size_t>(data.manifest.num_classes) != lm.model->config().num_classes)
      throw ValidationError("dataset has " + std::to_string(data.manifest.num_classes) + " classes, checkpoint has " +
                            std::to_string(lm.model->config().num_classes));
    r = evaluate(lm.model.get(), lm.source.get(), data, eo);
  }
  print_report(r);
  if (a.out.empty()) std::cout << to_json_value(r).dump(2) << "\n";
  return 0;
}

// ----------------------------------------------------------------- detect

struct DetectArgs {
  std::string ckpt, image, out = ".", bridge, embeddings, id, mask_shape = "ellipse";
  bool emit_masks = false;
  std::optional<double> score_threshold, nms_iou;
};

int cmd_detect(const DetectArgs& a) {
  LoadedModel lm = load_model(a.ckpt, a.embeddings);
  const DetectorConfig& cfg = lm.model->config();
  Tensor<float> image = read_png(a.image);
  const std::size_t h = image.dim(1), w = image.dim(2);
  if (h != cfg.encoder.image_size || w != cfg.encoder.image_size)
    throw ValidationError("image " + a.image + " is " + std::to_string(w) + "x" + std::to_string(h) +
                          ", the model expects " + std::to_string(cfg.encoder.image_size) + "x" +
                          std::to_string(cfg.encoder.image_size) + " (no resizing is done)");
  const std::string id = a.id.empty() ? fs::path(a.image).stem().string() : a.id;
  const Sample sample = make_sample(id, std::move(image), InstanceSegmentation(h, w));

  DecodeOptions decode;
  if (a.score_threshold) decode.score_threshold = *a.score_threshold;
  const Sample* ptr = &sample;
  const auto dets = predict(*lm.model, *lm.source, std::span<const Sample* const>(&ptr, 1), decode,
                            a.nms_iou.value_or(0.5), 1)[0];

  fs::create_directories(a.out);
  const PromptFile pf = emit_prompts(dets, id, fs::path(a.out) / (id + ".prompts.json"), static_cast<double>(w),
                                     static_cast<double>(h));
  std::cout << "detections: " << pf.boxes.size() << "\n"
            << "prompts: " << (fs::path(a.out) / (id + ".prompts.json")).string() << "\n";
  if (a.emit_masks || !a.bridge.empty()) {
    MaskProvider mp;
    mp.shape = parse_mask_shape(a.mask_shape);
    mp.bridge_command = a.bridge;
    mp.scratch = fs::path(a.out) / "bridge";
    const InstanceSegmentation seg = segment_instances(mp, sample, pf.boxes, a.image);
    save_tensor(fs::path(a.out) / (id + ".instances.tsr"), seg.id_tensor());
    write_png(fs::path(a.out) / (id + ".overlay.png"), render_overlay(sample.image, &seg, nullptr));
    std::cout << "instances: " << seg.count() << "\n";
  }
  return 0;
}

// ------------------------------------------------------------- the rest

int cmd_prompts(const std::string& path) {
  const PromptFile pf = load_prompts(path);
  std::cout << pf.image_id << ": " << pf.boxes.size() << " boxes, schema ok\n";
  return 0;
}

int cmd_synth(SynthConfig cfg, const std::string& config_path, const std::string& out) {
  if (!config_path.empty()) {
    SynthConfig base = read_json_file(config_path).get<SynthConfig>();
    base.seed = cfg.seed;
    base.count = cfg.count;
    base.image_size = cfg.image_size;
    base.num_classes = cfg.num_classes;
    cfg = base;
  }
  const SynthReport rep = synth_generate(cfg, out);
  std::cout << "images: " << rep.images << "  instances: " << rep.instances << "  skipped blobs: " << rep.skipped_blobs
            << "\n";
  for (std::size_t k = 0; k < rep.class_counts.size(); ++k)
    std::cout << "  class " << k + 1 << ": " << rep.class_counts[k] << "\n";
  return 0;
}

int cmd_import(const std::string& dir, const std::string& data) {
  std::optional<Dataset> ds;
  if (!data.empty()) ds = load_dataset(data);
  const EmbeddingIndex idx = import_embeddings(dir, ds ? &*ds : nullptr);
  std::cout << "archives: " << idx.ids.size() << "  layers: " << idx.config.layer_count
            << "  width: " << idx.config.embed_dim << "  grid: " << idx.config.grid_size() << "\n";
  return 0;
}

int cmd_export(const std::string& data, const std::string& out, const std::string& config_path) {
  const RunConfig cfg = parse_run_config(load_config_json(config_path));
  const Dataset ds = load_dataset(data);
  FeatureSource<float> src = FeatureSource<float>::toy(cfg.model.encoder, cfg.encoder_seed);
  std::cout << "exported: " << export_embeddings(ds, src, out) << "\n";
  return 0;
}

int cmd_params(const std::string& config_path) {
  const RunConfig cfg = parse_run_config(load_config_json(config_path));
  cfg.validate();
  std::cout << trainable_parameter_count(cfg.model) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"autoprom: frozen-encoder detector with box prompts"};
  app.require_subcommand(1);

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "train the decoder and head");
  train_cmd->add_option("--config", ta.config, "run config JSON");
  train_cmd->add_option("--set", ta.sets, "override a config key, e.g. model.decoder.channels=32");
  train_cmd->add_option("--data-root", ta.data_root);
  train_cmd->add_option("--val-root", ta.val_root);
  train_cmd->add_option("--test-root", ta.test_root);
  train_cmd->add_option("--out", ta.out_dir, "run directory");
  train_cmd->add_option("--embeddings", ta.embeddings, "imported embedding directory");
  train_cmd->add_option("--epochs", ta.epochs);
  train_cmd->add_option("--batch-size", ta.batch_size);
  train_cmd->add_option("--lr", ta.lr);
  train_cmd->add_option("--seed", ta.seed);
  train_cmd->add_flag("--no-augment", ta.no_augment);
  train_cmd->add_flag("--quiet", ta.quiet, "no per-epoch log");

  EvaluateArgs ea;
  auto* eval_cmd = app.add_subcommand("evaluate", "score a checkpoint on a dataset");
  eval_cmd->add_option("--ckpt", ea.ckpt, "checkpoint directory");
  eval_cmd->add_option("--data", ea.data, "dataset root")->required();
  eval_cmd->add_option("--mode", ea.mode)->check(CLI::IsMember({"bbox", "pq", "full"}));
  eval_cmd->add_option("--out", ea.out, "write report.json, confusion.csv and overlays here");
  eval_cmd->add_option("--use-bridge", ea.bridge, "external mask decoder command");
  eval_cmd->add_option("--embeddings", ea.embeddings, "imported embedding directory");
  eval_cmd->add_option("--mask-shape", ea.mask_shape)->check(CLI::IsMember({"ellipse", "rectangle"}));
  eval_cmd->add_option("--score-threshold", ea.score_threshold);
  eval_cmd->add_option("--nms-iou", ea.nms_iou);
  eval_cmd->add_option("--match-radius", ea.match_radius);
  eval_cmd->add_option("--overlays", ea.overlays);
  eval_cmd->add_flag("--oracle", ea.oracle, "score the ground truth against itself");

  DetectArgs da;
  auto* detect_cmd = app.add_subcommand("detect", "detect on one image and write box prompts");
  detect_cmd->add_option("--ckpt", da.ckpt)->required();
  detect_cmd->add_option("--image", da.image)->required();
  detect_cmd->add_option("--out", da.out);
  detect_cmd->add_option("--id", da.id, "image id (default: file stem)");
  detect_cmd->add_option("--use-bridge", da.bridge, "external mask decoder command");
  detect_cmd->add_option("--embeddings", da.embeddings);
  detect_cmd->add_option("--mask-shape", da.mask_shape)->check(CLI::IsMember({"ellipse", "rectangle"}));
  detect_cmd->add_option("--score-threshold", da.score_threshold);
  detect_cmd->add_option("--nms-iou", da.nms_iou);
  detect_cmd->add_flag("--emit-masks", da.emit_masks);

  std::string prompt_path;
  auto* prompts_cmd = app.add_subcommand("prompts", "check a prompt file against the schema");
  prompts_cmd->add_option("--check", prompt_path)->required();

  SynthConfig sc;
  std::string synth_out, synth_config;
  auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic blob dataset");
  synth_cmd->add_option("--seed", sc.seed);
  synth_cmd->add_option("--n", sc.count);
  synth_cmd->add_option("--size", sc.image_size);
  synth_cmd->add_option("--classes", sc.num_classes);
  synth_cmd->add_option("--config", synth_config, "generator JSON (flags win)");
  synth_cmd->add_option("--out", synth_out)->required();

  std::string import_dir, import_data;
  auto* import_cmd = app.add_subcommand("import-embeddings", "validate and index an embedding directory");
  import_cmd->add_option("--dir", import_dir)->required();
  import_cmd->add_option("--data", import_data, "dataset whose samples must all be covered");

  std::string export_data, export_out, export_config;
  auto* export_cmd = app.add_subcommand("export-embeddings", "write toy-encoder embeddings for a dataset");
  export_cmd->add_option("--data", export_data)->required();
  export_cmd->add_option("--out", export_out)->required();
  export_cmd->add_option("--config", export_config, "run config naming the encoder");

  std::string params_config;
  auto* params_cmd = app.add_subcommand("params", "print the trainable parameter count");
  params_cmd->add_option("--config", params_config);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitValidation;
  }

  try {
    if (*train_cmd) return cmd_train(ta);
    if (*eval_cmd) return cmd_evaluate(ea);
    if (*detect_cmd) return cmd_detect(da);
    if (*prompts_cmd) return cmd_prompts(prompt_path);
    if (*synth_cmd) return cmd_synth(sc, synth_config, synth_out);
    if (*import_cmd) return cmd_import(import_dir, import_data);
    if (*export_cmd) return cmd_export(export_data, export_out, export_config);
    if (*params_cmd) return cmd_params(params_config);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const RuntimeAbort& e) {
    std::cerr << "aborted: " << e.what() << "\n";
    return kExitAbort;
  } catch (const std::exception& e) {
    std::cerr << "aborted: " << e.what() << "\n";
    return kExitAbort;
  }
  return kExitValidation;
}
