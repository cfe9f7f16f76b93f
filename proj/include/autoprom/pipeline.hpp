#pragma once

// End-to-end plumbing: frozen feature sources, the training loop, inference,
// mask providers (stand-in or external bridge), evaluation and overlays.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <memory>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "autoprom/adam.hpp"
#include "autoprom/config.hpp"
#include "autoprom/data.hpp"
#include "autoprom/encoder.hpp"
#include "autoprom/image_io.hpp"
#include "autoprom/metrics.hpp"
#include "autoprom/model.hpp"
#include "autoprom/postprocess.hpp"
#include "autoprom/scheduler.hpp"

namespace autoprom {

namespace fs = std::filesystem;

// ---------------------------------------------------------- feature sources

/// FNV-1a over every regular file below dir, in path order.
inline std::uint64_t directory_fingerprint(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  std::uint64_t h = 1469598103934665603ull;
  auto feed = [&](const char* p, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
      h ^= static_cast<unsigned char>(p[i]);
      h *= 1099511628211ull;
    }
  };
  std::vector<char> buf(1 << 16);
  for (const auto& f : files) {
    const std::string rel = fs::relative(f, dir).generic_string();
    feed(rel.data(), rel.size());
    std::ifstream is(f, std::ios::binary);
    while (is) {
      is.read(buf.data(), static_cast<std::streamsize>(buf.size()));
      feed(buf.data(), static_cast<std::size_t>(is.gcount()));
    }
  }
  return h;
}

/// Frozen per-layer features for a batch of samples: either the seeded toy
/// encoder run on the (possibly augmented) pixels, or embeddings imported
/// from dir/<sample id>/.
template <typename T>
class FeatureSource {
 public:
  static FeatureSource toy(const EncoderConfig& config, std::uint64_t seed) {
    FeatureSource s;
    s.config_ = config;
    s.seed_ = seed;
    s.toy_ = std::make_unique<ToyEncoder<T>>(config, seed);
    return s;
  }

  static FeatureSource archive(const fs::path& dir, const EncoderConfig& config) {
    if (!fs::is_directory(dir)) throw ValidationError("embedding directory " + dir.string() + " does not exist");
    FeatureSource s;
    s.config_ = config;
    s.dir_ = dir;
    return s;
  }

  bool imported() const { return !toy_; }
  const EncoderConfig& config() const { return config_; }
  std::uint64_t seed() const { return seed_; }
  const fs::path& directory() const { return dir_; }
  ToyEncoder<T>* toy_encoder() { return toy_.get(); }

  /// L maps of [N, D, S, S].
  std::vector<Tensor<T>> layers(std::span<const Sample* const> batch) {
    if (toy_) {
      std::vector<Tensor<T>> images;
      for (const Sample* s : batch) {
        if constexpr (std::is_same_v<T, float>) images.push_back(s->image);
        else images.push_back(s->image.template cast<T>());
      }
      return toy_->forward_batch(stack<T>(images));
    }
    std::vector<LayerFeatures<T>> feats;
    for (const Sample* s : batch) {
      LayerFeatures<T> f = load_embeddings<T>(dir_ / s->id);
      if (f.config.layer_count != config_.layer_count || f.config.embed_dim != config_.embed_dim ||
          f.config.grid_size() != config_.grid_size())
        throw ValidationError("embedding archive for " + s->id + " does not match the encoder configuration");
      feats.push_back(std::move(f));
    }
    std::vector<const LayerFeatures<T>*> ptrs;
    for (const auto& f : feats) ptrs.push_back(&f);
    return batch_features<T>(ptrs);
  }

  /// Fingerprint of the frozen state: parameter bytes for the toy encoder,
  /// archive file bytes otherwise.
  std::uint64_t fingerprint() {
    if (toy_) return autoprom::fingerprint(toy_->parameters());
    return directory_fingerprint(dir_);
  }

  nlohmann::json describe() {
    if (toy_) return {{"source", "toy"}, {"seed", seed_}, {"fingerprint", fingerprint()}};
    return {{"source", "archive"}, {"dir", dir_.string()}, {"fingerprint", fingerprint()}};
  }

 private:
  FeatureSource() = default;
  EncoderConfig config_;
  std::uint64_t seed_ = 0;
  std::unique_ptr<ToyEncoder<T>> toy_;
  fs::path dir_;
};

/// Writes one embedding archive per sample using the toy encoder (the same
/// layout an external exporter produces).
inline std::size_t export_embeddings(const Dataset& ds, FeatureSource<float>& source, const fs::path& out) {
  ToyEncoder<float>* enc = source.toy_encoder();
  if (!enc) throw ValidationError("export_embeddings needs the toy encoder");
  for (const auto& s : ds.samples) save_embeddings(out / s.id, enc->forward(s.image), {{"image_id", s.id}});
  return ds.samples.size();
}

struct EmbeddingIndex {
  EncoderConfig config;
  std::vector<std::string> ids;
};

/// Validates every archive under dir (one subdirectory per image) and
/// writes dir/index.json.
inline EmbeddingIndex import_embeddings(const fs::path& dir, const Dataset* dataset = nullptr) {
  if (!fs::is_directory(dir)) throw ValidationError("embedding directory " + dir.string() + " does not exist");
  EmbeddingIndex idx;
  std::vector<fs::path> subdirs;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory()) subdirs.push_back(e.path());
  std::sort(subdirs.begin(), subdirs.end());
  if (subdirs.empty()) throw ValidationError("embedding directory " + dir.string() + " holds no archives");
  for (const auto& sub : subdirs) {
    const LayerFeatures<float> f = load_embeddings<float>(sub);
    if (idx.ids.empty()) {
      idx.config = f.config;
    } else if (f.config.layer_count != idx.config.layer_count || f.config.embed_dim != idx.config.embed_dim ||
               f.config.grid_size() != idx.config.grid_size()) {
      throw ValidationError("archive " + sub.filename().string() + " disagrees with " + idx.ids.front() +
                            " on layer count, width or grid size");
    }
    idx.ids.push_back(sub.filename().string());
  }
  if (dataset)
    for (const auto& s : dataset->samples)
      if (!std::binary_search(idx.ids.begin(), idx.ids.end(), s.id))
        throw ValidationError("no embedding archive for dataset sample " + s.id);
  std::ofstream os(dir / "index.json");
  os << nlohmann::json{{"encoder", idx.config}, {"ids", idx.ids}}.dump(2) << '\n';
  if (!os) throw RuntimeAbort("cannot write " + (dir / "index.json").string());
  return idx;
}

// ---------------------------------------------------------------- inference

template <typename T>
EncoderBlocks<T> encoder_blocks(FeatureSource<T>& source, std::span<const Sample* const> batch) {
  return gather_blocks(source.layers(batch), source.config());
}

/// Thresholded, NMS-filtered detections for each sample.
template <typename T>
std::vector<std::vector<Detection>> predict(Detector<T>& model, FeatureSource<T>& source,
                                            std::span<const Sample* const> samples, const DecodeOptions& decode,
                                            double nms_iou, std::size_t batch_size = 8) {
  std::vector<std::vector<Detection>> out;
  const std::size_t k = model.config().num_classes;
  for (std::size_t start = 0; start < samples.size(); start += batch_size) {
    const auto batch = samples.subspan(start, std::min(batch_size, samples.size() - start));
    const HeadOutput<T> head = model.forward(encoder_blocks(source, batch), kInference);
    const std::size_t a = head.class_logits.dim(1);
    for (std::size_t b = 0; b < batch.size(); ++b) {
      std::span<const T> logits(head.class_logits.data() + b * a * k, a * k);
      std::span<const T> deltas(head.box_deltas.data() + b * a * 4, a * 4);
      const auto w = static_cast<double>(batch[b]->width()), h = static_cast<double>(batch[b]->height());
      const std::vector<Detection> raw = decode_and_filter(logits, deltas, model.anchors(), k, w, h, decode);
      out.push_back(nms(raw, nms_iou));
    }
  }
  return out;
}

/// Where per-box masks come from: the built-in stand-in, or an external
/// command run as `<cmd> decode-masks --prompts P --image I --out O` that
/// writes an [N, H, W] TSR1 tensor.
struct MaskProvider {
  StubMaskShape shape = StubMaskShape::kEllipse;
  std::string bridge_command;
  fs::path scratch = fs::temp_directory_path() / "autoprom-bridge";
};

inline std::string shell_quote(const std::string& s) {
  std::string q = "'";
  for (char c : s) q += c == '\'' ? std::string("'\\''") : std::string(1, c);
  return q + "'";
}

inline Tensor<float> run_bridge(const std::string& command, const fs::path& prompts, const fs::path& image,
                                const fs::path& out) {
  const std::string cmd = command + " decode-masks --prompts " + shell_quote(prompts.string()) + " --image " +
                          shell_quote(image.string()) + " --out " + shell_quote(out.string());
  const int rc = std::system(cmd.c_str());
  if (rc != 0) throw RuntimeAbort("mask bridge failed (status " + std::to_string(rc) + "): " + cmd);
  return load_tensor<float>(out);
}

/// Prompts -> per-box masks -> one instance map (overlaps go to the higher score).
inline InstanceSegmentation segment_instances(const MaskProvider& provider, const Sample& sample,
                                              const std::vector<Detection>& dets,
                                              const fs::path& image_path = {}) {
  const std::size_t h = sample.height(), w = sample.width();
  Tensor<float> masks;
  if (provider.bridge_command.empty()) {
    masks = stub_mask_decoder(dets, h, w, provider.shape);
  } else {
    fs::create_directories(provider.scratch);
    const fs::path prompts = provider.scratch / (sample.id + ".prompts.json");
    const PromptFile pf = emit_prompts(dets, sample.id, prompts, static_cast<double>(w), static_cast<double>(h));
    fs::path img = image_path;
    if (img.empty()) {
      img = provider.scratch / (sample.id + ".png");
      write_png(img, sample.image);
    }
    masks = run_bridge(provider.bridge_command, prompts, img, provider.scratch / (sample.id + ".masks.tsr"));
    if (masks.rank() != 3 || masks.dim(0) != pf.boxes.size() || masks.dim(1) != h || masks.dim(2) != w)
      throw ValidationError("mask bridge returned " + shape_str(masks.shape()) + ", expected [" +
                            std::to_string(pf.boxes.size()) + "," + std::to_string(h) + "," + std::to_string(w) + "]");
    std::vector<InstanceInfo> info;
    for (const auto& d : pf.boxes) info.push_back({d.class_id, d.score});
    return merge_masks(masks, info);
  }
  std::vector<InstanceInfo> info;
  for (const auto& d : dets) info.push_back({d.class_id, d.score});
  return merge_masks(masks, info);
}

// ---------------------------------------------------------------- overlays

/// Truth outlines in green, predicted outlines in the predicted class colour.
inline Tensor<float> render_overlay(const Tensor<float>& image, const InstanceSegmentation* pred,
                                    const InstanceSegmentation* truth) {
  Tensor<float> out = image;
  const std::size_t h = image.dim(1), w = image.dim(2);
  auto outline = [&](const InstanceSegmentation& s, auto colour_of) {
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t c = 0; c < w; ++c) {
        const std::int32_t id = s.at(r, c);
        if (id <= 0) continue;
        const bool edge = r == 0 || c == 0 || r + 1 == h || c + 1 == w || s.at(r - 1, c) != id ||
                          s.at(r + 1, c) != id || s.at(r, c - 1) != id || s.at(r, c + 1) != id;
        if (!edge) continue;
        const Rgb col = colour_of(s.instances[static_cast<std::size_t>(id - 1)].class_id);
        out[(0 * h + r) * w + c] = static_cast<float>(col.r);
        out[(1 * h + r) * w + c] = static_cast<float>(col.g);
        out[(2 * h + r) * w + c] = static_cast<float>(col.b);
      }
  };
  if (truth) outline(*truth, [](int) { return Rgb{0.0, 0.8, 0.0}; });
  if (pred)
    outline(*pred, [](int k) {
      static const Rgb palette[] = {{1.0, 0.9, 0.0}, {1.0, 0.2, 0.2}, {0.0, 0.9, 1.0}, {1.0, 0.5, 0.0}};
      return palette[static_cast<std::size_t>(k - 1) % 4];
    });
  return out;
}

// ---------------------------------------------------------------- evaluation

struct EvaluateOptions {
  EvalMode mode = EvalMode::kFull;
  bool oracle = false;  // score the ground truth against itself
  MaskProvider masks;
  DecodeOptions decode;
  double nms_iou = 0.5;
  EvalOptions eval;
  fs::path out_dir;  // report.json, confusion.csv, overlays/ (empty = none)
  std::size_t overlays = 4;
};

template <typename T>
MetricsReport evaluate(Detector<T>* model, FeatureSource<T>* source, const Dataset& data, const EvaluateOptions& opt) {
  Evaluator ev(data.manifest.num_classes, opt.eval, data.manifest.class_names);
  std::vector<const Sample*> ptrs;
  for (const auto& s : data.samples) ptrs.push_back(&s);
  std::vector<std::vector<Detection>> dets;
  if (!opt.oracle) {
    if (!model || !source) throw ValidationError("evaluate: a model and feature source are required");
    dets = predict(*model, *source, std::span<const Sample* const>(ptrs), opt.decode, opt.nms_iou);
  }
  if (!opt.out_dir.empty() && opt.overlays > 0) fs::create_directories(opt.out_dir / "overlays");
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    const Sample& s = data.samples[i];
    ImagePrediction pred;
    if (opt.oracle) {
      for (const auto& b : s.boxes()) pred.detections.push_back({b.box, b.class_id, 1.0});
      pred.segmentation = s.truth;
    } else {
      pred.detections = dets[i];
      if (opt.mode != EvalMode::kBbox) pred.segmentation = segment_instances(opt.masks, s, pred.detections);
    }
    ev.add(s, pred);
    if (!opt.out_dir.empty() && i < opt.overlays)
      write_png(opt.out_dir / "overlays" / (s.id + ".png"),
                render_overlay(s.image, pred.segmentation ? &*pred.segmentation : nullptr, &s.truth));
  }
  MetricsReport report = ev.report(opt.mode);
  if (!opt.out_dir.empty()) {
    fs::create_directories(opt.out_dir);
    write_report(opt.out_dir / "report.json", opt.out_dir / "confusion.csv", report);
  }
  return report;
}

// ---------------------------------------------------------------- training

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0;
  double train_focal = 0;
  double train_box = 0;
  double val_loss = 0;
  double seconds = 0;
  double train_loss() const { return train_focal + train_box; }
};

struct TrainSummary {
  fs::path run_dir;
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_val = 0;
  std::uint64_t encoder_before = 0;
  std::uint64_t encoder_after = 0;
  std::size_t trainable = 0;
  std::optional<MetricsReport> test_report;
};

/// Deterministic train/validation split of one dataset.
inline std::pair<Dataset, Dataset> hold_out(const Dataset& ds, double fraction, std::uint64_t seed) {
  std::vector<std::size_t> order(ds.samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(mix_seed(seed ^ 0x5eedull));
  std::shuffle(order.begin(), order.end(), rng);
  auto n_val = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(order.size())));
  n_val = std::clamp<std::size_t>(n_val, 1, order.size() > 2 ? order.size() - 2 : 0);
  std::vector<std::size_t> val(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());
  std::sort(val.begin(), val.end());
  std::sort(train.begin(), train.end());
  Dataset a{ds.manifest, {}}, b{ds.manifest, {}};
  for (std::size_t i : train) a.samples.push_back(ds.samples[i]);
  for (std::size_t i : val) b.samples.push_back(ds.samples[i]);
  return {std::move(a), std::move(b)};
}

template <typename T>
double validation_loss(Detector<T>& model, FeatureSource<T>& source, const Dataset& val, const RunConfig& cfg) {
  double total = 0.0;
  for (std::size_t start = 0; start < val.samples.size(); start += cfg.batch_size) {
    std::vector<const Sample*> batch;
    std::vector<BoxTargets> targets;
    for (std::size_t i = start; i < std::min(val.samples.size(), start + cfg.batch_size); ++i) {
      batch.push_back(&val.samples[i]);
      const auto gt = val.samples[i].boxes();
      targets.push_back(match_anchors(model.anchors().boxes, gt, cfg.matching));
    }
    const HeadOutput<T> out = model.forward(encoder_blocks(source, std::span<const Sample* const>(batch)), kInference);
    total += model.loss(out, targets, cfg.focal, nullptr).total() * static_cast<double>(batch.size());
  }
  return total / static_cast<double>(std::max<std::size_t>(1, val.samples.size()));
}

inline void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path);
  os << text;
  if (!os) throw RuntimeAbort("cannot write " + path.string());
}

/// Runs the whole protocol and fills the run directory: config.json,
/// curves.csv, checkpoints/{best,last}, and (with a test set) report.json,
/// confusion.csv, overlays/.
template <typename T = float>
TrainSummary train(const RunConfig& cfg, const Dataset& train_set, const Dataset& val_set, const Dataset* test_set,
                   std::ostream* log = nullptr) {
  cfg.validate();
  if (train_set.samples.size() < 2) throw ValidationError("training set needs at least 2 samples");
  if (val_set.samples.empty()) throw ValidationError("validation set is empty");
  if (static_cast<std::size_t>(train_set.manifest.num_classes) != cfg.model.num_classes)
    throw ValidationError("dataset has " + std::to_string(train_set.manifest.num_classes) + " classes, model expects " +
                          std::to_string(cfg.model.num_classes));
  for (const auto& s : train_set.samples)
    if (s.width() != cfg.model.encoder.image_size || s.height() != cfg.model.encoder.image_size)
      throw ValidationError("sample " + s.id + " is " + std::to_string(s.width()) + "x" + std::to_string(s.height()) +
                            ", model expects " + std::to_string(cfg.model.encoder.image_size));

  TrainSummary summary;
  summary.run_dir = cfg.out_dir;
  fs::create_directories(summary.run_dir / "checkpoints");
  write_text(summary.run_dir / "config.json", nlohmann::json(cfg).dump(2) + "\n");

  FeatureSource<T> source = cfg.embeddings_dir.empty()
                                ? FeatureSource<T>::toy(cfg.model.encoder, cfg.encoder_seed)
                                : FeatureSource<T>::archive(cfg.embeddings_dir, cfg.model.encoder);
  const bool augment = cfg.augment && !source.imported();
  summary.encoder_before = source.fingerprint();

  Detector<T> model(cfg.model, cfg.seed);
  summary.trainable = model.trainable_count();
  Adam<T> adam(model.parameters(), AdamOptions{cfg.lr});
  PlateauScheduler scheduler(cfg.lr, cfg.plateau);
  const nlohmann::json encoder_info = source.describe();
  if (log)
    *log << "trainable parameters: " << summary.trainable << "  anchors: " << model.anchors().size()
         << "  train/val: " << train_set.samples.size() << "/" << val_set.samples.size() << "\n";

  std::string curves = "epoch,lr,train_loss,train_focal,train_box,val_loss,seconds\n";
  double best_val = std::numeric_limits<double>::infinity();
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = adam.lr();
    std::vector<std::size_t> order(train_set.samples.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 shuffle_rng(mix_seed(cfg.seed ^ (static_cast<std::uint64_t>(epoch) << 40)));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    std::size_t batches = 0;
    for (std::size_t start = 0; start + 2 <= order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<Sample> local;
      local.reserve(end - start);
      for (std::size_t i = start; i < end; ++i) {
        const Sample& s = train_set.samples[order[i]];
        const std::uint64_t seed = cfg.seed ^ (static_cast<std::uint64_t>(epoch) << 32) ^ order[i];
        local.push_back(augment ? autoprom::augment(s, cfg.augmentation, seed) : s);
      }
      std::vector<const Sample*> batch;
      std::vector<BoxTargets> targets;
      for (const auto& s : local) {
        batch.push_back(&s);
        const auto gt = s.boxes();
        targets.push_back(match_anchors(model.anchors().boxes, gt, cfg.matching));
      }
      HeadOutput<T> out = model.forward(encoder_blocks(source, std::span<const Sample* const>(batch)), kTraining);
      HeadOutput<T> grad;
      const LossBreakdown l = model.loss(out, targets, cfg.focal, &grad);
      ++step;
      if (!std::isfinite(l.total())) {
        model.clear_saved();
        throw RuntimeAbort("non-finite loss at epoch " + std::to_string(epoch) + " step " + std::to_string(step));
      }
      adam.zero_grad();
      model.backward(grad);
      adam.step();
      rec.train_focal += l.focal;
      rec.train_box += l.box;
      ++batches;
    }
    rec.train_focal /= static_cast<double>(std::max<std::size_t>(1, batches));
    rec.train_box /= static_cast<double>(std::max<std::size_t>(1, batches));
    rec.val_loss = validation_loss(model, source, val_set, cfg);
    if (!std::isfinite(rec.val_loss))
      throw RuntimeAbort("non-finite validation loss at epoch " + std::to_string(epoch));
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    summary.epochs.push_back(rec);

    const nlohmann::json extra = {{"epoch", epoch}, {"step", step}, {"val_loss", rec.val_loss}, {"encoder", encoder_info}};
    if (rec.val_loss < best_val) {
      best_val = rec.val_loss;
      summary.best_epoch = epoch;
      save_checkpoint(summary.run_dir / "checkpoints" / "best", model, extra);
    }
    save_checkpoint(summary.run_dir / "checkpoints" / "last", model, extra);
    scheduler.step(rec.val_loss);
    adam.set_lr(scheduler.lr());

    std::ostringstream line;
    line << std::setprecision(9) << epoch << ',' << rec.lr << ',' << rec.train_loss() << ',' << rec.train_focal << ','
         << rec.train_box << ',' << rec.val_loss << ',' << std::setprecision(4) << rec.seconds << '\n';
    curves += line.str();
    write_text(summary.run_dir / "curves.csv", curves);
    if (log) {
      std::ostringstream msg;
      msg << "epoch " << epoch << "/" << cfg.epochs << "  lr " << rec.lr << "  train " << rec.train_loss()
          << " (focal " << rec.train_focal << ", box " << rec.train_box << ")  val " << rec.val_loss << "  "
          << std::fixed << std::setprecision(1) << rec.seconds << "s\n";
      *log << msg.str() << std::flush;
    }
  }
  summary.best_val = best_val;

  summary.encoder_after = source.fingerprint();
  if (summary.encoder_after != summary.encoder_before)
    throw RuntimeAbort("frozen encoder changed during training (fingerprint mismatch)");

  if (test_set) {
    load_checkpoint(summary.run_dir / "checkpoints" / "best", model);
    EvaluateOptions eo;
    eo.masks.shape = cfg.mask_shape;
    eo.decode = cfg.decode;
    eo.nms_iou = cfg.nms_iou;
    eo.eval = cfg.eval;
    eo.out_dir = summary.run_dir;
    eo.overlays = cfg.overlays;
    summary.test_report = evaluate(&model, &source, *test_set, eo);
  }
  return summary;
}

/// Loads the datasets named by the config and trains.
template <typename T = float>
TrainSummary train(const RunConfig& cfg, std::ostream* log = nullptr) {
  if (cfg.data_root.empty()) throw ValidationError("config: data_root is required");
  const Dataset all = load_dataset(cfg.data_root);
  Dataset train_set, val_set;
  if (cfg.val_root.empty()) {
    std::tie(train_set, val_set) = hold_out(all, cfg.val_fraction, cfg.seed);
  } else {
    train_set = all;
    val_set = load_dataset(cfg.val_root);
  }
  std::optional<Dataset> test;
  if (!cfg.test_root.empty()) test = load_dataset(cfg.test_root);
  return train<T>(cfg, train_set, val_set, test ? &*test : nullptr, log);
}

/// Rebuilds the detector and its feature source from a checkpoint. An
/// embedding directory overrides the recorded source.
struct LoadedModel {
  std::unique_ptr<Detector<float>> model;
  std::unique_ptr<FeatureSource<float>> source;
  nlohmann::json manifest;
};

inline LoadedModel load_model(const fs::path& ckpt, const std::string& embeddings_dir = {}) {
  LoadedModel lm;
  lm.manifest = read_checkpoint_manifest(ckpt);
  const DetectorConfig cfg = lm.manifest.at("config").get<DetectorConfig>();
  lm.model = std::make_unique<Detector<float>>(cfg, 0);
  load_checkpoint(ckpt, *lm.model);
  const nlohmann::json enc = lm.manifest.value("encoder", nlohmann::json::object());
  if (!embeddings_dir.empty()) {
    lm.source = std::make_unique<FeatureSource<float>>(FeatureSource<float>::archive(embeddings_dir, cfg.encoder));
  } else if (enc.value("source", "toy") == "toy") {
    lm.source = std::make_unique<FeatureSource<float>>(
        FeatureSource<float>::toy(cfg.encoder, enc.value("seed", std::uint64_t{7})));
    if (enc.contains("fingerprint") && enc.at("fingerprint").get<std::uint64_t>() != lm.source->fingerprint())
      throw ValidationError("toy encoder rebuilt from the checkpoint does not match its recorded fingerprint");
  } else {
    lm.source = std::make_unique<FeatureSource<float>>(
        FeatureSource<float>::archive(enc.at("dir").get<std::string>(), cfg.encoder));
  }
  return lm;
}

}  // namespace autoprom
