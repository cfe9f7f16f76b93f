#pragma once

// Samples, the on-disk dataset layout, the synthetic blob generator,
// augmentations and fold splitting.
//
// Layout: root/images/<id>.png, root/instances/<id>.tsr ([H, W] ids),
// root/classes/<id>.json ({"instances": [{"id": 1, "class": 2}, ...]}),
// root/manifest.json ({"num_classes": K, "class_names": [...]}).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Core>

#include <nlohmann/json.hpp>

#include "autoprom/encoder.hpp"
#include "autoprom/error.hpp"
#include "autoprom/image_io.hpp"
#include "autoprom/losses.hpp"
#include "autoprom/segmentation.hpp"
#include "autoprom/tensor.hpp"
#include "autoprom/tensor_io.hpp"

namespace autoprom {

struct Sample {
  std::string id;
  Tensor<float> image;  // [3, H, W]
  InstanceSegmentation truth;
  std::vector<InstanceSummary> instances;

  std::size_t height() const { return truth.height; }
  std::size_t width() const { return truth.width; }

  std::vector<GroundTruthBox> boxes() const {
    std::vector<GroundTruthBox> out;
    for (const auto& s : instances) out.push_back({s.box, s.class_id});
    return out;
  }
};

/// Validates image/map agreement and derives per-instance geometry.
inline Sample make_sample(std::string id, Tensor<float> image, InstanceSegmentation truth, int num_classes = 0) {
  require_rank(image, 3, "sample image");
  if (image.dim(0) != 3) throw ShapeError("sample " + id + ": image must have 3 channels");
  if (image.dim(1) != truth.height || image.dim(2) != truth.width)
    throw ShapeError("sample " + id + ": image is " + shape_str(image.shape()) + " but instance map is [" +
                     std::to_string(truth.height) + "," + std::to_string(truth.width) + "]");
  truth.validate(num_classes);
  Sample s{std::move(id), std::move(image), std::move(truth), {}};
  s.instances = summarize(s.truth);
  return s;
}

struct DatasetManifest {
  int num_classes = 1;
  std::vector<std::string> class_names;
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<Sample> samples;
};

namespace detail {

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  std::ofstream os(path);
  os << j.dump(2) << '\n';
  if (!os) throw RuntimeAbort("cannot write " + path.string());
}

}  // namespace detail

inline void save_sample(const std::filesystem::path& root, const Sample& s) {
  write_png(root / "images" / (s.id + ".png"), s.image);
  save_tensor(root / "instances" / (s.id + ".tsr"), s.truth.id_tensor());
  nlohmann::json list = nlohmann::json::array();
  for (std::size_t i = 0; i < s.truth.instances.size(); ++i)
    list.push_back({{"id", i + 1}, {"class", s.truth.instances[i].class_id}});
  detail::write_json(root / "classes" / (s.id + ".json"), {{"instances", list}});
}

inline void save_dataset(const std::filesystem::path& root, const Dataset& ds) {
  for (const char* sub : {"images", "instances", "classes"}) std::filesystem::create_directories(root / sub);
  detail::write_json(root / "manifest.json", {{"num_classes", ds.manifest.num_classes},
                                              {"class_names", ds.manifest.class_names},
                                              {"count", ds.samples.size()}});
  for (const auto& s : ds.samples) save_sample(root, s);
}

inline DatasetManifest load_manifest(const std::filesystem::path& root) {
  const nlohmann::json j = read_json_file(root / "manifest.json");
  DatasetManifest m;
  try {
    m.num_classes = j.at("num_classes").get<int>();
    m.class_names = j.value("class_names", std::vector<std::string>{});
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError((root / "manifest.json").string() + ": " + e.what());
  }
  if (m.num_classes < 1) throw ValidationError("dataset manifest: num_classes must be >= 1");
  for (int k = static_cast<int>(m.class_names.size()); k < m.num_classes; ++k)
    m.class_names.push_back("class" + std::to_string(k + 1));
  return m;
}

inline Sample load_sample(const std::filesystem::path& root, const std::string& id, int num_classes) {
  const auto image_path = root / "images" / (id + ".png");
  const auto map_path = root / "instances" / (id + ".tsr");
  const auto class_path = root / "classes" / (id + ".json");
  Tensor<float> image = read_png(image_path);
  Tensor<float> map = load_tensor<float>(map_path);
  if (map.rank() != 2 || map.dim(0) != image.dim(1) || map.dim(1) != image.dim(2))
    throw ShapeError("size mismatch: " + image_path.string() + " is " + std::to_string(image.dim(1)) + "x" +
                     std::to_string(image.dim(2)) + " but " + map_path.string() + " is " + shape_str(map.shape()));
  InstanceSegmentation seg(map.dim(0), map.dim(1));
  seg.ids = ids_from_tensor(map);
  const nlohmann::json cj = read_json_file(class_path);
  try {
    const auto& list = cj.at("instances");
    seg.instances.resize(list.size());
    std::vector<char> seen(list.size(), 0);
    for (const auto& e : list) {
      const auto iid = e.at("id").get<std::size_t>();
      if (iid < 1 || iid > list.size() || seen[iid - 1])
        throw ValidationError(class_path.string() + ": instance ids must be 1.." + std::to_string(list.size()) +
                              " without repeats");
      seen[iid - 1] = 1;
      seg.instances[iid - 1].class_id = e.at("class").get<int>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(class_path.string() + ": " + e.what());
  }
  try {
    return make_sample(id, std::move(image), std::move(seg), num_classes);
  } catch (const ValidationError& e) {
    throw ValidationError(id + " (" + map_path.string() + ", " + class_path.string() + "): " + e.what());
  }
}

/// Samples in file-name order.
inline Dataset load_dataset(const std::filesystem::path& root) {
  if (!std::filesystem::is_directory(root / "images"))
    throw ValidationError("dataset " + root.string() + " has no images/ directory");
  Dataset ds;
  ds.manifest = load_manifest(root);
  std::vector<std::string> ids;
  for (const auto& e : std::filesystem::directory_iterator(root / "images"))
    if (e.path().extension() == ".png") ids.push_back(e.path().stem().string());
  std::sort(ids.begin(), ids.end());
  for (const auto& id : ids) ds.samples.push_back(load_sample(root, id, ds.manifest.num_classes));
  return ds;
}

// ---------------------------------------------------------------- synthetic

struct Rgb {
  double r = 0, g = 0, b = 0;
};

struct SynthConfig {
  std::uint64_t seed = 0;
  std::size_t count = 100;
  std::size_t image_size = 256;
  int num_classes = 2;
  std::size_t min_blobs = 3;
  std::size_t max_blobs = 12;
  double min_radius = 10;
  double max_radius = 20;
  double max_rotation = 0.35;  // radians either way
  std::vector<double> class_weights;  // empty -> uniform
  std::vector<Rgb> class_colors;      // empty -> built-in palette
  Rgb background{0.93, 0.84, 0.88};
  double texture_noise = 0.04;
  double min_gap = 2.0;  // pixels between blob extents
  std::size_t placement_attempts = 60;

  Rgb color(int class_id) const {
    static const std::array<Rgb, 6> palette{Rgb{0.50, 0.15, 0.55}, Rgb{0.15, 0.25, 0.70}, Rgb{0.75, 0.35, 0.15},
                                            Rgb{0.20, 0.55, 0.25}, Rgb{0.40, 0.40, 0.40}, Rgb{0.70, 0.60, 0.10}};
    const auto k = static_cast<std::size_t>(class_id - 1);
    if (k < class_colors.size()) return class_colors[k];
    if (k < palette.size()) return palette[k];
    const double hue = std::fmod(0.618034 * static_cast<double>(k), 1.0) * 6.0;
    const double f = hue - std::floor(hue);
    const std::array<Rgb, 6> wheel{Rgb{1, f, 0}, Rgb{1 - f, 1, 0}, Rgb{0, 1, f},
                                   Rgb{0, 1 - f, 1}, Rgb{f, 0, 1}, Rgb{1, 0, 1 - f}};
    const Rgb w = wheel[static_cast<std::size_t>(hue) % 6];
    return {0.15 + 0.6 * w.r, 0.15 + 0.6 * w.g, 0.15 + 0.6 * w.b};
  }

  void validate() const {
    if (num_classes < 1) throw ValidationError("synth: need at least one class");
    if (image_size < 8) throw ValidationError("synth: image size must be at least 8");
    if (min_blobs > max_blobs) throw ValidationError("synth: min_blobs exceeds max_blobs");
    if (!(min_radius >= 1.0) || min_radius > max_radius) throw ValidationError("synth: need 1 <= min_radius <= max_radius");
    if (2 * max_radius + 2 > static_cast<double>(image_size))
      throw ValidationError("synth: radius range does not fit inside the image");
    if (!class_weights.empty() && class_weights.size() != static_cast<std::size_t>(num_classes))
      throw ValidationError("synth: class_weights needs one entry per class");
    if (texture_noise < 0) throw ValidationError("synth: texture_noise must be >= 0");
  }
};

inline void to_json(nlohmann::json& j, const SynthConfig& c) {
  j = {{"seed", c.seed},         {"count", c.count},           {"image_size", c.image_size},
       {"num_classes", c.num_classes}, {"min_blobs", c.min_blobs}, {"max_blobs", c.max_blobs},
       {"min_radius", c.min_radius}, {"max_radius", c.max_radius}, {"max_rotation", c.max_rotation},
       {"class_weights", c.class_weights}, {"texture_noise", c.texture_noise}};
}

inline void from_json(const nlohmann::json& j, SynthConfig& c) {
  c.seed = j.value("seed", c.seed);
  c.count = j.value("count", c.count);
  c.image_size = j.value("image_size", c.image_size);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.min_blobs = j.value("min_blobs", c.min_blobs);
  c.max_blobs = j.value("max_blobs", c.max_blobs);
  c.min_radius = j.value("min_radius", c.min_radius);
  c.max_radius = j.value("max_radius", c.max_radius);
  c.max_rotation = j.value("max_rotation", c.max_rotation);
  c.class_weights = j.value("class_weights", c.class_weights);
  c.texture_noise = j.value("texture_noise", c.texture_noise);
}

/// One rendered ellipse: centre (cx, cy) in pixel-edge coordinates, semi-axes
/// a (along the rotated x axis) and b, rotation theta.
struct Blob {
  double cx = 0, cy = 0, a = 0, b = 0, theta = 0;
  int class_id = 1;

  bool contains(double px, double py) const {
    const double dx = px - cx, dy = py - cy;
    const double c = std::cos(theta), s = std::sin(theta);
    const double u = (c * dx + s * dy) / a, v = (-s * dx + c * dy) / b;
    return u * u + v * v <= 1.0;
  }
  double half_extent_x() const {
    const double c = std::cos(theta), s = std::sin(theta);
    return std::sqrt(a * a * c * c + b * b * s * s);
  }
  double half_extent_y() const {
    const double c = std::cos(theta), s = std::sin(theta);
    return std::sqrt(a * a * s * s + b * b * c * c);
  }
};

struct SynthImage {
  Sample sample;
  std::vector<Blob> blobs;  // blobs[i] is instance i + 1
  std::size_t skipped = 0;
};

/// splitmix64 finaliser; decorrelates seed ^ index streams.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::string sample_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "img_%05zu", index);
  return buf;
}

/// Renders image `index` of the synthetic set. Pixel values are multiples of
/// 1/255 so PNG round trips are exact.
inline SynthImage synth_image(const SynthConfig& cfg, std::size_t index) {
  std::mt19937_64 rng(mix_seed(cfg.seed ^ static_cast<std::uint64_t>(index)));
  const std::size_t n = cfg.image_size;
  const double size = static_cast<double>(n);
  std::uniform_int_distribution<std::size_t> count_dist(cfg.min_blobs, cfg.max_blobs);
  std::uniform_real_distribution<double> radius(cfg.min_radius, cfg.max_radius);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> weights = cfg.class_weights;
  if (weights.empty()) weights.assign(static_cast<std::size_t>(cfg.num_classes), 1.0);
  std::discrete_distribution<int> class_dist(weights.begin(), weights.end());

  SynthImage out;
  const std::size_t wanted = count_dist(rng);
  for (std::size_t i = 0; i < wanted; ++i) {
    Blob blob;
    blob.class_id = class_dist(rng) + 1;
    blob.a = radius(rng);
    blob.b = radius(rng);
    blob.theta = (2.0 * unit(rng) - 1.0) * cfg.max_rotation;
    const double ex = blob.half_extent_x(), ey = blob.half_extent_y();
    bool placed = false;
    for (std::size_t attempt = 0; attempt < cfg.placement_attempts && !placed; ++attempt) {
      blob.cx = ex + 1.0 + unit(rng) * (size - 2.0 * ex - 2.0);
      blob.cy = ey + 1.0 + unit(rng) * (size - 2.0 * ey - 2.0);
      placed = true;
      for (const Blob& o : out.blobs) {
        const double gx = std::abs(blob.cx - o.cx) - ex - o.half_extent_x();
        const double gy = std::abs(blob.cy - o.cy) - ey - o.half_extent_y();
        if (gx < cfg.min_gap && gy < cfg.min_gap) {
          placed = false;
          break;
        }
      }
    }
    if (placed) {
      out.blobs.push_back(blob);
    } else {
      ++out.skipped;
    }
  }

  InstanceSegmentation seg(n, n);
  Tensor<float> image({3, n, n});
  const std::array<double, 3> bg{cfg.background.r, cfg.background.g, cfg.background.b};
  for (std::size_t p = 0; p < n * n; ++p)
    for (std::size_t ch = 0; ch < 3; ++ch) image[ch * n * n + p] = static_cast<float>(bg[ch]);

  std::vector<Blob> kept;
  for (const Blob& blob : out.blobs) {
    const Rgb base = cfg.color(blob.class_id);
    const double tint = 0.04 * normal(rng);
    const auto r0 = static_cast<std::size_t>(std::max(0.0, std::floor(blob.cy - blob.half_extent_y())));
    const auto r1 = static_cast<std::size_t>(std::min(size, std::ceil(blob.cy + blob.half_extent_y()) + 1));
    const auto c0 = static_cast<std::size_t>(std::max(0.0, std::floor(blob.cx - blob.half_extent_x())));
    const auto c1 = static_cast<std::size_t>(std::min(size, std::ceil(blob.cx + blob.half_extent_x()) + 1));
    std::vector<std::size_t> pixels;
    for (std::size_t r = r0; r < r1; ++r)
      for (std::size_t c = c0; c < c1; ++c)
        if (blob.contains(static_cast<double>(c) + 0.5, static_cast<double>(r) + 0.5)) pixels.push_back(r * n + c);
    if (pixels.empty()) {
      ++out.skipped;
      continue;
    }
    kept.push_back(blob);
    seg.instances.push_back({blob.class_id, 1.0});
    const auto id = static_cast<std::int32_t>(seg.instances.size());
    const std::array<double, 3> col{base.r + tint, base.g + tint, base.b + tint};
    for (std::size_t p : pixels) {
      seg.ids[p] = id;
      for (std::size_t ch = 0; ch < 3; ++ch) image[ch * n * n + p] = static_cast<float>(col[ch]);
    }
  }
  out.blobs = std::move(kept);

  for (std::size_t i = 0; i < image.numel(); ++i) {
    const double v = static_cast<double>(image[i]) + cfg.texture_noise * normal(rng);
    image[i] = static_cast<float>(to_byte(static_cast<float>(v))) / 255.0f;
  }
  out.sample = make_sample(sample_name(index), std::move(image), std::move(seg), cfg.num_classes);
  return out;
}

struct SynthReport {
  std::size_t images = 0;
  std::size_t instances = 0;
  std::size_t skipped_blobs = 0;
  std::vector<std::size_t> class_counts;  // index k-1
};

inline Dataset synth_dataset(const SynthConfig& cfg, SynthReport* report = nullptr) {
  cfg.validate();
  Dataset ds;
  ds.manifest.num_classes = cfg.num_classes;
  for (int k = 1; k <= cfg.num_classes; ++k) ds.manifest.class_names.push_back("class" + std::to_string(k));
  SynthReport rep;
  rep.class_counts.assign(static_cast<std::size_t>(cfg.num_classes), 0);
  for (std::size_t i = 0; i < cfg.count; ++i) {
    SynthImage img = synth_image(cfg, i);
    rep.skipped_blobs += img.skipped;
    rep.instances += img.sample.instances.size();
    for (const auto& inst : img.sample.instances) ++rep.class_counts[static_cast<std::size_t>(inst.class_id - 1)];
    ds.samples.push_back(std::move(img.sample));
  }
  rep.images = ds.samples.size();
  if (report) *report = rep;
  return ds;
}

/// Generates the set and writes it in the dataset layout.
inline SynthReport synth_generate(const SynthConfig& cfg, const std::filesystem::path& root) {
  SynthReport rep;
  const Dataset ds = synth_dataset(cfg, &rep);
  save_dataset(root, ds);
  return rep;
}

// ------------------------------------------------------------- augmentation

struct AugmentConfig {
  bool rotate = true;
  bool flip_horizontal = true;
  bool flip_vertical = true;
  double noise_sigma = 0.02;  // <= 0.05
  double jitter = 0.1;        // brightness and contrast in [1 - j, 1 + j]

  void validate() const {
    if (noise_sigma < 0 || noise_sigma > 0.05) throw ValidationError("augment: noise sigma must lie in [0, 0.05]");
    if (jitter < 0 || jitter > 0.1) throw ValidationError("augment: jitter must lie in [0, 0.1]");
  }
};

inline void to_json(nlohmann::json& j, const AugmentConfig& c) {
  j = {{"rotate", c.rotate}, {"flip_horizontal", c.flip_horizontal}, {"flip_vertical", c.flip_vertical},
       {"noise_sigma", c.noise_sigma}, {"jitter", c.jitter}};
}

inline void from_json(const nlohmann::json& j, AugmentConfig& c) {
  c.rotate = j.value("rotate", c.rotate);
  c.flip_horizontal = j.value("flip_horizontal", c.flip_horizontal);
  c.flip_vertical = j.value("flip_vertical", c.flip_vertical);
  c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
  c.jitter = j.value("jitter", c.jitter);
}

enum class Geometric { kRotate90, kFlipHorizontal, kFlipVertical };

/// Source pixel for destination (r, c) under the transform (h x w source).
inline std::pair<std::size_t, std::size_t> source_pixel(Geometric g, std::size_t r, std::size_t c, std::size_t h,
                                                        std::size_t w) {
  switch (g) {
    case Geometric::kRotate90:  // (r, c) -> (c, H-1-r), so dest (r', c') came from (H-1-c', r')
      return {h - 1 - c, r};
    case Geometric::kFlipHorizontal:
      return {r, w - 1 - c};
    case Geometric::kFlipVertical:
      return {h - 1 - r, c};
  }
  return {r, c};
}

/// Applies a geometric transform to image and instance map; GT geometry is re-derived.
inline Sample transform(const Sample& s, Geometric g) {
  const std::size_t h = s.height(), w = s.width();
  if (g == Geometric::kRotate90 && h != w) throw ShapeError("rotation needs a square image");
  const std::size_t oh = g == Geometric::kRotate90 ? w : h, ow = g == Geometric::kRotate90 ? h : w;
  Tensor<float> image({3, oh, ow});
  InstanceSegmentation seg(oh, ow);
  seg.instances = s.truth.instances;
  for (std::size_t r = 0; r < oh; ++r)
    for (std::size_t c = 0; c < ow; ++c) {
      const auto [sr, sc] = source_pixel(g, r, c, h, w);
      seg.at(r, c) = s.truth.at(sr, sc);
      for (std::size_t ch = 0; ch < 3; ++ch) image[(ch * oh + r) * ow + c] = s.image[(ch * h + sr) * w + sc];
    }
  Sample out{s.id, std::move(image), std::move(seg), {}};
  out.instances = summarize(out.truth);
  return out;
}

/// Random rotation (0-3 quarter turns), flips, Gaussian pixel noise and
/// brightness/contrast jitter, drawn from `seed`. GT maps follow geometry only.
inline Sample augment(const Sample& s, const AugmentConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(mix_seed(seed));
  std::uniform_int_distribution<int> quarter(0, 3);
  std::bernoulli_distribution coin(0.5);
  const int turns = quarter(rng);
  const bool fh = coin(rng), fv = coin(rng);
  Sample out = s;
  if (cfg.rotate && s.height() == s.width())
    for (int t = 0; t < turns; ++t) out = transform(out, Geometric::kRotate90);
  if (cfg.flip_horizontal && fh) out = transform(out, Geometric::kFlipHorizontal);
  if (cfg.flip_vertical && fv) out = transform(out, Geometric::kFlipVertical);

  std::uniform_real_distribution<double> jit(1.0 - cfg.jitter, 1.0 + cfg.jitter);
  const double brightness = jit(rng), contrast = jit(rng);
  if (cfg.noise_sigma > 0 || cfg.jitter > 0) {
    double mean = 0.0;
    for (float v : out.image.values()) mean += v;
    mean /= static_cast<double>(std::max<std::size_t>(1, out.image.numel()));
    const float c = static_cast<float>(contrast), offset = static_cast<float>(mean * brightness - mean * contrast);
    const std::size_t n = out.image.numel();
    float* px = out.image.data();
    for (std::size_t i = 0; i < n; ++i) px[i] = px[i] * c + offset;
    if (cfg.noise_sigma > 0) {
      // Box-Muller on Eigen arrays so log/sin/cos vectorise; std::normal_distribution
      // was the single largest cost of an augmented step.
      std::mt19937 pixel_rng(static_cast<std::uint32_t>(rng()));
      const std::size_t half = (n + 1) / 2;
      Eigen::ArrayXf u1(half), u2(half);
      constexpr float kUnit = 1.0f / 16777216.0f;
      for (std::size_t i = 0; i < half; ++i) {
        u1[i] = (static_cast<float>(pixel_rng() >> 8) + 1.0f) * kUnit;  // (0, 1]
        u2[i] = static_cast<float>(pixel_rng() >> 8) * kUnit * 6.2831853f;
      }
      const Eigen::ArrayXf r = static_cast<float>(cfg.noise_sigma) * (-2.0f * u1.log()).sqrt();
      Eigen::Map<Eigen::ArrayXf> lo(px, static_cast<Eigen::Index>(half));
      Eigen::Map<Eigen::ArrayXf> hi(px + half, static_cast<Eigen::Index>(n - half));
      lo += r * u2.cos();
      hi += (r * u2.sin()).head(static_cast<Eigen::Index>(n - half));
    }
    for (std::size_t i = 0; i < n; ++i) px[i] = std::clamp(px[i], 0.0f, 1.0f);
  }
  return out;
}

// ------------------------------------------------------------------- folds

struct FoldSplit {
  std::vector<std::size_t> test;
  std::vector<std::vector<std::size_t>> folds;
  int rarest_class = 0;  // 0 when the dataset has no instances
  std::vector<std::string> warnings;
};

/// Holds out round(test_fraction * n) samples, then deals the rest into
/// folds. Samples containing the rarest class are spread first so each split
/// gets a proportional share of them.
inline FoldSplit split_folds(std::span<const Sample> samples, int num_classes, std::size_t folds = 3,
                             double test_fraction = 0.2, std::uint64_t seed = 0) {
  if (samples.empty()) throw ValidationError("split_folds: dataset is empty");
  if (folds == 0) throw ValidationError("split_folds: need at least one fold");
  if (!(test_fraction >= 0.0 && test_fraction < 1.0)) throw ValidationError("split_folds: test fraction must lie in [0, 1)");
  FoldSplit split;
  std::vector<std::size_t> per_class(static_cast<std::size_t>(num_classes) + 1, 0);
  for (const auto& s : samples)
    for (const auto& inst : s.instances)
      if (inst.class_id >= 1 && inst.class_id <= num_classes) ++per_class[static_cast<std::size_t>(inst.class_id)];
  std::size_t rare_count = 0;
  for (int k = 1; k <= num_classes; ++k) {
    const std::size_t c = per_class[static_cast<std::size_t>(k)];
    if (c > 0 && (split.rarest_class == 0 || c < rare_count)) {
      split.rarest_class = k;
      rare_count = c;
    }
  }
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const bool has = std::any_of(samples[i].instances.begin(), samples[i].instances.end(),
                                 [&](const InstanceSummary& s) { return s.class_id == split.rarest_class; });
    (has ? pos : neg).push_back(i);
  }
  std::mt19937_64 rng(mix_seed(seed));
  std::shuffle(pos.begin(), pos.end(), rng);
  std::shuffle(neg.begin(), neg.end(), rng);

  const std::size_t n = samples.size();
  const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(n)));
  std::size_t test_pos = static_cast<std::size_t>(
      std::llround(static_cast<double>(n_test) * static_cast<double>(pos.size()) / static_cast<double>(n)));
  test_pos = std::min(test_pos, pos.size());
  std::size_t test_neg = std::min(n_test - test_pos, neg.size());
  test_pos = std::min(pos.size(), n_test - test_neg);
  split.test.assign(pos.begin(), pos.begin() + static_cast<std::ptrdiff_t>(test_pos));
  split.test.insert(split.test.end(), neg.begin(), neg.begin() + static_cast<std::ptrdiff_t>(test_neg));
  std::sort(split.test.begin(), split.test.end());

  split.folds.assign(folds, {});
  std::size_t next = 0;
  for (std::size_t i = test_pos; i < pos.size(); ++i) split.folds[next++ % folds].push_back(pos[i]);
  for (std::size_t i = test_neg; i < neg.size(); ++i) split.folds[next++ % folds].push_back(neg[i]);
  for (auto& f : split.folds) std::sort(f.begin(), f.end());
  if (pos.size() - test_pos < folds)
    split.warnings.push_back("rarest class " + std::to_string(split.rarest_class) + " appears in only " +
                             std::to_string(pos.size() - test_pos) + " training samples for " +
                             std::to_string(folds) + " folds; stratification is best-effort");
  return split;
}

}  // namespace autoprom
