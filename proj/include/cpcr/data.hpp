#ifndef CPCR_DATA_HPP
#define CPCR_DATA_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "cpcr/common.hpp"
#include "cpcr/nifti_io.hpp"
#include "cpcr/npy.hpp"
#include "cpcr/resize.hpp"
#include "cpcr/rng.hpp"
#include "cpcr/tensor.hpp"

namespace cpcr {

// Volume datasets: a synthetic cardiac-phantom generator, loaders for the
// archive it writes and for ACDC-format trees, the patient-level
// semi-supervised split, slice preprocessing, flip/rotation augmentation, and
// the deterministic two-stream batch sampler feeding the trainer.

enum class SplitTag { train, val, test };

inline const char* to_string(SplitTag t) {
  switch (t) {
    case SplitTag::train: return "train";
    case SplitTag::val: return "val";
    case SplitTag::test: return "test";
  }
  return "?";
}

struct VolumeSample {
  std::string patient_id;
  std::string name;  // unique per sample; equals patient_id unless multi-frame
  SplitTag split_tag = SplitTag::train;
  std::array<int, 3> dims{0, 0, 0};       // slices, height, width
  std::array<float, 3> spacing{1, 1, 1};  // slice, row, column
  std::vector<float> image;               // slice-major
  std::vector<std::uint8_t> label;        // same layout as image

  int slices() const { return dims[0]; }
  int height() const { return dims[1]; }
  int width() const { return dims[2]; }
  std::int64_t voxels() const {
    return static_cast<std::int64_t>(dims[0]) * dims[1] * dims[2];
  }
  const float* image_slice(int s) const {
    return image.data() + static_cast<std::int64_t>(s) * dims[1] * dims[2];
  }
  const std::uint8_t* label_slice(int s) const {
    return label.data() + static_cast<std::int64_t>(s) * dims[1] * dims[2];
  }

  void validate(int num_classes) const {
    if (dims[0] <= 0 || dims[1] <= 0 || dims[2] <= 0)
      throw DataError("volume " + name + " has a non-positive dimension");
    if (static_cast<std::int64_t>(image.size()) != voxels() ||
        image.size() != label.size())
      throw DataError("volume " + name +
                      ": image and label sizes do not match the dimensions");
    for (std::uint8_t v : label)
      if (v >= num_classes)
        throw DataError("volume " + name + " contains label value " +
                        std::to_string(static_cast<int>(v)) + ", outside [0, " +
                        std::to_string(num_classes) + ")");
  }
};

inline const std::vector<std::string>& cardiac_class_names() {
  static const std::vector<std::string> names = {"background", "RV", "Myo",
                                                 "LV"};
  return names;
}

// ---------------------------------------------------------------------------
// Synthetic generator

struct SyntheticSpec {
  int num_volumes = 10;
  int slices_per_volume = 12;
  int image_h = 80;
  int image_w = 80;
  int num_classes = 4;
  double noise_std = 0.04;
  double bias_amp = 0.2;  // strength of the per-volume shading field
  std::uint64_t seed = 1337;

  void validate() const {
    if (num_volumes < 3)
      throw ConfigError("synthetic.num_volumes must be at least 3 so every "
                        "split is non-empty");
    if (slices_per_volume < 1)
      throw ConfigError("synthetic.slices_per_volume must be positive");
    if (image_h < 32 || image_w < 32)
      throw ConfigError("synthetic.image_size must be at least 32x32");
    if (num_classes != 4)
      throw ConfigError("synthetic.num_classes must be 4 (background, RV, "
                        "Myo, LV)");
    if (noise_std < 0) throw ConfigError("synthetic.noise_std must be >= 0");
    if (bias_amp < 0 || bias_amp > 0.4)
      throw ConfigError("synthetic.bias_amp must be in [0, 0.4]");
  }
};

// Train/val/test sizes for n patients: roughly 70/10/20 with every split
// non-empty (100 -> 70/10/20, 10 -> 7/1/2).
inline std::array<int, 3> partition_sizes(int n) {
  if (n < 3)
    throw DataError("cannot partition " + std::to_string(n) +
                    " patients into train/val/test");
  const int n_val = std::max(1, n / 10);
  const int n_test = std::max(1, n / 5);
  return {n - n_val - n_test, n_val, n_test};
}

// Deterministic phantom volumes: an LV disk (class 3) wrapped by a Myo
// annulus (class 2) with an RV crescent (class 1) hugging its left side, on a
// noisy background. The structures drift and breathe smoothly across slices.
// Each volume draws its own geometry (center, radii, aspect) from wide
// ranges and its own class intensities and smooth multiplicative shading
// field, so neither a global threshold nor a handful of labeled patients
// covers the appearance and shape distribution.
inline std::vector<VolumeSample> generate_synthetic_dataset(
    const SyntheticSpec& spec) {
  spec.validate();
  const auto sizes = partition_sizes(spec.num_volumes);
  const int h = spec.image_h, w = spec.image_w;
  const double m = std::min(h, w);
  const double two_pi = 6.283185307179586;

  std::vector<VolumeSample> out;
  out.reserve(static_cast<size_t>(spec.num_volumes));
  for (int v = 0; v < spec.num_volumes; ++v) {
    Rng rng(hash_combine(hash_combine(spec.seed, "synthetic"),
                         static_cast<std::uint64_t>(v)));
    const double cx0 = w * rng.uniform(0.46, 0.62);
    const double cy0 = h * rng.uniform(0.38, 0.58);
    const double ax = rng.uniform(0.80, 1.26);
    const double ay = rng.uniform(0.80, 1.26);
    const double r_lv = m * rng.uniform(0.060, 0.165);
    const double r_out = r_lv + m * rng.uniform(0.030, 0.075);
    const double r_rv = r_out * rng.uniform(0.75, 1.10);
    const double gap = (r_out + r_rv) * rng.uniform(0.48, 0.58);
    const double rv_dy = m * rng.uniform(-0.06, 0.06);

    // Class shades float freely between 0.05 and 1.0 with a minimum
    // separation, so absolute intensity carries no class identity across
    // volumes; only contrast against the local neighbors does.
    std::array<double, 4> shade{};
    for (int attempt = 0; attempt < 64; ++attempt) {
      const double s0 = rng.uniform(0.05, 0.40);
      const double g1 = rng.uniform(0.12, 0.34);
      const double g2 = rng.uniform(0.12, 0.34);
      const double g3 = rng.uniform(0.12, 0.34);
      shade = {s0, s0 + g1, s0 + g1 + g2, s0 + g1 + g2 + g3};
      if (shade[3] <= 1.0) break;
      shade = {0.20, 0.45, 0.65, 0.90};
    }

    const double freq = rng.uniform(0.5, 1.5);
    const double ph_x = rng.uniform(0.0, two_pi);
    const double ph_y = rng.uniform(0.0, two_pi);
    const double ph_r = rng.uniform(0.0, two_pi);

    // One low-frequency sinusoid across the slice plane, with a random
    // orientation per volume, stands in for an acquisition shading field.
    const double b_dir = rng.uniform(0.0, two_pi);
    const double b_freq = rng.uniform(0.6, 1.2);
    const double b_phase = rng.uniform(0.0, two_pi);
    const double b_ux = std::cos(b_dir), b_uy = std::sin(b_dir);

    VolumeSample sample;
    char id[16];
    std::snprintf(id, sizeof(id), "syn%03d", v);
    sample.patient_id = id;
    sample.name = id;
    sample.split_tag = v < sizes[0]            ? SplitTag::train
                       : v < sizes[0] + sizes[1] ? SplitTag::val
                                                 : SplitTag::test;
    sample.dims = {spec.slices_per_volume, h, w};
    sample.image.resize(static_cast<size_t>(sample.voxels()));
    sample.label.resize(sample.image.size());

    for (int s = 0; s < spec.slices_per_volume; ++s) {
      const double t = spec.slices_per_volume > 1
                           ? static_cast<double>(s) / (spec.slices_per_volume - 1)
                           : 0.0;
      const double dx = 0.04 * m * std::sin(two_pi * freq * t + ph_x);
      const double dy = 0.04 * m * std::sin(two_pi * freq * t + ph_y);
      const double sc = 1.0 + 0.10 * std::sin(two_pi * freq * t + ph_r);
      const double cx = cx0 + dx, cy = cy0 + dy;
      const double rvx = cx - gap * sc, rvy = cy + rv_dy;
      const double lv_x = r_lv * sc * ax, lv_y = r_lv * sc * ay;
      const double out_x = r_out * sc * ax, out_y = r_out * sc * ay;
      const double rv_x = r_rv * sc * ax, rv_y = r_rv * sc * ay * 1.3;

      float* img = sample.image.data() +
                   static_cast<std::int64_t>(s) * h * w;
      std::uint8_t* lab = sample.label.data() +
                          static_cast<std::int64_t>(s) * h * w;
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          auto inside = [&](double ex, double ey, double sx, double sy) {
            const double u = (x - ex) / sx, q = (y - ey) / sy;
            return u * u + q * q <= 1.0;
          };
          std::uint8_t cls = 0;
          if (inside(cx, cy, lv_x, lv_y))
            cls = 3;
          else if (inside(cx, cy, out_x, out_y))
            cls = 2;
          else if (inside(rvx, rvy, rv_x, rv_y))
            cls = 1;
          const double field =
              1.0 + spec.bias_amp * std::sin(two_pi * b_freq *
                                                 (b_ux * x / w + b_uy * y / h) +
                                             b_phase);
          const double noise = spec.noise_std * rng.normal();
          lab[y * w + x] = cls;
          img[y * w + x] = static_cast<float>(shade[cls] * field + noise);
        }
      }
    }
    out.push_back(std::move(sample));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Archive round-trip and ACDC-format loading

enum class DatasetLayout { synthetic_archive, acdc_format };

namespace detail {

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed JSON in " + path.string() + ": " + e.what());
  }
  return j;
}

inline void write_json_file(const std::filesystem::path& path,
                            const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << "\n";
  if (!out) throw IoError("write failed for " + path.string());
}

struct SplitManifest {
  std::vector<std::string> train, val, test;
};

inline SplitManifest read_split_manifest(const std::filesystem::path& root) {
  const auto path = root / "splits.json";
  if (!std::filesystem::exists(path))
    throw DataError("split manifest not found: " + path.string());
  const nlohmann::json j = read_json_file(path);
  if (!j.is_object())
    throw DataError("split manifest " + path.string() + " must be an object");
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (key != "train" && key != "val" && key != "test")
      throw DataError("split manifest " + path.string() +
                      " has unknown key '" + key + "'");
  }
  SplitManifest man;
  auto read_list = [&](const char* key, std::vector<std::string>& dst) {
    if (!j.contains(key) || !j.at(key).is_array())
      throw DataError("split manifest " + path.string() +
                      " needs an array under '" + std::string(key) + "'");
    for (const auto& e : j.at(key)) {
      if (!e.is_string())
        throw DataError("split manifest " + path.string() +
                        ": ids must be strings");
      dst.push_back(e.get<std::string>());
    }
  };
  read_list("train", man.train);
  read_list("val", man.val);
  read_list("test", man.test);

  std::set<std::string> seen;
  for (const auto* list : {&man.train, &man.val, &man.test})
    for (const auto& id : *list)
      if (!seen.insert(id).second)
        throw DataError("split manifest " + path.string() + ": patient '" +
                        id + "' appears in more than one split");
  if (seen.empty())
    throw DataError("split manifest " + path.string() + " lists no patients");
  return man;
}

inline std::vector<std::pair<std::string, SplitTag>> manifest_entries(
    const SplitManifest& man) {
  std::vector<std::pair<std::string, SplitTag>> entries;
  for (const auto& id : man.train) entries.emplace_back(id, SplitTag::train);
  for (const auto& id : man.val) entries.emplace_back(id, SplitTag::val);
  for (const auto& id : man.test) entries.emplace_back(id, SplitTag::test);
  std::sort(entries.begin(), entries.end());
  return entries;
}

}  // namespace detail

inline void save_synthetic_archive(const std::vector<VolumeSample>& samples,
                                   const std::filesystem::path& root) {
  if (samples.empty()) throw DataError("cannot save an empty dataset");
  std::filesystem::create_directories(root);
  nlohmann::json splits = {{"train", nlohmann::json::array()},
                           {"val", nlohmann::json::array()},
                           {"test", nlohmann::json::array()}};
  for (const VolumeSample& s : samples) {
    const auto dir = root / s.patient_id;
    std::filesystem::create_directories(dir);
    write_npy((dir / "image.npy").string(), "<f4",
              {s.dims[0], s.dims[1], s.dims[2]}, s.image.data());
    write_npy((dir / "label.npy").string(), "|u1",
              {s.dims[0], s.dims[1], s.dims[2]}, s.label.data());
    nlohmann::json meta = {
        {"patient_id", s.patient_id},
        {"shape", {s.dims[0], s.dims[1], s.dims[2]}},
        {"spacing", {s.spacing[0], s.spacing[1], s.spacing[2]}},
        {"class_names", cardiac_class_names()}};
    detail::write_json_file(dir / "meta.json", meta);
    splits[to_string(s.split_tag)].push_back(s.patient_id);
  }
  detail::write_json_file(root / "splits.json", splits);
}

namespace detail {

inline VolumeSample load_archive_patient(const std::filesystem::path& dir,
                                         const std::string& id, SplitTag tag) {
  const auto image_path = dir / "image.npy";
  const auto label_path = dir / "label.npy";
  if (!std::filesystem::exists(image_path))
    throw DataError("missing image file: " + image_path.string());
  if (!std::filesystem::exists(label_path))
    throw DataError("missing label file: " + label_path.string());
  const NpyArray image = read_npy(image_path.string());
  const NpyArray label = read_npy(label_path.string());
  if (image.shape.size() != 3)
    throw DataError(image_path.string() + " must be a 3D array");
  if (label.shape != image.shape)
    throw DataError("label shape differs from image shape for " +
                    label_path.string());

  VolumeSample s;
  s.patient_id = id;
  s.name = id;
  s.split_tag = tag;
  s.dims = {image.shape[0], image.shape[1], image.shape[2]};
  s.image = npy_as_f32(image, image_path.string());
  s.label = npy_as_u8(label, label_path.string());

  const auto meta_path = dir / "meta.json";
  int num_classes = static_cast<int>(cardiac_class_names().size());
  if (std::filesystem::exists(meta_path)) {
    const nlohmann::json meta = read_json_file(meta_path);
    if (meta.contains("class_names"))
      num_classes = static_cast<int>(meta.at("class_names").size());
    if (meta.contains("spacing")) {
      const auto& sp = meta.at("spacing");
      if (!sp.is_array() || sp.size() != 3)
        throw DataError(meta_path.string() + ": spacing must have 3 entries");
      for (int a = 0; a < 3; ++a)
        s.spacing[static_cast<size_t>(a)] = sp.at(static_cast<size_t>(a)).get<float>();
    }
    if (meta.contains("patient_id") &&
        meta.at("patient_id").get<std::string>() != id)
      throw DataError(meta_path.string() +
                      ": patient_id does not match directory name");
  }
  s.validate(num_classes);
  return s;
}

inline std::vector<VolumeSample> load_acdc_patient(
    const std::filesystem::path& dir, const std::string& id, SplitTag tag) {
  if (!std::filesystem::is_directory(dir))
    throw DataError("missing patient directory: " + dir.string());
  std::vector<std::filesystem::path> frames;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    const std::string fname = entry.path().filename().string();
    const bool nifti = detail::ends_with(fname, ".nii") ||
                       detail::ends_with(fname, ".nii.gz");
    if (!nifti || fname.find("_gt") != std::string::npos) continue;
    if (fname.rfind(id + "_frame", 0) != 0) continue;
    frames.push_back(entry.path());
  }
  std::sort(frames.begin(), frames.end());
  if (frames.empty())
    throw DataError("no frame volumes found for patient '" + id + "' in " +
                    dir.string());

  std::vector<VolumeSample> out;
  for (const auto& frame : frames) {
    std::string fname = frame.filename().string();
    const std::string ext =
        detail::ends_with(fname, ".nii.gz") ? ".nii.gz" : ".nii";
    const std::string stem = fname.substr(0, fname.size() - ext.size());
    const auto label_path = frame.parent_path() / (stem + "_gt" + ext);
    if (!std::filesystem::exists(label_path))
      throw DataError("missing label file: " + label_path.string());

    const NiftiVolume image = read_nifti(frame.string());
    const NiftiVolume label = read_nifti(label_path.string());
    if (image.dims != label.dims)
      throw DataError("label shape differs from image shape for " +
                      label_path.string());

    VolumeSample s;
    s.patient_id = id;
    s.name = stem;
    s.split_tag = tag;
    s.dims = image.dims;
    s.spacing = image.spacing;
    s.image = image.data;
    s.label.resize(label.data.size());
    for (size_t i = 0; i < label.data.size(); ++i) {
      const float v = label.data[i];
      const float r = std::round(v);
      if (std::abs(v - r) > 1e-3f || r < 0 ||
          r >= static_cast<float>(cardiac_class_names().size()))
        throw DataError("unknown class value " + std::to_string(v) + " in " +
                        label_path.string());
      s.label[i] = static_cast<std::uint8_t>(r);
    }
    s.validate(static_cast<int>(cardiac_class_names().size()));
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace detail

inline std::vector<VolumeSample> load_volume_dataset(
    const std::filesystem::path& root, DatasetLayout layout) {
  if (!std::filesystem::is_directory(root))
    throw DataError("dataset root not found: " + root.string());
  const detail::SplitManifest man = detail::read_split_manifest(root);
  std::vector<VolumeSample> out;
  for (const auto& [id, tag] : detail::manifest_entries(man)) {
    if (layout == DatasetLayout::synthetic_archive) {
      out.push_back(detail::load_archive_patient(root / id, id, tag));
    } else {
      auto frames = detail::load_acdc_patient(root / id, id, tag);
      for (auto& f : frames) out.push_back(std::move(f));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Semi-supervised split

struct SSLSplit {
  std::vector<std::string> labeled_ids;
  std::vector<std::string> unlabeled_ids;
  std::uint64_t seed = 0;
};

inline SSLSplit make_ssl_split(std::vector<std::string> train_ids,
                               double labeled_ratio, std::uint64_t seed) {
  if (train_ids.empty())
    throw DataError("make_ssl_split: training id list is empty");
  if (!(labeled_ratio > 0.0) || labeled_ratio > 1.0)
    throw ArgumentError("make_ssl_split: labeled_ratio must be in (0, 1]");
  std::sort(train_ids.begin(), train_ids.end());
  train_ids.erase(std::unique(train_ids.begin(), train_ids.end()),
                  train_ids.end());
  Rng rng(hash_combine(seed, "ssl_split"));
  rng.shuffle(train_ids);
  const size_t n_labeled = std::max<size_t>(
      1, static_cast<size_t>(labeled_ratio * static_cast<double>(train_ids.size())));
  SSLSplit split;
  split.seed = seed;
  split.labeled_ids.assign(train_ids.begin(),
                           train_ids.begin() + static_cast<std::ptrdiff_t>(n_labeled));
  split.unlabeled_ids.assign(train_ids.begin() + static_cast<std::ptrdiff_t>(n_labeled),
                             train_ids.end());
  std::sort(split.labeled_ids.begin(), split.labeled_ids.end());
  std::sort(split.unlabeled_ids.begin(), split.unlabeled_ids.end());
  return split;
}

// ---------------------------------------------------------------------------
// Preprocessing

// Min-max normalization to [0,1] (constant slices become all zeros), then
// bilinear resize to the target size.
inline std::vector<float> preprocess_slice(const float* src, int ih, int iw,
                                           int th, int tw) {
  if (ih <= 0 || iw <= 0 || th <= 0 || tw <= 0)
    throw ArgumentError("preprocess_slice: sizes must be positive");
  const std::int64_t in_count = static_cast<std::int64_t>(ih) * iw;
  float lo = src[0], hi = src[0];
  for (std::int64_t i = 1; i < in_count; ++i) {
    lo = std::min(lo, src[i]);
    hi = std::max(hi, src[i]);
  }
  std::vector<float> norm(static_cast<size_t>(in_count), 0.0f);
  if (hi > lo) {
    const float inv = 1.0f / (hi - lo);
    for (std::int64_t i = 0; i < in_count; ++i) norm[i] = (src[i] - lo) * inv;
  }
  std::vector<float> out(static_cast<size_t>(th) * tw);
  if (th == ih && tw == iw) {
    out = std::move(norm);
  } else {
    const auto ty = bilinear_taps(ih, th);
    const auto tx = bilinear_taps(iw, tw);
    resize_bilinear_plane(norm.data(), iw, out.data(), th, tw, ty, tx);
  }
  return out;
}

// Nearest-neighbor resize for label maps; the value set never grows.
inline std::vector<std::uint8_t> resize_label_slice(const std::uint8_t* src,
                                                    int ih, int iw, int th,
                                                    int tw) {
  std::vector<std::uint8_t> out(static_cast<size_t>(th) * tw);
  if (th == ih && tw == iw) {
    std::copy(src, src + static_cast<std::int64_t>(ih) * iw, out.begin());
  } else {
    resize_nearest_plane(src, ih, iw, out.data(), th, tw);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation

struct AugmentDecision {
  bool flip = false;
  bool flip_horizontal = false;  // mirror columns; otherwise mirror rows
  int quarter_turns = 0;         // counter-clockwise 90-degree turns, 0..3

  bool identity() const { return !flip && quarter_turns == 0; }
};

// Consumes a fixed four draws so downstream consumption never shifts:
// flip? / flip axis / rotate? / turn count.
inline AugmentDecision draw_augment_decision(Rng& rng) {
  const bool flip = rng.uniform() < 0.5;
  const bool horizontal = rng.uniform() < 0.5;
  const bool rotate = rng.uniform() < 0.5;
  const int turns = 1 + static_cast<int>(rng.uniform_int(3));
  AugmentDecision d;
  if (flip) {
    d.flip = true;
    d.flip_horizontal = horizontal;
  }
  if (rotate) d.quarter_turns = turns;
  return d;
}

namespace detail {

template <typename T>
std::vector<T> rot90_ccw(const std::vector<T>& src, int h, int w) {
  // dst is (w, h); src(y, x) lands at dst(w-1-x, y).
  std::vector<T> dst(src.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      dst[static_cast<size_t>(w - 1 - x) * h + y] =
          src[static_cast<size_t>(y) * w + x];
  return dst;
}

}  // namespace detail

// Applies the decision; flips come before rotations. Returns the new height
// and width through out_h/out_w (odd turn counts swap the axes).
template <typename T>
std::vector<T> apply_augment(std::vector<T> data, int h, int w,
                             const AugmentDecision& d, int* out_h,
                             int* out_w) {
  if (static_cast<std::int64_t>(data.size()) !=
      static_cast<std::int64_t>(h) * w)
    throw ShapeError("apply_augment: buffer size does not match h*w");
  if (d.flip) {
    if (d.flip_horizontal) {
      for (int y = 0; y < h; ++y)
        std::reverse(data.begin() + static_cast<std::ptrdiff_t>(y) * w,
                     data.begin() + static_cast<std::ptrdiff_t>(y + 1) * w);
    } else {
      for (int y = 0; y < h / 2; ++y)
        std::swap_ranges(data.begin() + static_cast<std::ptrdiff_t>(y) * w,
                         data.begin() + static_cast<std::ptrdiff_t>(y + 1) * w,
                         data.begin() + static_cast<std::ptrdiff_t>(h - 1 - y) * w);
    }
  }
  int ch = h, cw = w;
  for (int k = 0; k < (d.quarter_turns % 4 + 4) % 4; ++k) {
    data = detail::rot90_ccw(data, ch, cw);
    std::swap(ch, cw);
  }
  if (out_h) *out_h = ch;
  if (out_w) *out_w = cw;
  return data;
}

// ---------------------------------------------------------------------------
// Two-stream batch sampler

struct BatchSpec {
  int labeled = 12;
  int unlabeled = 12;
  int patch_h = 256;
  int patch_w = 256;
  bool augment = true;

  void validate() const {
    if (labeled < 1) throw ConfigError("batch.labeled must be positive");
    if (unlabeled < 0)
      throw ConfigError("batch.unlabeled must be >= 0 (0 runs supervised-only)");
    if (patch_h < 16 || patch_w < 16)
      throw ConfigError("batch.patch size must be at least 16");
    if (patch_h % 16 != 0 || patch_w % 16 != 0)
      throw ConfigError("batch.patch size must be divisible by 16");
    if (augment && patch_h != patch_w)
      throw ConfigError("batch.augment needs square patches: quarter-turn "
                        "rotations swap the axes");
  }
};

struct SliceSource {
  int volume = 0;  // index into the dataset vector
  int slice = 0;
  AugmentDecision augment;
};

struct SliceBatch {
  TensorF labeled_images;    // (B_l, 1, H, W), values in [0,1]
  TensorI labeled_labels;    // (B_l, 1, H, W)
  TensorF unlabeled_images;  // (B_u, 1, H, W)
  std::vector<SliceSource> labeled_sources;
  std::vector<SliceSource> unlabeled_sources;
};

// Draws slices uniformly from the labeled and unlabeled pools independently,
// reshuffling each pool per epoch. batch(i) is a pure function of
// (dataset, split, spec, seed, i): epoch permutations and augmentation draws
// are derived by hashing, so resuming at iteration k needs no sampler state.
class BatchSampler {
 public:
  BatchSampler(const std::vector<VolumeSample>* dataset, const SSLSplit& split,
               const BatchSpec& spec, std::uint64_t seed)
      : dataset_(dataset), spec_(spec) {
    spec_.validate();
    if (!dataset || dataset->empty()) throw DataError("sampler: empty dataset");
    labeled_.key = hash_combine(seed, "sampler.labeled");
    unlabeled_.key = hash_combine(seed, "sampler.unlabeled");
    const std::set<std::string> lab(split.labeled_ids.begin(),
                                    split.labeled_ids.end());
    const std::set<std::string> unl(split.unlabeled_ids.begin(),
                                    split.unlabeled_ids.end());
    for (size_t v = 0; v < dataset->size(); ++v) {
      const VolumeSample& s = (*dataset)[v];
      if (s.split_tag != SplitTag::train) continue;
      Stream* stream = lab.count(s.patient_id)   ? &labeled_
                       : unl.count(s.patient_id) ? &unlabeled_
                                                 : nullptr;
      if (!stream) continue;
      for (int z = 0; z < s.slices(); ++z)
        stream->pool.emplace_back(static_cast<int>(v), z);
    }
    if (labeled_.pool.empty())
      throw DataError("sampler: labeled pool is empty");
    if (spec_.unlabeled > 0 && unlabeled_.pool.empty())
      throw DataError("sampler: unlabeled pool is empty");
  }

  std::int64_t labeled_pool_size() const {
    return static_cast<std::int64_t>(labeled_.pool.size());
  }
  std::int64_t unlabeled_pool_size() const {
    return static_cast<std::int64_t>(unlabeled_.pool.size());
  }

  SliceBatch batch(std::int64_t index) const {
    if (index < 0) throw ArgumentError("sampler: batch index must be >= 0");
    SliceBatch b;
    b.labeled_images = TensorF(Shape4{spec_.labeled, 1, spec_.patch_h, spec_.patch_w});
    b.labeled_labels = TensorI(Shape4{spec_.labeled, 1, spec_.patch_h, spec_.patch_w});
    fill_stream(labeled_, index, spec_.labeled, true, b.labeled_images,
                &b.labeled_labels, b.labeled_sources);
    if (spec_.unlabeled > 0) {
      b.unlabeled_images =
          TensorF(Shape4{spec_.unlabeled, 1, spec_.patch_h, spec_.patch_w});
      fill_stream(unlabeled_, index, spec_.unlabeled, false,
                  b.unlabeled_images, nullptr, b.unlabeled_sources);
    }
    return b;
  }

 private:
  struct Stream {
    std::vector<std::pair<int, int>> pool;  // (volume, slice)
    std::uint64_t key = 0;
    // Cached permutation for the epoch last touched; batch() stays logically
    // const and the trainer drives one sampler from one thread.
    mutable std::int64_t cached_epoch = -1;
    mutable std::vector<std::int64_t> perm;

    const std::pair<int, int>& item(std::int64_t k) const {
      const auto p = static_cast<std::int64_t>(pool.size());
      const std::int64_t epoch = k / p, pos = k % p;
      if (epoch != cached_epoch) {
        perm.resize(static_cast<size_t>(p));
        for (std::int64_t i = 0; i < p; ++i) perm[static_cast<size_t>(i)] = i;
        Rng rng(hash_combine(key, static_cast<std::uint64_t>(epoch)));
        rng.shuffle(perm);
        cached_epoch = epoch;
      }
      return pool[static_cast<size_t>(perm[static_cast<size_t>(pos)])];
    }
  };

  void fill_stream(const Stream& stream, std::int64_t index, int batch,
                   bool with_labels, TensorF& images, TensorI* labels,
                   std::vector<SliceSource>& sources) const {
    const std::uint64_t aug_key = hash_combine(stream.key, "augment");
    for (int j = 0; j < batch; ++j) {
      const std::int64_t k = index * batch + j;
      const auto [vol, slice] = stream.item(k);
      const VolumeSample& s = (*dataset_)[static_cast<size_t>(vol)];

      AugmentDecision decision;
      if (spec_.augment) {
        Rng rng(hash_combine(aug_key, static_cast<std::uint64_t>(k)));
        decision = draw_augment_decision(rng);
      }
      sources.push_back({vol, slice, decision});

      std::vector<float> img = preprocess_slice(
          s.image_slice(slice), s.height(), s.width(), spec_.patch_h,
          spec_.patch_w);
      int oh = spec_.patch_h, ow = spec_.patch_w;
      img = apply_augment(std::move(img), spec_.patch_h, spec_.patch_w,
                          decision, &oh, &ow);
      std::copy(img.begin(), img.end(), images.channel(j, 0));

      if (with_labels) {
        std::vector<std::uint8_t> lab = resize_label_slice(
            s.label_slice(slice), s.height(), s.width(), spec_.patch_h,
            spec_.patch_w);
        lab = apply_augment(std::move(lab), spec_.patch_h, spec_.patch_w,
                            decision, &oh, &ow);
        std::int32_t* dst = labels->channel(j, 0);
        for (size_t i = 0; i < lab.size(); ++i) dst[i] = lab[i];
      }
    }
  }

  const std::vector<VolumeSample>* dataset_;
  BatchSpec spec_;
  Stream labeled_, unlabeled_;
};

}  // namespace cpcr

#endif
