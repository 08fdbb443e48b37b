#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <png.h>

#include "cmi/sampler.hpp"
#include "cmi/tensor.hpp"

namespace cmi {

struct Sample {
  Tensor<float> image;  // [C,H,W] in [0,1]
  std::size_t label = 0;
  std::string source;
  std::string group;  // empty: no group
};

struct Dataset {
  std::vector<Sample> samples;
  std::vector<std::string> class_names;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
  std::size_t num_classes() const { return class_names.size(); }
  Shape image_shape() const { return samples.empty() ? Shape{} : samples.front().image.shape(); }
  std::vector<std::size_t> labels() const {
    std::vector<std::size_t> out;
    out.reserve(samples.size());
    for (const auto& s : samples) out.push_back(s.label);
    return out;
  }
  Dataset subset(const std::vector<std::size_t>& idx) const {
    Dataset d;
    d.class_names = class_names;
    d.samples.reserve(idx.size());
    for (auto i : idx) d.samples.push_back(samples.at(i));
    return d;
  }
};

// Stacks the selected images into [B,C,H,W], optionally mirrored left-right.
template <typename T>
Tensor<T> make_batch(const Dataset& d, const std::vector<std::size_t>& idx,
                     const std::vector<bool>& flip = {}) {
  require(!idx.empty(), "make_batch: empty index list");
  const Shape s = d.image_shape();
  const std::size_t C = s[0], H = s[1], W = s[2], per = C * H * W;
  Tensor<T> out({idx.size(), C, H, W});
  for (std::size_t b = 0; b < idx.size(); ++b) {
    const auto& img = d.samples.at(idx[b]).image;
    T* dst = out.data() + b * per;
    const bool f = !flip.empty() && flip[b];
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t w = 0; w < W; ++w)
          dst[(c * H + h) * W + w] = static_cast<T>(img.data()[(c * H + h) * W + (f ? W - 1 - w : w)]);
  }
  return out;
}

// ---------------------------------------------------------------- image I/O

namespace detail {

inline float lerp(float a, float b, float t) { return a + t * (b - a); }

}  // namespace detail

// Bilinear resize of a [C,H,W] image with half-pixel centers and edge clamping.
inline Tensor<float> resize_bilinear(const Tensor<float>& img, std::size_t oh, std::size_t ow) {
  require(img.rank() == 3, "resize_bilinear: expected [C,H,W], got " + shape_str(img.shape()));
  require(oh > 0 && ow > 0, "resize_bilinear: target extent must be positive");
  const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  if (H == oh && W == ow) return img;
  Tensor<float> out({C, oh, ow});
  auto coord = [](std::size_t o, std::size_t in, std::size_t out_n, std::size_t& i0, std::size_t& i1,
                  float& t) {
    double src = (static_cast<double>(o) + 0.5) * static_cast<double>(in) / static_cast<double>(out_n) - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    i0 = static_cast<std::size_t>(std::floor(src));
    i1 = std::min(i0 + 1, in - 1);
    t = static_cast<float>(src - static_cast<double>(i0));
  };
  for (std::size_t y = 0; y < oh; ++y) {
    std::size_t y0, y1;
    float ty;
    coord(y, H, oh, y0, y1, ty);
    for (std::size_t x = 0; x < ow; ++x) {
      std::size_t x0, x1;
      float tx;
      coord(x, W, ow, x0, x1, tx);
      for (std::size_t c = 0; c < C; ++c) {
        const float* p = img.data() + c * H * W;
        const float top = detail::lerp(p[y0 * W + x0], p[y0 * W + x1], tx);
        const float bot = detail::lerp(p[y1 * W + x0], p[y1 * W + x1], tx);
        out.data()[(c * oh + y) * ow + x] = detail::lerp(top, bot, ty);
      }
    }
  }
  return out;
}

// Decodes a PNG into [C,H,W] floats in [0,1]; C is 1 for grayscale sources and
// 3 for color ones (alpha is composited away by libpng).
inline Tensor<float> read_png(const std::string& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str()))
    throw StructuralError("cannot read PNG '" + path + "': " + image.message);
  const bool color = (image.format & PNG_FORMAT_FLAG_COLOR) != 0;
  image.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
    const std::string msg = image.message;
    png_image_free(&image);
    throw StructuralError("cannot decode PNG '" + path + "': " + msg);
  }
  const std::size_t C = color ? 3 : 1, H = image.height, W = image.width;
  Tensor<float> out({C, H, W});
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t w = 0; w < W; ++w)
      for (std::size_t c = 0; c < C; ++c)
        out.data()[(c * H + h) * W + w] = static_cast<float>(buf[(h * W + w) * C + c]) / 255.0f;
  return out;
}

// Writes a [1,H,W] or [3,H,W] image in [0,1] as an 8-bit PNG.
inline void write_png(const std::string& path, const Tensor<float>& img) {
  require(img.rank() == 3 && (img.dim(0) == 1 || img.dim(0) == 3),
          "write_png: expected [1|3,H,W], got " + shape_str(img.shape()));
  const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2);
  std::vector<png_byte> buf(C * H * W);
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t w = 0; w < W; ++w)
      for (std::size_t c = 0; c < C; ++c) {
        const float v = std::clamp(img.data()[(c * H + h) * W + w], 0.0f, 1.0f);
        buf[(h * W + w) * C + c] = static_cast<png_byte>(std::lround(v * 255.0f));
      }
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(W);
  image.height = static_cast<png_uint_32>(H);
  image.format = C == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&image, path.c_str(), 0, buf.data(), 0, nullptr))
    throw StructuralError("cannot write PNG '" + path + "': " + image.message);
}

// Matches a decoded image to `channels`: gray is replicated, color is averaged
// down to one channel.
inline Tensor<float> match_channels(const Tensor<float>& img, std::size_t channels) {
  const std::size_t C = img.dim(0), H = img.dim(1), W = img.dim(2), P = H * W;
  if (C == channels) return img;
  Tensor<float> out({channels, H, W});
  if (C == 1) {
    for (std::size_t c = 0; c < channels; ++c) std::copy_n(img.data(), P, out.data() + c * P);
    return out;
  }
  require(channels == 1, "cannot map " + std::to_string(C) + " image channels to " +
                             std::to_string(channels));
  for (std::size_t p = 0; p < P; ++p) {
    float acc = 0;
    for (std::size_t c = 0; c < C; ++c) acc += img.data()[c * P + p];
    out.data()[p] = acc / static_cast<float>(C);
  }
  return out;
}

// ---------------------------------------------------------------- manifest

struct ManifestOptions {
  std::size_t height = 299, width = 299, channels = 3;
  // Empty: class names are the distinct labels, sorted (numerically when every
  // label is an integer).
  std::vector<std::string> class_names;
};

namespace detail {

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

// Comma-separated fields; double quotes may wrap a field containing commas.
inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (ch == '"') {
        quoted = false;
      } else {
        cur += ch;
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur += ch;
    }
  }
  out.push_back(trim(cur));
  return out;
}

inline bool is_integer(const std::string& s) {
  return !s.empty() && std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isdigit(c); });
}

}  // namespace detail

struct ManifestRow {
  std::size_t line = 0;
  std::string path, label, group;
};

inline std::vector<ManifestRow> read_manifest_rows(const std::string& manifest) {
  std::ifstream in(manifest);
  if (!in) throw StructuralError("cannot open manifest '" + manifest + "'");
  std::string line;
  if (!std::getline(in, line)) throw StructuralError("manifest '" + manifest + "' is empty");
  const auto header = detail::split_csv_line(line);
  auto col = [&](const std::string& name) -> std::optional<std::size_t> {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) return std::nullopt;
    return static_cast<std::size_t>(it - header.begin());
  };
  const auto pc = col("path"), lc = col("label"), gc = col("group");
  if (!pc || !lc) throw StructuralError("manifest '" + manifest + "': header must contain path,label");
  std::vector<ManifestRow> rows;
  std::map<std::string, std::pair<std::string, std::size_t>> seen;
  for (std::size_t ln = 2; std::getline(in, line); ++ln) {
    if (detail::trim(line).empty()) continue;
    const auto f = detail::split_csv_line(line);
    const std::string where = "manifest '" + manifest + "' row " + std::to_string(ln);
    if (f.size() != header.size())
      throw StructuralError(where + ": expected " + std::to_string(header.size()) + " fields, got " +
                            std::to_string(f.size()));
    ManifestRow r{ln, f[*pc], f[*lc], gc ? f[*gc] : std::string()};
    if (r.path.empty()) throw StructuralError(where + ": empty path");
    if (r.label.empty()) throw StructuralError(where + ": empty label");
    auto [it, fresh] = seen.emplace(r.path, std::make_pair(r.label, ln));
    if (!fresh && it->second.first != r.label)
      throw StructuralError(where + ": path '" + r.path + "' already labeled '" + it->second.first +
                            "' on row " + std::to_string(it->second.second));
    rows.push_back(std::move(r));
  }
  return rows;
}

// Loads a `path,label[,group]` CSV. Relative paths resolve against the
// manifest's directory. Sample order is manifest order.
inline Dataset load_manifest(const std::string& manifest, const ManifestOptions& opt = {}) {
  require(opt.height > 0 && opt.width > 0 && opt.channels > 0, "load_manifest: bad target shape");
  const auto rows = read_manifest_rows(manifest);
  Dataset d;
  d.class_names = opt.class_names;
  if (d.class_names.empty()) {
    std::set<std::string> uniq;
    for (const auto& r : rows) uniq.insert(r.label);
    d.class_names.assign(uniq.begin(), uniq.end());
    if (std::all_of(d.class_names.begin(), d.class_names.end(), detail::is_integer))
      std::sort(d.class_names.begin(), d.class_names.end(), [](const std::string& a, const std::string& b) {
        return std::stoull(a) < std::stoull(b);
      });
  }
  const std::filesystem::path base = std::filesystem::path(manifest).parent_path();
  for (const auto& r : rows) {
    const std::string where = "manifest '" + manifest + "' row " + std::to_string(r.line);
    auto it = std::find(d.class_names.begin(), d.class_names.end(), r.label);
    if (it == d.class_names.end()) throw StructuralError(where + ": unknown label '" + r.label + "'");
    std::filesystem::path p(r.path);
    if (p.is_relative()) p = base / p;
    if (!std::filesystem::exists(p)) throw StructuralError(where + ": missing file '" + p.string() + "'");
    Tensor<float> img;
    try {
      img = read_png(p.string());
    } catch (const StructuralError& e) {
      throw StructuralError(where + ": " + e.what());
    }
    img = resize_bilinear(match_channels(img, opt.channels), opt.height, opt.width);
    d.samples.push_back(
        Sample{std::move(img), static_cast<std::size_t>(it - d.class_names.begin()), r.path, r.group});
  }
  return d;
}

// ---------------------------------------------------------------- synthetic

struct SyntheticSpec {
  std::size_t num_classes = 4, per_class = 30, resolution = 64, channels = 3;
  std::uint64_t seed = 0;
  double noise = 0.1;  // std of additive pixel noise; 0 gives the noise-free variant
};

// Class c: a grating at angle pi*c/K with frequency 2+c cycles per image and a
// random per-sample phase, over a linear ramp along the same angle. Samples
// also get contrast jitter and Gaussian pixel noise.
inline Dataset generate_synthetic(const SyntheticSpec& s) {
  require(s.num_classes >= 1 && s.per_class >= 1, "generate_synthetic: counts must be >= 1");
  require(s.resolution >= 1 && s.channels >= 1, "generate_synthetic: bad image shape");
  require(s.noise >= 0, "generate_synthetic: noise must be >= 0");
  Dataset d;
  for (std::size_t c = 0; c < s.num_classes; ++c) d.class_names.push_back("class" + std::to_string(c));
  const std::size_t R = s.resolution;
  for (std::size_t c = 0; c < s.num_classes; ++c) {
    const double theta = std::numbers::pi * static_cast<double>(c) / static_cast<double>(s.num_classes);
    const double ct = std::cos(theta), st = std::sin(theta);
    const double freq = 2.0 + static_cast<double>(c);
    for (std::size_t i = 0; i < s.per_class; ++i) {
      std::mt19937_64 rng(derive_seed(s.seed, c * s.per_class + i));
      std::uniform_real_distribution<double> phase_d(0.0, 2.0 * std::numbers::pi), contrast_d(0.8, 1.2);
      std::normal_distribution<double> noise_d(0.0, 1.0);
      const double phase = phase_d(rng), contrast = contrast_d(rng);
      Tensor<float> img({s.channels, R, R});
      for (std::size_t y = 0; y < R; ++y)
        for (std::size_t x = 0; x < R; ++x) {
          const double u = (static_cast<double>(x) + 0.5) / static_cast<double>(R) - 0.5;
          const double v = (static_cast<double>(y) + 0.5) / static_cast<double>(R) - 0.5;
          const double proj = u * ct + v * st;
          double val = 0.5 + contrast * (0.15 * std::sin(2.0 * std::numbers::pi * freq * proj + phase) +
                                         0.6 * proj);
          if (s.noise > 0) val += s.noise * noise_d(rng);
          const float f = static_cast<float>(std::clamp(val, 0.0, 1.0));
          for (std::size_t ch = 0; ch < s.channels; ++ch) img.data()[(ch * R + y) * R + x] = f;
        }
      d.samples.push_back(Sample{std::move(img), c,
                                 "class" + std::to_string(c) + "_" + std::to_string(i) + ".png", ""});
    }
  }
  return d;
}

// Writes images/<source> PNGs plus manifest.csv; returns the manifest path.
inline std::string write_dataset(const Dataset& d, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "images");
  const fs::path manifest = fs::path(dir) / "manifest.csv";
  std::ofstream out(manifest);
  if (!out) throw StructuralError("cannot write '" + manifest.string() + "'");
  out << "path,label\n";
  for (const auto& s : d.samples) {
    const fs::path rel = fs::path("images") / s.source;
    auto img = s.image;
    if (img.dim(0) != 1 && img.dim(0) != 3) img = match_channels(img, 1);
    write_png((fs::path(dir) / rel).string(), img);
    out << rel.generic_string() << ',' << d.class_names.at(s.label) << '\n';
  }
  return manifest.string();
}

// ---------------------------------------------------------------- folds

struct FoldPlan {
  std::size_t num_folds = 0;
  std::vector<std::size_t> assignments;  // fold index per sample
  std::uint64_t seed = 0;
  std::vector<std::string> warnings;

  std::vector<std::size_t> fold(std::size_t f) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < assignments.size(); ++i)
      if (assignments[i] == f) out.push_back(i);
    return out;
  }
  std::vector<std::size_t> complement(std::size_t f) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < assignments.size(); ++i)
      if (assignments[i] != f) out.push_back(i);
    return out;
  }
};

namespace detail {

template <typename V>
void seeded_shuffle(V& v, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[uniform_index(rng, i)]);
}

}  // namespace detail

// Per class: seeded shuffle, then deal round-robin. The dealing position
// carries over between classes so total fold sizes also differ by at most 1.
// With groups, each group is dealt as one unit under its first sample's label.
inline FoldPlan stratified_folds(const std::vector<std::size_t>& labels, std::size_t num_folds,
                                 std::uint64_t seed, const std::vector<std::string>& groups = {}) {
  require(num_folds >= 2, "stratified_folds: num_folds must be >= 2");
  require(num_folds <= labels.size(), "stratified_folds: num_folds " + std::to_string(num_folds) +
                                          " exceeds dataset size " + std::to_string(labels.size()));
  require(groups.empty() || groups.size() == labels.size(), "stratified_folds: groups length mismatch");
  FoldPlan plan;
  plan.num_folds = num_folds;
  plan.seed = seed;
  plan.assignments.assign(labels.size(), 0);

  // Units: lists of sample indices dealt together.
  std::map<std::size_t, std::vector<std::vector<std::size_t>>> by_class;
  std::map<std::string, std::size_t> group_unit;  // group -> position in its class list
  std::map<std::string, std::size_t> group_class;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const std::string g = groups.empty() ? std::string() : groups[i];
    if (g.empty()) {
      by_class[labels[i]].push_back({i});
      continue;
    }
    auto it = group_unit.find(g);
    if (it == group_unit.end()) {
      group_unit[g] = by_class[labels[i]].size();
      group_class[g] = labels[i];
      by_class[labels[i]].push_back({i});
    } else {
      by_class[group_class[g]][it->second].push_back(i);
    }
  }

  std::size_t next = 0;
  for (auto& [label, units] : by_class) {
    std::size_t count = 0;
    for (const auto& u : units) count += u.size();
    if (count < num_folds)
      plan.warnings.push_back("class " + std::to_string(label) + " has " + std::to_string(count) +
                              " sample(s), fewer than " + std::to_string(num_folds) + " folds");
    detail::seeded_shuffle(units, derive_seed(seed, label));
    for (const auto& u : units) {
      for (auto i : u) plan.assignments[i] = next;
      next = (next + 1) % num_folds;
    }
  }
  return plan;
}

inline FoldPlan stratified_folds(const Dataset& d, std::size_t num_folds, std::uint64_t seed) {
  std::vector<std::string> groups;
  if (std::any_of(d.samples.begin(), d.samples.end(), [](const Sample& s) { return !s.group.empty(); }))
    for (const auto& s : d.samples) groups.push_back(s.group);
  return stratified_folds(d.labels(), num_folds, seed, groups);
}

}  // namespace cmi
