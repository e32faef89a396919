#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "colvne/augment.hpp"
#include "colvne/rng.hpp"
#include "colvne/tensor.hpp"

namespace colvne {

enum class Split { train, val };

inline const char* split_name(Split s) { return s == Split::train ? "train" : "val"; }

// Labels are read by evaluation only; training consumes images.
struct Dataset {
  std::vector<ImageTensor> images;
  std::vector<std::size_t> labels;
  std::size_t num_classes = 0;
  Split split = Split::train;

  std::size_t size() const { return images.size(); }

  void validate() const {
    if (images.size() != labels.size())
      throw ContractError("dataset: " + std::to_string(images.size()) + " images but " +
                          std::to_string(labels.size()) + " labels");
    std::vector<std::size_t> counts(num_classes, 0);
    for (std::size_t y : labels) {
      if (y >= num_classes)
        throw ContractError("dataset: label " + std::to_string(y) + " outside [0, " +
                            std::to_string(num_classes) + ")");
      ++counts[y];
    }
    const auto populated = std::count_if(counts.begin(), counts.end(), [](std::size_t c) { return c >= 2; });
    if (populated < 2) throw ContractError("dataset: need at least 2 classes with 2 samples each");
  }
};

struct DataSplits {
  Dataset train, val;
};

struct LongTailSpec {
  std::size_t classes = 6;
  std::size_t n_max = 400;
  double rho = 10.0;
  std::size_t image_size = 32;
  double noise = 0.05;
};

inline std::vector<std::size_t> class_counts(const LongTailSpec& spec) {
  if (spec.classes < 2) throw ContractError("long-tail: need at least 2 classes");
  if (!(spec.rho >= 1.0)) throw ContractError("long-tail: imbalance ratio must be >= 1");
  if (spec.n_max < 2) throw ContractError("long-tail: class 0 would have fewer than 2 samples");
  std::vector<std::size_t> counts(spec.classes);
  const double denom = static_cast<double>(spec.classes - 1);
  for (std::size_t c = 0; c < spec.classes; ++c) {
    const double n = static_cast<double>(spec.n_max) * std::pow(spec.rho, -static_cast<double>(c) / denom);
    counts[c] = std::max<std::size_t>(2, static_cast<std::size_t>(std::llround(n)));
  }
  return counts;
}

namespace detail {

inline void hsv_to_rgb(double h, double s, double v, double rgb[3]) {
  h = h - std::floor(h);
  const double hh = h * 6.0;
  const int sector = static_cast<int>(hh) % 6;
  const double f = hh - std::floor(hh);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  const double table[6][3] = {{v, t, p}, {q, v, p}, {p, v, t}, {p, q, v}, {t, p, v}, {v, p, q}};
  for (int k = 0; k < 3; ++k) rgb[k] = table[sector][k];
}

// Class prototype: hue shared by every third class, stripe frequency and
// orientation per class; phase, hue shift, contrast and saturation vary per
// image.
inline ImageTensor render_sample(std::size_t cls, std::size_t classes, std::size_t size, double noise,
                                 KeyedRng& rng) {
  const double pi = std::numbers::pi;
  const std::size_t hues = std::min<std::size_t>(3, classes);
  const double hue = static_cast<double>(cls % hues) / static_cast<double>(hues) + 0.05 * rng.normal();
  const double freq = 1.5 + 1.5 * static_cast<double>((cls / hues) % 3);
  const double angle = pi * static_cast<double>(cls) / static_cast<double>(classes) + 0.3 * rng.normal();
  const double phase = 2 * pi * rng.uniform();
  const double amp = rng.uniform(0.15, 0.35);
  const double sat = rng.uniform(0.3, 0.75);
  const double ca = std::cos(angle), sa = std::sin(angle);
  // Class-independent nuisance: illumination gradient, tinted background
  // texture, one tinted spot.
  const double bg_hue = rng.uniform(), spot_hue = rng.uniform();
  double bg_rgb[3], spot_rgb[3];
  hsv_to_rgb(bg_hue, 0.8, 1.0, bg_rgb);
  hsv_to_rgb(spot_hue, 0.8, 0.7, spot_rgb);
  const double light = rng.uniform(0.0, 0.25), light_dir = 2 * pi * rng.uniform();
  const double bg_freq = rng.uniform(3.0, 6.0), bg_dir = 2 * pi * rng.uniform(), bg_phase = 2 * pi * rng.uniform();
  const double spot_y = rng.uniform(), spot_x = rng.uniform(), spot_r = rng.uniform(0.1, 0.25);
  const double spot_depth = rng.uniform(0.1, 0.3);
  ImageTensor img({3, size, size});
  const std::size_t hw = size * size;
  for (std::size_t i = 0; i < size; ++i)
    for (std::size_t j = 0; j < size; ++j) {
      const double x = static_cast<double>(j) / static_cast<double>(size);
      const double y = static_cast<double>(i) / static_cast<double>(size);
      const double u = x * ca + y * sa;
      const double spot = std::exp(-((x - spot_x) * (x - spot_x) + (y - spot_y) * (y - spot_y)) /
                                   (2 * spot_r * spot_r));
      const double v = 0.55 + amp * std::sin(2 * pi * freq * u + phase) +
                       light * ((x - 0.5) * std::cos(light_dir) + (y - 0.5) * std::sin(light_dir));
      const double bg =
          0.125 * (1 + std::sin(2 * pi * bg_freq * (x * std::cos(bg_dir) + y * std::sin(bg_dir)) + bg_phase));
      const double sp = spot_depth * spot;
      double rgb[3];
      hsv_to_rgb(hue, sat, v, rgb);
      for (std::size_t c = 0; c < 3; ++c) {
        const double t = (1 - bg) * rgb[c] + bg * bg_rgb[c];
        img[c * hw + i * size + j] = std::clamp((1 - sp) * t + sp * spot_rgb[c] + noise * rng.normal(), 0.0, 1.0);
      }
    }
  return img;
}

}  // namespace detail

// 80/20 per-class split; membership drawn from its own stream.
inline DataSplits generate_longtail(const LongTailSpec& spec, std::uint64_t seed) {
  if (spec.image_size < 1) throw ContractError("long-tail: image size must be positive");
  const auto counts = class_counts(spec);
  DataSplits out;
  out.train.num_classes = out.val.num_classes = spec.classes;
  out.train.split = Split::train;
  out.val.split = Split::val;
  for (std::size_t c = 0; c < spec.classes; ++c) {
    std::vector<std::size_t> order(counts[c]);
    for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
    KeyedRng split_rng(seed, Stream::split, {c});
    for (std::size_t k = order.size(); k > 1; --k) std::swap(order[k - 1], order[split_rng.below(k)]);
    const std::size_t n_val = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(0.2 * static_cast<double>(counts[c]))));
    std::vector<bool> is_val(counts[c], false);
    for (std::size_t k = 0; k < n_val; ++k) is_val[order[k]] = true;
    for (std::size_t k = 0; k < counts[c]; ++k) {
      KeyedRng rng(seed, Stream::generate, {c, k});
      Dataset& dst = is_val[k] ? out.val : out.train;
      dst.images.push_back(detail::render_sample(c, spec.classes, spec.image_size, spec.noise, rng));
      dst.labels.push_back(c);
    }
  }
  return out;
}

// Binary PPM, maxval 255.
inline void write_ppm(const std::filesystem::path& path, const ImageTensor& img) {
  const auto d = image_dims(img);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os << "P6\n" << d.width << ' ' << d.height << "\n255\n";
  const std::size_t hw = d.height * d.width;
  std::vector<unsigned char> buf(3 * hw);
  for (std::size_t k = 0; k < hw; ++k)
    for (std::size_t c = 0; c < 3; ++c)
      buf[3 * k + c] = static_cast<unsigned char>(std::lround(std::clamp(img[c * hw + k], 0.0, 1.0) * 255.0));
  os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!os) throw IoError("short write to " + path.string());
}

inline ImageTensor read_ppm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  auto token = [&]() {
    std::string t;
    char ch;
    while (is.get(ch)) {
      if (ch == '#') {
        std::string skip;
        std::getline(is, skip);
      } else if (std::isspace(static_cast<unsigned char>(ch))) {
        if (!t.empty()) break;
      } else {
        t.push_back(ch);
      }
    }
    return t;
  };
  auto number = [&](const char* what) {
    const std::string t = token();
    if (t.empty() || !std::all_of(t.begin(), t.end(), [](char c) { return c >= '0' && c <= '9'; }))
      throw IoError(path.string() + ": malformed PPM header (" + what + ")");
    return std::stoul(t);
  };
  if (token() != "P6") throw IoError(path.string() + ": malformed PPM header (magic)");
  const std::size_t w = number("width"), h = number("height"), maxval = number("maxval");
  if (w == 0 || h == 0 || maxval == 0 || maxval > 255)
    throw IoError(path.string() + ": malformed PPM header (dimensions)");
  std::vector<unsigned char> buf(3 * w * h);
  is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (is.gcount() != static_cast<std::streamsize>(buf.size()))
    throw IoError(path.string() + ": truncated pixel data");
  ImageTensor img({3, h, w});
  const std::size_t hw = h * w;
  for (std::size_t k = 0; k < hw; ++k)
    for (std::size_t c = 0; c < 3; ++c)
      img[c * hw + k] = static_cast<double>(buf[3 * k + c]) / static_cast<double>(maxval);
  return img;
}

inline std::string sample_filename(std::size_t k) {
  char name[32];
  std::snprintf(name, sizeof name, "img_%05zu.ppm", k);
  return name;
}

inline void export_folder(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream csv(dir / "labels.csv", std::ios::binary);
  if (!csv) throw IoError("cannot write " + (dir / "labels.csv").string());
  csv << "filename,class_index\n";
  for (std::size_t k = 0; k < ds.size(); ++k) {
    write_ppm(dir / sample_filename(k), ds.images[k]);
    csv << sample_filename(k) << ',' << ds.labels[k] << '\n';
  }
}

// num_classes = 0 infers the class count from the largest label.
inline Dataset load_folder(const std::filesystem::path& dir, std::size_t num_classes = 0,
                           Split split = Split::train) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
  std::ifstream csv(dir / "labels.csv");
  if (!csv) throw IoError("missing labels.csv in " + dir.string());
  std::string line;
  if (!std::getline(csv, line) || line != "filename,class_index")
    throw IoError((dir / "labels.csv").string() + ": expected header filename,class_index");

  std::vector<std::pair<std::string, std::size_t>> rows;
  std::set<std::string> listed;
  std::vector<std::string> problems;
  std::size_t lineno = 1;
  while (std::getline(csv, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto comma = line.find(',');
    const std::string name = line.substr(0, comma);
    const std::string idx = comma == std::string::npos ? "" : line.substr(comma + 1);
    if (idx.empty() || !std::all_of(idx.begin(), idx.end(), [](char c) { return c >= '0' && c <= '9'; })) {
      problems.push_back("line " + std::to_string(lineno) + ": missing or invalid class index for " + name);
      continue;
    }
    const std::size_t y = std::stoul(idx);
    if (num_classes && y >= num_classes)
      problems.push_back(name + ": class index " + idx + " out of range");
    if (!fs::exists(dir / name)) problems.push_back(name + ": listed but missing");
    listed.insert(name);
    rows.emplace_back(name, y);
  }
  std::vector<std::string> unlisted;
  for (const auto& entry : fs::directory_iterator(dir))
    if (entry.path().extension() == ".ppm" && !listed.count(entry.path().filename().string()))
      unlisted.push_back(entry.path().filename().string());
  std::sort(unlisted.begin(), unlisted.end());
  for (const auto& name : unlisted) problems.push_back(name + ": file has no label row");
  if (!problems.empty()) {
    std::string msg = "ingestion failed for " + dir.string() + ":";
    for (const auto& p : problems) msg += "\n  " + p;
    throw IoError(msg);
  }

  Dataset ds;
  ds.split = split;
  for (const auto& [name, y] : rows) {
    ds.images.push_back(read_ppm(dir / name));
    ds.labels.push_back(y);
    ds.num_classes = std::max(ds.num_classes, y + 1);
  }
  if (num_classes) ds.num_classes = num_classes;
  return ds;
}

// Root layout: train/ and val/ folders plus meta.json with the class count
// and the generating spec.
inline void export_splits(const DataSplits& data, const std::filesystem::path& root,
                          const nlohmann::json& meta) {
  export_folder(data.train, root / "train");
  export_folder(data.val, root / "val");
  nlohmann::json m = meta;
  m["classes"] = data.train.num_classes;
  m["train_size"] = data.train.size();
  m["val_size"] = data.val.size();
  std::ofstream os(root / "meta.json");
  if (!os) throw IoError("cannot write " + (root / "meta.json").string());
  os << m.dump(2) << '\n';
}

inline DataSplits load_splits(const std::filesystem::path& root) {
  std::size_t classes = 0;
  if (std::ifstream is(root / "meta.json"); is) {
    try {
      classes = nlohmann::json::parse(is).at("classes").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
      throw IoError((root / "meta.json").string() + ": " + e.what());
    }
  }
  DataSplits out{load_folder(root / "train", classes, Split::train),
                 load_folder(root / "val", classes, Split::val)};
  const std::size_t c = std::max(out.train.num_classes, out.val.num_classes);
  out.train.num_classes = out.val.num_classes = c;
  return out;
}

// Seeded per-epoch permutation cut into full batches; the remainder is dropped.
inline std::vector<std::vector<std::size_t>> batch_iter(std::size_t n, std::size_t batch_size,
                                                        std::uint64_t epoch, std::uint64_t seed) {
  if (batch_size == 0 || batch_size > n)
    throw ContractError("batch_iter: batch size " + std::to_string(batch_size) + " vs " +
                        std::to_string(n) + " samples");
  std::vector<std::size_t> perm(n);
  for (std::size_t k = 0; k < n; ++k) perm[k] = k;
  KeyedRng rng(seed, Stream::shuffle, {epoch});
  for (std::size_t k = n; k > 1; --k) std::swap(perm[k - 1], perm[rng.below(k)]);
  std::vector<std::vector<std::size_t>> batches(n / batch_size);
  for (std::size_t b = 0; b < batches.size(); ++b)
    batches[b].assign(perm.begin() + static_cast<std::ptrdiff_t>(b * batch_size),
                      perm.begin() + static_cast<std::ptrdiff_t>((b + 1) * batch_size));
  return batches;
}

}  // namespace colvne
