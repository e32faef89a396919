#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "colvne/parallel.hpp"
#include "colvne/rng.hpp"
#include "colvne/tensor.hpp"

namespace colvne {

// Images are (3, H, W) tensors with values in [0, 1].
using ImageTensor = Tensor;

struct ImageDims {
  std::size_t channels, height, width;
};

inline ImageDims image_dims(const ImageTensor& img) {
  if (img.rank() != 3 || img.shape()[0] != 3)
    throw ShapeError("image: expected (3,H,W), got " + shape_str(img.shape()));
  return {img.shape()[0], img.shape()[1], img.shape()[2]};
}

struct AugmentConfig {
  std::size_t global_size = 32;
  std::size_t local_size = 16;
  std::size_t local_views = 2;
  double global_scale_min = 0.5, global_scale_max = 1.0;
  double local_scale_min = 0.15, local_scale_max = 0.5;
  double jitter_min = 0.6, jitter_max = 1.4;
  double flip_probability = 0.5;
  double blur_probability = 0.5;
  double blur_sigma_min = 0.1, blur_sigma_max = 2.0;

  std::size_t views() const { return 2 + local_views; }
};

// Bilinear resample of the window (top, left, h, w) to out_h × out_w using
// pixel-centre alignment.
inline ImageTensor crop_resize(const ImageTensor& img, double top, double left, double h, double w,
                               std::size_t out_h, std::size_t out_w) {
  const auto d = image_dims(img);
  ImageTensor out({3, out_h, out_w});
  const double sy = h / static_cast<double>(out_h), sx = w / static_cast<double>(out_w);
  for (std::size_t i = 0; i < out_h; ++i) {
    const double y = std::clamp(top + (static_cast<double>(i) + 0.5) * sy - 0.5, 0.0,
                                static_cast<double>(d.height - 1));
    const std::size_t y0 = static_cast<std::size_t>(y);
    const std::size_t y1 = std::min(y0 + 1, d.height - 1);
    const double fy = y - static_cast<double>(y0);
    for (std::size_t j = 0; j < out_w; ++j) {
      const double x = std::clamp(left + (static_cast<double>(j) + 0.5) * sx - 0.5, 0.0,
                                  static_cast<double>(d.width - 1));
      const std::size_t x0 = static_cast<std::size_t>(x);
      const std::size_t x1 = std::min(x0 + 1, d.width - 1);
      const double fx = x - static_cast<double>(x0);
      for (std::size_t c = 0; c < 3; ++c) {
        const double* p = img.data().data() + c * d.height * d.width;
        const double top_v = p[y0 * d.width + x0] * (1 - fx) + p[y0 * d.width + x1] * fx;
        const double bot_v = p[y1 * d.width + x0] * (1 - fx) + p[y1 * d.width + x1] * fx;
        out[(c * out_h + i) * out_w + j] = top_v * (1 - fy) + bot_v * fy;
      }
    }
  }
  return out;
}

inline ImageTensor resize(const ImageTensor& img, std::size_t out_h, std::size_t out_w) {
  const auto d = image_dims(img);
  if (d.height == out_h && d.width == out_w) return img;
  return crop_resize(img, 0.0, 0.0, static_cast<double>(d.height), static_cast<double>(d.width),
                     out_h, out_w);
}

// Centre square crop of side min(H, W), resized to size × size.
inline ImageTensor center_crop(const ImageTensor& img, std::size_t size) {
  const auto d = image_dims(img);
  const double side = static_cast<double>(std::min(d.height, d.width));
  return crop_resize(img, (static_cast<double>(d.height) - side) / 2,
                     (static_cast<double>(d.width) - side) / 2, side, side, size, size);
}

// Square crop covering a uniform fraction of the image area.
inline ImageTensor random_resized_crop(const ImageTensor& img, double scale_min, double scale_max,
                                       std::size_t out, KeyedRng& rng) {
  const auto d = image_dims(img);
  if (out > std::min(d.height, d.width))
    throw ContractError("multi_crop: crop size " + std::to_string(out) + " larger than image " +
                        shape_str(img.shape()));
  const double area = static_cast<double>(d.height * d.width) * rng.uniform(scale_min, scale_max);
  const double side = std::min(std::sqrt(area), static_cast<double>(std::min(d.height, d.width)));
  const double top = rng.uniform() * (static_cast<double>(d.height) - side);
  const double left = rng.uniform() * (static_cast<double>(d.width) - side);
  return crop_resize(img, top, left, side, side, out, out);
}

inline ImageTensor flip_horizontal(const ImageTensor& img) {
  const auto d = image_dims(img);
  ImageTensor out(img.shape());
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < d.height; ++i)
      for (std::size_t j = 0; j < d.width; ++j)
        out[(c * d.height + i) * d.width + j] = img[(c * d.height + i) * d.width + (d.width - 1 - j)];
  return out;
}

inline ImageTensor random_flip(const ImageTensor& img, KeyedRng& rng, double p = 0.5) {
  return rng.bernoulli(p) ? flip_horizontal(img) : img;
}

inline void clamp_unit(ImageTensor& img) {
  for (auto& v : img.data()) v = std::clamp(v, 0.0, 1.0);
}

inline ImageTensor adjust_brightness(ImageTensor img, double factor) {
  img *= factor;
  clamp_unit(img);
  return img;
}

inline ImageTensor adjust_contrast(ImageTensor img, double factor) {
  const auto d = image_dims(img);
  const std::size_t hw = d.height * d.width;
  double mean = 0.0;
  for (std::size_t k = 0; k < hw; ++k)
    mean += 0.299 * img[k] + 0.587 * img[hw + k] + 0.114 * img[2 * hw + k];
  mean /= static_cast<double>(hw);
  for (auto& v : img.data()) v = mean + factor * (v - mean);
  clamp_unit(img);
  return img;
}

inline ImageTensor adjust_saturation(ImageTensor img, double factor) {
  const auto d = image_dims(img);
  const std::size_t hw = d.height * d.width;
  for (std::size_t k = 0; k < hw; ++k) {
    const double gray = 0.299 * img[k] + 0.587 * img[hw + k] + 0.114 * img[2 * hw + k];
    for (std::size_t c = 0; c < 3; ++c) img[c * hw + k] = gray + factor * (img[c * hw + k] - gray);
  }
  clamp_unit(img);
  return img;
}

inline ImageTensor color_jitter(const ImageTensor& img, KeyedRng& rng, double lo = 0.6,
                                double hi = 1.4) {
  ImageTensor out = adjust_brightness(img, rng.uniform(lo, hi));
  out = adjust_contrast(std::move(out), rng.uniform(lo, hi));
  return adjust_saturation(std::move(out), rng.uniform(lo, hi));
}

// Separable 5×5 Gaussian, edge pixels replicated.
inline ImageTensor blur(const ImageTensor& img, double sigma) {
  const auto d = image_dims(img);
  double k[5];
  double ks = 0.0;
  for (int t = -2; t <= 2; ++t) ks += (k[t + 2] = std::exp(-0.5 * t * t / (sigma * sigma)));
  for (double& v : k) v /= ks;
  auto at = [](std::size_t i, int off, std::size_t n) {
    const long j = std::clamp(static_cast<long>(i) + off, 0L, static_cast<long>(n) - 1);
    return static_cast<std::size_t>(j);
  };
  ImageTensor tmp(img.shape()), out(img.shape());
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < d.height; ++i)
      for (std::size_t j = 0; j < d.width; ++j) {
        double s = 0.0;
        for (int t = -2; t <= 2; ++t) s += k[t + 2] * img[(c * d.height + i) * d.width + at(j, t, d.width)];
        tmp[(c * d.height + i) * d.width + j] = s;
      }
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < d.height; ++i)
      for (std::size_t j = 0; j < d.width; ++j) {
        double s = 0.0;
        for (int t = -2; t <= 2; ++t) s += k[t + 2] * tmp[(c * d.height + at(i, t, d.height)) * d.width + j];
        out[(c * d.height + i) * d.width + j] = s;
      }
  clamp_unit(out);
  return out;
}

inline ImageTensor gaussian_blur(const ImageTensor& img, KeyedRng& rng, double p = 0.5,
                                 double sigma_min = 0.1, double sigma_max = 2.0) {
  if (!rng.bernoulli(p)) return img;
  return blur(img, rng.uniform(sigma_min, sigma_max));
}

inline ImageTensor augment_view(ImageTensor view, KeyedRng& rng, const AugmentConfig& cfg) {
  view = random_flip(view, rng, cfg.flip_probability);
  view = color_jitter(view, rng, cfg.jitter_min, cfg.jitter_max);
  return gaussian_blur(view, rng, cfg.blur_probability, cfg.blur_sigma_min, cfg.blur_sigma_max);
}

// 2 global views then `local_views` local views.
inline std::vector<ImageTensor> multi_crop(const ImageTensor& img, const AugmentConfig& cfg,
                                           KeyedRng& rng) {
  const auto d = image_dims(img);
  if (cfg.global_size > std::min(d.height, d.width))
    throw ContractError("multi_crop: global size " + std::to_string(cfg.global_size) +
                        " larger than image " + shape_str(img.shape()));
  if (cfg.local_size > cfg.global_size)
    throw ContractError("multi_crop: local size exceeds global size");
  std::vector<ImageTensor> views;
  views.reserve(cfg.views());
  for (int k = 0; k < 2; ++k)
    views.push_back(augment_view(
        random_resized_crop(img, cfg.global_scale_min, cfg.global_scale_max, cfg.global_size, rng),
        rng, cfg));
  for (std::size_t k = 0; k < cfg.local_views; ++k)
    views.push_back(augment_view(
        random_resized_crop(img, cfg.local_scale_min, cfg.local_scale_max, cfg.local_size, rng), rng,
        cfg));
  return views;
}

// Views of one training sample plus the key that reproduces them.
struct MultiCropEntry {
  std::vector<ImageTensor> views;
  std::uint64_t seed = 0, epoch = 0, index = 0;
};

struct MultiCropBatch {
  std::vector<MultiCropEntry> samples;
  std::size_t global_size = 0, local_size = 0, local_views = 0;
};

inline MultiCropEntry multi_crop_keyed(const ImageTensor& img, const AugmentConfig& cfg,
                                       std::uint64_t seed, std::uint64_t epoch, std::uint64_t index) {
  KeyedRng rng(seed, Stream::augment, {epoch, index});
  return {multi_crop(img, cfg, rng), seed, epoch, index};
}

// Sample k uses the stream keyed by (seed, epoch, indices[k]).
inline MultiCropBatch augment_batch(std::span<const ImageTensor> images,
                                    std::span<const std::size_t> indices, const AugmentConfig& cfg,
                                    std::uint64_t seed, std::uint64_t epoch) {
  MultiCropBatch batch;
  batch.global_size = cfg.global_size;
  batch.local_size = cfg.local_size;
  batch.local_views = cfg.local_views;
  batch.samples.resize(indices.size());
  parallel_for(indices.size(), [&](std::size_t k) {
    batch.samples[k] = multi_crop_keyed(images[indices[k]], cfg, seed, epoch, indices[k]);
  });
  return batch;
}

// (views·N, 3, S, S), view-major: rows [v·N, (v+1)·N) hold view v of every
// sample. Local views are upsampled to S.
inline Tensor stack_views(const MultiCropBatch& batch, std::size_t size) {
  const std::size_t n = batch.samples.size();
  const std::size_t v = 2 + batch.local_views;
  const std::size_t plane = 3 * size * size;
  Tensor out({v * n, 3, size, size});
  parallel_for(v * n, [&](std::size_t r) {
    const std::size_t view = r / n, sample = r % n;
    const ImageTensor img = resize(batch.samples[sample].views[view], size, size);
    std::copy(img.data().begin(), img.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(r * plane));
  });
  return out;
}

inline Tensor stack_images(std::span<const ImageTensor> images, std::size_t size) {
  const std::size_t plane = 3 * size * size;
  Tensor out({images.size(), 3, size, size});
  parallel_for(images.size(), [&](std::size_t r) {
    const ImageTensor img = center_crop(images[r], size);
    std::copy(img.data().begin(), img.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(r * plane));
  });
  return out;
}

}  // namespace colvne
