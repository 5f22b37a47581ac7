#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "fedcil/error.hpp"
#include "fedcil/rng.hpp"
#include "fedcil/tensor.hpp"

// Desk-scale labeled datasets: a class-conditional Gaussian mixture on a
// circle and an 8x8 glyph-based digit surrogate. Both are deterministic
// functions of their seed.

namespace fedcil {

struct LabeledDataset {
  std::string name;
  std::size_t data_dim = 0;
  std::size_t num_classes = 0;
  Tensor samples;               // [N x data_dim]
  std::vector<int> labels;      // N entries, each < num_classes
  std::vector<std::vector<std::size_t>> class_indices;  // partition of 0..N

  std::size_t size() const { return labels.size(); }

  // Row-gather into a batch tensor.
  Tensor gather(std::span<const std::size_t> idx) const {
    return gather_rows(samples, idx);
  }

  std::vector<int> gather_labels(std::span<const std::size_t> idx) const {
    std::vector<int> out(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) out[i] = labels[idx[i]];
    return out;
  }
};

namespace detail {

inline LabeledDataset finish_dataset(std::string name, std::size_t data_dim,
                                     std::size_t num_classes,
                                     std::vector<double> values,
                                     std::vector<int> labels) {
  LabeledDataset d;
  d.name = std::move(name);
  d.data_dim = data_dim;
  d.num_classes = num_classes;
  d.samples = Tensor::from({labels.size(), data_dim}, std::move(values));
  d.labels = std::move(labels);
  d.class_indices.resize(num_classes);
  for (std::size_t i = 0; i < d.labels.size(); ++i) {
    d.class_indices[static_cast<std::size_t>(d.labels[i])].push_back(i);
  }
  return d;
}

}  // namespace detail

// Class centroids on a circle of radius 2 in the first two coordinates.
inline std::vector<double> mixture_centroid(std::size_t k,
                                            std::size_t num_classes,
                                            std::size_t data_dim) {
  std::vector<double> c(data_dim, 0.0);
  const double angle =
      2.0 * M_PI * static_cast<double>(k) / static_cast<double>(num_classes);
  c[0] = 2.0 * std::cos(angle);
  if (data_dim >= 2) c[1] = 2.0 * std::sin(angle);
  return c;
}

// Gaussian blobs (sigma 0.35) around the circle centroids, clipped into
// [-1, 1] per coordinate.
inline LabeledDataset make_synthetic_mixture(std::size_t num_classes,
                                             std::size_t samples_per_class,
                                             std::size_t data_dim,
                                             std::uint64_t seed) {
  if (num_classes < 2 || data_dim < 2) {
    throw ConfigError("make_synthetic_mixture: need >= 2 classes and dims");
  }
  constexpr double kSigma = 0.35;
  Rng rng(derive_seed(seed, 0x6d697874));  // "mixt"
  std::vector<double> values;
  values.reserve(num_classes * samples_per_class * data_dim);
  std::vector<int> labels;
  labels.reserve(num_classes * samples_per_class);
  for (std::size_t k = 0; k < num_classes; ++k) {
    const std::vector<double> c = mixture_centroid(k, num_classes, data_dim);
    for (std::size_t s = 0; s < samples_per_class; ++s) {
      for (std::size_t d = 0; d < data_dim; ++d) {
        values.push_back(std::clamp(c[d] + rng.normal(0.0, kSigma), -1.0, 1.0));
      }
      labels.push_back(static_cast<int>(k));
    }
  }
  return detail::finish_dataset("mixture", data_dim, num_classes,
                                std::move(values), std::move(labels));
}

// 8x8 digit glyphs, one per class; stroke pixels +1, background -1.
inline const std::array<std::array<const char*, 8>, 10>& tiny_digit_rows() {
  static const std::array<std::array<const char*, 8>, 10> glyphs = {{
      // 0
      {{"..XXXX..", ".X....X.", ".X...XX.", ".X..X.X.", ".X.X..X.",
        ".XX...X.", ".X....X.", "..XXXX.."}},
      // 1
      {{"...XX...", "..XXX...", "...XX...", "...XX...", "...XX...",
        "...XX...", "...XX...", ".XXXXXX."}},
      // 2
      {{"..XXXX..", ".X....X.", "......X.", ".....X..", "....X...",
        "...X....", "..X.....", ".XXXXXX."}},
      // 3
      {{"..XXXX..", ".X....X.", "......X.", "...XXX..", "......X.",
        "......X.", ".X....X.", "..XXXX.."}},
      // 4
      {{"....XX..", "...X.X..", "..X..X..", ".X...X..", ".XXXXXX.",
        ".....X..", ".....X..", ".....X.."}},
      // 5
      {{".XXXXXX.", ".X......", ".X......", ".XXXXX..", "......X.",
        "......X.", ".X....X.", "..XXXX.."}},
      // 6
      {{"..XXXX..", ".X......", ".X......", ".XXXXX..", ".X....X.",
        ".X....X.", ".X....X.", "..XXXX.."}},
      // 7
      {{".XXXXXX.", "......X.", ".....X..", "....X...", "....X...",
        "...X....", "...X....", "...X...."}},
      // 8
      {{"..XXXX..", ".X....X.", ".X....X.", "..XXXX..", ".X....X.",
        ".X....X.", ".X....X.", "..XXXX.."}},
      // 9
      {{"..XXXX..", ".X....X.", ".X....X.", ".X....X.", "..XXXXX.",
        "......X.", "......X.", "..XXXX.."}},
  }};
  return glyphs;
}

// The noiseless 64-dim template for class k.
inline std::vector<double> tiny_digit_glyph(std::size_t k) {
  if (k >= 10) throw RangeError("tiny_digit_glyph: class out of range");
  const auto& rows = tiny_digit_rows()[k];
  std::vector<double> v;
  v.reserve(64);
  for (const char* row : rows) {
    for (std::size_t c = 0; c < 8; ++c) {
      v.push_back(row[c] == 'X' ? 1.0 : -1.0);
    }
  }
  return v;
}

// 10-class 64-dim surrogate: glyph templates + Gaussian pixel noise
// (sigma 0.15), clipped to [-1, 1]. 200 samples per class.
inline LabeledDataset make_tiny_digits(std::uint64_t seed) {
  constexpr std::size_t kPerClass = 200;
  constexpr double kSigma = 0.15;
  Rng rng(derive_seed(seed, 0x64696769));  // "digi"
  std::vector<double> values;
  values.reserve(10 * kPerClass * 64);
  std::vector<int> labels;
  labels.reserve(10 * kPerClass);
  for (std::size_t k = 0; k < 10; ++k) {
    const std::vector<double> glyph = tiny_digit_glyph(k);
    for (std::size_t s = 0; s < kPerClass; ++s) {
      for (double g : glyph) {
        values.push_back(std::clamp(g + rng.normal(0.0, kSigma), -1.0, 1.0));
      }
      labels.push_back(static_cast<int>(k));
    }
  }
  return detail::finish_dataset("tiny_digits", 64, 10, std::move(values),
                                std::move(labels));
}

}  // namespace fedcil
