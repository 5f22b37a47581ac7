#pragma once

// Independent oracles for [DERIVED] expectations: nearest-centroid
// classification on the known mixture, a hand-rolled softmax-regression
// linear probe (no autodiff involved), and binomial bounds for
// random-classifier baselines.

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "fedcil/dataset.hpp"

namespace fedcil::testing {

inline std::vector<std::vector<double>> empirical_centroids(
    const LabeledDataset& d) {
  std::vector<std::vector<double>> cents(
      d.num_classes, std::vector<double>(d.data_dim, 0.0));
  std::vector<std::size_t> counts(d.num_classes, 0);
  for (std::size_t i = 0; i < d.size(); ++i) {
    const auto k = static_cast<std::size_t>(d.labels[i]);
    for (std::size_t j = 0; j < d.data_dim; ++j) {
      cents[k][j] += d.samples.v(i * d.data_dim + j);
    }
    ++counts[k];
  }
  for (std::size_t k = 0; k < d.num_classes; ++k) {
    for (double& v : cents[k]) v /= static_cast<double>(counts[k]);
  }
  return cents;
}

inline int nearest_centroid(const std::vector<std::vector<double>>& cents,
                            std::span<const double> x) {
  int best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < cents.size(); ++k) {
    double dist = 0.0;
    for (std::size_t j = 0; j < x.size(); ++j) {
      const double diff = x[j] - cents[k][j];
      dist += diff * diff;
    }
    if (dist < best_d) {
      best_d = dist;
      best = static_cast<int>(k);
    }
  }
  return best;
}

inline double nearest_centroid_accuracy(const LabeledDataset& d) {
  const auto cents = empirical_centroids(d);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    std::span<const double> row(d.samples.values().data() + i * d.data_dim,
                                d.data_dim);
    if (nearest_centroid(cents, row) == d.labels[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(d.size());
}

// Softmax regression trained by plain full-batch gradient descent with the
// closed-form gradient (p - y) x; measures linear separability.
inline double linear_probe_accuracy(const LabeledDataset& d, int iters = 300,
                                    double lr = 0.5) {
  const std::size_t c = d.num_classes, dim = d.data_dim, n = d.size();
  std::vector<double> w(c * dim, 0.0), b(c, 0.0);
  std::vector<double> probs(c);
  std::vector<double> gw(c * dim), gb(c);
  for (int it = 0; it < iters; ++it) {
    std::fill(gw.begin(), gw.end(), 0.0);
    std::fill(gb.begin(), gb.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const double* x = d.samples.values().data() + i * dim;
      double mx = -1e300;
      for (std::size_t k = 0; k < c; ++k) {
        double z = b[k];
        for (std::size_t j = 0; j < dim; ++j) z += w[k * dim + j] * x[j];
        probs[k] = z;
        mx = std::max(mx, z);
      }
      double zsum = 0.0;
      for (std::size_t k = 0; k < c; ++k) {
        probs[k] = std::exp(probs[k] - mx);
        zsum += probs[k];
      }
      for (std::size_t k = 0; k < c; ++k) {
        const double p = probs[k] / zsum;
        const double delta =
            p - (d.labels[i] == static_cast<int>(k) ? 1.0 : 0.0);
        gb[k] += delta;
        for (std::size_t j = 0; j < dim; ++j) gw[k * dim + j] += delta * x[j];
      }
    }
    const double scale = lr / static_cast<double>(n);
    for (std::size_t k = 0; k < c * dim; ++k) w[k] -= scale * gw[k];
    for (std::size_t k = 0; k < c; ++k) b[k] -= scale * gb[k];
  }
  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* x = d.samples.values().data() + i * dim;
    int best = 0;
    double best_z = -1e300;
    for (std::size_t k = 0; k < c; ++k) {
      double z = b[k];
      for (std::size_t j = 0; j < dim; ++j) z += w[k * dim + j] * x[j];
      if (z > best_z) {
        best_z = z;
        best = static_cast<int>(k);
      }
    }
    if (best == d.labels[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(n);
}

// 3-sigma binomial band around accuracy p0 for n trials.
inline bool within_binomial_band(double observed, double p0, std::size_t n,
                                 double sigmas = 3.0) {
  const double sd = std::sqrt(p0 * (1.0 - p0) / static_cast<double>(n));
  return std::abs(observed - p0) <= sigmas * sd;
}

}  // namespace fedcil::testing
