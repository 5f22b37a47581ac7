#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "fedcil/acgan.hpp"
#include "fedcil/dataset.hpp"
#include "fedcil/task_stream.hpp"

// Evaluation and diagnostics: global/local accuracy with confusion counts,
// the classifier-head cross-entropy gradient-norm monitor, a Frechet-distance
// generator-quality proxy, and the start-of-round loss spike ratio.

namespace fedcil {

struct EvalReport {
  int round = -1;
  double global_accuracy = 0.0;
  std::size_t evaluated = 0;
  std::vector<std::vector<std::size_t>> confusion;  // [predicted][true]
  std::vector<double> per_class_accuracy;           // indexed by true class
  std::vector<std::size_t> per_class_counts;
  std::vector<double> local_accuracy;  // per client; filled by the caller
};

namespace detail {

inline int argmax_row(const Tensor& probs, std::size_t row) {
  int best = 0;
  const std::size_t c = probs.cols();
  for (std::size_t j = 1; j < c; ++j) {
    if (probs.at(row, j) > probs.at(row, static_cast<std::size_t>(best))) {
      best = static_cast<int>(j);
    }
  }
  return best;
}

}  // namespace detail

// Argmax predictions of the classifier materialized from `params` (works for
// full ACGAN parameter vectors and classifier-only ones alike).
inline std::vector<int> classifier_predict(const ParameterVector& params,
                                           const ModelConfig& cfg,
                                           const Tensor& x) {
  std::vector<int> out(x.rows());
  constexpr std::size_t kChunk = 512;
  for (std::size_t begin = 0; begin < x.rows(); begin += kChunk) {
    const std::size_t end = std::min(begin + kChunk, x.rows());
    std::vector<std::size_t> idx(end - begin);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = begin + i;
    GraphCtx ctx(params);
    Tensor probs = classifier_probs_graph(ctx, cfg, gather_rows(x, idx));
    for (std::size_t i = 0; i < idx.size(); ++i) {
      out[begin + i] = detail::argmax_row(probs, i);
    }
  }
  return out;
}

// Accuracy of the global classifier over the union of all clients' test
// indices for tasks <= upto_task, evaluated without task identities.
inline EvalReport evaluate_global(const ParameterVector& params,
                                  const ModelConfig& cfg,
                                  const LabeledDataset& data,
                                  std::span<const TaskStream> streams,
                                  std::size_t upto_task) {
  std::vector<std::size_t> test_union;
  for (const auto& s : streams) {
    for (std::size_t t = 0; t <= upto_task && t < s.num_tasks(); ++t) {
      test_union.insert(test_union.end(), s.tasks[t].test_indices.begin(),
                        s.tasks[t].test_indices.end());
    }
  }
  if (test_union.empty()) {
    throw EvalError("evaluate_global: empty test union");
  }
  const std::size_t k = data.num_classes;
  EvalReport rep;
  rep.evaluated = test_union.size();
  rep.confusion.assign(k, std::vector<std::size_t>(k, 0));
  rep.per_class_counts.assign(k, 0);
  rep.per_class_accuracy.assign(k, 0.0);

  Tensor x = data.gather(test_union);
  const std::vector<int> truth = data.gather_labels(test_union);
  const std::vector<int> pred = classifier_predict(params, cfg, x);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const auto p = static_cast<std::size_t>(pred[i]);
    const auto t = static_cast<std::size_t>(truth[i]);
    if (p < k) ++rep.confusion[p][t];
    ++rep.per_class_counts[t];
    if (pred[i] == truth[i]) ++hits;
  }
  for (std::size_t c = 0; c < k; ++c) {
    if (rep.per_class_counts[c] > 0) {
      rep.per_class_accuracy[c] = static_cast<double>(rep.confusion[c][c]) /
                                  static_cast<double>(rep.per_class_counts[c]);
    }
  }
  rep.global_accuracy =
      static_cast<double>(hits) / static_cast<double>(test_union.size());
  return rep;
}

// Accuracy of `params` on one client's test indices for tasks <= upto_task.
inline double local_accuracy(const ParameterVector& params,
                             const ModelConfig& cfg, const LabeledDataset& data,
                             const TaskStream& stream, std::size_t upto_task) {
  std::vector<std::size_t> idx;
  for (std::size_t t = 0; t <= upto_task && t < stream.num_tasks(); ++t) {
    idx.insert(idx.end(), stream.tasks[t].test_indices.begin(),
               stream.tasks[t].test_indices.end());
  }
  if (idx.empty()) throw EvalError("local_accuracy: no test samples");
  const std::vector<int> truth = data.gather_labels(idx);
  const std::vector<int> pred =
      classifier_predict(params, cfg, data.gather(idx));
  std::size_t hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (pred[i] == truth[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(truth.size());
}

// Fig. 9's measurement: broadcast parameters evaluated on the client's
// current-task test split before any local step.
inline double post_sync_local_accuracy(const ParameterVector& broadcast,
                                       const ModelConfig& cfg,
                                       const LabeledDataset& data,
                                       const TaskStream& stream,
                                       std::size_t current_task) {
  const Task& task = stream.task(current_task);
  if (task.test_indices.empty()) {
    throw EvalError("post_sync_local_accuracy: no test samples");
  }
  const std::vector<int> truth = data.gather_labels(task.test_indices);
  const std::vector<int> pred =
      classifier_predict(broadcast, cfg, data.gather(task.test_indices));
  std::size_t hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (pred[i] == truth[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(truth.size());
}

// Mean cross-entropy of the classifier on a labeled batch (value only).
inline double classification_loss(const ParameterVector& params,
                                  const ModelConfig& cfg, const Tensor& x,
                                  std::span<const int> labels) {
  GraphCtx ctx(params);
  Tensor probs = classifier_probs_graph(ctx, cfg, x);
  return cross_entropy(probs, onehot(labels, probs.cols())).item();
}

// L2 norm of d(L_ce)/d(class-head weights) on the batch, by autodiff (the
// correct derivative of the softmax cross-entropy, (softmax - onehot) x F).
inline double ce_gradient_norm(const ParameterVector& params,
                               const ModelConfig& cfg, const Tensor& x,
                               std::span<const int> labels) {
  Tape tape;
  GraphCtx ctx(params, tape,
               [](std::string_view n) { return n == "cls.w"; });
  Tensor probs = classifier_probs_graph(ctx, cfg, x);
  Tensor w = ctx.bind("cls.w");
  tape.backward(cross_entropy(probs, onehot(labels, probs.cols())));
  double sq = 0.0;
  for (double g : w.grad()) sq += g * g;
  return std::sqrt(sq);
}

// ---------------------------------------------------------------------------
// Proxy Frechet distance

namespace detail {

// Cyclic Jacobi eigendecomposition of a symmetric matrix (tiny dims only).
// A is destroyed; returns eigenvalues and column eigenvectors V.
inline void jacobi_eigen_sym(std::vector<double>& a, std::size_t n,
                             std::vector<double>& eigvals,
                             std::vector<double>& v) {
  v.assign(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) off += a[p * n + q] * a[p * n + q];
    }
    if (off < 1e-24) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a[p * n + q];
        if (std::abs(apq) < 1e-300) continue;
        const double theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t i = 0; i < n; ++i) {
          const double aip = a[i * n + p];
          const double aiq = a[i * n + q];
          a[i * n + p] = c * aip - s * aiq;
          a[i * n + q] = s * aip + c * aiq;
        }
        for (std::size_t i = 0; i < n; ++i) {
          const double api = a[p * n + i];
          const double aqi = a[q * n + i];
          a[p * n + i] = c * api - s * aqi;
          a[q * n + i] = s * api + c * aqi;
        }
        for (std::size_t i = 0; i < n; ++i) {
          const double vip = v[i * n + p];
          const double viq = v[i * n + q];
          v[i * n + p] = c * vip - s * viq;
          v[i * n + q] = s * vip + c * viq;
        }
      }
    }
  }
  eigvals.resize(n);
  for (std::size_t i = 0; i < n; ++i) eigvals[i] = a[i * n + i];
}

// V f(lambda) V^T for a symmetric PSD matrix.
inline std::vector<double> sym_matrix_sqrt(std::vector<double> m,
                                           std::size_t n) {
  std::vector<double> eig, v;
  jacobi_eigen_sym(m, n, eig, v);
  std::vector<double> out(n * n, 0.0);
  for (std::size_t k = 0; k < n; ++k) {
    const double s = std::sqrt(std::max(eig[k], 0.0));
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        out[i * n + j] += s * v[i * n + k] * v[j * n + k];
      }
    }
  }
  return out;
}

struct FeatureStats {
  std::vector<double> mean;
  std::vector<double> cov;  // dim x dim, regularized
  std::size_t dim = 0;
};

inline FeatureStats feature_stats(const Tensor& feats) {
  const std::size_t n = feats.rows(), d = feats.cols();
  FeatureStats st;
  st.dim = d;
  st.mean.assign(d, 0.0);
  const double* x = feats.values().data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) st.mean[j] += x[i * d + j];
  }
  for (double& m : st.mean) m /= static_cast<double>(n);
  st.cov.assign(d * d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t a = 0; a < d; ++a) {
      const double da = x[i * d + a] - st.mean[a];
      for (std::size_t b = a; b < d; ++b) {
        st.cov[a * d + b] += da * (x[i * d + b] - st.mean[b]);
      }
    }
  }
  const double norm = 1.0 / static_cast<double>(n > 1 ? n - 1 : 1);
  for (std::size_t a = 0; a < d; ++a) {
    for (std::size_t b = a; b < d; ++b) {
      st.cov[a * d + b] *= norm;
      st.cov[b * d + a] = st.cov[a * d + b];
    }
  }
  for (std::size_t a = 0; a < d; ++a) st.cov[a * d + a] += 1e-6;
  return st;
}

inline constexpr std::size_t kFidProjectionDim = 16;

// Fixed, seed-pinned random projection used for data_dim > 2.
inline Tensor fid_projection(std::size_t data_dim) {
  Rng rng(0xF1DFEED5EEDULL);
  std::vector<double> p(data_dim * kFidProjectionDim);
  const double scale = 1.0 / std::sqrt(static_cast<double>(data_dim));
  for (double& v : p) v = scale * rng.normal();
  return Tensor::from({data_dim, kFidProjectionDim}, std::move(p));
}

}  // namespace detail

// ||mu_r - mu_g||^2 + tr(S_r + S_g - 2 (S_r S_g)^{1/2}), computed on raw
// coordinates for data_dim <= 2 and on a fixed 16-dim random projection
// otherwise. Degenerate covariances are regularized by 1e-6 I.
inline double proxy_fid(const Tensor& real, const Tensor& generated) {
  if (real.cols() != generated.cols()) {
    throw DimensionError("proxy_fid: dimensionality differs");
  }
  if (real.rows() < 2 || generated.rows() < 2) {
    throw EvalError("proxy_fid: need at least two samples per set");
  }
  Tensor fr = real, fg = generated;
  if (real.cols() > 2) {
    Tensor proj = detail::fid_projection(real.cols());
    fr = matmul(real, proj);
    fg = matmul(generated, proj);
  }
  const auto sr = detail::feature_stats(fr);
  const auto sg = detail::feature_stats(fg);
  const std::size_t d = sr.dim;

  double mean_term = 0.0;
  for (std::size_t j = 0; j < d; ++j) {
    const double diff = sr.mean[j] - sg.mean[j];
    mean_term += diff * diff;
  }
  double tr_r = 0.0, tr_g = 0.0;
  for (std::size_t j = 0; j < d; ++j) {
    tr_r += sr.cov[j * d + j];
    tr_g += sg.cov[j * d + j];
  }
  // tr sqrt(S_r S_g) = tr sqrt(S_r^{1/2} S_g S_r^{1/2}) — the symmetric form.
  const std::vector<double> a = detail::sym_matrix_sqrt(sr.cov, d);
  std::vector<double> asa(d * d, 0.0);
  {
    std::vector<double> tmp(d * d, 0.0);
    for (std::size_t i = 0; i < d; ++i) {
      for (std::size_t k = 0; k < d; ++k) {
        const double aik = a[i * d + k];
        for (std::size_t j = 0; j < d; ++j) {
          tmp[i * d + j] += aik * sg.cov[k * d + j];
        }
      }
    }
    for (std::size_t i = 0; i < d; ++i) {
      for (std::size_t k = 0; k < d; ++k) {
        const double tik = tmp[i * d + k];
        for (std::size_t j = 0; j < d; ++j) {
          asa[i * d + j] += tik * a[k * d + j];
        }
      }
    }
    // Symmetrize against roundoff before the eigensolve.
    for (std::size_t i = 0; i < d; ++i) {
      for (std::size_t j = i + 1; j < d; ++j) {
        const double s = 0.5 * (asa[i * d + j] + asa[j * d + i]);
        asa[i * d + j] = asa[j * d + i] = s;
      }
    }
  }
  std::vector<double> eig, v;
  detail::jacobi_eigen_sym(asa, d, eig, v);
  double tr_sqrt = 0.0;
  for (double l : eig) tr_sqrt += std::sqrt(std::max(l, 0.0));

  return std::max(0.0, mean_term + tr_r + tr_g - 2.0 * tr_sqrt);
}

// ---------------------------------------------------------------------------
// Loss spike statistic (Fig. 2): per round, mean loss over the first 5% of
// iterations divided by the mean over the last 50%; averaged across rounds.
inline double spike_ratio(std::span<const double> trace,
                          std::size_t round_length) {
  if (round_length == 0) throw EvalError("spike_ratio: round length zero");
  if (trace.size() < round_length) {
    throw EvalError("spike_ratio: trace shorter than one round");
  }
  const std::size_t rounds = trace.size() / round_length;
  const std::size_t head = std::max<std::size_t>(1, round_length * 5 / 100);
  const std::size_t tail = std::max<std::size_t>(1, round_length / 2);
  double total = 0.0;
  for (std::size_t r = 0; r < rounds; ++r) {
    const std::size_t begin = r * round_length;
    double head_mean = 0.0;
    for (std::size_t i = 0; i < head; ++i) head_mean += trace[begin + i];
    head_mean /= static_cast<double>(head);
    double tail_mean = 0.0;
    for (std::size_t i = round_length - tail; i < round_length; ++i) {
      tail_mean += trace[begin + i];
    }
    tail_mean /= static_cast<double>(tail);
    total += head_mean / tail_mean;
  }
  return total / static_cast<double>(rounds);
}

// c x c comma-separated grid of confusion counts (rows = predicted class).
inline std::string confusion_csv(const EvalReport& rep) {
  std::ostringstream os;
  for (const auto& row : rep.confusion) {
    for (std::size_t j = 0; j < row.size(); ++j) {
      if (j > 0) os << ',';
      os << row[j];
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace fedcil
