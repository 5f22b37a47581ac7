#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "fedcil/error.hpp"
#include "fedcil/rng.hpp"

// Dense 64-bit tensors with reverse-mode autodiff.
//
// Graphs are built by free functions (matmul, softmax, ...). Results of ops
// whose inputs are all detached are computed eagerly and stay detached, so
// the same code path serves inference and training. Gradient-tracked leaves
// are created through Tape::leaf(); Tape::backward() runs the recorded
// operations in reverse and freezes the tape.

namespace fedcil {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1},
                         std::multiplies<>());
}

class Tape;
class Tensor;

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated on first touch during backward
  bool needs_grad = false;
  Tape* tape = nullptr;  // nullptr = detached immutable value
  std::int64_t id = -1;  // identity within the tape
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;

  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

struct Access;  // op implementation backdoor

}  // namespace detail

class Tensor {
 public:
  Tensor() : node_(std::make_shared<detail::Node>()) {}

  static Tensor from(Shape shape, std::vector<double> values) {
    if (shape_numel(shape) != values.size()) {
      throw DimensionError("Tensor::from: values length " +
                           std::to_string(values.size()) +
                           " does not match shape");
    }
    Tensor t;
    t.node_->shape = std::move(shape);
    t.node_->value = std::move(values);
    return t;
  }

  static Tensor zeros(Shape shape) {
    std::vector<double> v(shape_numel(shape), 0.0);
    return from(std::move(shape), std::move(v));
  }

  static Tensor full(Shape shape, double fill) {
    std::vector<double> v(shape_numel(shape), fill);
    return from(std::move(shape), std::move(v));
  }

  static Tensor scalar(double v) { return from({1}, {v}); }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }

  std::size_t dim(std::size_t i) const {
    if (i >= rank()) throw DimensionError("Tensor::dim: axis out of range");
    return node_->shape[i];
  }

  std::size_t rows() const { return dim2().first; }
  std::size_t cols() const { return dim2().second; }

  const std::vector<double>& values() const { return node_->value; }
  double v(std::size_t flat) const { return node_->value.at(flat); }

  double at(std::size_t r, std::size_t c) const {
    auto [m, n] = dim2();
    if (r >= m || c >= n) throw RangeError("Tensor::at: index out of range");
    return node_->value[r * n + c];
  }

  // Scalar readout; contract error if the tensor is not a single value.
  double item() const {
    if (size() != 1) throw ContractError("Tensor::item: tensor is not scalar");
    return node_->value[0];
  }

  bool attached() const { return node_->tape != nullptr; }
  bool requires_grad() const { return node_->needs_grad; }
  std::int64_t node_id() const { return node_->id; }

  bool has_grad() const { return !node_->grad.empty(); }

  // Accumulated gradient; zero-filled if backward never reached this node.
  std::vector<double> grad() const {
    if (node_->grad.empty()) return std::vector<double>(size(), 0.0);
    return node_->grad;
  }

  // Value copy with no tape attachment.
  Tensor detach() const { return Tensor::from(shape(), values()); }

 private:
  friend class Tape;
  friend struct detail::Access;
  std::shared_ptr<detail::Node> node_;

  std::pair<std::size_t, std::size_t> dim2() const {
    if (rank() != 2) {
      throw DimensionError("expected a rank-2 tensor, got rank " +
                           std::to_string(rank()));
    }
    return {node_->shape[0], node_->shape[1]};
  }
};

// Records operations for one backward pass. Single-threaded.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return !frozen_; }
  std::size_t size() const { return nodes_.size(); }

  // Wraps a detached value as a gradient-tracked leaf on this tape.
  Tensor leaf(const Tensor& init) {
    if (frozen_) throw StateError("Tape::leaf: tape is frozen; reset() first");
    Tensor t = init.detach();
    t.node_->tape = this;
    t.node_->needs_grad = true;
    record(t.node_);
    return t;
  }

  // Seeds d(loss)/d(loss) = 1 and runs recorded ops in reverse topological
  // (= reverse creation) order. Freezes the tape.
  void backward(const Tensor& loss) {
    if (frozen_) {
      throw StateError("Tape::backward: already called; reset() first");
    }
    if (loss.node_->tape != this) {
      throw ContractError("Tape::backward: loss is not recorded on this tape");
    }
    if (loss.size() != 1) {
      throw ContractError("Tape::backward: loss must be scalar");
    }
    loss.node_->ensure_grad()[0] = 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      detail::Node& n = **it;
      if (n.backprop && !n.grad.empty()) n.backprop(n);
    }
    frozen_ = true;
  }

  // Drops all recorded nodes and unfreezes. Handles created before reset
  // become plain detached values.
  void reset() {
    for (auto& n : nodes_) {
      n->tape = nullptr;
      n->id = -1;
      n->backprop = nullptr;
      n->parents.clear();
    }
    nodes_.clear();
    frozen_ = false;
  }

 private:
  friend struct detail::Access;

  void record(const std::shared_ptr<detail::Node>& n) {
    n->id = static_cast<std::int64_t>(nodes_.size());
    nodes_.push_back(n);
  }

  std::vector<std::shared_ptr<detail::Node>> nodes_;
  bool frozen_ = false;
};

namespace detail {

struct Access {
  static std::shared_ptr<Node>& node(Tensor& t) { return t.node_; }
  static const std::shared_ptr<Node>& node(const Tensor& t) { return t.node_; }

  // Common tape of the inputs (nullptr if all detached). Mixing tapes is a
  // contract error; recording onto a frozen tape is a state error.
  static Tape* common_tape(std::initializer_list<const Tensor*> inputs) {
    Tape* tape = nullptr;
    for (const Tensor* t : inputs) {
      Tape* tt = t->node_->tape;
      if (tt == nullptr) continue;
      if (tape == nullptr) {
        tape = tt;
      } else if (tape != tt) {
        throw ContractError("operands belong to different tapes");
      }
    }
    if (tape && !tape->recording()) {
      throw StateError("tape is frozen; reset() before recording new ops");
    }
    return tape;
  }

  // Builds the result node of an op. If any input is attached, the result is
  // recorded and `backprop` wired; otherwise the result stays detached.
  static Tensor make_result(Shape shape, std::vector<double> value,
                            std::initializer_list<const Tensor*> inputs,
                            std::function<void(Node&)> backprop) {
    Tape* tape = common_tape(inputs);
    Tensor out = Tensor::from(std::move(shape), std::move(value));
    if (tape != nullptr) {
      Node& n = *out.node_;
      n.tape = tape;
      bool needs = false;
      for (const Tensor* t : inputs) {
        n.parents.push_back(t->node_);
        needs = needs || t->node_->needs_grad;
      }
      n.needs_grad = needs;
      if (needs) n.backprop = std::move(backprop);
      tape->record(out.node_);
    }
    return out;
  }
};

inline void check_same_shape(const Tensor& a, const Tensor& b,
                             const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shapes differ");
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and scalar ops

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "add");
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  auto pa = detail::Access::node(a);
  auto pb = detail::Access::node(b);
  return detail::Access::make_result(
      a.shape(), std::move(out), {&a, &b}, [pa, pb](detail::Node& self) {
        if (pa->needs_grad) {
          auto& g = pa->ensure_grad();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (pb->needs_grad) {
          auto& g = pb->ensure_grad();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
      });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "sub");
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  auto pa = detail::Access::node(a);
  auto pb = detail::Access::node(b);
  return detail::Access::make_result(
      a.shape(), std::move(out), {&a, &b}, [pa, pb](detail::Node& self) {
        if (pa->needs_grad) {
          auto& g = pa->ensure_grad();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (pb->needs_grad) {
          auto& g = pb->ensure_grad();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
        }
      });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "mul");
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  auto pa = detail::Access::node(a);
  auto pb = detail::Access::node(b);
  return detail::Access::make_result(
      a.shape(), std::move(out), {&a, &b}, [pa, pb](detail::Node& self) {
        if (pa->needs_grad) {
          auto& g = pa->ensure_grad();
          for (std::size_t i = 0; i < g.size(); ++i)
            g[i] += self.grad[i] * pb->value[i];
        }
        if (pb->needs_grad) {
          auto& g = pb->ensure_grad();
          for (std::size_t i = 0; i < g.size(); ++i)
            g[i] += self.grad[i] * pa->value[i];
        }
      });
}

inline Tensor scalar_mul(const Tensor& a, double s) {
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * s;
  auto pa = detail::Access::node(a);
  return detail::Access::make_result(
      a.shape(), std::move(out), {&a}, [pa, s](detail::Node& self) {
        if (!pa->needs_grad) return;
        auto& g = pa->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
      });
}

inline Tensor leaky_relu(const Tensor& a, double negative_slope) {
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = av[i] > 0.0 ? av[i] : negative_slope * av[i];
  }
  auto pa = detail::Access::node(a);
  return detail::Access::make_result(
      a.shape(), std::move(out), {&a},
      [pa, negative_slope](detail::Node& self) {
        if (!pa->needs_grad) return;
        auto& g = pa->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
          g[i] += self.grad[i] * (pa->value[i] > 0.0 ? 1.0 : negative_slope);
        }
      });
}

inline Tensor tanh(const Tensor& a) {
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(av[i]);
  auto pa = detail::Access::node(a);
  return detail::Access::make_result(
      a.shape(), std::move(out), {&a}, [pa](detail::Node& self) {
        if (!pa->needs_grad) return;
        auto& g = pa->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double y = self.value[i];
          g[i] += self.grad[i] * (1.0 - y * y);
        }
      });
}

inline Tensor sigmoid(const Tensor& a) {
  const auto& av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = av[i];
    // Stable in both tails.
    out[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                      : std::exp(x) / (1.0 + std::exp(x));
  }
  auto pa = detail::Access::node(a);
  return detail::Access::make_result(
      a.shape(), std::move(out), {&a}, [pa](detail::Node& self) {
        if (!pa->needs_grad) return;
        auto& g = pa->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double y = self.value[i];
          g[i] += self.grad[i] * y * (1.0 - y);
        }
      });
}

// ---------------------------------------------------------------------------
// Matrix ops

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto m = a.rows(), k = a.cols();
  const auto kb = b.rows(), n = b.cols();
  if (k != kb) {
    throw DimensionError("matmul: inner dimensions disagree (" +
                         std::to_string(k) + " vs " + std::to_string(kb) +
                         ")");
  }
  const double* av = a.values().data();
  const double* bv = b.values().data();
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double aik = av[i * k + kk];
      const double* brow = bv + kk * n;
      double* orow = out.data() + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
    }
  }
  auto pa = detail::Access::node(a);
  auto pb = detail::Access::node(b);
  return detail::Access::make_result(
      {m, n}, std::move(out), {&a, &b}, [pa, pb, m, k, n](detail::Node& self) {
        const double* dc = self.grad.data();
        if (pa->needs_grad) {
          // dA = dC . B^T
          auto& ga = pa->ensure_grad();
          const double* bvv = pb->value.data();
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
              const double d = dc[i * n + j];
              const double* bcol = bvv + j;
              double* garow = ga.data() + i * k;
              for (std::size_t kk = 0; kk < k; ++kk) {
                garow[kk] += d * bcol[kk * n];
              }
            }
          }
        }
        if (pb->needs_grad) {
          // dB = A^T . dC
          auto& gb = pb->ensure_grad();
          const double* avv = pa->value.data();
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t kk = 0; kk < k; ++kk) {
              const double aik = avv[i * k + kk];
              const double* drow = dc + i * n;
              double* gbrow = gb.data() + kk * n;
              for (std::size_t j = 0; j < n; ++j) gbrow[j] += aik * drow[j];
            }
          }
        }
      });
}

// y[i,j] = sum_k x[i,k] * w[j,k] + b[j] — dense layer with per-row bias,
// weights stored one output row per output unit.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  const auto m = x.rows(), k = x.cols();
  const auto n = w.rows(), kw = w.cols();
  if (k != kw) {
    throw DimensionError("linear: input width " + std::to_string(k) +
                         " does not match weight width " + std::to_string(kw));
  }
  if (b.rank() != 1 || b.dim(0) != n) {
    throw DimensionError("linear: bias must have one entry per output unit");
  }
  const double* xv = x.values().data();
  const double* wv = w.values().data();
  const double* bv = b.values().data();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* xrow = xv + i * k;
    double* orow = out.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double* wrow = wv + j * k;
      double acc = bv[j];
      for (std::size_t kk = 0; kk < k; ++kk) acc += xrow[kk] * wrow[kk];
      orow[j] = acc;
    }
  }
  auto px = detail::Access::node(x);
  auto pw = detail::Access::node(w);
  auto pb = detail::Access::node(b);
  return detail::Access::make_result(
      {m, n}, std::move(out), {&x, &w, &b},
      [px, pw, pb, m, k, n](detail::Node& self) {
        const double* dy = self.grad.data();
        if (px->needs_grad) {
          auto& gx = px->ensure_grad();
          const double* wvv = pw->value.data();
          for (std::size_t i = 0; i < m; ++i) {
            double* gxrow = gx.data() + i * k;
            for (std::size_t j = 0; j < n; ++j) {
              const double d = dy[i * n + j];
              const double* wrow = wvv + j * k;
              for (std::size_t kk = 0; kk < k; ++kk) gxrow[kk] += d * wrow[kk];
            }
          }
        }
        if (pw->needs_grad) {
          auto& gw = pw->ensure_grad();
          const double* xvv = px->value.data();
          for (std::size_t i = 0; i < m; ++i) {
            const double* xrow = xvv + i * k;
            for (std::size_t j = 0; j < n; ++j) {
              const double d = dy[i * n + j];
              double* gwrow = gw.data() + j * k;
              for (std::size_t kk = 0; kk < k; ++kk) gwrow[kk] += d * xrow[kk];
            }
          }
        }
        if (pb->needs_grad) {
          auto& gb = pb->ensure_grad();
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < n; ++j) gb[j] += dy[i * n + j];
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Shape ops

inline Tensor concat_rows(const Tensor& a, const Tensor& b) {
  const auto ma = a.rows(), na = a.cols();
  const auto mb = b.rows(), nb = b.cols();
  if (na != nb) throw DimensionError("concat_rows: column counts differ");
  std::vector<double> out;
  out.reserve((ma + mb) * na);
  out.insert(out.end(), a.values().begin(), a.values().end());
  out.insert(out.end(), b.values().begin(), b.values().end());
  auto pa = detail::Access::node(a);
  auto pb = detail::Access::node(b);
  return detail::Access::make_result(
      {ma + mb, na}, std::move(out), {&a, &b},
      [pa, pb, ma, na](detail::Node& self) {
        const std::size_t split = ma * na;
        if (pa->needs_grad) {
          auto& g = pa->ensure_grad();
          for (std::size_t i = 0; i < split; ++i) g[i] += self.grad[i];
        }
        if (pb->needs_grad) {
          auto& g = pb->ensure_grad();
          for (std::size_t i = 0; i < g.size(); ++i)
            g[i] += self.grad[split + i];
        }
      });
}

inline Tensor concat_cols(const Tensor& a, const Tensor& b) {
  const auto ma = a.rows(), na = a.cols();
  const auto mb = b.rows(), nb = b.cols();
  if (ma != mb) throw DimensionError("concat_cols: row counts differ");
  std::vector<double> out(ma * (na + nb));
  for (std::size_t i = 0; i < ma; ++i) {
    std::copy_n(a.values().data() + i * na, na, out.data() + i * (na + nb));
    std::copy_n(b.values().data() + i * nb, nb,
                out.data() + i * (na + nb) + na);
  }
  auto pa = detail::Access::node(a);
  auto pb = detail::Access::node(b);
  return detail::Access::make_result(
      {ma, na + nb}, std::move(out), {&a, &b},
      [pa, pb, ma, na, nb](detail::Node& self) {
        const std::size_t w = na + nb;
        if (pa->needs_grad) {
          auto& g = pa->ensure_grad();
          for (std::size_t i = 0; i < ma; ++i) {
            for (std::size_t j = 0; j < na; ++j)
              g[i * na + j] += self.grad[i * w + j];
          }
        }
        if (pb->needs_grad) {
          auto& g = pb->ensure_grad();
          for (std::size_t i = 0; i < ma; ++i) {
            for (std::size_t j = 0; j < nb; ++j)
              g[i * nb + j] += self.grad[i * w + na + j];
          }
        }
      });
}

inline Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows) {
  const auto m = a.rows(), n = a.cols();
  for (std::size_t r : rows) {
    if (r >= m) throw RangeError("gather_rows: row index out of range");
  }
  std::vector<double> out(rows.size() * n);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(a.values().data() + rows[i] * n, n, out.data() + i * n);
  }
  auto pa = detail::Access::node(a);
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  return detail::Access::make_result(
      {rows.size(), n}, std::move(out), {&a},
      [pa, idx = std::move(idx), n](detail::Node& self) {
        if (!pa->needs_grad) return;
        auto& g = pa->ensure_grad();
        for (std::size_t i = 0; i < idx.size(); ++i) {
          for (std::size_t j = 0; j < n; ++j)
            g[idx[i] * n + j] += self.grad[i * n + j];
        }
      });
}

inline Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  const auto m = a.rows(), n = a.cols();
  if (begin >= end || end > n) {
    throw DimensionError("slice_cols: invalid column range");
  }
  const std::size_t w = end - begin;
  std::vector<double> out(m * w);
  for (std::size_t i = 0; i < m; ++i) {
    std::copy_n(a.values().data() + i * n + begin, w, out.data() + i * w);
  }
  auto pa = detail::Access::node(a);
  return detail::Access::make_result(
      {m, w}, std::move(out), {&a}, [pa, begin, n, w, m](detail::Node& self) {
        if (!pa->needs_grad) return;
        auto& g = pa->ensure_grad();
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < w; ++j)
            g[i * n + begin + j] += self.grad[i * w + j];
        }
      });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& a) {
  if (a.size() == 0) throw DimensionError("sum: empty tensor");
  double s = 0.0;
  for (double x : a.values()) s += x;
  auto pa = detail::Access::node(a);
  return detail::Access::make_result({1}, {s}, {&a}, [pa](detail::Node& self) {
    if (!pa->needs_grad) return;
    auto& g = pa->ensure_grad();
    const double d = self.grad[0];
    for (double& x : g) x += d;
  });
}

inline Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw DimensionError("mean: empty tensor");
  double s = 0.0;
  for (double x : a.values()) s += x;
  const double inv = 1.0 / static_cast<double>(a.size());
  auto pa = detail::Access::node(a);
  return detail::Access::make_result(
      {1}, {s * inv}, {&a}, [pa, inv](detail::Node& self) {
        if (!pa->needs_grad) return;
        auto& g = pa->ensure_grad();
        const double d = self.grad[0] * inv;
        for (double& x : g) x += d;
      });
}

// ---------------------------------------------------------------------------
// Probabilistic losses. Logs are clamped at kLogClamp to keep every loss
// finite on one-hot collisions.

inline constexpr double kLogClamp = 1e-12;

// Row-wise softmax with max subtraction; rows sum to 1 within 1e-12.
inline Tensor softmax(const Tensor& logits) {
  const auto m = logits.rows(), n = logits.cols();
  if (n < 1) throw DimensionError("softmax: need at least one class");
  const double* xv = logits.values().data();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = xv + i * n;
    double mx = row[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      out[i * n + j] = std::exp(row[j] - mx);
      z += out[i * n + j];
    }
    const double inv = 1.0 / z;
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] *= inv;
  }
  auto pa = detail::Access::node(logits);
  return detail::Access::make_result(
      {m, n}, std::move(out), {&logits}, [pa, m, n](detail::Node& self) {
        if (!pa->needs_grad) return;
        auto& g = pa->ensure_grad();
        for (std::size_t i = 0; i < m; ++i) {
          const double* p = self.value.data() + i * n;
          const double* dy = self.grad.data() + i * n;
          double dot = 0.0;
          for (std::size_t j = 0; j < n; ++j) dot += dy[j] * p[j];
          for (std::size_t j = 0; j < n; ++j) {
            g[i * n + j] += p[j] * (dy[j] - dot);
          }
        }
      });
}

// Mean over rows of -sum_j targets[j] * log(max(probs[j], clamp)).
inline Tensor cross_entropy(const Tensor& probs, const Tensor& targets) {
  detail::check_same_shape(probs, targets, "cross_entropy");
  const auto m = probs.rows(), n = probs.cols();
  const double* pv = probs.values().data();
  const double* tv = targets.values().data();
  double loss = 0.0;
  for (std::size_t i = 0; i < m * n; ++i) {
    loss -= tv[i] * std::log(std::max(pv[i], kLogClamp));
  }
  const double invm = 1.0 / static_cast<double>(m);
  loss *= invm;
  auto pp = detail::Access::node(probs);
  auto pt = detail::Access::node(targets);
  return detail::Access::make_result(
      {1}, {loss}, {&probs, &targets}, [pp, pt, m, n, invm](detail::Node& self) {
        const double d = self.grad[0] * invm;
        if (pp->needs_grad) {
          auto& g = pp->ensure_grad();
          for (std::size_t i = 0; i < m * n; ++i) {
            if (pp->value[i] > kLogClamp) {
              g[i] -= d * pt->value[i] / pp->value[i];
            }
          }
        }
        if (pt->needs_grad) {
          auto& g = pt->ensure_grad();
          for (std::size_t i = 0; i < m * n; ++i) {
            g[i] -= d * std::log(std::max(pp->value[i], kLogClamp));
          }
        }
      });
}

// Mean over rows of sum_j p[j] * (log max(p[j],clamp) - log max(q[j],clamp)).
// Gradients flow to both arguments unless one is detached.
inline Tensor kl_divergence(const Tensor& p, const Tensor& q) {
  detail::check_same_shape(p, q, "kl_divergence");
  const auto m = p.rows(), n = p.cols();
  const double* pv = p.values().data();
  const double* qv = q.values().data();
  double loss = 0.0;
  for (std::size_t i = 0; i < m * n; ++i) {
    const double lp = std::log(std::max(pv[i], kLogClamp));
    const double lq = std::log(std::max(qv[i], kLogClamp));
    loss += pv[i] * (lp - lq);
  }
  const double invm = 1.0 / static_cast<double>(m);
  loss *= invm;
  auto pp = detail::Access::node(p);
  auto pq = detail::Access::node(q);
  return detail::Access::make_result(
      {1}, {loss}, {&p, &q}, [pp, pq, m, n, invm](detail::Node& self) {
        const double d = self.grad[0] * invm;
        if (pp->needs_grad) {
          auto& g = pp->ensure_grad();
          for (std::size_t i = 0; i < m * n; ++i) {
            const double pi = pp->value[i];
            const double lp = std::log(std::max(pi, kLogClamp));
            const double lq = std::log(std::max(pq->value[i], kLogClamp));
            g[i] += d * (lp - lq + (pi > kLogClamp ? 1.0 : 0.0));
          }
        }
        if (pq->needs_grad) {
          auto& g = pq->ensure_grad();
          for (std::size_t i = 0; i < m * n; ++i) {
            const double qi = pq->value[i];
            if (qi > kLogClamp) g[i] -= d * pp->value[i] / qi;
          }
        }
      });
}

// Mean over all entries of -[t log p + (1-t) log(1-p)], p clamped to
// [clamp, 1-clamp].
inline Tensor binary_cross_entropy(const Tensor& pred, const Tensor& target) {
  detail::check_same_shape(pred, target, "binary_cross_entropy");
  const double* pv = pred.values().data();
  const double* tv = target.values().data();
  const std::size_t sz = pred.size();
  if (sz == 0) throw DimensionError("binary_cross_entropy: empty tensor");
  double loss = 0.0;
  for (std::size_t i = 0; i < sz; ++i) {
    const double p = std::clamp(pv[i], kLogClamp, 1.0 - kLogClamp);
    loss -= tv[i] * std::log(p) + (1.0 - tv[i]) * std::log(1.0 - p);
  }
  const double inv = 1.0 / static_cast<double>(sz);
  loss *= inv;
  auto pp = detail::Access::node(pred);
  auto pt = detail::Access::node(target);
  return detail::Access::make_result(
      {1}, {loss}, {&pred, &target}, [pp, pt, sz, inv](detail::Node& self) {
        const double d = self.grad[0] * inv;
        if (pp->needs_grad) {
          auto& g = pp->ensure_grad();
          for (std::size_t i = 0; i < sz; ++i) {
            const double p = pp->value[i];
            if (p > kLogClamp && p < 1.0 - kLogClamp) {
              g[i] -= d * (pt->value[i] / p - (1.0 - pt->value[i]) / (1.0 - p));
            }
          }
        }
        if (pt->needs_grad) {
          auto& g = pt->ensure_grad();
          for (std::size_t i = 0; i < sz; ++i) {
            const double p =
                std::clamp(pp->value[i], kLogClamp, 1.0 - kLogClamp);
            g[i] -= d * (std::log(p) - std::log(1.0 - p));
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Sampling (forward-only, always detached) and constant builders

inline Tensor gaussian(Shape shape, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.normal();
  return Tensor::from(std::move(shape), std::move(v));
}

inline Tensor bernoulli(Shape shape, double p, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.uniform() < p ? 1.0 : 0.0;
  return Tensor::from(std::move(shape), std::move(v));
}

inline Tensor onehot(std::span<const int> labels, std::size_t width) {
  std::vector<double> v(labels.size() * width, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= width) {
      throw RangeError("onehot: label " + std::to_string(labels[i]) +
                       " outside [0, " + std::to_string(width) + ")");
    }
    v[i * width + static_cast<std::size_t>(labels[i])] = 1.0;
  }
  return Tensor::from({labels.size(), width}, std::move(v));
}

}  // namespace fedcil
