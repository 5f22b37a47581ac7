#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fedcil/adam.hpp"
#include "fedcil/parameter_vector.hpp"
#include "fedcil/rng.hpp"
#include "fedcil/tensor.hpp"

// ACGAN with a conditional MLP generator, a shared feature trunk, a
// real/fake discriminator head and a growable softmax classification head.
// The discriminator and classifier differ only in their last layer; there is
// exactly one trunk parameter set.

namespace fedcil {

struct ModelConfig {
  std::size_t data_dim = 2;
  std::size_t noise_dim = 8;
  std::vector<std::size_t> gen_hidden{64, 64};
  std::vector<std::size_t> trunk_hidden{64, 32};
  double leaky_slope = 0.2;

  std::size_t feature_dim() const { return trunk_hidden.back(); }
};

// Binds ParameterVector entries into a graph. Each name is bound once, so
// every use of a parameter in the same graph shares one node (this is what
// makes the trunk genuinely shared between the two heads). Parameters for
// which `trainable` holds become tape leaves; the rest are constants. With a
// null tape the whole forward is a plain value computation.
class GraphCtx {
 public:
  explicit GraphCtx(const ParameterVector& params)
      : params_(&params), tape_(nullptr) {}

  GraphCtx(const ParameterVector& params, Tape& tape,
           std::function<bool(std::string_view)> trainable)
      : params_(&params), tape_(&tape), trainable_(std::move(trainable)) {}

  Tensor bind(const std::string& name) {
    auto it = bound_.find(name);
    if (it != bound_.end()) return it->second;
    Tensor value = params_->tensor(name);
    Tensor t = (tape_ != nullptr && trainable_ && trainable_(name))
                   ? tape_->leaf(value)
                   : value;
    bound_.emplace(name, t);
    return t;
  }

  bool value_mode() const { return tape_ == nullptr; }

  // Gradients of every trainable leaf bound so far; call after backward.
  std::map<std::string, std::vector<double>> grads() const {
    std::map<std::string, std::vector<double>> out;
    for (const auto& [name, t] : bound_) {
      if (t.requires_grad()) out.emplace(name, t.grad());
    }
    return out;
  }

 private:
  const ParameterVector* params_;
  Tape* tape_;
  std::function<bool(std::string_view)> trainable_;
  std::map<std::string, Tensor, std::less<>> bound_;
};

inline std::function<bool(std::string_view)> trainable_prefixes(
    std::vector<std::string> prefixes) {
  return [prefixes = std::move(prefixes)](std::string_view name) {
    for (const auto& p : prefixes) {
      if (name.starts_with(p)) return true;
    }
    return false;
  };
}

namespace detail {

// Xavier-normal weight + zero bias.
inline void add_linear_params(ParameterVector& pv, const std::string& name,
                              std::size_t out, std::size_t in, Rng& rng,
                              bool zero_weights = false) {
  std::vector<double> w(out * in, 0.0);
  if (!zero_weights) {
    const double sigma = std::sqrt(2.0 / static_cast<double>(in + out));
    for (double& x : w) x = rng.normal(0.0, sigma);
  }
  pv.add(name + ".w", {out, in}, std::move(w));
  pv.add(name + ".b", {out}, std::vector<double>(out, 0.0));
}

inline Tensor layer(GraphCtx& ctx, const std::string& name, const Tensor& x) {
  return linear(x, ctx.bind(name + ".w"), ctx.bind(name + ".b"));
}

}  // namespace detail

// Trunk + classifier forward, shared by the ACGAN and the classifier-only
// baselines (identical parameter names).
inline Tensor classifier_logits_graph(GraphCtx& ctx, const ModelConfig& cfg,
                                      const Tensor& x) {
  Tensor h = x;
  for (std::size_t i = 0; i < cfg.trunk_hidden.size(); ++i) {
    h = leaky_relu(detail::layer(ctx, "trunk.fc" + std::to_string(i), h),
                   cfg.leaky_slope);
  }
  return detail::layer(ctx, "cls", h);
}

inline Tensor classifier_probs_graph(GraphCtx& ctx, const ModelConfig& cfg,
                                     const Tensor& x) {
  return softmax(classifier_logits_graph(ctx, cfg, x));
}

// Fresh trunk + class head (no generator, no discriminator head); used by
// the FedAvg/FedProx/LwF/DGR baselines.
inline ParameterVector init_classifier_params(const ModelConfig& cfg,
                                              std::size_t num_classes,
                                              Rng& rng) {
  ParameterVector pv;
  std::size_t in = cfg.data_dim;
  for (std::size_t i = 0; i < cfg.trunk_hidden.size(); ++i) {
    detail::add_linear_params(pv, "trunk.fc" + std::to_string(i),
                              cfg.trunk_hidden[i], in, rng);
    in = cfg.trunk_hidden[i];
  }
  // Zero head => exactly uniform predictions on a fresh model.
  detail::add_linear_params(pv, "cls", num_classes, in, rng,
                            /*zero_weights=*/true);
  return pv;
}

// Appends class-head rows (and, when present, generator one-hot columns)
// for classes [old_total, new_total). New values ~ N(0, 0.01^2); existing
// values are preserved bit-exactly.
inline void grow_class_head(ParameterVector& pv, std::size_t new_total,
                            Rng& rng, std::size_t noise_dim = 0) {
  constexpr double kGrowSigma = 0.01;
  ParameterEntry& w = pv.at("cls.w");
  const std::size_t old_total = w.shape[0];
  if (new_total < old_total) {
    throw ContractError("grow_class_head: cannot shrink from " +
                        std::to_string(old_total) + " to " +
                        std::to_string(new_total));
  }
  if (new_total == old_total) return;
  const std::size_t feat = w.shape[1];
  w.data.resize(new_total * feat);
  for (std::size_t i = old_total * feat; i < w.data.size(); ++i) {
    w.data[i] = rng.normal(0.0, kGrowSigma);
  }
  w.shape[0] = new_total;

  ParameterEntry& b = pv.at("cls.b");
  b.data.resize(new_total);
  for (std::size_t i = old_total; i < new_total; ++i) {
    b.data[i] = rng.normal(0.0, kGrowSigma);
  }
  b.shape[0] = new_total;

  if (pv.contains("gen.fc0.w")) {
    // The generator is conditioned on one-hot labels appended to the noise:
    // widen its input layer by new columns.
    ParameterEntry& gw = pv.at("gen.fc0.w");
    const std::size_t out = gw.shape[0];
    const std::size_t old_in = gw.shape[1];
    const std::size_t new_in = noise_dim + new_total;
    if (old_in != noise_dim + old_total) {
      throw ContractError("grow_class_head: generator input width mismatch");
    }
    std::vector<double> nw(out * new_in);
    for (std::size_t r = 0; r < out; ++r) {
      std::copy_n(gw.data.data() + r * old_in, old_in, nw.data() + r * new_in);
      for (std::size_t c = old_in; c < new_in; ++c) {
        nw[r * new_in + c] = rng.normal(0.0, kGrowSigma);
      }
    }
    gw.data = std::move(nw);
    gw.shape[1] = new_in;
  }
}

class AcganModel {
 public:
  AcganModel(ModelConfig cfg, std::size_t num_classes, Rng& rng)
      : cfg_(std::move(cfg)) {
    if (num_classes == 0) {
      throw ContractError("AcganModel: need at least one class");
    }
    std::size_t in = cfg_.noise_dim + num_classes;
    for (std::size_t i = 0; i < cfg_.gen_hidden.size(); ++i) {
      detail::add_linear_params(params_, "gen.fc" + std::to_string(i),
                                cfg_.gen_hidden[i], in, rng);
      in = cfg_.gen_hidden[i];
    }
    detail::add_linear_params(params_, "gen.out", cfg_.data_dim, in, rng);

    in = cfg_.data_dim;
    for (std::size_t i = 0; i < cfg_.trunk_hidden.size(); ++i) {
      detail::add_linear_params(params_, "trunk.fc" + std::to_string(i),
                                cfg_.trunk_hidden[i], in, rng);
      in = cfg_.trunk_hidden[i];
    }
    detail::add_linear_params(params_, "disc", 1, in, rng,
                              /*zero_weights=*/true);
    detail::add_linear_params(params_, "cls", num_classes, in, rng,
                              /*zero_weights=*/true);
  }

  static AcganModel from_params(ModelConfig cfg, ParameterVector params) {
    AcganModel m(std::move(cfg), std::move(params), Tag{});
    // Minimal structural validation; linear() checks the rest on use.
    for (const char* name : {"gen.fc0.w", "gen.out.w", "trunk.fc0.w",
                             "disc.w", "cls.w", "cls.b"}) {
      if (!m.params_.contains(name)) {
        throw ContractError(std::string("AcganModel::from_params: missing ") +
                            name);
      }
    }
    if (m.params_.at("gen.fc0.w").shape[1] !=
        m.cfg_.noise_dim + m.num_classes()) {
      throw ContractError(
          "AcganModel::from_params: generator width inconsistent with class "
          "head");
    }
    return m;
  }

  const ModelConfig& config() const { return cfg_; }
  const ParameterVector& params() const { return params_; }
  ParameterVector& params() { return params_; }
  std::size_t num_classes() const { return params_.at("cls.w").shape[0]; }
  std::size_t feature_dim() const { return cfg_.feature_dim(); }

  void grow_classes(std::size_t new_total, Rng& rng) {
    grow_class_head(params_, new_total, rng, cfg_.noise_dim);
  }

  // --- graph builders ------------------------------------------------------

  Tensor gen_forward(GraphCtx& ctx, const Tensor& z,
                     std::span<const int> labels) const {
    check_labels(labels);
    Tensor h = concat_cols(z, onehot(labels, num_classes()));
    for (std::size_t i = 0; i < cfg_.gen_hidden.size(); ++i) {
      h = leaky_relu(detail::layer(ctx, "gen.fc" + std::to_string(i), h),
                     cfg_.leaky_slope);
    }
    return fedcil::tanh(detail::layer(ctx, "gen.out", h));
  }

  Tensor features(GraphCtx& ctx, const Tensor& x) const {
    Tensor h = x;
    for (std::size_t i = 0; i < cfg_.trunk_hidden.size(); ++i) {
      h = leaky_relu(detail::layer(ctx, "trunk.fc" + std::to_string(i), h),
                     cfg_.leaky_slope);
    }
    return h;
  }

  Tensor disc_prob_from_features(GraphCtx& ctx, const Tensor& feats) const {
    return sigmoid(detail::layer(ctx, "disc", feats));
  }

  Tensor class_probs_from_features(GraphCtx& ctx, const Tensor& feats) const {
    return softmax(detail::layer(ctx, "cls", feats));
  }

  Tensor class_probs(GraphCtx& ctx, const Tensor& x) const {
    return class_probs_from_features(ctx, features(ctx, x));
  }

  // --- value-level conveniences -------------------------------------------

  // Conditional samples G(z, onehot(c)), z ~ N(0, I); in [-1, 1] via tanh.
  Tensor generate(std::span<const int> labels, Rng& rng) const {
    GraphCtx ctx(params_);
    Tensor z = gaussian({labels.size(), cfg_.noise_dim}, rng);
    return gen_forward(ctx, z, labels);
  }

  // Softmax probabilities over the current class head.
  Tensor classify(const Tensor& x) const {
    GraphCtx ctx(params_);
    return class_probs(ctx, x);
  }

 private:
  struct Tag {};
  AcganModel(ModelConfig cfg, ParameterVector params, Tag)
      : cfg_(std::move(cfg)), params_(std::move(params)) {}

  void check_labels(std::span<const int> labels) const {
    const std::size_t c = num_classes();
    for (int l : labels) {
      if (l < 0 || static_cast<std::size_t>(l) >= c) {
        throw RangeError("AcganModel: label " + std::to_string(l) +
                         " outside [0, " + std::to_string(c) + ")");
      }
    }
  }

  ModelConfig cfg_;
  ParameterVector params_;
};

// ---------------------------------------------------------------------------
// Loss assembly. Generator and discriminator objectives are optimized
// alternately; each builds its own graph. In the generator step the heads
// and trunk are constants (their gradients are identically absent); in the
// discriminator step the generator is the constant.

struct GanLossParts {
  Tensor total;
  Tensor gan;  // adversarial component
  Tensor ce;   // classification component
};

namespace detail {

inline std::vector<int> all_classes(const AcganModel& m) {
  std::vector<int> v(m.num_classes());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<int>(i);
  return v;
}

inline std::vector<int> draw_labels(std::span<const int> pool, std::size_t n,
                                    Rng& rng) {
  std::vector<int> labels(n);
  for (auto& l : labels) l = pool[rng.uniform_index(pool.size())];
  return labels;
}

}  // namespace detail

// Graphs for the generator step bind gen.* as trainable; graphs for the
// discriminator/classifier step bind trunk./disc./cls. as trainable.
inline GraphCtx generator_step_ctx(const AcganModel& model, Tape& tape) {
  return GraphCtx(model.params(), tape, trainable_prefixes({"gen."}));
}
inline GraphCtx discriminator_step_ctx(const AcganModel& model, Tape& tape) {
  return GraphCtx(model.params(), tape,
                  trainable_prefixes({"trunk.", "disc.", "cls."}));
}

// -E[log D(G(z,c))] - E[y_c log C(G(z,c))] with c uniform over `label_pool`
// (all current classes when empty). In a generator-step ctx, the heads and
// trunk are constants and receive no gradients.
inline GanLossParts generator_loss(const AcganModel& model, GraphCtx& ctx,
                                   std::size_t batch_size, Rng& rng,
                                   std::span<const int> label_pool = {}) {
  if (batch_size == 0) {
    throw ContractError("generator_loss: need a positive batch");
  }
  std::vector<int> pool_storage;
  if (label_pool.empty()) {
    pool_storage = detail::all_classes(model);
    label_pool = pool_storage;
  }
  const std::vector<int> labels =
      detail::draw_labels(label_pool, batch_size, rng);
  Tensor z = gaussian({batch_size, model.config().noise_dim}, rng);
  Tensor fake = model.gen_forward(ctx, z, labels);
  Tensor feats = model.features(ctx, fake);
  Tensor d = model.disc_prob_from_features(ctx, feats);
  Tensor gan = binary_cross_entropy(d, Tensor::full(d.shape(), 1.0));
  Tensor ce = cross_entropy(model.class_probs_from_features(ctx, feats),
                            onehot(labels, model.num_classes()));
  return {add(gan, ce), gan, ce};
}

// Real/fake adversarial loss plus classification CE on both real and
// generated samples. Gradients reach the trunk and both heads; the generator
// is detached for the fake terms (samples are produced value-level).
inline GanLossParts discriminator_loss(const AcganModel& model, GraphCtx& ctx,
                                       const Tensor& real_x,
                                       std::span<const int> real_labels,
                                       Rng& rng,
                                       std::span<const int> label_pool = {}) {
  if (real_x.rows() != real_labels.size()) {
    throw DimensionError("discriminator_loss: labels do not match batch");
  }
  std::vector<int> pool_storage;
  if (label_pool.empty()) {
    pool_storage = detail::all_classes(model);
    label_pool = pool_storage;
  }
  const std::size_t batch = real_x.rows();
  const std::vector<int> fake_labels =
      detail::draw_labels(label_pool, batch, rng);
  Tensor fake = model.generate(fake_labels, rng);

  Tensor feats_r = model.features(ctx, real_x);
  Tensor feats_f = model.features(ctx, fake);
  Tensor d_r = model.disc_prob_from_features(ctx, feats_r);
  Tensor d_f = model.disc_prob_from_features(ctx, feats_f);
  Tensor gan = add(binary_cross_entropy(d_r, Tensor::full(d_r.shape(), 1.0)),
                   binary_cross_entropy(d_f, Tensor::full(d_f.shape(), 0.0)));
  Tensor ce =
      add(cross_entropy(model.class_probs_from_features(ctx, feats_r),
                        onehot(real_labels, model.num_classes())),
          cross_entropy(model.class_probs_from_features(ctx, feats_f),
                        onehot(fake_labels, model.num_classes())));
  return {add(gan, ce), gan, ce};
}

struct AcganLossValues {
  double gen_loss = 0.0;
  double dis_loss = 0.0;
};

// The two separately-optimized objectives evaluated on the same batch and
// seed; equals generator_loss + discriminator_loss by construction.
inline AcganLossValues acgan_loss(const AcganModel& model, const Tensor& x,
                                  std::span<const int> labels,
                                  std::uint64_t seed,
                                  std::span<const int> label_pool = {}) {
  Rng rg(seed);
  Rng rd(seed);
  GraphCtx gctx(model.params());
  GraphCtx dctx(model.params());
  return {generator_loss(model, gctx, x.rows(), rg, label_pool).total.item(),
          discriminator_loss(model, dctx, x, labels, rd, label_pool)
              .total.item()};
}

struct AcganStepStats {
  double gen_loss = 0.0;
  double dis_loss = 0.0;
};

// One alternating update: a discriminator/classifier step followed by a
// generator step, each scoped to its own parameter group and Adam instance.
inline AcganStepStats acgan_train_step(AcganModel& model, Adam& opt_dis,
                                       Adam& opt_gen, const Tensor& x,
                                       std::span<const int> labels, Rng& rng,
                                       std::span<const int> label_pool = {}) {
  AcganStepStats stats;
  {
    Tape tape;
    GraphCtx ctx = discriminator_step_ctx(model, tape);
    GanLossParts dis = discriminator_loss(model, ctx, x, labels, rng,
                                          label_pool);
    stats.dis_loss = dis.total.item();
    tape.backward(dis.total);
    opt_dis.step(model.params(), ctx.grads());
  }
  {
    Tape tape;
    GraphCtx ctx = generator_step_ctx(model, tape);
    GanLossParts gen =
        generator_loss(model, ctx, x.rows(), rng, label_pool);
    stats.gen_loss = gen.total.item();
    tape.backward(gen.total);
    opt_gen.step(model.params(), ctx.grads());
  }
  return stats;
}

}  // namespace fedcil
