#pragma once

#include <algorithm>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "fedcil/acgan.hpp"
#include "fedcil/metrics.hpp"

// Local-training strategies behind one contract: initialize from the round's
// broadcast, take T local steps on current-task batches, hand back an upload.
// Covers the FedCIL client (generative replay + consistency enforcement) and
// the FedAvg / FedProx / +ACGAN Replay / +DGR / LwF-2T baselines.

namespace fedcil {

enum class Method {
  kFedcil,
  kFedAvg,
  kFedProx,
  kFedAvgAcgan,
  kFedProxAcgan,
  kFedAvgDgr,
  kFedProxDgr,
  kFedLwf2T,
};

inline const char* method_name(Method m) {
  switch (m) {
    case Method::kFedcil: return "fedcil";
    case Method::kFedAvg: return "fedavg";
    case Method::kFedProx: return "fedprox";
    case Method::kFedAvgAcgan: return "fedavg_acgan";
    case Method::kFedProxAcgan: return "fedprox_acgan";
    case Method::kFedAvgDgr: return "fedavg_dgr";
    case Method::kFedProxDgr: return "fedprox_dgr";
    case Method::kFedLwf2T: return "fedlwf2t";
  }
  return "?";
}

inline Method method_from_string(const std::string& s) {
  for (Method m : {Method::kFedcil, Method::kFedAvg, Method::kFedProx,
                   Method::kFedAvgAcgan, Method::kFedProxAcgan,
                   Method::kFedAvgDgr, Method::kFedProxDgr,
                   Method::kFedLwf2T}) {
    if (s == method_name(m)) return m;
  }
  throw ConfigError("unknown method: " + s);
}

inline bool method_uses_acgan(Method m) {
  return m == Method::kFedcil || m == Method::kFedAvgAcgan ||
         m == Method::kFedProxAcgan;
}

inline bool method_uses_dgr(Method m) {
  return m == Method::kFedAvgDgr || m == Method::kFedProxDgr;
}

struct TrainerConfig {
  Method method = Method::kFedcil;
  ModelConfig model;
  double lr = 1e-4;
  double adam_beta1 = 0.5;
  double adam_beta2 = 0.999;
  double mu = 0.01;             // FedProx proximal coefficient
  double kd_temperature = 2.0;  // LwF-2T soft-target temperature
  double consistency_w1 = 1.0;
  double consistency_w2 = 1.0;
  double consistency_w3 = 1.0;
  bool replay_enabled = true;       // ablation: generative replay
  bool consistency_enabled = true;  // ablation: consistency enforcement

  double effective_mu() const {
    switch (method) {
      case Method::kFedProx:
      case Method::kFedProxAcgan:
      case Method::kFedProxDgr:
        return mu;
      default:
        return 0.0;
    }
  }
};

// Per-iteration record: losses, consistency components and the classifier
// head CE gradient norm measured on the real batch before the step.
struct StepStats {
  int iteration = 0;
  double gen_loss = 0.0;
  double dis_loss = 0.0;
  double ce_loss = 0.0;
  double c1 = 0.0;
  double c2 = 0.0;
  double c3 = 0.0;
  double ce_grad_norm = 0.0;
};

// The only objects that cross the client -> server boundary.
struct ClientUpload {
  ParameterVector params;
  std::size_t sample_count = 0;
  std::vector<int> trained_classes;  // sorted, cumulative
};

struct GeneratorUpload {
  ParameterVector generator_params;  // gen.* entries only
  std::size_t num_classes = 0;       // one-hot width of the generator
  std::vector<int> classes;          // classes it can emit
};

// Frozen generator snapshot (previous-task copy or the broadcast global
// generator). Parameters receive no gradient updates between refreshes.
struct GeneratorSnapshot {
  ModelConfig cfg;
  ParameterVector params;  // gen.* entries
  std::size_t num_classes = 0;
  std::vector<int> classes;

  Tensor generate(std::span<const int> labels, Rng& rng) const {
    for (int l : labels) {
      if (l < 0 || static_cast<std::size_t>(l) >= num_classes) {
        throw RangeError("GeneratorSnapshot: label out of range");
      }
    }
    GraphCtx ctx(params);
    Tensor z = gaussian({labels.size(), cfg.noise_dim}, rng);
    Tensor h = concat_cols(z, onehot(labels, num_classes));
    for (std::size_t i = 0; i < cfg.gen_hidden.size(); ++i) {
      h = leaky_relu(detail::layer(ctx, "gen.fc" + std::to_string(i), h),
                     cfg.leaky_slope);
    }
    return fedcil::tanh(detail::layer(ctx, "gen.out", h));
  }
};

// (mu/2) ||theta - theta_broadcast||^2 over the entries selected by
// `include`; parameters bind through ctx so gradients flow in-step.
inline Tensor proximal_term(GraphCtx& ctx, const ParameterVector& params,
                            const ParameterVector& anchor,
                            const std::function<bool(std::string_view)>& include,
                            double mu) {
  Tensor total = Tensor::scalar(0.0);
  for (const auto& e : params.entries()) {
    if (!include(e.name)) continue;
    Tensor d = sub(ctx.bind(e.name), anchor.tensor(e.name));
    total = add(total, sum(mul(d, d)));
  }
  return scalar_mul(total, 0.5 * mu);
}

// Replay batch from a frozen generator: labels uniform over the classes the
// generator was trained on, batch-size matched to the real mini-batch.
inline std::pair<Tensor, std::vector<int>> build_replay_batch(
    const GeneratorSnapshot& gen, std::size_t batch_size, Rng& rng) {
  if (gen.classes.empty()) {
    throw ContractError("build_replay_batch: generator covers no classes");
  }
  std::vector<int> labels(batch_size);
  for (auto& l : labels) l = gen.classes[rng.uniform_index(gen.classes.size())];
  Tensor x = gen.generate(labels, rng);
  return {x, std::move(labels)};
}

// Soft-target distillation at temperature tau: KL from the teacher's
// softened outputs to the student's, on the same inputs, student logits
// sliced to the teacher's class range. Scaled by tau^2, KD-standard. The
// teacher runs value-level, so only the student receives gradients.
inline Tensor kd_soft_target_term(const ParameterVector& teacher_params,
                                  std::size_t teacher_width,
                                  const ModelConfig& cfg,
                                  const Tensor& student_logits,
                                  const Tensor& x, double tau) {
  GraphCtx tctx(teacher_params);
  Tensor t_logits = classifier_logits_graph(tctx, cfg, x);
  Tensor t_soft = softmax(scalar_mul(t_logits, 1.0 / tau));
  const std::size_t w = std::min(teacher_width, student_logits.cols());
  Tensor s_logits = w < student_logits.cols()
                        ? slice_cols(student_logits, 0, w)
                        : student_logits;
  Tensor t_sliced = w < t_soft.cols() ? slice_cols(t_soft, 0, w) : t_soft;
  Tensor s_soft = softmax(scalar_mul(s_logits, 1.0 / tau));
  return scalar_mul(kl_divergence(t_sliced, s_soft), tau * tau);
}

// The FedCIL discriminator/classifier-step objective: ACGAN discriminator
// loss on the replay-mixed batch plus the three consistency terms.
//   c1: KL between classifier outputs on label-paired samples from the
//       previous-task generator and the global generator.
//   c2: KL between outputs on real samples and global-generator samples
//       conditioned on the real labels.
//   c3: CE of global-generator samples against their conditioning labels.
// Terms whose source generator is absent or covers none of the needed
// classes are dropped.
struct FedcilLossParts {
  Tensor total;
  double dis = 0.0;
  double c1 = 0.0, c2 = 0.0, c3 = 0.0;
};

inline FedcilLossParts fedcil_dc_objective(
    const AcganModel& model, GraphCtx& ctx, const Tensor& mixed_x,
    std::span<const int> mixed_labels, const Tensor& real_x,
    std::span<const int> real_labels,
    const std::optional<GeneratorSnapshot>& prev_gen,
    const std::optional<GeneratorSnapshot>& global_gen,
    std::span<const int> label_pool, double w1, double w2, double w3,
    Rng& rng) {
  FedcilLossParts parts{Tensor::scalar(0.0)};
  GanLossParts dis =
      discriminator_loss(model, ctx, mixed_x, mixed_labels, rng, label_pool);
  parts.dis = dis.total.item();
  Tensor total = dis.total;
  if (global_gen) {
    const std::set<int> global_set(global_gen->classes.begin(),
                                   global_gen->classes.end());
    const std::size_t batch = real_x.rows();

    if (prev_gen && !prev_gen->classes.empty()) {
      std::vector<int> pool;
      for (int c : prev_gen->classes) {
        if (global_set.contains(c)) pool.push_back(c);
      }
      if (!pool.empty()) {
        std::vector<int> pair_labels(batch);
        for (auto& l : pair_labels) l = pool[rng.uniform_index(pool.size())];
        Tensor a = prev_gen->generate(pair_labels, rng);
        Tensor b = global_gen->generate(pair_labels, rng);
        Tensor c1 = kl_divergence(model.class_probs(ctx, a),
                                  model.class_probs(ctx, b));
        parts.c1 = c1.item();
        total = add(total, scalar_mul(c1, w1));
      }
    }

    std::vector<std::size_t> keep;
    std::vector<int> keep_labels;
    for (std::size_t i = 0; i < real_labels.size(); ++i) {
      if (global_set.contains(real_labels[i])) {
        keep.push_back(i);
        keep_labels.push_back(real_labels[i]);
      }
    }
    if (!keep.empty()) {
      Tensor x_sub = gather_rows(real_x, keep);
      Tensor b = global_gen->generate(keep_labels, rng);
      Tensor c2 = kl_divergence(model.class_probs(ctx, x_sub),
                                model.class_probs(ctx, b));
      parts.c2 = c2.item();
      total = add(total, scalar_mul(c2, w2));
    }

    if (!global_gen->classes.empty()) {
      std::vector<int> g_labels(batch);
      for (auto& l : g_labels) {
        l = global_gen->classes[rng.uniform_index(
            global_gen->classes.size())];
      }
      Tensor g = global_gen->generate(g_labels, rng);
      Tensor c3 = cross_entropy(model.class_probs(ctx, g),
                                onehot(g_labels, model.num_classes()));
      parts.c3 = c3.item();
      total = add(total, scalar_mul(c3, w3));
    }
  }
  parts.total = total;
  return parts;
}

// ---------------------------------------------------------------------------

class ClientTrainer {
 public:
  ClientTrainer(int client_id, TrainerConfig cfg)
      : client_id_(client_id), cfg_(std::move(cfg)) {}
  virtual ~ClientTrainer() = default;

  int client_id() const { return client_id_; }
  int task_index() const { return task_index_; }
  const TrainerConfig& config() const { return cfg_; }
  const std::vector<int>& announced_classes() const { return announced_; }
  const std::vector<int>& previous_classes() const { return previous_; }
  const std::vector<int>& current_classes() const { return current_; }

  // Task boundary: snapshot frozen copies (strategy hook), advance the task
  // index, extend the announced class set, widen the live model.
  void start_task(const std::vector<int>& classes, Rng& rng) {
    if (classes.empty()) throw ContractError("start_task: empty class set");
    if (task_index_ >= 0) on_task_boundary(rng);
    previous_.insert(previous_.end(), current_.begin(), current_.end());
    std::sort(previous_.begin(), previous_.end());
    current_ = classes;
    std::sort(current_.begin(), current_.end());
    announced_ = previous_;
    announced_.insert(announced_.end(), current_.begin(), current_.end());
    std::sort(announced_.begin(), announced_.end());
    ++task_index_;
    grow_to(required_width(), rng);
  }

  std::size_t required_width() const {
    return announced_.empty()
               ? 1
               : static_cast<std::size_t>(announced_.back()) + 1;
  }

  virtual void begin_round(const ParameterVector& broadcast,
                           const std::vector<int>& server_classes,
                           Rng& rng) = 0;
  virtual StepStats local_step(const Tensor& x, std::span<const int> labels,
                               Rng& rng) = 0;
  virtual ClientUpload make_upload(std::size_t sample_count) const = 0;
  virtual std::optional<GeneratorUpload> generator_upload() const {
    return std::nullopt;
  }
  virtual const ParameterVector& parameters() const = 0;

 protected:
  virtual void on_task_boundary(Rng& rng) = 0;
  virtual void grow_to(std::size_t width, Rng& rng) = 0;

  int client_id_;
  TrainerConfig cfg_;
  int task_index_ = -1;
  std::vector<int> announced_;
  std::vector<int> previous_;
  std::vector<int> current_;
};

// ---------------------------------------------------------------------------
// ACGAN-based clients: FedCIL and FedAvg/FedProx + ACGAN Replay.

class AcganClientTrainer : public ClientTrainer {
 public:
  AcganClientTrainer(int client_id, TrainerConfig cfg, Rng& rng)
      : ClientTrainer(client_id, std::move(cfg)),
        model_(cfg_.model, 1, rng),
        opt_dis_(cfg_.lr, cfg_.adam_beta1, cfg_.adam_beta2),
        opt_gen_(cfg_.lr, cfg_.adam_beta1, cfg_.adam_beta2) {}

  void begin_round(const ParameterVector& broadcast,
                   const std::vector<int>& server_classes,
                   Rng& rng) override {
    model_ = AcganModel::from_params(cfg_.model, broadcast);
    if (model_.num_classes() < required_width()) {
      model_.grow_classes(required_width(), rng);
    }
    anchor_ = model_.params();
    if (!server_classes.empty() && use_consistency()) {
      global_gen_ = GeneratorSnapshot{
          cfg_.model, broadcast.subset("gen."),
          broadcast.at("gen.fc0.w").shape[1] - cfg_.model.noise_dim,
          server_classes};
    } else {
      global_gen_.reset();
    }
    opt_dis_.reset();
    opt_gen_.reset();
  }

  StepStats local_step(const Tensor& x, std::span<const int> labels,
                       Rng& rng) override {
    StepStats s;
    s.ce_grad_norm = ce_gradient_norm(model_.params(), cfg_.model, x, labels);
    s.ce_loss = classification_loss(model_.params(), cfg_.model, x, labels);

    // Replay batch from the previous-task generator (Eq. 12): same size as
    // the real mini-batch, labels uniform over the finished classes.
    Tensor mixed_x = x;
    std::vector<int> mixed_y(labels.begin(), labels.end());
    if (cfg_.replay_enabled && prev_gen_ && !prev_gen_->classes.empty()) {
      auto [replay_x, replay_labels] =
          build_replay_batch(*prev_gen_, x.rows(), rng);
      mixed_x = concat_rows(replay_x, x);
      replay_labels.insert(replay_labels.end(), labels.begin(), labels.end());
      mixed_y = std::move(replay_labels);
    }

    const double mu = cfg_.effective_mu();

    // Discriminator/classifier step: GAN + CE terms on the mixed batch plus,
    // for FedCIL, the three consistency terms on the classifier outputs.
    {
      Tape tape;
      GraphCtx ctx = discriminator_step_ctx(model_, tape);
      const auto& global_gen =
          use_consistency() ? global_gen_ : kNoSnapshot;
      FedcilLossParts parts = fedcil_dc_objective(
          model_, ctx, mixed_x, mixed_y, x, labels, prev_gen_, global_gen,
          announced_, cfg_.consistency_w1, cfg_.consistency_w2,
          cfg_.consistency_w3, rng);
      s.dis_loss = parts.dis;
      s.c1 = parts.c1;
      s.c2 = parts.c2;
      s.c3 = parts.c3;
      Tensor total = parts.total;
      if (mu > 0.0) {
        total = add(total,
                    proximal_term(ctx, model_.params(), anchor_,
                                  trainable_prefixes({"trunk.", "disc.",
                                                      "cls."}),
                                  mu));
      }
      tape.backward(total);
      opt_dis_.step(model_.params(), ctx.grads());
    }

    // Generator step.
    {
      Tape tape;
      GraphCtx ctx = generator_step_ctx(model_, tape);
      GanLossParts parts =
          generator_loss(model_, ctx, mixed_x.rows(), rng, announced_);
      s.gen_loss = parts.total.item();
      Tensor total = parts.total;
      if (mu > 0.0) {
        total = add(total, proximal_term(ctx, model_.params(), anchor_,
                                         trainable_prefixes({"gen."}), mu));
      }
      tape.backward(total);
      opt_gen_.step(model_.params(), ctx.grads());
    }
    return s;
  }

  ClientUpload make_upload(std::size_t sample_count) const override {
    return {model_.params(), sample_count, announced_};
  }

  std::optional<GeneratorUpload> generator_upload() const override {
    return GeneratorUpload{model_.params().subset("gen."),
                           model_.num_classes(), announced_};
  }

  const ParameterVector& parameters() const override {
    return model_.params();
  }

  const AcganModel& model() const { return model_; }
  const std::optional<GeneratorSnapshot>& previous_generator() const {
    return prev_gen_;
  }
  const std::optional<GeneratorSnapshot>& global_generator() const {
    return global_gen_;
  }

 protected:
  void on_task_boundary(Rng&) override {
    // Frozen copy of the live generator at the end of the finished task.
    prev_gen_ = GeneratorSnapshot{cfg_.model, model_.params().subset("gen."),
                                  model_.num_classes(), announced_};
  }

  void grow_to(std::size_t width, Rng& rng) override {
    if (model_.num_classes() < width) model_.grow_classes(width, rng);
  }

 private:
  static inline const std::optional<GeneratorSnapshot> kNoSnapshot{};

  bool use_consistency() const {
    return cfg_.method == Method::kFedcil && cfg_.consistency_enabled;
  }

  AcganModel model_;
  ParameterVector anchor_;  // broadcast copy, proximal reference
  std::optional<GeneratorSnapshot> prev_gen_;
  std::optional<GeneratorSnapshot> global_gen_;
  Adam opt_dis_;
  Adam opt_gen_;
};

// ---------------------------------------------------------------------------
// Classifier-only clients: FedAvg, FedProx and LwF-2T.

class ClassifierClientTrainer : public ClientTrainer {
 public:
  ClassifierClientTrainer(int client_id, TrainerConfig cfg, Rng& rng)
      : ClientTrainer(client_id, std::move(cfg)),
        params_(init_classifier_params(cfg_.model, 1, rng)),
        opt_(cfg_.lr, cfg_.adam_beta1, cfg_.adam_beta2) {}

  void begin_round(const ParameterVector& broadcast,
                   const std::vector<int>& server_classes,
                   Rng& rng) override {
    params_ = broadcast;
    grow_class_head(params_, required_width_checked(), rng);
    anchor_ = params_;
    if (cfg_.method == Method::kFedLwf2T && !server_classes.empty()) {
      global_teacher_ = Teacher{broadcast, broadcast.at("cls.w").shape[0]};
    } else {
      global_teacher_.reset();
    }
    opt_.reset();
  }

  StepStats local_step(const Tensor& x, std::span<const int> labels,
                       Rng& rng) override {
    (void)rng;
    StepStats s;
    s.ce_grad_norm = ce_gradient_norm(params_, cfg_.model, x, labels);

    Tape tape;
    GraphCtx ctx(params_, tape, trainable_prefixes({"trunk.", "cls."}));
    Tensor logits = classifier_logits_graph(ctx, cfg_.model, x);
    Tensor ce = cross_entropy(softmax(logits),
                              onehot(labels, logits.cols()));
    s.ce_loss = ce.item();
    Tensor total = ce;

    if (cfg_.method == Method::kFedLwf2T) {
      if (prev_teacher_) {
        total = add(total, kd_soft_target_term(prev_teacher_->params,
                                               prev_teacher_->width,
                                               cfg_.model, logits, x,
                                               cfg_.kd_temperature));
      }
      if (global_teacher_) {
        total = add(total, kd_soft_target_term(global_teacher_->params,
                                               global_teacher_->width,
                                               cfg_.model, logits, x,
                                               cfg_.kd_temperature));
      }
    }
    const double mu = cfg_.effective_mu();
    if (mu > 0.0) {
      total = add(total, proximal_term(ctx, params_, anchor_,
                                       trainable_prefixes({"trunk.", "cls."}),
                                       mu));
    }
    tape.backward(total);
    opt_.step(params_, ctx.grads());
    return s;
  }

  ClientUpload make_upload(std::size_t sample_count) const override {
    return {params_, sample_count, announced_};
  }

  const ParameterVector& parameters() const override { return params_; }

 protected:
  void on_task_boundary(Rng&) override {
    if (cfg_.method == Method::kFedLwf2T) {
      prev_teacher_ = Teacher{params_, params_.at("cls.w").shape[0]};
    }
  }

  void grow_to(std::size_t width, Rng& rng) override {
    grow_class_head(params_, std::max(width, params_.at("cls.w").shape[0]),
                    rng);
  }

 private:
  struct Teacher {
    ParameterVector params;
    std::size_t width = 0;
  };

  std::size_t required_width_checked() const {
    return std::max(required_width(), params_.at("cls.w").shape[0]);
  }

  ParameterVector params_;
  ParameterVector anchor_;
  std::optional<Teacher> prev_teacher_;
  std::optional<Teacher> global_teacher_;
  Adam opt_;
};

// ---------------------------------------------------------------------------
// Deep-generative-replay clients: a private unconditional GAN plus the
// synchronized classifier. Only the classifier crosses the wire.

namespace detail {

inline ParameterVector init_vanilla_gan_params(const ModelConfig& cfg,
                                               Rng& rng) {
  ParameterVector pv;
  std::size_t in = cfg.noise_dim;
  for (std::size_t i = 0; i < cfg.gen_hidden.size(); ++i) {
    add_linear_params(pv, "gan.gen.fc" + std::to_string(i), cfg.gen_hidden[i],
                      in, rng);
    in = cfg.gen_hidden[i];
  }
  add_linear_params(pv, "gan.gen.out", cfg.data_dim, in, rng);
  in = cfg.data_dim;
  for (std::size_t i = 0; i < cfg.trunk_hidden.size(); ++i) {
    add_linear_params(pv, "gan.disc.fc" + std::to_string(i),
                      cfg.trunk_hidden[i], in, rng);
    in = cfg.trunk_hidden[i];
  }
  add_linear_params(pv, "gan.disc.out", 1, in, rng, /*zero_weights=*/true);
  return pv;
}

inline Tensor vanilla_gan_generate(GraphCtx& ctx, const ModelConfig& cfg,
                                   const Tensor& z) {
  Tensor h = z;
  for (std::size_t i = 0; i < cfg.gen_hidden.size(); ++i) {
    h = leaky_relu(layer(ctx, "gan.gen.fc" + std::to_string(i), h),
                   cfg.leaky_slope);
  }
  return fedcil::tanh(layer(ctx, "gan.gen.out", h));
}

inline Tensor vanilla_gan_disc(GraphCtx& ctx, const ModelConfig& cfg,
                               const Tensor& x) {
  Tensor h = x;
  for (std::size_t i = 0; i < cfg.trunk_hidden.size(); ++i) {
    h = leaky_relu(layer(ctx, "gan.disc.fc" + std::to_string(i), h),
                   cfg.leaky_slope);
  }
  return sigmoid(layer(ctx, "gan.disc.out", h));
}

}  // namespace detail

class DgrClientTrainer : public ClientTrainer {
 public:
  DgrClientTrainer(int client_id, TrainerConfig cfg, Rng& rng)
      : ClientTrainer(client_id, std::move(cfg)),
        classifier_(init_classifier_params(cfg_.model, 1, rng)),
        gan_(detail::init_vanilla_gan_params(cfg_.model, rng)),
        opt_cls_(cfg_.lr, cfg_.adam_beta1, cfg_.adam_beta2),
        opt_gan_dis_(cfg_.lr, cfg_.adam_beta1, cfg_.adam_beta2),
        opt_gan_gen_(cfg_.lr, cfg_.adam_beta1, cfg_.adam_beta2) {}

  void begin_round(const ParameterVector& broadcast,
                   const std::vector<int>& /*server_classes*/,
                   Rng& rng) override {
    // Only the classifier synchronizes with the server; the GAN is private.
    classifier_ = broadcast;
    grow_class_head(classifier_,
                    std::max(required_width(),
                             classifier_.at("cls.w").shape[0]),
                    rng);
    anchor_ = classifier_;
    opt_cls_.reset();
  }

  StepStats local_step(const Tensor& x, std::span<const int> labels,
                       Rng& rng) override {
    StepStats s;
    s.ce_grad_norm = ce_gradient_norm(classifier_, cfg_.model, x, labels);

    // Replay: previous GAN's samples labeled by the previous classifier's
    // argmax.
    Tensor train_x = x;
    std::vector<int> train_y(labels.begin(), labels.end());
    if (cfg_.replay_enabled && prev_gan_ && prev_classifier_) {
      GraphCtx gctx(*prev_gan_);
      Tensor replay_x = detail::vanilla_gan_generate(
          gctx, cfg_.model, gaussian({x.rows(), cfg_.model.noise_dim}, rng));
      std::vector<int> replay_y =
          classifier_predict(*prev_classifier_, cfg_.model, replay_x);
      train_x = concat_rows(replay_x, x);
      replay_y.insert(replay_y.end(), labels.begin(), labels.end());
      train_y = std::move(replay_y);
    }

    // GAN discriminator step on real (current + replayed) vs generated.
    {
      Tape tape;
      GraphCtx ctx(gan_, tape, trainable_prefixes({"gan.disc."}));
      GraphCtx vctx(gan_);
      Tensor fake = detail::vanilla_gan_generate(
          vctx, cfg_.model,
          gaussian({train_x.rows(), cfg_.model.noise_dim}, rng));
      Tensor d_r = detail::vanilla_gan_disc(ctx, cfg_.model, train_x);
      Tensor d_f = detail::vanilla_gan_disc(ctx, cfg_.model, fake);
      Tensor loss =
          add(binary_cross_entropy(d_r, Tensor::full(d_r.shape(), 1.0)),
              binary_cross_entropy(d_f, Tensor::full(d_f.shape(), 0.0)));
      s.dis_loss = loss.item();
      tape.backward(loss);
      opt_gan_dis_.step(gan_, ctx.grads());
    }
    // GAN generator step.
    {
      Tape tape;
      GraphCtx ctx(gan_, tape, trainable_prefixes({"gan.gen."}));
      Tensor fake = detail::vanilla_gan_generate(
          ctx, cfg_.model,
          gaussian({train_x.rows(), cfg_.model.noise_dim}, rng));
      Tensor d = detail::vanilla_gan_disc(ctx, cfg_.model, fake);
      Tensor loss = binary_cross_entropy(d, Tensor::full(d.shape(), 1.0));
      s.gen_loss = loss.item();
      tape.backward(loss);
      opt_gan_gen_.step(gan_, ctx.grads());
    }
    // Classifier step on real + replayed samples.
    {
      Tape tape;
      GraphCtx ctx(classifier_, tape, trainable_prefixes({"trunk.", "cls."}));
      Tensor probs = classifier_probs_graph(ctx, cfg_.model, train_x);
      Tensor ce = cross_entropy(probs, onehot(train_y, probs.cols()));
      s.ce_loss = ce.item();
      Tensor total = ce;
      const double mu = cfg_.effective_mu();
      if (mu > 0.0) {
        total = add(total,
                    proximal_term(ctx, classifier_, anchor_,
                                  trainable_prefixes({"trunk.", "cls."}), mu));
      }
      tape.backward(total);
      opt_cls_.step(classifier_, ctx.grads());
    }
    return s;
  }

  ClientUpload make_upload(std::size_t sample_count) const override {
    return {classifier_, sample_count, announced_};
  }

  const ParameterVector& parameters() const override { return classifier_; }
  const ParameterVector& gan_parameters() const { return gan_; }

 protected:
  void on_task_boundary(Rng&) override {
    prev_gan_ = gan_;
    prev_classifier_ = classifier_;
  }

  void grow_to(std::size_t width, Rng& rng) override {
    grow_class_head(classifier_,
                    std::max(width, classifier_.at("cls.w").shape[0]), rng);
  }

 private:
  ParameterVector classifier_;
  ParameterVector gan_;
  ParameterVector anchor_;
  std::optional<ParameterVector> prev_gan_;
  std::optional<ParameterVector> prev_classifier_;
  Adam opt_cls_;
  Adam opt_gan_dis_;
  Adam opt_gan_gen_;
};

inline std::unique_ptr<ClientTrainer> make_trainer(int client_id,
                                                   const TrainerConfig& cfg,
                                                   Rng& rng) {
  if (method_uses_acgan(cfg.method)) {
    return std::make_unique<AcganClientTrainer>(client_id, cfg, rng);
  }
  if (method_uses_dgr(cfg.method)) {
    return std::make_unique<DgrClientTrainer>(client_id, cfg, rng);
  }
  return std::make_unique<ClassifierClientTrainer>(client_id, cfg, rng);
}

}  // namespace fedcil
