#include "fedcil/trainers.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "fedcil/dataset.hpp"
#include "gradcheck.hpp"

using namespace fedcil;
using fedcil::testing::finite_difference_check;

namespace {

ModelConfig small_model() {
  ModelConfig cfg;
  cfg.data_dim = 2;
  cfg.noise_dim = 3;
  cfg.gen_hidden = {6, 5};
  cfg.trunk_hidden = {6, 4};
  return cfg;
}

TrainerConfig trainer_config(Method m) {
  TrainerConfig cfg;
  cfg.method = m;
  cfg.model = small_model();
  cfg.lr = 1e-3;
  return cfg;
}

// A broadcast parameter vector for ACGAN methods with the given class width.
ParameterVector acgan_broadcast(std::size_t width, std::uint64_t seed = 50) {
  Rng rng(seed);
  AcganModel m(small_model(), width, rng);
  Rng noise(seed + 1);
  for (auto& e : m.params().entries()) {
    for (double& v : e.data) v += noise.normal(0.0, 0.1);
  }
  return m.params();
}

ParameterVector classifier_broadcast(std::size_t width,
                                     std::uint64_t seed = 50) {
  Rng rng(seed);
  ParameterVector pv = init_classifier_params(small_model(), width, rng);
  Rng noise(seed + 1);
  for (auto& e : pv.entries()) {
    for (double& v : e.data) v += noise.normal(0.0, 0.1);
  }
  return pv;
}

std::pair<Tensor, std::vector<int>> toy_batch(std::size_t n,
                                              std::span<const int> classes,
                                              std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n * 2);
  for (double& x : v) x = 2.0 * rng.uniform() - 1.0;
  std::vector<int> y(n);
  for (auto& l : y) l = classes[rng.uniform_index(classes.size())];
  return {Tensor::from({n, 2}, std::move(v)), std::move(y)};
}

}  // namespace

TEST(FedcilStep, TaskZeroWithoutGlobalGeneratorReducesToPlainAcgan) {
  // With no previous-task generator and no global generator the client
  // objective is exactly L_acgan on the real batch: the trainer's step must
  // produce bit-identical parameters to a bare alternating ACGAN step.
  TrainerConfig cfg = trainer_config(Method::kFedcil);
  Rng init(1);
  AcganClientTrainer trainer(0, cfg, init);
  Rng task_rng(2);
  trainer.start_task({0, 1}, task_rng);
  ParameterVector broadcast = acgan_broadcast(2);
  Rng round_rng(3);
  trainer.begin_round(broadcast, {}, round_rng);  // no server classes yet

  auto [x, y] = toy_batch(8, std::vector<int>{0, 1}, 11);
  Rng step_rng(4);
  trainer.local_step(x, y, step_rng);

  AcganModel reference = AcganModel::from_params(small_model(), broadcast);
  Adam opt_dis(cfg.lr, cfg.adam_beta1, cfg.adam_beta2);
  Adam opt_gen(cfg.lr, cfg.adam_beta1, cfg.adam_beta2);
  Rng ref_rng(4);
  acgan_train_step(reference, opt_dis, opt_gen, x, y, ref_rng,
                   trainer.announced_classes());
  EXPECT_EQ(trainer.parameters(), reference.params());
}

TEST(FedcilObjective, ConsistencyTermsZeroForUniformClassifier) {
  Rng rng(5);
  AcganModel model(small_model(), 2, rng);  // zero heads -> uniform outputs
  GeneratorSnapshot prev{small_model(),
                         acgan_broadcast(2, 91).subset("gen."), 2, {0, 1}};
  GeneratorSnapshot global{small_model(),
                           acgan_broadcast(2, 92).subset("gen."), 2, {0, 1}};
  auto [x, y] = toy_batch(6, std::vector<int>{0, 1}, 13);
  std::vector<int> pool{0, 1};
  Tape tape;
  GraphCtx ctx = discriminator_step_ctx(model, tape);
  Rng lrng(7);
  FedcilLossParts parts =
      fedcil_dc_objective(model, ctx, x, y, x, y, prev, global, pool, 1.0,
                          1.0, 1.0, lrng);
  EXPECT_NEAR(parts.c1, 0.0, 1e-12);
  EXPECT_NEAR(parts.c2, 0.0, 1e-12);
  EXPECT_GT(parts.c3, 0.0);  // CE against one-hot stays ln(2) at uniform
}

TEST(FedcilObjective, FullClientObjectiveMatchesFiniteDifferences) {
  // Eq. 17 with every term active (replay-mixed batch, c1, c2, c3) on a toy
  // model, checked on head, trunk and generator-facing parameters.
  ModelConfig mc = small_model();
  Rng rng(21);
  AcganModel model(mc, 3, rng);
  Rng hr(22);
  for (auto* name : {"disc.w", "disc.b", "cls.w", "cls.b"}) {
    for (double& v : model.params().at(name).data) v = hr.normal(0.0, 0.3);
  }
  GeneratorSnapshot prev{mc, acgan_broadcast(3, 91).subset("gen."), 3, {0, 1}};
  GeneratorSnapshot global{mc, acgan_broadcast(3, 92).subset("gen."), 3,
                           std::vector<int>{0, 1, 2}};
  auto [real_x, real_y] = toy_batch(5, std::vector<int>{1, 2}, 17);
  const std::vector<int> pool{0, 1, 2};

  const std::uint64_t seed = 1234;
  auto build = [&](const AcganModel& m, GraphCtx& ctx) {
    Rng lrng(seed);
    auto [replay_x, replay_y] = build_replay_batch(prev, 5, lrng);
    Tensor mixed_x = concat_rows(replay_x, real_x);
    std::vector<int> mixed_y = replay_y;
    mixed_y.insert(mixed_y.end(), real_y.begin(), real_y.end());
    return fedcil_dc_objective(m, ctx, mixed_x, mixed_y, real_x, real_y,
                               prev, global, pool, 1.0, 1.0, 1.0, lrng);
  };
  auto eval = [&](const AcganModel& m) {
    GraphCtx ctx(m.params());
    return build(m, ctx).total.item();
  };

  Tape tape;
  GraphCtx ctx = discriminator_step_ctx(model, tape);
  FedcilLossParts parts = build(model, ctx);
  EXPECT_GT(parts.c1, 0.0);
  EXPECT_GT(parts.c2, 0.0);
  EXPECT_GT(parts.c3, 0.0);
  tape.backward(parts.total);
  auto grads = ctx.grads();
  for (const std::string entry :
       {"cls.w", "cls.b", "trunk.fc0.w", "trunk.fc1.w", "disc.w"}) {
    auto res = finite_difference_check(
        [&](const std::vector<double>& v) {
          AcganModel m = model;
          m.params().at(entry).data = v;
          return eval(m);
        },
        model.params().at(entry).data, grads.at(entry));
    EXPECT_LT(res.max_rel_err, 1e-4) << entry << ": " << res.worst;
  }
}

TEST(AcganReplayStep, EqualsFedcilWithConsistencyDisabledAndNoGlobalUse) {
  TrainerConfig fedcil_cfg = trainer_config(Method::kFedcil);
  fedcil_cfg.consistency_enabled = false;
  TrainerConfig replay_cfg = trainer_config(Method::kFedAvgAcgan);

  Rng i1(1), i2(1);
  AcganClientTrainer a(0, fedcil_cfg, i1);
  AcganClientTrainer b(0, replay_cfg, i2);
  ParameterVector broadcast = acgan_broadcast(4);
  for (auto* t : {&a, &b}) {
    Rng task_rng(2);
    t->start_task({0, 1}, task_rng);
    Rng round_rng(3);
    t->begin_round(broadcast, {0, 1}, round_rng);
  }
  auto [x, y] = toy_batch(8, std::vector<int>{0, 1}, 11);
  Rng s1(4), s2(4);
  a.local_step(x, y, s1);
  b.local_step(x, y, s2);
  EXPECT_EQ(a.parameters(), b.parameters());
}

TEST(ReplayBatch, LabelsOnlyFromFinishedClasses) {
  // Label audit over 1000 replay draws after a task boundary.
  GeneratorSnapshot prev{small_model(),
                         acgan_broadcast(4, 91).subset("gen."), 4, {0, 2}};
  Rng rng(9);
  std::set<int> seen;
  for (int rep = 0; rep < 10; ++rep) {
    auto [x, labels] = build_replay_batch(prev, 100, rng);
    for (int l : labels) seen.insert(l);
  }
  EXPECT_TRUE(seen.contains(0));
  EXPECT_TRUE(seen.contains(2));
  EXPECT_EQ(seen.size(), 2u);
}

TEST(TaskBoundary, SnapshotEqualsLiveGeneratorAndStaysFrozen) {
  TrainerConfig cfg = trainer_config(Method::kFedcil);
  Rng init(1);
  AcganClientTrainer trainer(0, cfg, init);
  Rng task_rng(2);
  trainer.start_task({0, 1}, task_rng);
  ParameterVector broadcast = acgan_broadcast(2);
  Rng round_rng(3);
  trainer.begin_round(broadcast, {0, 1}, round_rng);
  auto [x, y] = toy_batch(8, std::vector<int>{0, 1}, 11);
  Rng s(4);
  for (int i = 0; i < 3; ++i) trainer.local_step(x, y, s);

  const ParameterVector live_gen =
      ParameterVector(trainer.parameters()).subset("gen.");
  Rng task_rng2(5);
  trainer.start_task({2, 3}, task_rng2);
  ASSERT_TRUE(trainer.previous_generator().has_value());
  EXPECT_EQ(trainer.previous_generator()->params, live_gen);
  EXPECT_EQ(trainer.previous_generator()->classes, (std::vector<int>{0, 1}));

  // 100 further live steps leave the snapshot bit-unchanged.
  Rng round_rng2(6);
  trainer.begin_round(acgan_broadcast(4, 77), {0, 1}, round_rng2);
  auto [x2, y2] = toy_batch(8, std::vector<int>{2, 3}, 12);
  Rng s2(7);
  for (int i = 0; i < 100; ++i) trainer.local_step(x2, y2, s2);
  EXPECT_EQ(trainer.previous_generator()->params, live_gen);
}

TEST(TaskBoundary, TaskIndexAndAnnouncedClassesAdvance) {
  TrainerConfig cfg = trainer_config(Method::kFedcil);
  Rng init(1);
  AcganClientTrainer trainer(0, cfg, init);
  EXPECT_EQ(trainer.task_index(), -1);
  Rng r(2);
  trainer.start_task({4, 1}, r);
  EXPECT_EQ(trainer.task_index(), 0);
  EXPECT_EQ(trainer.announced_classes(), (std::vector<int>{1, 4}));
  EXPECT_TRUE(trainer.previous_classes().empty());
  trainer.start_task({0, 3}, r);
  EXPECT_EQ(trainer.task_index(), 1);
  EXPECT_EQ(trainer.announced_classes(), (std::vector<int>{0, 1, 3, 4}));
  EXPECT_EQ(trainer.previous_classes(), (std::vector<int>{1, 4}));
}

TEST(PlainStep, FedProxWithZeroMuIsBitExactlyFedAvg) {
  TrainerConfig avg_cfg = trainer_config(Method::kFedAvg);
  TrainerConfig prox_cfg = trainer_config(Method::kFedProx);
  prox_cfg.mu = 0.0;
  Rng i1(1), i2(1);
  ClassifierClientTrainer a(0, avg_cfg, i1);
  ClassifierClientTrainer b(0, prox_cfg, i2);
  ParameterVector broadcast = classifier_broadcast(2);
  for (auto* t : std::initializer_list<ClassifierClientTrainer*>{&a, &b}) {
    Rng task_rng(2);
    t->start_task({0, 1}, task_rng);
    Rng round_rng(3);
    t->begin_round(broadcast, {0, 1}, round_rng);
  }
  auto [x, y] = toy_batch(8, std::vector<int>{0, 1}, 11);
  Rng s1(4), s2(4);
  a.local_step(x, y, s1);
  b.local_step(x, y, s2);
  EXPECT_EQ(a.parameters(), b.parameters());
}

TEST(ProximalTerm, GradientZeroAtBroadcast) {
  ParameterVector params = classifier_broadcast(2);
  Tape tape;
  GraphCtx ctx(params, tape, trainable_prefixes({"trunk.", "cls."}));
  Tensor prox = proximal_term(ctx, params, params,
                              trainable_prefixes({"trunk.", "cls."}), 0.5);
  EXPECT_DOUBLE_EQ(prox.item(), 0.0);
  tape.backward(prox);
  for (const auto& [name, g] : ctx.grads()) {
    for (double v : g) EXPECT_DOUBLE_EQ(v, 0.0) << name;
  }
}

TEST(ProximalTerm, HandValue) {
  // theta - broadcast = [1, 1], mu = 2 -> (mu/2) * 2 = 2.
  ParameterVector params;
  params.add("cls.w", {1, 2}, {3.0, 4.0});
  ParameterVector anchor;
  anchor.add("cls.w", {1, 2}, {2.0, 3.0});
  GraphCtx ctx(params);
  Tensor prox = proximal_term(ctx, params, anchor,
                              trainable_prefixes({"cls."}), 2.0);
  EXPECT_DOUBLE_EQ(prox.item(), 2.0);
}

TEST(ProximalTerm, GradientMatchesFiniteDifferences) {
  ParameterVector params = classifier_broadcast(3, 60);
  ParameterVector anchor = classifier_broadcast(3, 61);
  const double mu = 0.7;
  auto eval = [&](const std::vector<double>& v) {
    ParameterVector p = params;
    p.at("trunk.fc0.w").data = v;
    GraphCtx ctx(p);
    return proximal_term(ctx, p, anchor, trainable_prefixes({"trunk.", "cls."}),
                         mu)
        .item();
  };
  Tape tape;
  GraphCtx ctx(params, tape, trainable_prefixes({"trunk.", "cls."}));
  tape.backward(proximal_term(ctx, params, anchor,
                              trainable_prefixes({"trunk.", "cls."}), mu));
  auto res = finite_difference_check(eval, params.at("trunk.fc0.w").data,
                                     ctx.grads().at("trunk.fc0.w"));
  EXPECT_LT(res.max_rel_err, 1e-4) << res.worst;
}

TEST(Lwf2tStep, TeachersIdenticalToStudentEqualsPlainStep) {
  // When both teachers coincide with the student the soft-target KLs are
  // exactly zero with zero gradient, so the step matches FedAvg bit-exactly.
  TrainerConfig lwf_cfg = trainer_config(Method::kFedLwf2T);
  TrainerConfig avg_cfg = trainer_config(Method::kFedAvg);
  Rng i1(1), i2(1);
  ClassifierClientTrainer lwf(0, lwf_cfg, i1);
  ClassifierClientTrainer avg(0, avg_cfg, i2);
  ParameterVector broadcast = classifier_broadcast(2);
  for (auto* t : std::initializer_list<ClassifierClientTrainer*>{&lwf, &avg}) {
    Rng task_rng(2);
    t->start_task({0, 1}, task_rng);
    Rng round_rng(3);
    // Non-empty server classes: the global teacher (== broadcast == student)
    // is active for LwF.
    t->begin_round(broadcast, {0, 1}, round_rng);
  }
  auto [x, y] = toy_batch(8, std::vector<int>{0, 1}, 11);
  Rng s1(4), s2(4);
  lwf.local_step(x, y, s1);
  avg.local_step(x, y, s2);
  EXPECT_EQ(lwf.parameters(), avg.parameters());
}

TEST(Lwf2tStep, KdGradientMatchesFiniteDifferences) {
  ModelConfig mc = small_model();
  ParameterVector student = classifier_broadcast(4, 70);
  ParameterVector teacher = classifier_broadcast(3, 71);  // narrower teacher
  auto [x, y] = toy_batch(5, std::vector<int>{0, 1, 2}, 17);
  const double tau = 2.0;
  auto eval = [&](const std::vector<double>& v) {
    ParameterVector p = student;
    p.at("trunk.fc0.w").data = v;
    GraphCtx ctx(p);
    Tensor logits = classifier_logits_graph(ctx, mc, x);
    return kd_soft_target_term(teacher, 3, mc, logits, x, tau).item();
  };
  Tape tape;
  GraphCtx ctx(student, tape, trainable_prefixes({"trunk.", "cls."}));
  Tensor logits = classifier_logits_graph(ctx, mc, x);
  tape.backward(kd_soft_target_term(teacher, 3, mc, logits, x, tau));
  auto res = finite_difference_check(eval, student.at("trunk.fc0.w").data,
                                     ctx.grads().at("trunk.fc0.w"));
  EXPECT_LT(res.max_rel_err, 1e-4) << res.worst;
}

TEST(DgrStep, UploadContainsNoGeneratorEntries) {
  TrainerConfig cfg = trainer_config(Method::kFedAvgDgr);
  Rng init(1);
  DgrClientTrainer trainer(0, cfg, init);
  Rng task_rng(2);
  trainer.start_task({0, 1}, task_rng);
  Rng round_rng(3);
  trainer.begin_round(classifier_broadcast(2), {}, round_rng);
  auto [x, y] = toy_batch(8, std::vector<int>{0, 1}, 11);
  Rng s(4);
  trainer.local_step(x, y, s);
  ClientUpload up = trainer.make_upload(10);
  for (const auto& e : up.params.entries()) {
    EXPECT_EQ(e.name.find("gen"), std::string::npos) << e.name;
    EXPECT_EQ(e.name.find("gan"), std::string::npos) << e.name;
  }
  EXPECT_FALSE(trainer.generator_upload().has_value());
}

TEST(DgrStep, FreshDiscriminatorLossIsTwoLnTwo) {
  // Zero-weight GAN discriminator head outputs 0.5 everywhere:
  // BCE(real, 1) + BCE(fake, 0) = 2 ln 2.
  TrainerConfig cfg = trainer_config(Method::kFedAvgDgr);
  Rng init(1);
  DgrClientTrainer trainer(0, cfg, init);
  Rng task_rng(2);
  trainer.start_task({0, 1}, task_rng);
  Rng round_rng(3);
  trainer.begin_round(classifier_broadcast(2), {}, round_rng);
  auto [x, y] = toy_batch(8, std::vector<int>{0, 1}, 11);
  Rng s(4);
  StepStats stats = trainer.local_step(x, y, s);
  EXPECT_NEAR(stats.dis_loss, 2.0 * std::log(2.0), 1e-12);
}

TEST(Trainers, LossesFiniteAcrossAllStrategies) {
  auto [x, y] = toy_batch(8, std::vector<int>{0, 1}, 11);
  for (Method m : {Method::kFedcil, Method::kFedAvg, Method::kFedProx,
                   Method::kFedAvgAcgan, Method::kFedProxAcgan,
                   Method::kFedAvgDgr, Method::kFedProxDgr,
                   Method::kFedLwf2T}) {
    TrainerConfig cfg = trainer_config(m);
    Rng init(1);
    auto trainer = make_trainer(0, cfg, init);
    Rng task_rng(2);
    trainer->start_task({0, 1}, task_rng);
    ParameterVector broadcast = method_uses_acgan(m)
                                    ? acgan_broadcast(2)
                                    : classifier_broadcast(2);
    Rng round_rng(3);
    trainer->begin_round(broadcast, {0, 1}, round_rng);
    Rng s(4);
    for (int i = 0; i < 3; ++i) {
      StepStats st = trainer->local_step(x, y, s);
      EXPECT_TRUE(std::isfinite(st.ce_loss)) << method_name(m);
      EXPECT_TRUE(std::isfinite(st.dis_loss)) << method_name(m);
      EXPECT_TRUE(std::isfinite(st.gen_loss)) << method_name(m);
      EXPECT_TRUE(std::isfinite(st.ce_grad_norm)) << method_name(m);
    }
    ClientUpload up = trainer->make_upload(5);
    EXPECT_EQ(up.trained_classes, (std::vector<int>{0, 1}));
  }
}

TEST(Trainers, LabelOutsideModelRangeRejected) {
  TrainerConfig cfg = trainer_config(Method::kFedcil);
  Rng init(1);
  AcganClientTrainer trainer(0, cfg, init);
  Rng task_rng(2);
  trainer.start_task({0, 1}, task_rng);
  Rng round_rng(3);
  trainer.begin_round(acgan_broadcast(2), {}, round_rng);
  Tensor x = Tensor::zeros({2, 2});
  std::vector<int> bad{0, 5};
  Rng s(4);
  EXPECT_THROW(trainer.local_step(x, bad, s), RangeError);
}
