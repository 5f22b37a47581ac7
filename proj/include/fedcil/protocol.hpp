#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "fedcil/metrics.hpp"
#include "fedcil/trainers.hpp"

// Round-based orchestration: broadcast, local training, upload, parameter
// merging with a per-class ensemble of classification heads, and FedCIL's
// server-side model consolidation on balanced samples drawn from the
// uploaded client generators. The server-side functions consume only
// ClientUpload / GeneratorUpload values — no dataset indices and no sample
// tensors cross the protocol boundary.

namespace fedcil {

struct ConsolidationConfig {
  std::size_t iterations = 100;  // S
  std::size_t batch_size = 32;
  double lr = 1e-4;
};

struct ServerState {
  ModelConfig model_config;
  ParameterVector global_params;
  std::set<int> known_classes;
  int round = 0;
  ConsolidationConfig consolidation;

  std::vector<int> known_classes_sorted() const {
    return std::vector<int>(known_classes.begin(), known_classes.end());
  }
};

struct RoundPlan {
  std::vector<int> selected_clients;
  std::size_t local_iterations = 1;  // T
  int round_index = 0;
};

// Sample-count-weighted average of aggregation-compatible uploads. Bodies
// must match in name and shape; class heads may differ in row count. Each
// class-head row is averaged over exactly the clients that trained that
// class (a class unique to one client keeps that client's row verbatim).
// The upload list is canonically ordered first, so the result is invariant
// under permutations of its inputs; entries identical across all uploads are
// copied through bit-exactly.
inline ParameterVector merge_parameters(std::span<const ClientUpload> uploads) {
  if (uploads.empty()) {
    throw ProtocolError("merge_parameters: no uploads");
  }

  std::vector<const ClientUpload*> ordered;
  ordered.reserve(uploads.size());
  for (const auto& u : uploads) ordered.push_back(&u);
  std::sort(ordered.begin(), ordered.end(),
            [](const ClientUpload* a, const ClientUpload* b) {
              if (a->sample_count != b->sample_count) {
                return a->sample_count < b->sample_count;
              }
              if (a->trained_classes != b->trained_classes) {
                return a->trained_classes < b->trained_classes;
              }
              const auto& ea = a->params.entries();
              const auto& eb = b->params.entries();
              for (std::size_t i = 0; i < std::min(ea.size(), eb.size());
                   ++i) {
                if (ea[i].data != eb[i].data) return ea[i].data < eb[i].data;
              }
              return ea.size() < eb.size();
            });

  const ParameterVector& ref = ordered.front()->params;
  double total_weight = 0.0;
  for (const auto* u : ordered) {
    if (u->sample_count == 0) {
      throw ProtocolError("merge_parameters: zero sample count");
    }
    if (u->params.size() != ref.size()) {
      throw ProtocolError("merge_parameters: uploads expose different "
                          "parameter sets");
    }
    total_weight += static_cast<double>(u->sample_count);
  }

  ParameterVector out;
  out.schema_version = ref.schema_version;
  for (const auto& ref_entry : ref.entries()) {
    const std::string& name = ref_entry.name;
    const bool is_class_head = (name == "cls.w" || name == "cls.b");

    // Bit-identical inputs merge to the identical output.
    bool all_same = true;
    for (const auto* u : ordered) {
      const ParameterEntry& e = u->params.at(name);
      if (!is_class_head && e.shape != ref_entry.shape) {
        throw ProtocolError("merge_parameters: shape mismatch for " + name);
      }
      if (e.shape != ref_entry.shape || e.data != ref_entry.data) {
        all_same = false;
      }
    }
    if (all_same) {
      out.add(name, ref_entry.shape, ref_entry.data);
      continue;
    }

    if (!is_class_head) {
      std::vector<double> acc(ref_entry.data.size(), 0.0);
      for (const auto* u : ordered) {
        const ParameterEntry& e = u->params.at(name);
        const double w =
            static_cast<double>(u->sample_count) / total_weight;
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += w * e.data[i];
      }
      out.add(name, ref_entry.shape, std::move(acc));
      continue;
    }

    // Class head: per-class ensemble over the clients that trained the
    // class; rows trained by nobody fall back to the average over all
    // uploads whose head covers the row.
    const bool is_matrix = name == "cls.w";
    std::size_t width = 0;
    for (const auto* u : ordered) {
      width = std::max(width, u->params.at(name).shape[0]);
    }
    const std::size_t feat = is_matrix ? ref_entry.shape[1] : 1;
    std::vector<double> acc(width * feat, 0.0);
    for (std::size_t k = 0; k < width; ++k) {
      std::vector<const ClientUpload*> contributors;
      for (const auto* u : ordered) {
        if (u->params.at(name).shape[0] > k &&
            std::binary_search(u->trained_classes.begin(),
                               u->trained_classes.end(),
                               static_cast<int>(k))) {
          contributors.push_back(u);
        }
      }
      if (contributors.empty()) {
        for (const auto* u : ordered) {
          if (u->params.at(name).shape[0] > k) contributors.push_back(u);
        }
      }
      if (contributors.empty()) {
        throw ProtocolError("merge_parameters: class row with no holder");
      }
      if (contributors.size() == 1) {
        // A class unique to one client keeps that client's row verbatim.
        const auto& e = contributors.front()->params.at(name);
        std::copy_n(e.data.begin() + k * feat, feat, acc.begin() + k * feat);
        continue;
      }
      double row_weight = 0.0;
      for (const auto* u : contributors) {
        row_weight += static_cast<double>(u->sample_count);
      }
      for (const auto* u : contributors) {
        const auto& e = u->params.at(name);
        const double w = static_cast<double>(u->sample_count) / row_weight;
        for (std::size_t j = 0; j < feat; ++j) {
          acc[k * feat + j] += w * e.data[k * feat + j];
        }
      }
    }
    Shape shape = is_matrix ? Shape{width, feat} : Shape{width};
    out.add(name, std::move(shape), std::move(acc));
  }
  return out;
}

// Eq. 11: S optimization iterations of the full ACGAN loss on class-balanced
// batches generated by the uploaded client generators (which play the "real"
// role; the global model's own generator produces the fakes and distills the
// clients' generators).
inline void consolidate(ServerState& server,
                        std::span<const GeneratorUpload> generators,
                        Rng& rng) {
  if (server.consolidation.iterations == 0) return;
  if (generators.empty()) {
    throw ProtocolError("consolidate: no generator uploads");
  }
  const std::vector<int> union_classes = server.known_classes_sorted();
  // Every class in the union must be covered by some uploaded generator.
  std::map<int, std::vector<const GeneratorUpload*>> coverage;
  for (const auto& g : generators) {
    for (int c : g.classes) coverage[c].push_back(&g);
  }
  for (int c : union_classes) {
    if (!coverage.contains(c)) {
      throw ProtocolError("consolidate: class " + std::to_string(c) +
                          " covered by no uploaded generator");
    }
  }

  AcganModel model =
      AcganModel::from_params(server.model_config, server.global_params);
  Adam opt_dis(server.consolidation.lr);
  Adam opt_gen(server.consolidation.lr);
  const std::size_t batch = server.consolidation.batch_size;

  for (std::size_t it = 0; it < server.consolidation.iterations; ++it) {
    // Balanced batch: classes round-robin over the union; each sample from a
    // uniformly chosen generator that knows the class.
    std::vector<int> labels(batch);
    std::vector<const GeneratorUpload*> sources(batch);
    for (std::size_t i = 0; i < batch; ++i) {
      labels[i] = union_classes[i % union_classes.size()];
      const auto& cands = coverage.at(labels[i]);
      sources[i] = cands[rng.uniform_index(cands.size())];
    }
    // Generate per source generator, preserving batch positions.
    std::vector<double> xg(batch * server.model_config.data_dim);
    for (const auto& g : generators) {
      std::vector<std::size_t> pos;
      std::vector<int> ls;
      for (std::size_t i = 0; i < batch; ++i) {
        if (sources[i] == &g) {
          pos.push_back(i);
          ls.push_back(labels[i]);
        }
      }
      if (pos.empty()) continue;
      GeneratorSnapshot snap{server.model_config, g.generator_params,
                             g.num_classes, g.classes};
      Tensor samples = snap.generate(ls, rng);
      for (std::size_t i = 0; i < pos.size(); ++i) {
        std::copy_n(samples.values().data() + i * server.model_config.data_dim,
                    server.model_config.data_dim,
                    xg.data() + pos[i] * server.model_config.data_dim);
      }
    }
    Tensor x = Tensor::from({batch, server.model_config.data_dim},
                            std::move(xg));
    acgan_train_step(model, opt_dis, opt_gen, x, labels, rng, union_classes);
  }
  server.global_params = model.params();
}

// Per-round log entry.
struct ClientRoundStats {
  int client_id = 0;
  int task_index = 0;
  double post_sync_accuracy = 0.0;
  std::size_t sample_count = 0;
  std::vector<double> ce_loss;        // per local iteration
  std::vector<double> ce_grad_norm;   // per local iteration
  double mean_gen_loss = 0.0;
  double mean_dis_loss = 0.0;
  double mean_c1 = 0.0, mean_c2 = 0.0, mean_c3 = 0.0;
};

struct RoundRecord {
  int round = 0;
  std::vector<ClientRoundStats> clients;
  std::vector<int> known_classes;
  // Filled by the evaluation layer when requested.
  double global_accuracy = -1.0;
  std::vector<double> proxy_fid;  // per client, -1 when not applicable
};

// One client's view for the round driver: its trainer, its private stream
// and the task it is currently on. Only the upload leaves this bundle.
struct ClientEnv {
  ClientTrainer* trainer = nullptr;
  const LabeledDataset* dataset = nullptr;
  const TaskStream* stream = nullptr;
  std::size_t current_task = 0;
  std::size_t batch_size = 32;
};

// broadcast -> T local iterations per selected client -> upload -> grow to
// the class union -> merge -> (FedCIL) consolidate. Deterministic given
// (server, clients, plan, run_seed).
inline RoundRecord run_round(ServerState& server, std::span<ClientEnv> clients,
                             const RoundPlan& plan, bool consolidation_enabled,
                             std::uint64_t run_seed) {
  if (plan.selected_clients.empty()) {
    throw ProtocolError("run_round: no clients selected");
  }
  if (plan.local_iterations == 0) {
    throw ProtocolError("run_round: need at least one local iteration");
  }
  RoundRecord record;
  record.round = plan.round_index;

  const ParameterVector broadcast = server.global_params;
  const std::vector<int> server_classes = server.known_classes_sorted();

  std::vector<ClientUpload> uploads;
  std::vector<GeneratorUpload> generator_uploads;
  uploads.reserve(plan.selected_clients.size());

  for (int cid : plan.selected_clients) {
    if (cid < 0 || static_cast<std::size_t>(cid) >= clients.size()) {
      throw ProtocolError("run_round: selected client out of range");
    }
    ClientEnv& env = clients[static_cast<std::size_t>(cid)];
    Rng rng(derive_seed(run_seed, 0x726f756eULL,
                        static_cast<std::uint64_t>(plan.round_index),
                        static_cast<std::uint64_t>(cid)));
    env.trainer->begin_round(broadcast, server_classes, rng);

    ClientRoundStats stats;
    stats.client_id = cid;
    stats.task_index = env.trainer->task_index();
    stats.post_sync_accuracy =
        post_sync_local_accuracy(env.trainer->parameters(),
                                 env.trainer->config().model, *env.dataset,
                                 *env.stream, env.current_task);

    double gen_sum = 0.0, dis_sum = 0.0, c1_sum = 0.0, c2_sum = 0.0,
           c3_sum = 0.0;
    for (std::size_t t = 0; t < plan.local_iterations; ++t) {
      auto [x, y] =
          task_batch(*env.dataset, *env.stream, env.current_task,
                     env.batch_size, rng);
      StepStats s = env.trainer->local_step(x, y, rng);
      s.iteration = static_cast<int>(t);
      stats.ce_loss.push_back(s.ce_loss);
      stats.ce_grad_norm.push_back(s.ce_grad_norm);
      gen_sum += s.gen_loss;
      dis_sum += s.dis_loss;
      c1_sum += s.c1;
      c2_sum += s.c2;
      c3_sum += s.c3;
    }
    const double inv = 1.0 / static_cast<double>(plan.local_iterations);
    stats.mean_gen_loss = gen_sum * inv;
    stats.mean_dis_loss = dis_sum * inv;
    stats.mean_c1 = c1_sum * inv;
    stats.mean_c2 = c2_sum * inv;
    stats.mean_c3 = c3_sum * inv;

    const std::size_t sample_count =
        env.stream->task(env.current_task).train_indices.size();
    stats.sample_count = sample_count;
    uploads.push_back(env.trainer->make_upload(sample_count));
    if (consolidation_enabled) {
      if (auto g = env.trainer->generator_upload()) {
        generator_uploads.push_back(std::move(*g));
      }
    }
    record.clients.push_back(std::move(stats));
  }

  // Class union never shrinks.
  for (const auto& u : uploads) {
    server.known_classes.insert(u.trained_classes.begin(),
                                u.trained_classes.end());
  }
  const std::size_t union_width =
      server.known_classes.empty()
          ? 1
          : static_cast<std::size_t>(*server.known_classes.rbegin()) + 1;

  // Widen uploads to the union before merging (new output nodes on the
  // global model when any client learned new classes).
  for (std::size_t i = 0; i < uploads.size(); ++i) {
    ClientUpload& u = uploads[i];
    if (u.params.at("cls.w").shape[0] >= union_width) continue;
    Rng grow_rng(derive_seed(run_seed, 0x67726f77ULL,
                             static_cast<std::uint64_t>(plan.round_index),
                             static_cast<std::uint64_t>(i)));
    grow_class_head(u.params, union_width, grow_rng,
                    u.params.contains("gen.fc0.w")
                        ? server.model_config.noise_dim
                        : 0);
  }

  server.global_params = merge_parameters(uploads);
  if (consolidation_enabled && !generator_uploads.empty()) {
    Rng srv_rng(derive_seed(run_seed, 0x73657276ULL,
                            static_cast<std::uint64_t>(plan.round_index)));
    consolidate(server, generator_uploads, srv_rng);
  }
  server.round = plan.round_index + 1;
  record.known_classes = server.known_classes_sorted();
  return record;
}

}  // namespace fedcil
