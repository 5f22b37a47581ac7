#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fedcil/dataset.hpp"
#include "fedcil/error.hpp"
#include "fedcil/rng.hpp"

// Per-client class-incremental task sequences. Within one client, class sets
// across tasks are pairwise disjoint; across clients, sample indices of a
// shared class are partitioned so no instance appears on two clients.

namespace fedcil {

struct Task {
  std::vector<int> classes;                // sorted
  std::vector<std::size_t> train_indices;  // into the dataset
  std::vector<std::size_t> test_indices;
};

struct TaskStream {
  int client_id = 0;
  std::size_t classes_per_task = 0;
  std::vector<Task> tasks;

  std::size_t num_tasks() const { return tasks.size(); }

  const Task& task(std::size_t idx) const {
    if (idx >= tasks.size()) {
      throw RangeError("TaskStream: task index out of range");
    }
    return tasks[idx];
  }

  // All classes in tasks [0, upto_task].
  std::vector<int> classes_through(std::size_t upto_task) const {
    std::vector<int> out;
    for (std::size_t t = 0; t <= upto_task && t < tasks.size(); ++t) {
      out.insert(out.end(), tasks[t].classes.begin(), tasks[t].classes.end());
    }
    std::sort(out.begin(), out.end());
    return out;
  }
};

namespace detail {

// Split `indices` (already shuffled) into `parts` near-equal chunks.
inline std::vector<std::vector<std::size_t>> chunk_indices(
    const std::vector<std::size_t>& indices, std::size_t parts) {
  std::vector<std::vector<std::size_t>> out(parts);
  const std::size_t base = indices.size() / parts;
  const std::size_t extra = indices.size() % parts;
  std::size_t pos = 0;
  for (std::size_t p = 0; p < parts; ++p) {
    const std::size_t len = base + (p < extra ? 1 : 0);
    out[p].assign(indices.begin() + pos, indices.begin() + pos + len);
    pos += len;
  }
  return out;
}

}  // namespace detail

// Builds streams for an explicit per-client, per-task class assignment
// (classes[i][t] = class ids of client i's task t). Shared-class sample
// indices are partitioned across the clients that use them; each client's
// share is split 80/20 into train/test.
inline std::vector<TaskStream> build_task_streams_with_classes(
    const LabeledDataset& dataset,
    const std::vector<std::vector<std::vector<int>>>& classes,
    std::uint64_t seed) {
  const std::size_t num_clients = classes.size();
  std::vector<TaskStream> streams(num_clients);

  // users[k] = (client, task) pairs that train class k, in client order.
  std::map<int, std::vector<std::pair<std::size_t, std::size_t>>> users;
  for (std::size_t i = 0; i < num_clients; ++i) {
    streams[i].client_id = static_cast<int>(i);
    streams[i].tasks.resize(classes[i].size());
    std::set<int> seen;
    for (std::size_t t = 0; t < classes[i].size(); ++t) {
      std::vector<int> cs = classes[i][t];
      std::sort(cs.begin(), cs.end());
      for (int k : cs) {
        if (k < 0 || static_cast<std::size_t>(k) >= dataset.num_classes) {
          throw ConfigError("task stream: class id out of dataset range");
        }
        if (!seen.insert(k).second) {
          throw ConfigError(
              "task stream: class repeats within one client's sequence");
        }
        users[k].emplace_back(i, t);
      }
      streams[i].tasks[t].classes = std::move(cs);
      streams[i].classes_per_task =
          std::max(streams[i].classes_per_task, classes[i][t].size());
    }
  }

  for (const auto& [k, ku] : users) {
    Rng crng(derive_seed(seed, 0x636c7370, static_cast<std::uint64_t>(k)));
    std::vector<std::size_t> idx =
        dataset.class_indices[static_cast<std::size_t>(k)];
    crng.shuffle(idx);
    const auto chunks = detail::chunk_indices(idx, ku.size());
    for (std::size_t u = 0; u < ku.size(); ++u) {
      const auto [client, task] = ku[u];
      const auto& part = chunks[u];
      const std::size_t train_n = (part.size() * 8) / 10;
      Task& tk = streams[client].tasks[task];
      tk.train_indices.insert(tk.train_indices.end(), part.begin(),
                              part.begin() + train_n);
      tk.test_indices.insert(tk.test_indices.end(), part.begin() + train_n,
                             part.end());
    }
  }
  return streams;
}

// Appendix-style construction: each client draws classes_per_task * num_tasks
// distinct classes uniformly without replacement (independently per client;
// overlaps across clients are allowed) and partitions them into tasks in draw
// order.
inline std::vector<TaskStream> build_task_streams(
    const LabeledDataset& dataset, std::size_t num_clients,
    std::size_t classes_per_task, std::size_t num_tasks, std::uint64_t seed) {
  if (num_clients == 0 || classes_per_task == 0 || num_tasks == 0) {
    throw ConfigError("build_task_streams: counts must be positive");
  }
  if (classes_per_task * num_tasks > dataset.num_classes) {
    throw ConfigError(
        "build_task_streams: classes_per_task * num_tasks exceeds dataset "
        "classes (" +
        std::to_string(classes_per_task * num_tasks) + " > " +
        std::to_string(dataset.num_classes) + ")");
  }
  std::vector<std::vector<std::vector<int>>> classes(num_clients);
  for (std::size_t i = 0; i < num_clients; ++i) {
    Rng crng(derive_seed(seed, 0x64726177, static_cast<std::uint64_t>(i)));
    std::vector<int> ids(dataset.num_classes);
    for (std::size_t k = 0; k < ids.size(); ++k) ids[k] = static_cast<int>(k);
    crng.shuffle(ids);
    classes[i].resize(num_tasks);
    for (std::size_t t = 0; t < num_tasks; ++t) {
      classes[i][t].assign(ids.begin() + t * classes_per_task,
                           ids.begin() + (t + 1) * classes_per_task);
    }
  }
  return build_task_streams_with_classes(dataset, classes, seed);
}

// Uniform-with-replacement batch from the given task's train split only.
inline std::pair<Tensor, std::vector<int>> task_batch(
    const LabeledDataset& dataset, const TaskStream& stream,
    std::size_t task_idx, std::size_t batch_size, Rng& rng) {
  const Task& task = stream.task(task_idx);
  if (task.train_indices.empty()) {
    throw ConfigError("task_batch: task has no train samples");
  }
  std::vector<std::size_t> idx(batch_size);
  for (auto& i : idx) {
    i = task.train_indices[rng.uniform_index(task.train_indices.size())];
  }
  return {dataset.gather(idx), dataset.gather_labels(idx)};
}

// One record per client-task, for experiment reproducibility.
inline std::string stream_manifest(const std::vector<TaskStream>& streams) {
  std::ostringstream os;
  for (const auto& s : streams) {
    for (std::size_t t = 0; t < s.tasks.size(); ++t) {
      os << "client=" << s.client_id << " task=" << t << " classes=";
      for (std::size_t c = 0; c < s.tasks[t].classes.size(); ++c) {
        if (c > 0) os << ',';
        os << s.tasks[t].classes[c];
      }
      os << " train=" << s.tasks[t].train_indices.size()
         << " test=" << s.tasks[t].test_indices.size() << "\n";
    }
  }
  return os.str();
}

}  // namespace fedcil
