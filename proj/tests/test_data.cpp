#include "fedcil/task_stream.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <map>
#include <set>

#include "fedcil/dataset.hpp"
#include "oracles.hpp"

using namespace fedcil;

TEST(SyntheticMixture, CountsPerClass) {
  LabeledDataset d = make_synthetic_mixture(4, 100, 2, 1);
  EXPECT_EQ(d.size(), 400u);
  for (const auto& idx : d.class_indices) EXPECT_EQ(idx.size(), 100u);
}

TEST(SyntheticMixture, NearestCentroidOracleAccuracy) {
  LabeledDataset d = make_synthetic_mixture(4, 100, 2, 1);
  EXPECT_GE(fedcil::testing::nearest_centroid_accuracy(d), 0.99);
}

TEST(SyntheticMixture, DeterministicGivenSeed) {
  LabeledDataset a = make_synthetic_mixture(4, 100, 2, 1);
  LabeledDataset b = make_synthetic_mixture(4, 100, 2, 1);
  EXPECT_EQ(a.samples.values(), b.samples.values());
  EXPECT_EQ(a.labels, b.labels);
  LabeledDataset c = make_synthetic_mixture(4, 100, 2, 2);
  EXPECT_NE(a.samples.values(), c.samples.values());
}

TEST(SyntheticMixture, ValuesClippedToUnitBox) {
  LabeledDataset d = make_synthetic_mixture(10, 50, 3, 3);
  for (double v : d.samples.values()) {
    EXPECT_GE(v, -1.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(SyntheticMixture, RejectsDegenerateConfig) {
  EXPECT_THROW(make_synthetic_mixture(1, 10, 2, 1), ConfigError);
  EXPECT_THROW(make_synthetic_mixture(4, 10, 1, 1), ConfigError);
}

TEST(TinyDigits, TenClassesPresent) {
  LabeledDataset d = make_tiny_digits(1);
  EXPECT_EQ(d.num_classes, 10u);
  EXPECT_EQ(d.data_dim, 64u);
  for (const auto& idx : d.class_indices) EXPECT_FALSE(idx.empty());
}

TEST(TinyDigits, TemplatesMatchStoredGlyphsExactly) {
  for (std::size_t k = 0; k < 10; ++k) {
    const auto glyph = tiny_digit_glyph(k);
    ASSERT_EQ(glyph.size(), 64u);
    const auto& rows = tiny_digit_rows()[k];
    for (std::size_t r = 0; r < 8; ++r) {
      for (std::size_t c = 0; c < 8; ++c) {
        EXPECT_EQ(glyph[r * 8 + c], rows[r][c] == 'X' ? 1.0 : -1.0);
      }
    }
  }
  // Distinct classes have distinct templates.
  for (std::size_t a = 0; a < 10; ++a) {
    for (std::size_t b = a + 1; b < 10; ++b) {
      EXPECT_NE(tiny_digit_glyph(a), tiny_digit_glyph(b));
    }
  }
}

TEST(TinyDigits, LinearProbeOracleAccuracy) {
  LabeledDataset d = make_tiny_digits(1);
  EXPECT_GE(fedcil::testing::linear_probe_accuracy(d), 0.95);
}

TEST(TaskStreams, MnistLikeConfigCoversAllClassesOncePerClient) {
  // 5 clients x 5 tasks x 2 classes over 10 classes: every client sees all
  // ten classes exactly once.
  LabeledDataset d = make_synthetic_mixture(10, 50, 2, 1);
  auto streams = build_task_streams(d, 5, 2, 5, 7);
  ASSERT_EQ(streams.size(), 5u);
  for (const auto& s : streams) {
    ASSERT_EQ(s.num_tasks(), 5u);
    std::set<int> seen;
    for (const auto& t : s.tasks) {
      EXPECT_EQ(t.classes.size(), 2u);
      for (int k : t.classes) EXPECT_TRUE(seen.insert(k).second);
    }
    EXPECT_EQ(seen.size(), 10u);
  }
}

TEST(TaskStreams, SingleTaskDegeneratesToPlainFl) {
  LabeledDataset d = make_synthetic_mixture(4, 50, 2, 1);
  auto streams = build_task_streams(d, 3, 2, 1, 7);
  for (const auto& s : streams) EXPECT_EQ(s.num_tasks(), 1u);
}

TEST(TaskStreams, SharedClassIndexSetsAreDisjointAcrossClients) {
  LabeledDataset d = make_synthetic_mixture(10, 50, 2, 1);
  auto streams = build_task_streams(d, 5, 2, 5, 7);
  // Exhaustive pairwise intersection check per class.
  std::map<int, std::vector<std::set<std::size_t>>> per_class_sets;
  for (const auto& s : streams) {
    for (const auto& t : s.tasks) {
      std::map<int, std::set<std::size_t>> by_class;
      for (std::size_t i : t.train_indices) by_class[d.labels[i]].insert(i);
      for (std::size_t i : t.test_indices) by_class[d.labels[i]].insert(i);
      for (auto& [k, set] : by_class) {
        per_class_sets[k].push_back(std::move(set));
      }
    }
  }
  for (const auto& [k, sets] : per_class_sets) {
    for (std::size_t a = 0; a < sets.size(); ++a) {
      for (std::size_t b = a + 1; b < sets.size(); ++b) {
        std::vector<std::size_t> inter;
        std::set_intersection(sets[a].begin(), sets[a].end(), sets[b].begin(),
                              sets[b].end(), std::back_inserter(inter));
        EXPECT_TRUE(inter.empty()) << "class " << k;
      }
    }
  }
}

TEST(TaskStreams, TrainTestDisjointAndSplitRatio) {
  LabeledDataset d = make_synthetic_mixture(10, 100, 2, 1);
  auto streams = build_task_streams(d, 2, 2, 5, 7);
  for (const auto& s : streams) {
    for (const auto& t : s.tasks) {
      std::set<std::size_t> train(t.train_indices.begin(),
                                  t.train_indices.end());
      for (std::size_t i : t.test_indices) EXPECT_FALSE(train.contains(i));
      // 80/20 within rounding; indices only from the task's classes.
      const double ratio =
          static_cast<double>(t.train_indices.size()) /
          static_cast<double>(t.train_indices.size() + t.test_indices.size());
      EXPECT_NEAR(ratio, 0.8, 0.03);
      for (std::size_t i : t.train_indices) {
        EXPECT_TRUE(std::find(t.classes.begin(), t.classes.end(),
                              d.labels[i]) != t.classes.end());
      }
    }
  }
}

TEST(TaskStreams, PureFunctionOfInputs) {
  LabeledDataset d = make_synthetic_mixture(10, 50, 2, 1);
  auto a = build_task_streams(d, 5, 2, 5, 7);
  auto b = build_task_streams(d, 5, 2, 5, 7);
  EXPECT_EQ(stream_manifest(a), stream_manifest(b));
  for (std::size_t i = 0; i < a.size(); ++i) {
    for (std::size_t t = 0; t < a[i].num_tasks(); ++t) {
      EXPECT_EQ(a[i].tasks[t].train_indices, b[i].tasks[t].train_indices);
      EXPECT_EQ(a[i].tasks[t].test_indices, b[i].tasks[t].test_indices);
    }
  }
}

TEST(TaskStreams, InfeasibleDrawRejected) {
  LabeledDataset d = make_synthetic_mixture(10, 50, 2, 1);
  EXPECT_THROW(build_task_streams(d, 5, 2, 6, 7), ConfigError);
}

TEST(TaskStreams, RepeatedClassWithinClientRejected) {
  LabeledDataset d = make_synthetic_mixture(4, 50, 2, 1);
  std::vector<std::vector<std::vector<int>>> classes{{{0, 1}, {1, 2}}};
  EXPECT_THROW(build_task_streams_with_classes(d, classes, 7), ConfigError);
}

TEST(TaskBatch, LabelsStayWithinTaskClasses) {
  LabeledDataset d = make_synthetic_mixture(10, 50, 2, 1);
  auto streams = build_task_streams(d, 2, 2, 5, 7);
  Rng rng(3);
  for (std::size_t t = 0; t < 5; ++t) {
    auto [x, y] = task_batch(d, streams[0], t, 64, rng);
    const auto& cs = streams[0].tasks[t].classes;
    for (int l : y) {
      EXPECT_TRUE(std::find(cs.begin(), cs.end(), l) != cs.end());
    }
  }
}

TEST(TaskBatch, NeverLeaksOtherTasksClasses) {
  // Task 2 batches never contain task 1 classes (per-client class sets are
  // disjoint, so a label check is an index check).
  LabeledDataset d = make_synthetic_mixture(10, 50, 2, 1);
  auto streams = build_task_streams(d, 1, 2, 5, 7);
  Rng rng(3);
  std::set<int> task1(streams[0].tasks[1].classes.begin(),
                      streams[0].tasks[1].classes.end());
  for (int rep = 0; rep < 50; ++rep) {
    auto [x, y] = task_batch(d, streams[0], 2, 32, rng);
    for (int l : y) EXPECT_FALSE(task1.contains(l));
  }
}

TEST(TaskBatch, OutOfRangeTaskRejected) {
  LabeledDataset d = make_synthetic_mixture(4, 50, 2, 1);
  auto streams = build_task_streams(d, 1, 2, 2, 7);
  Rng rng(3);
  EXPECT_THROW(task_batch(d, streams[0], 2, 8, rng), RangeError);
}

TEST(TaskBatch, EmpiricalLabelFrequenciesNearUniform) {
  LabeledDataset d = make_synthetic_mixture(10, 200, 2, 1);
  auto streams = build_task_streams(d, 1, 2, 5, 7);
  Rng rng(5);
  std::map<int, std::size_t> counts;
  const std::size_t draws = 10000;
  for (std::size_t i = 0; i < draws / 50; ++i) {
    auto [x, y] = task_batch(d, streams[0], 0, 50, rng);
    for (int l : y) ++counts[l];
  }
  ASSERT_EQ(counts.size(), 2u);
  for (const auto& [label, count] : counts) {
    const double freq = static_cast<double>(count) / draws;
    EXPECT_NEAR(freq, 0.5, 0.05) << "label " << label;
  }
}

TEST(Manifest, OneRecordPerClientTask) {
  LabeledDataset d = make_synthetic_mixture(10, 50, 2, 1);
  auto streams = build_task_streams(d, 3, 2, 4, 7);
  const std::string m = stream_manifest(streams);
  EXPECT_EQ(std::count(m.begin(), m.end(), '\n'), 12);
  EXPECT_NE(m.find("client=0 task=0 classes="), std::string::npos);
}
