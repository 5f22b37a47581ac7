#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedcil/protocol.hpp"

// Experiment runner: configuration (flat dotted-key text format), multi-seed
// execution, JSON-lines metrics logs, checkpoints, stream manifests and CSV
// plot-data export. A run is a pure function of its config snapshot.

namespace fedcil {

struct DatasetSpec {
  std::string kind = "mixture";  // mixture | tiny_digits
  std::size_t num_classes = 10;
  std::size_t samples_per_class = 500;
  std::size_t data_dim = 2;
};

struct ExperimentConfig {
  DatasetSpec dataset;
  std::size_t num_clients = 5;
  std::size_t classes_per_task = 2;
  std::size_t num_tasks = 5;
  std::string method = "fedcil";
  std::size_t local_iterations = 40;  // T
  std::size_t rounds = 50;            // R; rounds are apportioned evenly
  std::size_t batch_size = 32;
  double lr = 1e-4;
  double mu = 0.01;
  double kd_temperature = 2.0;
  ConsolidationConfig consolidation;
  double consistency_w1 = 1.0;
  double consistency_w2 = 1.0;
  double consistency_w3 = 1.0;
  bool no_consolidation = false;
  bool no_consistency = false;
  bool no_replay = false;
  bool sweep_fixed_rounds = false;  // hold R (not T*R) fixed in sweeps
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::string output_dir;  // empty: keep results in memory only
  ModelConfig model;
};

inline void validate(const ExperimentConfig& cfg) {
  if (cfg.dataset.kind != "mixture" && cfg.dataset.kind != "tiny_digits") {
    throw ConfigError("config: unknown dataset kind '" + cfg.dataset.kind +
                      "'");
  }
  if (cfg.num_clients == 0 || cfg.num_tasks == 0 || cfg.classes_per_task == 0 ||
      cfg.rounds == 0 || cfg.local_iterations == 0 || cfg.batch_size == 0) {
    throw ConfigError("config: all counts must be positive");
  }
  if (cfg.rounds % cfg.num_tasks != 0) {
    throw ConfigError("config: rounds (" + std::to_string(cfg.rounds) +
                      ") must be divisible by num_tasks (" +
                      std::to_string(cfg.num_tasks) + ")");
  }
  const std::size_t classes = cfg.dataset.kind == "tiny_digits"
                                  ? 10
                                  : cfg.dataset.num_classes;
  if (cfg.classes_per_task * cfg.num_tasks > classes) {
    throw ConfigError("config: classes_per_task * num_tasks exceeds dataset "
                      "classes");
  }
  if (cfg.seeds.empty()) throw ConfigError("config: need at least one seed");
  if (cfg.lr <= 0.0) throw ConfigError("config: lr must be positive");
  method_from_string(cfg.method);  // throws on unknown method
}

// --- flat dotted-key snapshot format ---------------------------------------

namespace detail {

inline std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

template <typename T>
std::string fmt_list(const std::vector<T>& xs) {
  std::ostringstream os;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    if (i) os << ',';
    os << xs[i];
  }
  return os.str();
}

inline std::vector<std::uint64_t> parse_u64_list(const std::string& s) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(std::stoull(item));
  }
  return out;
}

inline std::vector<std::size_t> parse_size_list(const std::string& s) {
  std::vector<std::size_t> out;
  for (std::uint64_t v : parse_u64_list(s)) {
    out.push_back(static_cast<std::size_t>(v));
  }
  return out;
}

}  // namespace detail

inline std::string config_to_text(const ExperimentConfig& c) {
  std::ostringstream os;
  os << "batch_size = " << c.batch_size << "\n";
  os << "classes_per_task = " << c.classes_per_task << "\n";
  os << "consistency_w1 = " << detail::fmt_double(c.consistency_w1) << "\n";
  os << "consistency_w2 = " << detail::fmt_double(c.consistency_w2) << "\n";
  os << "consistency_w3 = " << detail::fmt_double(c.consistency_w3) << "\n";
  os << "consolidation.batch_size = " << c.consolidation.batch_size << "\n";
  os << "consolidation.iterations = " << c.consolidation.iterations << "\n";
  os << "consolidation.lr = " << detail::fmt_double(c.consolidation.lr)
     << "\n";
  os << "dataset.data_dim = " << c.dataset.data_dim << "\n";
  os << "dataset.kind = " << c.dataset.kind << "\n";
  os << "dataset.num_classes = " << c.dataset.num_classes << "\n";
  os << "dataset.samples_per_class = " << c.dataset.samples_per_class << "\n";
  os << "kd_temperature = " << detail::fmt_double(c.kd_temperature) << "\n";
  os << "local_iterations = " << c.local_iterations << "\n";
  os << "lr = " << detail::fmt_double(c.lr) << "\n";
  os << "method = " << c.method << "\n";
  os << "model.gen_hidden = " << detail::fmt_list(c.model.gen_hidden) << "\n";
  os << "model.leaky_slope = " << detail::fmt_double(c.model.leaky_slope)
     << "\n";
  os << "model.noise_dim = " << c.model.noise_dim << "\n";
  os << "model.trunk_hidden = " << detail::fmt_list(c.model.trunk_hidden)
     << "\n";
  os << "mu = " << detail::fmt_double(c.mu) << "\n";
  os << "no_consistency = " << (c.no_consistency ? "true" : "false") << "\n";
  os << "no_consolidation = " << (c.no_consolidation ? "true" : "false")
     << "\n";
  os << "no_replay = " << (c.no_replay ? "true" : "false") << "\n";
  os << "num_clients = " << c.num_clients << "\n";
  os << "num_tasks = " << c.num_tasks << "\n";
  os << "rounds = " << c.rounds << "\n";
  os << "seeds = " << detail::fmt_list(c.seeds) << "\n";
  os << "sweep_fixed_rounds = " << (c.sweep_fixed_rounds ? "true" : "false")
     << "\n";
  return os.str();
}

inline ExperimentConfig config_from_text(const std::string& text) {
  ExperimentConfig c;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": expected 'key = value'");
    }
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    auto as_bool = [&] {
      if (value == "true") return true;
      if (value == "false") return false;
      throw ConfigError("config: boolean expected for " + key);
    };
    if (key == "batch_size") c.batch_size = std::stoull(value);
    else if (key == "classes_per_task") c.classes_per_task = std::stoull(value);
    else if (key == "consistency_w1") c.consistency_w1 = std::stod(value);
    else if (key == "consistency_w2") c.consistency_w2 = std::stod(value);
    else if (key == "consistency_w3") c.consistency_w3 = std::stod(value);
    else if (key == "consolidation.batch_size")
      c.consolidation.batch_size = std::stoull(value);
    else if (key == "consolidation.iterations")
      c.consolidation.iterations = std::stoull(value);
    else if (key == "consolidation.lr") c.consolidation.lr = std::stod(value);
    else if (key == "dataset.data_dim") c.dataset.data_dim = std::stoull(value);
    else if (key == "dataset.kind") c.dataset.kind = value;
    else if (key == "dataset.num_classes")
      c.dataset.num_classes = std::stoull(value);
    else if (key == "dataset.samples_per_class")
      c.dataset.samples_per_class = std::stoull(value);
    else if (key == "kd_temperature") c.kd_temperature = std::stod(value);
    else if (key == "local_iterations")
      c.local_iterations = std::stoull(value);
    else if (key == "lr") c.lr = std::stod(value);
    else if (key == "method") c.method = value;
    else if (key == "model.gen_hidden")
      c.model.gen_hidden = detail::parse_size_list(value);
    else if (key == "model.leaky_slope") c.model.leaky_slope = std::stod(value);
    else if (key == "model.noise_dim") c.model.noise_dim = std::stoull(value);
    else if (key == "model.trunk_hidden")
      c.model.trunk_hidden = detail::parse_size_list(value);
    else if (key == "mu") c.mu = std::stod(value);
    else if (key == "no_consistency") c.no_consistency = as_bool();
    else if (key == "no_consolidation") c.no_consolidation = as_bool();
    else if (key == "no_replay") c.no_replay = as_bool();
    else if (key == "num_clients") c.num_clients = std::stoull(value);
    else if (key == "num_tasks") c.num_tasks = std::stoull(value);
    else if (key == "rounds") c.rounds = std::stoull(value);
    else if (key == "seeds") c.seeds = detail::parse_u64_list(value);
    else if (key == "sweep_fixed_rounds") c.sweep_fixed_rounds = as_bool();
    else throw ConfigError("config: unknown key '" + key + "'");
  }
  return c;
}

// --- execution --------------------------------------------------------------

struct SeedResult {
  std::uint64_t seed = 0;
  double final_accuracy = 0.0;
  EvalReport final_report;
  std::vector<RoundRecord> rounds;
  std::string manifest;
  ParameterVector final_params;
  std::string metrics_jsonl;  // exact bytes written to the log
};

struct RunSummary {
  std::vector<double> final_accuracies;  // per seed
  double mean = 0.0;
  double stddev = 0.0;
};

struct RunArtifact {
  ExperimentConfig config;
  std::vector<SeedResult> seeds;
  RunSummary summary;
  std::string directory;  // empty when not persisted
};

namespace detail {

inline LabeledDataset make_dataset(const DatasetSpec& spec,
                                   std::uint64_t seed) {
  if (spec.kind == "tiny_digits") return make_tiny_digits(seed);
  return make_synthetic_mixture(spec.num_classes, spec.samples_per_class,
                                spec.data_dim, seed);
}

inline nlohmann::json round_record_json(const RoundRecord& rec,
                                        const EvalReport* final_report) {
  nlohmann::json j;
  j["round"] = rec.round;
  j["known_classes"] = rec.known_classes;
  if (rec.global_accuracy >= 0.0) j["global_accuracy"] = rec.global_accuracy;
  nlohmann::json clients = nlohmann::json::array();
  for (std::size_t i = 0; i < rec.clients.size(); ++i) {
    const auto& c = rec.clients[i];
    nlohmann::json cj;
    cj["client"] = c.client_id;
    cj["task"] = c.task_index;
    cj["post_sync_accuracy"] = c.post_sync_accuracy;
    cj["sample_count"] = c.sample_count;
    cj["ce_loss"] = c.ce_loss;
    cj["ce_grad_norm"] = c.ce_grad_norm;
    cj["mean_gen_loss"] = c.mean_gen_loss;
    cj["mean_dis_loss"] = c.mean_dis_loss;
    cj["mean_c1"] = c.mean_c1;
    cj["mean_c2"] = c.mean_c2;
    cj["mean_c3"] = c.mean_c3;
    if (i < rec.proxy_fid.size()) cj["fid"] = rec.proxy_fid[i];
    clients.push_back(std::move(cj));
  }
  j["clients"] = std::move(clients);
  if (final_report != nullptr) {
    j["confusion"] = final_report->confusion;
    j["per_class_accuracy"] = final_report->per_class_accuracy;
    j["local_accuracy"] = final_report->local_accuracy;
  }
  return j;
}

// Real-side sample for the generator-quality score: up to `cap` of the
// client's train samples across tasks <= current.
inline Tensor fid_real_side(const LabeledDataset& data,
                            const TaskStream& stream, std::size_t upto_task,
                            std::size_t cap = 256) {
  std::vector<std::size_t> idx;
  for (std::size_t t = 0; t <= upto_task && t < stream.num_tasks(); ++t) {
    idx.insert(idx.end(), stream.tasks[t].train_indices.begin(),
               stream.tasks[t].train_indices.end());
  }
  if (idx.size() > cap) idx.resize(cap);
  return data.gather(idx);
}

inline SeedResult run_one_seed(const ExperimentConfig& cfg,
                               std::uint64_t seed) {
  const Method method = method_from_string(cfg.method);
  ModelConfig model_cfg = cfg.model;
  LabeledDataset data = make_dataset(cfg.dataset, seed);
  model_cfg.data_dim = data.data_dim;

  std::vector<TaskStream> streams = build_task_streams(
      data, cfg.num_clients, cfg.classes_per_task, cfg.num_tasks, seed);

  TrainerConfig tcfg;
  tcfg.method = method;
  tcfg.model = model_cfg;
  tcfg.lr = cfg.lr;
  tcfg.mu = cfg.mu;
  tcfg.kd_temperature = cfg.kd_temperature;
  tcfg.consistency_w1 = cfg.consistency_w1;
  tcfg.consistency_w2 = cfg.consistency_w2;
  tcfg.consistency_w3 = cfg.consistency_w3;
  tcfg.replay_enabled = !cfg.no_replay;
  tcfg.consistency_enabled = !cfg.no_consistency;

  ServerState server;
  server.model_config = model_cfg;
  server.consolidation = cfg.consolidation;
  {
    Rng srv_rng(derive_seed(seed, 0x73727672ULL));
    server.global_params =
        method_uses_acgan(method)
            ? AcganModel(model_cfg, 1, srv_rng).params()
            : init_classifier_params(model_cfg, 1, srv_rng);
  }

  std::vector<std::unique_ptr<ClientTrainer>> trainers;
  std::vector<ClientEnv> envs;
  for (std::size_t i = 0; i < cfg.num_clients; ++i) {
    Rng init_rng(derive_seed(seed, 0x696e6974ULL, i));
    trainers.push_back(make_trainer(static_cast<int>(i), tcfg, init_rng));
    envs.push_back(ClientEnv{trainers.back().get(), &data, &streams[i], 0,
                             cfg.batch_size});
  }

  const bool consolidation_on =
      method == Method::kFedcil && !cfg.no_consolidation;
  const std::size_t rounds_per_task = cfg.rounds / cfg.num_tasks;

  SeedResult result;
  result.seed = seed;
  result.manifest = stream_manifest(streams);

  EvalReport last_report;
  for (std::size_t r = 0; r < cfg.rounds; ++r) {
    const std::size_t task = r / rounds_per_task;
    if (r % rounds_per_task == 0) {
      for (std::size_t i = 0; i < cfg.num_clients; ++i) {
        Rng task_rng(derive_seed(seed, 0x7461736bULL, task, i));
        trainers[i]->start_task(streams[i].tasks[task].classes, task_rng);
        envs[i].current_task = task;
      }
    }
    RoundPlan plan;
    plan.round_index = static_cast<int>(r);
    plan.local_iterations = cfg.local_iterations;
    for (std::size_t i = 0; i < cfg.num_clients; ++i) {
      plan.selected_clients.push_back(static_cast<int>(i));
    }
    RoundRecord rec = run_round(server, envs, plan, consolidation_on, seed);

    last_report =
        evaluate_global(server.global_params, model_cfg, data, streams, task);
    rec.global_accuracy = last_report.global_accuracy;

    if (method_uses_acgan(method)) {
      rec.proxy_fid.resize(cfg.num_clients, -1.0);
      for (std::size_t i = 0; i < cfg.num_clients; ++i) {
        const auto* t =
            static_cast<const AcganClientTrainer*>(trainers[i].get());
        const auto& classes = t->announced_classes();
        if (classes.empty()) continue;
        std::vector<int> labels(256);
        for (std::size_t k = 0; k < labels.size(); ++k) {
          labels[k] = classes[k % classes.size()];
        }
        Rng gen_rng(derive_seed(seed, 0xf1dULL, r, i));
        Tensor fake = t->model().generate(labels, gen_rng);
        rec.proxy_fid[i] =
            proxy_fid(fid_real_side(data, streams[i], task), fake);
      }
    }
    result.rounds.push_back(std::move(rec));
  }

  // Final evaluation artifacts: per-client local accuracy enters the report.
  last_report.round = static_cast<int>(cfg.rounds) - 1;
  for (std::size_t i = 0; i < cfg.num_clients; ++i) {
    last_report.local_accuracy.push_back(
        local_accuracy(trainers[i]->parameters(), model_cfg, data, streams[i],
                       cfg.num_tasks - 1));
  }
  result.final_report = last_report;
  result.final_accuracy = last_report.global_accuracy;
  result.final_params = server.global_params;

  std::ostringstream log;
  for (std::size_t r = 0; r < result.rounds.size(); ++r) {
    const bool last = r + 1 == result.rounds.size();
    log << round_record_json(result.rounds[r],
                             last ? &result.final_report : nullptr)
               .dump()
        << "\n";
  }
  result.metrics_jsonl = log.str();
  return result;
}

inline void persist_seed(const std::string& dir, const SeedResult& sr) {
  namespace fs = std::filesystem;
  const fs::path seed_dir =
      fs::path(dir) / ("seed" + std::to_string(sr.seed));
  fs::create_directories(seed_dir);
  {
    std::ofstream os(seed_dir / "metrics.jsonl", std::ios::binary);
    if (!os) throw IoError("cannot write " + (seed_dir / "metrics.jsonl").string());
    os << sr.metrics_jsonl;
  }
  {
    std::ofstream os(seed_dir / "streams.txt", std::ios::binary);
    os << sr.manifest;
  }
  save_checkpoint_file(sr.final_params,
                       (seed_dir / "checkpoint.fcil").string());
}

}  // namespace detail

inline RunArtifact run(const ExperimentConfig& cfg) {
  validate(cfg);
  RunArtifact artifact;
  artifact.config = cfg;
  for (std::uint64_t seed : cfg.seeds) {
    artifact.seeds.push_back(detail::run_one_seed(cfg, seed));
    artifact.summary.final_accuracies.push_back(
        artifact.seeds.back().final_accuracy);
  }
  const auto& xs = artifact.summary.final_accuracies;
  double mean = 0.0;
  for (double x : xs) mean += x;
  mean /= static_cast<double>(xs.size());
  double var = 0.0;
  for (double x : xs) var += (x - mean) * (x - mean);
  var = xs.size() > 1 ? var / static_cast<double>(xs.size() - 1) : 0.0;
  artifact.summary.mean = mean;
  artifact.summary.stddev = std::sqrt(var);

  if (!cfg.output_dir.empty()) {
    namespace fs = std::filesystem;
    fs::create_directories(cfg.output_dir);
    {
      std::ofstream os(fs::path(cfg.output_dir) / "config.ini",
                       std::ios::binary);
      if (!os) throw IoError("cannot write config snapshot in " +
                             cfg.output_dir);
      os << config_to_text(cfg);
    }
    for (const auto& sr : artifact.seeds) {
      detail::persist_seed(cfg.output_dir, sr);
    }
    nlohmann::json summary;
    summary["final_accuracies"] = artifact.summary.final_accuracies;
    summary["mean"] = artifact.summary.mean;
    summary["stddev"] = artifact.summary.stddev;
    summary["method"] = cfg.method;
    std::ofstream os(fs::path(cfg.output_dir) / "summary.json",
                     std::ios::binary);
    os << summary.dump(2) << "\n";
    artifact.directory = cfg.output_dir;
  }
  return artifact;
}

// --- local-iteration sweep (Appendix-C style) -------------------------------

struct SweepRow {
  std::size_t local_iterations = 0;
  std::size_t rounds = 0;
  double mean_final_accuracy = 0.0;
  double stddev_final_accuracy = 0.0;
  double accuracy_delta_variance = 0.0;  // smoothness of the accuracy curve
};

inline double round_delta_variance(const SeedResult& sr) {
  std::vector<double> deltas;
  for (std::size_t r = 1; r < sr.rounds.size(); ++r) {
    deltas.push_back(sr.rounds[r].global_accuracy -
                     sr.rounds[r - 1].global_accuracy);
  }
  if (deltas.empty()) return 0.0;
  double mean = 0.0;
  for (double d : deltas) mean += d;
  mean /= static_cast<double>(deltas.size());
  double var = 0.0;
  for (double d : deltas) var += (d - mean) * (d - mean);
  return var / static_cast<double>(deltas.size());
}

// Runs the base config at each T. Unless sweep_fixed_rounds is set, the
// total budget T*R is held constant and R is rounded down to a multiple of
// num_tasks.
inline std::vector<SweepRow> sweep_local_iterations(
    const ExperimentConfig& base, const std::vector<std::size_t>& t_values) {
  if (t_values.empty()) throw ConfigError("sweep: no T values");
  const std::size_t total = base.local_iterations * base.rounds;
  std::vector<SweepRow> rows;
  for (std::size_t t : t_values) {
    ExperimentConfig cfg = base;
    cfg.local_iterations = t;
    cfg.output_dir.clear();
    if (!cfg.sweep_fixed_rounds) {
      std::size_t r = total / t;
      r -= r % cfg.num_tasks;
      if (r < cfg.num_tasks) {
        throw ConfigError("sweep: T=" + std::to_string(t) +
                          " leaves fewer rounds than tasks");
      }
      cfg.rounds = r;
    }
    RunArtifact art = run(cfg);
    SweepRow row;
    row.local_iterations = t;
    row.rounds = cfg.rounds;
    row.mean_final_accuracy = art.summary.mean;
    row.stddev_final_accuracy = art.summary.stddev;
    double dv = 0.0;
    for (const auto& sr : art.seeds) dv += round_delta_variance(sr);
    row.accuracy_delta_variance = dv / static_cast<double>(art.seeds.size());
    rows.push_back(row);
  }
  if (!base.output_dir.empty()) {
    namespace fs = std::filesystem;
    fs::create_directories(base.output_dir);
    std::ofstream os(fs::path(base.output_dir) / "sweep.csv",
                     std::ios::binary);
    os << "T,R,mean_final_accuracy,stddev_final_accuracy,"
          "accuracy_delta_variance\n";
    for (const auto& r : rows) {
      os << r.local_iterations << ',' << r.rounds << ','
         << detail::fmt_double(r.mean_final_accuracy) << ','
         << detail::fmt_double(r.stddev_final_accuracy) << ','
         << detail::fmt_double(r.accuracy_delta_variance) << "\n";
    }
  }
  return rows;
}

// --- method/ablation comparison ---------------------------------------------

struct CompareVariant {
  std::string label;
  std::string method;
  bool no_consolidation = false;
  bool no_consistency = false;
  bool no_replay = false;
};

struct CompareRow {
  std::string label;
  double mean = 0.0;
  double stddev = 0.0;
  std::vector<double> finals;
};

// Runs every variant over the base config's shared seeds (streams are a pure
// function of dataset/config/seed, so variants see identical data splits).
inline std::vector<CompareRow> compare_methods(
    const ExperimentConfig& base, const std::vector<CompareVariant>& variants) {
  if (variants.empty()) throw ConfigError("compare: no variants");
  std::vector<CompareRow> rows;
  for (const auto& v : variants) {
    ExperimentConfig cfg = base;
    cfg.method = v.method;
    cfg.no_consolidation = v.no_consolidation;
    cfg.no_consistency = v.no_consistency;
    cfg.no_replay = v.no_replay;
    cfg.output_dir.clear();
    RunArtifact art = run(cfg);
    rows.push_back(CompareRow{v.label, art.summary.mean, art.summary.stddev,
                              art.summary.final_accuracies});
  }
  if (!base.output_dir.empty()) {
    namespace fs = std::filesystem;
    fs::create_directories(base.output_dir);
    std::ofstream os(fs::path(base.output_dir) / "compare.csv",
                     std::ios::binary);
    os << "label,mean_final_accuracy,stddev_final_accuracy,per_seed\n";
    for (const auto& r : rows) {
      os << r.label << ',' << detail::fmt_double(r.mean) << ','
         << detail::fmt_double(r.stddev) << ',';
      for (std::size_t i = 0; i < r.finals.size(); ++i) {
        if (i) os << ';';
        os << detail::fmt_double(r.finals[i]);
      }
      os << "\n";
    }
  }
  return rows;
}

// --- plot-data export --------------------------------------------------------

// Rewrites one figure panel's data as CSV from a persisted run's JSON-lines
// log. Returns the written file path. Pure function of the log bytes.
inline std::string export_plot_data(const std::string& run_dir,
                                    const std::string& kind,
                                    std::uint64_t seed) {
  namespace fs = std::filesystem;
  const fs::path log_path =
      fs::path(run_dir) / ("seed" + std::to_string(seed)) / "metrics.jsonl";
  std::ifstream is(log_path, std::ios::binary);
  if (!is) throw IoError("export: cannot open " + log_path.string());
  std::vector<nlohmann::json> records;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty()) records.push_back(nlohmann::json::parse(line));
  }
  const fs::path out_dir = fs::path(run_dir) / "plots";
  fs::create_directories(out_dir);
  const fs::path out_path =
      out_dir / (kind + "_seed" + std::to_string(seed) + ".csv");
  std::ofstream os(out_path, std::ios::binary);
  if (!os) throw IoError("export: cannot write " + out_path.string());

  if (kind == "loss_trace" || kind == "grad_norm") {
    const char* field = kind == "loss_trace" ? "ce_loss" : "ce_grad_norm";
    os << "round,client,iteration," << field << "\n";
    for (const auto& rec : records) {
      for (const auto& c : rec.at("clients")) {
        const auto& series = c.at(field);
        for (std::size_t i = 0; i < series.size(); ++i) {
          os << rec.at("round").get<int>() << ','
             << c.at("client").get<int>() << ',' << i << ','
             << detail::fmt_double(series[i].get<double>()) << "\n";
        }
      }
    }
  } else if (kind == "fid_trace") {
    os << "round,client,fid\n";
    for (const auto& rec : records) {
      for (const auto& c : rec.at("clients")) {
        if (!c.contains("fid")) continue;
        os << rec.at("round").get<int>() << ',' << c.at("client").get<int>()
           << ',' << detail::fmt_double(c.at("fid").get<double>()) << "\n";
      }
    }
  } else if (kind == "post_sync_accuracy") {
    os << "round,client,post_sync_accuracy\n";
    for (const auto& rec : records) {
      for (const auto& c : rec.at("clients")) {
        os << rec.at("round").get<int>() << ',' << c.at("client").get<int>()
           << ','
           << detail::fmt_double(c.at("post_sync_accuracy").get<double>())
           << "\n";
      }
    }
  } else if (kind == "confusion") {
    const auto& last = records.back();
    if (!last.contains("confusion")) {
      throw IoError("export: log carries no confusion matrix");
    }
    for (const auto& row : last.at("confusion")) {
      for (std::size_t j = 0; j < row.size(); ++j) {
        if (j) os << ',';
        os << row[j].get<std::size_t>();
      }
      os << "\n";
    }
  } else {
    throw ConfigError("export: unknown kind '" + kind +
                      "' (loss_trace|grad_norm|fid_trace|confusion|"
                      "post_sync_accuracy)");
  }
  return out_path.string();
}

}  // namespace fedcil
