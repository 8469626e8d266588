#pragma once

// Multi-seed toy study: train per (preset, seed), prune per method, fine-tune,
// and bin the final accuracies into clusters.

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "cnx/connectivity.hpp"
#include "cnx/errors.hpp"
#include "cnx/network.hpp"
#include "cnx/objective.hpp"
#include "cnx/pruning.hpp"
#include "cnx/rng.hpp"
#include "cnx/training.hpp"

namespace cnx {

using json = nlohmann::ordered_json;

inline constexpr int kPlanSchemaVersion = 1;
inline constexpr int kReportSchemaVersion = 1;
inline constexpr int kMetricsSchemaVersion = 1;

// ---------------------------------------------------------------------------
// Plan
// ---------------------------------------------------------------------------

struct Preset {
  std::string name;
  RegularizerConfig reg;
};

/// NONE, L1 and CONNECT with the default coefficients.
inline std::vector<Preset> default_presets() {
  return {{"NONE", {0.0, 0.0, 5e-4}}, {"L1", {1e-3, 0.0, 5e-4}}, {"CONNECT", {0.0, 0.1, 5e-4}}};
}

struct ClusterThresholds {
  double full = 0.95;          // acc > full
  double partial_low = 0.625;  // partial_low <= acc < partial_high
  double partial_high = 0.875;
};

enum class Cluster { Collapse, Low, Partial, Full, Failed };

inline const char* cluster_name(Cluster c) {
  switch (c) {
    case Cluster::Collapse: return "COLLAPSE";
    case Cluster::Low: return "LOW";
    case Cluster::Partial: return "PARTIAL";
    case Cluster::Full: return "FULL";
    case Cluster::Failed: return "FAILED";
  }
  return "?";
}

/// COLLAPSE wins over any accuracy; then FULL, PARTIAL, LOW.
inline Cluster classify(double accuracy, bool collapsed, const ClusterThresholds& t) {
  if (collapsed) return Cluster::Collapse;
  if (accuracy > t.full) return Cluster::Full;
  if (accuracy >= t.partial_low && accuracy < t.partial_high) return Cluster::Partial;
  return Cluster::Low;
}

struct FineTuneSettings {
  std::size_t epochs = 50;
  double learning_rate = 0.001;
  bool keep_sparsity_regularizers = false;
};

struct ExperimentPlan {
  std::string name = "default";
  std::vector<std::size_t> sizes{6, 5, 5, 5, 1};
  std::vector<std::size_t> scaled_layers;  // hidden layers carrying a scaling layer
  std::uint64_t data_seed = 0;
  std::size_t n_train = kToyTrainSize;
  std::size_t n_test = kToyTestSize;
  std::vector<Preset> presets = default_presets();
  std::vector<ScoreMethod> methods{ScoreMethod::Magnitude, ScoreMethod::SynFlow};
  double prune_fraction = 0.96;
  PruneScope scope = PruneScope::Local;
  double loss_aware_lambda = 0.1;
  std::vector<std::uint64_t> seeds = seed_range(20);
  TrainConfig train;  // its seed field is replaced per run
  FineTuneSettings finetune;
  ClusterThresholds thresholds;

  static std::vector<std::uint64_t> seed_range(std::size_t n) {
    std::vector<std::uint64_t> s(n);
    for (std::size_t i = 0; i < n; ++i) s[i] = i;
    return s;
  }

  void check() const {
    if (seeds.empty()) throw std::invalid_argument("plan '" + name + "': seed list is empty");
    if (presets.empty()) throw std::invalid_argument("plan '" + name + "': no presets");
    if (methods.empty()) throw std::invalid_argument("plan '" + name + "': no pruning methods");
    if (sizes.size() < 2 || sizes.back() != 1)
      throw std::invalid_argument("plan '" + name + "': sizes need >= 2 layers and a single output");
    if (sizes.front() != kToyFeatures)
      throw std::invalid_argument("plan '" + name + "': the toy task has " + std::to_string(kToyFeatures) + " inputs");
    if (!(prune_fraction >= 0.0 && prune_fraction < 1.0))
      throw std::invalid_argument("plan '" + name + "': prune fraction must lie in [0, 1)");
    for (const auto& p : presets) p.reg.check();
    train.check();
    if (finetune.epochs < 1 || !(finetune.learning_rate > 0.0))
      throw std::invalid_argument("plan '" + name + "': fine-tune needs >= 1 epoch and a positive learning rate");
  }
};

inline std::optional<ScoreMethod> parse_method(const std::string& s) {
  if (s == "magnitude") return ScoreMethod::Magnitude;
  if (s == "synflow") return ScoreMethod::SynFlow;
  if (s == "channel") return ScoreMethod::Channel;
  if (s == "loss-aware") return ScoreMethod::LossAware;
  return std::nullopt;
}

inline std::optional<PruneScope> parse_scope(const std::string& s) {
  if (s == "local") return PruneScope::Local;
  if (s == "global") return PruneScope::Global;
  return std::nullopt;
}

inline const char* scope_name(PruneScope s) { return s == PruneScope::Local ? "local" : "global"; }

namespace detail {

template <typename T>
void read_opt(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

inline json plan_to_json(const ExperimentPlan& p) {
  json j;
  j["schema_version"] = kPlanSchemaVersion;
  j["name"] = p.name;
  j["sizes"] = p.sizes;
  if (!p.scaled_layers.empty()) j["scaled_layers"] = p.scaled_layers;
  j["data"] = {{"seed", p.data_seed}, {"n_train", p.n_train}, {"n_test", p.n_test}};
  json presets = json::array();
  for (const auto& pr : p.presets)
    presets.push_back({{"name", pr.name}, {"lambda1", pr.reg.l1}, {"lambda2", pr.reg.connect}, {"lambda3", pr.reg.l2}});
  j["presets"] = presets;
  json methods = json::array();
  for (auto m : p.methods) methods.push_back(method_name(m));
  j["methods"] = methods;
  j["prune_fraction"] = p.prune_fraction;
  j["scope"] = scope_name(p.scope);
  j["loss_aware_lambda"] = p.loss_aware_lambda;
  j["seeds"] = p.seeds;
  j["train"] = {{"epochs", p.train.epochs},
                {"batch_size", p.train.batch_size},
                {"learning_rate", p.train.learning_rate},
                {"warmup_epochs", p.train.warmup_epochs},
                {"warmup_start_factor", p.train.warmup_start_factor},
                {"warmup_end_factor", p.train.warmup_end_factor},
                {"cosine", p.train.cosine}};
  j["finetune"] = {{"epochs", p.finetune.epochs},
                   {"learning_rate", p.finetune.learning_rate},
                   {"keep_sparsity_regularizers", p.finetune.keep_sparsity_regularizers}};
  j["thresholds"] = {{"full", p.thresholds.full},
                     {"partial_low", p.thresholds.partial_low},
                     {"partial_high", p.thresholds.partial_high}};
  return j;
}

/// Parses a plan; absent fields keep their defaults. Throws ParseError on
/// malformed JSON and std::invalid_argument on invalid content.
inline ExperimentPlan plan_from_json(const json& j) {
  ExperimentPlan p;
  try {
    const int version = j.value("schema_version", kPlanSchemaVersion);
    if (version != kPlanSchemaVersion)
      throw std::invalid_argument("unsupported plan schema version " + std::to_string(version));
    detail::read_opt(j, "name", p.name);
    detail::read_opt(j, "sizes", p.sizes);
    detail::read_opt(j, "scaled_layers", p.scaled_layers);
    if (j.contains("data")) {
      const json& d = j.at("data");
      detail::read_opt(d, "seed", p.data_seed);
      detail::read_opt(d, "n_train", p.n_train);
      detail::read_opt(d, "n_test", p.n_test);
    }
    if (j.contains("presets")) {
      p.presets.clear();
      for (const json& pr : j.at("presets")) {
        Preset x;
        x.name = pr.at("name").get<std::string>();
        x.reg.l1 = pr.value("lambda1", 0.0);
        x.reg.connect = pr.value("lambda2", 0.0);
        x.reg.l2 = pr.value("lambda3", 0.0);
        p.presets.push_back(x);
      }
    }
    if (j.contains("methods")) {
      p.methods.clear();
      for (const json& m : j.at("methods")) {
        const std::string s = m.get<std::string>();
        auto parsed = parse_method(s);
        if (!parsed) throw std::invalid_argument("unknown pruning method '" + s + "'");
        p.methods.push_back(*parsed);
      }
    }
    detail::read_opt(j, "prune_fraction", p.prune_fraction);
    if (j.contains("scope")) {
      auto s = parse_scope(j.at("scope").get<std::string>());
      if (!s) throw std::invalid_argument("unknown scope '" + j.at("scope").get<std::string>() + "'");
      p.scope = *s;
    }
    detail::read_opt(j, "loss_aware_lambda", p.loss_aware_lambda);
    if (j.contains("seeds")) {
      const json& s = j.at("seeds");
      if (s.is_number_integer()) {
        if (s.get<std::int64_t>() < 0) throw std::invalid_argument("seed count must be >= 0");
        p.seeds = ExperimentPlan::seed_range(s.get<std::size_t>());
      } else {
        p.seeds = s.get<std::vector<std::uint64_t>>();
      }
    }
    if (j.contains("train")) {
      const json& t = j.at("train");
      detail::read_opt(t, "epochs", p.train.epochs);
      detail::read_opt(t, "batch_size", p.train.batch_size);
      detail::read_opt(t, "learning_rate", p.train.learning_rate);
      detail::read_opt(t, "warmup_epochs", p.train.warmup_epochs);
      detail::read_opt(t, "warmup_start_factor", p.train.warmup_start_factor);
      detail::read_opt(t, "warmup_end_factor", p.train.warmup_end_factor);
      detail::read_opt(t, "cosine", p.train.cosine);
    }
    if (j.contains("finetune")) {
      const json& f = j.at("finetune");
      detail::read_opt(f, "epochs", p.finetune.epochs);
      detail::read_opt(f, "learning_rate", p.finetune.learning_rate);
      detail::read_opt(f, "keep_sparsity_regularizers", p.finetune.keep_sparsity_regularizers);
    }
    if (j.contains("thresholds")) {
      const json& t = j.at("thresholds");
      detail::read_opt(t, "full", p.thresholds.full);
      detail::read_opt(t, "partial_low", p.thresholds.partial_low);
      detail::read_opt(t, "partial_high", p.thresholds.partial_high);
    }
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("plan field: ") + e.what());
  }
  p.check();
  return p;
}

inline ExperimentPlan load_plan(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open plan file " + path.string());
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ParseError("plan " + path.string() + ": " + e.what(), e.byte);
  }
  return plan_from_json(j);
}

// ---------------------------------------------------------------------------
// Records
// ---------------------------------------------------------------------------

inline json epoch_to_json(const EpochRecord& r) {
  return {{"epoch", r.epoch},         {"lr", r.lr},           {"train_loss", r.train_loss},
          {"test_loss", r.test_loss}, {"test_acc", r.test_acc}, {"phi_tot", r.phi_total},
          {"layer_mass", r.layer_mass}, {"collapse", r.collapse}, {"log_guard", r.log_guard}};
}

/// One JSON record per line, preceded by a header record.
inline std::string metrics_jsonl(const RunMetrics& m, const std::string& stage) {
  json header = {{"schema", "cnx.metrics"}, {"schema_version", kMetricsSchemaVersion}, {"stage", stage},
                 {"rng", kRngDescription}};
  std::string out = header.dump() + "\n";
  for (const auto& e : m.epochs) out += epoch_to_json(e).dump() + "\n";
  return out;
}

inline json mask_to_json(const PruneMask& mask) {
  json j;
  json w = json::array();
  for (const auto& m : mask.weights) {
    json rows = json::array();
    for (std::size_t r = 0; r < m.rows(); ++r) {
      std::string bits;
      for (std::size_t c = 0; c < m.cols(); ++c) bits += m(r, c) != 0.0 ? '1' : '0';
      rows.push_back(bits);
    }
    w.push_back(rows);
  }
  j["weights"] = w;
  json s = json::array();
  for (const auto& m : mask.scaling) {
    std::string bits;
    for (double v : m.values()) bits += v != 0.0 ? '1' : '0';
    s.push_back(bits);
  }
  j["scaling"] = s;
  j["kept"] = mask.kept();
  return j;
}

inline json table_to_json(const ImportanceTable& t) {
  json entries = json::array();
  for (const auto& e : t.entries) entries.push_back({e.key.layer, e.key.row, e.key.col, e.score});
  return {{"granularity", granularity_name(t.granularity)},
          {"method", method_name(t.method)},
          {"collapse_warning", t.collapse_warning},
          {"entries", entries}};
}

// ---------------------------------------------------------------------------
// Sweep
// ---------------------------------------------------------------------------

struct TrainingSummary {
  std::string preset;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  double dense_accuracy = 0.0;
  double min_phi_total = 0.0;      // over epochs (and the initial network)
  std::size_t collapse_epochs = 0;  // epochs ending with phi_total == 0
};

struct RunRecord {
  std::string preset;
  ScoreMethod method = ScoreMethod::Magnitude;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  double pruned_accuracy = 0.0;  // after pruning, before fine-tuning
  double accuracy = 0.0;         // after fine-tuning
  double phi_after_prune = 0.0;
  double phi_final = 0.0;
  std::size_t kept_weights = 0;
  Cluster cluster = Cluster::Failed;
};

struct ClusterGroup {
  std::string preset;
  ScoreMethod method = ScoreMethod::Magnitude;
  std::map<Cluster, std::size_t> counts;
  std::vector<double> accuracies;  // seed order; failed runs omitted

  std::size_t count(Cluster c) const {
    auto it = counts.find(c);
    return it == counts.end() ? 0 : it->second;
  }
};

struct ClusterReport {
  ExperimentPlan plan;
  std::vector<TrainingSummary> training;
  std::vector<RunRecord> runs;
  std::vector<ClusterGroup> groups;  // (preset, method) in plan order

  const ClusterGroup& group(const std::string& preset, ScoreMethod m) const {
    for (const auto& g : groups)
      if (g.preset == preset && g.method == m) return g;
    throw std::out_of_range("no cluster group for " + preset + "/" + method_name(m));
  }
};

struct ExperimentOptions {
  std::optional<std::filesystem::path> out_dir;  // per-run artifacts when set
  bool write_scores = true;
  std::function<void(const std::string&)> progress;  // one line per finished run
};

namespace detail {

inline void write_file(const std::filesystem::path& p, const std::string& content) {
  std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << content;
}

inline std::string lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

inline ImportanceTable score_for(ScoreMethod m, const LayeredNetwork& net, const ToyDataset& data, double lambda) {
  switch (m) {
    case ScoreMethod::Magnitude: return score_magnitude(net);
    case ScoreMethod::SynFlow: return score_synflow(net);
    case ScoreMethod::Channel: return score_channels(net);
    case ScoreMethod::LossAware: return score_loss_aware(net, data.x_train, data.y_train, lambda);
    case ScoreMethod::Gradient: break;
  }
  throw PruneError(std::string("method ") + method_name(m) + " is not available in experiments");
}

inline std::uint64_t finetune_seed(std::uint64_t seed) { return mix_seed(seed, 0xf17e); }

}  // namespace detail

/// Prunes `dense` with one method, fine-tunes, and classifies the result.
/// Exceptions propagate; run_experiment records them per run.
inline RunRecord prune_and_finetune(const LayeredNetwork& dense, const ExperimentPlan& plan, const Preset& preset,
                                    ScoreMethod method, std::uint64_t seed, const ToyDataset& data,
                                    const std::optional<std::filesystem::path>& run_dir, bool write_scores) {
  RunRecord r;
  r.preset = preset.name;
  r.method = method;
  r.seed = seed;
  const ImportanceTable table = detail::score_for(method, dense, data, plan.loss_aware_lambda);
  const PruneMask mask = build_mask(dense, table, {plan.scope, plan.prune_fraction});
  LayeredNetwork pruned = apply_mask(dense, mask);
  r.kept_weights = 0;
  for (const auto& w : mask.weights) r.kept_weights += w.count_nonzero();
  r.phi_after_prune = phi_total(pruned);
  r.pruned_accuracy = evaluate_classifier(pruned, data.x_test, data.y_test).accuracy;

  TrainConfig ft = plan.train;
  ft.epochs = plan.finetune.epochs;
  ft.learning_rate = plan.finetune.learning_rate;
  ft.warmup_epochs = 0;
  ft.seed = detail::finetune_seed(seed);
  TrainResult tuned = fine_tune(std::move(pruned), data, preset.reg, ft, {plan.finetune.keep_sparsity_regularizers});
  r.accuracy = evaluate_classifier(tuned.net, data.x_test, data.y_test).accuracy;
  r.phi_final = phi_total(tuned.net);
  r.cluster = classify(r.accuracy, r.phi_after_prune == 0.0 || r.phi_final == 0.0, plan.thresholds);
  r.ok = true;

  if (run_dir) {
    detail::write_file(*run_dir / "model.bin", serialize(tuned.net));
    detail::write_file(*run_dir / "mask.json", mask_to_json(mask).dump(1) + "\n");
    detail::write_file(*run_dir / "metrics.jsonl", metrics_jsonl(tuned.metrics, "finetune"));
    if (write_scores) detail::write_file(*run_dir / "scores.json", table_to_json(table).dump() + "\n");
  }
  return r;
}

/// Runs the full sweep in (preset, seed, method) order. A failing run is
/// recorded with its error and cluster FAILED; the sweep continues.
inline ClusterReport run_experiment(const ExperimentPlan& plan, const ExperimentOptions& opts = {}) {
  plan.check();
  ClusterReport rep;
  rep.plan = plan;
  const ToyDataset data = generate_toy(plan.n_train, plan.n_test, plan.data_seed);

  std::map<std::pair<std::string, ScoreMethod>, std::vector<RunRecord>> by_group;
  for (const Preset& preset : plan.presets) {
    for (std::uint64_t seed : plan.seeds) {
      TrainingSummary ts;
      ts.preset = preset.name;
      ts.seed = seed;
      std::optional<LayeredNetwork> dense;
      const auto preset_dir = opts.out_dir ? std::optional(*opts.out_dir / detail::lower(preset.name)) : std::nullopt;
      try {
        TrainConfig cfg = plan.train;
        cfg.seed = seed;
        TrainResult tr = train(init_random(plan.sizes, seed, Activation::Sigmoid, plan.scaled_layers), data, preset.reg, cfg);
        ts.ok = true;
        ts.dense_accuracy = evaluate_classifier(tr.net, data.x_test, data.y_test).accuracy;
        ts.min_phi_total = tr.metrics.min_phi_total;
        for (const auto& e : tr.metrics.epochs) ts.collapse_epochs += e.collapse ? 1 : 0;
        if (preset_dir) {
          const auto dir = *preset_dir / ("train_seed_" + std::to_string(seed));
          detail::write_file(dir / "model.bin", serialize(tr.net));
          detail::write_file(dir / "metrics.jsonl", metrics_jsonl(tr.metrics, "train"));
        }
        dense = std::move(tr.net);
      } catch (const std::exception& e) {
        ts.error = e.what();
      }
      rep.training.push_back(ts);

      for (ScoreMethod m : plan.methods) {
        RunRecord r;
        if (dense) {
          const auto run_dir = preset_dir ? std::optional(*preset_dir / detail::lower(method_name(m)) /
                                                          ("seed_" + std::to_string(seed)))
                                          : std::nullopt;
          try {
            r = prune_and_finetune(*dense, plan, preset, m, seed, data, run_dir, opts.write_scores);
          } catch (const std::exception& e) {
            r = RunRecord{preset.name, m, seed, false, e.what()};
          }
        } else {
          r = RunRecord{preset.name, m, seed, false, "training failed: " + ts.error};
        }
        if (opts.progress) {
          char line[160];
          std::snprintf(line, sizeof line, "%s %s seed %llu: %s acc %.4f phi %.3g", preset.name.c_str(), method_name(m),
                        static_cast<unsigned long long>(seed), cluster_name(r.cluster), r.accuracy, r.phi_final);
          opts.progress(r.ok ? line : preset.name + " " + method_name(m) + " seed " + std::to_string(seed) +
                                          ": FAILED " + r.error);
        }
        by_group[{preset.name, m}].push_back(r);
        rep.runs.push_back(r);
      }
    }
  }

  for (const Preset& preset : plan.presets) {
    for (ScoreMethod m : plan.methods) {
      ClusterGroup g;
      g.preset = preset.name;
      g.method = m;
      for (Cluster c : {Cluster::Collapse, Cluster::Low, Cluster::Partial, Cluster::Full, Cluster::Failed}) g.counts[c] = 0;
      for (const RunRecord& r : by_group[{preset.name, m}]) {
        ++g.counts[r.cluster];
        if (r.ok) g.accuracies.push_back(r.accuracy);
      }
      rep.groups.push_back(std::move(g));
    }
  }
  return rep;
}

/// The report as JSON. Contains no timestamps or paths, so identical plans
/// give identical bytes.
inline json report_to_json(const ClusterReport& rep) {
  json j;
  j["schema"] = "cnx.cluster_report";
  j["schema_version"] = kReportSchemaVersion;
  j["rng"] = kRngDescription;
  j["cluster_rule"] = "COLLAPSE if phi_total == 0 after pruning or fine-tuning; else FULL if acc > full; "
                      "PARTIAL if partial_low <= acc < partial_high; else LOW";
  j["plan"] = plan_to_json(rep.plan);
  json groups = json::array();
  for (const auto& g : rep.groups) {
    json counts;
    for (Cluster c : {Cluster::Collapse, Cluster::Low, Cluster::Partial, Cluster::Full, Cluster::Failed})
      counts[cluster_name(c)] = g.count(c);
    groups.push_back({{"preset", g.preset}, {"method", method_name(g.method)}, {"counts", counts}, {"accuracies", g.accuracies}});
  }
  j["groups"] = groups;
  json training = json::array();
  for (const auto& t : rep.training) {
    json e = {{"preset", t.preset}, {"seed", t.seed}, {"ok", t.ok}};
    if (t.ok) {
      e["dense_acc"] = t.dense_accuracy;
      e["min_phi_tot"] = t.min_phi_total;
      e["collapse_epochs"] = t.collapse_epochs;
    } else {
      e["error"] = t.error;
    }
    training.push_back(e);
  }
  j["training"] = training;
  json runs = json::array();
  for (const auto& r : rep.runs) {
    json e = {{"preset", r.preset}, {"method", method_name(r.method)}, {"seed", r.seed}, {"ok", r.ok},
              {"cluster", cluster_name(r.cluster)}};
    if (r.ok) {
      e["pruned_acc"] = r.pruned_accuracy;
      e["acc"] = r.accuracy;
      e["phi_after_prune"] = r.phi_after_prune;
      e["phi_final"] = r.phi_final;
      e["kept_weights"] = r.kept_weights;
    } else {
      e["error"] = r.error;
    }
    runs.push_back(e);
  }
  j["runs"] = runs;
  return j;
}

}  // namespace cnx
