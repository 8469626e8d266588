// cnx: train, prune, fine-tune and analyze layered MLPs on the toy task, run
// multi-seed pruning studies and the invariant suites.
//
// Exit status: 0 success, 1 usage error, 2 run failure.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cnx/connectivity.hpp"
#include "cnx/harness.hpp"
#include "cnx/network.hpp"
#include "cnx/properties.hpp"
#include "cnx/pruning.hpp"
#include "cnx/training.hpp"

namespace fs = std::filesystem;

namespace {

constexpr int kUsageError = 1;
constexpr int kRunFailure = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& p, const std::string& s) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + p.string());
  out << s;
}

cnx::LayeredNetwork load_model(const fs::path& p) { return cnx::deserialize(read_file(p)); }

struct RegOpts {
  double l1 = 0.0, l2 = 0.0, l3 = 5e-4;
  cnx::RegularizerConfig config() const { return {l1, l2, l3}; }
};

void add_reg_flags(CLI::App* app, RegOpts& r) {
  app->add_option("--lambda1", r.l1, "L1 coefficient")->check(CLI::NonNegativeNumber)->capture_default_str();
  app->add_option("--lambda2", r.l2, "connectivity (-log phi) coefficient")->check(CLI::NonNegativeNumber)->capture_default_str();
  app->add_option("--lambda3", r.l3, "weight-decay coefficient")->check(CLI::NonNegativeNumber)->capture_default_str();
}

struct DataOpts {
  std::uint64_t seed = 0;
  std::size_t n_train = cnx::kToyTrainSize;
  std::size_t n_test = cnx::kToyTestSize;
};

void add_data_flags(CLI::App* app, DataOpts& d) {
  app->add_option("--data-seed", d.seed, "toy data seed")->capture_default_str();
  app->add_option("--n-train", d.n_train, "training samples")->check(CLI::PositiveNumber)->capture_default_str();
  app->add_option("--n-test", d.n_test, "test samples")->capture_default_str();
}

cnx::ConnectivityMode parse_mode(const std::string& s) {
  return s == "signal-flow" ? cnx::ConnectivityMode::SignalFlow : cnx::ConnectivityMode::Normalized;
}

void print_epochs(const cnx::RunMetrics& m) {
  for (const auto& e : m.epochs)
    if (e.epoch % 10 == 0 || e.epoch + 1 == m.epochs.size())
      std::printf("epoch %4zu  lr %.5f  loss %.4f  test acc %.4f  phi %.4g%s\n", e.epoch, e.lr, e.train_loss, e.test_acc,
                  e.phi_total, e.collapse ? "  COLLAPSE" : "");
}

void print_analysis(const cnx::LayeredNetwork& net, cnx::ConnectivityMode mode) {
  const cnx::CollapseReport rep = cnx::detect_collapse(net);
  std::printf("layers     ");
  for (std::size_t i = 0; i < net.sizes.size(); ++i) std::printf("%s%zu", i ? "-" : "", net.sizes[i]);
  std::printf("\nphi_total  %.10g (normalized)\n", rep.phi_total);
  if (mode == cnx::ConnectivityMode::SignalFlow)
    std::printf("phi_total  %.10g (signal-flow)\n", cnx::phi_total(net, cnx::ConnectivityMode::SignalFlow));
  for (const auto& l : rep.layers)
    std::printf("%s %zu  mass %.6g  nonzero %zu%s\n", l.kind == cnx::EdgeSetKind::Dense ? "weights" : "scaling", l.index,
                l.l1_mass, l.surviving_edges, l.zero_mass ? "  ZERO MASS" : "");
  if (net.mask) std::printf("mask       %zu kept entries\n", net.mask->kept());
  std::printf("collapse   %s\n", rep.collapsed ? "yes" : "no");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Connectivity-regularized training and pruning of layered MLPs"};
  app.require_subcommand(1);

  // train
  auto* train = app.add_subcommand("train", "train a network on the toy task");
  std::uint64_t seed = 0;
  std::size_t epochs = 200, batch = 256;
  double lr = 0.01;
  std::vector<std::size_t> sizes{6, 5, 5, 5, 1};
  std::vector<std::size_t> scaled;
  RegOpts train_reg;
  DataOpts train_data;
  std::string train_out = "model.bin", train_metrics;
  train->add_option("--seed", seed, "initialization and shuffle seed")->capture_default_str();
  train->add_option("--epochs", epochs)->check(CLI::PositiveNumber)->capture_default_str();
  train->add_option("--batch", batch)->check(CLI::PositiveNumber)->capture_default_str();
  train->add_option("--lr", lr, "initial learning rate")->check(CLI::PositiveNumber)->capture_default_str();
  train->add_option("--sizes", sizes, "layer widths")->delimiter(',')->capture_default_str();
  train->add_option("--scaled-layers", scaled, "hidden layers that get a scaling layer (0-based)")->delimiter(',');
  add_reg_flags(train, train_reg);
  add_data_flags(train, train_data);
  train->add_option("--out", train_out, "model file")->capture_default_str();
  train->add_option("--metrics", train_metrics, "per-epoch metrics (JSON lines)");

  // prune
  auto* prune = app.add_subcommand("prune", "prune a trained model");
  std::string prune_in, prune_out = "pruned.bin", prune_method = "magnitude", prune_scope = "local",
                        prune_mode = "signal-flow", emit_scores, granularity = "weight";
  double fraction = 0.96, loss_lambda = 0.1;
  DataOpts prune_data;
  prune->add_option("model", prune_in, "model file")->required()->check(CLI::ExistingFile);
  prune->add_option("--prune-method", prune_method)
      ->check(CLI::IsMember({"magnitude", "synflow", "channel", "loss-aware"}))
      ->capture_default_str();
  prune->add_option("--prune-fraction", fraction)->check(CLI::Range(0.0, 0.999999))->capture_default_str();
  prune->add_option("--scope", prune_scope)->check(CLI::IsMember({"local", "global"}))->capture_default_str();
  prune->add_option("--mode", prune_mode, "connectivity mode of the loss-aware score")
      ->check(CLI::IsMember({"normalized", "signal-flow"}))
      ->capture_default_str();
  prune->add_option("--granularity", granularity, "loss-aware score granularity")
      ->check(CLI::IsMember({"weight", "node"}))
      ->capture_default_str();
  prune->add_option("--lambda2", loss_lambda, "connectivity weight of the loss-aware score")->capture_default_str();
  add_data_flags(prune, prune_data);
  prune->add_option("--out", prune_out, "pruned model file")->capture_default_str();
  prune->add_option("--emit-scores", emit_scores, "write the importance table (JSON)");

  // finetune
  auto* finetune = app.add_subcommand("finetune", "retrain a pruned model with its mask held fixed");
  std::string ft_in, ft_out = "finetuned.bin", ft_metrics;
  std::size_t ft_epochs = 50;
  double ft_lr = 0.001;
  std::uint64_t ft_seed = 0;
  bool keep_sparsity = false;
  RegOpts ft_reg;
  DataOpts ft_data;
  finetune->add_option("model", ft_in, "pruned model file")->required()->check(CLI::ExistingFile);
  finetune->add_option("--epochs", ft_epochs)->check(CLI::PositiveNumber)->capture_default_str();
  finetune->add_option("--lr", ft_lr)->check(CLI::PositiveNumber)->capture_default_str();
  finetune->add_option("--seed", ft_seed, "shuffle seed")->capture_default_str();
  finetune->add_flag("--keep-sparsity-regularizers", keep_sparsity, "keep lambda1 and lambda2 active");
  add_reg_flags(finetune, ft_reg);
  add_data_flags(finetune, ft_data);
  finetune->add_option("--out", ft_out)->capture_default_str();
  finetune->add_option("--metrics", ft_metrics, "per-epoch metrics (JSON lines)");

  // analyze
  auto* analyze = app.add_subcommand("analyze", "connectivity, layer mass and collapse status of a model");
  std::string an_in, an_mode = "normalized";
  analyze->add_option("model", an_in)->required()->check(CLI::ExistingFile);
  analyze->add_option("--mode", an_mode)->check(CLI::IsMember({"normalized", "signal-flow"}))->capture_default_str();

  // experiment
  auto* experiment = app.add_subcommand("experiment", "multi-seed train / prune / fine-tune study");
  std::string plan_path, exp_out = "results";
  std::optional<std::size_t> exp_seeds;
  bool no_scores = false;
  experiment->add_option("--plan", plan_path, "plan file (JSON); defaults built in when omitted")->check(CLI::ExistingFile);
  experiment->add_option("--seeds", exp_seeds, "use seeds 0..N-1")->check(CLI::PositiveNumber);
  experiment->add_option("--out", exp_out, "output directory")->capture_default_str();
  experiment->add_flag("--no-scores", no_scores, "skip per-run score tables");

  // verify
  auto* verify = app.add_subcommand("verify", "run an invariant suite");
  std::string suite, verify_out;
  std::vector<std::string> choices = cnx::props::suite_names();
  choices.push_back("all");
  verify->add_option("suite", suite)->required()->check(CLI::IsMember(choices));
  verify->add_option("--out", verify_out, "report file (default verify-<suite>.json)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsageError;
  }

  try {
    if (*train) {
      cnx::TrainConfig cfg;
      cfg.seed = seed;
      cfg.epochs = epochs;
      cfg.batch_size = batch;
      cfg.learning_rate = lr;
      const auto data = cnx::generate_toy(train_data.n_train, train_data.n_test, train_data.seed);
      cnx::LayeredNetwork net;
      try {
        net = cnx::init_random(sizes, seed, cnx::Activation::Sigmoid, scaled);
      } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
      }
      auto res = cnx::train(std::move(net), data, train_reg.config(), cfg);
      print_epochs(res.metrics);
      write_file(train_out, cnx::serialize(res.net));
      if (!train_metrics.empty()) write_file(train_metrics, cnx::metrics_jsonl(res.metrics, "train"));
      std::printf("wrote %s\n", train_out.c_str());
    } else if (*prune) {
      const auto net = load_model(prune_in);
      const auto method = *cnx::parse_method(prune_method);
      cnx::ImportanceTable table;
      if (method == cnx::ScoreMethod::LossAware) {
        const auto data = cnx::generate_toy(prune_data.n_train, prune_data.n_test, prune_data.seed);
        cnx::LossAwareOptions o;
        o.mode = parse_mode(prune_mode);
        o.granularity = granularity == "node" ? cnx::Granularity::NodeGroup : cnx::Granularity::Weight;
        table = cnx::score_loss_aware(net, data.x_train, data.y_train, loss_lambda, o);
      } else if (method == cnx::ScoreMethod::Magnitude) {
        table = cnx::score_magnitude(net);
      } else if (method == cnx::ScoreMethod::SynFlow) {
        table = cnx::score_synflow(net);
      } else {
        table = cnx::score_channels(net);
      }
      if (table.collapse_warning) std::fprintf(stderr, "warning: network is collapsed (phi_total = 0)\n");
      const auto scope = *cnx::parse_scope(prune_scope);
      const auto pruned = cnx::apply_mask(net, cnx::build_mask(net, table, {scope, fraction}));
      if (!emit_scores.empty()) write_file(emit_scores, cnx::table_to_json(table).dump(1) + "\n");
      write_file(prune_out, cnx::serialize(pruned));
      print_analysis(pruned, cnx::ConnectivityMode::Normalized);
      std::printf("wrote %s\n", prune_out.c_str());
    } else if (*finetune) {
      auto net = load_model(ft_in);
      cnx::TrainConfig cfg;
      cfg.epochs = ft_epochs;
      cfg.learning_rate = ft_lr;
      cfg.seed = ft_seed;
      const auto data = cnx::generate_toy(ft_data.n_train, ft_data.n_test, ft_data.seed);
      auto res = cnx::fine_tune(std::move(net), data, ft_reg.config(), cfg, {keep_sparsity});
      print_epochs(res.metrics);
      write_file(ft_out, cnx::serialize(res.net));
      if (!ft_metrics.empty()) write_file(ft_metrics, cnx::metrics_jsonl(res.metrics, "finetune"));
      std::printf("wrote %s\n", ft_out.c_str());
    } else if (*analyze) {
      print_analysis(load_model(an_in), parse_mode(an_mode));
    } else if (*experiment) {
      cnx::ExperimentPlan plan;
      try {
        if (!plan_path.empty()) plan = cnx::load_plan(plan_path);
        if (exp_seeds) plan.seeds = cnx::ExperimentPlan::seed_range(*exp_seeds);
        plan.check();
      } catch (const std::invalid_argument& e) {
        throw UsageError(e.what());
      } catch (const cnx::ParseError& e) {
        throw UsageError(e.what());
      }
      cnx::ExperimentOptions opts;
      opts.out_dir = fs::path(exp_out);
      opts.write_scores = !no_scores;
      opts.progress = [](const std::string& line) {
        std::printf("%s\n", line.c_str());
        std::fflush(stdout);
      };
      const auto rep = cnx::run_experiment(plan, opts);
      write_file(fs::path(exp_out) / "cluster_report.json", cnx::report_to_json(rep).dump(1) + "\n");
      std::printf("\n%-10s %-10s %9s %5s %8s %5s %7s\n", "preset", "method", "COLLAPSE", "LOW", "PARTIAL", "FULL",
                  "FAILED");
      for (const auto& g : rep.groups)
        std::printf("%-10s %-10s %9zu %5zu %8zu %5zu %7zu\n", g.preset.c_str(), cnx::method_name(g.method),
                    g.count(cnx::Cluster::Collapse), g.count(cnx::Cluster::Low), g.count(cnx::Cluster::Partial),
                    g.count(cnx::Cluster::Full), g.count(cnx::Cluster::Failed));
      std::printf("wrote %s\n", (fs::path(exp_out) / "cluster_report.json").string().c_str());
    } else if (*verify) {
      const std::vector<std::string> suites = suite == "all" ? cnx::props::suite_names() : std::vector<std::string>{suite};
      cnx::json out = cnx::json::array();
      bool all_ok = true;
      for (const auto& name : suites) {
        const auto rep = cnx::props::run_property_suite(name);
        all_ok = all_ok && rep.passed();
        std::printf("%-20s %s  %zu/%zu cases (need %zu), max measured %.3g\n", name.c_str(), rep.passed() ? "PASS" : "FAIL",
                    rep.passes(), rep.cases.size(), rep.required_passes, rep.max_measured());
        cnx::json cases = cnx::json::array();
        for (const auto& c : rep.cases) {
          cases.push_back({{"id", c.id}, {"passed", c.passed}, {"measured", c.measured}, {"tolerance", c.tolerance},
                           {"detail", c.detail}});
          if (!c.passed) std::printf("  failed: %s  %s\n", c.id.c_str(), c.detail.c_str());
        }
        out.push_back({{"suite", name},
                       {"passed", rep.passed()},
                       {"passes", rep.passes()},
                       {"required", rep.required_passes},
                       {"cases", cases}});
      }
      const std::string path = verify_out.empty() ? "verify-" + suite + ".json" : verify_out;
      write_file(path, out.dump(1) + "\n");
      std::printf("wrote %s\n", path.c_str());
      return all_ok ? 0 : kRunFailure;
    }
  } catch (const UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return kUsageError;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kRunFailure;
  }
  return 0;
}
