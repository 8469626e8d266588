#pragma once

// Invariant batteries behind `cnx verify`. Each suite returns one entry per
// case with the measured deviation and the tolerance it was held to; failures
// are report entries, never exceptions.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <memory>
#include <numbers>
#include <string>
#include <vector>

#include "cnx/autodiff.hpp"
#include "cnx/connectivity.hpp"
#include "cnx/network.hpp"
#include "cnx/objective.hpp"
#include "cnx/pruning.hpp"
#include "cnx/rng.hpp"
#include "cnx/training.hpp"

namespace cnx::props {

struct CaseResult {
  std::string id;
  bool passed = false;
  double measured = 0.0;   // max deviation, or the quantity compared against the bound
  double tolerance = 0.0;
  std::string detail;
};

struct SuiteReport {
  std::string suite;
  std::vector<CaseResult> cases;
  std::size_t required_passes = 0;  // suite passes when at least this many cases pass

  std::size_t passes() const {
    return static_cast<std::size_t>(std::count_if(cases.begin(), cases.end(), [](const CaseResult& c) { return c.passed; }));
  }
  bool passed() const { return !cases.empty() && passes() >= required_passes; }
  double max_measured() const {
    double m = 0.0;
    for (const auto& c : cases) m = std::max(m, c.measured);
    return m;
  }
};

inline const std::vector<std::string>& suite_names() {
  static const std::vector<std::string> names = {"oracle", "gradients", "conservation", "theorem-convergence",
                                                 "theorem-bound"};
  return names;
}

// ---------------------------------------------------------------------------
// Random networks
// ---------------------------------------------------------------------------

struct RandomNetOptions {
  std::size_t min_depth = 2;  // node layers
  std::size_t max_depth = 5;
  std::size_t min_width = 1;
  std::size_t max_width = 6;
  double zero_probability = 0.1;    // chance that a weight is exactly 0
  double scaling_probability = 0.0; // chance that a hidden layer gets a scaling layer
  bool force_scaling = false;       // at least one scaling layer (needs a hidden layer)
};

/// Weights of magnitude in [0.05, 2] with random sign; deltas in [0.2, 2] with random sign.
inline LayeredNetwork random_network(Rng& rng, const RandomNetOptions& o = {}) {
  LayeredNetwork net;
  std::size_t depth = o.min_depth + rng.below(o.max_depth - o.min_depth + 1);
  if (o.force_scaling) depth = std::max<std::size_t>(depth, 3);
  for (std::size_t k = 0; k < depth; ++k) net.sizes.push_back(o.min_width + rng.below(o.max_width - o.min_width + 1));
  auto signed_mag = [&](double lo, double hi) { return (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(lo, hi); };
  for (std::size_t k = 0; k + 1 < depth; ++k) {
    Matrix w(net.sizes[k + 1], net.sizes[k]);
    for (double& v : w.values()) v = rng.uniform() < o.zero_probability ? 0.0 : signed_mag(0.05, 2.0);
    net.weights.push_back(std::move(w));
    Matrix b(net.sizes[k + 1], 1);
    for (double& v : b.values()) v = rng.uniform(-0.5, 0.5);
    net.biases.push_back(std::move(b));
    net.activations.push_back(k + 2 == depth ? Activation::Sigmoid : Activation::Relu);
  }
  for (std::size_t k = 0; k + 2 < depth; ++k) {
    const bool forced = o.force_scaling && k + 3 == depth && net.scaling.empty();
    if (forced || rng.uniform() < o.scaling_probability) {
      Matrix d(net.sizes[k + 1], 1);
      for (double& v : d.values()) v = signed_mag(0.2, 2.0);
      net.scaling.push_back({k, std::move(d)});
    }
  }
  validate(net);
  return net;
}

/// init_random with random biases and every weight pushed to |w| >= min_magnitude.
inline LayeredNetwork random_dense(std::span<const std::size_t> sizes, std::uint64_t seed, double min_magnitude = 1e-3) {
  LayeredNetwork net = init_random(sizes, seed);
  Rng rng(mix_seed(seed, 0xb1a5));
  for (auto& w : net.weights)
    for (double& v : w.values())
      if (std::abs(v) < min_magnitude) v = v < 0 ? -min_magnitude : min_magnitude;
  for (auto& b : net.biases)
    for (double& v : b.values()) v = rng.uniform(-0.3, 0.3);
  return net;
}

// ---------------------------------------------------------------------------
// Helpers
// ---------------------------------------------------------------------------

namespace detail {

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

inline std::string sizes_str(const LayeredNetwork& net) {
  std::string s;
  for (std::size_t i = 0; i < net.sizes.size(); ++i) s += (i ? "-" : "") + std::to_string(net.sizes[i]);
  if (!net.scaling.empty()) s += " +" + std::to_string(net.scaling.size()) + " scaling";
  return s;
}

/// Max over entries of min(relative error, absolute error) between analytic and
/// central-difference gradients, scaled so that a value <= 1 means "within tolerance".
struct GradientCheck {
  double worst_ratio = 0.0;
  double worst_rel = 0.0;
  std::string where;
};

inline void check_entry(GradientCheck& gc, double analytic, double numeric, double rel_tol, double abs_tol,
                        const std::string& where) {
  const double abs_err = std::abs(analytic - numeric);
  const double scale = std::max(std::abs(analytic), std::abs(numeric));
  const double rel = scale > 0.0 ? abs_err / scale : 0.0;
  const double ratio = std::min(rel / rel_tol, abs_err / abs_tol);
  if (ratio > gc.worst_ratio) {
    gc.worst_ratio = ratio;
    gc.worst_rel = rel;
    gc.where = where;
  }
}

/// phi_total as a function of theta leaves, so d phi / d theta comes straight off the tape.
inline std::vector<Matrix> phi_theta_gradients(const NormalizedView& view) {
  ad::Tape tape;
  std::vector<ad::Var> leaves;
  for (const auto& e : view.edge_sets) leaves.push_back(tape.parameter(e.theta));
  ad::Var h = tape.input(Matrix(view.edge_sets.front().in_width(), 1, 1.0));
  for (std::size_t i = 0; i < view.edge_sets.size(); ++i)
    h = view.edge_sets[i].kind == EdgeSetKind::Dense ? tape.matmul(leaves[i], h) : tape.mul(leaves[i], h);
  tape.forward(tape.sum(h));
  auto g = tape.backward();
  std::vector<Matrix> out;
  for (auto v : leaves) out.push_back(g[v]);
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Suites
// ---------------------------------------------------------------------------

struct OracleOptions {
  std::size_t cases = 100;
  std::uint64_t seed = 1;
  double tolerance = 1e-10;
};

/// Forward-pass phi_total against explicit path enumeration, both modes.
inline SuiteReport oracle_suite(const OracleOptions& o = {}) {
  SuiteReport rep{"oracle", {}, o.cases};
  Rng rng(o.seed);
  RandomNetOptions ro;
  ro.scaling_probability = 0.3;
  for (std::size_t i = 0; i < o.cases; ++i) {
    const LayeredNetwork net = random_network(rng, ro);
    double dev = 0.0;
    std::string d;
    for (auto mode : {ConnectivityMode::Normalized, ConnectivityMode::SignalFlow}) {
      const double fast = phi_total(net, mode);
      const double slow = phi_total_oracle(net, mode);
      dev = std::max(dev, std::abs(fast - slow));
      d += std::string(mode_name(mode)) + " " + detail::fmt(fast) + " ";
    }
    rep.cases.push_back({"net " + std::to_string(i) + " (" + detail::sizes_str(net) + ")", dev < o.tolerance, dev,
                         o.tolerance, d});
  }
  return rep;
}

struct GradientSuiteOptions {
  std::size_t nets = 20;
  std::uint64_t seed = 100;
  std::size_t batch = 16;
  double step = 1e-5;
  double rel_tolerance = 1e-4;
  double abs_tolerance = 1e-8;
  RegularizerConfig combined{0.0, 0.1, 5e-4};
};

/// Autodiff against central differences for BCE, -log phi and the combined
/// objective on 6-5-5-5-1 networks. One case per (net, objective).
inline SuiteReport gradient_suite(const GradientSuiteOptions& o = {}) {
  SuiteReport rep{"gradients", {}, 3 * o.nets};
  const std::vector<std::size_t> sizes{6, 5, 5, 5, 1};
  const ToyDataset data = generate_toy(o.batch, 1, o.seed);
  std::vector<std::size_t> rows(o.batch);
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  const Matrix x_t = batch_columns(data.x_train, rows);
  const Matrix y = batch_targets(data.y_train, rows);

  struct Objective {
    const char* name;
    RegularizerConfig reg;
    bool connectivity_only;
  };
  const Objective objectives[] = {{"bce", {}, false}, {"neg-log-phi", {}, true}, {"combined", o.combined, false}};

  for (std::size_t n = 0; n < o.nets; ++n) {
    LayeredNetwork net = random_dense(sizes, o.seed + n);
    for (const auto& obj : objectives) {
      std::function<double(const LayeredNetwork&)> value;
      std::vector<Matrix> wg, bg;
      if (obj.connectivity_only) {
        const RegularizerResult r = connect_regularizer(net);
        wg = r.weight_grads;
        for (const auto& b : net.biases) bg.emplace_back(b.rows(), 1, 0.0);
        value = [](const LayeredNetwork& m) { return connect_regularizer(m).value; };
      } else {
        auto graph = std::make_shared<ObjectiveGraph>(net, obj.reg);
        graph->evaluate(net, x_t, y);
        auto g = graph->gradients();
        for (std::size_t k = 0; k < net.weight_layers(); ++k) {
          wg.push_back(g[graph->vars().weights[k]]);
          bg.push_back(g[graph->vars().biases[k]]);
        }
        value = [graph, &x_t, &y](const LayeredNetwork& m) { return graph->evaluate(m, x_t, y).total; };
      }
      detail::GradientCheck gc;
      LayeredNetwork probe = net;
      for (std::size_t k = 0; k < net.weight_layers(); ++k) {
        for (int which = 0; which < 2; ++which) {
          Matrix& p = which == 0 ? probe.weights[k] : probe.biases[k];
          const Matrix& analytic = which == 0 ? wg[k] : bg[k];
          for (std::size_t i = 0; i < p.size(); ++i) {
            const double orig = p[i];
            p[i] = orig + o.step;
            const double up = value(probe);
            p[i] = orig - o.step;
            const double down = value(probe);
            p[i] = orig;
            detail::check_entry(gc, analytic[i], (up - down) / (2.0 * o.step), o.rel_tolerance, o.abs_tolerance,
                                std::string(which == 0 ? "W" : "b") + std::to_string(k) + "[" + std::to_string(i) + "]");
          }
        }
      }
      rep.cases.push_back({"net " + std::to_string(n) + " " + obj.name, gc.worst_ratio <= 1.0, gc.worst_rel,
                           o.rel_tolerance, "worst entry " + gc.where});
    }
  }
  return rep;
}

struct ConservationOptions {
  std::size_t nets = 50;
  std::uint64_t seed = 200;
  double tolerance = 1e-8;
};

/// Per net: layer sums of a_in * theta * a_out equal phi_total; SynFlow scores
/// equal (d phi / d theta) * theta from the tape; channel scores sum to phi_total.
inline SuiteReport conservation_suite(const ConservationOptions& o = {}) {
  SuiteReport rep{"conservation", {}, o.nets};
  Rng rng(o.seed);
  RandomNetOptions ro;
  ro.force_scaling = true;
  ro.scaling_probability = 0.5;
  ro.min_width = 2;
  for (std::size_t n = 0; n < o.nets; ++n) {
    const LayeredNetwork net = random_network(rng, ro);
    const NormalizedView view = normalize(net);
    const ConnectivityProfile prof = node_connectivity(view);
    const double phi = prof.phi_total;
    double layer_dev = 0.0;
    for (std::size_t e = 0; e < view.edge_sets.size(); ++e) {
      const EdgeSet& es = view.edge_sets[e];
      double s = 0.0;
      for (std::size_t j = 0; j < es.out_width(); ++j) {
        if (es.kind == EdgeSetKind::Dense) {
          for (std::size_t i = 0; i < es.in_width(); ++i) s += prof.a_in[e][i] * es.theta(j, i) * prof.a_out[e + 1][j];
        } else {
          s += prof.a_in[e][j] * es.theta[j] * prof.a_out[e + 1][j];
        }
      }
      layer_dev = std::max(layer_dev, std::abs(s - phi));
    }

    const ImportanceTable syn = score_synflow(net);
    const std::vector<Matrix> dphi = detail::phi_theta_gradients(view);
    double identity_dev = 0.0;
    for (const auto& entry : syn.entries) {
      const std::size_t e = cnx::detail::edge_set_position(view, EdgeSetKind::Dense, entry.key.layer);
      const double tape_score = dphi[e](entry.key.row, entry.key.col) * view.edge_sets[e].theta(entry.key.row, entry.key.col);
      identity_dev = std::max(identity_dev, std::abs(tape_score - entry.score));
    }
    for (std::size_t k = 0; k < net.weight_layers(); ++k)
      identity_dev = std::max(identity_dev, std::abs(syn.layer_sum(k) - phi));

    const ImportanceTable ch = score_channels(net);
    double channel_dev = 0.0;
    for (std::size_t s = 0; s < net.scaling.size(); ++s) channel_dev = std::max(channel_dev, std::abs(ch.layer_sum(s) - phi));

    const double dev = std::max({layer_dev, identity_dev, channel_dev});
    rep.cases.push_back({"net " + std::to_string(n) + " (" + detail::sizes_str(net) + ")", dev < o.tolerance, dev,
                         o.tolerance,
                         "layer " + detail::fmt(layer_dev) + ", synflow " + detail::fmt(identity_dev) + ", channel " +
                             detail::fmt(channel_dev)});
  }
  return rep;
}

struct ConvergenceOptions {
  std::vector<std::size_t> sizes{4, 6, 6, 6, 3};
  std::size_t inits = 50;
  std::uint64_t seed = 300;
  std::size_t max_steps = 5000;
  double step = 1.0;            // initial step; decays to 0 along a half cosine over max_steps
  double target = 0.999;
  double mass_share = 1e-3;     // a weight "holds" mass when theta >= this
  double required_fraction = 0.96;
};

struct ConvergenceRun {
  double phi = 0.0;
  std::size_t steps = 0;
  std::vector<std::size_t> middle_counts;  // weights with theta >= mass_share, per middle weight layer
};

/// Plain gradient descent on -log phi_total from one network.
///
/// The |.| subgradient makes a losing weight hop across 0 with amplitude
/// proportional to the step, so the step decays to 0 along a half cosine.
inline ConvergenceRun descend_connectivity(LayeredNetwork net, const ConvergenceOptions& o) {
  ConvergenceRun run;
  std::size_t t = 0;
  for (; t < o.max_steps; ++t) {
    const RegularizerResult r = connect_regularizer(net);
    if (r.phi_total >= o.target) break;
    const double eta =
        o.step * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(t) / static_cast<double>(o.max_steps)));
    for (std::size_t k = 0; k < net.weight_layers(); ++k)
      for (std::size_t i = 0; i < net.weights[k].size(); ++i) net.weights[k][i] -= eta * r.weight_grads[k][i];
  }
  run.steps = t;
  const NormalizedView view = normalize(net);
  run.phi = phi_total(view);
  for (std::size_t k = 1; k + 1 < net.weight_layers(); ++k) {
    const Matrix& th = view.weight_theta(k);
    run.middle_counts.push_back(static_cast<std::size_t>(
        std::count_if(th.values().begin(), th.values().end(), [&](double v) { return v >= o.mass_share; })));
  }
  return run;
}

/// Gradient descent on -log phi_total reaches a maximally connected network.
inline SuiteReport convergence_suite(const ConvergenceOptions& o = {}) {
  SuiteReport rep{"theorem-convergence", {}, 0};
  rep.required_passes = static_cast<std::size_t>(std::ceil(o.required_fraction * static_cast<double>(o.inits) - 1e-9));
  const std::size_t K = o.sizes.size();
  const std::size_t limit = K >= 3 ? K - 3 : 0;
  for (std::size_t i = 0; i < o.inits; ++i) {
    LayeredNetwork net = init_random(o.sizes, o.seed + i);
    if (phi_total(net) == 0.0) {
      rep.cases.push_back({"init " + std::to_string(i), false, 0.0, o.target, "initial network not connected"});
      continue;
    }
    const ConvergenceRun run = descend_connectivity(std::move(net), o);
    const std::size_t most = run.middle_counts.empty() ? 0 : *std::max_element(run.middle_counts.begin(), run.middle_counts.end());
    std::string d = "phi " + std::to_string(run.phi) + " after " + std::to_string(run.steps) + " steps; middle counts";
    for (auto c : run.middle_counts) d += " " + std::to_string(c);
    rep.cases.push_back({"init " + std::to_string(i), run.phi >= o.target && most <= limit, run.phi, o.target, d});
  }
  return rep;
}

struct BoundOptions {
  std::uint64_t seed = 400;
  std::size_t hidden_min = 2;
  std::size_t hidden_max = 5;
};

struct Maximizer {
  LayeredNetwork net;
  std::size_t support = 0;
  std::size_t bound = 0;
};

/// Maximizer bound |V_1| + |V_K| + K - 3 for node-layer sizes `sizes`.
inline std::size_t support_bound(std::span<const std::size_t> sizes) {
  return sizes.front() + sizes.back() + sizes.size() - 3;
}

/// A phi_total = 1 network: every input feeds one hidden node, a single chain
/// of hidden nodes follows, and the last hidden node feeds every output.
inline Maximizer construct_maximizer(std::span<const std::size_t> sizes, Rng& rng) {
  Maximizer m;
  m.net = init_random(sizes, rng.next_u64());
  const std::size_t K = sizes.size();
  std::vector<std::size_t> chain(K);
  for (std::size_t k = 1; k + 1 < K; ++k) chain[k] = rng.below(sizes[k]);
  for (auto& w : m.net.weights) w.fill(0.0);
  for (std::size_t k = 0; k + 1 < K; ++k) {
    Matrix& w = m.net.weights[k];
    if (k == 0 && K == 2) {
      for (double& v : w.values()) v = rng.uniform(0.1, 2.0);
      continue;
    }
    if (k == 0) {
      for (std::size_t i = 0; i < sizes[0]; ++i) w(chain[1], i) = rng.uniform(0.1, 2.0);
    } else if (k + 2 == K) {
      for (std::size_t j = 0; j < sizes[K - 1]; ++j) w(j, chain[k]) = rng.uniform(0.1, 2.0);
    } else {
      w(chain[k + 1], chain[k]) = rng.uniform(0.1, 2.0);
    }
  }
  for (const auto& w : m.net.weights) m.support += w.count_nonzero();
  m.bound = support_bound(sizes);
  return m;
}

/// Constructed maximizers reach phi_total = 1 with support within the bound,
/// and adding any one more edge lowers phi_total.
inline SuiteReport bound_suite(const BoundOptions& o = {}) {
  SuiteReport rep{"theorem-bound", {}, 0};
  Rng rng(o.seed);
  for (std::size_t K = 3; K <= 5; ++K) {
    for (std::size_t v1 = 2; v1 <= 6; ++v1) {
      for (std::size_t vk = 1; vk <= 3; ++vk) {
        std::vector<std::size_t> sizes{v1};
        for (std::size_t k = 1; k + 1 < K; ++k) sizes.push_back(o.hidden_min + rng.below(o.hidden_max - o.hidden_min + 1));
        sizes.push_back(vk);
        const Maximizer m = construct_maximizer(sizes, rng);
        const double phi = phi_total(m.net);
        bool extra_edge_lowers = true;
        for (std::size_t k = 0; k < m.net.weight_layers() && extra_edge_lowers; ++k) {
          for (std::size_t i = 0; i < m.net.weights[k].size(); ++i) {
            if (m.net.weights[k][i] != 0.0) continue;
            LayeredNetwork extra = m.net;
            extra.weights[k][i] = 0.05;
            if (phi_total(extra) >= 1.0 - 1e-12) {
              extra_edge_lowers = false;
              break;
            }
          }
        }
        std::string name = "K=" + std::to_string(K) + " ";
        for (std::size_t i = 0; i < sizes.size(); ++i) name += (i ? "-" : "") + std::to_string(sizes[i]);
        const bool ok = std::abs(phi - 1.0) < 1e-12 && m.support <= m.bound && extra_edge_lowers;
        rep.cases.push_back({name, ok, static_cast<double>(m.support), static_cast<double>(m.bound),
                             "phi " + detail::fmt(phi) + ", support " + std::to_string(m.support) + " <= bound " +
                                 std::to_string(m.bound) + (extra_edge_lowers ? "" : "; an extra edge kept phi = 1")});
      }
    }
  }
  rep.required_passes = rep.cases.size();
  return rep;
}

/// Runs a suite by name with default options. Unknown names yield an empty, failing report.
inline SuiteReport run_property_suite(const std::string& name) {
  if (name == "oracle") return oracle_suite();
  if (name == "gradients") return gradient_suite();
  if (name == "conservation") return conservation_suite();
  if (name == "theorem-convergence") return convergence_suite();
  if (name == "theorem-bound") return bound_suite();
  return SuiteReport{name, {}, 1};
}

}  // namespace cnx::props
