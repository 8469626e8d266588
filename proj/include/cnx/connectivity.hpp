#pragma once

// Path-based connectivity of a layered network.
//
// The network is viewed as a chain of edge sets. Every weight layer is a dense
// edge set; every scaling layer adds a diagonal edge set between the scaled
// node layer and its post-scaling copy. Connectivity ignores activations and
// biases, and uses |W| (optionally L1-normalized per edge set) as edge weights.

#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "cnx/autodiff.hpp"
#include "cnx/errors.hpp"
#include "cnx/matrix.hpp"
#include "cnx/network.hpp"

namespace cnx {

enum class ConnectivityMode {
  Normalized,  // theta = |W| / sum_{E_k} |W|
  SignalFlow,  // theta = |W|
};

inline const char* mode_name(ConnectivityMode m) {
  return m == ConnectivityMode::Normalized ? "normalized" : "signal-flow";
}

inline constexpr double kLogGuard = 1e-12;

enum class EdgeSetKind { Dense, Diagonal };

/// Edge weights of one edge set. Dense: out x in. Diagonal: n x 1.
struct EdgeSet {
  EdgeSetKind kind = EdgeSetKind::Dense;
  std::size_t index = 0;  // weight layer index (Dense) or scaling-layer position (Diagonal)
  Matrix theta;
  double mass = 0.0;      // L1 mass of the raw parameters
  bool zero_mass = false;

  std::size_t out_width() const { return theta.rows(); }
  std::size_t in_width() const { return kind == EdgeSetKind::Dense ? theta.cols() : theta.rows(); }
};

struct NormalizedView {
  ConnectivityMode mode = ConnectivityMode::Normalized;
  std::vector<EdgeSet> edge_sets;  // network order
  bool collapse_flag = false;      // some edge set has zero mass

  /// theta of weight layer k.
  const Matrix& weight_theta(std::size_t k) const {
    for (const auto& e : edge_sets)
      if (e.kind == EdgeSetKind::Dense && e.index == k) return e.theta;
    throw DimensionError("no weight layer " + std::to_string(k));
  }
};

/// Connectivity per node stage. Stage 0 is the input layer; each edge set adds one stage.
struct ConnectivityProfile {
  double phi_total = 0.0;
  std::vector<Matrix> a_in;   // per stage, n x 1: connectivity from the input layer to the node
  std::vector<Matrix> a_out;  // per stage, n x 1: connectivity from the node to the output layer
};

namespace detail {

inline EdgeSet make_edge_set(EdgeSetKind kind, std::size_t index, const Matrix& raw, ConnectivityMode mode) {
  EdgeSet e;
  e.kind = kind;
  e.index = index;
  e.theta = cnx::abs(raw);
  e.mass = e.theta.sum();
  e.zero_mass = e.mass == 0.0;
  if (mode == ConnectivityMode::Normalized) {
    if (e.zero_mass) e.theta.fill(0.0);
    else
      for (double& v : e.theta.values()) v /= e.mass;
  }
  return e;
}

inline Matrix apply_edge_set(const EdgeSet& e, const Matrix& h) {
  if (e.kind == EdgeSetKind::Dense) return matmul(e.theta, h);
  Matrix out = h;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= e.theta[i];
  return out;
}

inline Matrix apply_edge_set_transposed(const EdgeSet& e, const Matrix& g) {
  if (e.kind == EdgeSetKind::Diagonal) {
    Matrix out = g;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= e.theta[i];
    return out;
  }
  Matrix out(e.theta.cols(), 1);
  for (std::size_t j = 0; j < e.theta.rows(); ++j)
    for (std::size_t i = 0; i < e.theta.cols(); ++i) out[i] += e.theta(j, i) * g[j];
  return out;
}

}  // namespace detail

/// Per-edge-set theta. A zero-mass edge set yields theta = 0 and sets the collapse flag.
inline NormalizedView normalize(const LayeredNetwork& net, ConnectivityMode mode = ConnectivityMode::Normalized) {
  validate(net);
  NormalizedView view;
  view.mode = mode;
  for (std::size_t k = 0; k < net.weight_layers(); ++k) {
    view.edge_sets.push_back(detail::make_edge_set(EdgeSetKind::Dense, k, net.weights[k], mode));
    for (std::size_t s = 0; s < net.scaling.size(); ++s)
      if (net.scaling[s].after_layer == k)
        view.edge_sets.push_back(detail::make_edge_set(EdgeSetKind::Diagonal, s, net.scaling[s].delta, mode));
  }
  for (const auto& e : view.edge_sets) view.collapse_flag = view.collapse_flag || e.zero_mass;
  return view;
}

/// Total connectivity by one forward pass of an all-ones input through theta.
inline double phi_total(const NormalizedView& view) {
  if (view.edge_sets.empty()) return 0.0;
  Matrix h(view.edge_sets.front().in_width(), 1, 1.0);
  for (const auto& e : view.edge_sets) h = detail::apply_edge_set(e, h);
  return h.sum();
}

inline double phi_total(const LayeredNetwork& net, ConnectivityMode mode = ConnectivityMode::Normalized) {
  return phi_total(normalize(net, mode));
}

/// Forward sweep for a_in, backward sweep for a_out.
inline ConnectivityProfile node_connectivity(const NormalizedView& view) {
  ConnectivityProfile p;
  if (view.edge_sets.empty()) return p;
  p.a_in.emplace_back(view.edge_sets.front().in_width(), 1, 1.0);
  for (const auto& e : view.edge_sets) p.a_in.push_back(detail::apply_edge_set(e, p.a_in.back()));
  p.a_out.resize(p.a_in.size());
  p.a_out.back() = Matrix(p.a_in.back().rows(), 1, 1.0);
  for (std::size_t s = view.edge_sets.size(); s-- > 0;)
    p.a_out[s] = detail::apply_edge_set_transposed(view.edge_sets[s], p.a_out[s + 1]);
  p.phi_total = p.a_in.back().sum();
  return p;
}

/// Number of input-to-output paths (saturating at SIZE_MAX).
inline std::size_t path_count(const LayeredNetwork& net) {
  std::size_t n = 1;
  for (std::size_t w : net.sizes) {
    if (n > std::numeric_limits<std::size_t>::max() / w) return std::numeric_limits<std::size_t>::max();
    n *= w;
  }
  return n;
}

inline constexpr std::size_t kOraclePathGuard = 10'000'000;

/// Ground-truth connectivity by explicit enumeration of every input-to-output
/// path, multiplying per-edge weights along each path. Normalization is
/// recomputed here from the raw parameters, independent of normalize().
inline double phi_total_oracle(const LayeredNetwork& net, ConnectivityMode mode = ConnectivityMode::Normalized,
                               std::size_t guard = kOraclePathGuard) {
  validate(net);
  const std::size_t paths = path_count(net);
  if (paths > guard)
    throw PathGuardError("network has " + std::to_string(paths) + " paths, oracle guard is " + std::to_string(guard) +
                         "; use phi_total instead");

  // Steps alternate: dense weight layer, then the optional diagonal scaling factor.
  struct Step {
    const Matrix* raw;
    bool diagonal;
    double divisor;
  };
  std::vector<Step> steps;
  auto add_step = [&](const Matrix& raw, bool diagonal) {
    double mass = 0.0;
    for (double v : raw.values()) mass += std::abs(v);
    steps.push_back({&raw, diagonal, mode == ConnectivityMode::SignalFlow ? 1.0 : mass});
  };
  for (std::size_t k = 0; k < net.weight_layers(); ++k) {
    add_step(net.weights[k], false);
    if (const ScalingLayer* s = net.scaling_after(k)) add_step(s->delta, true);
  }
  auto edge_weight = [](const Step& st, double value) {
    return st.divisor == 0.0 ? 0.0 : std::abs(value) / st.divisor;
  };

  double total = 0.0;
  std::vector<std::size_t> node(steps.size() + 1, 0);
  // Depth-first over node choices; diagonal steps keep the node index.
  auto walk = [&](auto&& self, std::size_t depth, double weight) -> void {
    if (depth == steps.size()) {
      total += weight;
      return;
    }
    const Step& st = steps[depth];
    const std::size_t from = node[depth];
    if (st.diagonal) {
      node[depth + 1] = from;
      self(self, depth + 1, weight * edge_weight(st, (*st.raw)[from]));
      return;
    }
    for (std::size_t to = 0; to < st.raw->rows(); ++to) {
      node[depth + 1] = to;
      self(self, depth + 1, weight * edge_weight(st, (*st.raw)(to, from)));
    }
  };
  for (std::size_t i = 0; i < net.input_width(); ++i) {
    node[0] = i;
    walk(walk, 0, 1.0);
  }
  return total;
}

// ---------------------------------------------------------------------------
// Differentiable connectivity on an autodiff tape.
// ---------------------------------------------------------------------------

/// Tape handles for the parameters of one network.
struct NetworkVars {
  std::vector<ad::Var> weights;
  std::vector<ad::Var> biases;
  std::vector<ad::Var> scaling;  // aligned with LayeredNetwork::scaling
};

inline NetworkVars add_network_parameters(ad::Tape& tape, const LayeredNetwork& net) {
  NetworkVars v;
  for (std::size_t k = 0; k < net.weight_layers(); ++k) {
    v.weights.push_back(tape.parameter(net.weights[k], "W" + std::to_string(k)));
    v.biases.push_back(tape.parameter(net.biases[k], "b" + std::to_string(k)));
  }
  for (std::size_t s = 0; s < net.scaling.size(); ++s)
    v.scaling.push_back(tape.parameter(net.scaling[s].delta, "delta" + std::to_string(s)));
  return v;
}

inline void bind_network_parameters(ad::Tape& tape, const NetworkVars& v, const LayeredNetwork& net) {
  for (std::size_t k = 0; k < net.weight_layers(); ++k) {
    tape.bind(v.weights[k], net.weights[k]);
    tape.bind(v.biases[k], net.biases[k]);
  }
  for (std::size_t s = 0; s < net.scaling.size(); ++s) tape.bind(v.scaling[s], net.scaling[s].delta);
}

struct ConnectivityGraphOptions {
  ConnectivityMode mode = ConnectivityMode::Normalized;
  bool include_biases = false;  // adds |b| after each dense edge set (signal-flow variant)
};

/// Records phi_total of the network held in `vars` onto `tape`. `source` holds
/// one input column per sample (a single all-ones column for the standard
/// definition); the result is averaged over columns. Returns the 1x1 node.
inline ad::Var record_phi_total(ad::Tape& tape, const LayeredNetwork& structure, const NetworkVars& vars,
                                ad::Var source, ConnectivityGraphOptions opts = {}) {
  auto theta = [&](ad::Var raw) {
    ad::Var a = tape.abs(raw);
    if (opts.mode == ConnectivityMode::SignalFlow) return a;
    return tape.div(a, tape.sum(a));
  };
  ad::Var h = source;
  for (std::size_t k = 0; k < structure.weight_layers(); ++k) {
    h = tape.matmul(theta(vars.weights[k]), h);
    if (opts.include_biases) h = tape.add(h, tape.abs(vars.biases[k]));
    for (std::size_t s = 0; s < structure.scaling.size(); ++s)
      if (structure.scaling[s].after_layer == k) h = tape.mul(theta(vars.scaling[s]), h);
  }
  const std::size_t samples = tape.value(source).cols();
  if (samples > 1) return tape.scale(tape.sum(h), 1.0 / static_cast<double>(samples));
  return tape.sum(h);
}

enum class RegularizerForm {
  Log,  // -log(max(phi, eps))
  Raw,  // -phi
};

struct RegularizerResult {
  double value = 0.0;      // selected form
  double phi_total = 0.0;
  double raw_value = 0.0;  // -phi
  bool collapse_warning = false;  // phi <= eps; value is -log(eps)
  std::vector<Matrix> weight_grads;
  std::vector<Matrix> scaling_grads;
};

/// The connectivity regularizer and its gradient with respect to every weight
/// and scaling factor, differentiated through the normalization.
inline RegularizerResult connect_regularizer(const LayeredNetwork& net, RegularizerForm form = RegularizerForm::Log,
                                             ConnectivityMode mode = ConnectivityMode::Normalized) {
  validate(net);
  ad::Tape tape;
  NetworkVars vars = add_network_parameters(tape, net);
  ad::Var ones = tape.input(Matrix(net.input_width(), 1, 1.0), "ones");
  ad::Var phi = record_phi_total(tape, net, vars, ones, {mode, false});
  ad::Var exit = form == RegularizerForm::Log ? tape.scale(tape.log(tape.clamp_min(phi, kLogGuard)), -1.0)
                                              : tape.scale(phi, -1.0);
  RegularizerResult r;
  r.value = tape.forward(exit);
  r.phi_total = tape.value(phi)[0];
  r.raw_value = -r.phi_total;
  r.collapse_warning = r.phi_total <= kLogGuard;
  auto grads = tape.backward();
  for (auto v : vars.weights) r.weight_grads.push_back(grads[v]);
  for (auto v : vars.scaling) r.scaling_grads.push_back(grads[v]);
  return r;
}

struct EdgeSetReport {
  EdgeSetKind kind = EdgeSetKind::Dense;
  std::size_t index = 0;
  double l1_mass = 0.0;
  std::size_t surviving_edges = 0;
  bool zero_mass = false;
};

struct CollapseReport {
  bool collapsed = false;  // phi_total == 0
  double phi_total = 0.0;
  std::vector<EdgeSetReport> layers;
};

inline CollapseReport detect_collapse(const LayeredNetwork& net) {
  validate(net);
  CollapseReport rep;
  const NormalizedView view = normalize(net, ConnectivityMode::Normalized);
  rep.phi_total = phi_total(view);
  rep.collapsed = rep.phi_total == 0.0;
  for (const auto& e : view.edge_sets) {
    const Matrix& raw = e.kind == EdgeSetKind::Dense ? net.weights[e.index] : net.scaling[e.index].delta;
    rep.layers.push_back({e.kind, e.index, e.mass, raw.count_nonzero(), e.zero_mass});
  }
  return rep;
}

}  // namespace cnx
