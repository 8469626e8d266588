#pragma once

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cnx/autodiff.hpp"
#include "cnx/connectivity.hpp"
#include "cnx/errors.hpp"
#include "cnx/network.hpp"
#include "cnx/objective.hpp"
#include "cnx/rng.hpp"

namespace cnx {

enum class Granularity { Weight, NodeGroup, ScalingEntry };
enum class ScoreMethod { Magnitude, SynFlow, Channel, LossAware, Gradient };
enum class PruneScope { Local, Global };

inline const char* granularity_name(Granularity g) {
  switch (g) {
    case Granularity::Weight: return "weight";
    case Granularity::NodeGroup: return "node-group";
    case Granularity::ScalingEntry: return "scaling-entry";
  }
  return "?";
}

inline const char* method_name(ScoreMethod m) {
  switch (m) {
    case ScoreMethod::Magnitude: return "magnitude";
    case ScoreMethod::SynFlow: return "synflow";
    case ScoreMethod::Channel: return "channel";
    case ScoreMethod::LossAware: return "loss-aware";
    case ScoreMethod::Gradient: return "gradient";
  }
  return "?";
}

/// Weight: (weight layer, row, col). NodeGroup: (node layer, node, 0).
/// ScalingEntry: (scaling-layer position, channel, 0).
struct ScoreKey {
  std::size_t layer = 0;
  std::size_t row = 0;
  std::size_t col = 0;
  friend auto operator<=>(const ScoreKey&, const ScoreKey&) = default;
};

struct ScoreEntry {
  ScoreKey key;
  double score = 0.0;
};

/// Importance scores in ascending key order.
struct ImportanceTable {
  Granularity granularity = Granularity::Weight;
  ScoreMethod method = ScoreMethod::Magnitude;
  std::vector<ScoreEntry> entries;
  bool collapse_warning = false;

  std::optional<double> find(const ScoreKey& k) const {
    auto it = std::lower_bound(entries.begin(), entries.end(), k,
                               [](const ScoreEntry& e, const ScoreKey& key) { return e.key < key; });
    if (it == entries.end() || it->key != k) return std::nullopt;
    return it->score;
  }

  /// Sum of scores whose key has the given layer.
  double layer_sum(std::size_t layer) const {
    double s = 0.0;
    for (const auto& e : entries)
      if (e.key.layer == layer) s += e.score;
    return s;
  }
};

struct PruneSpec {
  PruneScope scope = PruneScope::Local;
  double fraction = 0.0;  // in [0, 1)
};

namespace detail {

inline bool weight_kept(const LayeredNetwork& net, std::size_t k, std::size_t idx) {
  return !net.mask || net.mask->weights[k][idx] != 0.0;
}

inline bool scaling_kept(const LayeredNetwork& net, std::size_t s, std::size_t idx) {
  return !net.mask || net.mask->scaling[s][idx] != 0.0;
}

/// Per-weight table from a score function, skipping masked weights.
template <typename F>
ImportanceTable weight_table(const LayeredNetwork& net, ScoreMethod method, F&& score) {
  ImportanceTable t;
  t.granularity = Granularity::Weight;
  t.method = method;
  for (std::size_t k = 0; k < net.weight_layers(); ++k) {
    const Matrix& w = net.weights[k];
    for (std::size_t r = 0; r < w.rows(); ++r)
      for (std::size_t c = 0; c < w.cols(); ++c)
        if (weight_kept(net, k, r * w.cols() + c)) t.entries.push_back({{k, r, c}, score(k, r, c)});
  }
  return t;
}

/// Edge-set position of each weight layer / scaling layer within a NormalizedView.
inline std::size_t edge_set_position(const NormalizedView& view, EdgeSetKind kind, std::size_t index) {
  for (std::size_t i = 0; i < view.edge_sets.size(); ++i)
    if (view.edge_sets[i].kind == kind && view.edge_sets[i].index == index) return i;
  throw DimensionError("edge set not found");
}

inline std::size_t drop_count(double fraction, std::size_t n) {
  // The small offset absorbs representation error, e.g. 0.96 * 25 -> 24.
  return static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n) + 1e-9));
}

}  // namespace detail

/// |W_ij| for every unmasked weight.
inline ImportanceTable score_magnitude(const LayeredNetwork& net) {
  validate(net);
  return detail::weight_table(net, ScoreMethod::Magnitude,
                              [&](std::size_t k, std::size_t r, std::size_t c) { return std::abs(net.weights[k](r, c)); });
}

/// Synaptic saliency a_in(i) * theta_ij * a_out(j) of every unmasked weight.
///
/// On a collapsed network (phi_total = 0) every score is 0 and collapse_warning is set.
inline ImportanceTable score_synflow(const LayeredNetwork& net) {
  validate(net);
  const NormalizedView view = normalize(net, ConnectivityMode::Normalized);
  const ConnectivityProfile prof = node_connectivity(view);
  const bool collapsed = prof.phi_total == 0.0;
  ImportanceTable t = detail::weight_table(net, ScoreMethod::SynFlow, [&](std::size_t k, std::size_t r, std::size_t c) {
    if (collapsed) return 0.0;
    const std::size_t e = detail::edge_set_position(view, EdgeSetKind::Dense, k);
    return prof.a_in[e][c] * view.edge_sets[e].theta(r, c) * prof.a_out[e + 1][r];
  });
  t.collapse_warning = collapsed;
  return t;
}

/// Connectivity flowing through each unmasked scaling entry:
/// a_in(c) * |delta_c| / ||delta||_1 * a_out(c).
inline ImportanceTable score_channels(const LayeredNetwork& net) {
  validate(net);
  if (net.scaling.empty()) throw PruneError("score_channels: network has no scaling layers (empty table)");
  const NormalizedView view = normalize(net, ConnectivityMode::Normalized);
  const ConnectivityProfile prof = node_connectivity(view);
  ImportanceTable t;
  t.granularity = Granularity::ScalingEntry;
  t.method = ScoreMethod::Channel;
  t.collapse_warning = prof.phi_total == 0.0;
  for (std::size_t s = 0; s < net.scaling.size(); ++s) {
    const std::size_t e = detail::edge_set_position(view, EdgeSetKind::Diagonal, s);
    for (std::size_t c = 0; c < net.scaling[s].delta.size(); ++c)
      if (detail::scaling_kept(net, s, c))
        t.entries.push_back({{s, c, 0}, prof.a_in[e][c] * view.edge_sets[e].theta[c] * prof.a_out[e + 1][c]});
  }
  return t;
}

/// Builds a scalar objective on the tape from the network's parameter handles.
using ObjectiveBuilder = std::function<ad::Var(ad::Tape&, const NetworkVars&)>;

/// Sums per-weight scores into node groups: a hidden node's incoming row plus outgoing column.
inline ImportanceTable group_by_node(const LayeredNetwork& net, const ImportanceTable& weights) {
  if (weights.granularity != Granularity::Weight) throw PruneError("group_by_node needs a per-weight table");
  ImportanceTable t;
  t.granularity = Granularity::NodeGroup;
  t.method = weights.method;
  t.collapse_warning = weights.collapse_warning;
  for (std::size_t layer = 1; layer + 1 < net.depth(); ++layer) {
    for (std::size_t node = 0; node < net.sizes[layer]; ++node) {
      double s = 0.0;
      bool any = false;
      for (std::size_t i = 0; i < net.sizes[layer - 1]; ++i)
        if (auto v = weights.find({layer - 1, node, i})) {
          s += *v;
          any = true;
        }
      for (std::size_t j = 0; j < net.sizes[layer + 1]; ++j)
        if (auto v = weights.find({layer, j, node})) {
          s += *v;
          any = true;
        }
      if (any) t.entries.push_back({{layer, node, 0}, s});
    }
  }
  return t;
}

/// |dJ/dW_ij * W_ij| for every unmasked weight, with J built by `objective`.
inline ImportanceTable score_gradient_saliency(const LayeredNetwork& net, const ObjectiveBuilder& objective,
                                               ScoreMethod tag = ScoreMethod::Gradient) {
  validate(net);
  ad::Tape tape;
  NetworkVars vars = add_network_parameters(tape, net);
  ad::Var j = objective(tape, vars);
  tape.forward(j);
  auto grads = tape.backward();
  std::vector<Matrix> g;
  for (std::size_t k = 0; k < net.weight_layers(); ++k) {
    g.push_back(grads[vars.weights[k]]);
    if (!g.back().all_finite())
      throw NumericError("non-finite gradient in weight layer " + std::to_string(k) + " while scoring");
  }
  return detail::weight_table(net, tag, [&](std::size_t k, std::size_t r, std::size_t c) {
    return std::abs(g[k](r, c) * net.weights[k](r, c));
  });
}

struct LossAwareOptions {
  Granularity granularity = Granularity::Weight;  // Weight or NodeGroup
  ConnectivityMode mode = ConnectivityMode::SignalFlow;
  bool include_biases = true;        // |b| enters the connectivity pass
  std::size_t connectivity_samples = 1;  // 1: all-ones input; >1: uniform [0,1) inputs, averaged
  std::uint64_t sample_seed = 0;
};

/// Loss-aware importance under J = BCE(batch) - lambda * log(phi_total).
///
/// `x` is batch x features, `y` holds one 0/1 target per row.
inline ImportanceTable score_loss_aware(const LayeredNetwork& net, const Matrix& x, std::span<const double> y,
                                        double lambda, const LossAwareOptions& opts = {}) {
  if (x.rows() == 0) throw std::invalid_argument("score_loss_aware: empty batch");
  if (y.size() != x.rows()) throw DimensionError("score_loss_aware: targets do not match batch size");
  if (opts.granularity == Granularity::ScalingEntry)
    throw std::invalid_argument("score_loss_aware supports weight or node-group granularity");
  if (net.activations.back() != Activation::Sigmoid)
    throw std::invalid_argument("score_loss_aware requires a sigmoid output layer");

  std::vector<std::size_t> rows(x.rows());
  for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
  Matrix x_t = batch_columns(x, rows);
  Matrix y_t = batch_targets(y, rows);

  Matrix source(net.input_width(), std::max<std::size_t>(opts.connectivity_samples, 1), 1.0);
  if (opts.connectivity_samples > 1) {
    Rng rng(opts.sample_seed);
    for (double& v : source.values()) v = rng.uniform();
  }

  ImportanceTable w = score_gradient_saliency(
      net,
      [&](ad::Tape& tape, const NetworkVars& vars) {
        ad::Var xin = tape.input(x_t, "x");
        ad::Var yin = tape.input(y_t, "y");
        ad::Var loss = tape.bce_with_logits(record_logits(tape, net, vars, xin), yin);
        if (lambda == 0.0) return loss;
        ad::Var src = tape.input(source, "connectivity-source");
        ad::Var phi = record_phi_total(tape, net, vars, src, {opts.mode, opts.include_biases});
        return tape.sub(loss, tape.scale(tape.log(tape.clamp_min(phi, kLogGuard)), lambda));
      },
      ScoreMethod::LossAware);
  if (opts.granularity == Granularity::NodeGroup) return group_by_node(net, w);
  return w;
}

/// Keep/drop mask that removes the lowest-scored entries. Ties: lower key first.
///
/// Local scope drops floor(fraction * n_k) entries within every layer; global
/// scope drops floor(fraction * n) overall. Entries already masked in `net`
/// stay masked.
inline PruneMask build_mask(const LayeredNetwork& net, const ImportanceTable& table, const PruneSpec& spec) {
  validate(net);
  if (!(spec.fraction >= 0.0 && spec.fraction < 1.0))
    throw PruneError("prune fraction must lie in [0, 1), got " + std::to_string(spec.fraction));

  auto lower = [](const ScoreEntry* a, const ScoreEntry* b) {
    if (a->score != b->score) return a->score < b->score;
    return a->key < b->key;
  };

  std::vector<const ScoreEntry*> dropped;
  if (spec.scope == PruneScope::Global) {
    std::vector<const ScoreEntry*> all;
    for (const auto& e : table.entries) all.push_back(&e);
    std::sort(all.begin(), all.end(), lower);
    all.resize(detail::drop_count(spec.fraction, all.size()));
    dropped = std::move(all);
  } else {
    std::map<std::size_t, std::vector<const ScoreEntry*>> by_layer;
    for (const auto& e : table.entries) by_layer[e.key.layer].push_back(&e);
    for (auto& [layer, entries] : by_layer) {
      const std::size_t d = detail::drop_count(spec.fraction, entries.size());
      if (d > 0 && d == entries.size())
        throw PruneError("local pruning at fraction " + std::to_string(spec.fraction) + " would empty " +
                         granularity_name(table.granularity) + " layer " + std::to_string(layer));
      std::sort(entries.begin(), entries.end(), lower);
      dropped.insert(dropped.end(), entries.begin(), entries.begin() + static_cast<std::ptrdiff_t>(d));
    }
  }

  PruneMask mask = net.mask ? *net.mask : full_mask(net);
  for (const ScoreEntry* e : dropped) {
    const ScoreKey& k = e->key;
    switch (table.granularity) {
      case Granularity::Weight:
        if (k.layer >= mask.weights.size() || k.row >= mask.weights[k.layer].rows() ||
            k.col >= mask.weights[k.layer].cols())
          throw DimensionError("score key outside weight layer " + std::to_string(k.layer));
        mask.weights[k.layer](k.row, k.col) = 0.0;
        break;
      case Granularity::ScalingEntry:
        if (k.layer >= mask.scaling.size() || k.row >= mask.scaling[k.layer].rows())
          throw DimensionError("score key outside scaling layer " + std::to_string(k.layer));
        mask.scaling[k.layer][k.row] = 0.0;
        break;
      case Granularity::NodeGroup: {
        if (k.layer == 0 || k.layer + 1 >= net.depth() || k.row >= net.sizes[k.layer])
          throw DimensionError("node group key outside hidden layers");
        Matrix& in = mask.weights[k.layer - 1];
        for (std::size_t i = 0; i < in.cols(); ++i) in(k.row, i) = 0.0;
        Matrix& out = mask.weights[k.layer];
        for (std::size_t j = 0; j < out.rows(); ++j) out(j, k.row) = 0.0;
        break;
      }
    }
  }
  return mask;
}

}  // namespace cnx
