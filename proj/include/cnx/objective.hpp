#pragma once

// Training objective on an autodiff tape:
//
//   BCE(sigmoid(f(x)), y) + l1 * sum|W| - connect * log(max(phi_total, eps)) + l2 * 0.5 * sum W^2
//
// The tape is built once per network structure; inputs, targets and parameters
// are rebound for every minibatch.

#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "cnx/autodiff.hpp"
#include "cnx/connectivity.hpp"
#include "cnx/matrix.hpp"
#include "cnx/network.hpp"

namespace cnx {

struct RegularizerConfig {
  double l1 = 0.0;       // coefficient of sum |W|
  double connect = 0.0;  // coefficient of -log phi_total
  double l2 = 0.0;       // coefficient of 0.5 * sum W^2 (weight decay)

  void check() const {
    if (!(l1 >= 0.0) || !(connect >= 0.0) || !(l2 >= 0.0))
      throw std::invalid_argument("regularizer coefficients must be >= 0");
  }
  friend bool operator==(const RegularizerConfig&, const RegularizerConfig&) = default;
};

/// Records the forward pass on `x_t` (features x batch) and returns the output
/// layer pre-activation (features x batch), i.e. the logits for a sigmoid output.
inline ad::Var record_logits(ad::Tape& tape, const LayeredNetwork& structure, const NetworkVars& vars, ad::Var x_t) {
  ad::Var h = x_t;
  const std::size_t L = structure.weight_layers();
  for (std::size_t k = 0; k < L; ++k) {
    ad::Var z = tape.add(tape.matmul(vars.weights[k], h), vars.biases[k]);
    if (k + 1 == L) return z;
    switch (structure.activations[k]) {
      case Activation::Relu: h = tape.relu(z); break;
      case Activation::Sigmoid: h = tape.sigmoid(z); break;
      case Activation::Identity: h = z; break;
    }
    for (std::size_t s = 0; s < structure.scaling.size(); ++s)
      if (structure.scaling[s].after_layer == k) h = tape.mul(vars.scaling[s], h);
  }
  return h;
}

/// Transposes a batch x features block into the tape's features x batch layout.
inline Matrix batch_columns(const Matrix& x, std::span<const std::size_t> rows) {
  Matrix out(x.cols(), rows.size());
  for (std::size_t c = 0; c < rows.size(); ++c)
    for (std::size_t f = 0; f < x.cols(); ++f) out(f, c) = x(rows[c], f);
  return out;
}

inline Matrix batch_targets(std::span<const double> y, std::span<const std::size_t> rows) {
  Matrix out(1, rows.size());
  for (std::size_t c = 0; c < rows.size(); ++c) out[c] = y[rows[c]];
  return out;
}

struct ObjectiveTerms {
  double total = 0.0;
  double bce = 0.0;
  double phi_total = 0.0;  // only when the connectivity term is active
};

/// A reusable tape for the regularized objective of one network structure.
class ObjectiveGraph {
 public:
  ObjectiveGraph(const LayeredNetwork& net, const RegularizerConfig& reg) : reg_(reg) {
    reg_.check();
    if (net.activations.back() != Activation::Sigmoid)
      throw std::invalid_argument("binary cross-entropy objective requires a sigmoid output layer");
    structure_ = net;
    vars_ = add_network_parameters(tape_, net);
    x_ = tape_.input(Matrix(net.input_width(), 1), "x");
    y_ = tape_.input(Matrix(net.output_width(), 1), "y");
    ad::Var logits = record_logits(tape_, net, vars_, x_);
    bce_ = tape_.bce_with_logits(logits, y_);
    total_ = bce_;
    if (reg_.l1 > 0.0) {
      ad::Var s = tape_.sum(tape_.abs(vars_.weights.front()));
      for (std::size_t k = 1; k < vars_.weights.size(); ++k) s = tape_.add(s, tape_.sum(tape_.abs(vars_.weights[k])));
      total_ = tape_.add(total_, tape_.scale(s, reg_.l1));
    }
    if (reg_.connect > 0.0) {
      ad::Var ones = tape_.input(Matrix(net.input_width(), 1, 1.0), "ones");
      phi_ = record_phi_total(tape_, net, vars_, ones);
      ad::Var barrier = tape_.log(tape_.clamp_min(phi_, kLogGuard));
      total_ = tape_.add(total_, tape_.scale(barrier, -reg_.connect));
      has_phi_ = true;
    }
    if (reg_.l2 > 0.0) {
      auto sq = [&](ad::Var w) { return tape_.sum(tape_.mul(w, w)); };
      ad::Var s = sq(vars_.weights.front());
      for (std::size_t k = 1; k < vars_.weights.size(); ++k) s = tape_.add(s, sq(vars_.weights[k]));
      total_ = tape_.add(total_, tape_.scale(s, 0.5 * reg_.l2));
    }
  }

  const RegularizerConfig& regularizer() const noexcept { return reg_; }
  const NetworkVars& vars() const noexcept { return vars_; }

  /// Evaluates the objective for `net` on a features x batch block and 1 x batch targets.
  ObjectiveTerms evaluate(const LayeredNetwork& net, Matrix x_t, Matrix y) {
    bind_network_parameters(tape_, vars_, net);
    tape_.bind(x_, std::move(x_t));
    tape_.bind(y_, std::move(y));
    ObjectiveTerms t;
    t.total = tape_.forward(total_);
    t.bce = tape_.value(bce_)[0];
    if (has_phi_) t.phi_total = tape_.value(phi_)[0];
    return t;
  }

  ad::GradientMap gradients() { return tape_.backward(); }

 private:
  RegularizerConfig reg_;
  LayeredNetwork structure_;
  ad::Tape tape_;
  NetworkVars vars_;
  ad::Var x_, y_, bce_, total_, phi_;
  bool has_phi_ = false;
};

/// Mean BCE and accuracy (threshold 0.5) of a sigmoid-output network.
struct Evaluation {
  double loss = 0.0;
  double accuracy = 0.0;
};

inline Evaluation evaluate_classifier(const LayeredNetwork& net, const Matrix& x, std::span<const double> y) {
  LayeredNetwork logit_net = net;
  logit_net.activations.back() = Activation::Identity;
  const Matrix logits = predict(logit_net, x);
  Evaluation e;
  if (x.rows() == 0) return e;
  std::size_t correct = 0;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const double z = logits(i, 0);
    e.loss += ad::detail::softplus(z) - y[i] * z;
    if ((z > 0.0 ? 1.0 : 0.0) == y[i]) ++correct;
  }
  e.loss /= static_cast<double>(x.rows());
  e.accuracy = static_cast<double>(correct) / static_cast<double>(x.rows());
  return e;
}

}  // namespace cnx
