#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "cnx/connectivity.hpp"
#include "cnx/errors.hpp"
#include "cnx/matrix.hpp"
#include "cnx/network.hpp"
#include "cnx/objective.hpp"
#include "cnx/rng.hpp"

namespace cnx {

// ---------------------------------------------------------------------------
// Synthetic task: six Gaussian features, label decided by the first two.
// ---------------------------------------------------------------------------

struct ToyDataset {
  Matrix x_train;  // n_train x 6
  std::vector<double> y_train;
  Matrix x_test;
  std::vector<double> y_test;
  std::uint64_t seed = 0;
};

inline constexpr std::size_t kToyFeatures = 6;
inline constexpr double kToyFeatureVariance = 2.0;
inline constexpr double kToyNoiseStddev = 0.25;
inline constexpr std::size_t kToyTrainSize = 10'000;
inline constexpr std::size_t kToyTestSize = 2'000;

/// x ~ N(0, 2 I_6); y = 1 iff x1 + x2 + xi > 0 with xi ~ N(0, 0.25^2).
///
/// Draw order per sample: six features, then the noise term. Train rows come first.
inline ToyDataset generate_toy(std::size_t n_train = kToyTrainSize, std::size_t n_test = kToyTestSize,
                               std::uint64_t seed = 0) {
  if (n_train == 0) throw std::invalid_argument("generate_toy: n must be >= 1");
  Rng rng(seed);
  const double sd = std::sqrt(kToyFeatureVariance);
  auto fill = [&](Matrix& x, std::vector<double>& y, std::size_t n) {
    x = Matrix(n, kToyFeatures);
    y.assign(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t f = 0; f < kToyFeatures; ++f) x(i, f) = sd * rng.normal();
      const double xi = kToyNoiseStddev * rng.normal();
      y[i] = (x(i, 0) + x(i, 1) + xi > 0.0) ? 1.0 : 0.0;
    }
  };
  ToyDataset d;
  d.seed = seed;
  fill(d.x_train, d.y_train, n_train);
  fill(d.x_test, d.y_test, n_test);
  return d;
}

// ---------------------------------------------------------------------------
// Optimizer and schedule
// ---------------------------------------------------------------------------

struct TrainConfig {
  std::size_t epochs = 200;
  std::size_t batch_size = 256;
  double learning_rate = 0.01;
  // Optional linear warmup: factor goes start -> end over warmup_epochs, then cosine to 0.
  std::size_t warmup_epochs = 0;
  double warmup_start_factor = 0.01;
  double warmup_end_factor = 1.0;
  bool cosine = true;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;  // shuffle seed

  void check() const {
    if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("learning rate must be > 0");
    if (warmup_epochs >= epochs && warmup_epochs > 0)
      throw std::invalid_argument("warmup must be shorter than training");
  }
};

/// Learning rate for epoch e (0-based):
///   e <  W: lr * (s + (t - s) * e / W)
///   e >= W: lr * t * 0.5 * (1 + cos(pi * (e - W) / (E - W)))   (cosine on)
/// where s, t are the warmup start/end factors (t = 1 when W = 0).
inline double learning_rate_at(const TrainConfig& cfg, std::size_t epoch) {
  const double lr = cfg.learning_rate;
  const std::size_t W = cfg.warmup_epochs;
  const double end = W > 0 ? cfg.warmup_end_factor : 1.0;
  if (epoch < W) {
    const double f = cfg.warmup_start_factor +
                     (cfg.warmup_end_factor - cfg.warmup_start_factor) * static_cast<double>(epoch) / static_cast<double>(W);
    return lr * f;
  }
  if (!cfg.cosine) return lr * end;
  const double t = static_cast<double>(epoch - W) / static_cast<double>(cfg.epochs - W);
  return lr * end * 0.5 * (1.0 + std::cos(std::numbers::pi * t));
}

/// Adam with bias correction; one moment pair per parameter matrix.
class Adam {
 public:
  Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  /// Updates `param` in place using gradient `grad`. `slot` identifies the parameter.
  void step(std::size_t slot, Matrix& param, const Matrix& grad, double lr) {
    if (slot >= m_.size()) {
      m_.resize(slot + 1);
      v_.resize(slot + 1);
      t_.resize(slot + 1, 0);
    }
    if (m_[slot].empty()) {
      m_[slot] = Matrix(param.rows(), param.cols());
      v_[slot] = Matrix(param.rows(), param.cols());
    }
    const std::uint64_t t = ++t_[slot];
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t));
    Matrix& m = m_[slot];
    Matrix& v = v_[slot];
    for (std::size_t i = 0; i < param.size(); ++i) {
      const double g = grad[i];
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
      param[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
  }

 private:
  double beta1_, beta2_, eps_;
  std::vector<Matrix> m_, v_;
  std::vector<std::uint64_t> t_;
};

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;  // mean regularized objective over the epoch's minibatches
  double test_loss = 0.0;   // BCE on the test split
  double test_acc = 0.0;
  double phi_total = 0.0;   // normalized connectivity after the epoch
  std::vector<double> layer_mass;  // L1 mass per weight layer
  bool collapse = false;    // phi_total == 0
  bool log_guard = false;   // phi_total <= log-guard epsilon
};

struct RunMetrics {
  std::vector<EpochRecord> epochs;
  bool collapse = false;  // any epoch collapsed
  double min_phi_total = 0.0;
};

struct TrainResult {
  LayeredNetwork net;
  RunMetrics metrics;
};

namespace detail {

inline EpochRecord epoch_record(const LayeredNetwork& net, const ToyDataset& data, std::size_t epoch, double lr,
                                double train_loss) {
  EpochRecord r;
  r.epoch = epoch;
  r.lr = lr;
  r.train_loss = train_loss;
  const Evaluation ev = evaluate_classifier(net, data.x_test, data.y_test);
  r.test_loss = ev.loss;
  r.test_acc = ev.accuracy;
  r.phi_total = phi_total(net, ConnectivityMode::Normalized);
  for (const auto& w : net.weights) r.layer_mass.push_back(w.abs_sum());
  r.collapse = r.phi_total == 0.0;
  r.log_guard = r.phi_total <= kLogGuard;
  return r;
}

inline void zero_masked(Matrix& grad, const Matrix& mask) {
  for (std::size_t i = 0; i < grad.size(); ++i)
    if (mask[i] == 0.0) grad[i] = 0.0;
}

}  // namespace detail

/// Minibatch Adam on the regularized objective. Masked entries stay at 0.
inline TrainResult train(LayeredNetwork net, const ToyDataset& data, const RegularizerConfig& reg,
                         const TrainConfig& cfg) {
  cfg.check();
  validate(net);
  if (net.input_width() != data.x_train.cols())
    throw DimensionError("train: network expects " + std::to_string(net.input_width()) + " features, data has " +
                         std::to_string(data.x_train.cols()));
  enforce_mask(net);

  ObjectiveGraph graph(net, reg);
  const NetworkVars& vars = graph.vars();
  Adam adam(cfg.beta1, cfg.beta2, cfg.adam_eps);

  const std::size_t n = data.x_train.rows();
  std::vector<std::size_t> order(n);
  TrainResult result;
  result.metrics.min_phi_total = phi_total(net);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = learning_rate_at(cfg, epoch);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng(mix_seed(cfg.seed, epoch));
    shuffle_rng.shuffle(std::span<std::size_t>(order));

    double loss_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t end = std::min(n, start + cfg.batch_size);
      std::span<const std::size_t> rows(order.data() + start, end - start);
      const ObjectiveTerms terms = graph.evaluate(net, batch_columns(data.x_train, rows), batch_targets(data.y_train, rows));
      if (!std::isfinite(terms.total))
        throw NumericError("non-finite objective at epoch " + std::to_string(epoch) + ", batch " + std::to_string(batches));
      auto grads = graph.gradients();

      std::size_t slot = 0;
      for (std::size_t k = 0; k < net.weight_layers(); ++k) {
        Matrix g = grads[vars.weights[k]];
        if (!g.all_finite())
          throw NumericError("non-finite gradient in weight layer " + std::to_string(k) + " at epoch " +
                             std::to_string(epoch) + ", batch " + std::to_string(batches));
        if (net.mask) detail::zero_masked(g, net.mask->weights[k]);
        adam.step(slot++, net.weights[k], g, lr);
        adam.step(slot++, net.biases[k], grads[vars.biases[k]], lr);
      }
      for (std::size_t s = 0; s < net.scaling.size(); ++s) {
        Matrix g = grads[vars.scaling[s]];
        if (net.mask) detail::zero_masked(g, net.mask->scaling[s]);
        adam.step(slot++, net.scaling[s].delta, g, lr);
      }
      enforce_mask(net);
      loss_sum += terms.total;
      ++batches;
    }

    EpochRecord rec = detail::epoch_record(net, data, epoch, lr, loss_sum / static_cast<double>(batches));
    result.metrics.collapse = result.metrics.collapse || rec.collapse;
    result.metrics.min_phi_total = std::min(result.metrics.min_phi_total, rec.phi_total);
    result.metrics.epochs.push_back(std::move(rec));
  }
  result.net = std::move(net);
  return result;
}

struct FineTuneOptions {
  bool keep_sparsity_regularizers = false;  // keep l1 / connect terms after pruning
};

/// Mask-respecting retraining after pruning. By default only the weight-decay
/// term of `reg` stays active.
inline TrainResult fine_tune(LayeredNetwork net, const ToyDataset& data, const RegularizerConfig& reg,
                             const TrainConfig& cfg, FineTuneOptions opts = {}) {
  if (!net.mask) throw StateError("fine_tune: network carries no prune mask");
  RegularizerConfig r = reg;
  if (!opts.keep_sparsity_regularizers) {
    r.l1 = 0.0;
    r.connect = 0.0;
  }
  return train(std::move(net), data, r, cfg);
}

}  // namespace cnx
