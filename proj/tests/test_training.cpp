#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "cnx/connectivity.hpp"
#include "cnx/objective.hpp"
#include "cnx/properties.hpp"
#include "cnx/training.hpp"

namespace {

using cnx::Matrix;

const cnx::ToyDataset& toy() {
  static const cnx::ToyDataset d = cnx::generate_toy();
  return d;
}

const std::vector<std::size_t> kToySizes{6, 5, 5, 5, 1};

// --- data --------------------------------------------------------------------

TEST(ToyData, ShapesAndLabels) {
  const auto& d = toy();
  EXPECT_EQ(d.x_train.rows(), 10000u);
  EXPECT_EQ(d.x_train.cols(), 6u);
  EXPECT_EQ(d.x_test.rows(), 2000u);
  for (double y : d.y_train) EXPECT_TRUE(y == 0.0 || y == 1.0);
}

TEST(ToyData, LabelsAreBalanced) {
  const auto& d = toy();
  double pos = 0.0;
  for (double y : d.y_train) pos += y;
  const double frac = pos / static_cast<double>(d.y_train.size());
  EXPECT_GE(frac, 0.48);
  EXPECT_LE(frac, 0.52);
}

TEST(ToyData, FeatureMoments) {
  const auto& d = toy();
  for (std::size_t f = 0; f < 6; ++f) {
    double m = 0.0, s = 0.0;
    for (std::size_t i = 0; i < d.x_train.rows(); ++i) m += d.x_train(i, f);
    m /= 10000.0;
    for (std::size_t i = 0; i < d.x_train.rows(); ++i) s += (d.x_train(i, f) - m) * (d.x_train(i, f) - m);
    EXPECT_NEAR(m, 0.0, 0.06);
    EXPECT_NEAR(s / 9999.0, 2.0, 0.1);
  }
}

// Logistic regression by full-batch gradient descent on a subset of features.
double logistic_accuracy(const cnx::ToyDataset& d, const std::vector<std::size_t>& features) {
  std::vector<double> w(features.size(), 0.0);
  double b = 0.0;
  const double n = static_cast<double>(d.x_train.rows());
  for (int it = 0; it < 300; ++it) {
    std::vector<double> gw(w.size(), 0.0);
    double gb = 0.0;
    for (std::size_t i = 0; i < d.x_train.rows(); ++i) {
      double z = b;
      for (std::size_t f = 0; f < features.size(); ++f) z += w[f] * d.x_train(i, features[f]);
      const double err = 1.0 / (1.0 + std::exp(-z)) - d.y_train[i];
      for (std::size_t f = 0; f < features.size(); ++f) gw[f] += err * d.x_train(i, features[f]);
      gb += err;
    }
    for (std::size_t f = 0; f < w.size(); ++f) w[f] -= 0.5 * gw[f] / n;
    b -= 0.5 * gb / n;
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < d.x_test.rows(); ++i) {
    double z = b;
    for (std::size_t f = 0; f < features.size(); ++f) z += w[f] * d.x_test(i, features[f]);
    if ((z > 0.0 ? 1.0 : 0.0) == d.y_test[i]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(d.x_test.rows());
}

TEST(ToyData, NoiseFeaturesCarryNoSignal) {
  EXPECT_LE(logistic_accuracy(toy(), {2, 3, 4, 5}), 0.55);
  EXPECT_GE(logistic_accuracy(toy(), {0, 1}), 0.95);
}

TEST(ToyData, SeedDeterminesData) {
  const auto a = cnx::generate_toy(100, 10, 7), b = cnx::generate_toy(100, 10, 7), c = cnx::generate_toy(100, 10, 8);
  EXPECT_EQ(a.x_train, b.x_train);
  EXPECT_EQ(a.y_test, b.y_test);
  EXPECT_NE(a.x_train, c.x_train);
}

TEST(ToyData, RejectsEmpty) { EXPECT_THROW(cnx::generate_toy(0, 10, 0), std::invalid_argument); }

// --- objective ---------------------------------------------------------------

cnx::ObjectiveTerms evaluate(const cnx::LayeredNetwork& net, const cnx::RegularizerConfig& reg, std::size_t n = 64) {
  std::vector<std::size_t> rows(n);
  for (std::size_t i = 0; i < n; ++i) rows[i] = i;
  cnx::ObjectiveGraph g(net, reg);
  return g.evaluate(net, cnx::batch_columns(toy().x_train, rows), cnx::batch_targets(toy().y_train, rows));
}

TEST(Objective, NoRegularizersIsPlainBce) {
  const auto net = cnx::init_random(kToySizes, 3);
  const auto terms = evaluate(net, {});
  Matrix x(64, 6);
  std::vector<double> y(64);
  for (std::size_t i = 0; i < 64; ++i) {
    for (std::size_t f = 0; f < 6; ++f) x(i, f) = toy().x_train(i, f);
    y[i] = toy().y_train[i];
  }
  EXPECT_NEAR(terms.total, cnx::evaluate_classifier(net, x, y).loss, 1e-12);
  EXPECT_DOUBLE_EQ(terms.total, terms.bce);
}

TEST(Objective, SinglePathNetHasNoConnectivityPenalty) {
  cnx::Rng rng(1);
  auto net = cnx::props::construct_maximizer(kToySizes, rng).net;
  ASSERT_DOUBLE_EQ(cnx::phi_total(net), 1.0);
  const cnx::RegularizerConfig connect{0.0, 0.1, 0.0};
  EXPECT_NEAR(evaluate(net, connect).total, evaluate(net, {}).total, 1e-15);
}

TEST(Objective, TermsAddUp) {
  const auto net = cnx::init_random(kToySizes, 4);
  double l1 = 0.0, l2 = 0.0;
  for (const auto& w : net.weights)
    for (double v : w.values()) {
      l1 += std::abs(v);
      l2 += 0.5 * v * v;
    }
  const auto t = evaluate(net, {1e-3, 0.1, 5e-4});
  EXPECT_NEAR(t.total, t.bce + 1e-3 * l1 - 0.1 * std::log(cnx::phi_total(net)) + 5e-4 * l2, 1e-12);
  EXPECT_NEAR(t.phi_total, cnx::phi_total(net), 1e-15);
}

TEST(Objective, GradientsMatchFiniteDifferences) {
  cnx::props::GradientSuiteOptions o;
  o.nets = 3;
  const auto rep = cnx::props::gradient_suite(o);
  for (const auto& c : rep.cases) EXPECT_TRUE(c.passed) << c.id << ": " << c.detail;
}

TEST(Objective, RejectsNegativeCoefficients) {
  const cnx::RegularizerConfig bad{-1.0, 0.0, 0.0};
  EXPECT_THROW(cnx::ObjectiveGraph(cnx::init_random(kToySizes, 0), bad), std::invalid_argument);
}

// --- schedule and optimizer --------------------------------------------------

TEST(Schedule, CosineClosedForm) {
  cnx::TrainConfig cfg;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    const double expected = 0.01 * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(e) / 200.0));
    EXPECT_NEAR(cnx::learning_rate_at(cfg, e), expected, 1e-12);
  }
  EXPECT_DOUBLE_EQ(cnx::learning_rate_at(cfg, 0), 0.01);
  EXPECT_LE(cnx::learning_rate_at(cfg, 199), 1e-3 * 0.01);
}

TEST(Schedule, FineTuneEndsLow) {
  cnx::TrainConfig cfg;
  cfg.epochs = 50;
  cfg.learning_rate = 0.001;
  EXPECT_LE(cnx::learning_rate_at(cfg, 49), 1e-3 * 0.001);
}

TEST(Schedule, WarmupThenCosine) {
  cnx::TrainConfig cfg;
  cfg.epochs = 20;
  cfg.learning_rate = 0.1;
  cfg.warmup_epochs = 5;
  cfg.warmup_start_factor = 0.2;
  cfg.warmup_end_factor = 0.8;
  for (std::size_t e = 0; e < 5; ++e)
    EXPECT_NEAR(cnx::learning_rate_at(cfg, e), 0.1 * (0.2 + 0.6 * static_cast<double>(e) / 5.0), 1e-12);
  for (std::size_t e = 5; e < 20; ++e)
    EXPECT_NEAR(cnx::learning_rate_at(cfg, e),
                0.1 * 0.8 * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(e - 5) / 15.0)), 1e-12);
}

TEST(Schedule, ConstantWithoutCosine) {
  cnx::TrainConfig cfg;
  cfg.cosine = false;
  EXPECT_EQ(cnx::learning_rate_at(cfg, 150), 0.01);
}

TEST(Adam, UnitGradientStepsByLearningRate) {
  cnx::Adam adam;
  Matrix p(1, 1, 0.0);
  const Matrix g(1, 1, 1.0);
  adam.step(0, p, g, 0.1);
  // m_hat = v_hat = 1, so the step is lr / (1 + eps)
  EXPECT_NEAR(p[0], -0.1 / (1.0 + 1e-8), 1e-15);
  adam.step(0, p, g, 0.1);
  EXPECT_NEAR(p[0], -0.2 / (1.0 + 1e-8), 1e-15);
}

TEST(Adam, SecondStepHandComputed) {
  cnx::Adam adam;
  Matrix p(1, 1, 1.0);
  adam.step(0, p, Matrix(1, 1, 2.0), 0.01);
  adam.step(0, p, Matrix(1, 1, -1.0), 0.01);
  const double m = 0.9 * 0.2 + 0.1 * -1.0, v = 0.999 * 0.004 + 0.001 * 1.0;
  const double mh = m / (1 - 0.81), vh = v / (1 - 0.999 * 0.999);
  const double first = 0.01 * 2.0 / (2.0 + 1e-8);
  EXPECT_NEAR(p[0], 1.0 - first - 0.01 * mh / (std::sqrt(vh) + 1e-8), 1e-14);
}

// --- training ----------------------------------------------------------------

cnx::TrainConfig short_config(std::size_t epochs, std::uint64_t seed = 0) {
  cnx::TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.seed = seed;
  return cfg;
}

TEST(Train, UnregularizedToyRunSolvesTheTask) {
  cnx::TrainConfig cfg;
  const auto r = cnx::train(cnx::init_random(kToySizes, 0), toy(), {}, cfg);
  ASSERT_EQ(r.metrics.epochs.size(), 200u);
  EXPECT_GT(r.metrics.epochs.back().test_acc, 0.95);
}

TEST(Train, MetricsPerEpoch) {
  const auto r = cnx::train(cnx::init_random(kToySizes, 1), toy(), {0.0, 0.1, 5e-4}, short_config(5));
  ASSERT_EQ(r.metrics.epochs.size(), 5u);
  for (std::size_t e = 0; e < 5; ++e) {
    const auto& rec = r.metrics.epochs[e];
    EXPECT_EQ(rec.epoch, e);
    EXPECT_EQ(rec.layer_mass.size(), 4u);
    EXPECT_TRUE(std::isfinite(rec.train_loss));
  }
  EXPECT_EQ(r.metrics.epochs.back().phi_total, cnx::phi_total(r.net));
  EXPECT_NEAR(r.metrics.epochs.back().layer_mass[2], r.net.weights[2].abs_sum(), 1e-12);
}

TEST(Train, DeterministicForSeed) {
  const auto a = cnx::train(cnx::init_random(kToySizes, 2), toy(), {1e-3, 0.0, 5e-4}, short_config(3, 9));
  const auto b = cnx::train(cnx::init_random(kToySizes, 2), toy(), {1e-3, 0.0, 5e-4}, short_config(3, 9));
  const auto c = cnx::train(cnx::init_random(kToySizes, 2), toy(), {1e-3, 0.0, 5e-4}, short_config(3, 10));
  EXPECT_EQ(cnx::serialize(a.net), cnx::serialize(b.net));
  for (std::size_t e = 0; e < 3; ++e) {
    EXPECT_EQ(a.metrics.epochs[e].train_loss, b.metrics.epochs[e].train_loss);
    EXPECT_EQ(a.metrics.epochs[e].phi_total, b.metrics.epochs[e].phi_total);
  }
  EXPECT_NE(cnx::serialize(a.net), cnx::serialize(c.net));
}

TEST(Train, ConnectivityRunRaisesPhiAndFindsRelevantInputs) {
  std::size_t concentrated = 0;
  for (std::uint64_t seed = 0; seed < 8; ++seed) {
    cnx::TrainConfig cfg;
    cfg.seed = seed;
    const auto init = cnx::init_random(kToySizes, seed);
    const auto r = cnx::train(init, toy(), {0.0, 0.1, 5e-4}, cfg);
    EXPECT_GT(cnx::phi_total(r.net), 10.0 * cnx::phi_total(init)) << "seed " << seed;
    for (const auto& rec : r.metrics.epochs)
      if (rec.epoch >= 10) {
        EXPECT_FALSE(rec.log_guard) << "seed " << seed << " epoch " << rec.epoch;
      }
    const auto p = cnx::node_connectivity(cnx::normalize(r.net));
    double relevant = 0.0, all = 0.0;
    for (std::size_t i = 0; i < 6; ++i) {
      all += p.a_out[0][i];
      if (i < 2) relevant += p.a_out[0][i];
    }
    if (relevant / all > 0.9) ++concentrated;
  }
  // qualitative: most runs route their connectivity through inputs 1 and 2
  EXPECT_GE(concentrated, 4u);
}

TEST(Train, RejectsBadConfigs) {
  const auto net = cnx::init_random(kToySizes, 0);
  EXPECT_THROW(cnx::train(net, toy(), {}, short_config(0)), std::invalid_argument);
  auto cfg = short_config(1);
  cfg.batch_size = 0;
  EXPECT_THROW(cnx::train(net, toy(), {}, cfg), std::invalid_argument);
  cfg = short_config(1);
  cfg.learning_rate = 0.0;
  EXPECT_THROW(cnx::train(net, toy(), {}, cfg), std::invalid_argument);
  EXPECT_THROW(cnx::train(cnx::init_random({4, 3, 1}, 0), toy(), {}, short_config(1)), cnx::DimensionError);
}

TEST(Train, OverflowIsAnErrorWithContext) {
  auto net = cnx::init_random(kToySizes, 0);
  for (auto& w : net.weights) w.fill(1e200);
  try {
    cnx::train(net, toy(), {}, short_config(1));
    FAIL() << "expected NumericError";
  } catch (const cnx::NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("epoch 0"), std::string::npos) << e.what();
  }
}

// --- fine-tuning -------------------------------------------------------------

cnx::LayeredNetwork masked_toy_net(std::uint64_t seed, double keep_fraction) {
  auto net = cnx::init_random(kToySizes, seed);
  cnx::Rng rng(seed + 100);
  cnx::PruneMask mask = cnx::full_mask(net);
  for (auto& m : mask.weights)
    for (double& v : m.values()) v = rng.uniform() < keep_fraction ? 1.0 : 0.0;
  return cnx::apply_mask(net, mask);
}

TEST(FineTune, MaskedWeightsStayZero) {
  const auto net = masked_toy_net(5, 0.5);
  cnx::TrainConfig cfg = short_config(50);
  cfg.learning_rate = 0.001;
  const auto r = cnx::fine_tune(net, toy(), {1e-3, 0.1, 5e-4}, cfg);
  for (std::size_t k = 0; k < net.weight_layers(); ++k)
    for (std::size_t i = 0; i < net.weights[k].size(); ++i)
      if (net.mask->weights[k][i] == 0.0) {
        EXPECT_EQ(r.net.weights[k][i], 0.0);
      }
  EXPECT_EQ(r.net.mask, net.mask);
}

TEST(FineTune, RequiresMask) {
  EXPECT_THROW(cnx::fine_tune(cnx::init_random(kToySizes, 0), toy(), {}, short_config(1)), cnx::StateError);
}

TEST(FineTune, DropsSparsityTermsByDefault) {
  const auto net = masked_toy_net(6, 0.7);
  const auto plain = cnx::fine_tune(net, toy(), {1e-2, 0.5, 5e-4}, short_config(2));
  const auto ref = cnx::train(net, toy(), {0.0, 0.0, 5e-4}, short_config(2));
  EXPECT_EQ(cnx::serialize(plain.net), cnx::serialize(ref.net));
  const auto kept = cnx::fine_tune(net, toy(), {1e-2, 0.5, 5e-4}, short_config(2), {.keep_sparsity_regularizers = true});
  EXPECT_NE(cnx::serialize(kept.net), cnx::serialize(ref.net));
}

TEST(FineTune, SinglePathThroughRelevantInputsRecovers) {
  // Keep inputs 1 and 2 into one hidden chain; 96% of the weights are gone.
  auto net = cnx::init_random(kToySizes, 7);
  cnx::PruneMask mask = cnx::full_mask(net);
  for (auto& m : mask.weights) m.fill(0.0);
  mask.weights[0](0, 0) = mask.weights[0](0, 1) = 1.0;
  mask.weights[1](0, 0) = mask.weights[2](0, 0) = mask.weights[3](0, 0) = 1.0;
  net.weights[0](0, 0) = net.weights[0](0, 1) = 0.5;
  net.weights[1](0, 0) = net.weights[2](0, 0) = net.weights[3](0, 0) = 0.5;
  net = cnx::apply_mask(net, mask);
  ASSERT_GT(cnx::phi_total(net), 0.0);
  cnx::TrainConfig cfg = short_config(50);
  cfg.learning_rate = 0.01;
  const auto r = cnx::fine_tune(net, toy(), {0.0, 0.0, 5e-4}, cfg);
  EXPECT_GE(r.metrics.epochs.back().test_acc, 0.95);
}

TEST(FineTune, CollapsedNetStaysAtMajorityClass) {
  auto net = cnx::init_random(kToySizes, 8);
  cnx::PruneMask mask = cnx::full_mask(net);
  for (auto& m : mask.weights) m.fill(0.0);
  mask.weights[0](0, 0) = mask.weights[0](0, 1) = 1.0;
  mask.weights[1](1, 1) = 1.0;  // leaves hidden node 0 of layer 1 with no outgoing edge
  mask.weights[2](0, 0) = mask.weights[3](0, 0) = 1.0;
  net = cnx::apply_mask(net, mask);
  ASSERT_EQ(cnx::phi_total(net), 0.0);
  cnx::TrainConfig cfg = short_config(50);
  cfg.learning_rate = 0.001;
  const auto r = cnx::fine_tune(net, toy(), {0.0, 0.0, 5e-4}, cfg);
  EXPECT_NEAR(r.metrics.epochs.back().test_acc, 0.5, 0.03);
  EXPECT_TRUE(r.metrics.collapse);
}

}  // namespace
