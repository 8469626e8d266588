#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "cnx/connectivity.hpp"
#include "cnx/network.hpp"
#include "cnx/properties.hpp"
#include "cnx/rng.hpp"
#include "support/finite_difference.hpp"

namespace {

using cnx::ConnectivityMode;
using cnx::LayeredNetwork;
using cnx::Matrix;

LayeredNetwork make_net(std::vector<std::size_t> sizes, std::vector<Matrix> weights) {
  LayeredNetwork net;
  net.sizes = std::move(sizes);
  net.weights = std::move(weights);
  for (std::size_t k = 0; k + 1 < net.sizes.size(); ++k) {
    net.biases.emplace_back(net.sizes[k + 1], 1, 0.0);
    net.activations.push_back(k + 2 == net.sizes.size() ? cnx::Activation::Sigmoid : cnx::Activation::Relu);
  }
  cnx::validate(net);
  return net;
}

LayeredNetwork uniform_222() { return make_net({2, 2, 2}, {Matrix(2, 2, 1.0), Matrix(2, 2, 1.0)}); }

// Path enumeration written independently of the library: every input-output
// path, product of |w| / layer mass along it.
double enumerate_paths(const LayeredNetwork& net) {
  std::vector<double> mass;
  for (const auto& w : net.weights) mass.push_back(w.abs_sum());
  double total = 0.0;
  std::vector<std::size_t> node(net.sizes.size());
  std::function<void(std::size_t, double)> walk = [&](std::size_t layer, double prod) {
    if (layer + 1 == net.sizes.size()) {
      total += prod;
      return;
    }
    for (std::size_t j = 0; j < net.sizes[layer + 1]; ++j) {
      const double w = std::abs(net.weights[layer](j, node[layer]));
      if (w == 0.0) continue;
      node[layer + 1] = j;
      walk(layer + 1, prod * w / mass[layer]);
    }
  };
  for (std::size_t i = 0; i < net.sizes[0]; ++i) {
    node[0] = i;
    walk(0, 1.0);
  }
  return total;
}

TEST(Normalize, AbsoluteValueOverLayerMass) {
  auto net = make_net({2, 1}, {Matrix{{1.0, -3.0}}});
  const auto view = cnx::normalize(net);
  EXPECT_DOUBLE_EQ(view.weight_theta(0)(0, 0), 0.25);
  EXPECT_DOUBLE_EQ(view.weight_theta(0)(0, 1), 0.75);
  EXPECT_FALSE(view.collapse_flag);
}

TEST(Normalize, SingleEdgeIsOne) {
  for (double w : {-7.5, 1e-9, 3.0}) {
    auto net = make_net({1, 1}, {Matrix{{w}}});
    EXPECT_DOUBLE_EQ(cnx::normalize(net).weight_theta(0)(0, 0), 1.0);
  }
}

TEST(Normalize, ZeroLayerGivesZerosAndFlag) {
  auto net = make_net({2, 2, 1}, {Matrix(2, 2, 0.0), Matrix{{1.0, 2.0}}});
  const auto view = cnx::normalize(net);
  EXPECT_EQ(view.weight_theta(0), Matrix(2, 2, 0.0));
  EXPECT_TRUE(view.collapse_flag);
  EXPECT_TRUE(view.edge_sets[0].zero_mass);
}

TEST(Normalize, SignalFlowKeepsMagnitudes) {
  auto net = make_net({2, 1}, {Matrix{{1.0, -3.0}}});
  const auto view = cnx::normalize(net, ConnectivityMode::SignalFlow);
  EXPECT_EQ(view.weight_theta(0), (Matrix{{1.0, 3.0}}));
}

TEST(Normalize, LayerSumsToOne) {
  cnx::Rng rng(5);
  for (int i = 0; i < 20; ++i) {
    const auto net = cnx::props::random_network(rng);
    for (const auto& e : cnx::normalize(net).edge_sets) {
      if (e.zero_mass) continue;
      EXPECT_NEAR(e.theta.sum(), 1.0, 1e-12);
      for (double v : e.theta.values()) EXPECT_GE(v, 0.0);
    }
  }
}

TEST(PhiTotal, SinglePathIsOne) {
  auto net = make_net({1, 1, 1}, {Matrix{{2.0}}, Matrix{{-0.3}}});
  EXPECT_DOUBLE_EQ(cnx::phi_total(net), 1.0);
  EXPECT_DOUBLE_EQ(cnx::phi_total_oracle(net), 1.0);
}

TEST(PhiTotal, Uniform222IsHalf) {
  EXPECT_DOUBLE_EQ(cnx::phi_total(uniform_222()), 0.5);
  EXPECT_DOUBLE_EQ(cnx::phi_total_oracle(uniform_222()), 0.5);
  EXPECT_DOUBLE_EQ(enumerate_paths(uniform_222()), 0.5);
}

TEST(PhiTotal, ZeroLayerIsZero) {
  auto net = make_net({3, 2, 2, 1}, {Matrix(2, 3, 1.0), Matrix(2, 2, 0.0), Matrix(1, 2, 1.0)});
  EXPECT_EQ(cnx::phi_total(net), 0.0);
  EXPECT_EQ(cnx::phi_total_oracle(net), 0.0);
}

TEST(PhiTotal, MatchesIndependentEnumeration) {
  cnx::Rng rng(17);
  for (int i = 0; i < 100; ++i) {
    const auto net = cnx::props::random_network(rng);
    EXPECT_NEAR(cnx::phi_total(net), enumerate_paths(net), 1e-12) << "net " << i;
  }
}

TEST(PhiTotal, OracleAgreesInBothModesWithScaling) {
  cnx::Rng rng(23);
  cnx::props::RandomNetOptions o;
  o.scaling_probability = 0.5;
  for (int i = 0; i < 100; ++i) {
    const auto net = cnx::props::random_network(rng, o);
    for (auto mode : {ConnectivityMode::Normalized, ConnectivityMode::SignalFlow}) {
      const double fast = cnx::phi_total(net, mode);
      EXPECT_NEAR(fast, cnx::phi_total_oracle(net, mode), 1e-10 * std::max(1.0, fast)) << "net " << i;
    }
  }
}

TEST(PhiTotal, NormalizedBound) {
  cnx::Rng rng(29);
  for (int i = 0; i < 200; ++i) {
    const double phi = cnx::phi_total(cnx::props::random_network(rng));
    EXPECT_GE(phi, 0.0);
    EXPECT_LE(phi, 1.0 + 1e-12);
  }
}

TEST(PhiTotal, ScaleInvariancePerLayer) {
  cnx::Rng rng(31);
  for (int i = 0; i < 30; ++i) {
    const auto net = cnx::props::random_network(rng);
    const auto base = cnx::node_connectivity(cnx::normalize(net));
    for (std::size_t k = 0; k < net.weight_layers(); ++k) {
      auto scaled = net;
      for (double& v : scaled.weights[k].values()) v *= 37.5;
      const auto p = cnx::node_connectivity(cnx::normalize(scaled));
      EXPECT_NEAR(p.phi_total, base.phi_total, 1e-12);
      for (std::size_t s = 0; s < p.a_in.size(); ++s) {
        EXPECT_LE(cnx::max_abs_diff(p.a_in[s], base.a_in[s]), 1e-12);
        EXPECT_LE(cnx::max_abs_diff(p.a_out[s], base.a_out[s]), 1e-12);
      }
    }
  }
}

TEST(Oracle, RefusesAbovePathGuard) {
  auto net = cnx::init_random({6, 6, 6, 6, 6}, 1);
  EXPECT_EQ(cnx::path_count(net), 7776u);
  EXPECT_THROW(cnx::phi_total_oracle(net, ConnectivityMode::Normalized, 1000), cnx::PathGuardError);
  EXPECT_NO_THROW(cnx::phi_total_oracle(net, ConnectivityMode::Normalized, 7776));
}

TEST(NodeConnectivity, Chain) {
  auto net = make_net({1, 1, 1}, {Matrix{{4.0}}, Matrix{{0.1}}});
  const auto p = cnx::node_connectivity(cnx::normalize(net));
  ASSERT_EQ(p.a_in.size(), 3u);
  for (std::size_t s = 0; s < 3; ++s) {
    EXPECT_DOUBLE_EQ(p.a_in[s][0], 1.0);
    EXPECT_DOUBLE_EQ(p.a_out[s][0], 1.0);
  }
}

TEST(NodeConnectivity, Uniform222HiddenIsHalf) {
  const auto p = cnx::node_connectivity(cnx::normalize(uniform_222()));
  EXPECT_EQ(p.a_in[1], Matrix(2, 1, 0.5));
  EXPECT_EQ(p.a_out[1], Matrix(2, 1, 0.5));
  EXPECT_EQ(p.a_in[0], Matrix(2, 1, 1.0));
  EXPECT_EQ(p.a_out[2], Matrix(2, 1, 1.0));
}

TEST(NodeConnectivity, DisconnectedHiddenNodeHasZeroInflow) {
  auto net = make_net({2, 2, 1}, {Matrix{{1.0, 1.0}, {0.0, 0.0}}, Matrix{{1.0, 1.0}}});
  const auto p = cnx::node_connectivity(cnx::normalize(net));
  EXPECT_EQ(p.a_in[1][1], 0.0);
  EXPECT_GT(p.a_in[1][0], 0.0);
}

TEST(NodeConnectivity, LayerSumConservation) {
  cnx::Rng rng(37);
  cnx::props::RandomNetOptions o;
  o.scaling_probability = 0.5;
  for (int i = 0; i < 50; ++i) {
    const auto net = cnx::props::random_network(rng, o);
    const auto view = cnx::normalize(net);
    const auto p = cnx::node_connectivity(view);
    EXPECT_NEAR(p.phi_total, cnx::phi_total(view), 1e-10);
    for (std::size_t e = 0; e < view.edge_sets.size(); ++e) {
      const auto& es = view.edge_sets[e];
      double s = 0.0;
      for (std::size_t j = 0; j < es.out_width(); ++j) {
        if (es.kind == cnx::EdgeSetKind::Diagonal) {
          s += p.a_in[e][j] * es.theta[j] * p.a_out[e + 1][j];
          continue;
        }
        for (std::size_t i = 0; i < es.in_width(); ++i) s += p.a_in[e][i] * es.theta(j, i) * p.a_out[e + 1][j];
      }
      EXPECT_NEAR(s, p.phi_total, 1e-8) << "net " << i << " edge set " << e;
    }
  }
}

TEST(Regularizer, LogValues) {
  auto path = make_net({1, 1, 1}, {Matrix{{2.0}}, Matrix{{1.0}}});
  EXPECT_DOUBLE_EQ(cnx::connect_regularizer(path).value, 0.0);
  auto r = cnx::connect_regularizer(uniform_222());
  EXPECT_NEAR(r.value, 0.6931471805599453, 1e-15);
  EXPECT_DOUBLE_EQ(r.raw_value, -0.5);
  EXPECT_DOUBLE_EQ(cnx::connect_regularizer(uniform_222(), cnx::RegularizerForm::Raw).value, -0.5);
}

TEST(Regularizer, CollapseIsGuardedNotThrown) {
  auto net = make_net({2, 2, 1}, {Matrix(2, 2, 0.0), Matrix{{1.0, 2.0}}});
  cnx::RegularizerResult r;
  ASSERT_NO_THROW(r = cnx::connect_regularizer(net));
  EXPECT_TRUE(r.collapse_warning);
  EXPECT_NEAR(r.value, -std::log(cnx::kLogGuard), 1e-9);
  EXPECT_TRUE(std::isfinite(r.value));
  for (const auto& g : r.weight_grads) EXPECT_TRUE(g.all_finite());
}

// d phi / d theta_ij = a_in(i) * a_out(j), checked against finite differences in theta.
TEST(Regularizer, PhiGradientInThetaIsProductOfNodeConnectivities) {
  cnx::Rng rng(41);
  for (int n = 0; n < 10; ++n) {
    const auto net = cnx::props::random_network(rng);
    auto view = cnx::normalize(net);
    const auto p = cnx::node_connectivity(view);
    for (std::size_t e = 0; e < view.edge_sets.size(); ++e) {
      Matrix& th = view.edge_sets[e].theta;
      const Matrix fd = cnx::testing::central_difference(th, [&] { return cnx::phi_total(view); }, 1e-6);
      for (std::size_t j = 0; j < th.rows(); ++j)
        for (std::size_t i = 0; i < th.cols(); ++i)
          EXPECT_NEAR(fd(j, i), p.a_in[e][i] * p.a_out[e + 1][j], 1e-8);
    }
  }
}

TEST(Regularizer, WeightGradientMatchesFiniteDifferences) {
  cnx::Rng rng(43);
  for (int n = 0; n < 10; ++n) {
    auto net = cnx::props::random_network(rng, {.min_depth = 3, .zero_probability = 0.0, .scaling_probability = 0.5});
    const auto r = cnx::connect_regularizer(net);
    for (std::size_t k = 0; k < net.weight_layers(); ++k) {
      const Matrix fd = cnx::testing::central_difference(net.weights[k], [&] { return cnx::connect_regularizer(net).value; });
      for (std::size_t i = 0; i < fd.size(); ++i)
        EXPECT_TRUE(cnx::testing::gradients_agree(r.weight_grads[k][i], fd[i])) << r.weight_grads[k][i] << " vs " << fd[i];
    }
    for (std::size_t s = 0; s < net.scaling.size(); ++s) {
      const Matrix fd =
          cnx::testing::central_difference(net.scaling[s].delta, [&] { return cnx::connect_regularizer(net).value; });
      for (std::size_t i = 0; i < fd.size(); ++i)
        EXPECT_TRUE(cnx::testing::gradients_agree(r.scaling_grads[s][i], fd[i]));
    }
  }
}

TEST(Collapse, HealthyNetIsNotCollapsed) {
  const auto rep = cnx::detect_collapse(cnx::init_random({6, 5, 5, 5, 1}, 2));
  EXPECT_FALSE(rep.collapsed);
  ASSERT_EQ(rep.layers.size(), 4u);
  EXPECT_EQ(rep.layers[1].surviving_edges, 25u);
}

TEST(Collapse, ZeroedLayerIsFlagged) {
  auto net = cnx::init_random({6, 5, 5, 5, 1}, 2);
  net.weights[2].fill(0.0);
  const auto rep = cnx::detect_collapse(net);
  EXPECT_TRUE(rep.collapsed);
  EXPECT_TRUE(rep.layers[2].zero_mass);
  EXPECT_EQ(rep.layers[2].surviving_edges, 0u);
  EXPECT_FALSE(rep.layers[1].zero_mass);
}

TEST(Collapse, SingleSurvivingPathIsConnected) {
  auto net = cnx::init_random({6, 5, 5, 5, 1}, 2);
  for (auto& w : net.weights) w.fill(0.0);
  net.weights[0](2, 1) = 0.4;
  net.weights[1](3, 2) = -1.2;
  net.weights[2](0, 3) = 0.7;
  net.weights[3](0, 0) = 2.0;
  const auto rep = cnx::detect_collapse(net);
  EXPECT_FALSE(rep.collapsed);
  EXPECT_DOUBLE_EQ(rep.phi_total, 1.0);
}

TEST(Collapse, MisalignedSurvivorsCollapse) {
  auto net = cnx::init_random({3, 3, 1}, 2);
  for (auto& w : net.weights) w.fill(0.0);
  net.weights[0](0, 0) = 1.0;  // into hidden node 0
  net.weights[1](0, 1) = 1.0;  // out of hidden node 1
  EXPECT_TRUE(cnx::detect_collapse(net).collapsed);
}

TEST(TheoremBound, ToyNetBoundIsNine) {
  const std::vector<std::size_t> toy{6, 5, 5, 5, 1};
  EXPECT_EQ(cnx::props::support_bound(toy), 9u);
  cnx::Rng rng(3);
  const auto m = cnx::props::construct_maximizer(toy, rng);
  EXPECT_NEAR(cnx::phi_total(m.net), 1.0, 1e-12);
  EXPECT_EQ(m.support, 9u);
}

TEST(TheoremBound, ConstructionsStayWithinBound) {
  const auto rep = cnx::props::bound_suite();
  EXPECT_EQ(rep.cases.size(), 45u);
  for (const auto& c : rep.cases) EXPECT_TRUE(c.passed) << c.id << ": " << c.detail;
}

TEST(TheoremConvergence, DescentReachesSinglePath) {
  cnx::props::ConvergenceOptions o;
  const auto run = cnx::props::descend_connectivity(cnx::init_random(o.sizes, 7), o);
  EXPECT_GE(run.phi, 0.999);
  for (auto c : run.middle_counts) EXPECT_LE(c, 2u);
}

}  // namespace
