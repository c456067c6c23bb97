#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "den/errors.hpp"
#include "den/trainer.hpp"
#include "oracles.hpp"

using namespace den;

namespace {

DenNetwork grown_net(std::uint64_t seed) {
  DenNetwork net = oracle::random_net(seed, 6, {5, 4});
  net.snapshot_commit();
  net.add_head(2, HeadInit::random);
  SeededRng rng(seed + 100);
  net.add_units(0, 2, rng);
  net.add_units(1, 3, rng);
  return net;
}

// 1/2 ||theta - target||^2
SmoothFn quadratic(std::vector<double> target) {
  return [target](std::span<const double> th, std::span<double> g) {
    double v = 0.0;
    for (std::size_t i = 0; i < th.size(); ++i) {
      g[i] = th[i] - target[i];
      v += 0.5 * g[i] * g[i];
    }
    return SmoothValue{v, v};
  };
}

}  // namespace

TEST(Loss, BceMatchesDirectFormula) {
  for (double s : {-4.0, -0.3, 0.0, 0.8, 5.0}) {
    const double p = 1.0 / (1.0 + std::exp(-s));
    EXPECT_NEAR(bce_loss(s, 1), -std::log(p), 1e-12);
    EXPECT_NEAR(bce_loss(s, 0), -std::log(1.0 - p), 1e-12);
    EXPECT_NEAR(bce_score_grad(s, 1), p - 1.0, 1e-15);
    EXPECT_NEAR(bce_score_grad(s, 0), p, 1e-15);
  }
  EXPECT_NEAR(bce_loss(-800.0, 1), 800.0, 1e-9);
  EXPECT_TRUE(std::isfinite(bce_loss(800.0, 0)));
}

TEST(Gradient, BackpropMatchesFiniteDifferences) {
  for (std::uint64_t seed = 1; seed <= 6; ++seed) {
    DenNetwork net = oracle::random_net(seed, 7, {6, 5});
    auto r = oracle::check_gradient(net, oracle::random_batch(seed, 10, 7), 1);
    EXPECT_LT(r.max_rel, 1e-6) << "seed " << seed << " checked " << r.checked << " excluded " << r.excluded;
    EXPECT_GT(r.checked, 0u);
  }
}

TEST(Gradient, MaskedNetworkMatchesFiniteDifferences) {
  for (std::uint64_t seed = 1; seed <= 4; ++seed) {
    DenNetwork net = grown_net(seed);
    Batch b = oracle::random_batch(seed, 10, 6);
    for (TaskId t : {1, 2}) EXPECT_LT(oracle::check_gradient(net, b, t).max_rel, 1e-6);
    // Units stamped 2 receive no gradient from task 1.
    ParamLayout layout(net, 1);
    auto g = full_gradient(net, b, 1, layout);
    for (std::size_t h = 0; h < net.depth(); ++h)
      for (std::size_t j = 0; j < net.width(h); ++j) {
        if (net.units(h)[j].timestamp == 2) { EXPECT_EQ(g[layout.bias(h, j)], 0.0); }
      }
  }
}

TEST(Gradient, RestrictedBackpropAgreesWithFull) {
  DenNetwork net = grown_net(3);
  Batch b = oracle::random_batch(3, 8, 6);
  ParamLayout layout(net, 2);
  const auto full = full_gradient(net, b, 2, layout);
  std::vector<std::size_t> pick{layout.weight(1, 2, 1), layout.bias(0, 3), layout.head_bias()};
  TrainableSet set(layout, pick);
  const auto part = backprop(net, b, 2, set);
  for (std::size_t p = 0; p < set.size(); ++p) EXPECT_EQ(part[p], full[set.indices()[p]]);
  EXPECT_EQ(set.lowest_layer(layout), 0u);
  EXPECT_THROW(full_gradient(net, Batch{Matrix(0, 6), {}}, 2, layout), ArgumentError);
}

TEST(Layout, KeysRoundTripAndHeadSlots) {
  DenNetwork net = grown_net(2);
  ParamLayout layout(net, 1);
  std::size_t params = 0;
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const ParamKey k = layout.key(i);
    if (layout.is_parameter(i)) {
      EXPECT_EQ(layout.index(k), i);
      ++params;
      EXPECT_TRUE(lookup_param(net, k).has_value());
    }
  }
  // Head 1 does not read the three top units stamped 2.
  EXPECT_EQ(layout.size() - params, 3u);
  EXPECT_THROW(TrainableSet(layout, {layout.size()}), ArgumentError);
  EXPECT_THROW(TrainableSet(layout, {layout.head_weight(net.width(1) - 1)}), ArgumentError);
  EXPECT_EQ(TrainableSet::all(layout).size(), params);
  EXPECT_FALSE(lookup_param(net.snapshot(), ParamKey::head_bias(2)).has_value());
}

TEST(Solver, L1FixedPoint) {
  // argmin 1/2 (x - 3)^2 + |x| is 2.
  ProxTerms prox{{0}, 1.0, {}, 0.0};
  TrainConfig cfg;
  cfg.max_epochs = 2000;
  cfg.tol = 0.0;
  auto r = proximal_gradient(quadratic({3.0}), prox, {0.0}, cfg);
  EXPECT_NEAR(r.theta[0], 2.0, 1e-10);
  auto z = proximal_gradient(quadratic({0.7}), prox, {5.0}, cfg);
  EXPECT_EQ(z.theta[0], 0.0);
}

TEST(Solver, GroupFixedPointIsBlockShrink) {
  std::vector<double> v{1.0, -2.0, 2.0};  // norm 3
  ProxTerms prox{{}, 0.0, {{0, 1, 2}}, 1.5};
  TrainConfig cfg;
  cfg.max_epochs = 2000;
  cfg.tol = 0.0;
  auto r = proximal_gradient(quadratic(v), prox, {0.0, 0.0, 0.0}, cfg);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(r.theta[i], 0.5 * v[i], 1e-10);
  ProxTerms strong{{}, 0.0, {{0, 1, 2}}, 3.5};
  auto z = proximal_gradient(quadratic(v), strong, {1.0, 1.0, 1.0}, cfg);
  for (double x : z.theta) EXPECT_EQ(x, 0.0);
}

TEST(Solver, HalvingKeepsObjectiveMonotone) {
  TrainConfig cfg;
  cfg.learning_rate = 50.0;
  cfg.max_epochs = 200;
  auto r = proximal_gradient(quadratic({1.0, -4.0}), ProxTerms{{0, 1}, 0.1, {}, 0.0}, {10.0, 10.0}, cfg);
  EXPECT_LT(r.learning_rate, 50.0);
  for (std::size_t i = 1; i < r.history.size(); ++i) EXPECT_LE(r.history[i], r.history[i - 1] + 1e-12);
}

TEST(Solver, NonFiniteObjectiveDiverges) {
  SmoothFn f = [](std::span<const double> th, std::span<double> g) {
    g[0] = -1.0;
    const double v = th[0] == 0.0 ? 1.0 : std::numeric_limits<double>::quiet_NaN();
    return SmoothValue{v, v};
  };
  EXPECT_THROW(proximal_gradient(f, {}, {0.0}, TrainConfig{}), TrainingDiverged);
  EXPECT_THROW(proximal_gradient(f, {}, {1.0}, TrainConfig{}), TrainingDiverged);
}

TEST(Solver, ConfigValidation) {
  EXPECT_THROW((TrainConfig{0.0, 10, 1e-5, 10}.validate()), ArgumentError);
  EXPECT_THROW((TrainConfig{0.1, 0, 1e-5, 10}.validate()), ArgumentError);
  EXPECT_THROW((TrainConfig{0.1, 10, -1.0, 10}.validate()), ArgumentError);
}

TEST(Train, FrozenCoordinatesAreUntouched) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    DenNetwork net = grown_net(seed);
    Batch b = oracle::random_batch(seed, 20, 6);
    ParamLayout layout(net, 2);
    SeededRng rng(seed);
    std::vector<std::size_t> pick;
    for (std::size_t i = 0; i < layout.size(); ++i)
      if (layout.is_parameter(i) && rng.uniform() < 0.3) pick.push_back(i);
    TrainableSet set(layout, pick);
    const auto before = layout.gather(net);
    const NetworkState snap_before = net.state();
    TrainConfig cfg;
    cfg.max_epochs = 50;
    ProxSpec prox;
    prox.l1 = {set.indices().begin(), set.indices().end()};
    prox.l1_strength = 1e-3;
    auto r = train(net, b, 2, set, {}, prox, cfg);
    const auto after = layout.gather(net);
    bool moved = false;
    for (std::size_t i = 0; i < layout.size(); ++i) {
      if (!set.contains(i)) EXPECT_EQ(after[i], before[i]) << i;
      else moved = moved || after[i] != before[i];
    }
    EXPECT_TRUE(moved);
    EXPECT_EQ(net.head(1), snap_before.heads.at(1));
    EXPECT_EQ(net.snapshot(), snap_before.snapshot_prev);
    EXPECT_LE(r.data_loss, data_loss(DenNetwork(snap_before), b, 2));
  }
}

TEST(Train, StrongAnchorHoldsParameters) {
  DenNetwork net = oracle::random_net(5, 4, {6});
  Batch b = oracle::random_batch(5, 30, 4);
  ParamLayout layout(net, 1);
  TrainableSet set = TrainableSet::all(layout);
  const auto anchor = layout.gather(net, set.indices());
  TrainConfig cfg;
  cfg.learning_rate = 1e-4;
  cfg.max_epochs = 100;
  train(net, b, 1, set, {AnchorPenalty{anchor, 1e4, std::nullopt}}, {}, cfg);
  const auto after = layout.gather(net, set.indices());
  for (std::size_t i = 0; i < after.size(); ++i) EXPECT_NEAR(after[i], anchor[i], 1e-3);
  EXPECT_THROW(train(net, b, 1, set, {AnchorPenalty{{1.0}, 1.0, std::nullopt}}, {}, cfg), ShapeError);
}
