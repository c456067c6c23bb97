#include <gtest/gtest.h>

#include <cmath>

#include "den/errors.hpp"
#include "den/regularizers.hpp"
#include "den/trainer.hpp"
#include "oracles.hpp"

using namespace den;

TEST(SoftThreshold, MatchesNumericProx) {
  SeededRng rng(11);
  for (int i = 0; i < 300; ++i) {
    const double v = 3.0 * rng.normal();
    const double thr = 2.0 * rng.uniform();
    EXPECT_NEAR(soft_threshold(v, thr), oracle::prox_l1(v, thr), 1e-8) << v << " " << thr;
  }
}

TEST(SoftThreshold, DeadZoneGivesPositiveZero) {
  for (double v : {0.5, -0.5, 0.0, -0.0, 1e-300}) {
    const double u = soft_threshold(v, 0.5);
    EXPECT_EQ(u, 0.0);
    EXPECT_FALSE(std::signbit(u)) << v;
  }
  EXPECT_EQ(soft_threshold(-2.0, 0.5), -1.5);
  EXPECT_EQ(soft_threshold(2.0, 0.0), 2.0);
  EXPECT_THROW(soft_threshold(1.0, -1e-9), ArgumentError);
}

TEST(GroupShrink, MatchesNumericProx) {
  SeededRng rng(12);
  for (int i = 0; i < 200; ++i) {
    std::vector<double> v(1 + rng.below(8));
    for (double& x : v) x = rng.normal();
    const double thr = 2.0 * rng.uniform();
    const auto u = group_shrink(v, thr);
    const auto ref = oracle::prox_group(v, thr);
    for (std::size_t j = 0; j < v.size(); ++j) EXPECT_NEAR(u[j], ref[j], 1e-8);
  }
}

TEST(GroupShrink, WholeGroupZeroInsideBall) {
  std::vector<double> v{0.3, -0.4};  // norm 0.5
  for (double x : group_shrink(v, 0.5)) EXPECT_EQ(x, 0.0);
  for (double x : group_shrink(std::vector<double>{0.0, 0.0}, 0.0)) EXPECT_EQ(x, 0.0);
  const auto u = group_shrink(v, 0.25);
  EXPECT_NEAR(u[0], 0.15, 1e-15);
  EXPECT_NEAR(u[1], -0.2, 1e-15);
  group_shrink_inplace(v, 1.0);
  EXPECT_EQ(v, (std::vector<double>{0.0, 0.0}));
  EXPECT_THROW(group_shrink(v, -1.0), ArgumentError);
}

TEST(Anchor, ValueAndGradient) {
  AnchorPenalty pen{{1.0, -2.0, 0.5}, 0.3, std::vector<double>{1.0, 0.0, 4.0}};
  std::vector<double> theta{2.0, 5.0, 0.0};
  EXPECT_NEAR(anchor_value(theta, pen), 0.3 * (1.0 + 0.0 + 4.0 * 0.25), 1e-15);
  auto g = anchor_grad(theta, pen);
  auto f = [&](std::span<const double> th) { return anchor_value(th, pen); };
  auto n = finite_diff_grad(f, theta, 1e-4);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(g[i], n[i], 1e-9);

  pen.fisher.reset();
  EXPECT_NEAR(anchor_value(theta, pen), 0.3 * (1.0 + 49.0 + 0.25), 1e-13);
  EXPECT_THROW(anchor_grad(std::vector<double>{1.0}, pen), ShapeError);
}

TEST(Anchor, ValidateRejectsBadInputs) {
  EXPECT_THROW((AnchorPenalty{{0.0}, -1.0, std::nullopt}.validate()), ArgumentError);
  EXPECT_THROW((AnchorPenalty{{0.0}, 1.0, std::vector<double>{-0.1}}.validate()), ArgumentError);
  EXPECT_THROW((AnchorPenalty{{0.0}, 1.0, std::vector<double>{1.0, 1.0}}.validate()), ShapeError);
  EXPECT_NO_THROW((AnchorPenalty{{0.0}, 0.0, std::vector<double>{0.0}}.validate()));
}

TEST(Fisher, HeadBiasOnSilentNetIsQuarter) {
  DenNetwork net(3, {4}, 1);
  for (double& w : net.layer(0).w.data()) w = 0.0;
  net.add_head(1, HeadInit::zero);
  Batch b = oracle::random_batch(2, 10, 3);
  auto f = fisher_diagonal(net, 1, b);
  ParamLayout layout(net, 1);
  EXPECT_DOUBLE_EQ(f[layout.head_bias()], 0.25);
  for (std::size_t i = 0; i < f.size(); ++i) {
    if (i != layout.head_bias()) { EXPECT_EQ(f[i], 0.0); }
  }
}

TEST(Fisher, MatchesSquaredPerExampleDifferences) {
  DenNetwork net = oracle::random_net(3, 4, {5, 3});
  Batch b = oracle::random_batch(3, 6, 4);
  const auto fisher = fisher_diagonal(net, 1, b);
  ParamLayout layout(net, 1);
  std::vector<std::size_t> params;
  for (std::size_t i = 0; i < layout.size(); ++i)
    if (layout.is_parameter(i)) params.push_back(i);
  std::vector<double> ref(params.size(), 0.0);
  for (std::size_t n = 0; n < b.size(); ++n) {
    Batch one{Matrix(1, 4, std::vector<double>(b.features.row(n).begin(), b.features.row(n).end())), {b.labels[n]}};
    auto f = [&](std::span<const double> th) {
      DenNetwork c = net;
      layout.scatter(c, params, th);
      return data_loss(c, one, 1);
    };
    const auto g = finite_diff_grad(f, layout.gather(net, params), 1e-6);
    for (std::size_t p = 0; p < params.size(); ++p) ref[p] += g[p] * g[p] / static_cast<double>(b.size());
  }
  for (std::size_t p = 0; p < params.size(); ++p) EXPECT_NEAR(fisher[params[p]], ref[p], 1e-7);
  EXPECT_THROW(fisher_diagonal(net, 1, Batch{Matrix(0, 4), {}}), ArgumentError);
}
