#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "den/errors.hpp"
#include "den/lifelong.hpp"
#include "oracles.hpp"

using namespace den;

namespace {

std::vector<TaskDataset> small_tasks(std::uint64_t seed, int T = 4) {
  TaskFamilyConfig c;
  c.num_tasks = T;
  c.dim = 8;
  c.n = {60, 20, 60};
  c.seed = seed;
  return generate_tasks(c);
}

HyperParams fast_hp() {
  HyperParams hp;
  hp.mu = 0.01;
  hp.lambda = 1.0;
  hp.sigma = 0.5;
  hp.k = 3;
  hp.train.max_epochs = 80;
  return hp;
}

std::vector<std::vector<double>> test_predictions(const DenNetwork& net, const std::vector<TaskDataset>& tasks,
                                                  int upto) {
  std::vector<std::vector<double>> out;
  for (int s = 1; s <= upto; ++s) out.push_back(predict(net, tasks[s - 1].batch(Split::test).features, s));
  return out;
}

// Hand-built stage-2 network over 3 inputs and hidden widths {3, 2}:
//   a <- x0,  b <- x1 x2,  c has no inputs;  A <- b,  B <- a c.
DenNetwork wired_net() {
  DenNetwork net(3, {3, 2}, 1);
  Matrix& w0 = net.layer(0).w;
  w0 = Matrix(3, 3, {0.5, 0.0, 0.0,
                     0.0, 0.4, 0.0,
                     0.0, -0.3, 0.0});
  net.layer(1).w = Matrix(3, 2, {0.0, 0.8,
                                 0.6, 0.0,
                                 0.0, 0.2});
  net.add_head(1, HeadInit::random);
  net.snapshot_commit();
  return net;
}

}  // namespace

TEST(HyperParams, Validation) {
  EXPECT_NO_THROW(HyperParams{}.validate());
  HyperParams hp;
  hp.mu = -1;
  EXPECT_THROW(hp.validate(), ArgumentError);
  hp = {};
  hp.tau = 0.0;
  EXPECT_THROW(hp.validate(), ArgumentError);
  hp = {};
  hp.k = 0;
  EXPECT_THROW(hp.validate(), ArgumentError);
  hp = {};
  hp.sigma = std::numeric_limits<double>::infinity();
  EXPECT_NO_THROW(hp.validate());
}

TEST(FirstTask, StrongL1ZeroesEveryWeightButNotBiases) {
  auto tasks = small_tasks(1);
  DenNetwork net(8, {6, 4}, 1);
  HyperParams hp = fast_hp();
  hp.mu = 10.0;
  auto rep = den_first_task(net, tasks[0], hp);
  for (const auto& l : net.layers())
    for (double w : l.w.data()) EXPECT_EQ(w, 0.0);
  for (const auto& [id, w] : net.head(1).weights) EXPECT_EQ(w, 0.0);
  EXPECT_NE(net.head(1).bias, 0.0);
  EXPECT_EQ(net.stage(), 2);
  EXPECT_EQ(rep.capacity_after, net.capacity());
  EXPECT_THROW(den_first_task(net, tasks[0], hp), SequencingError);
}

TEST(HeadFit, LeavesBodyAloneAndRecordsFit) {
  auto tasks = small_tasks(2);
  DenNetwork net(8, {6, 4}, 2);
  den_first_task(net, tasks[0], fast_hp());
  const auto before = net.state();
  InitBook book;
  const TaskHead head = fit_output_head(net, tasks[1].batch(Split::train), 2, fast_hp(), &book);
  EXPECT_EQ(net.layers(), before.layers);
  EXPECT_EQ(net.head(1), before.heads.at(1));
  EXPECT_EQ(book.at(ParamKey::head_bias(2)), head.bias);
  for (const auto& [id, w] : head.weights) EXPECT_EQ(book.at(ParamKey::head_weight(2, id)), w);
  EXPECT_THROW(fit_output_head(net, tasks[1].batch(Split::train), 3, fast_hp()), SequencingError);
}

TEST(Selection, FollowsNonzeroSnapshotEdges) {
  DenNetwork net = wired_net();
  // Current weights differ from the snapshot; the search must ignore them.
  net.layer(1).w(0, 0) = 9.0;
  const UnitId a = net.units(0)[0].id, b = net.units(0)[1].id, A = net.units(1)[0].id, B = net.units(1)[1].id;
  net.add_head(2, HeadInit::zero);
  net.head(2).weights[A] = 0.7;

  const auto sel = select_subnetwork(net, net.head(2));
  EXPECT_EQ(sel.units[1], std::vector<UnitId>{A});
  EXPECT_EQ(sel.units[0], std::vector<UnitId>{b});
  EXPECT_EQ(sel.inputs, (std::vector<std::size_t>{1, 2}));
  EXPECT_FALSE(sel.contains(0, a));
  std::vector<ParamKey> want{ParamKey::weight(0, 1, b), ParamKey::weight(0, 2, b), ParamKey::bias(0, b),
                             ParamKey::weight(1, b, A), ParamKey::bias(1, A),      ParamKey::head_weight(2, A),
                             ParamKey::head_weight(2, B), ParamKey::head_bias(2)};
  std::sort(want.begin(), want.end());
  EXPECT_EQ(sel.keys, want);
  EXPECT_EQ(sel.unit_count(), 2u);
}

TEST(Selection, EmptyHeadSelectsNoUnits) {
  DenNetwork net = wired_net();
  net.add_head(2, HeadInit::zero);
  const auto sel = select_subnetwork(net, net.head(2));
  EXPECT_EQ(sel.unit_count(), 0u);
  EXPECT_TRUE(sel.inputs.empty());
  EXPECT_EQ(sel.keys.size(), 3u);  // the head itself
}

TEST(Selection, EverySelectedUnitFeedsTheLayerAbove) {
  for (std::uint64_t seed = 1; seed <= 4; ++seed) {
    auto tasks = small_tasks(seed);
    DenNetwork net(8, {10, 6}, seed);
    den_first_task(net, tasks[0], fast_hp());
    const TaskHead head = fit_output_head(net, tasks[1].batch(Split::train), 2, fast_hp());
    const auto sel = select_subnetwork(net, head);
    const auto& snap = net.snapshot();
    for (UnitId id : sel.units[1]) EXPECT_NE(head.weights.at(id), 0.0);
    for (UnitId id : sel.units[0]) {
      const std::size_t row = *snap.position(0, id);
      bool feeds = false;
      for (UnitId up : sel.units[1]) feeds = feeds || snap.layers[1].w(row, *snap.position(1, up)) != 0.0;
      EXPECT_TRUE(feeds);
    }
  }
}

TEST(SelectiveRetrain, OnlySelectedParametersMove) {
  auto tasks = small_tasks(3);
  DenNetwork net(8, {10, 6}, 3);
  den_first_task(net, tasks[0], fast_hp());
  const TaskHead head = fit_output_head(net, tasks[1].batch(Split::train), 2, fast_hp());
  const auto sel = select_subnetwork(net, head);
  const DenNetwork before = net;
  selective_retrain(net, tasks[1].batch(Split::train), sel, fast_hp());
  const std::set<ParamKey> allowed(sel.keys.begin(), sel.keys.end());
  const ParamLayout layout(before, 2);
  std::size_t moved = 0;
  for (std::size_t i = 0; i < layout.size(); ++i) {
    if (!layout.is_parameter(i)) continue;
    const ParamKey k = layout.key(i);
    if (*lookup_param(net, k) != *lookup_param(before, k)) {
      EXPECT_TRUE(allowed.count(k));
      ++moved;
    }
  }
  EXPECT_GT(moved, 0u);
  EXPECT_EQ(net.head(1), before.head(1));
}

TEST(Expansion, HugeGroupPenaltyPrunesEverything) {
  auto tasks = small_tasks(4);
  DenNetwork net(8, {6, 4}, 4);
  HyperParams hp = fast_hp();
  den_first_task(net, tasks[0], hp);
  fit_output_head(net, tasks[1].batch(Split::train), 2, hp);
  const DenNetwork before = net;
  hp.gamma = 1e6;
  auto rep = dynamic_expand(net, tasks[1].batch(Split::train), 2, hp);
  EXPECT_EQ(rep.total_surviving(), 0);
  EXPECT_EQ(rep.pruned, (std::vector<int>{3, 3}));
  EXPECT_EQ(net.layers(), before.layers());
  EXPECT_EQ(net.heads(), before.heads());
  for (int s : {1, 2}) EXPECT_EQ(predict(net, tasks[s - 1].batch(Split::test).features, s),
                                 predict(before, tasks[s - 1].batch(Split::test).features, s));
}

TEST(Expansion, ZeroGroupPenaltyKeepsUnitsStampedNow) {
  auto tasks = small_tasks(4);
  DenNetwork net(8, {6, 4}, 4);
  HyperParams hp = fast_hp();
  hp.mu = 0.0;
  hp.gamma = 0.0;
  den_first_task(net, tasks[0], hp);
  fit_output_head(net, tasks[1].batch(Split::train), 2, hp);
  const auto old_preds = predict(net, tasks[0].batch(Split::test).features, 1);
  auto rep = dynamic_expand(net, tasks[1].batch(Split::train), 2, hp);
  EXPECT_EQ(rep.total_surviving(), 6);
  EXPECT_EQ(net.width(0), 9u);
  for (std::size_t j = 6; j < 9; ++j) EXPECT_EQ(net.units(0)[j].timestamp, 2);
  EXPECT_EQ(predict(net, tasks[0].batch(Split::test).features, 1), old_preds);
}

TEST(Drift, NormOfIncomingChangeIncludingBias) {
  DenNetwork net = wired_net();
  net.layer(0).w(0, 1) += 3.0;
  net.layer(0).b[1] += 4.0;
  auto rep = compute_drift(net, 4.9);
  ASSERT_EQ(rep.entries.size(), 5u);
  for (const auto& e : rep.entries) {
    if (e.layer == 0 && e.unit == net.units(0)[1].id) {
      EXPECT_DOUBLE_EQ(e.rho, 5.0);
      EXPECT_TRUE(e.split);
    } else {
      EXPECT_EQ(e.rho, 0.0);
      EXPECT_FALSE(e.split);
    }
  }
  EXPECT_EQ(compute_drift(net, 5.1).split_count(), 0u);
  EXPECT_EQ(compute_drift(net, 5.0).split_count(), 0u);
}

TEST(Split, InfiniteSigmaNeverSplits) {
  auto tasks = small_tasks(5);
  HyperParams hp = fast_hp();
  hp.sigma = std::numeric_limits<double>::infinity();
  DenNetwork net(8, {6, 4}, 5);
  for (int t = 1; t <= 3; ++t) EXPECT_EQ(den_observe(net, tasks[t - 1], hp).drift.split_count(), 0u);
  for (std::size_t h = 0; h < net.depth(); ++h)
    for (const auto& u : net.units(h)) EXPECT_NE(u.origin, UnitOrigin::split_copy);
}

TEST(Split, ZeroSigmaSplitsEveryDriftedUnitAndPreservesOldTasks) {
  auto tasks = small_tasks(6);
  HyperParams hp = fast_hp();
  hp.sigma = 0.0;
  DenNetwork net(8, {6, 4}, 6);
  den_observe(net, tasks[0], hp);
  for (int t = 2; t <= 3; ++t) {
    const auto before = test_predictions(net, tasks, t - 1);
    auto rep = den_observe(net, tasks[t - 1], hp);
    for (const auto& e : rep.drift.entries) EXPECT_EQ(e.split, e.rho > 0.0);
    EXPECT_GT(rep.drift.split_count(), 0u);
    const auto after = test_predictions(net, tasks, t - 1);
    for (std::size_t s = 0; s < before.size(); ++s)
      for (std::size_t i = 0; i < before[s].size(); ++i) EXPECT_NEAR(after[s][i], before[s][i], 1e-9);
  }
}

TEST(Observe, SequencingAndReports) {
  auto tasks = small_tasks(7);
  DenNetwork net(8, {6, 4}, 7);
  EXPECT_THROW(den_observe(net, tasks[1], fast_hp()), SequencingError);
  den_observe(net, tasks[0], fast_hp());
  auto rep = den_observe(net, tasks[1], fast_hp());
  EXPECT_EQ(rep.task, 2);
  EXPECT_EQ(rep.capacity_after, net.capacity());
  EXPECT_EQ(net.stage(), 3);
  EXPECT_TRUE(net.has_head(2));
  EXPECT_THROW(den_observe(net, tasks[1], fast_hp()), SequencingError);
}

TEST(Observe, LowTauForcesExpansion) {
  auto tasks = small_tasks(8);
  HyperParams hp = fast_hp();
  hp.tau = 1e-9;
  DenNetwork net(8, {6, 4}, 8);
  den_observe(net, tasks[0], hp);
  auto rep = den_observe(net, tasks[1], hp);
  EXPECT_TRUE(rep.expanded);
  EXPECT_EQ(rep.expansion.added, (std::vector<int>{3, 3}));
  std::size_t stamped = 0;
  for (std::size_t h = 0; h < net.depth(); ++h)
    for (const auto& u : net.units(h)) stamped += u.origin == UnitOrigin::expanded;
  EXPECT_EQ(stamped, static_cast<std::size_t>(rep.expansion.total_surviving()));
}
