#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <set>

#include "den/errors.hpp"
#include "den/lifelong.hpp"

namespace den {

void HyperParams::validate() const {
  if (!(mu >= 0.0) || !(gamma >= 0.0) || !(lambda >= 0.0)) throw ArgumentError("mu, gamma and lambda must be >= 0");
  if (!(tau > 0.0)) throw ArgumentError("tau must be > 0");
  if (!(sigma >= 0.0)) throw ArgumentError("sigma must be >= 0");
  if (k < 1) throw ArgumentError("k must be >= 1");
  train.validate();
}

bool SubnetworkSelection::contains(std::size_t layer, UnitId id) const {
  if (layer >= units.size()) return false;
  return std::find(units[layer].begin(), units[layer].end(), id) != units[layer].end();
}

std::size_t SubnetworkSelection::unit_count() const {
  std::size_t n = 0;
  for (const auto& u : units) n += u.size();
  return n;
}

std::size_t DriftReport::split_count() const {
  return static_cast<std::size_t>(std::count_if(entries.begin(), entries.end(), [](const auto& e) { return e.split; }));
}

int ExpansionReport::total_surviving() const {
  int n = 0;
  for (int s : surviving) n += s;
  return n;
}

namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point since) {
  return std::chrono::duration<double, std::milli>(Clock::now() - since).count();
}

std::vector<std::size_t> weight_indices(const ParamLayout& layout, const TrainableSet& set) {
  std::vector<std::size_t> out;
  for (std::size_t i : set.indices()) {
    const auto k = layout.key(i).kind;
    if (k == ParamKey::Kind::weight || k == ParamKey::Kind::head_weight) out.push_back(i);
  }
  return out;
}

// Squared-l2 decay toward zero on weights only.
AnchorPenalty weight_decay(const ParamLayout& layout, const TrainableSet& set, double strength) {
  AnchorPenalty pen;
  pen.anchor.assign(set.size(), 0.0);
  pen.strength = strength;
  std::vector<double> f(set.size(), 0.0);
  for (std::size_t p = 0; p < set.size(); ++p) {
    const auto k = layout.key(set.indices()[p]).kind;
    f[p] = (k == ParamKey::Kind::weight || k == ParamKey::Kind::head_weight) ? 1.0 : 0.0;
  }
  pen.fisher = std::move(f);
  return pen;
}

void record_init(const DenNetwork& net, const ParamLayout& layout, std::span<const std::size_t> indices,
                 InitBook* book) {
  if (!book) return;
  for (std::size_t i : indices) {
    const ParamKey key = layout.key(i);
    if (!book->count(key)) (*book)[key] = *lookup_param(net, key);
  }
}

// Every parameter incident to a unit: incoming column, bias, outgoing row
// (or head-t entry at the top layer).
void incident_indices(const DenNetwork& net, const ParamLayout& layout, std::size_t layer, UnitId id,
                      bool outgoing, std::vector<std::size_t>& out) {
  const std::size_t col = net.require_position(layer, id);
  for (std::size_t r = 0; r < net.layer(layer).w.rows(); ++r) out.push_back(layout.weight(layer, r, col));
  out.push_back(layout.bias(layer, col));
  if (!outgoing) return;
  if (layer + 1 < net.depth()) {
    for (std::size_t c = 0; c < net.width(layer + 1); ++c) out.push_back(layout.weight(layer + 1, col, c));
  } else {
    const std::size_t idx = layout.head_weight(col);
    if (layout.is_parameter(idx)) out.push_back(idx);
  }
}

}  // namespace

StageReport den_first_task(DenNetwork& net, const TaskDataset& data, const HyperParams& hp) {
  hp.validate();
  if (net.stage() != 1 || data.task_id != 1) throw SequencingError("first task must be task 1 at stage 1");
  const auto start = Clock::now();
  StageReport rep;
  rep.task = 1;
  rep.capacity_before = net.capacity();
  net.add_head(1, HeadInit::random);
  const Batch batch = data.batch(Split::train);
  const ParamLayout layout(net, 1);
  const TrainableSet all = TrainableSet::all(layout);
  ProxSpec prox;
  prox.l1 = weight_indices(layout, all);
  prox.l1_strength = hp.mu;
  const TrainResult res = train(net, batch, 1, all, {}, prox, hp.train);
  rep.loss = rep.final_loss = res.data_loss;
  rep.capacity_after = net.capacity();
  net.snapshot_commit();
  rep.wall_ms = elapsed_ms(start);
  return rep;
}

const TaskHead& fit_output_head(DenNetwork& net, const Batch& batch, TaskId task, const HyperParams& hp,
                                InitBook* book) {
  if (task < 2 || task != net.stage()) throw SequencingError("fit_output_head: task must equal the current stage (>= 2)");
  net.add_head(task, HeadInit::zero);
  const ParamLayout layout(net, task);
  std::vector<std::size_t> idx;
  for (std::size_t p = 0; p < net.width(net.top()); ++p) {
    if (layout.is_parameter(layout.head_weight(p))) idx.push_back(layout.head_weight(p));
  }
  const std::vector<std::size_t> weights = idx;
  idx.push_back(layout.head_bias());
  const TrainableSet set(layout, idx);
  ProxSpec prox;
  prox.l1 = weights;
  prox.l1_strength = hp.mu;
  train(net, batch, task, set, {}, prox, hp.train);
  // The fitted head is head t's starting point for the rest of the stage.
  record_init(net, layout, idx, book);
  return net.head(task);
}

SubnetworkSelection select_subnetwork(const DenNetwork& net, const TaskHead& head) {
  SubnetworkSelection sel;
  sel.task = head.task;
  const std::size_t depth = net.depth();
  const bool use_snap = !net.snapshot().empty();
  auto weights_of = [&](std::size_t layer) -> const LayerWeights& {
    return use_snap ? net.snapshot().layers.at(layer) : net.layer(layer);
  };
  auto meta_of = [&](std::size_t layer) -> const std::vector<UnitMeta>& {
    return use_snap ? net.snapshot().unit_meta.at(layer) : net.units(layer);
  };

  // Selected positions per layer, in the reference (snapshot) ordering.
  std::vector<std::vector<std::uint8_t>> chosen(depth);
  for (std::size_t h = 0; h < depth; ++h) chosen[h].assign(meta_of(h).size(), 0);
  for (const auto& [id, w] : head.weights) {
    if (w == 0.0) continue;
    const auto& top = meta_of(depth - 1);
    for (std::size_t p = 0; p < top.size(); ++p) {
      if (top[p].id == id) chosen[depth - 1][p] = 1;
    }
  }
  for (std::size_t h = depth - 1; h > 0; --h) {
    const Matrix& w = weights_of(h).w;
    for (std::size_t j = 0; j < w.cols(); ++j) {
      if (!chosen[h][j]) continue;
      for (std::size_t i = 0; i < w.rows(); ++i) {
        if (w(i, j) != 0.0) chosen[h - 1][i] = 1;
      }
    }
  }
  std::vector<std::uint8_t> inputs(net.input_dim(), 0);
  {
    const Matrix& w = weights_of(0).w;
    for (std::size_t j = 0; j < w.cols(); ++j) {
      if (!chosen[0][j]) continue;
      for (std::size_t i = 0; i < w.rows(); ++i) {
        if (w(i, j) != 0.0) inputs[i] = 1;
      }
    }
  }

  sel.units.resize(depth);
  for (std::size_t h = 0; h < depth; ++h) {
    for (std::size_t p = 0; p < chosen[h].size(); ++p) {
      if (chosen[h][p]) sel.units[h].push_back(meta_of(h)[p].id);
    }
  }
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (inputs[i]) sel.inputs.push_back(i);
  }

  for (std::size_t h = 0; h < depth; ++h) {
    for (UnitId to : sel.units[h]) {
      if (h == 0) {
        for (std::size_t f : sel.inputs) sel.keys.push_back(ParamKey::weight(0, f, to));
      } else {
        for (UnitId from : sel.units[h - 1]) sel.keys.push_back(ParamKey::weight(h, from, to));
      }
      sel.keys.push_back(ParamKey::bias(h, to));
    }
  }
  for (const auto& [id, w] : head.weights) sel.keys.push_back(ParamKey::head_weight(head.task, id));
  sel.keys.push_back(ParamKey::head_bias(head.task));
  std::sort(sel.keys.begin(), sel.keys.end());
  return sel;
}

TrainableSet trainable_set(const DenNetwork& net, const ParamLayout& layout, const std::vector<ParamKey>& keys) {
  (void)net;
  std::vector<std::size_t> idx;
  idx.reserve(keys.size());
  for (const auto& k : keys) {
    auto i = layout.index(k);
    if (!i) throw IntegrityError("selection references a parameter missing from the network");
    idx.push_back(*i);
  }
  return TrainableSet(layout, std::move(idx));
}

double selective_retrain(DenNetwork& net, const Batch& batch, const SubnetworkSelection& sel, const HyperParams& hp) {
  const ParamLayout layout(net, sel.task);
  const TrainableSet set = trainable_set(net, layout, sel.keys);
  std::vector<AnchorPenalty> smooth;
  if (hp.mu > 0.0) smooth.push_back(weight_decay(layout, set, hp.mu));
  return train(net, batch, sel.task, set, smooth, {}, hp.train).data_loss;
}

ExpansionReport dynamic_expand(DenNetwork& net, const Batch& batch, TaskId task, const HyperParams& hp,
                               InitBook* book) {
  hp.validate();
  if (!net.has_head(task)) throw MissingHeadError("dynamic_expand: head " + std::to_string(task) + " missing");
  const std::size_t depth = net.depth();
  ExpansionReport rep;
  rep.added.assign(depth, hp.k);
  rep.pruned.assign(depth, 0);
  rep.surviving.assign(depth, 0);

  std::vector<std::vector<UnitId>> added(depth);
  for (std::size_t h = 0; h < depth; ++h) added[h] = net.add_units(h, hp.k, net.rng());

  const ParamLayout layout(net, task);
  std::vector<std::size_t> idx;
  GroupSpec groups;
  for (std::size_t h = 0; h < depth; ++h) {
    for (UnitId id : added[h]) {
      incident_indices(net, layout, h, id, true, idx);
      groups.groups.push_back({h, id});
    }
  }
  std::sort(idx.begin(), idx.end());
  idx.erase(std::unique(idx.begin(), idx.end()), idx.end());
  record_init(net, layout, idx, book);
  const TrainableSet set(layout, idx);
  ProxSpec prox;
  prox.l1 = weight_indices(layout, set);
  prox.l1_strength = hp.mu;
  prox.groups = groups;
  prox.group_strength = hp.gamma;
  rep.loss = train(net, batch, task, set, {}, prox, hp.train).data_loss;

  for (std::size_t h = depth; h-- > 0;) {
    std::vector<UnitId> dead;
    for (UnitId id : added[h]) {
      const std::size_t col = net.require_position(h, id);
      const LayerWeights& lw = net.layer(h);
      bool zero = lw.b[col] == 0.0;
      for (std::size_t r = 0; zero && r < lw.w.rows(); ++r) zero = lw.w(r, col) == 0.0;
      if (zero) dead.push_back(id);
    }
    // An entire layer of dead units can only be removed if older units remain.
    if (dead.size() == net.width(h)) dead.pop_back();
    if (!dead.empty()) net.remove_units(h, dead);
    rep.pruned[h] = static_cast<int>(dead.size());
    rep.surviving[h] = rep.added[h] - rep.pruned[h];
  }
  return rep;
}

DriftReport compute_drift(const DenNetwork& net, double sigma) {
  DriftReport rep;
  const NetworkSnapshot& snap = net.snapshot();
  if (snap.empty()) return rep;
  for (std::size_t h = 0; h < net.depth(); ++h) {
    const LayerWeights& cur = net.layer(h);
    const LayerWeights& old = snap.layers.at(h);
    // Row in the current layer for each row of the snapshot layer.
    std::vector<std::size_t> rows;
    if (h == 0) {
      for (std::size_t r = 0; r < net.input_dim(); ++r) rows.push_back(r);
    } else {
      for (const auto& m : snap.unit_meta.at(h - 1)) rows.push_back(net.require_position(h - 1, m.id));
    }
    const auto& metas = snap.unit_meta.at(h);
    for (std::size_t q = 0; q < metas.size(); ++q) {
      const UnitId id = metas[q].id;
      const auto col = net.position(h, id);
      if (!col) continue;
      double ss = 0.0;
      for (std::size_t r = 0; r < rows.size(); ++r) {
        const double d = cur.w(rows[r], *col) - old.w(r, q);
        ss += d * d;
      }
      const double db = cur.b[*col] - old.b[q];
      ss += db * db;
      const double rho = std::sqrt(ss);
      rep.entries.push_back({h, id, rho, rho > sigma, 0});
    }
  }
  return rep;
}

DriftReport split_stage(DenNetwork& net, const Batch& batch, TaskId task, const HyperParams& hp,
                        const SubnetworkSelection& sel, const InitBook& book) {
  hp.validate();
  DriftReport rep = compute_drift(net, hp.sigma);
  for (auto& e : rep.entries) {
    if (e.split) e.copy = net.split_unit(e.layer, e.unit);
  }

  // Touched parameters: images of the selection under the split map (copies
  // take over their original's edges, restored originals stay frozen), the
  // surviving expansion weights that are nonzero, and all of head t.
  std::map<std::pair<std::size_t, UnitId>, UnitId> copy_of;
  std::set<std::pair<std::size_t, UnitId>> drifting;
  for (const auto& e : rep.entries) {
    if (e.split) {
      copy_of[{e.layer, e.unit}] = e.copy;
    } else if (e.rho > 0.0) {
      drifting.insert({e.layer, e.unit});
    }
  }
  auto targets = [&](std::size_t layer, UnitId id) {
    std::vector<UnitId> out;
    if (auto it = copy_of.find({layer, id}); it != copy_of.end()) {
      out.push_back(it->second);
    } else if (drifting.count({layer, id})) {
      out.push_back(id);
    }
    return out;
  };

  const ParamLayout layout(net, task);
  std::vector<std::size_t> idx;
  for (const auto& key : sel.keys) {
    if (key.kind == ParamKey::Kind::head_weight || key.kind == ParamKey::Kind::head_bias) continue;
    const auto h = static_cast<std::size_t>(key.index);
    for (UnitId to : targets(h, key.to)) {
      if (key.kind == ParamKey::Kind::bias) {
        idx.push_back(*layout.index(ParamKey::bias(h, to)));
        continue;
      }
      std::vector<UnitId> froms{key.from};
      if (h > 0) {
        if (auto it = copy_of.find({h - 1, key.from}); it != copy_of.end()) froms.push_back(it->second);
      }
      for (UnitId from : froms) idx.push_back(*layout.index(ParamKey::weight(h, from, to)));
    }
  }
  for (std::size_t h = 0; h < net.depth(); ++h) {
    for (const auto& m : net.units(h)) {
      if (m.timestamp != task || m.origin != UnitOrigin::expanded) continue;
      std::vector<std::size_t> inc;
      incident_indices(net, layout, h, m.id, true, inc);
      for (std::size_t i : inc) {
        const ParamKey key = layout.key(i);
        if (key.kind == ParamKey::Kind::bias || *lookup_param(net, key) != 0.0) idx.push_back(i);
      }
    }
  }
  const std::size_t top = net.top();
  for (std::size_t p = 0; p < net.width(top); ++p) {
    if (layout.is_parameter(layout.head_weight(p))) idx.push_back(layout.head_weight(p));
  }
  idx.push_back(layout.head_bias());
  const TrainableSet set(layout, std::move(idx));

  AnchorPenalty pen;
  pen.strength = hp.lambda;
  pen.anchor.reserve(set.size());
  const NetworkSnapshot& snap = net.snapshot();
  for (std::size_t i : set.indices()) {
    const ParamKey key = layout.key(i);
    if (auto v = lookup_param(snap, key)) {
      pen.anchor.push_back(*v);
    } else if (auto it = book.find(key); it != book.end()) {
      pen.anchor.push_back(it->second);
    } else {
      pen.anchor.push_back(*lookup_param(net, key));
    }
  }
  std::vector<AnchorPenalty> smooth;
  if (hp.lambda > 0.0) smooth.push_back(std::move(pen));
  train(net, batch, task, set, smooth, {}, hp.train);
  return rep;
}

StageReport den_observe(DenNetwork& net, const TaskDataset& data, const HyperParams& hp) {
  if (data.task_id != net.stage()) {
    throw SequencingError("den: expected task " + std::to_string(net.stage()) + ", got " + std::to_string(data.task_id));
  }
  if (data.task_id == 1) return den_first_task(net, data, hp);
  hp.validate();
  const auto start = Clock::now();
  const TaskId t = data.task_id;
  const Batch batch = data.batch(Split::train);
  StageReport rep;
  rep.task = t;
  rep.capacity_before = net.capacity();

  InitBook book;
  const TaskHead head = fit_output_head(net, batch, t, hp, &book);
  const SubnetworkSelection sel = select_subnetwork(net, head);
  rep.selected_units = sel.unit_count();
  rep.loss = selective_retrain(net, batch, sel, hp);
  if (rep.loss > hp.tau) {
    rep.expanded = true;
    rep.expansion = dynamic_expand(net, batch, t, hp, &book);
  }
  rep.drift = split_stage(net, batch, t, hp, sel, book);
  rep.final_loss = data_loss(net, batch, t);
  rep.capacity_after = net.capacity();
  net.snapshot_commit();
  rep.wall_ms = elapsed_ms(start);
  return rep;
}

}  // namespace den
