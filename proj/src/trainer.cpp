#include "den/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <string>

#include "den/errors.hpp"

namespace den {

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ArgumentError("learning_rate must be > 0");
  if (max_epochs < 1) throw ArgumentError("max_epochs must be >= 1");
  if (!(tol >= 0.0)) throw ArgumentError("tol must be >= 0");
  if (max_halvings < 0) throw ArgumentError("max_halvings must be >= 0");
}

// ---------------------------------------------------------------------------
// Parameter addressing

std::optional<double> lookup_param(const std::vector<LayerWeights>& layers,
                                   const std::vector<std::vector<UnitMeta>>& meta,
                                   const std::map<TaskId, TaskHead>& heads, const ParamKey& key) {
  auto pos = [&](std::size_t layer, UnitId id) -> std::optional<std::size_t> {
    if (layer >= meta.size()) return std::nullopt;
    const auto& units = meta[layer];
    auto it = std::lower_bound(units.begin(), units.end(), id, [](const UnitMeta& m, UnitId v) { return m.id < v; });
    if (it == units.end() || it->id != id) return std::nullopt;
    return static_cast<std::size_t>(it - units.begin());
  };
  switch (key.kind) {
    case ParamKey::Kind::weight: {
      const auto h = static_cast<std::size_t>(key.index);
      if (h >= layers.size()) return std::nullopt;
      std::optional<std::size_t> row;
      if (h == 0) {
        if (key.from < layers[0].w.rows()) row = static_cast<std::size_t>(key.from);
      } else {
        row = pos(h - 1, key.from);
      }
      const auto col = pos(h, key.to);
      if (!row || !col) return std::nullopt;
      return layers[h].w(*row, *col);
    }
    case ParamKey::Kind::bias: {
      const auto h = static_cast<std::size_t>(key.index);
      const auto col = pos(h, key.to);
      if (!col) return std::nullopt;
      return layers[h].b[*col];
    }
    case ParamKey::Kind::head_weight: {
      auto it = heads.find(key.index);
      if (it == heads.end()) return std::nullopt;
      auto w = it->second.weights.find(key.from);
      if (w == it->second.weights.end()) return std::nullopt;
      return w->second;
    }
    case ParamKey::Kind::head_bias: {
      auto it = heads.find(key.index);
      if (it == heads.end()) return std::nullopt;
      return it->second.bias;
    }
  }
  return std::nullopt;
}

std::optional<double> lookup_param(const DenNetwork& net, const ParamKey& key) {
  std::vector<std::vector<UnitMeta>> meta;
  for (std::size_t h = 0; h < net.depth(); ++h) meta.push_back(net.units(h));
  return lookup_param(net.layers(), meta, net.heads(), key);
}

std::optional<double> lookup_param(const NetworkSnapshot& snap, const ParamKey& key) {
  return lookup_param(snap.layers, snap.unit_meta, snap.heads, key);
}

ParamLayout::ParamLayout(const DenNetwork& net, TaskId task) : task_(task), input_dim_(net.input_dim()) {
  const TaskHead& head = net.head(task);
  std::size_t off = 0;
  for (std::size_t h = 0; h < net.depth(); ++h) {
    std::vector<UnitId> ids;
    for (const auto& u : net.units(h)) ids.push_back(u.id);
    const std::size_t rows = h == 0 ? input_dim_ : ids_[h - 1].size();
    w_off_.push_back(off);
    off += rows * ids.size();
    b_off_.push_back(off);
    off += ids.size();
    ids_.push_back(std::move(ids));
  }
  head_w_ = off;
  off += ids_.back().size();
  head_b_ = off;
  size_ = off + 1;
  for (UnitId id : ids_.back()) head_exists_.push_back(head.weights.count(id) ? 1 : 0);
}

std::size_t ParamLayout::weight(std::size_t layer, std::size_t row, std::size_t col) const {
  return w_off_.at(layer) + row * ids_[layer].size() + col;
}

std::size_t ParamLayout::bias(std::size_t layer, std::size_t unit) const { return b_off_.at(layer) + unit; }

std::size_t ParamLayout::head_weight(std::size_t top_pos) const { return head_w_ + top_pos; }

bool ParamLayout::is_parameter(std::size_t index) const {
  if (index >= size_) return false;
  if (index >= head_w_ && index < head_b_) return head_exists_[index - head_w_] != 0;
  return true;
}

std::size_t ParamLayout::layer_of(std::size_t index) const {
  if (index >= head_w_) return depth();
  auto it = std::upper_bound(w_off_.begin(), w_off_.end(), index);
  return static_cast<std::size_t>(it - w_off_.begin()) - 1;
}

ParamKey ParamLayout::key(std::size_t index) const {
  if (index >= size_) throw ArgumentError("parameter index out of range");
  if (index == head_b_) return ParamKey::head_bias(task_);
  if (index >= head_w_) return ParamKey::head_weight(task_, ids_.back()[index - head_w_]);
  const std::size_t h = layer_of(index);
  if (index >= b_off_[h]) return ParamKey::bias(h, ids_[h][index - b_off_[h]]);
  const std::size_t local = index - w_off_[h];
  const std::size_t cols = ids_[h].size();
  const std::size_t row = local / cols;
  const std::size_t col = local % cols;
  const UnitId from = h == 0 ? static_cast<UnitId>(row) : ids_[h - 1][row];
  return ParamKey::weight(h, from, ids_[h][col]);
}

std::optional<std::size_t> ParamLayout::index(const ParamKey& key) const {
  auto pos = [](const std::vector<UnitId>& ids, UnitId id) -> std::optional<std::size_t> {
    auto it = std::lower_bound(ids.begin(), ids.end(), id);
    if (it == ids.end() || *it != id) return std::nullopt;
    return static_cast<std::size_t>(it - ids.begin());
  };
  switch (key.kind) {
    case ParamKey::Kind::weight: {
      const auto h = static_cast<std::size_t>(key.index);
      if (h >= depth()) return std::nullopt;
      std::optional<std::size_t> row;
      if (h == 0) {
        if (key.from < input_dim_) row = static_cast<std::size_t>(key.from);
      } else {
        row = pos(ids_[h - 1], key.from);
      }
      const auto col = pos(ids_[h], key.to);
      if (!row || !col) return std::nullopt;
      return weight(h, *row, *col);
    }
    case ParamKey::Kind::bias: {
      const auto h = static_cast<std::size_t>(key.index);
      if (h >= depth()) return std::nullopt;
      const auto col = pos(ids_[h], key.to);
      if (!col) return std::nullopt;
      return bias(h, *col);
    }
    case ParamKey::Kind::head_weight: {
      if (key.index != task_) return std::nullopt;
      const auto p = pos(ids_.back(), key.from);
      if (!p || !head_exists_[*p]) return std::nullopt;
      return head_weight(*p);
    }
    case ParamKey::Kind::head_bias:
      if (key.index != task_) return std::nullopt;
      return head_b_;
  }
  return std::nullopt;
}

std::vector<double> ParamLayout::gather(const DenNetwork& net) const {
  std::vector<std::size_t> all(size_);
  for (std::size_t i = 0; i < size_; ++i) all[i] = i;
  return gather(net, all);
}

std::vector<double> ParamLayout::gather(const DenNetwork& net, std::span<const std::size_t> indices) const {
  std::vector<double> out;
  out.reserve(indices.size());
  const TaskHead& head = net.head(task_);
  for (std::size_t index : indices) {
    if (index >= size_) throw ArgumentError("gather: index out of range");
    if (index == head_b_) {
      out.push_back(head.bias);
    } else if (index >= head_w_) {
      auto it = head.weights.find(ids_.back()[index - head_w_]);
      out.push_back(it == head.weights.end() ? 0.0 : it->second);
    } else {
      const std::size_t h = layer_of(index);
      const LayerWeights& lw = net.layer(h);
      if (index >= b_off_[h]) {
        out.push_back(lw.b[index - b_off_[h]]);
      } else {
        out.push_back(lw.w.data()[index - w_off_[h]]);
      }
    }
  }
  return out;
}

void ParamLayout::scatter(DenNetwork& net, std::span<const std::size_t> indices, std::span<const double> values) const {
  if (indices.size() != values.size()) throw ShapeError("scatter: length mismatch");
  TaskHead& head = net.head(task_);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const std::size_t index = indices[i];
    if (!is_parameter(index)) throw ArgumentError("scatter: index " + std::to_string(index) + " is not a parameter");
    if (index == head_b_) {
      head.bias = values[i];
    } else if (index >= head_w_) {
      head.weights.at(ids_.back()[index - head_w_]) = values[i];
    } else {
      const std::size_t h = layer_of(index);
      LayerWeights& lw = net.layer(h);
      if (index >= b_off_[h]) {
        lw.b[index - b_off_[h]] = values[i];
      } else {
        lw.w.data()[index - w_off_[h]] = values[i];
      }
    }
  }
}

TrainableSet::TrainableSet(const ParamLayout& layout, std::vector<std::size_t> indices) : idx_(std::move(indices)) {
  std::sort(idx_.begin(), idx_.end());
  idx_.erase(std::unique(idx_.begin(), idx_.end()), idx_.end());
  for (std::size_t i : idx_) {
    if (!layout.is_parameter(i)) throw ArgumentError("trainable coordinate " + std::to_string(i) + " is not a parameter");
  }
}

TrainableSet TrainableSet::all(const ParamLayout& layout) {
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < layout.size(); ++i) {
    if (layout.is_parameter(i)) idx.push_back(i);
  }
  return TrainableSet(layout, std::move(idx));
}

bool TrainableSet::contains(std::size_t index) const { return std::binary_search(idx_.begin(), idx_.end(), index); }

std::optional<std::size_t> TrainableSet::position(std::size_t index) const {
  auto it = std::lower_bound(idx_.begin(), idx_.end(), index);
  if (it == idx_.end() || *it != index) return std::nullopt;
  return static_cast<std::size_t>(it - idx_.begin());
}

std::size_t TrainableSet::lowest_layer(const ParamLayout& layout) const {
  if (idx_.empty()) return layout.depth();
  return layout.layer_of(idx_.front());
}

// ---------------------------------------------------------------------------
// Loss and gradient

double bce_loss(double score, int label) {
  // softplus(s) - y s
  const double softplus = std::max(score, 0.0) + std::log1p(std::exp(-std::abs(score)));
  return softplus - (label != 0 ? score : 0.0);
}

double bce_score_grad(double score, int label) { return sigmoid(score) - (label != 0 ? 1.0 : 0.0); }

namespace {

// Forward/backward over a batch with the activations feeding the lowest
// trainable layer computed once.
class BatchEvaluator {
 public:
  BatchEvaluator(const DenNetwork& net, const Batch& batch, TaskId task, std::size_t start)
      : batch_(batch), task_(task), start_(start) {
    if (batch.size() == 0) throw ArgumentError("empty batch");
    if (batch.features.rows() != batch.size()) throw ShapeError("batch features/labels length mismatch");
    if (batch.features.cols() != net.input_dim()) throw ShapeError("batch feature width does not match network input");
    if (start_ > 0) {
      ForwardCache full;
      forward_batch(net, task, batch.features, 0, full);
      cached_input_ = std::move(full.act[start_ - 1]);
    }
  }

  double evaluate(const DenNetwork& net, const ParamLayout& layout, std::vector<double>* grad) {
    const Matrix& input = start_ == 0 ? batch_.features : cached_input_;
    forward_batch(net, task_, input, start_, cache_);
    const std::size_t n = batch_.size();
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) loss += bce_loss(cache_.score[i], batch_.labels[i]);
    loss /= static_cast<double>(n);
    if (!grad) return loss;

    grad->assign(layout.size(), 0.0);
    auto& g = *grad;
    const double inv_n = 1.0 / static_cast<double>(n);
    std::vector<double> d_score(n);
    for (std::size_t i = 0; i < n; ++i) d_score[i] = bce_score_grad(cache_.score[i], batch_.labels[i]) * inv_n;

    const std::size_t depth = net.depth();
    const Matrix& top = start_ < depth ? cache_.act.back() : input;
    const std::size_t top_width = top.cols();
    for (std::size_t i = 0; i < n; ++i) {
      auto a = top.row(i);
      for (std::size_t j = 0; j < top_width; ++j) {
        if (a[j] != 0.0) g[layout.head_weight(j)] += d_score[i] * a[j];
      }
      g[layout.head_bias()] += d_score[i];
    }
    for (std::size_t j = 0; j < top_width; ++j) {
      if (!layout.is_parameter(layout.head_weight(j))) g[layout.head_weight(j)] = 0.0;
    }
    if (start_ >= depth) return loss;

    const auto hv = head_vector(net, task_);
    Matrix d_act(n, top_width);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < top_width; ++j) d_act(i, j) = d_score[i] * hv[j];
    }
    for (std::size_t h = depth; h-- > start_;) {
      const LayerWeights& lw = net.layer(h);
      const Matrix& pre = cache_.pre[h];
      const Matrix& in = h == start_ ? input : cache_.act[h - 1];
      const std::size_t width = lw.w.cols();
      const std::size_t rows = lw.w.rows();
      Matrix dz(n, width);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < width; ++j) dz(i, j) = d_act(i, j) * relu_grad(pre(i, j));
      }
      double* gw = g.data() + layout.weight(h, 0, 0);
      double* gb = g.data() + layout.bias(h, 0);
      for (std::size_t i = 0; i < n; ++i) {
        auto dzi = dz.row(i);
        auto a = in.row(i);
        for (std::size_t k = 0; k < rows; ++k) {
          if (a[k] == 0.0) continue;
          double* gr = gw + k * width;
          const double ak = a[k];
          for (std::size_t j = 0; j < width; ++j) gr[j] += ak * dzi[j];
        }
        for (std::size_t j = 0; j < width; ++j) gb[j] += dzi[j];
      }
      if (h > start_) {
        const Matrix& prev_pre = cache_.pre[h - 1];
        Matrix next(n, rows);
        for (std::size_t i = 0; i < n; ++i) {
          auto dzi = dz.row(i);
          for (std::size_t k = 0; k < rows; ++k) {
            if (prev_pre(i, k) <= 0.0) continue;
            auto wk = lw.w.row(k);
            double s = 0.0;
            for (std::size_t j = 0; j < width; ++j) s += dzi[j] * wk[j];
            next(i, k) = s;
          }
        }
        d_act = std::move(next);
      }
    }
    return loss;
  }

 private:
  const Batch& batch_;
  TaskId task_;
  std::size_t start_;
  Matrix cached_input_;
  ForwardCache cache_;
};

}  // namespace

double data_loss(const DenNetwork& net, const Batch& batch, TaskId task) {
  const ParamLayout layout(net, task);
  BatchEvaluator ev(net, batch, task, 0);
  return ev.evaluate(net, layout, nullptr);
}

std::vector<double> full_gradient(const DenNetwork& net, const Batch& batch, TaskId task, const ParamLayout& layout) {
  BatchEvaluator ev(net, batch, task, 0);
  std::vector<double> g;
  ev.evaluate(net, layout, &g);
  return g;
}

std::vector<double> backprop(const DenNetwork& net, const Batch& batch, TaskId task, const TrainableSet& trainable) {
  const ParamLayout layout(net, task);
  BatchEvaluator ev(net, batch, task, trainable.lowest_layer(layout));
  std::vector<double> g;
  ev.evaluate(net, layout, &g);
  std::vector<double> out;
  out.reserve(trainable.size());
  for (std::size_t i : trainable.indices()) out.push_back(g[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Solver

double nonsmooth_value(std::span<const double> theta, const ProxTerms& prox) {
  double v = 0.0;
  if (prox.l1_strength > 0.0) {
    double s = 0.0;
    for (std::size_t p : prox.l1) s += std::abs(theta[p]);
    v += prox.l1_strength * s;
  }
  if (prox.group_strength > 0.0) {
    double s = 0.0;
    for (const auto& grp : prox.groups) {
      double sq = 0.0;
      for (std::size_t p : grp) sq += theta[p] * theta[p];
      s += std::sqrt(sq);
    }
    v += prox.group_strength * s;
  }
  return v;
}

void apply_prox(std::span<double> theta, const ProxTerms& prox, double step) {
  if (prox.l1_strength > 0.0) {
    const double thr = prox.l1_strength * step;
    for (std::size_t p : prox.l1) theta[p] = soft_threshold(theta[p], thr);
  }
  if (prox.group_strength > 0.0) {
    const double thr = prox.group_strength * step;
    std::vector<double> buf;
    for (const auto& grp : prox.groups) {
      buf.clear();
      for (std::size_t p : grp) buf.push_back(theta[p]);
      group_shrink_inplace(buf, thr);
      for (std::size_t i = 0; i < grp.size(); ++i) theta[grp[i]] = buf[i];
    }
  }
}

SolveResult proximal_gradient(const SmoothFn& f, const ProxTerms& prox, std::vector<double> theta,
                              const TrainConfig& cfg) {
  cfg.validate();
  SolveResult res;
  double eta = cfg.learning_rate;
  std::vector<double> grad(theta.size()), trial(theta.size()), trial_grad(theta.size());
  SmoothValue cur = f(theta, grad);
  double obj = cur.total + nonsmooth_value(theta, prox);
  if (!std::isfinite(obj)) throw TrainingDiverged(0, "non-finite initial objective");

  int epoch = 0;
  for (epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    bool accepted = false;
    SmoothValue tv;
    double trial_obj = 0.0;
    while (true) {
      for (std::size_t i = 0; i < theta.size(); ++i) trial[i] = theta[i] - eta * grad[i];
      apply_prox(trial, prox, eta);
      tv = f(trial, trial_grad);
      trial_obj = tv.total + nonsmooth_value(trial, prox);
      if (std::isfinite(trial_obj) && trial_obj <= obj + 1e-12 * std::max(1.0, std::abs(obj))) {
        accepted = true;
        break;
      }
      if (res.halvings >= cfg.max_halvings) {
        if (!std::isfinite(trial_obj)) throw TrainingDiverged(epoch, "objective is not finite after step halving");
        break;
      }
      eta *= 0.5;
      ++res.halvings;
    }
    if (!accepted) break;
    const double rel = std::abs(obj - trial_obj) / std::max(std::abs(obj), 1e-300);
    theta.swap(trial);
    grad.swap(trial_grad);
    obj = trial_obj;
    cur = tv;
    res.history.push_back(obj);
    if (rel < cfg.tol) break;
  }
  res.epochs = std::min(epoch, cfg.max_epochs);
  res.theta = std::move(theta);
  res.objective = obj;
  res.data_loss = cur.data;
  res.learning_rate = eta;
  return res;
}

TrainResult train(DenNetwork& net, const Batch& batch, TaskId task, const TrainableSet& trainable,
                  const std::vector<AnchorPenalty>& smooth, const ProxSpec& prox, const TrainConfig& cfg) {
  cfg.validate();
  if (batch.size() == 0) throw ArgumentError("train: empty batch");
  const ParamLayout layout(net, task);
  for (const auto& pen : smooth) {
    pen.validate();
    if (pen.anchor.size() != trainable.size()) throw ShapeError("penalty anchor length differs from trainable set");
  }

  ProxTerms terms;
  terms.l1_strength = prox.l1_strength;
  terms.group_strength = prox.group_strength;
  auto to_position = [&](std::size_t index) {
    auto p = trainable.position(index);
    if (!p) throw ArgumentError("prox coordinate " + std::to_string(index) + " is not trainable");
    return *p;
  };
  for (std::size_t i : prox.l1) terms.l1.push_back(to_position(i));
  std::set<std::size_t> grouped;
  for (const auto& grp : prox.groups.groups) {
    const std::size_t col = net.require_position(grp.layer, grp.unit);
    std::vector<std::size_t> members;
    for (std::size_t r = 0; r < net.layer(grp.layer).w.rows(); ++r) {
      members.push_back(to_position(layout.weight(grp.layer, r, col)));
    }
    members.push_back(to_position(layout.bias(grp.layer, col)));
    for (std::size_t m : members) {
      if (!grouped.insert(m).second) throw ArgumentError("prox groups overlap");
    }
    terms.groups.push_back(std::move(members));
  }

  const auto& idx = trainable.indices();
  BatchEvaluator ev(net, batch, task, trainable.lowest_layer(layout));
  std::vector<double> full;
  SmoothFn fn = [&](std::span<const double> theta, std::span<double> grad) {
    layout.scatter(net, idx, theta);
    SmoothValue v;
    v.data = ev.evaluate(net, layout, &full);
    v.total = v.data;
    for (std::size_t i = 0; i < idx.size(); ++i) grad[i] = full[idx[i]];
    for (const auto& pen : smooth) {
      if (pen.strength == 0.0) continue;
      v.total += anchor_value(theta, pen);
      for (std::size_t i = 0; i < idx.size(); ++i) {
        const double w = pen.fisher ? (*pen.fisher)[i] : 1.0;
        grad[i] += 2.0 * pen.strength * w * (theta[i] - pen.anchor[i]);
      }
    }
    return v;
  };

  auto theta0 = layout.gather(net, idx);
  SolveResult res = proximal_gradient(fn, terms, std::move(theta0), cfg);
  layout.scatter(net, idx, res.theta);
  return {res.objective, res.data_loss, res.epochs, res.learning_rate, std::move(res.history)};
}

}  // namespace den
