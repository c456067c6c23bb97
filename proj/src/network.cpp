#include "den/network.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <string>

#include "den/errors.hpp"

namespace den {

namespace {

std::optional<std::size_t> find_unit(const std::vector<UnitMeta>& meta, UnitId id) {
  auto it = std::lower_bound(meta.begin(), meta.end(), id,
                             [](const UnitMeta& m, UnitId v) { return m.id < v; });
  if (it == meta.end() || it->id != id) return std::nullopt;
  return static_cast<std::size_t>(it - meta.begin());
}

}  // namespace

std::optional<std::size_t> NetworkSnapshot::position(std::size_t layer, UnitId id) const {
  if (layer >= unit_meta.size()) return std::nullopt;
  return find_unit(unit_meta[layer], id);
}

DenNetwork::DenNetwork(std::size_t input_dim, const std::vector<std::size_t>& hidden_widths,
                       std::uint64_t seed)
    : rng_(seed) {
  if (input_dim == 0) throw IntegrityError("input dimension must be positive");
  if (hidden_widths.empty()) throw IntegrityError("network needs at least one hidden layer");
  s_.input_dim = input_dim;
  std::size_t fan_in = input_dim;
  for (std::size_t width : hidden_widths) {
    if (width == 0) throw IntegrityError("empty hidden layer");
    LayerWeights lw{Matrix(fan_in, width), std::vector<double>(width, 0.0)};
    const double scale = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (double& v : lw.w.data()) v = scale * rng_.normal();
    std::vector<UnitMeta> meta;
    for (std::size_t j = 0; j < width; ++j) meta.push_back({s_.next_unit_id++, 1, UnitOrigin::initial, 0});
    s_.layers.push_back(std::move(lw));
    s_.unit_meta.push_back(std::move(meta));
    fan_in = width;
  }
}

DenNetwork::DenNetwork(NetworkState state) : s_(std::move(state)), rng_(SeededRng::from_state(s_.rng_state)) {
  check_consistency();
}

NetworkState DenNetwork::state() const {
  NetworkState out = s_;
  out.rng_state = rng_.state();
  return out;
}

std::optional<std::size_t> DenNetwork::position(std::size_t layer, UnitId id) const {
  if (layer >= depth()) return std::nullopt;
  return find_unit(s_.unit_meta[layer], id);
}

std::size_t DenNetwork::require_position(std::size_t layer, UnitId id) const {
  auto p = position(layer, id);
  if (!p) {
    throw ArgumentError("unit " + std::to_string(id) + " not found in hidden layer " + std::to_string(layer));
  }
  return *p;
}

TaskHead& DenNetwork::head(TaskId t) {
  auto it = s_.heads.find(t);
  if (it == s_.heads.end()) throw MissingHeadError("no head for task " + std::to_string(t));
  return it->second;
}

const TaskHead& DenNetwork::head(TaskId t) const {
  auto it = s_.heads.find(t);
  if (it == s_.heads.end()) throw MissingHeadError("no head for task " + std::to_string(t));
  return it->second;
}

TaskHead& DenNetwork::add_head(TaskId t, HeadInit init) {
  if (t < 1) throw ArgumentError("task ids start at 1");
  TaskHead head{t, {}, 0.0};
  const auto& top_units = s_.unit_meta.back();
  const double scale = std::sqrt(1.0 / static_cast<double>(top_units.size()));
  for (const auto& u : top_units) {
    if (u.timestamp > t) continue;
    head.weights[u.id] = init == HeadInit::random ? scale * rng_.normal() : 0.0;
  }
  return s_.heads[t] = std::move(head);
}

std::vector<UnitId> DenNetwork::add_units(std::size_t layer, int count, SeededRng& rng) {
  if (count <= 0) throw ArgumentError("add_units: count must be positive");
  if (layer >= depth()) throw ArgumentError("add_units: hidden layer " + std::to_string(layer) + " out of range");
  const auto k = static_cast<std::size_t>(count);
  LayerWeights& lw = s_.layers[layer];
  const std::size_t old_width = lw.w.cols();
  const std::size_t fan_in = lw.w.rows();
  lw.w.append_columns(k);
  lw.b.resize(old_width + k, 0.0);
  const double in_scale = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (std::size_t r = 0; r < fan_in; ++r) {
    for (std::size_t c = old_width; c < old_width + k; ++c) lw.w(r, c) = in_scale * rng.normal();
  }
  std::vector<UnitId> ids;
  for (std::size_t j = 0; j < k; ++j) {
    ids.push_back(s_.next_unit_id);
    s_.unit_meta[layer].push_back({s_.next_unit_id++, s_.current_stage, UnitOrigin::expanded, 0});
  }
  if (layer + 1 < depth()) {
    Matrix& next = s_.layers[layer + 1].w;
    next.append_rows(k);
    const double out_scale = std::sqrt(2.0 / static_cast<double>(next.rows()));
    for (std::size_t r = old_width; r < old_width + k; ++r) {
      for (std::size_t c = 0; c < next.cols(); ++c) next(r, c) = out_scale * rng.normal();
    }
  } else if (has_head(s_.current_stage)) {
    TaskHead& h = s_.heads[s_.current_stage];
    const double out_scale = std::sqrt(1.0 / static_cast<double>(width(layer)));
    for (UnitId id : ids) h.weights[id] = out_scale * rng.normal();
  }
  return ids;
}

void DenNetwork::remove_units(std::size_t layer, std::span<const UnitId> ids) {
  if (layer >= depth()) throw ArgumentError("remove_units: hidden layer out of range");
  std::set<UnitId> unique(ids.begin(), ids.end());
  if (unique.size() >= width(layer)) throw IntegrityError("remove_units would empty hidden layer " + std::to_string(layer));
  const LayerWeights& lw = s_.layers[layer];
  for (UnitId id : unique) {
    const std::size_t p = require_position(layer, id);
    bool zero = lw.b[p] == 0.0;
    for (std::size_t r = 0; r < lw.w.rows() && zero; ++r) zero = lw.w(r, p) == 0.0;
    if (!zero) throw IntegrityError("unit " + std::to_string(id) + " has a nonzero incoming group");
  }
  for (UnitId id : unique) {
    const std::size_t p = *position(layer, id);
    LayerWeights& l = s_.layers[layer];
    l.w.erase_column(p);
    l.b.erase(l.b.begin() + static_cast<std::ptrdiff_t>(p));
    s_.unit_meta[layer].erase(s_.unit_meta[layer].begin() + static_cast<std::ptrdiff_t>(p));
    if (layer + 1 < depth()) {
      s_.layers[layer + 1].w.erase_row(p);
    } else {
      for (auto& [t, h] : s_.heads) h.weights.erase(id);
    }
  }
}

UnitId DenNetwork::split_unit(std::size_t layer, UnitId id) {
  const std::size_t p = require_position(layer, id);
  const auto sp = s_.snapshot_prev.position(layer, id);
  if (!sp) {
    throw IntegrityError("unit " + std::to_string(id) + " has no previous-stage snapshot to split from");
  }
  const LayerWeights& snap = s_.snapshot_prev.layers[layer];
  LayerWeights& lw = s_.layers[layer];
  const std::size_t rows = lw.w.rows();
  std::vector<double> drifted = lw.w.column(p);
  const double drifted_bias = lw.b[p];

  for (std::size_t r = 0; r < rows; ++r) {
    std::optional<std::size_t> src_pos;
    if (layer == 0) {
      src_pos = r;
    } else {
      src_pos = s_.snapshot_prev.position(layer - 1, s_.unit_meta[layer - 1][r].id);
    }
    lw.w(r, p) = src_pos ? snap.w(*src_pos, *sp) : 0.0;
  }
  lw.b[p] = snap.b[*sp];

  const std::size_t c = lw.w.cols();
  lw.w.append_columns(1);
  for (std::size_t r = 0; r < rows; ++r) lw.w(r, c) = drifted[r];
  lw.b.push_back(drifted_bias);
  const UnitId copy = s_.next_unit_id++;
  s_.unit_meta[layer].push_back({copy, s_.current_stage, UnitOrigin::split_copy, id});

  if (layer + 1 < depth()) {
    Matrix& next = s_.layers[layer + 1].w;
    next.append_rows(1);
    for (std::size_t j = 0; j < next.cols(); ++j) next(c, j) = next(p, j);
  } else if (has_head(s_.current_stage)) {
    TaskHead& h = s_.heads[s_.current_stage];
    auto it = h.weights.find(id);
    h.weights[copy] = it == h.weights.end() ? 0.0 : it->second;
  }
  return copy;
}

std::size_t DenNetwork::capacity() const {
  check_consistency();
  std::size_t total = 0;
  for (const auto& l : s_.layers) total += l.w.size() + l.b.size();
  for (const auto& [t, h] : s_.heads) total += h.weights.size() + 1;
  return total;
}

void DenNetwork::snapshot_commit() {
  s_.snapshot_prev = NetworkSnapshot{s_.layers, s_.unit_meta, s_.heads};
  ++s_.current_stage;
}

void DenNetwork::check_consistency() const {
  auto fail = [](const std::string& msg) { throw IntegrityError("network integrity: " + msg); };
  if (s_.layers.empty()) fail("no hidden layers");
  if (s_.layers.size() != s_.unit_meta.size()) fail("layer count differs from metadata");
  if (s_.current_stage < 1) fail("stage must be >= 1");
  std::set<UnitId> seen;
  for (std::size_t h = 0; h < s_.layers.size(); ++h) {
    const auto& lw = s_.layers[h];
    const auto& meta = s_.unit_meta[h];
    const std::size_t in = h == 0 ? s_.input_dim : s_.unit_meta[h - 1].size();
    if (meta.empty()) fail("empty hidden layer " + std::to_string(h));
    if (lw.w.rows() != in || lw.w.cols() != meta.size() || lw.b.size() != meta.size()) {
      fail("layer " + std::to_string(h) + " dimensions disagree with unit metadata");
    }
    for (std::size_t j = 0; j < meta.size(); ++j) {
      if (j > 0 && meta[j].id <= meta[j - 1].id) fail("unit ids not increasing in layer " + std::to_string(h));
      if (meta[j].id >= s_.next_unit_id) fail("unit id beyond allocator");
      if (meta[j].timestamp < 1 || meta[j].timestamp > s_.current_stage) fail("timestamp out of range");
      if (!seen.insert(meta[j].id).second) fail("duplicate unit id");
    }
  }
  for (const auto& [t, h] : s_.heads) {
    if (h.task != t) fail("head key mismatch");
    for (const auto& [id, w] : h.weights) {
      auto p = find_unit(s_.unit_meta.back(), id);
      if (!p) fail("head " + std::to_string(t) + " references unknown unit " + std::to_string(id));
      if (s_.unit_meta.back()[*p].timestamp > t) fail("head " + std::to_string(t) + " references a later unit");
    }
  }
}

std::vector<std::uint8_t> active_mask(const DenNetwork& net, std::size_t layer, TaskId task) {
  const auto& meta = net.units(layer);
  std::vector<std::uint8_t> mask(meta.size());
  for (std::size_t j = 0; j < meta.size(); ++j) mask[j] = meta[j].timestamp <= task ? 1 : 0;
  return mask;
}

std::vector<double> head_vector(const DenNetwork& net, TaskId task) {
  const TaskHead& head = net.head(task);
  const auto& meta = net.units(net.top());
  std::vector<double> out(meta.size(), 0.0);
  for (std::size_t j = 0; j < meta.size(); ++j) {
    auto it = head.weights.find(meta[j].id);
    if (it != head.weights.end()) out[j] = it->second;
  }
  return out;
}

void forward_batch(const DenNetwork& net, TaskId task, const Matrix& input, std::size_t start_layer,
                   ForwardCache& cache) {
  const TaskHead& head = net.head(task);
  const std::size_t n = input.rows();
  cache.pre.resize(net.depth());
  cache.act.resize(net.depth());
  cache.start_layer = start_layer;
  for (std::size_t h = start_layer; h < net.depth(); ++h) {
    const Matrix& in = h == start_layer ? input : cache.act[h - 1];
    const LayerWeights& lw = net.layer(h);
    if (in.cols() != lw.w.rows()) throw ShapeError("forward: input width does not match layer " + std::to_string(h));
    const auto mask = active_mask(net, h, task);
    const std::size_t width = lw.w.cols();
    Matrix pre(n, width);
    Matrix act(n, width);
    for (std::size_t i = 0; i < n; ++i) {
      auto z = pre.row(i);
      std::copy(lw.b.begin(), lw.b.end(), z.begin());
      auto a_in = in.row(i);
      for (std::size_t k = 0; k < a_in.size(); ++k) {
        const double a = a_in[k];
        if (a == 0.0) continue;
        auto wrow = lw.w.row(k);
        for (std::size_t j = 0; j < width; ++j) z[j] += a * wrow[j];
      }
      auto out = act.row(i);
      for (std::size_t j = 0; j < width; ++j) {
        if (mask[j]) {
          out[j] = relu(z[j]);
        } else {
          z[j] = 0.0;
          out[j] = 0.0;
        }
      }
    }
    cache.pre[h] = std::move(pre);
    cache.act[h] = std::move(act);
  }
  const auto hv = head_vector(net, task);
  const Matrix& top = start_layer < net.depth() ? cache.act.back() : input;
  cache.score.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto a = top.row(i);
    double s = head.bias;
    for (std::size_t j = 0; j < a.size(); ++j) {
      if (a[j] != 0.0) s += a[j] * hv[j];
    }
    cache.score[i] = s;
  }
}

double forward(const DenNetwork& net, std::span<const double> x, TaskId task) {
  if (x.size() != net.input_dim()) throw ShapeError("forward: feature length does not match input dimension");
  Matrix m(1, x.size(), std::vector<double>(x.begin(), x.end()));
  ForwardCache cache;
  forward_batch(net, task, m, 0, cache);
  return sigmoid(cache.score[0]);
}

std::vector<double> predict(const DenNetwork& net, const Matrix& x, TaskId task) {
  if (x.cols() != net.input_dim()) throw ShapeError("predict: feature width does not match input dimension");
  ForwardCache cache;
  forward_batch(net, task, x, 0, cache);
  std::vector<double> out(cache.score.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sigmoid(cache.score[i]);
  return out;
}

}  // namespace den
