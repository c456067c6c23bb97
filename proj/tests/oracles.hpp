#pragma once

// Independent reference computations shared by the unit tests and the
// acceptance binary. Nothing here calls the code under test for the value
// it is checking.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include "den/network.hpp"
#include "den/numerics.hpp"
#include "den/trainer.hpp"

namespace oracle {

inline den::DenNetwork random_net(std::uint64_t seed, std::size_t in, const std::vector<std::size_t>& widths) {
  den::DenNetwork net(in, widths, seed);
  den::SeededRng rng = den::SeededRng::derive(seed, 0xb1a5);
  for (std::size_t h = 0; h < net.depth(); ++h)
    for (double& b : net.layer(h).b) b = 0.3 * rng.normal();
  net.add_head(1, den::HeadInit::random);
  net.head(1).bias = 0.2 * rng.normal();
  return net;
}

inline den::Batch random_batch(std::uint64_t seed, std::size_t n, std::size_t d) {
  den::SeededRng rng = den::SeededRng::derive(seed, 0xba7c);
  den::Batch b;
  b.features = den::Matrix(n, d);
  for (double& x : b.features.data()) x = rng.normal();
  for (std::size_t i = 0; i < n; ++i) b.labels.push_back(static_cast<int>(rng.below(2)));
  b.labels[0] = 0;
  b.labels[1] = 1;
  return b;
}

// Minimiser of a convex 1-D function on [lo, hi] given its right derivative:
// bisection on the sign of the slope, which resolves to the last ulp rather
// than stalling where objective differences vanish in rounding.
inline double argmin_by_slope(const std::function<double(double)>& slope, double lo, double hi) {
  for (int it = 0; it < 2000; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (mid <= lo || mid >= hi) break;
    if (slope(mid) < 0.0) lo = mid; else hi = mid;
  }
  return hi;
}

// argmin_u 1/2 (u - v)^2 + thr |u|.
inline double prox_l1(double v, double thr) {
  auto f = [&](double u) { return 0.5 * (u - v) * (u - v) + thr * std::abs(u); };
  auto slope = [&](double u) { return (u - v) + (u >= 0.0 ? thr : -thr); };
  const double r = std::abs(v) + 1.0;
  const double u = argmin_by_slope(slope, -r, r);
  // Bisection can stop a hair away from the kink; snap when 0 is no worse.
  return f(0.0) <= f(u) ? 0.0 : u;
}

inline double group_objective(std::span<const double> u, std::span<const double> v, double thr) {
  double sq = 0.0, nu = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    sq += (u[i] - v[i]) * (u[i] - v[i]);
    nu += u[i] * u[i];
  }
  return 0.5 * sq + thr * std::sqrt(nu);
}

// argmin_u 1/2 ||u - v||^2 + thr ||u||. Any u off the ray through v can be
// rotated onto it without raising either term, so a search along the ray
// finds the minimiser. The slope is the objective's directional derivative.
inline std::vector<double> prox_group(std::span<const double> v, double thr) {
  double nv = 0.0;
  for (double x : v) nv += x * x;
  nv = std::sqrt(nv);
  std::vector<double> u(v.size(), 0.0);
  if (nv == 0.0) return u;
  std::vector<double> dir(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) dir[i] = v[i] / nv;
  auto along = [&](double s) {
    std::vector<double> w(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) w[i] = s * dir[i];
    return w;
  };
  auto slope = [&](double s) {
    const auto w = along(s);
    double d = thr;
    for (std::size_t i = 0; i < v.size(); ++i) d += (w[i] - v[i]) * dir[i];
    return d;
  };
  const double s = argmin_by_slope(slope, 0.0, nv + 1.0);
  if (group_objective(u, v, thr) <= group_objective(along(s), v, thr)) return u;
  return along(s);
}

// Probability that a positive outranks a negative, ties 1/2, by counting pairs.
inline double auroc_pairs(std::span<const double> s, std::span<const int> y) {
  double wins = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (y[i] != 1) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[j] != 0) continue;
      ++pairs;
      if (s[i] > s[j]) wins += 1.0;
      else if (s[i] == s[j]) wins += 0.5;
    }
  }
  return wins / static_cast<double>(pairs);
}

// Mean BCE of task t computed independently in long double, with one
// parameter (identified by key) shifted by delta.
inline long double loss_ld(const den::DenNetwork& net, const den::Batch& b, den::TaskId t, const den::ParamKey& key,
                           long double delta) {
  using K = den::ParamKey::Kind;
  long double total = 0.0L;
  for (std::size_t n = 0; n < b.size(); ++n) {
    std::vector<long double> a(b.features.row(n).begin(), b.features.row(n).end());
    for (std::size_t h = 0; h < net.depth(); ++h) {
      const den::LayerWeights& lw = net.layer(h);
      std::vector<long double> z(lw.w.cols(), 0.0L);
      for (std::size_t j = 0; j < z.size(); ++j) {
        const den::UnitId to = net.units(h)[j].id;
        long double s = lw.b[j];
        if (key.kind == K::bias && static_cast<std::size_t>(key.index) == h && key.to == to) s += delta;
        for (std::size_t i = 0; i < a.size(); ++i) {
          long double w = lw.w(i, j);
          const den::UnitId from = h == 0 ? i : net.units(h - 1)[i].id;
          if (key.kind == K::weight && static_cast<std::size_t>(key.index) == h && key.from == from && key.to == to)
            w += delta;
          s += a[i] * w;
        }
        z[j] = net.units(h)[j].timestamp <= t && s > 0.0L ? s : 0.0L;
      }
      a = std::move(z);
    }
    const den::TaskHead& head = net.head(t);
    long double s = head.bias + (key.kind == K::head_bias ? delta : 0.0L);
    for (std::size_t j = 0; j < a.size(); ++j) {
      const den::UnitId id = net.units(net.top())[j].id;
      auto it = head.weights.find(id);
      if (it == head.weights.end()) continue;
      long double w = it->second;
      if (key.kind == K::head_weight && key.from == id) w += delta;
      s += a[j] * w;
    }
    // log(1 + e^s) - y s, stable for either sign of s
    total += (s > 0.0L ? s + std::log1p(std::exp(-s)) : std::log1p(std::exp(s))) - b.labels[n] * s;
  }
  return total / static_cast<long double>(b.size());
}

struct GradCheck {
  double max_rel = 0.0;
  std::size_t checked = 0;
  std::size_t excluded = 0;
};

// Coordinates whose gradient is below this are compared absolutely at
// kGradFloor * tolerance; the long-double differences are good to ~1e-13.
inline constexpr double kGradFloor = 1e-6;

// Backprop against five-point central differences of a long-double reference
// loss. A coordinate is skipped when some preactivation it can move sits
// within 1e-4 of the ReLU kink.
inline GradCheck check_gradient(const den::DenNetwork& net, const den::Batch& batch, den::TaskId task,
                                long double h = 5e-6L) {
  const den::ParamLayout layout(net, task);

  den::ForwardCache cache;
  den::forward_batch(net, task, batch.features, 0, cache);
  std::vector<double> layer_min(net.depth(), std::numeric_limits<double>::infinity());
  std::vector<std::vector<double>> unit_min(net.depth());
  for (std::size_t l = 0; l < net.depth(); ++l) {
    unit_min[l].assign(net.width(l), std::numeric_limits<double>::infinity());
    const auto mask = den::active_mask(net, l, task);
    for (std::size_t n = 0; n < cache.pre[l].rows(); ++n)
      for (std::size_t j = 0; j < net.width(l); ++j) {
        if (!mask[j]) continue;
        const double z = std::abs(cache.pre[l](n, j));
        unit_min[l][j] = std::min(unit_min[l][j], z);
        layer_min[l] = std::min(layer_min[l], z);
      }
  }
  auto near_kink = [&](std::size_t idx) {
    const std::size_t l = layout.layer_of(idx);
    if (l >= net.depth()) return false;
    const den::ParamKey k = layout.key(idx);
    if (unit_min[l][net.require_position(l, k.to)] < 1e-4) return true;
    for (std::size_t m = l + 1; m < net.depth(); ++m)
      if (layer_min[m] < 1e-4) return true;
    return false;
  };

  const std::vector<double> full = den::full_gradient(net, batch, task, layout);
  GradCheck out;
  for (std::size_t i = 0; i < layout.size(); ++i) {
    if (!layout.is_parameter(i)) continue;
    if (near_kink(i)) {
      ++out.excluded;
      continue;
    }
    const den::ParamKey k = layout.key(i);
    auto f = [&](long double d) { return loss_ld(net, batch, task, k, d); };
    const long double num = (-f(2 * h) + 8 * f(h) - 8 * f(-h) + f(-2 * h)) / (12 * h);
    const double a = full[i], n = static_cast<double>(num);
    const double rel = std::abs(a - n) / std::max({std::abs(a), std::abs(n), kGradFloor});
    out.max_rel = std::max(out.max_rel, rel);
    ++out.checked;
  }
  return out;
}

}  // namespace oracle
