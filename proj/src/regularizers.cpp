#include "den/regularizers.hpp"

#include <cmath>

#include "den/errors.hpp"
#include "den/trainer.hpp"

namespace den {

double soft_threshold(double w, double thr) {
  if (thr < 0.0) throw ArgumentError("soft_threshold: negative threshold");
  const double mag = std::abs(w) - thr;
  if (mag <= 0.0) return 0.0;
  return w > 0.0 ? mag : -mag;
}

void group_shrink_inplace(std::span<double> v, double thr) {
  if (thr < 0.0) throw ArgumentError("group_shrink: negative threshold");
  const double n = norm2(v);
  if (n <= thr) {
    std::fill(v.begin(), v.end(), 0.0);
    return;
  }
  const double factor = 1.0 - thr / n;
  for (double& x : v) x *= factor;
}

std::vector<double> group_shrink(std::span<const double> v, double thr) {
  std::vector<double> out(v.begin(), v.end());
  group_shrink_inplace(out, thr);
  return out;
}

void AnchorPenalty::validate() const {
  if (!(strength >= 0.0)) throw ArgumentError("anchor penalty strength must be >= 0");
  if (fisher) {
    if (fisher->size() != anchor.size()) throw ShapeError("fisher length differs from anchor length");
    for (double f : *fisher) {
      if (!(f >= 0.0)) throw ArgumentError("fisher entries must be >= 0");
    }
  }
}

std::vector<double> anchor_grad(std::span<const double> theta, const AnchorPenalty& pen) {
  if (theta.size() != pen.anchor.size()) {
    throw ShapeError("anchor_grad: parameter length " + std::to_string(theta.size()) + " != anchor length " +
                     std::to_string(pen.anchor.size()));
  }
  pen.validate();
  std::vector<double> g(theta.size());
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double w = pen.fisher ? (*pen.fisher)[i] : 1.0;
    g[i] = 2.0 * pen.strength * w * (theta[i] - pen.anchor[i]);
  }
  return g;
}

double anchor_value(std::span<const double> theta, const AnchorPenalty& pen) {
  if (theta.size() != pen.anchor.size()) throw ShapeError("anchor_value: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double d = theta[i] - pen.anchor[i];
    s += (pen.fisher ? (*pen.fisher)[i] : 1.0) * d * d;
  }
  return pen.strength * s;
}

std::vector<double> fisher_diagonal(const DenNetwork& net, TaskId task, const Batch& data) {
  if (data.size() == 0) throw ArgumentError("fisher_diagonal: empty dataset");
  const ParamLayout layout(net, task);
  std::vector<double> fisher(layout.size(), 0.0);
  Batch one{Matrix(1, data.features.cols()), {0}};
  for (std::size_t n = 0; n < data.size(); ++n) {
    auto row = data.features.row(n);
    std::copy(row.begin(), row.end(), one.features.row(0).begin());
    one.labels[0] = data.labels[n];
    // The per-example BCE gradient is the negated log-likelihood score.
    const auto g = full_gradient(net, one, task, layout);
    for (std::size_t i = 0; i < g.size(); ++i) fisher[i] += g[i] * g[i];
  }
  const double inv = 1.0 / static_cast<double>(data.size());
  for (double& f : fisher) f *= inv;
  return fisher;
}

}  // namespace den
