#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "den/network.hpp"

namespace den {

// sign(w) * max(|w| - thr, 0); returns +0.0 whenever |w| <= thr.
// Throws ArgumentError for thr < 0.
double soft_threshold(double w, double thr);

// Block soft-threshold: v * max(1 - thr / ||v||, 0). Exact zeros when
// ||v|| <= thr. Throws ArgumentError for thr < 0.
std::vector<double> group_shrink(std::span<const double> v, double thr);
void group_shrink_inplace(std::span<double> v, double thr);

// One group per listed unit: that unit's incoming weights plus its bias.
struct GroupSpec {
  struct Group {
    std::size_t layer = 0;
    UnitId unit = 0;
  };
  std::vector<Group> groups;
};

// strength * sum_i F_i (theta_i - anchor_i)^2, with F == 1 when absent.
struct AnchorPenalty {
  std::vector<double> anchor;
  double strength = 0.0;
  std::optional<std::vector<double>> fisher;

  // Throws ArgumentError / ShapeError on negative strength, negative or
  // mis-sized Fisher entries.
  void validate() const;
};

// 2 * strength * F (theta - anchor). Throws ShapeError when lengths differ.
std::vector<double> anchor_grad(std::span<const double> theta, const AnchorPenalty& pen);
double anchor_value(std::span<const double> theta, const AnchorPenalty& pen);

// Empirical diagonal Fisher of the Bernoulli log-likelihood for task t: the
// mean over examples of the squared per-example gradient, indexed like
// ParamLayout(net, task). Throws ArgumentError on an empty batch.
std::vector<double> fisher_diagonal(const DenNetwork& net, TaskId task, const Batch& data);

}  // namespace den
