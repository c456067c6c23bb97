#pragma once

#include <compare>
#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "den/network.hpp"
#include "den/regularizers.hpp"

namespace den {

struct TrainConfig {
  double learning_rate = 0.1;
  int max_epochs = 500;
  double tol = 1e-5;  // relative objective change that counts as converged
  int max_halvings = 10;

  // Throws ArgumentError unless learning_rate > 0, max_epochs >= 1, tol >= 0.
  void validate() const;
};

// Stable identity of a scalar parameter across structural edits.
struct ParamKey {
  enum class Kind : std::uint8_t { weight, bias, head_weight, head_bias };
  Kind kind = Kind::weight;
  int index = 0;    // hidden layer (weight, bias) or task (head_*)
  UnitId from = 0;  // weight: input feature (layer 0) or source unit id; head_weight: unit id
  UnitId to = 0;    // weight/bias: target unit id

  static ParamKey weight(std::size_t layer, UnitId from, UnitId to) {
    return {Kind::weight, static_cast<int>(layer), from, to};
  }
  static ParamKey bias(std::size_t layer, UnitId unit) { return {Kind::bias, static_cast<int>(layer), 0, unit}; }
  static ParamKey head_weight(TaskId t, UnitId unit) { return {Kind::head_weight, t, unit, 0}; }
  static ParamKey head_bias(TaskId t) { return {Kind::head_bias, t, 0, 0}; }

  auto operator<=>(const ParamKey&) const = default;
};

// Value of a parameter in a network or snapshot, if it exists there.
std::optional<double> lookup_param(const std::vector<LayerWeights>& layers,
                                   const std::vector<std::vector<UnitMeta>>& meta,
                                   const std::map<TaskId, TaskHead>& heads, const ParamKey& key);
std::optional<double> lookup_param(const DenNetwork& net, const ParamKey& key);
std::optional<double> lookup_param(const NetworkSnapshot& snap, const ParamKey& key);

// Flat indexing of every body parameter plus head `task`:
// [layer 0 w (row-major), layer 0 b, ..., head weights (top-layer order), head bias].
// Head slots for top units the head does not reference exist in the index
// space but are not parameters.
class ParamLayout {
 public:
  ParamLayout(const DenNetwork& net, TaskId task);

  std::size_t size() const { return size_; }
  TaskId task() const { return task_; }
  std::size_t depth() const { return w_off_.size(); }

  std::size_t weight(std::size_t layer, std::size_t row, std::size_t col) const;
  std::size_t bias(std::size_t layer, std::size_t unit) const;
  std::size_t head_weight(std::size_t top_pos) const;
  std::size_t head_bias() const { return head_b_; }
  bool is_parameter(std::size_t index) const;

  // Hidden layer an index belongs to, or depth() for head coordinates.
  std::size_t layer_of(std::size_t index) const;

  ParamKey key(std::size_t index) const;
  std::optional<std::size_t> index(const ParamKey& key) const;

  std::vector<double> gather(const DenNetwork& net) const;
  std::vector<double> gather(const DenNetwork& net, std::span<const std::size_t> indices) const;
  void scatter(DenNetwork& net, std::span<const std::size_t> indices, std::span<const double> values) const;

 private:
  TaskId task_;
  std::size_t input_dim_;
  std::vector<std::vector<UnitId>> ids_;
  std::vector<std::size_t> w_off_, b_off_;
  std::size_t head_w_ = 0, head_b_ = 0, size_ = 0;
  std::vector<std::uint8_t> head_exists_;
};

// Explicit set of coordinates allowed to change; everything else is frozen.
class TrainableSet {
 public:
  TrainableSet() = default;
  // Sorts and deduplicates. Throws ArgumentError on an out-of-range index or
  // a head slot the head does not reference.
  TrainableSet(const ParamLayout& layout, std::vector<std::size_t> indices);

  static TrainableSet all(const ParamLayout& layout);

  const std::vector<std::size_t>& indices() const { return idx_; }
  std::size_t size() const { return idx_.size(); }
  bool empty() const { return idx_.empty(); }
  bool contains(std::size_t index) const;
  std::optional<std::size_t> position(std::size_t index) const;
  // Lowest hidden layer with a trainable coordinate (layout.depth() if only head).
  std::size_t lowest_layer(const ParamLayout& layout) const;

 private:
  std::vector<std::size_t> idx_;
};

// Mean binary cross-entropy from a raw score, computed without forming p.
double bce_loss(double score, int label);
// d loss / d score = sigmoid(score) - label.
double bce_score_grad(double score, int label);

// Mean data loss of the batch for task t (timestamp-masked).
double data_loss(const DenNetwork& net, const Batch& batch, TaskId task);

// Gradient of the mean data loss over the whole layout. Throws ArgumentError
// on an empty batch.
std::vector<double> full_gradient(const DenNetwork& net, const Batch& batch, TaskId task, const ParamLayout& layout);

// Gradient of the mean data loss restricted to the trainable coordinates,
// in TrainableSet order.
std::vector<double> backprop(const DenNetwork& net, const Batch& batch, TaskId task, const TrainableSet& trainable);

struct ProxSpec {
  std::vector<std::size_t> l1;  // layout indices
  double l1_strength = 0.0;
  GroupSpec groups;
  double group_strength = 0.0;

  bool empty() const { return (l1.empty() || l1_strength == 0.0) && (groups.groups.empty() || group_strength == 0.0); }
};

// Composite objective pieces for the generic solver, expressed on positions
// of the optimisation vector.
struct ProxTerms {
  std::vector<std::size_t> l1;
  double l1_strength = 0.0;
  std::vector<std::vector<std::size_t>> groups;
  double group_strength = 0.0;
};

struct SmoothValue {
  double total = 0.0;  // data loss + smooth penalties
  double data = 0.0;   // data loss only
};
using SmoothFn = std::function<SmoothValue(std::span<const double> theta, std::span<double> grad)>;

struct SolveResult {
  std::vector<double> theta;
  double objective = 0.0;  // smooth + nonsmooth
  double data_loss = 0.0;
  int epochs = 0;
  double learning_rate = 0.0;
  int halvings = 0;
  std::vector<double> history;  // objective after each accepted epoch
};

// Proximal gradient descent with a fixed step that is halved (and the epoch
// retried) whenever the objective would increase or become non-finite.
// Throws TrainingDiverged if a non-finite objective survives max_halvings.
SolveResult proximal_gradient(const SmoothFn& f, const ProxTerms& prox, std::vector<double> theta,
                              const TrainConfig& cfg);
double nonsmooth_value(std::span<const double> theta, const ProxTerms& prox);
void apply_prox(std::span<double> theta, const ProxTerms& prox, double step);

struct TrainResult {
  double objective = 0.0;
  double data_loss = 0.0;
  int epochs = 0;
  double learning_rate = 0.0;
  std::vector<double> history;
};

// Minimises data loss + smooth penalties + prox terms over the trainable
// coordinates of task t. Penalty anchors are indexed like the TrainableSet.
// Coordinates outside the set are never written.
TrainResult train(DenNetwork& net, const Batch& batch, TaskId task, const TrainableSet& trainable,
                  const std::vector<AnchorPenalty>& smooth, const ProxSpec& prox, const TrainConfig& cfg);

}  // namespace den
