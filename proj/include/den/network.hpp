#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <vector>

#include "den/numerics.hpp"

namespace den {

using UnitId = std::uint64_t;
using TaskId = int;

enum class UnitOrigin { initial, expanded, split_copy };

struct UnitMeta {
  UnitId id = 0;
  int timestamp = 1;  // stage that created the unit
  UnitOrigin origin = UnitOrigin::initial;
  UnitId source = 0;  // only meaningful for split_copy

  friend bool operator==(const UnitMeta&, const UnitMeta&) = default;
};

// Incoming weights of one hidden layer: w is in_dim x out_dim, b has out_dim entries.
struct LayerWeights {
  Matrix w;
  std::vector<double> b;

  friend bool operator==(const LayerWeights&, const LayerWeights&) = default;
};

// Output unit for one task. Weights are keyed by top-hidden unit id and never
// reference a unit stamped later than the task.
struct TaskHead {
  TaskId task = 0;
  std::map<UnitId, double> weights;
  double bias = 0.0;

  friend bool operator==(const TaskHead&, const TaskHead&) = default;
};

// Weights, metadata and heads as they were at the end of the previous stage.
struct NetworkSnapshot {
  std::vector<LayerWeights> layers;
  std::vector<std::vector<UnitMeta>> unit_meta;
  std::map<TaskId, TaskHead> heads;

  bool empty() const { return layers.empty(); }
  std::optional<std::size_t> position(std::size_t layer, UnitId id) const;

  friend bool operator==(const NetworkSnapshot&, const NetworkSnapshot&) = default;
};

// Everything a checkpoint stores. DenNetwork validates it on construction.
struct NetworkState {
  std::size_t input_dim = 0;
  int current_stage = 1;
  UnitId next_unit_id = 1;
  std::vector<LayerWeights> layers;
  std::vector<std::vector<UnitMeta>> unit_meta;
  std::map<TaskId, TaskHead> heads;
  NetworkSnapshot snapshot_prev;
  SeededRng::State rng_state{};

  friend bool operator==(const NetworkState&, const NetworkState&) = default;
};

struct Batch {
  Matrix features;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
};

enum class HeadInit { zero, random };

// Feedforward ReLU network that grows by appending hidden units. Hidden layer
// indices are 0-based: layer(h) holds the weights into hidden layer h, and the
// task heads read the last hidden layer.
class DenNetwork {
 public:
  // Throws IntegrityError for an empty hidden layer or no hidden layers.
  DenNetwork(std::size_t input_dim, const std::vector<std::size_t>& hidden_widths, std::uint64_t seed);
  explicit DenNetwork(NetworkState state);

  std::size_t input_dim() const { return s_.input_dim; }
  std::size_t depth() const { return s_.layers.size(); }
  std::size_t width(std::size_t layer) const { return s_.unit_meta.at(layer).size(); }
  std::size_t top() const { return depth() - 1; }
  int stage() const { return s_.current_stage; }

  const std::vector<LayerWeights>& layers() const { return s_.layers; }
  LayerWeights& layer(std::size_t h) { return s_.layers.at(h); }
  const LayerWeights& layer(std::size_t h) const { return s_.layers.at(h); }

  const std::vector<UnitMeta>& units(std::size_t h) const { return s_.unit_meta.at(h); }
  std::optional<std::size_t> position(std::size_t layer, UnitId id) const;
  // Throws ArgumentError for an unknown unit.
  std::size_t require_position(std::size_t layer, UnitId id) const;

  const std::map<TaskId, TaskHead>& heads() const { return s_.heads; }
  bool has_head(TaskId t) const { return s_.heads.count(t) != 0; }
  // Throws MissingHeadError.
  TaskHead& head(TaskId t);
  const TaskHead& head(TaskId t) const;
  // Creates head t over every top unit stamped <= t. Replaces an existing head.
  TaskHead& add_head(TaskId t, HeadInit init);

  const NetworkSnapshot& snapshot() const { return s_.snapshot_prev; }
  SeededRng& rng() { return rng_; }
  // Copy of the full state including the generator position.
  NetworkState state() const;

  // Appends count units to hidden layer h, stamped with the current stage.
  // Incoming and outgoing weights are He-initialised, biases start at 0, and
  // the current stage's head (if any) gains a weight for each new top unit.
  std::vector<UnitId> add_units(std::size_t layer, int count, SeededRng& rng);

  // Deletes units whose incoming weights and bias are all exactly zero.
  // Throws IntegrityError otherwise, leaving the network untouched.
  void remove_units(std::size_t layer, std::span<const UnitId> ids);

  // Restores unit id's incoming weights to the snapshot and appends a copy
  // stamped with the current stage that carries the drifted incoming weights
  // and a copy of the unit's outgoing weights. Returns the copy's id.
  UnitId split_unit(std::size_t layer, UnitId id);

  // Scalar parameter count: layer weights, biases, head weights and head biases.
  std::size_t capacity() const;

  void snapshot_commit();

  // Throws IntegrityError when dimensions disagree with the metadata.
  void check_consistency() const;

 private:
  NetworkState s_;
  SeededRng rng_;
};

// Activations of hidden layer h that task t may read: units stamped > t are off.
std::vector<std::uint8_t> active_mask(const DenNetwork& net, std::size_t layer, TaskId task);

// Head weights of task t aligned with the current top-layer order (0 where absent).
std::vector<double> head_vector(const DenNetwork& net, TaskId task);

struct ForwardCache {
  std::vector<Matrix> pre;  // per hidden layer, N x width
  std::vector<Matrix> act;  // per hidden layer, masked ReLU output
  std::vector<double> score;
  std::size_t start_layer = 0;
};

// Batch forward pass for task t starting at hidden layer start_layer. input is
// the feature matrix when start_layer == 0, otherwise the activations of
// hidden layer start_layer-1. Entries below start_layer are left untouched.
void forward_batch(const DenNetwork& net, TaskId task, const Matrix& input, std::size_t start_layer,
                   ForwardCache& cache);

// Probability for one example with timestamp masking. Throws MissingHeadError.
double forward(const DenNetwork& net, std::span<const double> x, TaskId task);
std::vector<double> predict(const DenNetwork& net, const Matrix& x, TaskId task);

}  // namespace den
