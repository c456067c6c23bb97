#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "den/network.hpp"
#include "den/tasks.hpp"
#include "den/trainer.hpp"

namespace den {

struct HyperParams {
  double mu = 1e-4;      // l1 strength (first task, head fit, expansion) and l2 decay in selective retraining
  double gamma = 1e-3;   // group-lasso strength on expanded units
  double lambda = 1e-2;  // anchor strength
  double tau = 0.35;     // expansion trigger on the post-retrain training loss
  double sigma = 0.02;   // split trigger on incoming-weight drift
  int k = 8;             // units added per hidden layer on expansion
  TrainConfig train;

  // Throws ArgumentError unless mu, gamma, lambda >= 0, tau > 0, sigma >= 0, k >= 1.
  void validate() const;
};

// Units reachable from head t through nonzero previous-stage weights.
struct SubnetworkSelection {
  TaskId task = 0;
  std::vector<std::vector<UnitId>> units;  // per hidden layer, in layer order
  std::vector<std::size_t> inputs;         // input features feeding selected layer-0 units
  // Edges between selected units of adjacent layers, their biases and all of head t.
  std::vector<ParamKey> keys;

  bool contains(std::size_t layer, UnitId id) const;
  std::size_t unit_count() const;
};

// Parameter values at creation time for parameters the snapshot does not know.
using InitBook = std::map<ParamKey, double>;

struct DriftEntry {
  std::size_t layer = 0;
  UnitId unit = 0;
  double rho = 0.0;
  bool split = false;
  UnitId copy = 0;  // id of the split copy when split
};

struct DriftReport {
  std::vector<DriftEntry> entries;
  std::size_t split_count() const;
};

struct ExpansionReport {
  std::vector<int> added, pruned, surviving;  // per hidden layer
  double loss = 0.0;                          // data loss after expansion training
  int total_surviving() const;
};

struct StageReport {
  TaskId task = 0;
  double loss = 0.0;        // post-selective-retrain data loss (first task: training loss)
  double final_loss = 0.0;  // data loss at the end of the stage
  bool expanded = false;
  ExpansionReport expansion;
  DriftReport drift;
  std::size_t selected_units = 0;
  std::size_t capacity_before = 0;
  std::size_t capacity_after = 0;
  double wall_ms = 0.0;
};

// t = 1: every parameter trains under an l1 prox of strength mu (biases
// excluded), head 1 is created, and the stage is committed.
StageReport den_first_task(DenNetwork& net, const TaskDataset& data, const HyperParams& hp);

// Creates head t at zero and fits it alone with an l1 prox on its weights.
// The body is not touched. Records the fitted head in book.
const TaskHead& fit_output_head(DenNetwork& net, const Batch& batch, TaskId task, const HyperParams& hp,
                                InitBook* book = nullptr);

// Breadth-first search from head t down through nonzero weights of the
// previous-stage snapshot (or the current weights if none exists yet).
SubnetworkSelection select_subnetwork(const DenNetwork& net, const TaskHead& head);

// Resolves selection keys against the current layout of head t.
TrainableSet trainable_set(const DenNetwork& net, const ParamLayout& layout, const std::vector<ParamKey>& keys);

// Trains the selection under squared-l2 decay mu on weights. Returns the
// final training data loss.
double selective_retrain(DenNetwork& net, const Batch& batch, const SubnetworkSelection& sel, const HyperParams& hp);

// Adds k units to every hidden layer, trains only their parameters under
// l1 (mu) and group lasso (gamma), then removes units whose incoming group is
// exactly zero, top layer first.
ExpansionReport dynamic_expand(DenNetwork& net, const Batch& batch, TaskId task, const HyperParams& hp,
                               InitBook* book = nullptr);

// Incoming-weight drift against the snapshot for every unit present in it.
// Sources created this stage are ignored.
DriftReport compute_drift(const DenNetwork& net, double sigma);

// Splits units with drift above sigma, then re-solves the stage's touched
// parameters with an anchor of strength lambda.
DriftReport split_stage(DenNetwork& net, const Batch& batch, TaskId task, const HyperParams& hp,
                        const SubnetworkSelection& sel, const InitBook& book);

// Runs one full stage. Throws SequencingError unless data.task_id equals
// the network's current stage.
StageReport den_observe(DenNetwork& net, const TaskDataset& data, const HyperParams& hp);

// Common surface of DEN and the baselines.
class Learner {
 public:
  virtual ~Learner() = default;
  virtual std::string name() const = 0;
  // Throws SequencingError when tasks arrive out of order.
  virtual StageReport observe(const TaskDataset& data) = 0;
  // Probabilities for task t. Throws MissingHeadError for an unseen task.
  virtual std::vector<double> predict(const Matrix& x, TaskId task) const = 0;
  virtual std::size_t capacity() const = 0;
  virtual int tasks_seen() const = 0;
  // Networks owned by the learner (several for STL).
  virtual std::vector<const DenNetwork*> networks() const = 0;
};

enum class LearnerKind { den, l2, ewc, stl, progressive };
enum class FisherOverride { none, zero, unit };

std::string to_string(LearnerKind k);

struct LearnerConfig {
  LearnerKind kind = LearnerKind::den;
  std::string name;                        // defaults to the kind name
  std::vector<std::size_t> architecture;   // input dim followed by hidden widths
  HyperParams hp;
  FisherOverride fisher = FisherOverride::none;  // ewc only
};

std::unique_ptr<Learner> make_learner(const LearnerConfig& cfg, std::uint64_t seed);

// Progressive capacity: edges from a unit into a later-stamped or equal
// column, biases and heads. Zeroed backward edges are not parameters.
std::size_t progressive_capacity(const DenNetwork& net);

}  // namespace den
