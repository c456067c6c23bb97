#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "den/network.hpp"

namespace den {

enum class TaskFamily { shared_structure, permuted };
enum class Split { train, val, test };

std::string to_string(TaskFamily f);
std::string to_string(Split s);

struct SplitSizes {
  std::size_t train = 200;
  std::size_t val = 50;
  std::size_t test = 500;
};

struct TaskFamilyConfig {
  TaskFamily family = TaskFamily::shared_structure;
  int num_tasks = 10;
  std::size_t dim = 32;
  SplitSizes n;
  double relatedness = 0.5;  // fraction of each task direction shared with the others
  double noise_std = 0.5;
  std::uint64_t seed = 1;

  // Throws ArgumentError unless T >= 1, d >= 2, relatedness in [0,1], every
  // split non-empty, and the direction pool fits in d dimensions.
  void validate() const;
};

// One task's examples. Rows are stored train, then val, then test.
struct TaskDataset {
  TaskId task_id = 0;
  Matrix features;
  std::vector<int> labels;
  std::vector<std::size_t> train, val, test;

  const std::vector<std::size_t>& indices(Split s) const;
  Batch batch(Split s) const;
  std::size_t dim() const { return features.cols(); }

  // Throws ArgumentError when labels are not binary, a split lacks a class,
  // or splits overlap or miss a row.
  void validate() const;
};

// Label of task t is 1[w_t . x + noise > 0] with x ~ N(0, I) and
// w_t = sqrt(r) u_0 + sqrt(1 - r) u_t over an orthonormal pool {u_0..u_T}.
std::vector<TaskDataset> generate_shared(const TaskFamilyConfig& cfg);
// The unit-norm label directions w_1..w_T used by generate_shared.
std::vector<std::vector<double>> task_directions(const TaskFamilyConfig& cfg);

// One base dataset; task t permutes its feature columns by pi_t (pi_1 = id).
std::vector<TaskDataset> generate_permuted(const TaskFamilyConfig& cfg);
std::vector<std::vector<std::size_t>> task_permutations(const TaskFamilyConfig& cfg);

std::vector<TaskDataset> generate_tasks(const TaskFamilyConfig& cfg);

// Probability that a random positive outranks a random negative, ties 1/2,
// via the Mann-Whitney rank statistic. Throws MetricError on single-class
// labels, non-binary labels, non-finite scores or a length mismatch.
double auroc(std::span<const double> scores, std::span<const int> labels);

// CSV with header task_id,split,y,x0..x{d-1}; reals with 17 significant digits.
void write_tasks_csv(std::ostream& out, std::span<const TaskDataset> tasks);
// Throws FormatError on malformed input.
std::vector<TaskDataset> read_tasks_csv(std::istream& in);

}  // namespace den
