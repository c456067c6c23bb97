#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "den/lifelong.hpp"
#include "den/tasks.hpp"

namespace den {

enum class CheckpointPolicy { none, final_stage, every_stage };

struct ExperimentConfig {
  TaskFamilyConfig tasks;
  bool tasks_seed_set = false;  // tasks.seed given explicitly; otherwise follows seed
  std::vector<LearnerConfig> learners;
  std::uint64_t seed = 1;
  std::string output_dir = "runs/default";
  bool eval_every_stage = true;
  bool record_wall_time = false;  // off keeps metrics.csv byte-identical across runs
  CheckpointPolicy checkpoints = CheckpointPolicy::final_stage;
  bool export_data = false;

  // Throws ConfigError naming the offending field.
  void validate() const;
  // Applies --seed: the experiment seed and, unless pinned, the task seed.
  void set_seed(std::uint64_t s);
};

// Strict parse: unknown keys, wrong types and out-of-range values raise
// ConfigError with the JSON path (or line and column for syntax errors).
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);
std::string dump_config(const ExperimentConfig& cfg);
ExperimentConfig default_config();

struct MetricsRow {
  std::string learner;
  int stage = 0;
  TaskId task = 0;
  double auroc = 0.0;
  std::size_t capacity = 0;
  double rel_capacity = 0.0;
  double wall_ms = 0.0;
};

struct LearnerSummary {
  std::string learner;
  double avg_auroc = 0.0;  // mean test AUROC over all tasks after the last stage
  std::size_t final_capacity = 0;
  double rel_capacity = 0.0;
  std::vector<StageReport> stages;
};

struct RunResult {
  std::vector<MetricsRow> rows;
  std::vector<LearnerSummary> summaries;
  std::map<std::string, std::string> checkpoints;  // file name -> contents
  std::size_t stl_reference_capacity = 0;          // T copies of one single-task net

  const LearnerSummary& summary(const std::string& learner) const;
  // AUROC of task s evaluated after stage t.
  double auroc(const std::string& learner, int stage, TaskId task) const;
};

// Capacity of one freshly built net of this architecture with one head.
std::size_t single_net_capacity(const std::vector<std::size_t>& architecture);

// Deterministic given cfg. Throws RunDiverged when training diverges.
RunResult run_experiment(const ExperimentConfig& cfg);
RunResult run_experiment(const ExperimentConfig& cfg, const std::vector<TaskDataset>& tasks);

std::string metrics_csv(const RunResult& r);
std::string stages_csv(const RunResult& r);
std::string summary_json(const RunResult& r);

// Writes metrics.csv, stages.csv, summary.json, checkpoints/ and (optionally)
// tasks.csv into dir.
void write_run(const RunResult& r, const ExperimentConfig& cfg, const std::vector<TaskDataset>& tasks,
               const std::filesystem::path& dir);

// Human-readable checkpoint report.
std::string inspect_report(const DenNetwork& net);

// Parallelism cap for read-only evaluation, from DEN_LAB_THREADS (default 1).
unsigned eval_threads();

}  // namespace den
