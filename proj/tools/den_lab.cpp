// den-lab: run lifelong-learning experiments and inspect their checkpoints.
#include <cstdio>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "den/checkpoint.hpp"
#include "den/errors.hpp"
#include "den/experiment.hpp"

namespace {

constexpr int kBadInput = 2;
constexpr int kDiverged = 3;

int cmd_init(const std::string& out) {
  const std::string text = den::dump_config(den::default_config());
  if (out.empty()) {
    std::cout << text;
    return 0;
  }
  std::ofstream f(out, std::ios::binary);
  if (!f) throw den::ConfigError("cannot write " + out);
  f << text;
  std::cerr << "wrote " << out << "\n";
  return 0;
}

int cmd_run(const std::string& config, const std::optional<std::uint64_t>& seed, const std::string& out) {
  den::ExperimentConfig cfg = den::load_config(config);
  if (seed) cfg.set_seed(*seed);
  if (!out.empty()) cfg.output_dir = out;
  const auto tasks = den::generate_tasks(cfg.tasks);
  const den::RunResult r = den::run_experiment(cfg, tasks);
  den::write_run(r, cfg, tasks, cfg.output_dir);
  for (const auto& s : r.summaries) {
    std::printf("%-12s avg_auroc=%.6f final_capacity=%zu rel_capacity=%.4f\n", s.learner.c_str(), s.avg_auroc,
                s.final_capacity, s.rel_capacity);
  }
  std::printf("wrote %s\n", cfg.output_dir.c_str());
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& data, int task) {
  const den::DenNetwork net = den::load_checkpoint(checkpoint);
  std::ifstream in(data, std::ios::binary);
  if (!in) throw den::FormatError("cannot read " + data);
  const auto tasks = den::read_tasks_csv(in);
  for (const auto& d : tasks) {
    if (d.task_id != task) continue;
    // Held-out rows when the file has them, otherwise every row of the task.
    const den::Batch b = d.test.empty() ? den::Batch{d.features, d.labels} : d.batch(den::Split::test);
    const auto p = den::predict(net, b.features, task);
    std::printf("%.6f\n", den::auroc(p, b.labels));
    return 0;
  }
  throw den::ArgumentError("no rows for task " + std::to_string(task) + " in " + data);
}

int cmd_inspect(const std::string& checkpoint) {
  std::cout << den::inspect_report(den::load_checkpoint(checkpoint));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"den-lab: dynamically expandable networks and continual-learning baselines"};
  app.require_subcommand(1);

  std::string init_out;
  auto* init = app.add_subcommand("init", "write the default experiment config");
  init->add_option("--out", init_out, "destination file (stdout when omitted)");

  std::string config, run_out;
  std::optional<std::uint64_t> seed;
  auto* run = app.add_subcommand("run", "run every configured learner through the task sequence");
  run->add_option("--config", config, "experiment config (JSON)")->required();
  run->add_option("--seed", seed, "override the config seed");
  run->add_option("--out", run_out, "output directory (overrides output_dir)");

  std::string ev_ckpt, ev_data;
  int ev_task = 1;
  auto* eval = app.add_subcommand("eval", "print the AUROC of one task head on a dataset CSV");
  eval->add_option("--checkpoint", ev_ckpt, "network checkpoint")->required();
  eval->add_option("--data", ev_data, "dataset CSV (task_id,split,y,x0..)")->required();
  eval->add_option("--task", ev_task, "task id")->required();

  std::string in_ckpt;
  auto* inspect = app.add_subcommand("inspect", "summarise a checkpoint");
  inspect->add_option("checkpoint", in_ckpt, "network checkpoint")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kBadInput;
  }

  try {
    if (*init) return cmd_init(init_out);
    if (*run) return cmd_run(config, seed, run_out);
    if (*eval) return cmd_eval(ev_ckpt, ev_data, ev_task);
    if (*inspect) return cmd_inspect(in_ckpt);
  } catch (const den::RunDiverged& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kDiverged;
  } catch (const den::TrainingDiverged& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kDiverged;
  } catch (const den::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kBadInput;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
