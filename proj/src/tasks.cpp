#include "den/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>

#include "den/errors.hpp"

namespace den {

std::string to_string(TaskFamily f) { return f == TaskFamily::shared_structure ? "shared_structure" : "permuted"; }

std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

void TaskFamilyConfig::validate() const {
  if (num_tasks < 1) throw ArgumentError("tasks.T must be >= 1");
  if (dim < 2) throw ArgumentError("tasks.d must be >= 2");
  if (!(relatedness >= 0.0 && relatedness <= 1.0)) throw ArgumentError("tasks.relatedness must be in [0,1]");
  if (!(noise_std >= 0.0) || !std::isfinite(noise_std)) throw ArgumentError("tasks.noise_std must be >= 0");
  if (n.train < 2 || n.val < 2 || n.test < 2) throw ArgumentError("tasks: every split needs at least 2 examples");
  if (family == TaskFamily::shared_structure && relatedness < 1.0 &&
      static_cast<std::size_t>(num_tasks) + 1 > dim) {
    throw ArgumentError("tasks: shared_structure with relatedness < 1 needs T + 1 <= d orthogonal directions");
  }
}

const std::vector<std::size_t>& TaskDataset::indices(Split s) const {
  switch (s) {
    case Split::train: return train;
    case Split::val: return val;
    case Split::test: return test;
  }
  return train;
}

Batch TaskDataset::batch(Split s) const {
  const auto& idx = indices(s);
  Batch b{Matrix(idx.size(), features.cols()), {}};
  b.labels.reserve(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    auto src = features.row(idx[i]);
    std::copy(src.begin(), src.end(), b.features.row(i).begin());
    b.labels.push_back(labels[idx[i]]);
  }
  return b;
}

void TaskDataset::validate() const {
  if (labels.size() != features.rows()) throw ArgumentError("task " + std::to_string(task_id) + ": label count mismatch");
  for (int y : labels) {
    if (y != 0 && y != 1) throw ArgumentError("task " + std::to_string(task_id) + ": labels must be 0/1");
  }
  std::vector<int> seen(labels.size(), 0);
  for (Split s : {Split::train, Split::val, Split::test}) {
    bool pos = false, neg = false;
    for (std::size_t i : indices(s)) {
      if (i >= labels.size()) throw ArgumentError("split index out of range");
      if (seen[i]++) throw ArgumentError("splits overlap");
      (labels[i] ? pos : neg) = true;
    }
    if (!pos || !neg) {
      throw ArgumentError("task " + std::to_string(task_id) + ": " + to_string(s) + " split lacks a class");
    }
  }
  if (std::find(seen.begin(), seen.end(), 0) != seen.end()) throw ArgumentError("splits are not exhaustive");
}

namespace {

std::vector<std::vector<double>> orthonormal_pool(std::size_t count, std::size_t dim, SeededRng& rng) {
  std::vector<std::vector<double>> pool;
  while (pool.size() < count) {
    std::vector<double> v(dim);
    for (double& x : v) x = rng.normal();
    for (const auto& u : pool) {
      const double p = dot(v, u);
      for (std::size_t i = 0; i < dim; ++i) v[i] -= p * u[i];
    }
    const double n = norm2(v);
    if (n < 1e-8) continue;
    for (double& x : v) x /= n;
    pool.push_back(std::move(v));
  }
  return pool;
}

bool balanced(const TaskDataset& ds) {
  for (Split s : {Split::train, Split::val, Split::test}) {
    bool pos = false, neg = false;
    for (std::size_t i : ds.indices(s)) (ds.labels[i] ? pos : neg) = true;
    if (!pos || !neg) return false;
  }
  return true;
}

// Draws Gaussian inputs labelled by a noisy linear rule until every split holds
// both classes.
TaskDataset sample_linear_task(TaskId id, const std::vector<double>& direction, const TaskFamilyConfig& cfg,
                               SeededRng& rng) {
  const std::size_t total = cfg.n.train + cfg.n.val + cfg.n.test;
  TaskDataset ds;
  ds.task_id = id;
  for (std::size_t i = 0; i < total; ++i) {
    (i < cfg.n.train ? ds.train : i < cfg.n.train + cfg.n.val ? ds.val : ds.test).push_back(i);
  }
  for (int attempt = 0; attempt < 100; ++attempt) {
    ds.features = Matrix(total, cfg.dim);
    ds.labels.assign(total, 0);
    for (std::size_t i = 0; i < total; ++i) {
      auto x = ds.features.row(i);
      for (double& v : x) v = rng.normal();
      const double margin = dot(x, direction) + cfg.noise_std * rng.normal();
      ds.labels[i] = margin > 0.0 ? 1 : 0;
    }
    if (balanced(ds)) return ds;
  }
  throw GenerationError("task " + std::to_string(id) + ": no class-balanced sample after 100 attempts");
}

}  // namespace

namespace {

// Directions and the generator positioned right after drawing them.
std::vector<std::vector<double>> draw_directions(const TaskFamilyConfig& cfg, SeededRng& rng) {
  const std::size_t pool_size = cfg.relatedness < 1.0 ? static_cast<std::size_t>(cfg.num_tasks) + 1 : 1;
  const auto pool = orthonormal_pool(pool_size, cfg.dim, rng);
  const double shared = std::sqrt(cfg.relatedness);
  const double own = std::sqrt(1.0 - cfg.relatedness);
  std::vector<std::vector<double>> out;
  for (int t = 1; t <= cfg.num_tasks; ++t) {
    std::vector<double> w(cfg.dim);
    for (std::size_t i = 0; i < cfg.dim; ++i) {
      w[i] = shared * pool[0][i] + (pool_size > 1 ? own * pool[static_cast<std::size_t>(t)][i] : 0.0);
    }
    out.push_back(std::move(w));
  }
  return out;
}

}  // namespace

std::vector<std::vector<double>> task_directions(const TaskFamilyConfig& cfg) {
  cfg.validate();
  SeededRng rng(cfg.seed);
  return draw_directions(cfg, rng);
}

std::vector<TaskDataset> generate_shared(const TaskFamilyConfig& cfg) {
  cfg.validate();
  SeededRng rng(cfg.seed);
  const auto dirs = draw_directions(cfg, rng);
  std::vector<TaskDataset> out;
  for (int t = 1; t <= cfg.num_tasks; ++t) {
    out.push_back(sample_linear_task(t, dirs[static_cast<std::size_t>(t - 1)], cfg, rng));
  }
  return out;
}

std::vector<std::vector<std::size_t>> task_permutations(const TaskFamilyConfig& cfg) {
  cfg.validate();
  SeededRng rng = SeededRng::derive(cfg.seed, 0x7065726dULL);
  std::vector<std::vector<std::size_t>> perms;
  for (int t = 1; t <= cfg.num_tasks; ++t) {
    std::vector<std::size_t> p(cfg.dim);
    std::iota(p.begin(), p.end(), 0);
    if (t > 1) rng.shuffle(p);
    perms.push_back(std::move(p));
  }
  return perms;
}

std::vector<TaskDataset> generate_permuted(const TaskFamilyConfig& cfg) {
  cfg.validate();
  SeededRng rng(cfg.seed);
  const auto direction = orthonormal_pool(1, cfg.dim, rng).front();
  const TaskDataset base = sample_linear_task(1, direction, cfg, rng);
  const auto perms = task_permutations(cfg);
  std::vector<TaskDataset> out;
  for (int t = 1; t <= cfg.num_tasks; ++t) {
    TaskDataset ds = base;
    ds.task_id = t;
    const auto& p = perms[static_cast<std::size_t>(t - 1)];
    for (std::size_t i = 0; i < ds.features.rows(); ++i) {
      auto src = base.features.row(i);
      auto dst = ds.features.row(i);
      for (std::size_t j = 0; j < cfg.dim; ++j) dst[j] = src[p[j]];
    }
    out.push_back(std::move(ds));
  }
  return out;
}

std::vector<TaskDataset> generate_tasks(const TaskFamilyConfig& cfg) {
  return cfg.family == TaskFamily::shared_structure ? generate_shared(cfg) : generate_permuted(cfg);
}

double auroc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw MetricError("auroc: scores and labels differ in length");
  std::uint64_t n_pos = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw MetricError("auroc: labels must be 0/1");
    if (!std::isfinite(scores[i])) throw MetricError("auroc: non-finite score");
    n_pos += static_cast<std::uint64_t>(labels[i]);
  }
  const std::uint64_t n_neg = labels.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) throw MetricError("auroc: both classes must be present");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Twice the midrank of a tie block [i, j) is (i + 1) + j, an integer.
  std::uint64_t rank_sum2 = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i + 1;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const std::uint64_t mid2 = (i + 1) + j;
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]]) rank_sum2 += mid2;
    }
    i = j;
  }
  const std::uint64_t u2 = rank_sum2 - n_pos * (n_pos + 1);
  return static_cast<double>(u2) / static_cast<double>(2 * n_pos * n_neg);
}

void write_tasks_csv(std::ostream& out, std::span<const TaskDataset> tasks) {
  if (tasks.empty()) return;
  const std::size_t d = tasks.front().dim();
  out << "task_id,split,y";
  for (std::size_t j = 0; j < d; ++j) out << ",x" << j;
  out << '\n';
  char buf[32];
  for (const auto& ds : tasks) {
    if (ds.dim() != d) throw ShapeError("write_tasks_csv: tasks differ in feature dimension");
    for (Split s : {Split::train, Split::val, Split::test}) {
      for (std::size_t i : ds.indices(s)) {
        out << ds.task_id << ',' << to_string(s) << ',' << ds.labels[i];
        for (double v : ds.features.row(i)) {
          std::snprintf(buf, sizeof buf, "%.17g", v);
          out << ',' << buf;
        }
        out << '\n';
      }
    }
  }
}

std::vector<TaskDataset> read_tasks_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw FormatError("csv: missing header");
  std::vector<std::string> header;
  {
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) header.push_back(cell);
  }
  if (header.size() < 4 || header[0] != "task_id" || header[1] != "split" || header[2] != "y") {
    throw FormatError("csv: header must be task_id,split,y,x0..");
  }
  const std::size_t d = header.size() - 3;
  for (std::size_t j = 0; j < d; ++j) {
    if (header[3 + j] != "x" + std::to_string(j)) throw FormatError("csv: unexpected column " + header[3 + j]);
  }
  struct Rows {
    std::vector<double> x;
    std::vector<int> y;
    std::vector<Split> split;
  };
  std::map<TaskId, Rows> by_task;
  std::vector<TaskId> order;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    if (line.back() == '\r') line.pop_back();
    std::stringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() != header.size()) throw FormatError("csv line " + std::to_string(line_no) + ": wrong column count");
    try {
      const TaskId t = std::stoi(cells[0]);
      Split s;
      if (cells[1] == "train") {
        s = Split::train;
      } else if (cells[1] == "val") {
        s = Split::val;
      } else if (cells[1] == "test") {
        s = Split::test;
      } else {
        throw FormatError("csv line " + std::to_string(line_no) + ": unknown split '" + cells[1] + "'");
      }
      const int y = std::stoi(cells[2]);
      if (!by_task.count(t)) order.push_back(t);
      Rows& r = by_task[t];
      r.y.push_back(y);
      r.split.push_back(s);
      for (std::size_t j = 0; j < d; ++j) r.x.push_back(std::stod(cells[3 + j]));
    } catch (const std::logic_error&) {
      throw FormatError("csv line " + std::to_string(line_no) + ": unparsable value");
    }
  }
  std::vector<TaskDataset> out;
  for (TaskId t : order) {
    Rows& r = by_task[t];
    TaskDataset ds;
    ds.task_id = t;
    const std::size_t n = r.y.size();
    ds.features = Matrix(n, d, std::move(r.x));
    ds.labels = std::move(r.y);
    for (std::size_t i = 0; i < n; ++i) {
      (r.split[i] == Split::train ? ds.train : r.split[i] == Split::val ? ds.val : ds.test).push_back(i);
    }
    out.push_back(std::move(ds));
  }
  return out;
}

}  // namespace den
