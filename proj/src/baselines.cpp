#include <chrono>

#include "den/errors.hpp"
#include "den/lifelong.hpp"

namespace den {

std::string to_string(LearnerKind k) {
  switch (k) {
    case LearnerKind::den: return "den";
    case LearnerKind::l2: return "l2";
    case LearnerKind::ewc: return "ewc";
    case LearnerKind::stl: return "stl";
    case LearnerKind::progressive: return "progressive";
  }
  return "?";
}

namespace {

using Clock = std::chrono::steady_clock;

std::vector<std::size_t> hidden_of(const std::vector<std::size_t>& arch) {
  if (arch.size() < 2) throw ArgumentError("architecture needs an input size and at least one hidden layer");
  return {arch.begin() + 1, arch.end()};
}

void expect_task(const TaskDataset& data, int seen, const std::string& who) {
  if (data.task_id != seen + 1) {
    throw SequencingError(who + ": expected task " + std::to_string(seen + 1) + ", got " +
                          std::to_string(data.task_id));
  }
}

void require_seen(TaskId task, int seen) {
  if (task < 1 || task > seen) throw MissingHeadError("no head for task " + std::to_string(task));
}

StageReport plain_report(TaskId t, std::size_t before, std::size_t after, double loss, Clock::time_point start) {
  StageReport rep;
  rep.task = t;
  rep.loss = rep.final_loss = loss;
  rep.capacity_before = before;
  rep.capacity_after = after;
  rep.wall_ms = std::chrono::duration<double, std::milli>(Clock::now() - start).count();
  return rep;
}

class DenLearner final : public Learner {
 public:
  DenLearner(const LearnerConfig& cfg, std::uint64_t seed)
      : name_(cfg.name), hp_(cfg.hp), net_(cfg.architecture.at(0), hidden_of(cfg.architecture), seed) {
    hp_.validate();
  }
  std::string name() const override { return name_; }
  StageReport observe(const TaskDataset& data) override { return den_observe(net_, data, hp_); }
  std::vector<double> predict(const Matrix& x, TaskId task) const override { return den::predict(net_, x, task); }
  std::size_t capacity() const override { return net_.capacity(); }
  int tasks_seen() const override { return net_.stage() - 1; }
  std::vector<const DenNetwork*> networks() const override { return {&net_}; }

 private:
  std::string name_;
  HyperParams hp_;
  DenNetwork net_;
};

// Single shared body trained on every task, one head per task. The anchor is
// the previous stage's weights; the new head is anchored to its zero init.
// With fisher set, the anchor is a sum of per-task Fisher-weighted terms.
class AnchoredLearner final : public Learner {
 public:
  AnchoredLearner(const LearnerConfig& cfg, std::uint64_t seed)
      : name_(cfg.name),
        hp_(cfg.hp),
        ewc_(cfg.kind == LearnerKind::ewc),
        fisher_(cfg.fisher),
        net_(cfg.architecture.at(0), hidden_of(cfg.architecture), seed) {
    hp_.validate();
  }
  std::string name() const override { return name_; }
  std::vector<double> predict(const Matrix& x, TaskId task) const override { return den::predict(net_, x, task); }
  std::size_t capacity() const override { return net_.capacity(); }
  int tasks_seen() const override { return seen_; }
  std::vector<const DenNetwork*> networks() const override { return {&net_}; }

  StageReport observe(const TaskDataset& data) override {
    expect_task(data, seen_, name_);
    const auto start = Clock::now();
    const TaskId t = data.task_id;
    const std::size_t before = net_.capacity();
    const Batch batch = data.batch(Split::train);
    net_.add_head(t, t == 1 ? HeadInit::random : HeadInit::zero);
    const ParamLayout layout(net_, t);
    const TrainableSet all = TrainableSet::all(layout);
    std::vector<AnchorPenalty> smooth;
    if (t > 1 && hp_.lambda > 0.0) smooth = ewc_ ? ewc_penalties(layout, all) : l2_penalty(layout, all);
    const TrainResult res = train(net_, batch, t, all, smooth, {}, hp_.train);
    if (ewc_) remember(t, batch);
    net_.snapshot_commit();
    ++seen_;
    return plain_report(t, before, net_.capacity(), res.data_loss, start);
  }

 private:
  struct TaskMemory {
    std::map<ParamKey, double> optimum;
    std::map<ParamKey, double> fisher;
  };

  // Value a parameter must be pulled toward when the reference lacks it.
  double init_value(const ParamLayout& layout, std::size_t index) const {
    const ParamKey key = layout.key(index);
    if (key.kind == ParamKey::Kind::head_weight || key.kind == ParamKey::Kind::head_bias) return 0.0;
    return *lookup_param(net_, key);
  }

  std::vector<AnchorPenalty> l2_penalty(const ParamLayout& layout, const TrainableSet& set) const {
    AnchorPenalty pen;
    pen.strength = hp_.lambda;
    for (std::size_t i : set.indices()) {
      auto v = lookup_param(net_.snapshot(), layout.key(i));
      pen.anchor.push_back(v ? *v : init_value(layout, i));
    }
    return {std::move(pen)};
  }

  std::vector<AnchorPenalty> ewc_penalties(const ParamLayout& layout, const TrainableSet& set) const {
    std::vector<AnchorPenalty> out;
    for (const auto& mem : memory_) {
      AnchorPenalty pen;
      pen.strength = hp_.lambda;
      std::vector<double> f;
      for (std::size_t i : set.indices()) {
        const ParamKey key = layout.key(i);
        const auto opt = mem.optimum.find(key);
        pen.anchor.push_back(opt != mem.optimum.end() ? opt->second : init_value(layout, i));
        double w = 0.0;
        if (fisher_ == FisherOverride::unit) {
          w = 1.0;
        } else if (fisher_ == FisherOverride::none) {
          const auto it = mem.fisher.find(key);
          w = it != mem.fisher.end() ? it->second : 0.0;
        }
        f.push_back(w);
      }
      pen.fisher = std::move(f);
      out.push_back(std::move(pen));
    }
    return out;
  }

  void remember(TaskId t, const Batch& batch) {
    const ParamLayout layout(net_, t);
    TaskMemory mem;
    std::vector<double> fisher;
    if (fisher_ == FisherOverride::none) fisher = fisher_diagonal(net_, t, batch);
    for (std::size_t i = 0; i < layout.size(); ++i) {
      if (!layout.is_parameter(i)) continue;
      const ParamKey key = layout.key(i);
      mem.optimum[key] = *lookup_param(net_, key);
      if (!fisher.empty()) mem.fisher[key] = fisher[i];
    }
    memory_.push_back(std::move(mem));
  }

  std::string name_;
  HyperParams hp_;
  bool ewc_;
  FisherOverride fisher_;
  DenNetwork net_;
  std::vector<TaskMemory> memory_;
  int seen_ = 0;
};

class StlLearner final : public Learner {
 public:
  StlLearner(const LearnerConfig& cfg, std::uint64_t seed)
      : name_(cfg.name), hp_(cfg.hp), arch_(cfg.architecture), seed_(seed) {
    hp_.validate();
    hidden_of(arch_);
  }
  std::string name() const override { return name_; }
  int tasks_seen() const override { return static_cast<int>(nets_.size()); }

  StageReport observe(const TaskDataset& data) override {
    expect_task(data, tasks_seen(), name_);
    const auto start = Clock::now();
    const std::size_t before = capacity();
    const TaskId t = data.task_id;
    const SeededRng r = SeededRng::derive(seed_, static_cast<std::uint64_t>(t));
    DenNetwork net(arch_.at(0), hidden_of(arch_), r.state()[0]);
    net.add_head(t, HeadInit::random);
    const ParamLayout layout(net, t);
    const TrainResult res = train(net, data.batch(Split::train), t, TrainableSet::all(layout), {}, {}, hp_.train);
    nets_.push_back(std::move(net));
    return plain_report(t, before, capacity(), res.data_loss, start);
  }

  std::vector<double> predict(const Matrix& x, TaskId task) const override {
    require_seen(task, tasks_seen());
    return den::predict(nets_[static_cast<std::size_t>(task - 1)], x, task);
  }

  std::size_t capacity() const override {
    std::size_t c = 0;
    for (const auto& n : nets_) c += n.capacity();
    return c;
  }

  std::vector<const DenNetwork*> networks() const override {
    std::vector<const DenNetwork*> out;
    for (const auto& n : nets_) out.push_back(&n);
    return out;
  }

 private:
  std::string name_;
  HyperParams hp_;
  std::vector<std::size_t> arch_;
  std::uint64_t seed_;
  std::vector<DenNetwork> nets_;
};

// The base network is column 1; every later task adds a column of k units per
// layer. Column t's layer h reads every column's layer h-1 (laterals); weights
// from a new column back into older ones are held at zero.
class ProgressiveLearner final : public Learner {
 public:
  ProgressiveLearner(const LearnerConfig& cfg, std::uint64_t seed)
      : name_(cfg.name), hp_(cfg.hp), net_(cfg.architecture.at(0), hidden_of(cfg.architecture), seed) {
    hp_.validate();
  }
  std::string name() const override { return name_; }
  std::vector<double> predict(const Matrix& x, TaskId task) const override { return den::predict(net_, x, task); }
  std::size_t capacity() const override { return progressive_capacity(net_); }
  int tasks_seen() const override { return net_.stage() - 1; }
  std::vector<const DenNetwork*> networks() const override { return {&net_}; }

  StageReport observe(const TaskDataset& data) override {
    expect_task(data, tasks_seen(), name_);
    const auto start = Clock::now();
    const TaskId t = data.task_id;
    const std::size_t before = capacity();
    std::vector<std::vector<UnitId>> column(net_.depth());
    if (t == 1) {
      for (std::size_t h = 0; h < net_.depth(); ++h) {
        for (const auto& m : net_.units(h)) column[h].push_back(m.id);
      }
    } else {
      for (std::size_t h = 0; h < net_.depth(); ++h) {
        column[h] = net_.add_units(h, hp_.k, net_.rng());
      }
      for (std::size_t h = 0; h + 1 < net_.depth(); ++h) {
        LayerWeights& next = net_.layer(h + 1);
        const auto& metas = net_.units(h + 1);
        for (UnitId id : column[h]) {
          const std::size_t row = net_.require_position(h, id);
          for (std::size_t c = 0; c < metas.size(); ++c) {
            if (metas[c].timestamp < t) next.w(row, c) = 0.0;
          }
        }
      }
    }
    net_.add_head(t, HeadInit::random);
    const ParamLayout layout(net_, t);
    std::vector<std::size_t> idx;
    for (std::size_t h = 0; h < net_.depth(); ++h) {
      for (UnitId id : column[h]) {
        const std::size_t col = net_.require_position(h, id);
        for (std::size_t r = 0; r < net_.layer(h).w.rows(); ++r) idx.push_back(layout.weight(h, r, col));
        idx.push_back(layout.bias(h, col));
      }
    }
    for (std::size_t p = 0; p < net_.width(net_.top()); ++p) {
      if (layout.is_parameter(layout.head_weight(p))) idx.push_back(layout.head_weight(p));
    }
    idx.push_back(layout.head_bias());
    const TrainResult res =
        train(net_, data.batch(Split::train), t, TrainableSet(layout, std::move(idx)), {}, {}, hp_.train);
    net_.snapshot_commit();
    return plain_report(t, before, capacity(), res.data_loss, start);
  }

 private:
  std::string name_;
  HyperParams hp_;
  DenNetwork net_;
};

}  // namespace

std::size_t progressive_capacity(const DenNetwork& net) {
  std::size_t c = 0;
  for (std::size_t h = 0; h < net.depth(); ++h) {
    const auto& dst = net.units(h);
    for (std::size_t j = 0; j < dst.size(); ++j) {
      if (h == 0) {
        c += net.input_dim();
      } else {
        for (const auto& src : net.units(h - 1)) c += src.timestamp <= dst[j].timestamp ? 1 : 0;
      }
      c += 1;
    }
  }
  for (const auto& [t, head] : net.heads()) c += head.weights.size() + 1;
  return c;
}

std::unique_ptr<Learner> make_learner(const LearnerConfig& cfg, std::uint64_t seed) {
  LearnerConfig c = cfg;
  if (c.name.empty()) c.name = to_string(c.kind);
  switch (c.kind) {
    case LearnerKind::den: return std::make_unique<DenLearner>(c, seed);
    case LearnerKind::l2:
    case LearnerKind::ewc: return std::make_unique<AnchoredLearner>(c, seed);
    case LearnerKind::stl: return std::make_unique<StlLearner>(c, seed);
    case LearnerKind::progressive: return std::make_unique<ProgressiveLearner>(c, seed);
  }
  throw ArgumentError("unknown learner kind");
}

}  // namespace den
