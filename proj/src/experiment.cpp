#include "den/experiment.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "den/checkpoint.hpp"
#include "den/errors.hpp"

namespace den {

using nlohmann::json;

namespace {

std::string fmt17(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Strict accessors that report the JSON path of whatever is wrong.
class Obj {
 public:
  Obj(const json& j, std::string path, std::initializer_list<const char*> allowed) : j_(j), path_(std::move(path)) {
    if (!j.is_object()) fail(path_, "expected an object");
    std::set<std::string> ok(allowed.begin(), allowed.end());
    for (const auto& [k, v] : j.items()) {
      if (!ok.count(k)) fail(sub(k), "unknown field");
    }
  }

  bool has(const char* k) const { return j_.contains(k); }
  const json& at(const char* k) const { return j_.at(k); }
  std::string sub(const std::string& k) const { return path_.empty() ? k : path_ + "." + k; }

  double real(const char* k, double def) const {
    if (!has(k)) return def;
    const json& v = j_.at(k);
    if (!v.is_number()) fail(sub(k), "expected a number");
    return v.get<double>();
  }
  long long integer(const char* k, long long def) const {
    if (!has(k)) return def;
    const json& v = j_.at(k);
    if (!v.is_number_integer()) fail(sub(k), "expected an integer");
    return v.get<long long>();
  }
  std::uint64_t unsigned_int(const char* k, std::uint64_t def) const {
    if (!has(k)) return def;
    const json& v = j_.at(k);
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<long long>() >= 0)) {
      fail(sub(k), "expected a non-negative integer");
    }
    return v.get<std::uint64_t>();
  }
  bool boolean(const char* k, bool def) const {
    if (!has(k)) return def;
    const json& v = j_.at(k);
    if (!v.is_boolean()) fail(sub(k), "expected true or false");
    return v.get<bool>();
  }
  std::string string(const char* k, const std::string& def) const {
    if (!has(k)) return def;
    const json& v = j_.at(k);
    if (!v.is_string()) fail(sub(k), "expected a string");
    return v.get<std::string>();
  }

  [[noreturn]] static void fail(const std::string& path, const std::string& msg) {
    throw ConfigError("config field '" + path + "': " + msg);
  }

 private:
  const json& j_;
  std::string path_;
};

HyperParams parse_hyper(const json& j, const std::string& path) {
  Obj o(j, path, {"mu", "gamma", "lambda", "tau", "sigma", "k", "learning_rate", "max_epochs", "tol", "max_halvings"});
  HyperParams hp;
  hp.mu = o.real("mu", hp.mu);
  hp.gamma = o.real("gamma", hp.gamma);
  hp.lambda = o.real("lambda", hp.lambda);
  hp.tau = o.real("tau", hp.tau);
  hp.sigma = o.real("sigma", hp.sigma);
  hp.k = static_cast<int>(o.integer("k", hp.k));
  hp.train.learning_rate = o.real("learning_rate", hp.train.learning_rate);
  hp.train.max_epochs = static_cast<int>(o.integer("max_epochs", hp.train.max_epochs));
  hp.train.tol = o.real("tol", hp.train.tol);
  hp.train.max_halvings = static_cast<int>(o.integer("max_halvings", hp.train.max_halvings));
  try {
    hp.validate();
  } catch (const ArgumentError& e) {
    Obj::fail(path, e.what());
  }
  return hp;
}

LearnerKind parse_kind(const std::string& s, const std::string& path) {
  for (LearnerKind k : {LearnerKind::den, LearnerKind::l2, LearnerKind::ewc, LearnerKind::stl, LearnerKind::progressive}) {
    if (to_string(k) == s) return k;
  }
  Obj::fail(path, "unknown learner kind '" + s + "' (den, l2, ewc, stl, progressive)");
}

std::string fisher_name(FisherOverride f) {
  return f == FisherOverride::none ? "none" : f == FisherOverride::zero ? "zero" : "unit";
}

std::string checkpoint_name(CheckpointPolicy p) {
  return p == CheckpointPolicy::none ? "none" : p == CheckpointPolicy::final_stage ? "final" : "every_stage";
}

std::vector<std::size_t> architecture_of(const ExperimentConfig& cfg) {
  for (const auto& l : cfg.learners) {
    if (l.kind == LearnerKind::stl) return l.architecture;
  }
  return cfg.learners.front().architecture;
}

// Evaluates fn(i) for i in [0, n) across up to eval_threads() workers.
template <typename Fn>
void parallel_for(std::size_t n, Fn fn) {
  const std::size_t workers = std::min<std::size_t>(eval_threads(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += workers) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace

void ExperimentConfig::validate() const {
  try {
    tasks.validate();
  } catch (const ArgumentError& e) {
    throw ConfigError(std::string("config field 'tasks': ") + e.what());
  }
  if (learners.empty()) throw ConfigError("config field 'learners': at least one learner is required");
  std::set<std::string> names;
  const std::size_t depth = learners.front().architecture.size();
  for (std::size_t i = 0; i < learners.size(); ++i) {
    const auto& l = learners[i];
    const std::string path = "learners[" + std::to_string(i) + "]";
    const std::string name = l.name.empty() ? to_string(l.kind) : l.name;
    if (!names.insert(name).second) throw ConfigError("config field '" + path + ".name': duplicate learner name '" + name + "'");
    if (name.find_first_of(",\"\n/\\") != std::string::npos) {
      throw ConfigError("config field '" + path + ".name': name may not contain , \" / \\ or newlines");
    }
    if (l.architecture.size() < 2) throw ConfigError("config field '" + path + ".architecture': need input size and >= 1 hidden layer");
    for (std::size_t w : l.architecture) {
      if (w == 0) throw ConfigError("config field '" + path + ".architecture': sizes must be positive");
    }
    if (l.architecture.front() != tasks.dim) {
      throw ConfigError("config field '" + path + ".architecture': input size " + std::to_string(l.architecture.front()) +
                        " differs from tasks.d " + std::to_string(tasks.dim));
    }
    if (l.architecture.size() != depth) {
      throw ConfigError("config field '" + path + ".architecture': hidden depth differs from the first learner's");
    }
  }
}

void ExperimentConfig::set_seed(std::uint64_t s) {
  seed = s;
  if (!tasks_seed_set) tasks.seed = s;
}

ExperimentConfig parse_config(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    std::size_t line = 1, col = 1;
    for (std::size_t i = 0; i < e.byte && i < text.size(); ++i) {
      if (text[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    throw ConfigError("config line " + std::to_string(line) + ", column " + std::to_string(col) + ": invalid JSON");
  }
  Obj o(root, "", {"seed", "output_dir", "eval_every_stage", "record_wall_time", "checkpoints", "export_data", "tasks",
                   "learners"});
  ExperimentConfig cfg;
  cfg.seed = o.unsigned_int("seed", cfg.seed);
  cfg.output_dir = o.string("output_dir", cfg.output_dir);
  cfg.eval_every_stage = o.boolean("eval_every_stage", cfg.eval_every_stage);
  cfg.record_wall_time = o.boolean("record_wall_time", cfg.record_wall_time);
  cfg.export_data = o.boolean("export_data", cfg.export_data);
  const std::string ck = o.string("checkpoints", checkpoint_name(cfg.checkpoints));
  if (ck == "none") {
    cfg.checkpoints = CheckpointPolicy::none;
  } else if (ck == "final") {
    cfg.checkpoints = CheckpointPolicy::final_stage;
  } else if (ck == "every_stage") {
    cfg.checkpoints = CheckpointPolicy::every_stage;
  } else {
    Obj::fail("checkpoints", "expected none, final or every_stage");
  }

  if (!o.has("tasks")) Obj::fail("tasks", "missing");
  {
    Obj t(o.at("tasks"), "tasks",
          {"family", "T", "d", "n_train", "n_val", "n_test", "relatedness", "noise_std", "seed"});
    TaskFamilyConfig& tc = cfg.tasks;
    const std::string fam = t.string("family", to_string(tc.family));
    if (fam == "shared_structure") {
      tc.family = TaskFamily::shared_structure;
    } else if (fam == "permuted") {
      tc.family = TaskFamily::permuted;
    } else {
      Obj::fail("tasks.family", "expected shared_structure or permuted");
    }
    auto positive = [&](const char* k, long long def) {
      const long long v = t.integer(k, def);
      if (v < 1) Obj::fail(t.sub(k), "must be >= 1");
      return v;
    };
    tc.num_tasks = static_cast<int>(positive("T", tc.num_tasks));
    tc.dim = static_cast<std::size_t>(positive("d", static_cast<long long>(tc.dim)));
    tc.n.train = static_cast<std::size_t>(positive("n_train", static_cast<long long>(tc.n.train)));
    tc.n.val = static_cast<std::size_t>(positive("n_val", static_cast<long long>(tc.n.val)));
    tc.n.test = static_cast<std::size_t>(positive("n_test", static_cast<long long>(tc.n.test)));
    tc.relatedness = t.real("relatedness", tc.relatedness);
    tc.noise_std = t.real("noise_std", tc.noise_std);
    cfg.tasks_seed_set = t.has("seed");
    tc.seed = t.unsigned_int("seed", cfg.seed);
  }

  if (!o.has("learners")) Obj::fail("learners", "missing");
  const json& ls = o.at("learners");
  if (!ls.is_array()) Obj::fail("learners", "expected an array");
  for (std::size_t i = 0; i < ls.size(); ++i) {
    const std::string path = "learners[" + std::to_string(i) + "]";
    Obj l(ls[i], path, {"kind", "name", "architecture", "hyper", "fisher_override"});
    LearnerConfig lc;
    if (!l.has("kind")) Obj::fail(l.sub("kind"), "missing");
    lc.kind = parse_kind(l.string("kind", ""), l.sub("kind"));
    lc.name = l.string("name", to_string(lc.kind));
    if (!l.has("architecture")) Obj::fail(l.sub("architecture"), "missing");
    const json& arch = l.at("architecture");
    if (!arch.is_array()) Obj::fail(l.sub("architecture"), "expected an array of layer sizes");
    for (std::size_t a = 0; a < arch.size(); ++a) {
      if (!arch[a].is_number_integer() || arch[a].get<long long>() < 1) {
        Obj::fail(l.sub("architecture") + "[" + std::to_string(a) + "]", "expected a positive integer");
      }
      lc.architecture.push_back(arch[a].get<std::size_t>());
    }
    if (l.has("hyper")) lc.hp = parse_hyper(l.at("hyper"), l.sub("hyper"));
    const std::string f = l.string("fisher_override", "none");
    if (f == "none") {
      lc.fisher = FisherOverride::none;
    } else if (f == "zero") {
      lc.fisher = FisherOverride::zero;
    } else if (f == "unit") {
      lc.fisher = FisherOverride::unit;
    } else {
      Obj::fail(l.sub("fisher_override"), "expected none, zero or unit");
    }
    if (lc.fisher != FisherOverride::none && lc.kind != LearnerKind::ewc) {
      Obj::fail(l.sub("fisher_override"), "only valid for ewc learners");
    }
    cfg.learners.push_back(std::move(lc));
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string dump_config(const ExperimentConfig& cfg) {
  nlohmann::ordered_json j;
  j["seed"] = cfg.seed;
  j["output_dir"] = cfg.output_dir;
  j["eval_every_stage"] = cfg.eval_every_stage;
  j["record_wall_time"] = cfg.record_wall_time;
  j["checkpoints"] = checkpoint_name(cfg.checkpoints);
  j["export_data"] = cfg.export_data;
  auto& t = j["tasks"];
  t["family"] = to_string(cfg.tasks.family);
  t["T"] = cfg.tasks.num_tasks;
  t["d"] = cfg.tasks.dim;
  t["n_train"] = cfg.tasks.n.train;
  t["n_val"] = cfg.tasks.n.val;
  t["n_test"] = cfg.tasks.n.test;
  t["relatedness"] = cfg.tasks.relatedness;
  t["noise_std"] = cfg.tasks.noise_std;
  if (cfg.tasks_seed_set) t["seed"] = cfg.tasks.seed;
  j["learners"] = nlohmann::ordered_json::array();
  for (const auto& l : cfg.learners) {
    nlohmann::ordered_json lj;
    lj["kind"] = to_string(l.kind);
    lj["name"] = l.name.empty() ? to_string(l.kind) : l.name;
    lj["architecture"] = l.architecture;
    auto& h = lj["hyper"];
    h["mu"] = l.hp.mu;
    h["gamma"] = l.hp.gamma;
    h["lambda"] = l.hp.lambda;
    h["tau"] = l.hp.tau;
    h["sigma"] = l.hp.sigma;
    h["k"] = l.hp.k;
    h["learning_rate"] = l.hp.train.learning_rate;
    h["max_epochs"] = l.hp.train.max_epochs;
    h["tol"] = l.hp.train.tol;
    h["max_halvings"] = l.hp.train.max_halvings;
    if (l.kind == LearnerKind::ewc) lj["fisher_override"] = fisher_name(l.fisher);
    j["learners"].push_back(std::move(lj));
  }
  return j.dump(2) + "\n";
}

ExperimentConfig default_config() {
  ExperimentConfig cfg;
  const std::vector<std::size_t> arch{32, 64, 32};
  for (LearnerKind k : {LearnerKind::den, LearnerKind::l2, LearnerKind::ewc, LearnerKind::stl, LearnerKind::progressive}) {
    LearnerConfig lc;
    lc.kind = k;
    lc.name = to_string(k);
    lc.architecture = arch;
    cfg.learners.push_back(lc);
  }
  return cfg;
}

const LearnerSummary& RunResult::summary(const std::string& learner) const {
  for (const auto& s : summaries) {
    if (s.learner == learner) return s;
  }
  throw ArgumentError("no learner named " + learner);
}

double RunResult::auroc(const std::string& learner, int stage, TaskId task) const {
  for (const auto& r : rows) {
    if (r.learner == learner && r.stage == stage && r.task == task) return r.auroc;
  }
  throw ArgumentError("no metrics row for " + learner + " stage " + std::to_string(stage) + " task " +
                      std::to_string(task));
}

std::size_t single_net_capacity(const std::vector<std::size_t>& arch) {
  std::size_t c = 0;
  for (std::size_t h = 1; h < arch.size(); ++h) c += arch[h - 1] * arch[h] + arch[h];
  return c + arch.back() + 1;
}

unsigned eval_threads() {
  const char* env = std::getenv("DEN_LAB_THREADS");
  if (!env) return 1;
  const long v = std::strtol(env, nullptr, 10);
  return v >= 1 ? static_cast<unsigned>(std::min<long>(v, 256)) : 1;
}

RunResult run_experiment(const ExperimentConfig& cfg) { return run_experiment(cfg, generate_tasks(cfg.tasks)); }

RunResult run_experiment(const ExperimentConfig& cfg, const std::vector<TaskDataset>& tasks) {
  cfg.validate();
  RunResult out;
  const int T = static_cast<int>(tasks.size());
  out.stl_reference_capacity = static_cast<std::size_t>(T) * single_net_capacity(architecture_of(cfg));

  std::vector<Batch> tests;
  for (const auto& d : tasks) tests.push_back(d.batch(Split::test));

  for (const auto& lc : cfg.learners) {
    auto learner = make_learner(lc, cfg.seed);
    LearnerSummary sum;
    sum.learner = learner->name();
    for (int t = 1; t <= T; ++t) {
      StageReport rep;
      try {
        rep = learner->observe(tasks[static_cast<std::size_t>(t - 1)]);
      } catch (const TrainingDiverged& e) {
        throw RunDiverged(sum.learner, t, e.what());
      }
      if (!cfg.record_wall_time) rep.wall_ms = 0.0;
      sum.stages.push_back(rep);

      if (cfg.eval_every_stage || t == T) {
        std::vector<double> scores(static_cast<std::size_t>(t));
        parallel_for(scores.size(), [&](std::size_t s) {
          const auto p = learner->predict(tests[s].features, static_cast<TaskId>(s + 1));
          scores[s] = den::auroc(p, tests[s].labels);
        });
        const std::size_t cap = learner->capacity();
        for (int s = 1; s <= t; ++s) {
          out.rows.push_back({sum.learner, t, s, scores[static_cast<std::size_t>(s - 1)], cap,
                              static_cast<double>(cap) / static_cast<double>(out.stl_reference_capacity), rep.wall_ms});
        }
      }

      if (cfg.checkpoints == CheckpointPolicy::every_stage || (cfg.checkpoints == CheckpointPolicy::final_stage && t == T)) {
        const auto nets = learner->networks();
        for (std::size_t i = 0; i < nets.size(); ++i) {
          std::string file = sum.learner;
          if (lc.kind == LearnerKind::stl) file += "_net" + std::to_string(i + 1);
          file += "_stage" + std::to_string(t) + ".json";
          out.checkpoints[file] = checkpoint_dump(*nets[i]);
        }
      }
    }
    double total = 0.0;
    int count = 0;
    for (const auto& r : out.rows) {
      if (r.learner == sum.learner && r.stage == T) {
        total += r.auroc;
        ++count;
      }
    }
    sum.avg_auroc = count ? total / count : 0.0;
    sum.final_capacity = learner->capacity();
    sum.rel_capacity = static_cast<double>(sum.final_capacity) / static_cast<double>(out.stl_reference_capacity);
    out.summaries.push_back(std::move(sum));
  }
  return out;
}

std::string metrics_csv(const RunResult& r) {
  std::string s = "learner,stage,task,auroc,capacity,rel_capacity,wall_ms\n";
  for (const auto& m : r.rows) {
    s += m.learner + "," + std::to_string(m.stage) + "," + std::to_string(m.task) + "," + fmt17(m.auroc) + "," +
         std::to_string(m.capacity) + "," + fmt17(m.rel_capacity) + "," + fmt17(m.wall_ms) + "\n";
  }
  return s;
}

std::string stages_csv(const RunResult& r) {
  std::string s =
      "learner,stage,loss,final_loss,selected_units,expanded,added,pruned,surviving,splits,capacity_before,"
      "capacity_after\n";
  for (const auto& sum : r.summaries) {
    for (const auto& st : sum.stages) {
      int added = 0, pruned = 0;
      for (int a : st.expansion.added) added += a;
      for (int p : st.expansion.pruned) pruned += p;
      s += sum.learner + "," + std::to_string(st.task) + "," + fmt17(st.loss) + "," + fmt17(st.final_loss) + "," +
           std::to_string(st.selected_units) + "," + (st.expanded ? "1" : "0") + "," + std::to_string(added) + "," +
           std::to_string(pruned) + "," + std::to_string(added - pruned) + "," +
           std::to_string(st.drift.split_count()) + "," + std::to_string(st.capacity_before) + "," +
           std::to_string(st.capacity_after) + "\n";
    }
  }
  return s;
}

std::string summary_json(const RunResult& r) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& s : r.summaries) {
    j[s.learner] = {{"avg_auroc", s.avg_auroc}, {"final_capacity", s.final_capacity}, {"rel_capacity", s.rel_capacity}};
  }
  return j.dump(2) + "\n";
}

void write_run(const RunResult& r, const ExperimentConfig& cfg, const std::vector<TaskDataset>& tasks,
               const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  auto put = [](const fs::path& p, const std::string& text) {
    std::ofstream f(p, std::ios::binary);
    if (!f) throw FormatError("cannot write " + p.string());
    f << text;
  };
  put(dir / "metrics.csv", metrics_csv(r));
  put(dir / "stages.csv", stages_csv(r));
  put(dir / "summary.json", summary_json(r));
  put(dir / "config.json", dump_config(cfg));
  if (!r.checkpoints.empty()) {
    fs::create_directories(dir / "checkpoints");
    for (const auto& [name, text] : r.checkpoints) put(dir / "checkpoints" / name, text);
  }
  if (cfg.export_data) {
    std::ofstream f(dir / "tasks.csv", std::ios::binary);
    write_tasks_csv(f, tasks);
  }
}

std::string inspect_report(const DenNetwork& net) {
  std::ostringstream o;
  o << "stage: " << net.stage() << " (tasks observed: " << net.heads().size() << ")\n";
  o << "input dim: " << net.input_dim() << "\n";
  o << "layer widths:";
  for (std::size_t h = 0; h < net.depth(); ++h) o << " " << net.width(h);
  o << "\n\nunits by timestamp:\n";
  for (std::size_t h = 0; h < net.depth(); ++h) {
    std::map<int, int> by_ts;
    for (const auto& m : net.units(h)) ++by_ts[m.timestamp];
    o << "  layer " << h << ":";
    for (const auto& [ts, n] : by_ts) o << " t" << ts << "=" << n;
    o << "\n";
  }
  o << "\nsplit lineage:\n";
  std::size_t splits = 0;
  for (std::size_t h = 0; h < net.depth(); ++h) {
    for (const auto& m : net.units(h)) {
      if (m.origin != UnitOrigin::split_copy) continue;
      ++splits;
      o << "  layer " << h << ": unit " << m.id << " split_copy_of " << m.source << " (stage " << m.timestamp << ")\n";
    }
  }
  if (splits == 0) o << "  (no splits)\n";
  o << "\nsparsity (fraction of exact zeros):\n";
  std::size_t zeros = 0, total = 0;
  char buf[64];
  for (std::size_t h = 0; h < net.depth(); ++h) {
    const auto& w = net.layer(h).w.data();
    const auto z = static_cast<std::size_t>(std::count(w.begin(), w.end(), 0.0));
    zeros += z;
    total += w.size();
    std::snprintf(buf, sizeof buf, "%.4f", w.empty() ? 0.0 : static_cast<double>(z) / static_cast<double>(w.size()));
    o << "  layer " << h << " weights: " << buf << "\n";
  }
  for (const auto& [t, head] : net.heads()) {
    std::size_t z = 0;
    for (const auto& [id, v] : head.weights) z += v == 0.0 ? 1 : 0;
    zeros += z;
    total += head.weights.size();
    o << "  head " << t << ": " << head.weights.size() - z << "/" << head.weights.size() << " nonzero\n";
  }
  std::snprintf(buf, sizeof buf, "%.4f", total ? static_cast<double>(zeros) / static_cast<double>(total) : 0.0);
  o << "  overall: " << buf << "\n";
  o << "\ncapacity: " << net.capacity() << "\n";
  return o.str();
}

}  // namespace den
