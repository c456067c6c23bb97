#include "den/checkpoint.hpp"

#include <fstream>
#include <sstream>

#include "den/errors.hpp"
#include "json.hpp"

namespace den {

using nlohmann::json;

namespace {

json layers_to_json(const std::vector<LayerWeights>& layers) {
  json out = json::array();
  for (const auto& l : layers) {
    json rows = json::array();
    for (std::size_t r = 0; r < l.w.rows(); ++r) {
      auto row = l.w.row(r);
      rows.push_back(std::vector<double>(row.begin(), row.end()));
    }
    out.push_back({{"w", rows}, {"b", l.b}});
  }
  return out;
}

json meta_to_json(const std::vector<std::vector<UnitMeta>>& meta) {
  json out = json::array();
  for (const auto& layer : meta) {
    json units = json::array();
    for (const auto& u : layer) {
      json j = {{"unit_id", u.id}, {"timestamp", u.timestamp}};
      switch (u.origin) {
        case UnitOrigin::initial: j["origin"] = "initial"; break;
        case UnitOrigin::expanded: j["origin"] = "expanded"; break;
        case UnitOrigin::split_copy:
          j["origin"] = "split_copy";
          j["split_copy_of"] = u.source;
          break;
      }
      units.push_back(std::move(j));
    }
    out.push_back(std::move(units));
  }
  return out;
}

json heads_to_json(const std::map<TaskId, TaskHead>& heads) {
  json out = json::object();
  for (const auto& [t, h] : heads) {
    json w = json::object();
    for (const auto& [id, v] : h.weights) w[std::to_string(id)] = v;
    out[std::to_string(t)] = {{"weights", w}, {"bias", h.bias}};
  }
  return out;
}

std::vector<LayerWeights> layers_from_json(const json& j) {
  std::vector<LayerWeights> out;
  for (const auto& l : j) {
    const auto& rows = l.at("w");
    std::size_t n_rows = rows.size();
    std::size_t n_cols = n_rows == 0 ? 0 : rows.at(0).size();
    std::vector<double> data;
    data.reserve(n_rows * n_cols);
    for (const auto& r : rows) {
      if (r.size() != n_cols) throw FormatError("checkpoint: ragged weight matrix");
      for (const auto& v : r) data.push_back(v.get<double>());
    }
    out.push_back({Matrix(n_rows, n_cols, std::move(data)), l.at("b").get<std::vector<double>>()});
  }
  return out;
}

std::vector<std::vector<UnitMeta>> meta_from_json(const json& j) {
  std::vector<std::vector<UnitMeta>> out;
  for (const auto& layer : j) {
    std::vector<UnitMeta> units;
    for (const auto& u : layer) {
      UnitMeta m;
      m.id = u.at("unit_id").get<UnitId>();
      m.timestamp = u.at("timestamp").get<int>();
      const auto origin = u.at("origin").get<std::string>();
      if (origin == "initial") {
        m.origin = UnitOrigin::initial;
      } else if (origin == "expanded") {
        m.origin = UnitOrigin::expanded;
      } else if (origin == "split_copy") {
        m.origin = UnitOrigin::split_copy;
        m.source = u.at("split_copy_of").get<UnitId>();
      } else {
        throw FormatError("checkpoint: unknown unit origin '" + origin + "'");
      }
      units.push_back(m);
    }
    out.push_back(std::move(units));
  }
  return out;
}

std::map<TaskId, TaskHead> heads_from_json(const json& j) {
  std::map<TaskId, TaskHead> out;
  for (const auto& [key, h] : j.items()) {
    TaskHead head;
    head.task = std::stoi(key);
    for (const auto& [id, v] : h.at("weights").items()) head.weights[std::stoull(id)] = v.get<double>();
    head.bias = h.at("bias").get<double>();
    out[head.task] = std::move(head);
  }
  return out;
}

}  // namespace

std::string checkpoint_dump(const DenNetwork& net) {
  const NetworkState s = net.state();
  json snap = json::object();
  if (!s.snapshot_prev.empty()) {
    snap = {{"layers", layers_to_json(s.snapshot_prev.layers)},
            {"unit_meta", meta_to_json(s.snapshot_prev.unit_meta)},
            {"heads", heads_to_json(s.snapshot_prev.heads)}};
  }
  json doc = {
      {"format_version", kCheckpointFormatVersion},
      {"input_dim", s.input_dim},
      {"current_stage", s.current_stage},
      {"next_unit_id", s.next_unit_id},
      {"layers", layers_to_json(s.layers)},
      {"unit_meta", meta_to_json(s.unit_meta)},
      {"heads", heads_to_json(s.heads)},
      {"rng_state", {{"generator", SeededRng::kGeneratorName},
                     {"state", std::vector<std::uint64_t>(s.rng_state.begin(), s.rng_state.end())}}},
      {"snapshot_prev", snap},
  };
  return doc.dump() + "\n";
}

DenNetwork checkpoint_parse(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("checkpoint: invalid JSON: ") + e.what());
  }
  if (!doc.is_object() || !doc.contains("format_version")) {
    throw FormatError("checkpoint: format_version missing, expected " + std::to_string(kCheckpointFormatVersion));
  }
  const auto& fv = doc.at("format_version");
  if (!fv.is_number_integer() || fv.get<int>() != kCheckpointFormatVersion) {
    throw FormatError("checkpoint: format_version found " + fv.dump() + ", expected " +
                      std::to_string(kCheckpointFormatVersion));
  }
  try {
    NetworkState s;
    s.input_dim = doc.at("input_dim").get<std::size_t>();
    s.current_stage = doc.at("current_stage").get<int>();
    s.next_unit_id = doc.at("next_unit_id").get<UnitId>();
    s.layers = layers_from_json(doc.at("layers"));
    s.unit_meta = meta_from_json(doc.at("unit_meta"));
    s.heads = heads_from_json(doc.at("heads"));
    const auto& rng = doc.at("rng_state");
    if (rng.at("generator").get<std::string>() != SeededRng::kGeneratorName) {
      throw FormatError("checkpoint: unsupported generator " + rng.at("generator").dump());
    }
    auto words = rng.at("state").get<std::vector<std::uint64_t>>();
    if (words.size() != s.rng_state.size()) throw FormatError("checkpoint: rng state must have 4 words");
    std::copy(words.begin(), words.end(), s.rng_state.begin());
    const auto& snap = doc.at("snapshot_prev");
    if (!snap.empty()) {
      s.snapshot_prev.layers = layers_from_json(snap.at("layers"));
      s.snapshot_prev.unit_meta = meta_from_json(snap.at("unit_meta"));
      s.snapshot_prev.heads = heads_from_json(snap.at("heads"));
    }
    return DenNetwork(std::move(s));
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint: schema mismatch: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("checkpoint: bad key: ") + e.what());
  }
}

void save_checkpoint(const DenNetwork& net, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write checkpoint " + path.string());
  out << checkpoint_dump(net);
}

DenNetwork load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot read checkpoint " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return checkpoint_parse(ss.str());
}

}  // namespace den
