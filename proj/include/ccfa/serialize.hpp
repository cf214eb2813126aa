// JSON encodings of models, buffers, metric records and run checkpoints, and
// atomic file output.
#pragma once

#include <atomic>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>

#include <json.hpp>

#include "ccfa/eval.hpp"
#include "ccfa/memory.hpp"
#include "ccfa/model.hpp"
#include "ccfa/trainer.hpp"

namespace ccfa {

using json = nlohmann::ordered_json;

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Files

/// Writes `content` to a sibling temp file and renames it over `path`.
inline void write_atomic(const std::filesystem::path& path, const std::string& content) {
  static std::atomic<unsigned> counter{0};
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ostringstream tag;
  tag << ".tmp." << std::hash<std::thread::id>{}(std::this_thread::get_id()) << '.' << counter++;
  const std::filesystem::path tmp = path.string() + tag.str();
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw std::runtime_error("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// ---------------------------------------------------------------------------
// Matrices and models

inline json to_json(const Matrix& m) {
  return json{{"rows", m.rows()}, {"cols", m.cols()}, {"data", m.data()}};
}

inline Matrix matrix_from_json(const json& j) {
  const auto r = j.at("rows").get<std::size_t>();
  const auto c = j.at("cols").get<std::size_t>();
  auto data = j.at("data").get<std::vector<double>>();
  if (data.size() != r * c) throw FormatError("matrix: data length does not match shape");
  Matrix m(r, c);
  m.data() = std::move(data);
  return m;
}

inline ExtractorKind extractor_kind_from(const std::string& s) {
  if (s == "identity") return ExtractorKind::identity;
  if (s == "linear") return ExtractorKind::linear;
  if (s == "mlp") return ExtractorKind::mlp;
  throw FormatError("unknown extractor kind '" + s + "'");
}

inline json to_json(const FeatureExtractor& f) {
  json layers = json::array();
  for (const auto& l : f.layers()) layers.push_back({{"weight", to_json(l.weight)}, {"bias", l.bias}});
  return json{{"kind", to_string(f.kind())}, {"input_dim", f.input_dim()}, {"layers", layers}};
}

inline FeatureExtractor extractor_from_json(const json& j) {
  std::vector<DenseLayer> layers;
  for (const auto& l : j.at("layers"))
    layers.push_back({matrix_from_json(l.at("weight")), l.at("bias").get<std::vector<double>>()});
  return FeatureExtractor::from_layers(extractor_kind_from(j.at("kind").get<std::string>()),
                                       j.at("input_dim").get<std::size_t>(), std::move(layers));
}

inline json to_json(const Classifier& c) {
  json j{{"kind", to_string(c.kind())}, {"eta", c.eta()}};
  if (!c.is_cosine()) {
    j["proxies_per_class"] = c.proxies_per_class();
    j["margin"] = c.margin();
  }
  j["weights"] = to_json(c.weights());
  return j;
}

inline Classifier classifier_from_json(const json& j) {
  const auto kind = j.at("kind").get<std::string>();
  Matrix w = matrix_from_json(j.at("weights"));
  const double eta = j.at("eta").get<double>();
  if (kind == "cosine") return Classifier(CosineClassifier{std::move(w), eta});
  if (kind == "lsc")
    return Classifier(LSCClassifier{std::move(w), j.at("proxies_per_class").get<std::size_t>(), eta,
                                    j.at("margin").get<double>()});
  throw FormatError("unknown classifier kind '" + kind + "'");
}

inline json to_json(const Model& m) {
  return json{{"extractor", to_json(m.extractor)}, {"classifier", to_json(m.classifier)}};
}

inline Model model_from_json(const json& j) {
  return Model{extractor_from_json(j.at("extractor")), classifier_from_json(j.at("classifier"))};
}

// ---------------------------------------------------------------------------
// Memory buffer: class -> index list

inline json to_json(const MemoryBuffer& b) {
  json ex = json::object();
  for (const auto& [c, idx] : b.exemplars) ex[std::to_string(c)] = idx;
  return json{{"budget", b.budget}, {"stage", b.stage}, {"exemplars", ex}};
}

inline MemoryBuffer buffer_from_json(const json& j) {
  MemoryBuffer b;
  b.budget = j.at("budget").get<std::size_t>();
  b.stage = j.at("stage").get<std::size_t>();
  for (const auto& [k, v] : j.at("exemplars").items())
    b.exemplars[static_cast<Label>(std::stol(k))] = v.get<std::vector<std::size_t>>();
  return b;
}

// ---------------------------------------------------------------------------
// Metrics. Wall time is kept out of records so reruns are byte-identical.

inline json to_json(const MetricsRecord& r) {
  json pc = json::object();
  for (const auto& [c, n] : r.per_class)
    pc[std::to_string(c)] = {{"correct", n.correct}, {"total", n.total}, {"accuracy", n.accuracy()}};
  json j{{"stage", r.stage}, {"accuracy", r.accuracy}, {"new_classes", r.new_classes}};
  j["new_accuracy"] = r.new_accuracy ? json(*r.new_accuracy) : json(nullptr);
  j["per_class"] = pc;
  return j;
}

inline MetricsRecord record_from_json(const json& j) {
  MetricsRecord r;
  r.stage = j.at("stage").get<std::size_t>();
  r.accuracy = j.at("accuracy").get<double>();
  r.new_classes = j.at("new_classes").get<Labels>();
  if (!j.at("new_accuracy").is_null()) r.new_accuracy = j.at("new_accuracy").get<double>();
  for (const auto& [k, v] : j.at("per_class").items())
    r.per_class[static_cast<Label>(std::stol(k))] = {v.at("correct").get<std::size_t>(),
                                                     v.at("total").get<std::size_t>()};
  return r;
}

inline std::string records_jsonl(const std::vector<MetricsRecord>& records) {
  std::string out;
  for (const auto& r : records) out += to_json(r).dump() + '\n';
  return out;
}

inline std::vector<MetricsRecord> parse_records_jsonl(const std::string& text) {
  std::vector<MetricsRecord> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) out.push_back(record_from_json(json::parse(line)));
  return out;
}

inline json to_json(const Summary& s) {
  json j{{"average_incremental_accuracy", s.average_incremental_accuracy}};
  j["forgetting"] = s.forgetting ? json(*s.forgetting) : json(nullptr);
  j["average_new_accuracy"] = s.average_new_accuracy ? json(*s.average_new_accuracy) : json(nullptr);
  j["config_hash"] = s.config_hash;
  j["seed"] = s.seed;
  return j;
}

inline Summary summary_from_json(const json& j) {
  Summary s;
  s.average_incremental_accuracy = j.at("average_incremental_accuracy").get<double>();
  if (!j.at("forgetting").is_null()) s.forgetting = j.at("forgetting").get<double>();
  if (!j.at("average_new_accuracy").is_null())
    s.average_new_accuracy = j.at("average_new_accuracy").get<double>();
  s.config_hash = j.at("config_hash").get<std::string>();
  s.seed = j.at("seed").get<std::uint64_t>();
  return s;
}

/// "stage,accuracy,new_accuracy" rows for plotting.
inline std::string curves_csv(const std::vector<MetricsRecord>& records) {
  std::ostringstream os;
  os.precision(17);
  os << "stage,accuracy,new_accuracy\n";
  for (const auto& r : records) {
    os << r.stage << ',' << r.accuracy << ',';
    if (r.new_accuracy) os << *r.new_accuracy;
    os << '\n';
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Checkpoints

inline json to_json(const RunState& s) {
  json j{{"completed", s.completed}, {"model", to_json(s.model)}};
  if (s.previous)
    j["previous"] = {{"stage", s.previous->stage()}, {"model", to_json(s.previous->model())}};
  else
    j["previous"] = nullptr;
  j["memory"] = to_json(s.memory);
  json recs = json::array();
  for (const auto& r : s.records) recs.push_back(to_json(r));
  j["records"] = recs;
  json logs = json::array();
  for (const auto& l : s.logs) logs.push_back({{"train", l.train_epoch_loss}, {"finetune", l.finetune_epoch_loss}});
  j["logs"] = logs;
  return j;
}

inline RunState run_state_from_json(const json& j) {
  RunState s;
  s.completed = j.at("completed").get<std::size_t>();
  s.model = model_from_json(j.at("model"));
  if (!j.at("previous").is_null())
    s.previous.emplace(j.at("previous").at("stage").get<std::size_t>(),
                       model_from_json(j.at("previous").at("model")));
  s.memory = buffer_from_json(j.at("memory"));
  for (const auto& r : j.at("records")) s.records.push_back(record_from_json(r));
  for (const auto& l : j.at("logs"))
    s.logs.push_back({l.at("train").get<std::vector<double>>(), l.at("finetune").get<std::vector<double>>()});
  if (s.records.size() != s.completed) throw FormatError("checkpoint: record count does not match stage count");
  return s;
}

}  // namespace ccfa
