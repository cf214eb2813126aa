// Config-driven runs, multi-seed sweeps and report regeneration, with the
// on-disk layout out/<run-id>/{config.resolved, records.jsonl, summary.json,
// curves.csv, points_*.csv}.
#pragma once

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "ccfa/config.hpp"
#include "ccfa/serialize.hpp"
#include "ccfa/trainer.hpp"

namespace ccfa {

namespace fs = std::filesystem;

inline constexpr const char* kOutputRootEnv = "CCFA_OUTPUT_ROOT";

/// Output root: the environment override if set, else the config's value.
inline fs::path output_root(const ExperimentConfig& c) {
  if (const char* env = std::getenv(kOutputRootEnv); env != nullptr && *env != '\0') return env;
  return c.output;
}

struct RunOutcome {
  fs::path dir;
  Summary summary;
  std::vector<MetricsRecord> records;
};

inline std::string attack_trace_header() { return "phase,stage,epoch,batch,copy,step,loss,logit_gap\n"; }

/// Runs one experiment into `dir`. With `resume`, continues from the
/// checkpoint stored there.
inline RunOutcome run_in_dir(const ExperimentConfig& cfg, const fs::path& dir, bool resume = false) {
  const TaskStream stream = build_stream(cfg);
  const ExperimentSettings settings = settings_for(cfg);
  fs::create_directories(dir);
  write_atomic(dir / "config.resolved", resolved_json(cfg).dump(2) + "\n");

  std::optional<RunState> start;
  if (resume) {
    const fs::path ck = dir / "checkpoint.json";
    if (!fs::exists(ck)) throw std::runtime_error("no checkpoint in " + dir.string());
    const json j = json::parse(read_text(ck));
    if (j.value("config_hash", "") != settings.config_hash)
      throw std::runtime_error("checkpoint was written under a different config");
    start = run_state_from_json(j);
  }

  std::ostringstream trace;
  trace.precision(17);
  StepObserver observer;
  if (cfg.attack_trace) {
    trace << attack_trace_header();
    observer = [&](const StepInfo& info) {
      if (info.attack_logs == nullptr) return;
      for (const auto& log : *info.attack_logs)
        for (const auto& st : log.steps)
          trace << (info.phase == Phase::train ? "train" : "finetune") << ',' << info.stage << ','
                << info.epoch << ',' << info.batch << ',' << log.copy << ',' << st.step << ',' << st.loss
                << ',' << st.logit_gap << '\n';
    };
  }
  StageCallback on_stage;
  if (cfg.checkpoint) {
    on_stage = [&](const RunState& s) {
      json j = to_json(s);
      j["config_hash"] = settings.config_hash;
      write_atomic(dir / "checkpoint.json", j.dump() + "\n");
    };
  }

  ExperimentResult res = run_experiment(stream, settings, observer, std::move(start), on_stage);
  const auto& records = res.state.records;
  write_atomic(dir / "records.jsonl", records_jsonl(records));
  write_atomic(dir / "summary.json", to_json(res.summary).dump(2) + "\n");
  write_atomic(dir / "curves.csv", curves_csv(records));
  {
    std::ostringstream os;
    os << "stage,wall_seconds\n";
    for (const auto& r : records) os << r.stage << ',' << r.wall_seconds << '\n';
    write_atomic(dir / "timings.csv", os.str());
  }
  if (cfg.dump_points && res.points) {
    const auto& p = *res.points;
    write_atomic(dir / "points_memory.csv", dump_points(p.memory, p.memory_labels, "memory"));
    write_atomic(dir / "points_augmented.csv", dump_points(p.augmented, p.augmented_labels, "augmented"));
    write_atomic(dir / "points_traindata.csv", dump_points(p.traindata, p.traindata_labels, "traindata"));
  }
  if (cfg.attack_trace) write_atomic(dir / "attack_trace.csv", trace.str());
  return {dir, res.summary, records};
}

inline RunOutcome run_config(const ExperimentConfig& cfg, bool resume = false) {
  return run_in_dir(cfg, output_root(cfg) / run_id(cfg), resume);
}

// ---------------------------------------------------------------------------
// Sweeps

struct Quartiles {
  double q1 = 0.0, median = 0.0, q3 = 0.0;
};

/// Linear-interpolation quantiles of a non-empty sample.
inline Quartiles quartiles(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("quartiles: empty sample");
  std::sort(v.begin(), v.end());
  const auto q = [&](double p) {
    const double pos = p * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(pos);
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
  };
  return {q(0.25), q(0.5), q(0.75)};
}

struct SweepCell {
  Method method;
  std::uint64_t seed;
  std::optional<Summary> summary;
  std::string error;
};

struct SweepResult {
  fs::path dir;
  std::vector<SweepCell> cells;  // ordered by (method, seed)
  std::string aggregate_csv;

  std::size_t failures() const {
    return static_cast<std::size_t>(
        std::count_if(cells.begin(), cells.end(), [](const SweepCell& c) { return !c.summary; }));
  }
};

/// method,metric,n,median,q1,q3,iqr for every method with at least one
/// successful seed.
inline std::string aggregate_csv(const std::vector<SweepCell>& cells, const std::vector<Method>& methods) {
  std::ostringstream os;
  os.precision(17);
  os << "method,metric,n,median,q1,q3,iqr\n";
  for (Method m : methods) {
    std::vector<double> aia, forg, anew;
    for (const auto& c : cells) {
      if (c.method != m || !c.summary) continue;
      aia.push_back(c.summary->average_incremental_accuracy);
      if (c.summary->forgetting) forg.push_back(*c.summary->forgetting);
      if (c.summary->average_new_accuracy) anew.push_back(*c.summary->average_new_accuracy);
    }
    const auto row = [&](const char* name, const std::vector<double>& v) {
      if (v.empty()) return;
      const Quartiles q = quartiles(v);
      os << to_string(m) << ',' << name << ',' << v.size() << ',' << q.median << ',' << q.q1 << ',' << q.q3
         << ',' << (q.q3 - q.q1) << '\n';
    };
    row("average_incremental_accuracy", aia);
    row("forgetting", forg);
    row("average_new_accuracy", anew);
  }
  return os.str();
}

/// Runs every (method, seed) pair on `jobs` worker threads. Each pair gets
/// its own directory <root>/<sweep-id>/<method>/seed_<s>.
inline SweepResult run_sweep(const ExperimentConfig& base, std::vector<std::uint64_t> seeds,
                             std::size_t jobs, const fs::path& dir) {
  if (seeds.empty()) throw ConfigError("sweep.seeds", "need at least one seed");
  std::sort(seeds.begin(), seeds.end());
  seeds.erase(std::unique(seeds.begin(), seeds.end()), seeds.end());
  std::vector<Method> methods = base.sweep_methods.empty() ? std::vector<Method>{base.method} : base.sweep_methods;

  SweepResult out;
  out.dir = dir;
  for (Method m : methods)
    for (std::uint64_t s : seeds) out.cells.push_back({m, s, std::nullopt, {}});

  std::atomic<std::size_t> next{0};
  const auto worker = [&] {
    for (std::size_t i = next++; i < out.cells.size(); i = next++) {
      auto& cell = out.cells[i];
      ExperimentConfig c = with_seed(with_method(base, cell.method), cell.seed);
      c.sweep_seeds.clear();
      c.sweep_methods.clear();
      c.run_id.clear();
      try {
        cell.summary =
            run_in_dir(c, dir / to_string(cell.method) / ("seed_" + std::to_string(cell.seed))).summary;
      } catch (const std::exception& e) {
        cell.error = e.what();
      }
    }
  };
  jobs = std::max<std::size_t>(1, std::min(jobs, out.cells.size()));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < jobs; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  out.aggregate_csv = aggregate_csv(out.cells, methods);
  write_atomic(dir / "aggregate.csv", out.aggregate_csv);
  return out;
}

// ---------------------------------------------------------------------------
// Reports

/// Recomputes the summary of a run directory from its records and checks it
/// against summary.json. Returns a human-readable table.
inline std::string report_run(const fs::path& dir) {
  const auto records = parse_records_jsonl(read_text(dir / "records.jsonl"));
  if (records.empty()) throw std::runtime_error("no records in " + dir.string());
  const Summary stored = summary_from_json(json::parse(read_text(dir / "summary.json")));
  const Summary again = summarize(records, stored.config_hash, stored.seed);
  if (to_json(again) != to_json(stored))
    throw std::runtime_error("summary.json does not match records.jsonl in " + dir.string());
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(4);
  os << dir.string() << '\n';
  os << "  stage  accuracy  new\n";
  for (const auto& r : records) {
    os << "  " << r.stage << "      " << r.accuracy << "    ";
    if (r.new_accuracy) os << *r.new_accuracy;
    os << '\n';
  }
  os << "  avg incremental accuracy " << again.average_incremental_accuracy << '\n';
  if (again.forgetting) os << "  forgetting " << *again.forgetting << '\n';
  if (again.average_new_accuracy) os << "  avg new accuracy " << *again.average_new_accuracy << '\n';
  return os.str();
}

/// Reports a run directory, or every run below a sweep directory.
inline std::string report_dir(const fs::path& dir) {
  if (fs::exists(dir / "records.jsonl")) return report_run(dir);
  std::vector<fs::path> runs;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().filename() == "records.jsonl") runs.push_back(e.path().parent_path());
  if (runs.empty()) throw std::runtime_error("no runs under " + dir.string());
  std::sort(runs.begin(), runs.end());
  std::string out;
  for (const auto& r : runs) out += report_run(r);
  if (fs::exists(dir / "aggregate.csv")) out += "\n" + read_text(dir / "aggregate.csv");
  return out;
}

}  // namespace ccfa
