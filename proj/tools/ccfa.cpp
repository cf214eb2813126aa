// Command-line front end: run, sweep, gradcheck, oracle, report.
// Exit codes: 0 success, 1 runtime failure, 2 configuration error.

#include <chrono>
#include <cstdio>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "ccfa/config.hpp"
#include "ccfa/experiment.hpp"
#include "ccfa/gradcheck.hpp"
#include "ccfa/oracle.hpp"

namespace {

constexpr int kOk = 0;
constexpr int kFailure = 1;
constexpr int kConfigError = 2;

std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
      v = std::stoull(item, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != item.size()) throw ccfa::ConfigError("seeds", "'" + item + "' is not a seed");
    out.push_back(v);
  }
  return out;
}

int cmd_run(const std::string& path, bool resume) {
  const auto cfg = ccfa::load_config(path);
  const auto res = ccfa::run_config(cfg, resume);
  std::printf("%s\n", res.dir.string().c_str());
  std::printf("avg incremental accuracy %.4f", res.summary.average_incremental_accuracy);
  if (res.summary.forgetting) std::printf("  forgetting %.4f", *res.summary.forgetting);
  if (res.summary.average_new_accuracy) std::printf("  avg new accuracy %.4f", *res.summary.average_new_accuracy);
  std::printf("\n");
  return kOk;
}

int cmd_sweep(const std::string& path, const std::string& seeds_text, std::size_t jobs) {
  const auto cfg = ccfa::load_config(path);
  auto seeds = seeds_text.empty() ? cfg.sweep_seeds : parse_seeds(seeds_text);
  if (seeds.empty()) throw ccfa::ConfigError("seeds", "need at least one seed (--seeds or sweep.seeds)");
  const std::string id = cfg.run_id.empty() ? "sweep-" + ccfa::config_hash(cfg).substr(0, 8) : cfg.run_id;
  const auto res = ccfa::run_sweep(cfg, seeds, jobs, ccfa::output_root(cfg) / id);
  for (const auto& c : res.cells)
    if (!c.summary)
      std::fprintf(stderr, "seed %llu (%s) failed: %s\n", static_cast<unsigned long long>(c.seed),
                   ccfa::to_string(c.method), c.error.c_str());
  std::printf("%s\n%s", res.dir.string().c_str(), res.aggregate_csv.c_str());
  return res.failures() == 0 ? kOk : kFailure;
}

int cmd_gradcheck(const std::string& corrupt) {
  ccfa::GradCheckOptions opt;
  opt.corrupt = corrupt;
  const auto t0 = std::chrono::steady_clock::now();
  bool ok = true;
  for (const auto& e : ccfa::gradcheck_battery(opt)) {
    std::printf("%-22s probes %4zu  max rel err %.3e  max abs err %.3e  %s\n", e.loss.c_str(),
                e.report.probe_count, e.report.max_rel_err, e.report.max_abs_err, e.passed ? "ok" : "FAIL");
    ok = ok && e.passed;
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("%s in %.2f s\n", ok ? "all gradients match" : "gradient mismatch", secs);
  return ok ? kOk : kFailure;
}

int cmd_oracle(std::size_t b, std::size_t c, std::size_t trials, std::uint64_t seed) {
  ccfa::OracleOptions opt;
  opt.max_rows = b;
  opt.max_classes = c;
  opt.trials = trials;
  opt.seed = seed;
  ccfa::OracleReport rep;
  try {
    rep = ccfa::run_oracle(opt);
  } catch (const ccfa::BudgetError& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return kConfigError;
  }
  for (const auto& v : rep.violations)
    std::printf("violation (%s) in trial %zu: %s\n", v.check.c_str(), v.trial, v.instance.c_str());
  std::printf("%zu trials, %zu violations, instance set %s\n", rep.trials, rep.violations.size(),
              ccfa::hex64(rep.instance_hash).c_str());
  return rep.ok() ? kOk : kFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Class-incremental learning with cross-class feature augmentation"};
  app.require_subcommand(1);

  std::string config;
  bool resume = false;
  auto* run = app.add_subcommand("run", "Run one experiment from a config file");
  run->add_option("--config", config, "Config file (JSON)")->required();
  run->add_flag("--resume", resume, "Continue from the checkpoint in the run directory");

  std::string seeds;
  std::size_t jobs = 1;
  auto* sweep = app.add_subcommand("sweep", "Run a config over several seeds and aggregate");
  sweep->add_option("--config", config, "Config file (JSON)")->required();
  sweep->add_option("--seeds", seeds, "Comma-separated seeds (default: sweep.seeds)");
  sweep->add_option("--jobs", jobs, "Parallel workers")->check(CLI::PositiveNumber);

  std::string corrupt;
  auto* grad = app.add_subcommand("gradcheck", "Finite-difference check of every loss gradient");
  grad->add_option("--corrupt", corrupt)->group("");  // test hook: perturb one analytic gradient

  std::size_t b = 4, c = 3, trials = 100;
  std::uint64_t seed = 0;
  auto* oracle = app.add_subcommand("oracle", "Cross-check target assignment solvers against brute force");
  oracle->add_option("--b", b, "Maximum rows per instance");
  oracle->add_option("--c", c, "Maximum old classes per instance");
  oracle->add_option("--trials", trials, "Number of random instances");
  oracle->add_option("--seed", seed, "Instance seed");

  std::string dir;
  auto* report = app.add_subcommand("report", "Recompute and print metrics of a run or sweep directory");
  report->add_option("--dir", dir, "Run or sweep directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfigError;
  }

  try {
    if (*run) return cmd_run(config, resume);
    if (*sweep) return cmd_sweep(config, seeds, jobs);
    if (*grad) {
      if (!corrupt.empty() && std::find(ccfa::gradcheck_losses().begin(), ccfa::gradcheck_losses().end(),
                                        corrupt) == ccfa::gradcheck_losses().end()) {
        std::fprintf(stderr, "unknown loss '%s'\n", corrupt.c_str());
        return kConfigError;
      }
      return cmd_gradcheck(corrupt);
    }
    if (*oracle) return cmd_oracle(b, c, trials, seed);
    if (*report) {
      std::printf("%s", ccfa::report_dir(dir).c_str());
      return kOk;
    }
  } catch (const ccfa::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfigError;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kFailure;
  }
  return kFailure;
}
