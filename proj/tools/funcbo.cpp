// funcbo command-line tool.
//
//   funcbo run --config run.cfg [--seed N] [--out DIR]
//   funcbo gen-data --task iv --n 5000 --seed 0 --out data.txt
//   funcbo check [--suite quick|full]
//   funcbo sweep --config base.cfg --grid grid.txt
//   funcbo compare DIR... [--out table.csv]
//
// Exit codes: 0 success, 1 run failure, 2 config error, 3 acceptance failure.

#include <atomic>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <thread>

#include <CLI11.hpp>

#include "funcbo/harness/acceptance.hpp"
#include "funcbo/harness/runner.hpp"

using namespace funcbo;
using namespace funcbo::harness;

namespace {

constexpr int kOk = 0, kRunFailure = 1, kConfigError = 2, kAcceptanceFailure = 3;

int exit_code_for(const Error& e) { return e.code() == ErrorCode::config ? kConfigError : kRunFailure; }

std::size_t worker_threads(std::size_t jobs) {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("FUNCBO_THREADS")) {
    try {
      const long v = std::stol(env);
      if (v >= 1) n = static_cast<std::size_t>(v);
    } catch (const std::exception&) {
      std::cerr << "warning: ignoring FUNCBO_THREADS='" << env << "'\n";
    }
  }
  return std::max<std::size_t>(1, std::min(n, jobs));
}

void print_summary(const RunSummary& s, const std::string& dir) {
  std::cout << s.task << '/' << s.method << " seed " << s.seed << ": " << s.final_metric.name << " = "
            << std::setprecision(6) << s.final_metric.value;
  std::size_t failed = 0;
  for (const auto& c : s.oracle_checks) failed += !c.pass;
  if (!s.oracle_checks.empty())
    std::cout << ", oracle checks " << (s.oracle_checks.size() - failed) << '/' << s.oracle_checks.size() << " pass";
  std::cout << " -> " << dir << '\n';
}

int cmd_run(const std::string& config_path, const std::optional<std::uint64_t>& seed,
            const std::optional<std::string>& out) {
  RunConfig cfg;
  try {
    KeyValues kv = load_key_values(config_path);
    if (seed) kv["run.seed"] = std::to_string(*seed);
    if (out) kv["run.out_dir"] = *out;
    cfg = config_from_key_values(kv);
  } catch (const Error& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  }
  try {
    const RunOutput res = run_to_dir(cfg);
    print_summary(res.summary, cfg.out_dir);
  } catch (const Error& e) {
    std::cerr << "run failed: " << e.what() << '\n';
    return exit_code_for(e);
  } catch (const std::exception& e) {
    std::cerr << "run failed: " << e.what() << '\n';
    return kRunFailure;
  }
  return kOk;
}

struct GenArgs {
  std::string task;
  std::size_t n = 0;
  std::uint64_t seed = 0;
  std::string out;
  double kappa = 8.0;
  std::size_t d_t = 16;
  std::string instance_out;
};

int cmd_gen_data(const GenArgs& a) {
  try {
    Dataset d;
    if (a.task == "iv") {
      const IvInstance inst = make_iv_instance(a.seed, a.kappa, a.d_t);
      Rng rng(a.seed);
      d = gen_iv_data(inst, a.n, rng);
      if (!a.instance_out.empty()) {
        std::ostringstream os;
        write_iv_instance(os, inst);
        atomic_write(a.instance_out, os.str());
      }
    } else if (a.task == "quad") {
      QuadOptions o;
      o.n = a.n;
      d = make_quad_instance(a.seed, o).d_in;
    } else if (a.task == "rl_toy") {
      Rng rng(a.seed);
      const ToyMdp mdp = gen_mdp(rng);
      d = replay_collect(mdp, a.n, rng);
    } else {
      std::cerr << "config error: unknown task '" << a.task << "'\n";
      return kConfigError;
    }
    std::ostringstream os;
    write_dataset(os, a.task, d);
    atomic_write(a.out, os.str());
    std::cout << "wrote " << d.size() << " samples to " << a.out << '\n';
  } catch (const Error& e) {
    std::cerr << "gen-data failed: " << e.what() << '\n';
    return exit_code_for(e);
  }
  return kOk;
}

int cmd_check(const std::string& suite) {
  std::vector<int> ids;
  try {
    ids = suite_ids(suite);
  } catch (const Error& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  }
  const auto results = run_criteria(ids, [](const CriterionResult& r) { std::cout << format_result(r) << std::endl; });
  std::size_t passed = 0;
  for (const auto& r : results) passed += r.pass;
  std::cout << passed << '/' << results.size() << " criteria pass\n";
  return passed == results.size() ? kOk : kAcceptanceFailure;
}

int cmd_sweep(const std::string& config_path, const std::string& grid_path) {
  std::vector<RunConfig> runs;
  std::string root;
  try {
    const KeyValues base = load_key_values(config_path);
    std::ifstream g(grid_path);
    require(static_cast<bool>(g), ErrorCode::config, "cannot open grid '" + grid_path + "'");
    const auto expanded = expand_grid(base, parse_grid(g, grid_path));
    root = base.count("run.out_dir") ? base.at("run.out_dir") : "sweep";
    for (std::size_t i = 0; i < expanded.size(); ++i) {
      KeyValues kv = expanded[i];
      std::ostringstream dir;
      dir << root << "/run_" << std::setw(4) << std::setfill('0') << i;
      kv["run.out_dir"] = dir.str();
      runs.push_back(config_from_key_values(kv));
    }
  } catch (const Error& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  }

  std::atomic<std::size_t> next{0};
  std::atomic<std::size_t> failures{0};
  std::mutex io;
  auto worker = [&] {
    for (std::size_t i = next++; i < runs.size(); i = next++) {
      try {
        const RunOutput res = run_to_dir(runs[i]);
        std::lock_guard<std::mutex> lock(io);
        print_summary(res.summary, runs[i].out_dir);
      } catch (const std::exception& e) {
        ++failures;
        std::lock_guard<std::mutex> lock(io);
        std::cerr << runs[i].out_dir << ": run failed: " << e.what() << '\n';
      }
    }
  };
  const std::size_t n_threads = worker_threads(runs.size());
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < n_threads; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  std::vector<fs::path> dirs;
  for (const auto& r : runs) dirs.emplace_back(r.out_dir);
  const Comparison cmp = emit_comparison(dirs);
  std::ostringstream os;
  write_comparison_csv(os, cmp);
  try {
    atomic_write(fs::path(root) / "comparison.csv", os.str());
  } catch (const Error& e) {
    std::cerr << "cannot write comparison: " << e.what() << '\n';
    return kRunFailure;
  }
  std::cout << runs.size() - failures << '/' << runs.size() << " runs completed; table in " << root
            << "/comparison.csv\n";
  return failures == 0 ? kOk : kRunFailure;
}

int cmd_compare(const std::vector<std::string>& dirs, const std::string& out) {
  std::vector<fs::path> paths(dirs.begin(), dirs.end());
  const Comparison cmp = emit_comparison(paths);
  for (const auto& s : cmp.skipped) std::cerr << "skipped (no summary): " << s << '\n';
  if (cmp.rows.empty()) {
    std::cerr << "no completed runs\n";
    return kRunFailure;
  }
  std::ostringstream os;
  write_comparison_csv(os, cmp);
  if (out.empty()) {
    std::cout << os.str();
  } else {
    try {
      atomic_write(out, os.str());
    } catch (const Error& e) {
      std::cerr << e.what() << '\n';
      return kRunFailure;
    }
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Functional bilevel optimization experiments"};
  app.require_subcommand(1);

  std::string config_path, grid_path, suite = "quick", compare_out;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  GenArgs gen;
  std::vector<std::string> compare_dirs;

  auto* run = app.add_subcommand("run", "execute one run");
  run->add_option("--config", config_path, "config file")->required();
  run->add_option("--seed", seed, "override run.seed");
  run->add_option("--out", out_dir, "override run.out_dir");

  auto* gd = app.add_subcommand("gen-data", "write a dataset file");
  gd->add_option("--task", gen.task, "iv, quad or rl_toy")->required();
  gd->add_option("--n", gen.n, "number of samples")->required();
  gd->add_option("--seed", gen.seed, "generator seed")->required();
  gd->add_option("--out", gen.out, "output file")->required();
  gd->add_option("--kappa", gen.kappa, "iv confounding strength");
  gd->add_option("--d-t", gen.d_t, "iv treatment dimension");
  gd->add_option("--instance-out", gen.instance_out, "iv: also write the instance file");

  auto* check = app.add_subcommand("check", "run the acceptance suite");
  check->add_option("--suite", suite, "quick or full");

  auto* sweep = app.add_subcommand("sweep", "expand a grid over a base config");
  sweep->add_option("--config", config_path, "base config")->required();
  sweep->add_option("--grid", grid_path, "grid file")->required();

  auto* cmp = app.add_subcommand("compare", "per-method quantiles of final metrics");
  cmp->add_option("dirs", compare_dirs, "run directories")->required();
  cmp->add_option("--out", compare_out, "output CSV (default: stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  if (*run) return cmd_run(config_path, seed, out_dir);
  if (*gd) return cmd_gen_data(gen);
  if (*check) return cmd_check(suite);
  if (*sweep) return cmd_sweep(config_path, grid_path);
  if (*cmp) return cmd_compare(compare_dirs, compare_out);
  return kConfigError;
}
