#include <gtest/gtest.h>

#include <algorithm>
#include <fstream>
#include <sstream>

#include "funcbo/harness/acceptance.hpp"
#include "funcbo/harness/runner.hpp"

using namespace funcbo;
using namespace funcbo::harness;

namespace {

const fs::path kSource = FUNCBO_SOURCE_DIR;

KeyValues parse(const std::string& text) {
  std::istringstream is(text);
  return parse_key_values(is, "test");
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("funcbo_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_summary(const fs::path& dir, const std::string& method, double value) {
  fs::create_directories(dir);
  RunSummary s;
  s.method = method;
  s.final_metric = {"m", value};
  atomic_write(dir / "summary.json", s.to_json().dump());
}

}  // namespace

TEST(Config, SectionsBecomeDottedKeys) {
  const KeyValues kv = parse("# comment\n[run]\ntask = quad  # trailing\n\n[optim]\nN=5\n");
  EXPECT_EQ(kv.size(), 2u);
  EXPECT_EQ(kv.at("run.task"), "quad");
  EXPECT_EQ(kv.at("optim.N"), "5");
}

TEST(Config, SyntaxErrorsCarryLineNumbers) {
  try {
    parse("[run]\ntask quad\n");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::config);
    EXPECT_NE(std::string(e.what()).find("test:2"), std::string::npos);
  }
  EXPECT_THROW(parse("task = quad\n"), Error);
  EXPECT_THROW(parse("[run]\ntask = quad\ntask = iv\n"), Error);
  EXPECT_THROW(parse("[run\n"), Error);
}

TEST(Config, DefaultsAndOverrides) {
  const RunConfig c = config_from_key_values(parse("[run]\ntask = quad\nseed = 7\n[quad]\nridge = 0.5\n"));
  EXPECT_EQ(c.task, Task::quad);
  EXPECT_EQ(c.seed, 7u);
  EXPECT_EQ(c.optim.R_in, 0.5);
  EXPECT_EQ(c.optim.R_adj, 0.5);
  EXPECT_FALSE(c.record_wall_ms);
}

TEST(Config, RejectsUnknownKeysAndBadValues) {
  EXPECT_THROW(config_from_key_values(parse("[run]\ntsk = quad\n")), Error);
  EXPECT_THROW(config_from_key_values(parse("[optim]\nN = -3\n")), Error);
  EXPECT_THROW(config_from_key_values(parse("[optim]\neta_out = fast\n")), Error);
  EXPECT_THROW(config_from_key_values(parse("[run]\nmethod = newton\n")), Error);
  EXPECT_THROW(config_from_key_values(parse("[run]\ntask = quad\n[optim]\nR_in = 1\n")), Error);
  EXPECT_THROW(config_from_key_values(parse("[run]\ntask = quad\nmethod = mle\n")), Error);
  EXPECT_THROW(config_from_key_values(parse("[run]\ntask = iv\nmethod = funcid_linear\n[optim]\nadjoint_mode = iterative\n")),
               Error);
  EXPECT_THROW(config_from_key_values(parse("[run]\ntask = rl_toy\n[rl]\ngamma = 1\n")), Error);
}

TEST(Config, FuncidLinearImpliesExactAdjoint) {
  const RunConfig c = config_from_key_values(parse("[run]\ntask = iv\nmethod = funcid_linear\n"));
  EXPECT_EQ(c.optim.adjoint_mode, AdjointMode::exact_linear);
}

TEST(Config, ShippedConfigsParse) {
  for (const auto& entry : fs::directory_iterator(kSource / "configs")) {
    if (entry.path().extension() != ".cfg") continue;
    EXPECT_NO_THROW(load_config(entry.path().string())) << entry.path();
  }
}

TEST(Config, ShippedConfigsMatchAcceptanceSettings) {
  auto strip = [](KeyValues kv) {
    kv.erase("run.seed");
    kv.erase("run.out_dir");
    return kv;
  };
  EXPECT_EQ(strip(load_key_values((kSource / "configs/iv_funcid_linear.cfg").string())),
            accept::iv_acceptance_config("funcid_linear"));
  EXPECT_EQ(strip(load_key_values((kSource / "configs/iv_direct.cfg").string())), accept::iv_acceptance_config("direct"));
  EXPECT_EQ(strip(load_key_values((kSource / "configs/rl_funcid.cfg").string())), accept::rl_acceptance_config());
}

TEST(Grid, CartesianProductLastAxisFastest) {
  std::istringstream g("run.seed = 0, 1\noptim.N = 5, 6, 7\n");
  const auto axes = parse_grid(g);
  const auto runs = expand_grid(KeyValues{{"run.task", "quad"}}, axes);
  ASSERT_EQ(runs.size(), 6u);
  EXPECT_EQ(runs[0].at("run.seed"), "0");
  EXPECT_EQ(runs[0].at("optim.N"), "5");
  EXPECT_EQ(runs[1].at("optim.N"), "6");
  EXPECT_EQ(runs[3].at("run.seed"), "1");
  EXPECT_EQ(runs[3].at("optim.N"), "5");
  for (const auto& r : runs) EXPECT_EQ(r.at("run.task"), "quad");
}

TEST(Grid, MalformedGridsRejected) {
  std::istringstream dup("run.seed = 0\nrun.seed = 1\n"), empty("run.seed = 0,,1\n"), nodot("seed = 1\n");
  EXPECT_THROW(parse_grid(dup), Error);
  EXPECT_THROW(parse_grid(empty), Error);
  EXPECT_THROW(parse_grid(nodot), Error);
}

TEST(Records, CsvRoundTripIsExact) {
  std::vector<RunRecord> recs(2);
  recs[0].iter = 0;
  recs[0].outer_loss = 0.1 + 0.2;
  recs[0].inner_loss = 1e-300;
  recs[0].adjoint_loss = -3.25;
  recs[0].grad_norm = 1.0 / 3.0;
  recs[0].hvp_dim = 2;
  recs[0].inner_steps = 5;
  recs[1].iter = 1;
  recs[1].grad_bias = 7e-9;
  recs[1].wall_ms = 12.5;
  recs[1].eval_metric = 0.125;
  std::stringstream ss;
  write_records_csv(ss, recs);
  const auto back = read_records_csv(ss);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].outer_loss, recs[0].outer_loss);
  EXPECT_EQ(back[0].inner_loss, recs[0].inner_loss);
  EXPECT_EQ(back[0].adjoint_loss, recs[0].adjoint_loss);
  EXPECT_EQ(back[0].grad_norm, recs[0].grad_norm);
  EXPECT_FALSE(back[0].grad_bias.has_value());
  EXPECT_FALSE(back[0].wall_ms.has_value());
  EXPECT_EQ(back[1].grad_bias, recs[1].grad_bias);
  EXPECT_EQ(back[1].wall_ms, recs[1].wall_ms);
  EXPECT_EQ(back[1].eval_metric, recs[1].eval_metric);
  EXPECT_FALSE(back[1].adjoint_loss.has_value());
}

TEST(Records, BadHeaderRejected) {
  std::stringstream ss("iter,loss\n0,1\n");
  EXPECT_THROW(read_records_csv(ss), Error);
}

TEST(AtomicWrite, ReplacesContentAndLeavesNoTempFile) {
  const fs::path dir = scratch("atomic");
  atomic_write(dir / "f.txt", "one");
  atomic_write(dir / "f.txt", "two");
  EXPECT_EQ(slurp(dir / "f.txt"), "two");
  EXPECT_FALSE(fs::exists(dir / "f.txt.tmp"));
  EXPECT_THROW(atomic_write(dir / "missing" / "f.txt", "x"), Error);
}

TEST(Comparison, SingleRunAndMedianOfTwo) {
  const fs::path root = scratch("cmp");
  write_summary(root / "a", "funcid", 1.0);
  write_summary(root / "b", "funcid", 3.0);
  write_summary(root / "c", "aid", 5.0);
  fs::create_directories(root / "incomplete");
  const Comparison c = emit_comparison({root / "a", root / "b", root / "c", root / "incomplete"});
  ASSERT_EQ(c.rows.size(), 2u);
  const auto& aid = c.rows[0].method == "aid" ? c.rows[0] : c.rows[1];
  const auto& fid = c.rows[0].method == "aid" ? c.rows[1] : c.rows[0];
  EXPECT_EQ(aid.n_seeds, 1u);
  EXPECT_EQ(aid.min, 5.0);
  EXPECT_EQ(aid.median, 5.0);
  EXPECT_EQ(aid.max, 5.0);
  EXPECT_EQ(fid.median, 2.0);
  EXPECT_EQ(fid.q1, 1.5);
  ASSERT_EQ(c.skipped.size(), 1u);
}

TEST(Comparison, QuantilesMatchSortedRecomputation) {
  Rng rng(1);
  std::vector<double> v(20);
  for (double& x : v) x = rng.normal();
  std::vector<double> s = v;
  std::sort(s.begin(), s.end());
  // 20 samples: q1 at position 4.75, median at 9.5, q3 at 14.25
  EXPECT_DOUBLE_EQ(quantile_linear(v, 0.25), s[4] + 0.75 * (s[5] - s[4]));
  EXPECT_DOUBLE_EQ(quantile_linear(v, 0.5), 0.5 * (s[9] + s[10]));
  EXPECT_DOUBLE_EQ(quantile_linear(v, 0.75), s[14] + 0.25 * (s[15] - s[14]));
  EXPECT_EQ(quantile_linear(v, 0.0), s.front());
  EXPECT_EQ(quantile_linear(v, 1.0), s.back());
}

TEST(Runner, QuadRunWritesRecordsSummaryAndCheckpoint) {
  const fs::path dir = scratch("quad_run");
  KeyValues kv = load_key_values((kSource / "configs/quad_funcid.cfg").string());
  kv["optim.N"] = "10";
  kv["run.out_dir"] = dir.string();
  const RunConfig c = config_from_key_values(kv);
  const RunOutput out = run_to_dir(c);
  std::ifstream csv(dir / "funcid_records.csv");
  const auto recs = read_records_csv(csv);
  EXPECT_EQ(recs.size(), 10u);
  for (const auto& r : recs) {
    EXPECT_TRUE(r.grad_bias.has_value());
    EXPECT_FALSE(r.wall_ms.has_value());
  }
  const json j = json::parse(slurp(dir / "summary.json"));
  EXPECT_EQ(j.at("format"), "FUNCBO-SUMMARY v1");
  EXPECT_EQ(j.at("method"), "funcid");
  EXPECT_EQ(j.at("n_records"), 10);
  EXPECT_TRUE(j.at("wall_time_s").is_null());
  for (const auto& chk : j.at("oracle_checks")) EXPECT_TRUE(chk.at("pass").get<bool>()) << chk.dump();
  EXPECT_FALSE(out.summary.oracle_checks.empty());
}

TEST(Runner, SameConfigSameBytes) {
  const fs::path a = scratch("det_a"), b = scratch("det_b");
  KeyValues kv = load_key_values((kSource / "configs/quad_aid.cfg").string());
  kv["optim.N"] = "5";
  kv["run.out_dir"] = a.string();
  run_to_dir(config_from_key_values(kv));
  kv["run.out_dir"] = b.string();
  run_to_dir(config_from_key_values(kv));
  EXPECT_EQ(slurp(a / "aid_records.csv"), slurp(b / "aid_records.csv"));
}

TEST(Runner, InstanceSeedDefaultsToRunSeed) {
  KeyValues kv = parse("[run]\ntask = quad\nseed = 4\n[optim]\nN = 3\nM = 2\nK = 2\n[quad]\nn = 30\n");
  RunOptions o;
  const double implicit = execute_run(config_from_key_values(kv), o).summary.metrics.at("outer_objective");
  kv["quad.instance_seed"] = "4";
  const double same = execute_run(config_from_key_values(kv), o).summary.metrics.at("outer_objective");
  kv["quad.instance_seed"] = "5";
  const double other = execute_run(config_from_key_values(kv), o).summary.metrics.at("outer_objective");
  EXPECT_EQ(implicit, same);
  EXPECT_NE(implicit, other);
}

TEST(Runner, PenaltyAndRlMethodsRun) {
  for (const char* name : {"quad_value_penalty.cfg", "quad_gradient_penalty.cfg", "rl_mle.cfg"}) {
    KeyValues kv = load_key_values((kSource / "configs" / name).string());
    kv["optim.N"] = "5";
    if (kv.count("rl.buffer")) kv["rl.buffer"] = "500";
    RunOptions o;
    const RunOutput out = execute_run(config_from_key_values(kv), o);
    EXPECT_EQ(out.result.records.size(), 5u) << name;
    EXPECT_TRUE(std::isfinite(out.summary.final_metric.value)) << name;
  }
}

TEST(Acceptance, SuitesAndFormatting) {
  EXPECT_EQ(suite_ids("quick"), (std::vector<int>{11, 1, 2, 3}));
  EXPECT_EQ(suite_ids("full").size(), 11u);
  EXPECT_THROW(suite_ids("nightly"), Error);
  CriterionResult r = named(4, "x");
  r.pass = true;
  EXPECT_EQ(format_result(r).rfind("PASS", 0), 0u);
}
