#pragma once

// Run configuration: flat `key = value` text with [section] headers.
//
//   [run]
//   task = quad
//   method = funcid
//
// Keys are addressed as section.key; unknown sections or keys are rejected.

#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "funcbo/baselines.hpp"
#include "funcbo/funcbo.hpp"
#include "funcbo/tasks.hpp"

namespace funcbo::harness {

using KeyValues = std::map<std::string, std::string>;

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline KeyValues parse_key_values(std::istream& is, const std::string& source = "config") {
  KeyValues kv;
  std::string line, section;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = source + ":" + std::to_string(lineno);
    if (line.front() == '[') {
      require(line.back() == ']' && line.size() > 2, ErrorCode::config, where + ": bad section header");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    const auto eq = line.find('=');
    require(eq != std::string::npos, ErrorCode::config, where + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    require(!key.empty(), ErrorCode::config, where + ": empty key");
    require(!section.empty(), ErrorCode::config, where + ": key '" + key + "' outside a section");
    const std::string full = section + "." + key;
    require(!kv.count(full), ErrorCode::config, where + ": duplicate key '" + full + "'");
    kv[full] = value;
  }
  return kv;
}

inline KeyValues load_key_values(const std::string& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorCode::config, "cannot open config '" + path + "'");
  return parse_key_values(in, path);
}

enum class Task { quad, iv, rl_toy };
enum class Method { funcid, funcid_linear, aid, value_penalty, gradient_penalty, mle, direct };

inline const char* to_string(Task t) {
  switch (t) {
    case Task::quad: return "quad";
    case Task::iv: return "iv";
    case Task::rl_toy: return "rl_toy";
  }
  return "?";
}

inline const char* to_string(Method m) {
  switch (m) {
    case Method::funcid: return "funcid";
    case Method::funcid_linear: return "funcid_linear";
    case Method::aid: return "aid";
    case Method::value_penalty: return "value_penalty";
    case Method::gradient_penalty: return "gradient_penalty";
    case Method::mle: return "mle";
    case Method::direct: return "direct";
  }
  return "?";
}

struct QuadTaskConfig {
  QuadOptions opts;
  std::optional<std::uint64_t> instance_seed;  // default: the run seed
};

struct IvTaskConfig {
  std::size_t n = 5000;
  std::size_t d_t = 16;
  double kappa = 8.0;
  std::size_t hidden = 32;
  Activation activation = Activation::relu;
  std::optional<std::uint64_t> instance_seed;  // default: the run seed
  std::string data_path;      // optional FUNCBO-DATA file
  std::string instance_path;  // optional FUNCBO-IV file
  std::size_t eval_every = 0;  // 0 = only at the end
};

struct RlTaskConfig {
  std::size_t n_states = 8;
  std::size_t n_actions = 2;
  double gamma = 0.99;
  double tau = 5e-3;
  std::size_t buffer = 20000;
  MdpModelKind model = MdpModelKind::tabular;
  std::size_t rank = 2;
  std::optional<std::uint64_t> mdp_seed;  // default: the run seed
  std::size_t eval_every = 0;
};

struct RunConfig {
  Task task = Task::quad;
  Method method = Method::funcid;
  std::uint64_t seed = 0;
  std::string out_dir = "run";
  bool record_wall_ms = false;
  OptimConfig optim;
  AidConfig aid;
  PenaltyConfig penalty;
  QuadTaskConfig quad;
  IvTaskConfig iv;
  RlTaskConfig rl;
  KeyValues echo;  // the parsed key/values, for the summary
};

namespace detail {

inline double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos == v.size()) return d;
  } catch (const std::exception&) {
  }
  throw Error(ErrorCode::config, "'" + key + "' expects a number, got '" + v + "'");
}

inline std::uint64_t to_count(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    if (!v.empty() && v[0] != '-') {
      const unsigned long long u = std::stoull(v, &pos);
      if (pos == v.size()) return u;
    }
  } catch (const std::exception&) {
  }
  throw Error(ErrorCode::config, "'" + key + "' expects a non-negative integer, got '" + v + "'");
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw Error(ErrorCode::config, "'" + key + "' expects true/false, got '" + v + "'");
}

}  // namespace detail

inline Task parse_task(const std::string& s) {
  if (s == "quad") return Task::quad;
  if (s == "iv") return Task::iv;
  if (s == "rl_toy") return Task::rl_toy;
  throw Error(ErrorCode::config, "unknown task '" + s + "'");
}

inline Method parse_method(const std::string& s) {
  for (Method m : {Method::funcid, Method::funcid_linear, Method::aid, Method::value_penalty,
                   Method::gradient_penalty, Method::mle, Method::direct})
    if (s == to_string(m)) return m;
  throw Error(ErrorCode::config, "unknown method '" + s + "'");
}

/// Applies one key; returns false when the key is unknown.
inline bool apply_key(RunConfig& c, const std::string& k, const std::string& v) {
  using namespace detail;
  auto cnt = [&] { return static_cast<std::size_t>(to_count(k, v)); };
  auto num = [&] { return to_double(k, v); };
  // [run]
  if (k == "run.task") c.task = parse_task(v);
  else if (k == "run.method") c.method = parse_method(v);
  else if (k == "run.seed") c.seed = to_count(k, v);
  else if (k == "run.out_dir") c.out_dir = v;
  else if (k == "run.record_wall_ms") c.record_wall_ms = to_bool(k, v);
  // [optim]
  else if (k == "optim.N") c.optim.N = cnt();
  else if (k == "optim.M") c.optim.M = cnt();
  else if (k == "optim.K") c.optim.K = cnt();
  else if (k == "optim.eta_out") c.optim.eta_out = num();
  else if (k == "optim.eta_in") c.optim.eta_in = num();
  else if (k == "optim.eta_adj") c.optim.eta_adj = num();
  else if (k == "optim.batch_in") c.optim.batch_in = cnt();
  else if (k == "optim.batch_out") c.optim.batch_out = cnt();
  else if (k == "optim.same_batch") c.optim.same_batch = to_bool(k, v);
  else if (k == "optim.warm_start") c.optim.warm_start = to_bool(k, v);
  else if (k == "optim.opt_out") c.optim.opt_out = parse_optimizer(v);
  else if (k == "optim.opt_in") c.optim.opt_in = parse_optimizer(v);
  else if (k == "optim.opt_adj") c.optim.opt_adj = parse_optimizer(v);
  else if (k == "optim.R_in") c.optim.R_in = num();
  else if (k == "optim.R_adj") c.optim.R_adj = num();
  else if (k == "optim.inner_mode") {
    if (v == "iterative") c.optim.inner_mode = InnerMode::iterative;
    else if (v == "exact_linear") c.optim.inner_mode = InnerMode::exact_linear;
    else throw Error(ErrorCode::config, "unknown inner_mode '" + v + "'");
  } else if (k == "optim.adjoint_mode") {
    if (v == "iterative") c.optim.adjoint_mode = AdjointMode::iterative;
    else if (v == "exact_linear") c.optim.adjoint_mode = AdjointMode::exact_linear;
    else if (v == "closed_form_rl") c.optim.adjoint_mode = AdjointMode::closed_form_rl;
    else throw Error(ErrorCode::config, "unknown adjoint_mode '" + v + "'");
  }
  // [aid]
  else if (k == "aid.linear_solver") c.aid.linear_solver = parse_linear_solver(v);
  else if (k == "aid.solver_tol") c.aid.solver_tol = num();
  else if (k == "aid.solver_maxit") c.aid.solver_maxit = cnt();
  else if (k == "aid.gd_lr") c.aid.gd_lr = num();
  else if (k == "aid.hvp_mode") {
    if (v == "exact_linear") c.aid.hvp_mode = HvpMode::exact_linear;
    else if (v == "finite_difference") c.aid.hvp_mode = HvpMode::finite_difference;
    else throw Error(ErrorCode::config, "unknown hvp_mode '" + v + "'");
  } else if (k == "aid.fd_eps") c.aid.fd_eps = num();
  // [penalty]
  else if (k == "penalty.lambda") c.penalty.lambda = num();
  else if (k == "penalty.aux_steps") c.penalty.aux_steps = cnt();
  else if (k == "penalty.fd_eps") c.penalty.fd_eps = num();
  // [quad]
  else if (k == "quad.n") c.quad.opts.n = cnt();
  else if (k == "quad.d_z") c.quad.opts.d_z = cnt();
  else if (k == "quad.d_x") c.quad.opts.d_x = cnt();
  else if (k == "quad.d_t") c.quad.opts.d_t = cnt();
  else if (k == "quad.d_v") c.quad.opts.d_v = cnt();
  else if (k == "quad.sigma_t") c.quad.opts.sigma_t = num();
  else if (k == "quad.sigma_o") c.quad.opts.sigma_o = num();
  else if (k == "quad.ridge") c.quad.opts.ridge = num();
  else if (k == "quad.instance_seed") c.quad.instance_seed = to_count(k, v);
  // [iv]
  else if (k == "iv.n") c.iv.n = cnt();
  else if (k == "iv.d_t") c.iv.d_t = cnt();
  else if (k == "iv.kappa") c.iv.kappa = num();
  else if (k == "iv.hidden") c.iv.hidden = cnt();
  else if (k == "iv.activation") c.iv.activation = parse_activation(v);
  else if (k == "iv.instance_seed") c.iv.instance_seed = to_count(k, v);
  else if (k == "iv.data") c.iv.data_path = v;
  else if (k == "iv.instance") c.iv.instance_path = v;
  else if (k == "iv.eval_every") c.iv.eval_every = cnt();
  // [rl]
  else if (k == "rl.n_states") c.rl.n_states = cnt();
  else if (k == "rl.n_actions") c.rl.n_actions = cnt();
  else if (k == "rl.gamma") c.rl.gamma = num();
  else if (k == "rl.tau") c.rl.tau = num();
  else if (k == "rl.buffer") c.rl.buffer = cnt();
  else if (k == "rl.model") {
    if (v == "tabular") c.rl.model = MdpModelKind::tabular;
    else if (v == "low_rank") c.rl.model = MdpModelKind::low_rank;
    else throw Error(ErrorCode::config, "unknown rl model '" + v + "'");
  } else if (k == "rl.rank") c.rl.rank = cnt();
  else if (k == "rl.mdp_seed") c.rl.mdp_seed = to_count(k, v);
  else if (k == "rl.eval_every") c.rl.eval_every = cnt();
  else return false;
  return true;
}

/// Cross-field checks, run before any compute.
inline void validate(const RunConfig& c) {
  c.optim.validate();
  c.aid.validate();
  c.penalty.validate();
  const bool rl = c.task == Task::rl_toy;
  if (c.method == Method::mle)
    require(rl, ErrorCode::config, "method mle is only defined for task rl_toy");
  if (c.method == Method::direct)
    require(c.task == Task::iv, ErrorCode::config, "method direct is only defined for task iv");
  if (rl)
    require(c.method == Method::funcid || c.method == Method::mle, ErrorCode::config,
            "task rl_toy supports methods funcid and mle");
  if (c.task == Task::quad) {
    require(c.quad.opts.d_x <= c.quad.opts.d_z && c.quad.opts.d_t <= c.quad.opts.d_z, ErrorCode::config,
            "quad: d_x and d_t must not exceed d_z");
    require(c.quad.opts.n >= 1, ErrorCode::config, "quad.n must be >= 1");
  }
  if (c.task == Task::iv) require(c.iv.n >= 1 && c.iv.hidden >= 1, ErrorCode::config, "iv.n and iv.hidden must be >= 1");
  if (c.method == Method::funcid_linear)
    require(c.optim.adjoint_mode == AdjointMode::exact_linear, ErrorCode::config,
            "funcid_linear needs optim.adjoint_mode = exact_linear");
  if (rl) {
    require(c.rl.gamma >= 0.0 && c.rl.gamma < 1.0, ErrorCode::config, "rl.gamma must lie in [0, 1)");
    require(c.rl.tau > 0.0 && c.rl.tau <= 1.0, ErrorCode::config, "rl.tau must lie in (0, 1]");
    require(c.rl.buffer >= 1, ErrorCode::config, "rl.buffer must be >= 1");
    require(c.rl.n_states >= 2 && c.rl.n_actions >= 2, ErrorCode::config, "rl needs >= 2 states and actions");
  }
}

inline RunConfig config_from_key_values(const KeyValues& kv) {
  RunConfig c;
  for (const auto& [k, v] : kv)
    require(apply_key(c, k, v), ErrorCode::config, "unknown config key '" + k + "'");
  if (c.method == Method::funcid_linear && !kv.count("optim.adjoint_mode"))
    c.optim.adjoint_mode = AdjointMode::exact_linear;
  if (c.task == Task::quad) {
    require(!kv.count("optim.R_in") && !kv.count("optim.R_adj"), ErrorCode::config,
            "task quad takes its ridge from quad.ridge");
    c.optim.R_in = c.optim.R_adj = c.quad.opts.ridge;
  }
  c.echo = kv;
  validate(c);
  return c;
}

inline RunConfig load_config(const std::string& path) { return config_from_key_values(load_key_values(path)); }

// ---------------------------------------------------------------------------
// Sweep grids: `section.key = v1, v2, ...` per line; the Cartesian product of
// all lines is expanded in file order, the last line varying fastest.

struct GridAxis {
  std::string key;
  std::vector<std::string> values;
};

inline std::vector<GridAxis> parse_grid(std::istream& is, const std::string& source = "grid") {
  std::vector<GridAxis> axes;
  std::set<std::string> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = source + ":" + std::to_string(lineno);
    const auto eq = line.find('=');
    require(eq != std::string::npos, ErrorCode::config, where + ": expected section.key = v1, v2, ...");
    GridAxis ax{trim(line.substr(0, eq)), {}};
    require(ax.key.find('.') != std::string::npos, ErrorCode::config, where + ": grid keys are section.key");
    require(seen.insert(ax.key).second, ErrorCode::config, where + ": duplicate grid key '" + ax.key + "'");
    std::stringstream vs(line.substr(eq + 1));
    std::string item;
    while (std::getline(vs, item, ',')) {
      item = trim(item);
      require(!item.empty(), ErrorCode::config, where + ": empty grid value");
      ax.values.push_back(item);
    }
    require(!ax.values.empty(), ErrorCode::config, where + ": no grid values");
    axes.push_back(std::move(ax));
  }
  return axes;
}

inline std::vector<KeyValues> expand_grid(const KeyValues& base, const std::vector<GridAxis>& axes) {
  std::vector<KeyValues> out{base};
  for (const auto& ax : axes) {
    std::vector<KeyValues> next;
    for (const auto& kv : out)
      for (const auto& v : ax.values) {
        KeyValues k2 = kv;
        k2[ax.key] = v;
        next.push_back(std::move(k2));
      }
    out = std::move(next);
  }
  return out;
}

}  // namespace funcbo::harness
