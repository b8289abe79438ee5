#pragma once

// Persistence for runs: per-iteration CSV, JSON summaries (written atomically)
// and the per-method comparison table.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "funcbo/funcbo.hpp"
#include "funcbo/oracle.hpp"

#ifndef FUNCBO_BUILD_ID
#define FUNCBO_BUILD_ID "unknown"
#endif

namespace funcbo::harness {

using json = nlohmann::json;
namespace fs = std::filesystem;

inline constexpr const char* kRecordsHeader =
    "iter,outer_loss,inner_loss,adjoint_loss,grad_norm,grad_bias,hvp_dim,inner_steps,adjoint_steps,wall_ms,eval_metric";

inline const char* build_id() { return FUNCBO_BUILD_ID; }

inline std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string format_optional(const std::optional<double>& v) { return v ? format_real(*v) : std::string(); }

inline void write_records_csv(std::ostream& os, const std::vector<RunRecord>& records) {
  os << kRecordsHeader << '\n';
  for (const RunRecord& r : records) {
    os << r.iter << ',' << format_real(r.outer_loss) << ',' << format_real(r.inner_loss) << ','
       << format_optional(r.adjoint_loss) << ',' << format_real(r.grad_norm) << ',' << format_optional(r.grad_bias)
       << ',' << r.hvp_dim << ',' << r.inner_steps << ',' << r.adjoint_steps << ',' << format_optional(r.wall_ms)
       << ',' << format_optional(r.eval_metric) << '\n';
  }
}

/// Parses a records CSV back (used by tests and by tools reading run dirs).
inline std::vector<RunRecord> read_records_csv(std::istream& is) {
  std::string line;
  require(static_cast<bool>(std::getline(is, line)) && line == kRecordsHeader, ErrorCode::io,
          "records CSV: bad header");
  std::vector<RunRecord> out;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (!line.empty() && line.back() == ',') f.emplace_back();
    require(f.size() == 11, ErrorCode::io, "records CSV: expected 11 fields");
    auto opt = [](const std::string& s) -> std::optional<double> {
      if (s.empty()) return std::nullopt;
      return std::stod(s);
    };
    RunRecord r;
    r.iter = std::stoull(f[0]);
    r.outer_loss = std::stod(f[1]);
    r.inner_loss = std::stod(f[2]);
    r.adjoint_loss = opt(f[3]);
    r.grad_norm = std::stod(f[4]);
    r.grad_bias = opt(f[5]);
    r.hvp_dim = std::stoull(f[6]);
    r.inner_steps = std::stoull(f[7]);
    r.adjoint_steps = std::stoull(f[8]);
    r.wall_ms = opt(f[9]);
    r.eval_metric = opt(f[10]);
    out.push_back(r);
  }
  return out;
}

/// Writes through a sibling temp file and renames it into place, so readers
/// see either the old file, no file, or the complete new one.
inline void atomic_write(const fs::path& path, const std::string& content) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(static_cast<bool>(out), ErrorCode::io, "cannot write '" + tmp.string() + "'");
    out << content;
    out.flush();
    require(static_cast<bool>(out), ErrorCode::io, "write failed for '" + tmp.string() + "'");
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) {
    fs::remove(tmp);
    throw Error(ErrorCode::io, "cannot rename into '" + path.string() + "': " + ec.message());
  }
}

inline json to_json(const oracle::OracleReport& r) {
  return json{{"quantity", r.quantity}, {"algorithm", r.algorithm}, {"oracle", r.oracle},
              {"abs_error", r.abs_error}, {"rel_error", r.rel_error}, {"tolerance", r.tolerance},
              {"pass", r.pass}};
}

/// Final metric of a run: the number the comparison table aggregates.
struct FinalMetric {
  std::string name;
  double value = 0.0;
};

struct RunSummary {
  std::map<std::string, std::string> config;
  std::string task;
  std::string method;
  std::uint64_t seed = 0;
  FinalMetric final_metric;
  std::map<std::string, double> metrics;
  std::vector<oracle::OracleReport> oracle_checks;
  std::optional<double> wall_time_s;
  std::size_t n_records = 0;

  json to_json() const {
    json j;
    j["format"] = "FUNCBO-SUMMARY v1";
    j["build"] = build_id();
    j["config"] = config;
    j["task"] = task;
    j["method"] = method;
    j["seed"] = seed;
    j["final_metric"] = {{"name", final_metric.name}, {"value", final_metric.value}};
    j["metrics"] = metrics;
    json checks = json::array();
    for (const auto& r : oracle_checks) checks.push_back(harness::to_json(r));
    j["oracle_checks"] = checks;
    j["wall_time_s"] = wall_time_s ? json(*wall_time_s) : json(nullptr);
    j["n_records"] = n_records;
    return j;
  }
};

// ---------------------------------------------------------------------------
// Comparison table

/// Linear interpolation between order statistics: position q (n − 1).
inline double quantile_linear(std::vector<double> v, double q) {
  require(!v.empty(), ErrorCode::empty_input, "quantile of an empty sample");
  std::sort(v.begin(), v.end());
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

struct ComparisonRow {
  std::string method;
  std::string metric;
  double min = 0, q1 = 0, median = 0, q3 = 0, max = 0;
  std::size_t n_seeds = 0;
};

struct Comparison {
  std::vector<ComparisonRow> rows;
  std::vector<std::string> skipped;  // run dirs without a readable summary
};

inline Comparison emit_comparison(const std::vector<fs::path>& run_dirs) {
  std::map<std::pair<std::string, std::string>, std::vector<double>> groups;
  Comparison out;
  for (const auto& dir : run_dirs) {
    std::ifstream in(dir / "summary.json");
    if (!in) {
      out.skipped.push_back(dir.string());
      continue;
    }
    try {
      const json j = json::parse(in);
      const auto& fm = j.at("final_metric");
      groups[{j.at("method").get<std::string>(), fm.at("name").get<std::string>()}].push_back(
          fm.at("value").get<double>());
    } catch (const std::exception&) {
      out.skipped.push_back(dir.string());
    }
  }
  for (const auto& [key, vals] : groups) {
    ComparisonRow r;
    r.method = key.first;
    r.metric = key.second;
    r.min = quantile_linear(vals, 0.0);
    r.q1 = quantile_linear(vals, 0.25);
    r.median = quantile_linear(vals, 0.5);
    r.q3 = quantile_linear(vals, 0.75);
    r.max = quantile_linear(vals, 1.0);
    r.n_seeds = vals.size();
    out.rows.push_back(r);
  }
  return out;
}

inline void write_comparison_csv(std::ostream& os, const Comparison& c) {
  os << "method,metric,min,q1,median,q3,max,n_seeds\n";
  for (const auto& r : c.rows)
    os << r.method << ',' << r.metric << ',' << format_real(r.min) << ',' << format_real(r.q1) << ','
       << format_real(r.median) << ',' << format_real(r.q3) << ',' << format_real(r.max) << ',' << r.n_seeds << '\n';
}

}  // namespace funcbo::harness
