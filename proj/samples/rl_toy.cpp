// Model learning on a random 8-state MDP: FuncID (closed-form adjoint) and
// maximum likelihood, each followed by the greedy policy of the learned Q.

#include <cstdio>

#include "funcbo/harness/runner.hpp"

using namespace funcbo;
using namespace funcbo::harness;

int main() {
  for (const char* method : {"funcid", "mle"}) {
    for (const char* model : {"tabular", "low_rank"}) {
      KeyValues kv{{"run.task", "rl_toy"},   {"run.method", method},   {"run.seed", "0"},
                   {"rl.model", model},      {"rl.buffer", "5000"},    {"optim.N", "2000"},
                   {"optim.M", "1"},         {"optim.eta_in", "0.5"},  {"optim.eta_out", "1e-3"},
                   {"optim.opt_out", "adam"}, {"optim.batch_in", "256"}};
      if (std::string(method) == "funcid") {
        kv["optim.same_batch"] = "true";
        kv["optim.adjoint_mode"] = "closed_form_rl";
      }
      try {
        const RunOutput out = execute_run(config_from_key_values(kv), RunOptions{});
        std::printf("%-7s %-9s policy agreement %.3f, Q sup error %.3g\n", method, model,
                    out.summary.metrics.at("policy_agreement"), out.summary.metrics.at("q_sup_error"));
      } catch (const Error& e) {
        std::fprintf(stderr, "%s/%s: %s\n", method, model, e.what());
        return 1;
      }
    }
  }
  return 0;
}
