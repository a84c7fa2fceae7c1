#include "redfuse/probe.hpp"

#include <cmath>

namespace redfuse {

Env sample_env(const std::set<std::string>& vars, std::mt19937_64& rng,
               const ProbeConfig& probe) {
  std::uniform_real_distribution<double> dist(probe.lo, probe.hi);
  Env env;
  for (const auto& v : vars) env[v] = dist(rng);
  return env;
}

bool numeric_equiv(const Expr& lhs, const Expr& rhs,
                   const ProbeConfig& probe) {
  auto vars = free_vars(lhs);
  for (const auto& v : free_vars(rhs)) vars.insert(v);

  std::mt19937_64 rng(probe.seed);
  int valid = 0;
  int attempts = 0;
  const int max_attempts = probe.samples * probe.max_attempts_factor;
  while (valid < probe.samples) {
    if (++attempts > max_attempts)
      throw InsufficientSamples(
          "probing exhausted retries before collecting " +
          std::to_string(probe.samples) + " valid points");
    Env env = sample_env(vars, rng, probe);
    double l, r;
    try {
      l = evaluate(lhs, env);
      r = evaluate(rhs, env);
    } catch (const DomainError&) {
      continue;
    }
    if (std::isnan(l) || std::isnan(r)) continue;
    ++valid;
    if (!close_rel(l, r, probe.rel_tol)) return false;
  }
  return true;
}

}  // namespace redfuse
