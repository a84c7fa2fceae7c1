// Numeric-equivalence probing: identity checking over R by sampling.
// This is the project's stand-in for symbolic proof; every derived
// decomposition is accepted or rejected through it.

#ifndef REDFUSE_PROBE_HPP
#define REDFUSE_PROBE_HPP

#include <cstdint>
#include <random>

#include "redfuse/expr.hpp"

namespace redfuse {

struct InsufficientSamples : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ProbeConfig {
  int samples = 32;
  double lo = -2.0;
  double hi = 2.0;
  double rel_tol = 1e-9;
  // Total draw attempts allowed before giving up on a valid sample set.
  int max_attempts_factor = 64;
  // |v| floor applied when a sampled value must stay invertible under *.
  double denom_min = 1e-3;
  std::uint64_t seed = 0x5eedf00d;
};

inline bool close_rel(double a, double b, double tol) {
  double scale = 1.0 + std::fmax(std::fabs(a), std::fabs(b));
  return std::fabs(a - b) <= tol * scale;
}

// True iff lhs and rhs agree at every valid sampled point. Points where
// either side raises a DomainError are discarded and resampled; throws
// InsufficientSamples when the retry budget runs out first.
bool numeric_equiv(const Expr& lhs, const Expr& rhs, const ProbeConfig& probe);

// Draws one binding of all given variable keys from the probe domain.
Env sample_env(const std::set<std::string>& vars, std::mt19937_64& rng,
               const ProbeConfig& probe);

}  // namespace redfuse

#endif  // REDFUSE_PROBE_HPP
