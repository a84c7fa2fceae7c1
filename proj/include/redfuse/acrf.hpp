// Decomposability analysis and derivation of fused / incremental update
// programs: fixed-point probing of the exchange identity, G/H extraction,
// invertibility repair, correction-term synthesis.

#ifndef REDFUSE_ACRF_HPP
#define REDFUSE_ACRF_HPP

#include <cstdint>
#include <optional>
#include <vector>

#include "redfuse/cascade.hpp"
#include "redfuse/probe.hpp"

namespace redfuse {

struct NoValidFixedPoint : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DecompositionVerificationFailed : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NotFusable : std::runtime_error {
  NotFusable(int id, const std::string& why)
      : std::runtime_error("reduction " + std::to_string(id) +
                           " is not fusable: " + why),
        id(id),
        why(why) {}
  int id;
  std::string why;  // "decomposability" or "fixed-point"
};

// The scale/combine operator paired with each reduce operator. Prod maps to
// mul via the log transform (see transform_prod); max/min/topk pair with add.
MonoidOp lookup_combine_op(ReduceOp op);

// Rewrites a product reduction into a summation of log2-magnitudes. The sign
// channel (product of signs in {-1,0,+1}) is tracked by the executor, which
// reconstructs sign * 2^sum whenever the value is observed.
ReductionSpec transform_prod(const ReductionSpec& r);

// One decomposed reduction. H is the raw extracted dependency factor; its
// guarded variant H' (identity where H is not invertible) is applied at
// evaluation time through eval_H_prime.
struct Decomposition {
  int id = 0;
  MonoidOp combine = MonoidOp::Mul;
  Expr G;     // input factor, no DepVars
  Expr H;     // dependency factor, no InputVars
  Expr corr;  // simplify(H (x) inv(H_prev)); null when H is the identity
  bool h_identity = false;
  Env fixed_point;            // x0 and d0 bindings actually used
  std::uint64_t fp_seed = 0;  // sampler seed that produced them
  bool prod_transformed = false;
};

// Binds x0 (inputs, free indices) and d0 (deps) such that F evaluates
// cleanly and is invertible under the combine op. Rejection-samples from the
// probe domain; throws NoValidFixedPoint after cfg-bounded retries.
Env select_fixed_point(const Expr& F, MonoidOp combine, std::uint64_t seed,
                       const ProbeConfig& probe, int max_resamples = 16);

// The exchange identity: F(x,d) (x) F(x0,d0) == F(x,d0) (x) F(x0,d).
bool check_decomposable(const Expr& F, MonoidOp combine, const Env& fp,
                        const ProbeConfig& probe);

// Splits F into (G, H) at the given fixed point and probe-verifies
// F == G (x) H before returning. Dependency-free bodies get H = e.
std::pair<Expr, Expr> extract_G_H(const Expr& F, const Env& fp,
                                  MonoidOp combine, const ProbeConfig& probe);

// a (x) b as an expression.
Expr combine_expr(MonoidOp op, const Expr& a, const Expr& b);

// Guarded evaluation per the reversibility repair: H'(d) = H(d) when
// invertible under the combine op, else the identity element.
double eval_H_prime(const Decomposition& d, const Env& env);
// inverse of H'(d); never throws NotInvertible by construction.
double eval_H_prime_inverse(const Decomposition& d, const Env& env);

struct FusedProgram {
  CascadeSpec spec;       // as given
  CascadeSpec exec_spec;  // prod reductions rewritten to log-sums
  std::vector<Decomposition> decomps;  // by reduction, id order

  const Decomposition& decomp(int id) const;  // 1-based
};

// Runs the full pipeline over every reduction. Throws NotFusable naming the
// first reduction whose fixed-point selection or decomposability check fails.
FusedProgram derive_fused(const CascadeSpec& spec,
                          const ProbeConfig& probe = ProbeConfig{});

}  // namespace redfuse

#endif  // REDFUSE_ACRF_HPP
