#include "redfuse/acrf.hpp"

#include <cctype>
#include <cmath>

#include "redfuse/simplify.hpp"

namespace redfuse {

MonoidOp lookup_combine_op(ReduceOp op) {
  switch (op) {
    case ReduceOp::Max:
    case ReduceOp::Min:
    case ReduceOp::TopK:
      return MonoidOp::Add;
    case ReduceOp::Sum:
      return MonoidOp::Mul;
    case ReduceOp::Prod:
      return MonoidOp::Mul;  // log transform turns the reduce into a sum
  }
  throw std::logic_error("bad reduce op");
}

ReductionSpec transform_prod(const ReductionSpec& r) {
  if (r.op != ReduceOp::Prod)
    throw std::logic_error("transform_prod requires a prod reduction");
  ReductionSpec out = r;
  out.op = ReduceOp::Sum;
  out.body = un(UnOp::Log2, abs_of(r.body));
  return out;
}

Expr combine_expr(MonoidOp op, const Expr& a, const Expr& b) {
  switch (op) {
    case MonoidOp::Add:
      return a + b;
    case MonoidOp::Mul:
      return a * b;
    case MonoidOp::Max:
      return bin(BinOp::Max, a, b);
    case MonoidOp::Min:
      return bin(BinOp::Min, a, b);
  }
  throw std::logic_error("bad monoid op");
}

namespace {

// Splits a fixed-point binding into its d0 (deps) and x0 (everything else)
// halves; dep keys are "d<i>".
bool is_dep_key(const std::string& k) {
  if (k.size() < 2 || k[0] != 'd') return false;
  for (std::size_t i = 1; i < k.size(); ++i)
    if (!std::isdigit(static_cast<unsigned char>(k[i]))) return false;
  return true;
}

Env dep_part(const Env& fp) {
  Env out;
  for (const auto& [k, v] : fp)
    if (is_dep_key(k)) out[k] = v;
  return out;
}

Env input_part(const Env& fp) {
  Env out;
  for (const auto& [k, v] : fp)
    if (!is_dep_key(k)) out[k] = v;
  return out;
}

Expr inverse_expr(MonoidOp op, const Expr& e) {
  if (op == MonoidOp::Add) return neg(e);
  if (op == MonoidOp::Mul) return recip(e);
  throw std::logic_error("no inverse expression under max/min");
}

}  // namespace

Env select_fixed_point(const Expr& F, MonoidOp combine, std::uint64_t seed,
                       const ProbeConfig& probe, int max_resamples) {
  auto vars = free_vars(F);
  std::mt19937_64 rng(seed);
  for (int attempt = 0; attempt < max_resamples; ++attempt) {
    Env env = sample_env(vars, rng, probe);
    double v;
    try {
      v = evaluate(F, env);
    } catch (const DomainError&) {
      continue;
    }
    if (std::isnan(v) || std::isinf(v)) continue;
    // Under mul, reject points where F is zero or small enough to make the
    // extracted constants explode.
    if (combine == MonoidOp::Mul && std::fabs(v) < probe.denom_min) continue;
    return env;
  }
  throw NoValidFixedPoint("no valid fixed point after " +
                          std::to_string(max_resamples) + " resamples");
}

bool check_decomposable(const Expr& F, MonoidOp combine, const Env& fp,
                        const ProbeConfig& probe) {
  Expr f_x0_d0 = substitute(F, fp);
  Expr f_x_d0 = substitute(F, dep_part(fp));
  Expr f_x0_d = substitute(F, input_part(fp));
  Expr lhs = combine_expr(combine, F, f_x0_d0);
  Expr rhs = combine_expr(combine, f_x_d0, f_x0_d);
  return numeric_equiv(lhs, rhs, probe);
}

std::pair<Expr, Expr> extract_G_H(const Expr& F, const Env& fp,
                                  MonoidOp combine, const ProbeConfig& probe) {
  if (!contains_dep(F))
    return {simplify(F), cst(identity_of(combine))};
  Expr G = simplify(substitute(F, dep_part(fp)));
  Expr f_x0_d = substitute(F, input_part(fp));
  Expr f_x0_d0 = substitute(F, fp);
  Expr H = simplify(
      combine_expr(combine, f_x0_d, inverse_expr(combine, f_x0_d0)));
  if (contains_dep(G))
    throw DecompositionVerificationFailed("G still references a dependency");
  if (contains_input(H))
    throw DecompositionVerificationFailed("H still references an input");
  if (!numeric_equiv(F, combine_expr(combine, G, H), probe))
    throw DecompositionVerificationFailed(
        "G (x) H does not reproduce F under probing");
  return {G, H};
}

double eval_H_prime(const Decomposition& d, const Env& env) {
  double v = evaluate(d.H, env);
  return is_invertible(d.combine, v) ? v : identity_of(d.combine);
}

double eval_H_prime_inverse(const Decomposition& d, const Env& env) {
  double v = evaluate(d.H, env);
  if (!is_invertible(d.combine, v)) return identity_of(d.combine);
  return inverse_under(d.combine, v);
}

const Decomposition& FusedProgram::decomp(int id) const {
  for (const auto& d : decomps)
    if (d.id == id) return d;
  throw std::out_of_range("no decomposition for id " + std::to_string(id));
}

FusedProgram derive_fused(const CascadeSpec& spec, const ProbeConfig& probe) {
  FusedProgram out;
  out.spec = spec;
  out.exec_spec = spec;
  for (auto& r : out.exec_spec.reductions)
    if (r.op == ReduceOp::Prod) r = transform_prod(r);

  for (const auto& r : out.exec_spec.reductions) {
    Decomposition d;
    d.id = r.id;
    d.combine = lookup_combine_op(r.op);
    d.prod_transformed =
        spec.reduction(r.id).op == ReduceOp::Prod;

    if (!contains_dep(r.body) || r.op == ReduceOp::TopK) {
      // Dependency-free (and TopK, which validate() keeps dependency-free):
      // G is the body, H degenerates to the identity, no correction.
      d.G = simplify(r.body);
      d.H = cst(identity_of(d.combine));
      d.h_identity = true;
      out.decomps.push_back(d);
      continue;
    }

    d.fp_seed = probe.seed ^ (0x9e3779b97f4a7c15ULL * std::uint64_t(r.id));
    try {
      d.fixed_point = select_fixed_point(r.body, d.combine, d.fp_seed, probe);
    } catch (const NoValidFixedPoint&) {
      throw NotFusable(r.id, "fixed-point");
    }
    if (!check_decomposable(r.body, d.combine, d.fixed_point, probe))
      throw NotFusable(r.id, "decomposability");
    auto [g, h] = extract_G_H(r.body, d.fixed_point, d.combine, probe);
    d.G = g;
    d.H = h;
    d.h_identity = expr_equal(d.H, cst(identity_of(d.combine)));
    if (!d.h_identity)
      d.corr = simplify(combine_expr(
          d.combine, d.H, inverse_expr(d.combine, mark_deps_prev(d.H))));
    out.decomps.push_back(d);
  }
  return out;
}

}  // namespace redfuse
