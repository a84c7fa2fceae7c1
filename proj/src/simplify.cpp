#include "redfuse/simplify.hpp"

#include <cmath>
#include <limits>
#include <utility>
#include <vector>

namespace redfuse {
namespace {

bool is_const(const Expr& e) { return e->kind == ExprKind::Constant; }
bool is_const_val(const Expr& e, double v) {
  return is_const(e) && e->value == v;
}

// Fold an all-constant node, unless evaluation faults or yields NaN
// (keep the structure so the fault survives to runtime).
bool try_fold(const Expr& e, Expr& out) {
  try {
    double v = evaluate(e, {});
    if (std::isnan(v)) return false;
    out = cst(v);
    return true;
  } catch (const EvalError&) {
    return false;
  }
}

// ---- additive normalization ------------------------------------------------
//
// Flattens +/-/neg chains into constant + signed term list, merging
// structurally equal terms. Constants cancel by summation; the fixed-point
// sampler only emits dyadic rationals so compensating constants cancel
// exactly here.

struct LinState {
  double c = 0.0;
  std::vector<std::pair<Expr, double>> terms;  // first-appearance order
};

void lin_add_term(LinState& st, const Expr& t, double coef) {
  for (auto& [base, acc] : st.terms) {
    if (expr_equal(base, t)) {
      acc += coef;
      return;
    }
  }
  st.terms.emplace_back(t, coef);
}

void lin_collect(const Expr& e, double s, LinState& st) {
  switch (e->kind) {
    case ExprKind::Constant:
      st.c += s * e->value;
      return;
    case ExprKind::Unary:
      if (e->uop == UnOp::Neg) {
        lin_collect(e->a, -s, st);
        return;
      }
      break;
    case ExprKind::Binary:
      if (e->bop == BinOp::Add) {
        lin_collect(e->a, s, st);
        lin_collect(e->b, s, st);
        return;
      }
      if (e->bop == BinOp::Sub) {
        lin_collect(e->a, s, st);
        lin_collect(e->b, -s, st);
        return;
      }
      if (e->bop == BinOp::Mul) {
        // Pull numeric coefficients so 2x + 3x merges.
        if (is_const(e->a)) {
          lin_collect(e->b, s * e->a->value, st);
          return;
        }
        if (is_const(e->b)) {
          lin_collect(e->a, s * e->b->value, st);
          return;
        }
      }
      break;
    default:
      break;
  }
  lin_add_term(st, e, s);
}

Expr lin_rebuild(const LinState& in) {
  LinState st = in;
  std::vector<std::pair<Expr, bool>> pieces;  // (magnitude expr, positive?)
  for (const auto& [base, coef] : st.terms) {
    if (coef == 0.0) continue;
    double mag = std::fabs(coef);
    Expr p = mag == 1.0 ? base : bin(BinOp::Mul, cst(mag), base);
    pieces.emplace_back(p, coef > 0.0);
  }
  if (pieces.empty()) return cst(st.c);
  // Lead with something positive when the first surviving term is negated:
  // a positive constant if there is one, else the first positive term, so
  // cancellations like (a - b) + (c - a) come out as "c - b".
  if (!pieces.front().second) {
    if (st.c > 0.0) {
      pieces.insert(pieces.begin(), {cst(st.c), true});
      st.c = 0.0;
    } else {
      for (std::size_t i = 1; i < pieces.size(); ++i) {
        if (pieces[i].second) {
          auto p = pieces[i];
          pieces.erase(pieces.begin() + static_cast<std::ptrdiff_t>(i));
          pieces.insert(pieces.begin(), p);
          break;
        }
      }
    }
  }
  if (st.c != 0.0) pieces.emplace_back(cst(std::fabs(st.c)), st.c > 0.0);
  Expr out;
  for (const auto& [p, pos] : pieces) {
    if (!out)
      out = pos ? p : neg(p);
    else
      out = bin(pos ? BinOp::Add : BinOp::Sub, out, p);
  }
  return out;
}

Expr lin_normalize(const Expr& e) {
  LinState st;
  lin_collect(e, 1.0, st);
  return lin_rebuild(st);
}

// ---- multiplicative normalization ------------------------------------------
//
// Flattens * / / / recip chains into coefficient x factor^exp list. Constant
// factors keep their own slots keyed by value so that a compensating pair
// like t0 and 1/t0 cancels exactly instead of through two roundings. All
// exp() factors merge into one whose argument is additively normalized;
// that is what collapses H(cur) (x) H(prev)^-1 to exp(m_prev - m) forms.

struct Fac {
  Expr base;  // null marks the merged-exp slot
  int exp = 0;
  bool konst = false;
};

struct ProdState {
  double sign = 1.0;
  std::vector<Fac> facs;
  LinState exp_arg;
  bool has_exp = false;
};

void prod_add(ProdState& st, const Expr& base, int s, bool konst) {
  for (auto& f : st.facs) {
    if (!f.base) continue;
    if (konst != f.konst) continue;
    if (konst ? f.base->value == base->value : expr_equal(f.base, base)) {
      f.exp += s;
      return;
    }
  }
  st.facs.push_back({base, s, konst});
}

void prod_collect(const Expr& e, int s, ProdState& st) {
  switch (e->kind) {
    case ExprKind::Constant:
      if (e->value == 1.0) return;
      if (e->value == -1.0) {
        st.sign = -st.sign;
        return;
      }
      prod_add(st, e, s, true);
      return;
    case ExprKind::Unary:
      if (e->uop == UnOp::Neg) {
        st.sign = -st.sign;
        prod_collect(e->a, s, st);
        return;
      }
      if (e->uop == UnOp::Recip) {
        prod_collect(e->a, -s, st);
        return;
      }
      if (e->uop == UnOp::Exp) {
        if (!st.has_exp) {
          st.has_exp = true;
          st.facs.push_back({nullptr, 0, false});
        }
        lin_collect(e->a, static_cast<double>(s), st.exp_arg);
        return;
      }
      break;
    case ExprKind::Binary:
      if (e->bop == BinOp::Mul) {
        prod_collect(e->a, s, st);
        prod_collect(e->b, s, st);
        return;
      }
      if (e->bop == BinOp::Div) {
        prod_collect(e->a, s, st);
        prod_collect(e->b, -s, st);
        return;
      }
      break;
    default:
      break;
  }
  prod_add(st, e, s, false);
}

Expr prod_rebuild(ProdState& st) {
  double coef = st.sign;
  std::vector<Expr> num, den;
  Expr exp_factor;
  if (st.has_exp) {
    Expr arg = lin_rebuild(st.exp_arg);
    if (is_const(arg))
      coef *= std::exp(arg->value);  // exp(0) -> exactly 1
    else
      exp_factor = un(UnOp::Exp, arg);
  }
  bool zero = false;
  for (const auto& f : st.facs) {
    if (!f.base) {
      if (exp_factor) num.push_back(exp_factor);
      continue;
    }
    if (f.exp == 0) continue;
    if (f.konst) {
      double v = f.base->value;
      if (f.exp > 0) {
        if (v == 0.0) zero = true;
        for (int i = 0; i < f.exp; ++i) coef *= v;
      } else if (v != 0.0) {
        // Fold a divisor only when the division round-trips; otherwise keep
        // the original constant so a compensating factor elsewhere can still
        // cancel it by value instead of through two roundings.
        for (int i = 0; i < -f.exp; ++i) {
          double q = coef / v;
          if (q * v == coef)
            coef = q;
          else
            den.push_back(f.base);
        }
      } else {
        den.push_back(f.base);  // keep 1/0 so the fault survives
      }
      continue;
    }
    auto& side = f.exp > 0 ? num : den;
    for (int i = 0; i < std::abs(f.exp); ++i) side.push_back(f.base);
  }
  if (zero && den.empty()) return cst(0.0);
  bool negwrap = false;
  if (coef == -1.0 && !num.empty()) {
    negwrap = true;
  } else if (coef != 1.0 || num.empty()) {
    num.insert(num.begin(), cst(coef));
  }
  Expr out;
  for (const auto& p : num) out = out ? bin(BinOp::Mul, out, p) : p;
  for (const auto& p : den) out = bin(BinOp::Div, out, p);
  if (negwrap) out = neg(out);
  return out;
}

Expr prod_normalize(const Expr& e) {
  ProdState st;
  prod_collect(e, 1, st);
  return prod_rebuild(st);
}

bool additive_kind(const Expr& e) {
  if (e->kind == ExprKind::Unary) return e->uop == UnOp::Neg;
  if (e->kind == ExprKind::Binary)
    return e->bop == BinOp::Add || e->bop == BinOp::Sub;
  return false;
}

bool multiplicative_kind(const Expr& e) {
  if (e->kind == ExprKind::Unary)
    return e->uop == UnOp::Recip || e->uop == UnOp::Neg;
  if (e->kind == ExprKind::Binary)
    return e->bop == BinOp::Mul || e->bop == BinOp::Div;
  return false;
}

Expr simp(const Expr& e) {
  switch (e->kind) {
    case ExprKind::Constant:
    case ExprKind::Input:
    case ExprKind::Dep:
    case ExprKind::FreeIndex:
      return e;
    case ExprKind::Unary: {
      Expr a = simp(e->a);
      Expr node = a == e->a ? e : un(e->uop, a);
      Expr folded;
      if (is_const(a) && try_fold(node, folded)) return folded;
      switch (e->uop) {
        case UnOp::Neg:
          if (a->kind == ExprKind::Unary && a->uop == UnOp::Neg) return a->a;
          if (additive_kind(a) || multiplicative_kind(node))
            return lin_normalize(node);
          break;
        case UnOp::Recip:
          if (a->kind == ExprKind::Unary && a->uop == UnOp::Recip) return a->a;
          if (multiplicative_kind(a) || a->kind == ExprKind::Unary)
            return prod_normalize(node);
          break;
        case UnOp::Abs:
          if (a->kind == ExprKind::Unary &&
              (a->uop == UnOp::Abs || a->uop == UnOp::Neg))
            return un(UnOp::Abs, a->uop == UnOp::Neg ? a->a : a);
          break;
        default:
          break;
      }
      return node;
    }
    case ExprKind::Binary: {
      Expr a = simp(e->a);
      Expr b = simp(e->b);
      Expr node = (a == e->a && b == e->b) ? e : bin(e->bop, a, b);
      Expr folded;
      if (is_const(a) && is_const(b) && try_fold(node, folded)) return folded;
      switch (e->bop) {
        case BinOp::Add:
        case BinOp::Sub:
          return lin_normalize(node);
        case BinOp::Mul:
        case BinOp::Div:
          return prod_normalize(node);
        case BinOp::Max: {
          double lo = -std::numeric_limits<double>::infinity();
          if (is_const_val(a, lo)) return b;
          if (is_const_val(b, lo)) return a;
          if (expr_equal(a, b)) return a;
          return node;
        }
        case BinOp::Min: {
          double hi = std::numeric_limits<double>::infinity();
          if (is_const_val(a, hi)) return b;
          if (is_const_val(b, hi)) return a;
          if (expr_equal(a, b)) return a;
          return node;
        }
        case BinOp::Pow:
          if (is_const_val(b, 1.0)) return a;
          return node;
      }
      return node;
    }
  }
  return e;
}

}  // namespace

Expr simplify(const Expr& e) {
  Expr cur = e;
  for (int pass = 0; pass < 8; ++pass) {
    Expr next = simp(cur);
    if (expr_equal(next, cur)) break;
    cur = next;
  }
  return cur;
}

}  // namespace redfuse
