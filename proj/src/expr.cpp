#include "redfuse/expr.hpp"

#include <cmath>
#include <functional>
#include <sstream>

namespace redfuse {

Expr cst(double v) {
  auto n = std::make_shared<ExprNode>();
  n->kind = ExprKind::Constant;
  n->value = v;
  return n;
}

Expr input_var(const std::string& name, bool has_free) {
  auto n = std::make_shared<ExprNode>();
  n->kind = ExprKind::Input;
  n->name = name;
  n->has_free = has_free;
  return n;
}

Expr dep_var(int id, bool prev) {
  auto n = std::make_shared<ExprNode>();
  n->kind = ExprKind::Dep;
  n->dep = id;
  n->dep_prev = prev;
  return n;
}

Expr free_index(const std::string& axis) {
  auto n = std::make_shared<ExprNode>();
  n->kind = ExprKind::FreeIndex;
  n->name = axis;
  return n;
}

Expr un(UnOp op, Expr a) {
  auto n = std::make_shared<ExprNode>();
  n->kind = ExprKind::Unary;
  n->uop = op;
  n->a = std::move(a);
  return n;
}

Expr bin(BinOp op, Expr a, Expr b) {
  auto n = std::make_shared<ExprNode>();
  n->kind = ExprKind::Binary;
  n->bop = op;
  n->a = std::move(a);
  n->b = std::move(b);
  return n;
}

std::string var_key(const ExprNode& n) {
  switch (n.kind) {
    case ExprKind::Input:
    case ExprKind::FreeIndex:
      return n.name;
    case ExprKind::Dep:
      return "d" + std::to_string(n.dep) + (n.dep_prev ? "'" : "");
    default:
      throw std::logic_error("var_key on non-variable node");
  }
}

double eval_un(UnOp op, double v) {
  switch (op) {
    case UnOp::Neg:
      return -v;
    case UnOp::Exp:
      return std::exp(v);
    case UnOp::Log2:
      if (v < 0.0) throw DomainError("log2 of negative value");
      return std::log2(v);  // log2(0) = -inf, used by the prod transform
    case UnOp::Ln:
      if (v <= 0.0) throw DomainError("ln of non-positive value");
      return std::log(v);
    case UnOp::Abs:
      return std::fabs(v);
    case UnOp::Sqrt:
      if (v < 0.0) throw DomainError("sqrt of negative value");
      return std::sqrt(v);
    case UnOp::Sign:
      return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
    case UnOp::Recip:
      if (v == 0.0) throw DomainError("reciprocal of zero");
      return 1.0 / v;
  }
  throw std::logic_error("bad unary op");
}

double eval_bin(BinOp op, double l, double r) {
  switch (op) {
    case BinOp::Add:
      return l + r;
    case BinOp::Sub:
      return l - r;
    case BinOp::Mul:
      return l * r;
    case BinOp::Div:
      if (r == 0.0) throw DomainError("division by zero");
      return l / r;
    case BinOp::Max:
      return std::fmax(l, r);
    case BinOp::Min:
      return std::fmin(l, r);
    case BinOp::Pow: {
      double v = std::pow(l, r);
      if (std::isnan(v)) throw DomainError("pow outside real domain");
      return v;
    }
  }
  throw std::logic_error("bad binary op");
}

double evaluate(const Expr& e, const Env& env) {
  switch (e->kind) {
    case ExprKind::Constant:
      return e->value;
    case ExprKind::Input:
    case ExprKind::Dep:
    case ExprKind::FreeIndex: {
      auto key = var_key(*e);
      auto it = env.find(key);
      if (it == env.end()) throw UnboundVariable(key);
      return it->second;
    }
    case ExprKind::Unary:
      return eval_un(e->uop, evaluate(e->a, env));
    case ExprKind::Binary:
      return eval_bin(e->bop, evaluate(e->a, env), evaluate(e->b, env));
  }
  throw std::logic_error("bad expr kind");
}

bool expr_equal(const Expr& a, const Expr& b) {
  if (a == b) return true;
  if (a->kind != b->kind) return false;
  switch (a->kind) {
    case ExprKind::Constant:
      return a->value == b->value;
    case ExprKind::Input:
      return a->name == b->name && a->has_free == b->has_free;
    case ExprKind::Dep:
      return a->dep == b->dep && a->dep_prev == b->dep_prev;
    case ExprKind::FreeIndex:
      return a->name == b->name;
    case ExprKind::Unary:
      return a->uop == b->uop && expr_equal(a->a, b->a);
    case ExprKind::Binary:
      return a->bop == b->bop && expr_equal(a->a, b->a) &&
             expr_equal(a->b, b->b);
  }
  return false;
}

static void walk(const Expr& e, const std::function<void(const ExprNode&)>& f) {
  f(*e);
  if (e->a) walk(e->a, f);
  if (e->b) walk(e->b, f);
}

std::set<std::string> free_vars(const Expr& e) {
  std::set<std::string> out;
  walk(e, [&](const ExprNode& n) {
    if (n.kind == ExprKind::Input || n.kind == ExprKind::Dep ||
        n.kind == ExprKind::FreeIndex)
      out.insert(var_key(n));
  });
  return out;
}

std::set<int> dep_ids(const Expr& e) {
  std::set<int> out;
  walk(e, [&](const ExprNode& n) {
    if (n.kind == ExprKind::Dep) out.insert(n.dep);
  });
  return out;
}

bool contains_input(const Expr& e) {
  bool found = false;
  walk(e, [&](const ExprNode& n) {
    if (n.kind == ExprKind::Input) found = true;
  });
  return found;
}

bool contains_dep(const Expr& e) {
  bool found = false;
  walk(e, [&](const ExprNode& n) {
    if (n.kind == ExprKind::Dep) found = true;
  });
  return found;
}

Expr substitute(const Expr& e, const Env& bindings) {
  switch (e->kind) {
    case ExprKind::Constant:
      return e;
    case ExprKind::Input:
    case ExprKind::Dep:
    case ExprKind::FreeIndex: {
      auto it = bindings.find(var_key(*e));
      return it == bindings.end() ? e : cst(it->second);
    }
    case ExprKind::Unary:
      return un(e->uop, substitute(e->a, bindings));
    case ExprKind::Binary:
      return bin(e->bop, substitute(e->a, bindings),
                 substitute(e->b, bindings));
  }
  throw std::logic_error("bad expr kind");
}

Expr mark_deps_prev(const Expr& e) {
  switch (e->kind) {
    case ExprKind::Dep:
      return dep_var(e->dep, true);
    case ExprKind::Unary:
      return un(e->uop, mark_deps_prev(e->a));
    case ExprKind::Binary:
      return bin(e->bop, mark_deps_prev(e->a), mark_deps_prev(e->b));
    default:
      return e;
  }
}

const char* un_op_name(UnOp op) {
  switch (op) {
    case UnOp::Neg:
      return "neg";
    case UnOp::Exp:
      return "exp";
    case UnOp::Log2:
      return "log2";
    case UnOp::Ln:
      return "ln";
    case UnOp::Abs:
      return "abs";
    case UnOp::Sqrt:
      return "sqrt";
    case UnOp::Sign:
      return "sign";
    case UnOp::Recip:
      return "recip";
  }
  return "?";
}

const char* bin_op_name(BinOp op) {
  switch (op) {
    case BinOp::Add:
      return "+";
    case BinOp::Sub:
      return "-";
    case BinOp::Mul:
      return "*";
    case BinOp::Div:
      return "/";
    case BinOp::Max:
      return "max";
    case BinOp::Min:
      return "min";
    case BinOp::Pow:
      return "pow";
  }
  return "?";
}

std::string format_number(double v) {
  if (v == (long long)v && std::fabs(v) < 1e15) {
    long long i = (long long)v;
    return std::to_string(i);
  }
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

// Precedence: add/sub 1, mul/div 2, prefix neg 3, atoms high.
static int precedence(const Expr& e) {
  if (e->kind == ExprKind::Binary) {
    switch (e->bop) {
      case BinOp::Add:
      case BinOp::Sub:
        return 1;
      case BinOp::Mul:
      case BinOp::Div:
        return 2;
      default:
        return 9;  // rendered as function calls
    }
  }
  if (e->kind == ExprKind::Unary && e->uop == UnOp::Neg) return 3;
  if (e->kind == ExprKind::Constant && e->value < 0) return 3;
  return 9;
}

static void render_to(const Expr& e, std::ostream& os, int parent_prec,
                      bool rhs) {
  int prec = precedence(e);
  bool parens =
      prec < parent_prec || (rhs && prec == parent_prec && prec <= 2);
  if (parens) os << "(";
  switch (e->kind) {
    case ExprKind::Constant:
      os << format_number(e->value);
      break;
    case ExprKind::Input:
      os << e->name << (e->has_free ? "[l, f]" : "[l]");
      break;
    case ExprKind::Dep:
      os << "d" << e->dep << (e->dep_prev ? "_prev" : "");
      break;
    case ExprKind::FreeIndex:
      os << e->name;
      break;
    case ExprKind::Unary:
      if (e->uop == UnOp::Neg) {
        os << "-";
        render_to(e->a, os, 3, true);
      } else if (e->uop == UnOp::Recip) {
        os << "1 / ";
        render_to(e->a, os, 2, true);
      } else {
        os << un_op_name(e->uop) << "(";
        render_to(e->a, os, 0, false);
        os << ")";
      }
      break;
    case ExprKind::Binary:
      if (e->bop == BinOp::Max || e->bop == BinOp::Min ||
          e->bop == BinOp::Pow) {
        os << bin_op_name(e->bop) << "(";
        render_to(e->a, os, 0, false);
        os << ", ";
        render_to(e->b, os, 0, false);
        os << ")";
      } else {
        render_to(e->a, os, prec, false);
        os << " " << bin_op_name(e->bop) << " ";
        render_to(e->b, os, prec, true);
      }
      break;
  }
  if (parens) os << ")";
}

std::string render(const Expr& e) {
  std::ostringstream os;
  render_to(e, os, 0, false);
  return os.str();
}

}  // namespace redfuse
