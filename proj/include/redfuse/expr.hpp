// Scalar expression trees: the carrier for reduction bodies and everything
// the decomposition engine manipulates (mapping functions, extracted factors,
// correction terms). Trees are immutable and shared; all operations are pure.

#ifndef REDFUSE_EXPR_HPP
#define REDFUSE_EXPR_HPP

#include <map>
#include <memory>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace redfuse {

struct EvalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A variable occurs in the expression but not in the environment.
struct UnboundVariable : EvalError {
  explicit UnboundVariable(const std::string& name)
      : EvalError("unbound variable: " + name), name(name) {}
  std::string name;
};

// log of a non-positive value, division by zero, sqrt of a negative, ...
struct DomainError : EvalError {
  using EvalError::EvalError;
};

enum class UnOp { Neg, Exp, Log2, Ln, Abs, Sqrt, Sign, Recip };
enum class BinOp { Add, Sub, Mul, Div, Max, Min, Pow };

enum class ExprKind { Constant, Input, Dep, FreeIndex, Unary, Binary };

struct ExprNode;
using Expr = std::shared_ptr<const ExprNode>;

struct ExprNode {
  ExprKind kind;
  double value = 0.0;     // Constant
  std::string name;       // Input tensor name / free-index axis name
  bool has_free = false;  // Input indexed [l, f] rather than [l]
  int dep = 0;            // Dep reduction id (1-based)
  bool dep_prev = false;  // Dep refers to the pre-update snapshot
  UnOp uop = UnOp::Neg;
  BinOp bop = BinOp::Add;
  Expr a, b;
};

// Node builders.
Expr cst(double v);
Expr input_var(const std::string& name, bool has_free = false);
Expr dep_var(int id, bool prev = false);
Expr free_index(const std::string& axis);
Expr un(UnOp op, Expr a);
Expr bin(BinOp op, Expr a, Expr b);

// Shorthands used heavily by the engine and the workload definitions.
inline Expr operator+(Expr a, Expr b) { return bin(BinOp::Add, a, b); }
inline Expr operator-(Expr a, Expr b) { return bin(BinOp::Sub, a, b); }
inline Expr operator*(Expr a, Expr b) { return bin(BinOp::Mul, a, b); }
inline Expr operator/(Expr a, Expr b) { return bin(BinOp::Div, a, b); }
inline Expr neg(Expr a) { return un(UnOp::Neg, a); }
inline Expr exp_of(Expr a) { return un(UnOp::Exp, a); }
inline Expr abs_of(Expr a) { return un(UnOp::Abs, a); }
inline Expr recip(Expr a) { return un(UnOp::Recip, a); }

// Environment key for each variable node: inputs by name, deps as "d<i>"
// (snapshot deps as "d<i>'"), free indices by axis name.
std::string var_key(const ExprNode& n);

using Env = std::map<std::string, double>;

// Arithmetic evaluation. Max/min follow IEEE semantics so that the true
// +-infinity identities behave as identities.
double evaluate(const Expr& e, const Env& env);

// Structural equality (used by the simplifier for cancellation).
bool expr_equal(const Expr& a, const Expr& b);

// All variable keys occurring in the tree.
std::set<std::string> free_vars(const Expr& e);

// Dep ids occurring in the tree (both current and snapshot flavors).
std::set<int> dep_ids(const Expr& e);
bool contains_input(const Expr& e);
bool contains_dep(const Expr& e);

// Replace variables (by env key) with constants. Unmentioned variables stay.
Expr substitute(const Expr& e, const Env& bindings);

// Rewrite Dep(i) -> Dep(i, prev) throughout.
Expr mark_deps_prev(const Expr& e);

// Infix rendering; deterministic, parseable by the cascade DSL expression
// grammar (Recip renders as a division).
std::string render(const Expr& e);

const char* un_op_name(UnOp op);
const char* bin_op_name(BinOp op);

// Shortest exact decimal for integers, 17 significant digits otherwise.
std::string format_number(double v);

}  // namespace redfuse

#endif  // REDFUSE_EXPR_HPP
