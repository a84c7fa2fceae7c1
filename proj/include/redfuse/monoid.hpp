// Commutative monoid operators and reduction operators, with true
// +-infinity identities so the monoid laws hold in plain arithmetic.

#ifndef REDFUSE_MONOID_HPP
#define REDFUSE_MONOID_HPP

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "redfuse/expr.hpp"

namespace redfuse {

struct NotInvertible : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class MonoidOp { Add, Mul, Max, Min };

inline double identity_of(MonoidOp op) {
  switch (op) {
    case MonoidOp::Add:
      return 0.0;
    case MonoidOp::Mul:
      return 1.0;
    case MonoidOp::Max:
      return -std::numeric_limits<double>::infinity();
    case MonoidOp::Min:
      return std::numeric_limits<double>::infinity();
  }
  throw std::logic_error("bad monoid op");
}

inline double combine(MonoidOp op, double a, double b) {
  switch (op) {
    case MonoidOp::Add:
      return a + b;
    case MonoidOp::Mul:
      return a * b;
    case MonoidOp::Max:
      return std::fmax(a, b);
    case MonoidOp::Min:
      return std::fmin(a, b);
  }
  throw std::logic_error("bad monoid op");
}

inline bool is_invertible(MonoidOp op, double v) {
  if (op == MonoidOp::Add) return true;
  if (op == MonoidOp::Mul) return v != 0.0;
  return false;
}

// The inverse element under the monoid. Max/min admit no inverses at all.
inline double inverse_under(MonoidOp op, double v) {
  switch (op) {
    case MonoidOp::Add:
      return -v;
    case MonoidOp::Mul:
      if (v == 0.0) throw NotInvertible("0 has no inverse under *");
      return 1.0 / v;
    case MonoidOp::Max:
      throw NotInvertible("max admits no inverses");
    case MonoidOp::Min:
      throw NotInvertible("min admits no inverses");
  }
  throw std::logic_error("bad monoid op");
}

inline const char* monoid_name(MonoidOp op) {
  switch (op) {
    case MonoidOp::Add:
      return "add";
    case MonoidOp::Mul:
      return "mul";
    case MonoidOp::Max:
      return "max";
    case MonoidOp::Min:
      return "min";
  }
  return "?";
}

// Reduction operators of the cascade IR. Prod is executed directly in the
// unfused reference path and handled through the log2 transform when fused.
enum class ReduceOp { Sum, Prod, Max, Min, TopK };

inline const char* reduce_name(ReduceOp op) {
  switch (op) {
    case ReduceOp::Sum:
      return "sum";
    case ReduceOp::Prod:
      return "prod";
    case ReduceOp::Max:
      return "max";
    case ReduceOp::Min:
      return "min";
    case ReduceOp::TopK:
      return "topk";
  }
  return "?";
}

// Monoid underlying a reduction operator, for tree/segment folding.
inline MonoidOp reduce_monoid(ReduceOp op) {
  switch (op) {
    case ReduceOp::Sum:
      return MonoidOp::Add;
    case ReduceOp::Prod:
      return MonoidOp::Mul;
    case ReduceOp::Max:
      return MonoidOp::Max;
    case ReduceOp::Min:
      return MonoidOp::Min;
    case ReduceOp::TopK:
      throw std::logic_error("topk folds structurally, not via a scalar op");
  }
  throw std::logic_error("bad reduce op");
}

}  // namespace redfuse

#endif  // REDFUSE_MONOID_HPP
