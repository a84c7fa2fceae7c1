#ifndef REDFUSE_SIMPLIFY_HPP
#define REDFUSE_SIMPLIFY_HPP

#include "redfuse/expr.hpp"

namespace redfuse {

// Algebraic cleanup: constant folding, identity elimination, additive and
// multiplicative normalization with cancellation, exp-product merging.
// The result is numerically equivalent to the input (probe-verified in
// tests); it is not a canonical form.
Expr simplify(const Expr& e);

}  // namespace redfuse

#endif  // REDFUSE_SIMPLIFY_HPP
