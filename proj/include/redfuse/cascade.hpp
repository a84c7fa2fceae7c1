// Cascade IR: inputs, reductions with dependency order, reduction-tree
// level structure, plus the text-format parser and serializer.

#ifndef REDFUSE_CASCADE_HPP
#define REDFUSE_CASCADE_HPP

#include <string>
#include <utility>
#include <vector>

#include "redfuse/expr.hpp"
#include "redfuse/monoid.hpp"

namespace redfuse {

struct SyntaxError : std::runtime_error {
  SyntaxError(int line, const std::string& msg)
      : std::runtime_error("line " + std::to_string(line) + ": " + msg),
        line(line) {}
  int line;
};

struct ForwardDependency : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct UnknownInput : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct InputDecl {
  std::string name;
  long long len = 0;       // reduce-axis length, shared across the cascade
  long long free_len = 0;  // 0: rank-1 input; >0: free axis length
  bool operator==(const InputDecl&) const = default;
};

struct ReductionSpec {
  int id = 0;  // 1-based; also the dependency order
  ReduceOp op = ReduceOp::Sum;
  int topk = 0;            // K' for op == TopK
  long long free_len = 1;  // 1: scalar output
  Expr body;

  bool operator==(const ReductionSpec& o) const {
    return id == o.id && op == o.op && topk == o.topk &&
           free_len == o.free_len && expr_equal(body, o.body);
  }
};

struct CascadeSpec {
  std::string name;
  std::vector<InputDecl> inputs;
  std::vector<ReductionSpec> reductions;

  const InputDecl* find_input(const std::string& n) const;
  const ReductionSpec& reduction(int id) const;  // 1-based
  long long axis_len() const;                    // L0
  bool operator==(const CascadeSpec&) const = default;
};

// Reduction-tree level widths [L0, L1, ..., LK] with LK = 1.
struct TreeConfig {
  std::vector<long long> levels;
  int depth() const { return static_cast<int>(levels.size()) - 1; }  // K
  bool operator==(const TreeConfig&) const = default;
};

// 1-based inclusive input range of segment j at level k (Eqs. of the
// level/segment partition). Throws std::out_of_range on bad k or j.
std::pair<long long, long long> segment_bounds(const TreeConfig& cfg, int k,
                                               long long j);

struct Diagnostic {
  std::string kind;
  std::string message;
  bool operator==(const Diagnostic&) const = default;
};

// Structural checks; empty result iff the spec is well formed.
std::vector<Diagnostic> validate(const CascadeSpec& spec);
// Level-structure checks; pass require_l0 > 0 to also pin levels[0].
std::vector<Diagnostic> validate_tree(const TreeConfig& cfg,
                                      long long require_l0 = 0);

// Parses the cascade DSL and validates the result. Grammar violations raise
// SyntaxError; bad dependencies and undeclared tensors raise their named
// errors; any other diagnostic raises SyntaxError at line 0.
CascadeSpec parse_cascade(const std::string& text);

// Inverse of parse_cascade up to expression layout: parse(serialize(s)) == s.
std::string serialize(const CascadeSpec& spec);

}  // namespace redfuse

#endif  // REDFUSE_CASCADE_HPP
