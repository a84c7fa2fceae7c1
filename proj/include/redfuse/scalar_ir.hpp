// Scalar-level loop IR: emission from a fused program via the three-step
// reduction template (store previous result / apply correction / perform
// reduction) with dataflow-based elision, plus a renderer, a parser, and a
// reference interpreter.

#ifndef REDFUSE_SCALAR_IR_HPP
#define REDFUSE_SCALAR_IR_HPP

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "redfuse/acrf.hpp"
#include "redfuse/simulator.hpp"

namespace redfuse {

struct IRParseError : std::runtime_error {
  IRParseError(int line, const std::string& msg)
      : std::runtime_error("line " + std::to_string(line) + ": " + msg),
        line(line) {}
  int line;
};

// ---- IR expressions ---------------------------------------------------------

enum class IKind { Num, Var, Ref, Neg, Bin, Call };

struct IExprNode;
using IExpr = std::shared_ptr<const IExprNode>;

struct IExprNode {
  IKind kind = IKind::Num;
  double num = 0;
  std::string name;          // Var, Ref, Call
  std::vector<IExpr> args;   // Ref indices or Call arguments
  BinOp bop = BinOp::Add;    // Bin: Add/Sub/Mul/Div only
  IExpr a, b;                // Neg: a; Bin: a, b
};

IExpr inum(double v);
IExpr ivar(const std::string& name);
IExpr iref(const std::string& name, std::vector<IExpr> idx = {});
IExpr ineg(IExpr a);
IExpr ibin(BinOp op, IExpr a, IExpr b);
IExpr icall(const std::string& fn, std::vector<IExpr> args);

std::string render(const IExpr& e);

// ---- statements -------------------------------------------------------------

enum class SKind { For, Grid, Assign, Accum, Comment };

struct SStmtNode;
using SStmt = std::shared_ptr<SStmtNode>;

struct SStmtNode {
  SKind kind = SKind::Comment;
  std::vector<std::string> vars;    // For: 1 var; Grid: 2+ vars
  std::vector<long long> extents;   // parallel to vars
  std::vector<SStmt> body;
  IExpr lhs;                        // Assign/Accum target (Ref)
  IExpr rhs;
  BinOp op = BinOp::Add;            // Accum: Add (+=) or Mul (*=)
  std::string text;                 // Comment
};

struct ScalarIR {
  std::vector<SStmt> stmts;
};

// ---- emission ---------------------------------------------------------------

struct EmitStrategy {
  int segments = 1;     // 1: single-segment; >1: partial + combine sections
  long long rows = 1;   // outer row count for attention-shaped cascades
  // Emit every template step even when dataflow allows elision; elided
  // corrections become multiplications by 1.
  bool full_template = false;
};

// True when the cascade is max / exp-sum / normalized weighted sum, the
// shape whose listings use the attention naming scheme.
bool attention_shaped(const CascadeSpec& spec);

// Accumulator buffer name of reduction id in emitted code.
std::string scalar_acc_name(const FusedProgram& prog, int id);

ScalarIR emit_scalar_ir(const FusedProgram& prog,
                        const EmitStrategy& strategy = {});

// ---- text form --------------------------------------------------------------

std::string render(const ScalarIR& ir);
ScalarIR parse_scalar_ir(const std::string& text);  // IRParseError

// Parses one expression in the IR syntax; line tags parse errors.
IExpr parse_iexpr_text(const std::string& s, int line);

// ---- interpretation ---------------------------------------------------------

// Sparse buffers defaulting to 0; TopK assignments keep ordered tuple state.
struct ScalarMachine {
  std::map<std::string, std::map<std::vector<long long>, double>> bufs;
  std::map<std::string, std::map<std::vector<long long>,
                                 std::vector<std::pair<double, long long>>>>
      topk;

  double read(const std::string& name, const std::vector<long long>& idx) const;
};

ScalarMachine machine_from_store(const TensorStore& store);
void run_scalar_ir(const ScalarIR& ir, ScalarMachine& m);

// Reads the accumulators back out in reduction-id order (row 0 for
// attention-shaped programs).
std::vector<OutputVal> scalar_outputs(const FusedProgram& prog,
                                      const ScalarMachine& m);

}  // namespace redfuse

#endif  // REDFUSE_SCALAR_IR_HPP
