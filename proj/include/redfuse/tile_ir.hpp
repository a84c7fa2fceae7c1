// Tile-level IR: tensorization of emitted scalar IR into the tile-operation
// grammar (copy / gemm / reduce / parallel / fill plus block launches and
// stage loops), with a renderer, a grammar parser, and a well-formedness
// validator. Tile IR is emitted and validated, not executed.

#ifndef REDFUSE_TILE_IR_HPP
#define REDFUSE_TILE_IR_HPP

#include <string>
#include <vector>

#include "redfuse/scalar_ir.hpp"

namespace redfuse {

struct NonDivisibleTile : std::runtime_error {
  explicit NonDivisibleTile(const std::string& msg)
      : std::runtime_error(msg) {}
};

// ---- statements -------------------------------------------------------------

struct TileRange {
  IExpr lo, hi;
};

struct TileRef {
  std::string name;
  std::vector<TileRange> ranges;
};

enum class TKind { Comment, Launch, For, Assign, Copy, Gemm, Reduce, Parallel, Fill };

struct TStmtNode;
using TStmt = std::shared_ptr<TStmtNode>;

struct TStmtNode {
  TKind kind = TKind::Comment;
  std::string text;                 // Comment
  std::string var;                  // Launch / For / Assign lhs
  std::string thread;               // Launch: "blockIdx.x" / "blockIdx.y"
  long long extent = 0;             // Launch / For
  std::vector<TStmt> body;          // For
  IExpr rhs;                        // Assign / Parallel
  TileRef a, b, c;                  // Copy: a->b; Gemm: a,b,c; Reduce: a->b; Fill: a
  int axis = 0;                     // Reduce
  std::string op;                   // Reduce: add / mul / max / min / topk
  double fill_value = 0;            // Fill
  IExpr plhs;                       // Parallel target (Ref)
  std::vector<std::pair<std::string, long long>> iters;  // Parallel
};

struct TileIR {
  std::vector<TStmt> stmts;
};

// ---- tensorization ----------------------------------------------------------

struct TileConfig {
  // 0 picks 128 when it divides the extent and the whole extent otherwise.
  long long row_tile = 0;
  long long stream_tile = 0;
};

// Restructures an emitted scalar IR (single or partial+combine) into block
// tiles with explicit data movement. Throws NonDivisibleTile when a
// configured tile size does not divide its loop extent.
TileIR tensorize(const ScalarIR& ir, const TileConfig& tiles = {});

// ---- text form --------------------------------------------------------------

std::string render(const TileIR& ir);
TileIR parse_tile_ir(const std::string& text);  // IRParseError

// Structural checks: buffers introduced (copy / fill / parallel / alloc
// note) before use, ranks consistent, constant tile ranges within the
// buffer's declared extent, loop variables in scope. Returns a list of
// problems; empty means well-formed.
std::vector<std::string> validate(const TileIR& ir);

}  // namespace redfuse

#endif  // REDFUSE_TILE_IR_HPP
