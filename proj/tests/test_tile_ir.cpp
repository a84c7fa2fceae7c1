#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>
#include <sstream>

#include "redfuse/tile_ir.hpp"
#include "redfuse/workloads.hpp"

using namespace redfuse;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  REQUIRE(in.good());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

bool has_line(const std::string& text, const std::string& needle) {
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line))
    if (line.find(needle) != std::string::npos) return true;
  return false;
}

// statement kinds in program order, skipping comments, launches, fills, and
// the offset assignment; loops flatten into their bodies
void kinds_of(const std::vector<TStmt>& stmts, std::vector<TKind>& out) {
  for (const auto& s : stmts) {
    switch (s->kind) {
      case TKind::Comment:
      case TKind::Launch:
      case TKind::Assign:
      case TKind::Fill:
        break;
      case TKind::For:
        kinds_of(s->body, out);
        break;
      default:
        out.push_back(s->kind);
    }
  }
}

TileIR attention_tile(int segments) {
  Workload w = make_attention(512, 64);
  FusedProgram p = derive_fused(w.spec);
  return tensorize(emit_scalar_ir(p, {.segments = segments, .rows = 512}));
}

}  // namespace

TEST_CASE("attention tiling follows the flash-attention listing") {
  TileIR t = attention_tile(1);
  std::vector<TKind> got;
  kinds_of(t.stmts, got);
  // copy Q; per stage: copy K, copy V, gemm, store-prev copy, reduce max,
  // store-prev copy, rescale, exp tile, reduce sum, output rescale, weight
  // tile, gemm; then copy out
  std::vector<TKind> want = {
      TKind::Copy,                                      // Q into shared
      TKind::Copy,     TKind::Copy,     TKind::Gemm,    // stage body
      TKind::Copy,     TKind::Reduce,   TKind::Copy,
      TKind::Parallel, TKind::Parallel, TKind::Reduce,
      TKind::Parallel, TKind::Parallel, TKind::Gemm,
      TKind::Copy};                                     // result out
  CHECK(got == want);

  std::string text = render(t);
  CHECK(has_line(text, "bx = launch_thread(\"blockIdx.x\", 4)"));
  CHECK(has_line(text, "copy(Q[bx * 128:bx * 128 + 128, 0:64], "
                       "Q_shared[0:128, 0:64])"));
  CHECK(has_line(text, "reduce(P_frag[0:128, 0:128], pmax[0:128], axis=1, "
                       "op=max)"));
  CHECK(has_line(text, "parallel(psum[i], psum[i] * exp(pmax_prev[i] - "
                       "pmax[i]), i, 128)"));
  CHECK(has_line(text,
                 "gemm(oexp[0:128, 0:128], V_shared[0:128, 0:64], "
                 "o_frag[0:128, 0:64])"));
}

TEST_CASE("split attention emits two launch sections") {
  TileIR t = attention_tile(2);
  std::string text = render(t);
  CHECK(has_line(text, "# partial segment"));
  CHECK(has_line(text, "# combine"));
  CHECK(has_line(text, "by = launch_thread(\"blockIdx.y\", 2)"));
  CHECK(has_line(text, "offset = by * 256 + stage * 128"));
  CHECK(has_line(text, "copy(pmax_frag[0:128], pmax_part[bx * 128:bx * 128 + "
                       "128, by:by + 1])"));
  // the combine keeps the raw partial sums readable by the output rescale
  CHECK(has_line(text, "parallel(psum_corr[i, k], psum_frag[i, k] * "
                       "exp(pmax_frag[i, k] - pmax[i]), i, 128, k, 2)"));
  CHECK(has_line(text, "reduce(o_frag[0:128, 0:64, 0:2], o_final[0:128, "
                       "0:64], axis=2, op=add)"));
  int launches = 0;
  for (const auto& s : t.stmts)
    if (s->kind == TKind::Launch && s->thread == "blockIdx.x") ++launches;
  CHECK(launches == 2);
}

TEST_CASE("pure sum lowers to fill, staged copy plus reduce, copy-out") {
  CascadeSpec s = parse_cascade(
      "cascade p\ninput x len 256\nreduce 1 op sum\n    x[l]\n");
  FusedProgram prog = derive_fused(s);
  TileIR t = tensorize(emit_scalar_ir(prog), {.stream_tile = 64});
  std::string text = render(t);
  CHECK(has_line(text, "fill(d1[0:1], 0)"));
  CHECK(has_line(text, "for stage in range(4):"));
  CHECK(has_line(text, "copy(x[stage * 64:stage * 64 + 64], x_shared[0:64])"));
  CHECK(has_line(text, "reduce(x_shared[0:64], d1[0:1], axis=0, op=add)"));
  CHECK(has_line(text, "copy(d1[0:1], d1_out[0:1])"));
  std::vector<TKind> got;
  kinds_of(t.stmts, got);
  CHECK(got == std::vector<TKind>{TKind::Copy, TKind::Reduce, TKind::Copy});
}

TEST_CASE("tiles must divide their extents") {
  Workload w = builtin("variance");
  FusedProgram p = derive_fused(w.spec);
  ScalarIR ir = emit_scalar_ir(p);
  CHECK_THROWS_AS(tensorize(ir, {.stream_tile = 100}), NonDivisibleTile);
  Workload a = make_attention(512, 64);
  ScalarIR air = emit_scalar_ir(derive_fused(a.spec), {.rows = 512});
  CHECK_THROWS_AS(tensorize(air, {.row_tile = 5}), NonDivisibleTile);
}

TEST_CASE("every emitted program parses and validates") {
  auto check = [](const TileIR& t) {
    std::string text = render(t);
    TileIR back = parse_tile_ir(text);
    CHECK(render(back) == text);
    for (const auto& p : validate(t)) FAIL_CHECK(p);
    CHECK(validate(back).empty());
  };
  for (const auto& n : builtin_names()) {
    CAPTURE(n);
    Workload w = builtin(n);
    FusedProgram p = derive_fused(w.spec);
    for (int segs : {1, 2}) {
      EmitStrategy es;
      es.segments = segs;
      if (n == "attention") es.rows = 512;
      check(tensorize(emit_scalar_ir(p, es)));
    }
  }
}

TEST_CASE("tensorization is deterministic") {
  Workload w = builtin("quant_gemm");
  FusedProgram p = derive_fused(w.spec);
  ScalarIR ir = emit_scalar_ir(p, {.segments = 2});
  CHECK(render(tensorize(ir)) == render(tensorize(ir)));
}

TEST_CASE("parser rejects malformed programs") {
  CHECK_THROWS_AS(parse_tile_ir("copy(x[0:4])\n"), IRParseError);
  CHECK_THROWS_AS(parse_tile_ir("copy(x[4], y[0:4])\n"), IRParseError);
  CHECK_THROWS_AS(parse_tile_ir("reduce(x[0:4], y[0:1], axis=0, op=)\n"),
                  IRParseError);
  CHECK_THROWS_AS(parse_tile_ir("parallel(y, x[i], i, 4)\n"), IRParseError);
  CHECK_THROWS_AS(parse_tile_ir("fill(x[0:4], a + b)\n"), IRParseError);
  CHECK_THROWS_AS(parse_tile_ir("  copy(x[0:4], y[0:4])\n"), IRParseError);
  CHECK_THROWS_AS(parse_tile_ir("gemm(a[0:1], b[0:1])\n"), IRParseError);
}

TEST_CASE("validator flags structural problems") {
  // reduce into a buffer that was never introduced
  TileIR t1 = parse_tile_ir("reduce(src[0:4], dst[0:1], axis=0, op=add)\n");
  CHECK_FALSE(validate(t1).empty());
  // range outside the declared extent
  TileIR t2 = parse_tile_ir(
      "fill(acc[0:4], 0)\n"
      "copy(acc[0:8], out[0:8])\n");
  CHECK_FALSE(validate(t2).empty());
  // loop variable out of scope
  TileIR t3 = parse_tile_ir("offset = stage * 64\n");
  CHECK_FALSE(validate(t3).empty());
  // iteration extent wider than the target buffer
  TileIR t4 = parse_tile_ir(
      "fill(acc[0:4], 0)\n"
      "parallel(acc[i], acc[i] * 2, i, 8)\n");
  CHECK_FALSE(validate(t4).empty());
}

TEST_CASE("golden listings are stable") {
  std::string dir = REDFUSE_GOLDEN_DIR;
  Workload w = make_attention(512, 64);
  FusedProgram p = derive_fused(w.spec);
  ScalarIR single = emit_scalar_ir(p, {.rows = 512});
  ScalarIR multi = emit_scalar_ir(p, {.segments = 2, .rows = 512});
  CHECK(render(single) == slurp(dir + "/flash_attention_scalar.txt"));
  CHECK(render(multi) == slurp(dir + "/flash_decoding_scalar.txt"));
  CHECK(render(tensorize(single)) == slurp(dir + "/flash_attention_tile.txt"));
  CHECK(render(tensorize(multi)) == slurp(dir + "/flash_decoding_tile.txt"));
}
