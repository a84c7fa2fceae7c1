#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "redfuse/cascade.hpp"

using namespace redfuse;

namespace {

const char* kSoftmax = R"(cascade safe_softmax
input x len 1024
reduce 1 op max
    x[l]
reduce 2 op sum
    exp(x[l] - d1)
)";

const char* kQuantGemm = R"(cascade quant_gemm
input a len 4096
input w len 4096 free 2048
const FMAX = 448.0
reduce 1 op max
    abs(a[l])
reduce 2 op sum free 2048
    (FMAX * a[l] / d1) * w[l, f]
)";

}  // namespace

TEST_CASE("parse safe softmax") {
  CascadeSpec s = parse_cascade(kSoftmax);
  CHECK(s.name == "safe_softmax");
  REQUIRE(s.reductions.size() == 2);
  CHECK(s.reductions[0].op == ReduceOp::Max);
  CHECK(s.reductions[1].op == ReduceOp::Sum);
  CHECK(expr_equal(s.reductions[0].body, input_var("x")));
  CHECK(expr_equal(s.reductions[1].body,
                   exp_of(input_var("x") - dep_var(1))));
  CHECK(s.axis_len() == 1024);
  CHECK(validate(s).empty());
}

TEST_CASE("parse single-reduction cascade") {
  CascadeSpec s = parse_cascade(
      "cascade total\ninput x len 16\nreduce 1 op sum\n    x[l]\n");
  REQUIRE(s.reductions.size() == 1);
  CHECK_FALSE(contains_dep(s.reductions[0].body));
  CHECK(validate(s).empty());
}

TEST_CASE("parse quant gemm") {
  CascadeSpec s = parse_cascade(kQuantGemm);
  REQUIRE(s.reductions.size() == 2);
  CHECK(s.reductions[1].free_len == 2048);
  CHECK(s.find_input("w")->free_len == 2048);
  Expr want = (cst(448.0) * input_var("a") / dep_var(1)) *
              input_var("w", true);
  CHECK(expr_equal(s.reductions[1].body, want));
}

TEST_CASE("parse topk") {
  CascadeSpec s = parse_cascade(
      "cascade route\ninput s len 128\nreduce 1 op topk 8\n    s[l]\n");
  CHECK(s.reductions[0].op == ReduceOp::TopK);
  CHECK(s.reductions[0].topk == 8);
  CHECK(validate(s).empty());
}

TEST_CASE("parse errors") {
  CHECK_THROWS_AS(parse_cascade("cascade x\nbogus line\n"), SyntaxError);
  CHECK_THROWS_AS(
      parse_cascade("cascade x\ninput a len 8\nreduce 1 op sum\nx[l]\n"),
      SyntaxError);  // body must be indented
  CHECK_THROWS_AS(
      parse_cascade("cascade x\ninput a len 8\nreduce 1 op sum\n    y[l]\n"),
      UnknownInput);
  CHECK_THROWS_AS(
      parse_cascade("cascade x\ninput a len 8\nreduce 1 op sum\n    a[l] + d3\n"),
      ForwardDependency);
  try {
    parse_cascade("cascade x\ninput a len 8\nreduce 1 op sum\n    a[l] +\n");
    FAIL("expected SyntaxError");
  } catch (const SyntaxError& e) {
    CHECK(e.line == 4);
  }
}

TEST_CASE("segment bounds") {
  TreeConfig cfg{{8, 4, 1}};
  CHECK(segment_bounds(cfg, 1, 2) == std::pair<long long, long long>{3, 4});
  CHECK(segment_bounds(cfg, 2, 1) == std::pair<long long, long long>{1, 4});
  TreeConfig flat{{64, 1}};
  CHECK(segment_bounds(flat, 1, 1) == std::pair<long long, long long>{1, 64});
  CHECK_THROWS_AS(segment_bounds(cfg, 0, 1), std::out_of_range);
  CHECK_THROWS_AS(segment_bounds(cfg, 3, 1), std::out_of_range);
  CHECK_THROWS_AS(segment_bounds(cfg, 1, 5), std::out_of_range);
}

TEST_CASE("segment bounds partition the level exactly") {
  for (TreeConfig cfg : {TreeConfig{{4096, 128, 32, 1}},
                         TreeConfig{{1024, 128, 1}}, TreeConfig{{64, 1}}}) {
    for (int k = 1; k <= cfg.depth(); ++k) {
      long long next = 1;
      for (long long j = 1; j <= cfg.levels[static_cast<std::size_t>(k)];
           ++j) {
        auto [lo, hi] = segment_bounds(cfg, k, j);
        CHECK(lo == next);
        CHECK(hi >= lo);
        next = hi + 1;
      }
      CHECK(next == cfg.levels[static_cast<std::size_t>(k) - 1] + 1);
    }
  }
}

TEST_CASE("tree validation") {
  CHECK(validate_tree(TreeConfig{{8, 4, 1}}).empty());
  auto bad = validate_tree(TreeConfig{{8, 3, 1}});
  REQUIRE(bad.size() == 1);
  CHECK(bad[0].kind == "DivisibilityViolation");
  CHECK_FALSE(validate_tree(TreeConfig{{8, 4, 2}}).empty());
  CHECK_FALSE(validate_tree(TreeConfig{{8, 8, 1}}).empty());
  CHECK_FALSE(validate_tree(TreeConfig{{8}}).empty());
  CHECK_FALSE(validate_tree(TreeConfig{{8, 4, 1}}, 16).empty());
  CHECK(validate_tree(TreeConfig{{8, 4, 1}}, 8).empty());
}

TEST_CASE("spec validation diagnostics") {
  CascadeSpec s = parse_cascade(kSoftmax);
  CHECK(validate(s).empty());

  CascadeSpec fwd = s;
  fwd.reductions[1].body = input_var("x") + dep_var(3);
  auto diags = validate(fwd);
  REQUIRE(diags.size() == 1);
  CHECK(diags[0].kind == "ForwardDependency");
  CHECK(diags[0].message.find("reduction 2") != std::string::npos);

  CascadeSpec mixed = s;
  mixed.inputs.push_back({"y", 512, 0});
  mixed.reductions[0].body = input_var("x") + input_var("y");
  CHECK_FALSE(validate(mixed).empty());

  CascadeSpec topk_dep = s;
  topk_dep.reductions[1].op = ReduceOp::TopK;
  topk_dep.reductions[1].topk = 4;
  bool found = false;
  for (const auto& d : validate(topk_dep))
    if (d.kind == "TopKDependency") found = true;
  CHECK(found);

  CascadeSpec free_mismatch = parse_cascade(kQuantGemm);
  free_mismatch.reductions[1].free_len = 64;
  found = false;
  for (const auto& d : validate(free_mismatch))
    if (d.kind == "FreeAxisMismatch") found = true;
  CHECK(found);
}

TEST_CASE("parse serialize parse round-trip") {
  for (const char* text : {kSoftmax, kQuantGemm}) {
    CascadeSpec a = parse_cascade(text);
    CascadeSpec b = parse_cascade(serialize(a));
    CHECK(a == b);
    CHECK(serialize(a) == serialize(b));
  }
}
