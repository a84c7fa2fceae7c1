#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "redfuse/simulator.hpp"

using namespace redfuse;

namespace {

CascadeSpec softmax_spec(long long n) {
  return parse_cascade(
      "cascade safe_softmax\ninput x len " + std::to_string(n) +
      "\nreduce 1 op max\n    x[l]\nreduce 2 op sum\n    exp(x[l] - d1)\n");
}

CascadeSpec quant_spec(long long k, long long n) {
  return parse_cascade(
      "cascade quant_gemm\ninput a len " + std::to_string(k) + "\ninput w len " +
      std::to_string(k) + " free " + std::to_string(n) +
      "\nconst FMAX = 448.0\nreduce 1 op max\n    abs(a[l])\n"
      "reduce 2 op sum free " + std::to_string(n) +
      "\n    (FMAX * a[l] / d1) * w[l, f]\n");
}

std::vector<double> random_vec(std::size_t n, std::uint64_t seed, double lo,
                               double hi) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> out(n);
  for (auto& v : out) v = dist(rng);
  return out;
}

}  // namespace

TEST_CASE("unfused softmax by hand") {
  CascadeSpec s = softmax_spec(3);
  TensorStore st;
  st.define("x", 3, 0, {1, 2, 3});
  ExecReport r = run_unfused(s, TreeConfig{{3, 1}}, st);
  CHECK(r.outputs[0].v[0] == 3.0);
  double t = std::exp(-2.0) + std::exp(-1.0) + 1.0;
  CHECK(r.outputs[1].v[0] == doctest::Approx(t).epsilon(1e-12));
  // d1 is re-read once per element by reduction 2.
  CHECK(r.dep_root_loads.at(1) == 3);
  // x feeds two reductions: each element loaded twice.
  CHECK(r.input_loads.at("x") == 6);
}

TEST_CASE("unfused trivia") {
  CascadeSpec s = parse_cascade(
      "cascade total\ninput x len 8\nreduce 1 op sum\n    x[l]\n");
  TensorStore st;
  st.define("x", 8, 0, std::vector<double>(8, 0.0));
  ExecReport r = run_unfused(s, TreeConfig{{8, 4, 1}}, st);
  CHECK(r.outputs[0].v[0] == 0.0);

  CascadeSpec q = quant_spec(1, 1);
  TensorStore st2;
  st2.define("a", 1, 0, {1.0});
  st2.define("w", 1, 1, {2.0});
  ExecReport r2 = run_unfused(q, TreeConfig{{1, 1}}, st2);
  CHECK(r2.outputs[0].v[0] == 1.0);
  CHECK(r2.outputs[1].v[0] == 896.0);
}

TEST_CASE("shape checks") {
  CascadeSpec s = softmax_spec(8);
  TensorStore st;
  st.define("x", 4, 0, std::vector<double>(4, 1.0));
  CHECK_THROWS_AS(run_unfused(s, TreeConfig{{8, 1}}, st), ShapeMismatch);
  TensorStore st2;
  CHECK_THROWS_AS(run_unfused(s, TreeConfig{{8, 1}}, st2), ShapeMismatch);
  TensorStore st3;
  st3.define("x", 8, 0, std::vector<double>(8, 1.0));
  CHECK_THROWS_AS(run_unfused(s, TreeConfig{{8, 3, 1}}, st3), ShapeMismatch);
}

TEST_CASE("fused softmax matches unfused and counts accesses") {
  CascadeSpec s = softmax_spec(8);
  FusedProgram p = derive_fused(s);
  TensorStore st;
  st.define("x", 8, 0, random_vec(8, 42, -2, 2));
  TreeConfig cfg{{8, 4, 2, 1}};
  ExecReport u = run_unfused(s, cfg, st);

  for (int k = 1; k <= 3; ++k) {
    TensorStore stk;
    stk.define("x", 8, 0, random_vec(8, 42, -2, 2));
    ExecReport f = run_fused(p, cfg, k, stk);
    DiffReport d = compare_reports(f, u, 1e-9);
    CAPTURE(k);
    CHECK(d.pass);
    // Fused region loads each element once.
    CHECK(f.input_loads.at("x") == 8);
    // Bridging reads the max's final value once per level-k partial.
    CHECK(f.dep_root_loads.at(1) == cfg.levels[static_cast<std::size_t>(k)]);
  }
}

TEST_CASE("single-reduction fused is bitwise unfused") {
  CascadeSpec s = parse_cascade(
      "cascade total\ninput x len 16\nreduce 1 op sum\n    x[l]\n");
  FusedProgram p = derive_fused(s);
  TreeConfig cfg{{16, 4, 1}};
  TensorStore a, b;
  a.define("x", 16, 0, random_vec(16, 3, -1, 1));
  b.define("x", 16, 0, random_vec(16, 3, -1, 1));
  ExecReport u = run_unfused(s, cfg, a);
  for (int k = 1; k <= 2; ++k) {
    TensorStore c;
    c.define("x", 16, 0, random_vec(16, 3, -1, 1));
    ExecReport f = run_fused(p, cfg, k, c);
    CHECK(f.outputs[0].v[0] == u.outputs[0].v[0]);  // identical fold order
  }
  ExecReport i = run_incremental(p, cfg, b);
  CHECK(i.outputs[0].v[0] == u.outputs[0].v[0]);
}

TEST_CASE("incremental and multisegment match unfused") {
  CascadeSpec s = quant_spec(16, 4);
  FusedProgram p = derive_fused(s);
  TreeConfig cfg{{16, 4, 1}};
  auto mk = [&] {
    TensorStore st;
    st.define("a", 16, 0, random_vec(16, 7, -2, 2));
    st.define("w", 16, 4, random_vec(64, 8, -1, 1));
    return st;
  };
  TensorStore st = mk();
  ExecReport u = run_unfused(s, cfg, st);
  TensorStore st2 = mk();
  ExecReport inc = run_incremental(p, cfg, st2);
  CHECK(compare_reports(inc, u, 1e-9).pass);
  CHECK(inc.input_loads.at("a") == 16);
  CHECK(inc.input_loads.at("w") == 64);
  for (long long seg : {1LL, 2LL, 4LL, 8LL}) {
    TensorStore st3 = mk();
    ExecReport m = run_multisegment(p, cfg, seg, st3);
    CHECK(compare_reports(m, u, 1e-9).pass);
  }
  TensorStore st4 = mk();
  CHECK_THROWS_AS(run_multisegment(p, cfg, 3, st4),
                  IncompatibleSegmentation);
}

TEST_CASE("multi:1 equals flat incremental exactly") {
  CascadeSpec s = softmax_spec(16);
  FusedProgram p = derive_fused(s);
  TreeConfig flat{{16, 1}};
  TensorStore a, b;
  a.define("x", 16, 0, random_vec(16, 5, -2, 2));
  b.define("x", 16, 0, random_vec(16, 5, -2, 2));
  ExecReport i = run_incremental(p, flat, a);
  ExecReport m = run_multisegment(p, flat, 1, b);
  CHECK(i.outputs[1].v[0] == m.outputs[1].v[0]);
}

TEST_CASE("softmax weights sum to one in every mode") {
  CascadeSpec s = softmax_spec(32);
  FusedProgram p = derive_fused(s);
  TreeConfig cfg{{32, 8, 1}};
  auto weights_sum = [&](const ExecReport& r, const TensorStore& st) {
    double m = r.outputs[0].v[0], t = r.outputs[1].v[0], sum = 0;
    for (double x : st.array("x").data) sum += std::exp(x - m) / t;
    return sum;
  };
  auto mk = [&] {
    TensorStore st;
    st.define("x", 32, 0, random_vec(32, 11, -2, 2));
    return st;
  };
  {
    TensorStore st = mk();
    ExecReport r = run_unfused(s, cfg, st);
    CHECK(weights_sum(r, st) == doctest::Approx(1.0).epsilon(1e-9));
  }
  for (int k = 1; k <= 2; ++k) {
    TensorStore st = mk();
    ExecReport r = run_fused(p, cfg, k, st);
    CHECK(weights_sum(r, st) == doctest::Approx(1.0).epsilon(1e-9));
  }
  {
    TensorStore st = mk();
    ExecReport r = run_incremental(p, cfg, st);
    CHECK(weights_sum(r, st) == doctest::Approx(1.0).epsilon(1e-9));
  }
}

TEST_CASE("repair: zero-valued dependency factor cascades to zero") {
  // F2 = x * d1 under sum: H is proportional to d1, which hits exact zero.
  CascadeSpec s = parse_cascade(
      "cascade repair\ninput x len 4\n"
      "reduce 1 op sum\n    x[l]\nreduce 2 op sum\n    x[l] * d1\n");
  FusedProgram p = derive_fused(s);
  TreeConfig cfg{{4, 2, 1}};

  // Global zero: d1 = 0 forces d2 = 0 in every mode.
  for (auto mode : {0, 1, 2, 3}) {
    TensorStore st;
    st.define("x", 4, 0, {1, -1, 2, -2});
    ExecReport r = mode == 0   ? run_unfused(s, cfg, st)
                   : mode == 1 ? run_fused(p, cfg, 1, st)
                   : mode == 2 ? run_incremental(p, cfg, st)
                               : run_multisegment(p, cfg, 2, st);
    CHECK(r.outputs[0].v[0] == 0.0);
    CHECK(r.outputs[1].v[0] == 0.0);
  }

  // Segment-local zero: the first segment's running sum is 0; the repaired
  // path must still recover the exact result.
  TensorStore st;
  st.define("x", 4, 0, {1, -1, 2, 2});
  ExecReport u = run_unfused(s, cfg, st);
  CHECK(u.outputs[1].v[0] == 16.0);  // (1-1+2+2)=4; sum x*4
  for (auto mode : {1, 2, 3}) {
    TensorStore st2;
    st2.define("x", 4, 0, {1, -1, 2, 2});
    ExecReport r = mode == 1   ? run_fused(p, cfg, 1, st2)
                   : mode == 2 ? run_incremental(p, cfg, st2)
                               : run_multisegment(p, cfg, 2, st2);
    CAPTURE(mode);
    CHECK(r.outputs[1].v[0] == doctest::Approx(16.0).epsilon(1e-12));
  }
}

TEST_CASE("product reductions run through the log transform") {
  CascadeSpec s = parse_cascade(
      "cascade magprod\ninput x len 3\nreduce 1 op prod\n    x[l]\n");
  FusedProgram p = derive_fused(s);
  TreeConfig cfg{{3, 1}};
  for (auto [vals, want] :
       std::vector<std::pair<std::vector<double>, double>>{
           {{2, 4, 8}, 64.0},
           {{2, 0, 8}, 0.0},
           {{-1, -1, -1}, -1.0},
           {{-2, 3, -0.5}, 3.0}}) {
    TensorStore a, b, c;
    a.define("x", 3, 0, vals);
    b.define("x", 3, 0, vals);
    c.define("x", 3, 0, vals);
    CHECK(run_unfused(s, cfg, a).outputs[0].v[0] ==
          doctest::Approx(want).epsilon(1e-12));
    CHECK(run_fused(p, cfg, 1, b).outputs[0].v[0] ==
          doctest::Approx(want).epsilon(1e-12));
    CHECK(run_incremental(p, cfg, c).outputs[0].v[0] ==
          doctest::Approx(want).epsilon(1e-12));
  }
}

TEST_CASE("topk reduction is consistent across modes") {
  CascadeSpec s = parse_cascade(
      "cascade route\ninput g len 8\nreduce 1 op topk 3\n    g[l]\n");
  FusedProgram p = derive_fused(s);
  TreeConfig cfg{{8, 4, 1}};
  std::vector<double> g = {0.3, 0.9, 0.9, -1.0, 0.5, 2.0, 0.1, 0.9};
  TensorStore a, b, c;
  a.define("g", 8, 0, g);
  b.define("g", 8, 0, g);
  c.define("g", 8, 0, g);
  ExecReport u = run_unfused(s, cfg, a);
  REQUIRE(u.outputs[0].topk.size() == 3);
  CHECK(u.outputs[0].topk[0] == std::pair<double, long long>{2.0, 6});
  CHECK(u.outputs[0].topk[1] == std::pair<double, long long>{0.9, 2});
  CHECK(u.outputs[0].topk[2] == std::pair<double, long long>{0.9, 3});
  CHECK(compare_reports(run_fused(p, cfg, 2, b), u, 0).pass);
  CHECK(compare_reports(run_incremental(p, cfg, c), u, 0).pass);
}

TEST_CASE("incremental auxiliary state is constant across segment sizes") {
  long long aux16 = 0, aux256 = 0, aux4096 = 0;
  for (auto [seg, out] : std::vector<std::pair<long long, long long*>>{
           {16, &aux16}, {256, &aux256}, {4096, &aux4096}}) {
    CascadeSpec s = softmax_spec(4096);
    FusedProgram p = derive_fused(s);
    TensorStore st;
    st.define("x", 4096, 0, random_vec(4096, 21, -2, 2));
    TreeConfig cfg{{4096, 4096 / seg, 1}};
    ExecReport r = run_incremental(p, cfg, st);
    *out = r.peak_aux_slots.at(1);
  }
  CHECK(aux16 == aux256);
  CHECK(aux256 == aux4096);
  // The buffered (non-incremental) execution scales with the segment.
  CascadeSpec s = softmax_spec(4096);
  FusedProgram p = derive_fused(s);
  TensorStore a, b;
  a.define("x", 4096, 0, random_vec(4096, 21, -2, 2));
  b.define("x", 4096, 0, random_vec(4096, 21, -2, 2));
  long long f16 = run_fused(p, TreeConfig{{4096, 256, 1}}, 1, a)
                      .peak_aux_slots.at(1);
  long long f256 = run_fused(p, TreeConfig{{4096, 16, 1}}, 1, b)
                       .peak_aux_slots.at(1);
  CHECK(f256 > f16);
}

TEST_CASE("compare_reports flags corruption with a location") {
  CascadeSpec s = softmax_spec(8);
  TensorStore a, b;
  a.define("x", 8, 0, random_vec(8, 1, -1, 1));
  b.define("x", 8, 0, random_vec(8, 1, -1, 1));
  TreeConfig cfg{{8, 1}};
  ExecReport u = run_unfused(s, cfg, a);
  ExecReport v = run_unfused(s, cfg, b);
  DiffReport same = compare_reports(u, v, 1e-12);
  CHECK(same.pass);
  CHECK(same.max_rel_err == 0.0);
  v.outputs[1].v[0] += 0.5;
  DiffReport diff = compare_reports(u, v, 1e-6);
  CHECK_FALSE(diff.pass);
  CHECK(diff.worst == "d2[0]");
}
