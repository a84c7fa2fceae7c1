#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "redfuse/workloads.hpp"

using namespace redfuse;

#ifndef REDFUSE_DATA_DIR
#define REDFUSE_DATA_DIR "data"
#endif

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  REQUIRE(in.good());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

double fin_value(const std::vector<std::pair<std::string, double>>& fin,
                 const std::string& name) {
  for (const auto& [k, v] : fin)
    if (k == name) return v;
  FAIL("missing final value ", name);
  return 0;
}

}  // namespace

TEST_CASE("builtin registry") {
  CHECK(builtin_names().size() == 7);
  for (const auto& n : builtin_names()) {
    Workload w = builtin(n);
    CHECK(w.name == n);
    CHECK(validate(w.spec).empty());
  }
  CHECK_THROWS_AS(builtin("nope"), UnknownWorkload);
}

TEST_CASE("bundled cascade files parse to the builtin specs") {
  for (const auto& n : builtin_names()) {
    CascadeSpec from_file =
        parse_cascade(slurp(std::string(REDFUSE_DATA_DIR) + "/" + n + ".cascade"));
    CHECK(from_file == builtin(n).spec);
  }
}

TEST_CASE("variance oracle on [1,2,3]") {
  Workload w = make_variance(3);
  TensorStore st;
  st.define("x", 3, 0, {1.0, 2.0, 3.0});
  ExecReport rep = oracle_eval(w, st);
  auto fin = finalized(w, rep);
  CHECK(fin_value(fin, "mean") == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(fin_value(fin, "variance") ==
        doctest::Approx(2.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("softmax oracle on a constant vector") {
  Workload w = make_safe_softmax(8);
  TensorStore st;
  st.define("x", 8, 0, std::vector<double>(8, 0.75));
  ExecReport rep = oracle_eval(w, st);
  CHECK(rep.outputs[0].v[0] == 0.75);
  CHECK(rep.outputs[1].v[0] == doctest::Approx(8.0).epsilon(1e-12));
}

TEST_CASE("moe oracle top-1 is the argmax") {
  Workload w = make_moe_routing(6, 1);
  TensorStore st;
  st.define("s", 6, 0, {0.1, 0.9, -0.3, 2.0, 1.5, 0.4});
  ExecReport rep = oracle_eval(w, st);
  REQUIRE(rep.outputs[2].topk.size() == 1);
  CHECK(rep.outputs[2].topk[0].second == 4);
  CHECK(rep.outputs[2].topk[0].first == 2.0);
  double t = 0;
  for (double x : {0.1, 0.9, -0.3, 2.0, 1.5, 0.4}) t += std::exp(x - 2.0);
  auto fin = finalized(w, rep);
  CHECK(fin_value(fin, "gate1") == doctest::Approx(1.0 / t).epsilon(1e-12));
}

TEST_CASE("oracle rejects wrong shapes") {
  Workload w = make_variance(4);
  TensorStore st;
  st.define("x", 3, 0, {1.0, 2.0, 3.0});
  CHECK_THROWS_AS(oracle_eval(w, st), ShapeMismatch);
}

TEST_CASE("every builtin derives a fused program") {
  for (const auto& n : builtin_names()) {
    Workload w = builtin(n);
    FusedProgram p = derive_fused(w.spec);
    CHECK(p.decomps.size() == w.spec.reductions.size());
  }
}

TEST_CASE("all execution modes match the oracle over seeds") {
  for (const auto& n : builtin_names()) {
    CAPTURE(n);
    Workload w = builtin(n);
    FusedProgram prog = derive_fused(w.spec);
    auto cfgs = default_tree_configs(w.spec.axis_len());
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      TensorStore gen = w.generate(seed);
      ExecReport want = oracle_eval(w, gen);
      for (const auto& cfg : cfgs) {
        CAPTURE(cfg.levels[0]);
        CAPTURE(cfg.depth());
        {
          TensorStore st = w.generate(seed);
          DiffReport d = compare_reports(run_unfused(w.spec, cfg, st), want, 1e-6);
          CHECK_MESSAGE(d.pass, "unfused ", d.worst, " err ", d.max_rel_err);
        }
        for (int k : {1, cfg.depth()}) {
          TensorStore st = w.generate(seed);
          DiffReport d =
              compare_reports(run_fused(prog, cfg, k, st), want, 1e-6);
          CHECK_MESSAGE(d.pass, "fused@", k, " ", d.worst, " err ",
                        d.max_rel_err);
        }
        {
          TensorStore st = w.generate(seed);
          DiffReport d =
              compare_reports(run_incremental(prog, cfg, st), want, 1e-6);
          CHECK_MESSAGE(d.pass, "incremental ", d.worst, " err ",
                        d.max_rel_err);
        }
        {
          TensorStore st = w.generate(seed);
          DiffReport d =
              compare_reports(run_multisegment(prog, cfg, 4, st), want, 1e-6);
          CHECK_MESSAGE(d.pass, "multiseg ", d.worst, " err ", d.max_rel_err);
        }
      }
    }
  }
}

TEST_CASE("post-scale hooks commute with fusion") {
  // Fused finals must equal the textbook normalized quantities computed
  // with explicit mean subtraction, not merely the raw sums.
  Workload w = builtin("variance");
  FusedProgram prog = derive_fused(w.spec);
  long long n = w.spec.axis_len();
  for (std::uint64_t seed : {11u, 12u, 13u}) {
    TensorStore st = w.generate(seed);
    const auto x = st.array("x").data;
    double m = 0;
    for (double v : x) m += v;
    m /= static_cast<double>(n);
    double var = 0;
    for (double v : x) var += (v - m) * (v - m);
    var /= static_cast<double>(n);
    auto fin = finalized(w, run_incremental(prog, {{n, n / 16, 1}}, st));
    CHECK(fin_value(fin, "mean") == doctest::Approx(m).epsilon(1e-9));
    CHECK(fin_value(fin, "variance") == doctest::Approx(var).epsilon(1e-9));
  }

  Workload wi = builtin("moment_of_inertia");
  FusedProgram pi = derive_fused(wi.spec);
  long long np = wi.spec.axis_len();
  for (std::uint64_t seed : {21u, 22u, 23u}) {
    TensorStore st = wi.generate(seed);
    const auto mass = st.array("mass").data;
    const auto pos = st.array("pos").data;
    double total = 0;
    for (double v : mass) total += v;
    double c[3] = {0, 0, 0};
    for (long long l = 0; l < np; ++l)
      for (int f = 0; f < 3; ++f) c[f] += mass[l] * pos[l * 3 + f];
    for (int f = 0; f < 3; ++f) c[f] /= total;
    double inertia = 0;
    for (long long l = 0; l < np; ++l) {
      double r2 = 0;
      for (int f = 0; f < 3; ++f) {
        double d = pos[l * 3 + f] - c[f];
        r2 += d * d;
      }
      inertia += mass[l] * r2;
    }
    auto fin = finalized(wi, run_incremental(pi, {{np, np / 16, 1}}, st));
    CHECK(fin_value(fin, "cx") == doctest::Approx(c[0]).epsilon(1e-9));
    CHECK(fin_value(fin, "cy") == doctest::Approx(c[1]).epsilon(1e-9));
    CHECK(fin_value(fin, "cz") == doctest::Approx(c[2]).epsilon(1e-9));
    CHECK(fin_value(fin, "inertia") ==
          doctest::Approx(inertia).epsilon(1e-9));
  }
}

TEST_CASE("moe segment-wise selection equals global selection") {
  Workload w = builtin("moe_routing");
  FusedProgram prog = derive_fused(w.spec);
  for (std::uint64_t seed = 101; seed <= 105; ++seed) {
    TensorStore st = w.generate(seed);
    ExecReport want = oracle_eval(w, st);
    TensorStore st2 = w.generate(seed);
    ExecReport got = run_fused(prog, {{128, 16, 4, 1}}, 3, st2);
    std::set<long long> a, b;
    for (auto& [v, i] : want.outputs[2].topk) a.insert(i);
    for (auto& [v, i] : got.outputs[2].topk) b.insert(i);
    CHECK(a == b);
  }
  // Ties break toward the lowest index in both paths.
  Workload wt = make_moe_routing(8, 2);
  FusedProgram pt = derive_fused(wt.spec);
  TensorStore st;
  st.define("s", 8, 0, {1.0, 3.0, 3.0, 0.0, 3.0, -1.0, 2.0, 3.0});
  ExecReport want = oracle_eval(wt, st);
  TensorStore st2;
  st2.define("s", 8, 0, {1.0, 3.0, 3.0, 0.0, 3.0, -1.0, 2.0, 3.0});
  ExecReport got = run_incremental(pt, {{8, 4, 1}}, st2);
  REQUIRE(want.outputs[2].topk.size() == 2);
  REQUIRE(got.outputs[2].topk.size() == 2);
  CHECK(want.outputs[2].topk[0].second == 2);
  CHECK(want.outputs[2].topk[1].second == 3);
  CHECK(got.outputs[2].topk[0].second == 2);
  CHECK(got.outputs[2].topk[1].second == 3);
}
