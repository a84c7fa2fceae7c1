// Acceptance gate: one criterion per numbered check, one printed line each.
// Exits nonzero if any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "redfuse/scalar_ir.hpp"
#include "redfuse/tile_ir.hpp"
#include "redfuse/workloads.hpp"

using namespace redfuse;

namespace {

int failures = 0;
std::vector<std::string> notes;

void note(const std::string& s) { notes.push_back(s); }

void report(int idx, const std::string& what, bool pass) {
  std::printf("criterion %2d: %-46s %s\n", idx, what.c_str(),
              pass ? "pass" : "FAIL");
  if (!pass) {
    ++failures;
    for (const auto& n : notes) std::printf("              %s\n", n.c_str());
  }
  notes.clear();
}

bool rel_ok(double a, double b, double tol) {
  double scale = 1.0 + std::fmax(std::fabs(a), std::fabs(b));
  return std::fabs(a - b) <= tol * scale;
}

std::vector<TreeConfig> criterion_trees(long long l0) {
  return {TreeConfig{{l0, 1}}, TreeConfig{{l0, l0 / 8, 1}},
          TreeConfig{{l0, l0 / 8, l0 / 32, 1}}};
}

// ---- 1. oracle equivalence --------------------------------------------------

bool crit_oracle_suite() {
  auto t0 = std::chrono::steady_clock::now();
  bool ok = true;
  for (const auto& name : builtin_names()) {
    Workload w = builtin(name);
    FusedProgram prog = derive_fused(w.spec);
    long long l0 = w.spec.axis_len();
    for (std::uint64_t seed = 100; seed < 105; ++seed) {
      ExecReport want = w.oracle(w.generate(seed));
      for (const TreeConfig& cfg : criterion_trees(l0)) {
        for (int k = 1; k <= cfg.depth(); ++k) {
          TensorStore st = w.generate(seed);
          DiffReport d = compare_reports(run_fused(prog, cfg, k, st), want,
                                         1e-6);
          if (!d.pass) {
            note(name + " fused@" + std::to_string(k) + ": " + d.worst);
            ok = false;
          }
        }
        {
          TensorStore st = w.generate(seed);
          DiffReport d =
              compare_reports(run_incremental(prog, cfg, st), want, 1e-6);
          if (!d.pass) {
            note(name + " incremental: " + d.worst);
            ok = false;
          }
        }
        for (long long s : {2, 4, 8}) {
          TensorStore st = w.generate(seed);
          DiffReport d = compare_reports(run_multisegment(prog, cfg, s, st),
                                         want, 1e-6);
          if (!d.pass) {
            note(name + " multi:" + std::to_string(s) + ": " + d.worst);
            ok = false;
          }
        }
      }
    }
  }
  double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                              t0)
                    .count();
  if (secs >= 60.0) {
    note("suite took " + std::to_string(secs) + "s");
    ok = false;
  }
  return ok;
}

// ---- 2/3. derived rules vs hand-coded closed forms --------------------------

// Evaluates one derived streaming update: max folds directly, sums scale by
// the derived correction and add the body term at the new dependency values.
struct DerivedStepper {
  FusedProgram prog;

  double step_max(int id, double prev, Env& env) const {
    double v = std::fmax(prev, evaluate(prog.exec_spec.reduction(id).body,
                                        env));
    env["d" + std::to_string(id)] = v;
    env["d" + std::to_string(id) + "'"] = prev;
    return v;
  }
  double step_sum(int id, double prev, const Env& env) const {
    const Decomposition& d = prog.decomp(id);
    double corr = d.corr ? evaluate(d.corr, env) : 1.0;
    return prev * corr + evaluate(prog.exec_spec.reduction(id).body, env);
  }
  // Partial-state merge: the incoming partial is rescaled by the correction
  // taken from its own dependency snapshot to the merged one.
  double merge_sum(int id, double mine, double theirs, Env env,
                   const Env& their_deps) const {
    const Decomposition& d = prog.decomp(id);
    double mine_scaled = mine * (d.corr ? evaluate(d.corr, env) : 1.0);
    for (const auto& [k, v] : their_deps) env[k] = v;
    double theirs_scaled = theirs * (d.corr ? evaluate(d.corr, env) : 1.0);
    return mine_scaled + theirs_scaled;
  }
};

bool crit_attention_forms() {
  DerivedStepper eng{derive_fused(builtin("attention").spec)};
  std::mt19937_64 rng(20240601);
  std::uniform_real_distribution<double> uni(-2.0, 2.0);
  std::uniform_real_distribution<double> pos(0.2, 3.0);
  bool ok = true;
  const int lanes = 4;
  for (int it = 0; it < 1000 && ok; ++it) {
    double m_prev = uni(rng), t_prev = pos(rng), p = uni(rng);
    std::vector<double> o_prev(lanes), v(lanes);
    for (auto& x : o_prev) x = uni(rng);
    for (auto& x : v) x = uni(rng);

    // hand-coded streaming form
    double m = std::fmax(m_prev, p);
    double t = t_prev * std::exp(m_prev - m) + std::exp(p - m);
    std::vector<double> o(lanes);
    for (int f = 0; f < lanes; ++f)
      o[f] = o_prev[f] * std::exp(m_prev - m) * t_prev / t +
             std::exp(p - m) / t * v[f];

    Env env{{"P", p}};
    double m2 = eng.step_max(1, m_prev, env);
    env["d2'"] = t_prev;
    double t2 = eng.step_sum(2, t_prev, env);
    env["d2"] = t2;
    ok = ok && rel_ok(m, m2, 1e-10) && rel_ok(t, t2, 1e-10);
    for (int f = 0; f < lanes && ok; ++f) {
      env["V"] = v[f];
      ok = rel_ok(o[f], eng.step_sum(3, o_prev[f], env), 1e-10);
    }
    if (!ok) note("element update diverged at state " + std::to_string(it));
  }
  for (int it = 0; it < 1000 && ok; ++it) {
    double ma = uni(rng), mb = uni(rng), ta = pos(rng), tb = pos(rng);
    double oa = uni(rng), ob = uni(rng);
    double m = std::fmax(ma, mb);
    double t = ta * std::exp(ma - m) + tb * std::exp(mb - m);
    double o = oa * std::exp(ma - m) * ta / t + ob * std::exp(mb - m) * tb / t;

    Env env{{"d1'", ma}, {"d1", m}};
    Env theirs{{"d1'", mb}};
    double t2 = eng.merge_sum(2, ta, tb, env, theirs);
    env["d2'"] = ta;
    env["d2"] = t2;
    theirs["d2'"] = tb;
    double o2 = eng.merge_sum(3, oa, ob, env, theirs);
    ok = rel_ok(t, t2, 1e-10) && rel_ok(o, o2, 1e-10);
    if (!ok) note("merge update diverged at state " + std::to_string(it));
  }
  return ok;
}

bool crit_quant_forms() {
  DerivedStepper eng{derive_fused(builtin("quant_gemm").spec)};
  std::mt19937_64 rng(20240602);
  std::uniform_real_distribution<double> uni(-2.0, 2.0);
  std::uniform_real_distribution<double> pos(0.2, 2.0);
  bool ok = true;
  const int lanes = 3;
  for (int it = 0; it < 1000 && ok; ++it) {
    double m_prev = pos(rng), a = uni(rng);
    std::vector<double> c_prev(lanes), w(lanes);
    for (auto& x : c_prev) x = uni(rng);
    for (auto& x : w) x = uni(rng);

    double m = std::fmax(m_prev, std::fabs(a));
    std::vector<double> c(lanes);
    for (int f = 0; f < lanes; ++f)
      c[f] = c_prev[f] * (m_prev / m) + 448.0 * a / m * w[f];

    Env env{{"a", a}};
    double m2 = eng.step_max(1, m_prev, env);
    ok = rel_ok(m, m2, 1e-10);
    for (int f = 0; f < lanes && ok; ++f) {
      env["w"] = w[f];
      ok = rel_ok(c[f], eng.step_sum(2, c_prev[f], env), 1e-10);
    }
    if (!ok) note("element update diverged at state " + std::to_string(it));
  }
  for (int it = 0; it < 1000 && ok; ++it) {
    double ma = pos(rng), mb = pos(rng), ca = uni(rng), cb = uni(rng);
    double m = std::fmax(ma, mb);
    double c = ca * (ma / m) + cb * (mb / m);
    Env env{{"d1'", ma}, {"d1", m}};
    ok = rel_ok(c, eng.merge_sum(2, ca, cb, env, {{"d1'", mb}}), 1e-10);
    if (!ok) note("merge update diverged at state " + std::to_string(it));
  }
  return ok;
}

// ---- 4. decomposability decisions -------------------------------------------

bool crit_decisions() {
  CascadeSpec counter = parse_cascade(
      "cascade nf\ninput x len 8\n"
      "reduce 1 op sum\n    x[l]\n"
      "reduce 2 op prod\n    x[l] + d1\n");
  Expr f = input_var("x") + dep_var(1);
  for (int rerun = 0; rerun < 100; ++rerun) {
    ProbeConfig pc;
    pc.seed = 0xace0ull + static_cast<std::uint64_t>(rerun) * 7919;
    for (const auto& name : builtin_names()) {
      try {
        derive_fused(builtin(name).spec, pc);
      } catch (const std::exception& e) {
        note(name + " rejected at rerun " + std::to_string(rerun) + ": " +
             e.what());
        return false;
      }
    }
    try {
      Env fp = select_fixed_point(f, MonoidOp::Mul, pc.seed, pc);
      if (check_decomposable(f, MonoidOp::Mul, fp, pc)) {
        note("x + d accepted under mul at rerun " + std::to_string(rerun));
        return false;
      }
    } catch (const NoValidFixedPoint&) {
      // also a rejection
    }
    try {
      derive_fused(counter, pc);
      note("counterexample cascade fused at rerun " + std::to_string(rerun));
      return false;
    } catch (const NotFusable& e) {
      if (e.id != 2) {
        note("counterexample blamed reduction " + std::to_string(e.id));
        return false;
      }
    }
  }
  return true;
}

// ---- 5. invertibility repair ------------------------------------------------

bool crit_repair() {
  CascadeSpec s = parse_cascade(
      "cascade repair\ninput x len 8\n"
      "reduce 1 op sum\n    x[l]\n"
      "reduce 2 op sum\n    x[l] * d1\n");
  FusedProgram prog = derive_fused(s);
  TreeConfig cfg{{8, 4, 1}};
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> uni(-1.0, 1.0);
  bool ok = true;
  for (int it = 0; it < 50 && ok; ++it) {
    std::vector<double> x(8);
    for (auto& v : x) v = uni(rng);
    // force the running sum to hit exact zero mid-stream
    x[4] = -(x[0] + x[1] + x[2] + x[3]);
    double d1 = 0;
    for (double v : x) d1 += v;
    double d2 = 0;
    for (double v : x) d2 += v * d1;  // final dependency value throughout

    for (int mode = 0; mode < 3 && ok; ++mode) {
      TensorStore st;
      st.define("x", 8, 0, x);
      ExecReport r = mode == 0   ? run_incremental(prog, cfg, st)
                     : mode == 1 ? run_fused(prog, cfg, 2, st)
                                 : run_multisegment(prog, cfg, 2, st);
      ok = rel_ok(r.outputs[0].v[0], d1, 1e-6) &&
           rel_ok(r.outputs[1].v[0], d2, 1e-6);
      if (!ok)
        note("mode " + std::to_string(mode) + " diverged at input " +
             std::to_string(it));
    }
  }
  return ok;
}

// ---- 6. per-element input loads ---------------------------------------------

bool crit_input_loads() {
  bool ok = true;
  for (const auto& name : builtin_names()) {
    Workload w = builtin(name);
    FusedProgram prog = derive_fused(w.spec);
    TreeConfig flat{{w.spec.axis_len(), 1}};
    TensorStore a = w.generate(1);
    ExecReport unf = run_unfused(w.spec, flat, a);
    TensorStore b = w.generate(1);
    ExecReport inc = run_incremental(prog, flat, b);
    for (const auto& in : w.spec.inputs) {
      long long elems = in.len * (in.free_len > 0 ? in.free_len : 1);
      long long uses = 0;  // reductions whose body reads this array
      for (const auto& r : w.spec.reductions)
        if (free_vars(r.body).count(in.name)) ++uses;
      if (unf.input_loads.at(in.name) != elems * uses) {
        note(name + "." + in.name + " unfused loads " +
             std::to_string(unf.input_loads.at(in.name)) + " want " +
             std::to_string(elems * uses));
        ok = false;
      }
      if (inc.input_loads.at(in.name) != elems) {
        note(name + "." + in.name + " fused loads " +
             std::to_string(inc.input_loads.at(in.name)) + " want " +
             std::to_string(elems));
        ok = false;
      }
    }
  }
  return ok;
}

// ---- 7. dependency-root accesses by fuse level ------------------------------

bool crit_dep_roots() {
  Workload w = make_safe_softmax(4096);
  FusedProgram prog = derive_fused(w.spec);
  TreeConfig cfg{{4096, 128, 32, 1}};
  bool ok = true;
  {
    TensorStore st = w.generate(2);
    long long got = run_unfused(w.spec, cfg, st).dep_root_loads.at(1);
    if (got != 4096) {
      note("unfused d1 roots " + std::to_string(got));
      ok = false;
    }
  }
  for (int k = 1; k <= 3; ++k) {
    TensorStore st = w.generate(2);
    long long got = run_fused(prog, cfg, k, st).dep_root_loads.at(1);
    long long want = cfg.levels[static_cast<std::size_t>(k)];
    if (got != want) {
      note("fused@" + std::to_string(k) + " d1 roots " + std::to_string(got) +
           " want " + std::to_string(want));
      ok = false;
    }
  }
  return ok;
}

// ---- 8. O(1) incremental state ----------------------------------------------

bool crit_aux_state() {
  Workload w = make_attention(4096, 64);
  FusedProgram prog = derive_fused(w.spec);
  std::vector<long long> segs = {16, 256, 4096};
  std::vector<long long> inc, fus;
  for (long long seg : segs) {
    TreeConfig cfg{{4096, 4096 / seg, 1}};
    TensorStore a = w.generate(3);
    inc.push_back(run_incremental(prog, cfg, a).peak_aux_slots.at(1));
    TensorStore b = w.generate(3);
    fus.push_back(run_fused(prog, cfg, 1, b).peak_aux_slots.at(1));
  }
  bool ok = true;
  if (inc[0] != inc[1] || inc[1] != inc[2]) {
    note("incremental slots vary: " + std::to_string(inc[0]) + " " +
         std::to_string(inc[1]) + " " + std::to_string(inc[2]));
    ok = false;
  }
  // buffered execution: slots must be an exact linear function of the
  // segment length
  long long slope1 = (fus[1] - fus[0]) / (segs[1] - segs[0]);
  long long slope2 = (fus[2] - fus[1]) / (segs[2] - segs[1]);
  if (!(fus[0] < fus[1] && fus[1] < fus[2] && slope1 > 0 && slope1 == slope2 &&
        fus[1] - fus[0] == slope1 * (segs[1] - segs[0]))) {
    note("buffered slots not linear: " + std::to_string(fus[0]) + " " +
         std::to_string(fus[1]) + " " + std::to_string(fus[2]));
    ok = false;
  }
  return ok;
}

// ---- 9. IR goldens and tile structure ---------------------------------------

std::string slurp(const std::string& path) {
  std::ifstream in(path);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

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

bool crit_ir_goldens() {
  std::string dir = REDFUSE_GOLDEN_DIR;
  Workload w = make_attention(512, 64);
  FusedProgram p = derive_fused(w.spec);
  ScalarIR single = emit_scalar_ir(p, {.rows = 512});
  ScalarIR multi = emit_scalar_ir(p, {.segments = 2, .rows = 512});
  bool ok = true;
  auto match = [&](const std::string& got, const std::string& file) {
    if (got != slurp(dir + "/" + file)) {
      note(file + " drifted");
      ok = false;
    }
  };
  match(render(single), "flash_attention_scalar.txt");
  match(render(multi), "flash_decoding_scalar.txt");
  TileIR ts = tensorize(single);
  TileIR tm = tensorize(multi);
  match(render(ts), "flash_attention_tile.txt");
  match(render(tm), "flash_decoding_tile.txt");
  for (const TileIR* t : {&ts, &tm}) {
    try {
      if (render(parse_tile_ir(render(*t))) != render(*t)) {
        note("tile round trip drifted");
        ok = false;
      }
    } catch (const IRParseError& e) {
      note(std::string("tile grammar rejection: ") + e.what());
      ok = false;
    }
    if (!validate(*t).empty()) {
      note("tile validation problems");
      ok = false;
    }
  }
  std::vector<TKind> got;
  kinds_of(ts.stmts, got);
  std::vector<TKind> want = {
      TKind::Copy,
      TKind::Copy,     TKind::Copy,     TKind::Gemm,
      TKind::Copy,     TKind::Reduce,   TKind::Copy,
      TKind::Parallel, TKind::Parallel, TKind::Reduce,
      TKind::Parallel, TKind::Parallel, TKind::Gemm,
      TKind::Copy};
  if (got != want) {
    note("single-segment tile kind sequence drifted");
    ok = false;
  }
  std::string mt = render(tm);
  int launches = 0;
  for (const auto& s : tm.stmts)
    if (s->kind == TKind::Launch && s->thread == "blockIdx.x") ++launches;
  if (launches != 2 || mt.find("# partial segment") == std::string::npos ||
      mt.find("# combine") == std::string::npos ||
      mt.find("psum_corr") == std::string::npos) {
    note("split tile structure drifted");
    ok = false;
  }
  return ok;
}

// ---- 10. scalar IR semantics ------------------------------------------------

bool crit_scalar_semantics() {
  bool ok = true;
  for (const auto& name : builtin_names()) {
    Workload w = builtin(name);
    FusedProgram prog = derive_fused(w.spec);
    TreeConfig flat{{w.spec.axis_len(), 1}};
    for (std::uint64_t seed : {11ull, 12ull}) {
      TensorStore st = w.generate(seed);
      ScalarMachine m = machine_from_store(st);
      run_scalar_ir(emit_scalar_ir(prog), m);
      ExecReport got;
      got.strategy = "scalar-ir";
      got.outputs = scalar_outputs(prog, m);
      TensorStore st2 = w.generate(seed);
      DiffReport d =
          compare_reports(got, run_incremental(prog, flat, st2), 1e-9);
      if (!d.pass) {
        note(name + " " + d.worst + " err " + std::to_string(d.max_rel_err));
        ok = false;
      }
    }
  }
  return ok;
}

}  // namespace

int main() {
  report(1, "oracle equivalence suite", crit_oracle_suite());
  report(2, "attention closed forms emerge", crit_attention_forms());
  report(3, "quant+gemm closed forms emerge", crit_quant_forms());
  report(4, "decomposability decisions, 100 reruns", crit_decisions());
  report(5, "non-invertibility repair", crit_repair());
  report(6, "input loads: I_x unfused, 1 fused", crit_input_loads());
  report(7, "dependency-root loads equal L_k", crit_dep_roots());
  report(8, "O(1) incremental auxiliary state", crit_aux_state());
  report(9, "IR goldens and tile structure", crit_ir_goldens());
  report(10, "scalar IR semantic preservation", crit_scalar_semantics());
  if (failures) {
    std::printf("%d criterion(s) failed\n", failures);
    return 1;
  }
  std::printf("all criteria passed\n");
  return 0;
}
