#include "redfuse/simulator.hpp"

#include <algorithm>
#include <cmath>

namespace redfuse {

void TensorStore::define(const std::string& name, long long len,
                         long long free_len, std::vector<double> data) {
  long long want = free_len > 0 ? len * free_len : len;
  if (static_cast<long long>(data.size()) != want)
    throw ShapeMismatch(name + ": got " + std::to_string(data.size()) +
                        " values, want " + std::to_string(want));
  Array a;
  a.data = std::move(data);
  a.len = len;
  a.free_len = free_len;
  a.stores = want;
  arrays_[name] = std::move(a);
}

const TensorStore::Array& TensorStore::array(const std::string& name) const {
  auto it = arrays_.find(name);
  if (it == arrays_.end()) throw ShapeMismatch("no array named " + name);
  return it->second;
}

namespace {

double peek(const TensorStore::Array& a, long long l, long long f) {
  if (a.free_len > 0) return a.data[static_cast<std::size_t>((l - 1) * a.free_len + (f - 1))];
  return a.data[static_cast<std::size_t>(l - 1)];
}

}  // namespace

double TensorStore::load(const std::string& name, long long l, long long f) {
  auto it = arrays_.find(name);
  if (it == arrays_.end()) throw ShapeMismatch("no array named " + name);
  ++it->second.loads;
  return peek(it->second, l, f);
}

long long TensorStore::loads_of(const std::string& name) const {
  return array(name).loads;
}

std::vector<std::string> TensorStore::names() const {
  std::vector<std::string> out;
  for (const auto& [name, a] : arrays_) out.push_back(name);
  return out;
}

namespace {

// ---- state representation ---------------------------------------------------

struct LaneState {
  std::vector<double> v;     // accumulators; log2 magnitudes for prod
  std::vector<double> sign;  // prod sign channel
  std::vector<char> touched;
  std::vector<std::pair<double, long long>> tk;
};

using StateVec = std::vector<LaneState>;  // one per reduction, id order

LaneState make_state(const ReductionSpec& r) {
  LaneState s;
  std::size_t lanes = static_cast<std::size_t>(r.free_len);
  if (r.op == ReduceOp::TopK) lanes = 1;
  double ident = r.op == ReduceOp::TopK
                     ? 0.0
                     : identity_of(reduce_monoid(r.op));
  s.v.assign(lanes, ident);
  s.sign.assign(lanes, 1.0);
  s.touched.assign(lanes, 0);
  return s;
}

void topk_merge(std::vector<std::pair<double, long long>>& tk,
                const std::vector<std::pair<double, long long>>& add, int k) {
  tk.insert(tk.end(), add.begin(), add.end());
  std::sort(tk.begin(), tk.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  if (static_cast<int>(tk.size()) > k) tk.resize(static_cast<std::size_t>(k));
}

void ingest(const ReductionSpec& r, LaneState& s, std::size_t lane,
            double term, long long l) {
  if (r.op == ReduceOp::TopK) {
    topk_merge(s.tk, {{term, l}}, r.topk);
  } else {
    double& acc = s.v[lane];
    switch (r.op) {
      case ReduceOp::Sum:
        acc += term;
        break;
      case ReduceOp::Prod:
        acc *= term;
        break;
      case ReduceOp::Max:
        acc = std::fmax(acc, term);
        break;
      case ReduceOp::Min:
        acc = std::fmin(acc, term);
        break;
      default:
        break;
    }
  }
  s.touched[lane] = 1;
}

// Plain (+)-fold of a child partial into a parent, no correction.
void merge_plain(const ReductionSpec& r, LaneState& p, const LaneState& c,
                 bool prod_transformed) {
  if (r.op == ReduceOp::TopK) {
    topk_merge(p.tk, c.tk, r.topk);
    p.touched[0] |= c.touched[0];
    return;
  }
  for (std::size_t lane = 0; lane < p.v.size(); ++lane) {
    if (!c.touched[lane]) continue;
    switch (r.op) {
      case ReduceOp::Sum:
        p.v[lane] += c.v[lane];
        break;
      case ReduceOp::Prod:
        p.v[lane] *= c.v[lane];
        break;
      case ReduceOp::Max:
        p.v[lane] = std::fmax(p.v[lane], c.v[lane]);
        break;
      case ReduceOp::Min:
        p.v[lane] = std::fmin(p.v[lane], c.v[lane]);
        break;
      default:
        break;
    }
    if (prod_transformed) p.sign[lane] *= c.sign[lane];
    p.touched[lane] = 1;
  }
}

double exposed(const LaneState& s, std::size_t lane, bool prod_transformed) {
  if (prod_transformed) return s.sign[lane] * std::exp2(s.v[lane]);
  return s.v[lane];
}

// ---- shared execution context ----------------------------------------------

struct InputRef {
  std::string name;
  bool has_free = false;
};

struct BodyRefs {
  std::vector<InputRef> inputs;
  std::vector<int> deps;
};

void collect_refs(const Expr& e, BodyRefs& out) {
  if (e->kind == ExprKind::Input) {
    for (const auto& r : out.inputs)
      if (r.name == e->name && r.has_free == e->has_free) goto deps;
    out.inputs.push_back({e->name, e->has_free});
  }
deps:
  if (e->kind == ExprKind::Dep) {
    for (int d : out.deps)
      if (d == e->dep) return;
    out.deps.push_back(e->dep);
  }
  if (e->a) collect_refs(e->a, out);
  if (e->b) collect_refs(e->b, out);
}

struct Ctx {
  const CascadeSpec& spec;          // executable spec (prod transformed)
  const FusedProgram* prog;         // null in the unfused path
  TensorStore& store;
  ExecReport& rep;
  std::vector<BodyRefs> refs;       // per reduction
  std::vector<Expr> sign_body;      // original body for prod sign channel
  std::vector<InputRef> all_inputs; // union across reductions
  long long arity = 0;              // scalar state slots across reductions

  Ctx(const CascadeSpec& s, const FusedProgram* p, TensorStore& st,
      ExecReport& r)
      : spec(s), prog(p), store(st), rep(r) {
    for (const auto& red : spec.reductions) {
      BodyRefs b;
      collect_refs(red.body, b);
      for (const auto& in : b.inputs) {
        bool seen = false;
        for (const auto& u : all_inputs)
          if (u.name == in.name) seen = true;
        if (!seen) all_inputs.push_back(in);
      }
      refs.push_back(std::move(b));
      Expr sb;
      if (p && p->decomp(red.id).prod_transformed)
        sb = p->spec.reduction(red.id).body;
      sign_body.push_back(sb);
      arity += red.op == ReduceOp::TopK ? 2LL * red.topk : red.free_len;
    }
    for (const auto& in : spec.inputs) rep.input_loads[in.name] = 0;
  }

  long long lanes_of(const InputRef& r) const {
    return r.has_free ? store.array(r.name).free_len : 1;
  }

  long long input_lanes_per_element() const {
    long long n = 0;
    for (const auto& r : all_inputs) n += lanes_of(r);
    return n;
  }

  // Exposed dependency environment from a state vector.
  Env dep_env(const StateVec& sv) const {
    Env env;
    for (std::size_t i = 0; i < sv.size(); ++i) {
      const auto& r = spec.reductions[i];
      if (r.op == ReduceOp::TopK || r.free_len != 1) continue;
      bool pt = prog && prog->decomp(r.id).prod_transformed;
      env["d" + std::to_string(r.id)] = exposed(sv[i], 0, pt);
    }
    return env;
  }
};

void check_shapes(const CascadeSpec& spec, const TreeConfig& cfg,
                  TensorStore& store) {
  auto diags = validate_tree(cfg, spec.axis_len());
  if (!diags.empty())
    throw ShapeMismatch(diags.front().kind + ": " + diags.front().message);
  for (const auto& in : spec.inputs) {
    const auto& a = store.array(in.name);
    if (a.len != in.len || a.free_len != in.free_len)
      throw ShapeMismatch(in.name + ": store shape does not match the spec");
  }
}

// Evaluates one reduction body (or substitute expression) at element l over
// all free lanes, reading values without counting; ingest into state.
void eval_element(const Ctx& ctx, std::size_t idx, const Expr& term_expr,
                  long long l, const Env& dep_env, LaneState& state,
                  bool prod_sign) {
  const auto& r = ctx.spec.reductions[idx];
  Env env = dep_env;
  for (const auto& in : ctx.refs[idx].inputs)
    if (!in.has_free) env[in.name] = peek(ctx.store.array(in.name), l, 0);
  long long lanes = r.op == ReduceOp::TopK ? 1 : r.free_len;
  for (long long f = 1; f <= lanes; ++f) {
    for (const auto& in : ctx.refs[idx].inputs)
      if (in.has_free) env[in.name] = peek(ctx.store.array(in.name), l, f);
    if (r.free_len > 1) env["f"] = static_cast<double>(f);
    double t = evaluate(term_expr, env);
    std::size_t lane = static_cast<std::size_t>(f - 1);
    ingest(r, state, lane, t, l);
    if (prod_sign) {
      double s = evaluate(ctx.sign_body[idx], env);
      state.sign[lane] *= (s > 0) - (s < 0);
    }
  }
}

// ---- correction factors -----------------------------------------------------

// The factor moving an accumulator scaled by H'(from) to one scaled by
// H(to): c = H_target(to) (x) inv(H'(from)). guard_target selects H' (the
// repaired form) as the target; otherwise the true H is applied and its
// evaluation faults propagate. Uses the simplified correction expression
// (single exp call) whenever both ends are invertible.
double retarget_factor(const Ctx& ctx, std::size_t idx, const Env& from_env,
                       const Env& to_env, bool guard_target) {
  const Decomposition& d = ctx.prog->decomps[idx];
  double e = identity_of(d.combine);

  double hf = e;
  bool from_ok = false;
  try {
    hf = evaluate(d.H, from_env);
    from_ok = is_invertible(d.combine, hf) && !std::isnan(hf);
  } catch (const DomainError&) {
  }

  double ht = e;
  bool to_ok = false;
  if (guard_target) {
    try {
      ht = evaluate(d.H, to_env);
      to_ok = is_invertible(d.combine, ht) && !std::isnan(ht);
      if (!to_ok) ht = e;
    } catch (const DomainError&) {
      ht = e;
    }
  } else {
    ht = evaluate(d.H, to_env);  // true H: faults propagate to the caller
    to_ok = true;
  }

  if (from_ok && to_ok && d.corr) {
    Env m = to_env;
    for (const auto& [k, v] : from_env) m[k + "'"] = v;
    try {
      return evaluate(d.corr, m);
    } catch (const DomainError&) {
      // fall through to the piecewise ratio
    }
  }
  double hf_eff = from_ok ? hf : e;
  if (d.combine == MonoidOp::Mul) return ht / hf_eff;
  return ht - hf_eff;
}

bool factor_is_identity(MonoidOp op, double c) {
  return c == identity_of(op);
}

void apply_factor(const Ctx& ctx, std::size_t idx, LaneState& s, double c) {
  const Decomposition& d = ctx.prog->decomps[idx];
  if (factor_is_identity(d.combine, c)) return;
  for (std::size_t lane = 0; lane < s.v.size(); ++lane) {
    if (!s.touched[lane]) continue;
    if (d.prod_transformed) {
      // combine acts on the exposed value sign * 2^mag
      s.sign[lane] *= (c > 0) - (c < 0);
      s.v[lane] += std::log2(std::fabs(c));
    } else if (d.combine == MonoidOp::Mul) {
      s.v[lane] *= c;
    } else {
      s.v[lane] += c;
    }
  }
}

// child (x) c folded into the parent accumulator with the reduce op.
void merge_corrected(const Ctx& ctx, std::size_t idx, LaneState& parent,
                     const LaneState& child, double c) {
  const auto& r = ctx.spec.reductions[idx];
  LaneState tmp = child;
  apply_factor(ctx, idx, tmp, c);
  merge_plain(r, parent, tmp,
              ctx.prog->decomps[idx].prod_transformed);
}

// ---- unfused ----------------------------------------------------------------

ExecReport make_report(const std::string& strategy) {
  ExecReport rep;
  rep.strategy = strategy;
  return rep;
}

void emit_outputs(const Ctx& ctx, const StateVec& finals) {
  for (std::size_t i = 0; i < finals.size(); ++i) {
    const auto& r = ctx.spec.reductions[i];
    OutputVal o;
    o.id = r.id;
    if (r.op == ReduceOp::TopK) {
      o.topk = finals[i].tk;
    } else {
      bool pt = ctx.prog && ctx.prog->decomps[i].prod_transformed;
      for (std::size_t lane = 0; lane < finals[i].v.size(); ++lane)
        o.v.push_back(exposed(finals[i], lane, pt));
    }
    ctx.rep.outputs.push_back(std::move(o));
  }
}

}  // namespace

ExecReport run_unfused(const CascadeSpec& spec, const TreeConfig& cfg,
                       TensorStore& store) {
  ExecReport rep = make_report("unfused");
  check_shapes(spec, cfg, store);
  Ctx ctx(spec, nullptr, store, rep);
  const int K = cfg.depth();
  StateVec finals;

  for (std::size_t idx = 0; idx < spec.reductions.size(); ++idx) {
    const auto& r = spec.reductions[idx];
    Env denv = ctx.dep_env(finals);  // predecessors are final
    for (int dj : ctx.refs[idx].deps) rep.dep_root_loads[dj] += 0;

    std::vector<LaneState> cur;
    long long l1 = cfg.levels[1];
    for (long long j = 1; j <= l1; ++j) {
      auto [lo, hi] = segment_bounds(cfg, 1, j);
      LaneState s = make_state(r);
      for (long long l = lo; l <= hi; ++l) {
        for (const auto& in : ctx.refs[idx].inputs)
          rep.input_loads[in.name] += in.has_free ? r.free_len : 1;
        for (int dj : ctx.refs[idx].deps) rep.dep_root_loads[dj] += 1;
        eval_element(ctx, idx, r.body, l, denv, s, false);
      }
      cur.push_back(std::move(s));
    }
    for (int m = 2; m <= K; ++m) {
      long long width = cfg.levels[static_cast<std::size_t>(m)];
      long long group = cfg.levels[static_cast<std::size_t>(m) - 1] / width;
      std::vector<LaneState> next;
      for (long long j = 0; j < width; ++j) {
        LaneState p = make_state(r);
        for (long long c = 0; c < group; ++c)
          merge_plain(r, p, cur[static_cast<std::size_t>(j * group + c)],
                      false);
        next.push_back(std::move(p));
      }
      cur = std::move(next);
    }
    finals.push_back(cur[0]);
  }
  for (int m = 1; m <= K; ++m) rep.peak_aux_slots[m] = ctx.arity;
  emit_outputs(ctx, finals);
  return rep;
}

// ---- fused ------------------------------------------------------------------

namespace {

// Merged level-1 execution of one segment: inputs are buffered (counted
// once), then each reduction scans the buffer in dependency order with
// same-segment dependency values.
StateVec fused_level1_segment(const Ctx& ctx, const TreeConfig& cfg,
                              long long j) {
  auto [lo, hi] = segment_bounds(cfg, 1, j);
  for (long long l = lo; l <= hi; ++l)
    for (const auto& in : ctx.all_inputs)
      ctx.rep.input_loads[in.name] += ctx.lanes_of(in);

  StateVec sv;
  for (const auto& r : ctx.spec.reductions) sv.push_back(make_state(r));
  for (std::size_t idx = 0; idx < ctx.spec.reductions.size(); ++idx) {
    const auto& r = ctx.spec.reductions[idx];
    const Decomposition& d = ctx.prog->decomps[idx];
    Env denv = ctx.dep_env(sv);
    const Expr* term = &r.body;
    if (!d.h_identity) {
      bool ok = false;
      try {
        double h = evaluate(d.H, denv);
        ok = is_invertible(d.combine, h) && !std::isnan(h);
      } catch (const DomainError&) {
      }
      if (!ok) term = &d.G;  // repaired branch: H' is the identity here
    }
    for (long long l = lo; l <= hi; ++l)
      eval_element(ctx, idx, *term, l, denv, sv[idx], d.prod_transformed);
  }
  return sv;
}

// Eq.-12 style group combine at one level: children corrected from their
// own H' to the group's H', folded in segment order.
StateVec fused_combine_group(const Ctx& ctx,
                             const std::vector<const StateVec*>& children) {
  StateVec pv;
  for (const auto& r : ctx.spec.reductions) pv.push_back(make_state(r));
  for (std::size_t idx = 0; idx < ctx.spec.reductions.size(); ++idx) {
    const auto& r = ctx.spec.reductions[idx];
    const Decomposition& d = ctx.prog->decomps[idx];
    if (d.h_identity) {
      for (const StateVec* c : children)
        merge_plain(r, pv[idx], (*c)[idx], d.prod_transformed);
      continue;
    }
    Env penv = ctx.dep_env(pv);
    for (const StateVec* c : children) {
      Env cenv = ctx.dep_env(*c);
      double factor = retarget_factor(ctx, idx, cenv, penv, true);
      merge_corrected(ctx, idx, pv[idx], (*c)[idx], factor);
    }
  }
  return pv;
}

}  // namespace

ExecReport run_fused(const FusedProgram& prog, const TreeConfig& cfg,
                     int fuse_level, TensorStore& store) {
  ExecReport rep = make_report("fused:k=" + std::to_string(fuse_level));
  const CascadeSpec& xs = prog.exec_spec;
  check_shapes(xs, cfg, store);
  const int K = cfg.depth();
  if (fuse_level < 1 || fuse_level > K)
    throw std::out_of_range("fuse level out of range");
  Ctx ctx(xs, &prog, store, rep);

  // Merged phase: hatted partial states up to the fuse level.
  std::vector<StateVec> cur;
  for (long long j = 1; j <= cfg.levels[1]; ++j)
    cur.push_back(fused_level1_segment(ctx, cfg, j));
  for (int m = 2; m <= fuse_level; ++m) {
    long long width = cfg.levels[static_cast<std::size_t>(m)];
    long long group = cfg.levels[static_cast<std::size_t>(m) - 1] / width;
    std::vector<StateVec> next;
    for (long long j = 0; j < width; ++j) {
      std::vector<const StateVec*> kids;
      for (long long c = 0; c < group; ++c)
        kids.push_back(&cur[static_cast<std::size_t>(j * group + c)]);
      next.push_back(fused_combine_group(ctx, kids));
    }
    cur = std::move(next);
  }

  // Bridge: per reduction, correct each level-k partial to final dependency
  // values (true H), then fold the remaining levels plainly.
  StateVec finals;
  for (std::size_t idx = 0; idx < xs.reductions.size(); ++idx) {
    const auto& r = xs.reductions[idx];
    const Decomposition& d = ctx.prog->decomps[idx];
    std::vector<LaneState> parts;
    if (d.h_identity) {
      for (const auto& sv : cur) parts.push_back(sv[idx]);
    } else {
      Env fenv = ctx.dep_env(finals);
      for (const auto& sv : cur) {
        for (int dj : dep_ids(d.H)) rep.dep_root_loads[dj] += 1;
        Env cenv = ctx.dep_env(sv);
        double factor = retarget_factor(ctx, idx, cenv, fenv, false);
        LaneState p = sv[idx];
        apply_factor(ctx, idx, p, factor);
        parts.push_back(std::move(p));
      }
    }
    for (int m = fuse_level + 1; m <= K; ++m) {
      long long width = cfg.levels[static_cast<std::size_t>(m)];
      long long group = cfg.levels[static_cast<std::size_t>(m) - 1] / width;
      std::vector<LaneState> next;
      for (long long j = 0; j < width; ++j) {
        LaneState p = make_state(r);
        for (long long c = 0; c < group; ++c)
          merge_plain(r, p, parts[static_cast<std::size_t>(j * group + c)],
                      d.prod_transformed);
        next.push_back(std::move(p));
      }
      parts = std::move(next);
    }
    finals.push_back(parts[0]);
  }

  rep.peak_aux_slots[1] =
      cfg.levels[0] / cfg.levels[1] * ctx.input_lanes_per_element() +
      ctx.arity;
  for (int m = 2; m <= K; ++m) {
    long long group = cfg.levels[static_cast<std::size_t>(m) - 1] /
                      cfg.levels[static_cast<std::size_t>(m)];
    rep.peak_aux_slots[m] =
        m <= fuse_level ? (group + 1) * ctx.arity : ctx.arity;
  }
  emit_outputs(ctx, finals);
  return rep;
}

// ---- incremental ------------------------------------------------------------

namespace {

// Store-prev / correct / reduce step for one arriving element (Eq.-17 shape).
void incr_ingest_element(const Ctx& ctx, StateVec& sv, long long l) {
  for (const auto& in : ctx.all_inputs)
    ctx.rep.input_loads[in.name] += ctx.lanes_of(in);
  Env snap = ctx.dep_env(sv);  // store-prev: all states before this element
  for (std::size_t idx = 0; idx < ctx.spec.reductions.size(); ++idx) {
    const auto& r = ctx.spec.reductions[idx];
    const Decomposition& d = ctx.prog->decomps[idx];
    Env now = ctx.dep_env(sv);  // deps with id < r.id already updated
    if (!d.h_identity)
      apply_factor(ctx, idx, sv[idx],
                   retarget_factor(ctx, idx, snap, now, true));
    const Expr* term = &r.body;
    if (!d.h_identity) {
      bool ok = false;
      try {
        double h = evaluate(d.H, now);
        ok = is_invertible(d.combine, h) && !std::isnan(h);
      } catch (const DomainError&) {
      }
      if (!ok) term = &d.G;
    }
    eval_element(ctx, idx, *term, l, now, sv[idx], d.prod_transformed);
  }
}

// Push a completed child segment state into the parent level (Eq.-16 shape).
void incr_push_child(const Ctx& ctx, StateVec& parent, const StateVec& child) {
  Env snap = ctx.dep_env(parent);
  for (std::size_t idx = 0; idx < ctx.spec.reductions.size(); ++idx) {
    const auto& r = ctx.spec.reductions[idx];
    const Decomposition& d = ctx.prog->decomps[idx];
    if (d.h_identity) {
      merge_plain(r, parent[idx], child[idx], d.prod_transformed);
      continue;
    }
    Env now = ctx.dep_env(parent);
    apply_factor(ctx, idx, parent[idx],
                 retarget_factor(ctx, idx, snap, now, true));
    Env cenv = ctx.dep_env(child);
    merge_corrected(ctx, idx, parent[idx], child[idx],
                    retarget_factor(ctx, idx, cenv, now, true));
  }
}

// Replace the root's guarded H' scaling with the true H, dependency order.
void finalize_root(const Ctx& ctx, StateVec& root) {
  Env pre = ctx.dep_env(root);
  for (std::size_t idx = 0; idx < ctx.spec.reductions.size(); ++idx) {
    const Decomposition& d = ctx.prog->decomps[idx];
    if (d.h_identity) continue;
    Env now = ctx.dep_env(root);  // deps with lower id already finalized
    for (int dj : dep_ids(d.H)) ctx.rep.dep_root_loads[dj] += 1;
    apply_factor(ctx, idx, root[idx],
                 retarget_factor(ctx, idx, pre, now, false));
  }
}

StateVec fresh_states(const Ctx& ctx) {
  StateVec sv;
  for (const auto& r : ctx.spec.reductions) sv.push_back(make_state(r));
  return sv;
}

}  // namespace

ExecReport run_incremental(const FusedProgram& prog, const TreeConfig& cfg,
                           TensorStore& store) {
  ExecReport rep = make_report("incremental");
  const CascadeSpec& xs = prog.exec_spec;
  check_shapes(xs, cfg, store);
  Ctx ctx(xs, &prog, store, rep);
  const int K = cfg.depth();
  const long long l0 = cfg.levels[0];

  std::vector<StateVec> lvl;  // index 0 unused; 1..K
  for (int m = 0; m <= K; ++m) lvl.push_back(fresh_states(ctx));

  for (long long l = 1; l <= l0; ++l) {
    incr_ingest_element(ctx, lvl[1], l);
    for (int m = 1; m < K; ++m) {
      long long seg = l0 / cfg.levels[static_cast<std::size_t>(m)];
      if (l % seg != 0) break;
      incr_push_child(ctx, lvl[static_cast<std::size_t>(m) + 1],
                      lvl[static_cast<std::size_t>(m)]);
      lvl[static_cast<std::size_t>(m)] = fresh_states(ctx);
    }
  }
  StateVec root = K == 1 ? std::move(lvl[1]) : std::move(lvl[static_cast<std::size_t>(K)]);
  finalize_root(ctx, root);
  for (int m = 1; m <= K; ++m) rep.peak_aux_slots[m] = ctx.arity;
  emit_outputs(ctx, root);
  return rep;
}

ExecReport run_multisegment(const FusedProgram& prog, const TreeConfig& cfg,
                            long long num_segments, TensorStore& store) {
  ExecReport rep =
      make_report("multi:" + std::to_string(num_segments));
  const CascadeSpec& xs = prog.exec_spec;
  check_shapes(xs, cfg, store);
  Ctx ctx(xs, &prog, store, rep);
  const long long l0 = cfg.levels[0];
  if (num_segments < 1 || l0 % num_segments != 0)
    throw IncompatibleSegmentation(
        std::to_string(num_segments) + " segments do not divide L0 = " +
        std::to_string(l0));
  const long long slice = l0 / num_segments;

  std::vector<StateVec> parts;
  for (long long s = 0; s < num_segments; ++s) {
    StateVec sv = fresh_states(ctx);
    for (long long l = s * slice + 1; l <= (s + 1) * slice; ++l)
      incr_ingest_element(ctx, sv, l);
    parts.push_back(std::move(sv));
  }
  StateVec root = fresh_states(ctx);
  for (const auto& p : parts) incr_push_child(ctx, root, p);
  finalize_root(ctx, root);
  for (int m = 1; m <= cfg.depth(); ++m) rep.peak_aux_slots[m] = ctx.arity;
  emit_outputs(ctx, root);
  return rep;
}

// ---- comparison -------------------------------------------------------------

DiffReport compare_reports(const ExecReport& a, const ExecReport& b,
                           double tol) {
  DiffReport out;
  if (a.outputs.size() != b.outputs.size()) {
    out.pass = false;
    out.max_rel_err = std::numeric_limits<double>::infinity();
    out.worst = "output count mismatch";
    return out;
  }
  for (std::size_t i = 0; i < a.outputs.size(); ++i) {
    const auto& oa = a.outputs[i];
    const auto& ob = b.outputs[i];
    if (oa.id != ob.id || oa.v.size() != ob.v.size() ||
        oa.topk.size() != ob.topk.size()) {
      out.pass = false;
      out.max_rel_err = std::numeric_limits<double>::infinity();
      out.worst = "shape mismatch at d" + std::to_string(oa.id);
      return out;
    }
    for (std::size_t lane = 0; lane < oa.v.size(); ++lane) {
      double x = oa.v[lane], y = ob.v[lane];
      double err;
      if (x == y) {
        err = 0.0;  // covers matching infinities
      } else if (std::isnan(x) || std::isnan(y) || std::isinf(x) ||
                 std::isinf(y)) {
        err = std::numeric_limits<double>::infinity();
      } else {
        err = std::fabs(x - y) /
              (1.0 + std::fmax(std::fabs(x), std::fabs(y)));
      }
      if (err > out.max_rel_err) {
        out.max_rel_err = err;
        out.worst = "d" + std::to_string(oa.id) + "[" +
                    std::to_string(lane) + "]";
      }
    }
    for (std::size_t t = 0; t < oa.topk.size(); ++t) {
      if (oa.topk[t].second != ob.topk[t].second) {
        out.pass = false;
        out.max_rel_err = std::numeric_limits<double>::infinity();
        out.worst = "topk index set at d" + std::to_string(oa.id);
        return out;
      }
      double err = std::fabs(oa.topk[t].first - ob.topk[t].first) /
                   (1.0 + std::fmax(std::fabs(oa.topk[t].first),
                                    std::fabs(ob.topk[t].first)));
      if (err > out.max_rel_err) {
        out.max_rel_err = err;
        out.worst = "d" + std::to_string(oa.id) + ".topk[" +
                    std::to_string(t) + "]";
      }
    }
  }
  if (out.max_rel_err > tol) out.pass = false;

  for (const auto& [k, v] : a.input_loads) out.input_load_delta[k] = v;
  for (const auto& [k, v] : b.input_loads) out.input_load_delta[k] -= v;
  for (const auto& [k, v] : a.dep_root_loads) out.dep_root_delta[k] = v;
  for (const auto& [k, v] : b.dep_root_loads) out.dep_root_delta[k] -= v;
  return out;
}

}  // namespace redfuse
