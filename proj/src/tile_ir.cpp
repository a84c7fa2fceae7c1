#include "redfuse/tile_ir.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <map>
#include <set>
#include <sstream>

namespace redfuse {
namespace {

// ---- statement builders -----------------------------------------------------

TStmt tnode(TKind k) {
  auto s = std::make_shared<TStmtNode>();
  s->kind = k;
  return s;
}

TStmt tcomment(const std::string& text) {
  TStmt s = tnode(TKind::Comment);
  s->text = text;
  return s;
}

TStmt tlaunch(const std::string& var, const std::string& thread,
              long long extent) {
  TStmt s = tnode(TKind::Launch);
  s->var = var;
  s->thread = thread;
  s->extent = extent;
  return s;
}

TStmt tfor(const std::string& var, long long extent) {
  TStmt s = tnode(TKind::For);
  s->var = var;
  s->extent = extent;
  return s;
}

TStmt tassign(const std::string& var, IExpr rhs) {
  TStmt s = tnode(TKind::Assign);
  s->var = var;
  s->rhs = std::move(rhs);
  return s;
}

TileRange rng(IExpr lo, IExpr hi) { return {std::move(lo), std::move(hi)}; }
TileRange rng(long long lo, long long hi) {
  return {inum(static_cast<double>(lo)), inum(static_cast<double>(hi))};
}

TStmt tcopy(TileRef a, TileRef b) {
  TStmt s = tnode(TKind::Copy);
  s->a = std::move(a);
  s->b = std::move(b);
  return s;
}

TStmt tgemm(TileRef a, TileRef b, TileRef c) {
  TStmt s = tnode(TKind::Gemm);
  s->a = std::move(a);
  s->b = std::move(b);
  s->c = std::move(c);
  return s;
}

TStmt treduce(TileRef a, TileRef b, int axis, const std::string& op) {
  TStmt s = tnode(TKind::Reduce);
  s->a = std::move(a);
  s->b = std::move(b);
  s->axis = axis;
  s->op = op;
  return s;
}

TStmt tparallel(IExpr plhs, IExpr rhs,
                std::vector<std::pair<std::string, long long>> iters) {
  TStmt s = tnode(TKind::Parallel);
  s->plhs = std::move(plhs);
  s->rhs = std::move(rhs);
  s->iters = std::move(iters);
  return s;
}

TStmt tfill(TileRef a, double v) {
  TStmt s = tnode(TKind::Fill);
  s->a = std::move(a);
  s->fill_value = v;
  return s;
}

// ---- expression rewriting ---------------------------------------------------

struct Rewrite {
  std::map<std::string, IExpr> refs;  // buffer name -> full replacement ref
  std::map<std::string, IExpr> vars;
};

IExpr rw(const IExpr& e, const Rewrite& m) {
  switch (e->kind) {
    case IKind::Num:
      return e;
    case IKind::Var: {
      auto it = m.vars.find(e->name);
      return it != m.vars.end() ? it->second : e;
    }
    case IKind::Ref: {
      auto it = m.refs.find(e->name);
      if (it != m.refs.end()) return it->second;
      std::vector<IExpr> idx;
      idx.reserve(e->args.size());
      for (const auto& a : e->args) idx.push_back(rw(a, m));
      return iref(e->name, std::move(idx));
    }
    case IKind::Neg:
      return ineg(rw(e->a, m));
    case IKind::Bin:
      return ibin(e->bop, rw(e->a, m), rw(e->b, m));
    case IKind::Call: {
      std::vector<IExpr> args;
      args.reserve(e->args.size());
      for (const auto& a : e->args) args.push_back(rw(a, m));
      return icall(e->name, std::move(args));
    }
  }
  return e;
}

// ---- scraping the emitted scalar IR -----------------------------------------
//
// Tensorization pattern-matches the shapes produced by emit_scalar_ir: the
// template comments mark group boundaries and step roles, so the reduction
// structure can be recovered without re-deriving the cascade.

struct TensorizeError : std::runtime_error {
  explicit TensorizeError(const std::string& m)
      : std::runtime_error("tensorize: " + m) {}
};

double init_of(const IExpr& e) {
  if (e->kind == IKind::Num) return e->num;
  if (e->kind == IKind::Neg && e->a->kind == IKind::Num) return -e->a->num;
  throw TensorizeError("unrecognized initializer");
}

enum class RKind { Sum, Prod, MaxMin, TopK };

struct Group {
  std::string header;
  int id = 0;  // reduction number from the header comment
  const SStmtNode* store = nullptr;
  const SStmtNode* corr = nullptr;
  long long corr_lanes = 1;
  const SStmtNode* red = nullptr;
  long long red_lanes = 1;
  bool producer = false;
  const SStmtNode* prod = nullptr;
  long long prod_extent = 0;

  RKind kind = RKind::Sum;
  std::string op;       // add / mul / max / min / topk
  long long topk = 0;
  IExpr term;           // streamed contribution expression
  std::string acc;      // accumulator buffer name in the scalar IR
};

void classify(Group& g) {
  if (g.producer) return;
  if (!g.red) throw TensorizeError("reduction group without a reduce step");
  const SStmtNode* r = g.red;
  g.acc = r->lhs->name;
  if (r->kind == SKind::Accum) {
    g.kind = r->op == BinOp::Add ? RKind::Sum : RKind::Prod;
    g.op = r->op == BinOp::Add ? "add" : "mul";
    g.term = r->rhs;
    return;
  }
  if (r->rhs->kind == IKind::Call && r->rhs->name == "topk") {
    g.kind = RKind::TopK;
    g.op = "topk";
    g.term = r->rhs->args[1];
    g.topk = static_cast<long long>(r->rhs->args[2]->num);
    return;
  }
  if (r->rhs->kind == IKind::Call &&
      (r->rhs->name == "max" || r->rhs->name == "min")) {
    g.kind = RKind::MaxMin;
    g.op = r->rhs->name;
    g.term = r->rhs->args[1];
    return;
  }
  throw TensorizeError("unrecognized reduce step");
}

std::vector<Group> scrape_groups(const std::vector<SStmt>& stmts) {
  std::vector<Group> gs;
  int pending = 0;  // 1 store / 2 correct / 3 reduce
  for (const auto& s : stmts) {
    if (s->kind == SKind::Comment) {
      const std::string& t = s->text;
      if (t.rfind("reduction", 0) == 0) {
        Group g;
        g.header = t;
        g.id = std::atoi(t.c_str() + 9);
        gs.push_back(std::move(g));
        pending = 0;
      } else if (t.rfind("step 1", 0) == 0) {
        pending = 1;
      } else if (t.rfind("step 2", 0) == 0) {
        pending = 2;
      } else if (t.rfind("step 3", 0) == 0) {
        pending = 3;
      }
      continue;
    }
    if (gs.empty()) continue;  // leading offset assignment
    Group& g = gs.back();
    const SStmtNode* inner = s.get();
    long long lanes = 1;
    if (s->kind == SKind::For) {
      lanes = s->extents[0];
      inner = s->body[0].get();
    }
    if (pending == 0) {
      g.producer = true;
      g.prod = inner;
      g.prod_extent = lanes;
    } else if (pending == 1) {
      g.store = inner;
    } else if (pending == 2) {
      g.corr = inner;
      g.corr_lanes = lanes;
    } else {
      g.red = inner;
      g.red_lanes = lanes;
    }
    pending = 0;
  }
  for (auto& g : gs) classify(g);
  return gs;
}

struct Section {
  bool has_row = false;
  std::string row_var;
  long long rows = 1;
  std::string stream_var;
  long long stream = 0;
  long long splits = 1;
  std::vector<const SStmtNode*> inits;
  std::vector<Group> groups;
};

bool is_stream_loop(const SStmt& s) {
  return s->kind == SKind::For && !s->body.empty() &&
         s->body.front()->kind == SKind::Comment &&
         s->body.front()->text.rfind("reduction", 0) == 0;
}

bool is_stream_loop_with_offset(const SStmt& s) {
  if (s->kind != SKind::For || s->body.empty()) return false;
  const SStmt& f = s->body.front();
  return is_stream_loop(s) ||
         (f->kind == SKind::Assign && f->lhs->kind == IKind::Ref &&
          f->lhs->name == "offset");
}

Section scrape_section(const std::vector<SStmt>& stmts) {
  Section sec;
  const std::vector<SStmt>* top = &stmts;
  if (stmts.size() == 1 && stmts[0]->kind == SKind::For &&
      !is_stream_loop_with_offset(stmts[0])) {
    sec.has_row = true;
    sec.row_var = stmts[0]->vars[0];
    sec.rows = stmts[0]->extents[0];
    top = &stmts[0]->body;
  }
  for (const auto& s : *top) {
    if (is_stream_loop_with_offset(s)) {
      sec.stream_var = s->vars[0];
      sec.stream = s->extents[0];
      sec.groups = scrape_groups(s->body);
    } else {
      sec.inits.push_back(s.get());
    }
  }
  if (sec.groups.empty()) throw TensorizeError("no reduction loop found");
  return sec;
}

// combine-section reduction merges
struct CGroup {
  const SStmtNode* merge = nullptr;
  const SStmtNode* corr = nullptr;  // free-axis in-place rescale, if any
  long long lanes = 1;
};

struct Combine {
  bool has_row = false;
  std::string row_var;
  long long rows = 1;
  long long splits = 1;
  std::vector<const SStmtNode*> inits;
  std::vector<CGroup> groups;
};

Combine scrape_combine(const std::vector<SStmt>& stmts, std::size_t from) {
  Combine c;
  const std::vector<SStmt>* top = nullptr;
  std::vector<SStmt> flat;
  if (from + 1 == stmts.size() && stmts[from]->kind == SKind::For &&
      !stmts[from]->body.empty() &&
      stmts[from]->body.back()->kind == SKind::For &&
      stmts[from]->body.back()->vars[0] == "split") {
    c.has_row = true;
    c.row_var = stmts[from]->vars[0];
    c.rows = stmts[from]->extents[0];
    top = &stmts[from]->body;
  } else {
    for (std::size_t i = from; i < stmts.size(); ++i) flat.push_back(stmts[i]);
    top = &flat;
  }
  for (const auto& s : *top) {
    if (s->kind == SKind::For && s->vars[0] == "split") {
      c.splits = s->extents[0];
      CGroup g;
      if (s->body.size() == 1 && s->body[0]->kind != SKind::For) {
        g.merge = s->body[0].get();
      } else if (s->body.size() == 1) {
        g.lanes = s->body[0]->extents[0];
        g.merge = s->body[0]->body[0].get();
      } else {
        g.lanes = s->body[0]->extents[0];
        g.corr = s->body[0]->body[0].get();
        g.merge = s->body[1]->body[0].get();
      }
      c.groups.push_back(g);
    } else {
      c.inits.push_back(s.get());
    }
  }
  if (c.groups.empty()) throw TensorizeError("empty combine section");
  return c;
}

// ---- emission helpers -------------------------------------------------------

long long pick_tile(long long configured, long long extent,
                    const std::string& what) {
  long long t = configured;
  if (t == 0) t = extent % 128 == 0 ? 128 : extent;
  if (t <= 0 || extent % t != 0)
    throw NonDivisibleTile(what + " tile " + std::to_string(t) +
                           " does not divide extent " +
                           std::to_string(extent));
  return t;
}

struct Emitter {
  std::vector<TStmt> out;
  // (scope, name, dims); emitted as declaration comments per section
  std::vector<std::tuple<std::string, std::string, std::vector<long long>>>
      allocs;
  std::set<std::string> alloc_seen;

  void declare(const std::string& scope, const std::string& name,
               std::vector<long long> dims) {
    if (!alloc_seen.insert(name).second) return;
    allocs.emplace_back(scope, name, std::move(dims));
  }

  std::vector<TStmt> alloc_comments() {
    std::vector<TStmt> cs;
    for (int pass = 0; pass < 2; ++pass) {
      const char* want = pass == 0 ? "shared" : "fragment";
      for (const auto& [scope, name, dims] : allocs) {
        if (scope != want) continue;
        std::ostringstream os;
        os << "alloc " << scope << " " << name << "[";
        for (std::size_t i = 0; i < dims.size(); ++i)
          os << (i ? ", " : "") << dims[i];
        os << "]";
        cs.push_back(tcomment(os.str()));
      }
    }
    allocs.clear();
    alloc_seen.clear();
    return cs;
  }
};

IExpr times(const std::string& v, long long k) {
  return ibin(BinOp::Mul, ivar(v), inum(static_cast<double>(k)));
}

// bv * t : bv * t + t
TileRange block_range(const std::string& bv, long long t) {
  IExpr lo = times(bv, t);
  return rng(lo, ibin(BinOp::Add, lo, inum(static_cast<double>(t))));
}

// v : v + t
TileRange var_range(const std::string& v, long long t) {
  return rng(ivar(v), ibin(BinOp::Add, ivar(v), inum(static_cast<double>(t))));
}

// by : by + 1
TileRange unit_range(const std::string& v) {
  return rng(ivar(v), ibin(BinOp::Add, ivar(v), inum(1.0)));
}

bool is_input_ref(const IExpr& e, const std::set<std::string>& stream_vars) {
  return e->kind == IKind::Ref && !e->args.empty() &&
         e->args[0]->kind == IKind::Var &&
         stream_vars.count(e->args[0]->name) > 0;
}

void collect_inputs(const IExpr& e, const std::set<std::string>& stream_vars,
                    std::vector<std::pair<std::string, int>>& found) {
  if (is_input_ref(e, stream_vars)) {
    for (const auto& [n, r] : found)
      if (n == e->name) return;
    found.emplace_back(e->name, static_cast<int>(e->args.size()));
    return;
  }
  if (e->a) collect_inputs(e->a, stream_vars, found);
  if (e->b) collect_inputs(e->b, stream_vars, found);
  for (const auto& a : e->args) collect_inputs(a, stream_vars, found);
}

// ---- attention lowering -----------------------------------------------------
//
// Mirrors the flash-attention / flash-decoding tile listings: the producer
// becomes a gemm into P_frag, max collapses via reduce, the exp-sum goes
// through a pexp tile, and the output accumulation through an oexp tile fed
// to a second gemm.

struct AttNames {
  std::string Q, K, V, P;    // global arrays
  std::string pmax, psum, o; // scalar-IR accumulator names for this section
  long long hd = 0;
};

AttNames attention_names(const Section& sec) {
  AttNames n;
  const Group& gp = sec.groups[0];
  if (!gp.producer) throw TensorizeError("attention section without producer");
  n.P = gp.prod->lhs->name;
  n.hd = gp.prod_extent;
  const IExpr& r = gp.prod->rhs;  // Q[row, d] * K[stream, d]
  const IExpr& qa = r->a;
  const IExpr& qb = r->b;
  bool a_is_q = qa->args[0]->kind == IKind::Var &&
                qa->args[0]->name == sec.row_var;
  n.Q = (a_is_q ? qa : qb)->name;
  n.K = (a_is_q ? qb : qa)->name;
  n.pmax = sec.groups[1].acc;
  n.psum = sec.groups[2].acc;
  n.o = sec.groups[3].acc;
  // trailing V reference in the weighted-sum term
  const IExpr& t = sec.groups[3].term;
  if (t->kind != IKind::Bin || t->bop != BinOp::Mul ||
      t->b->kind != IKind::Ref || t->b->args.size() != 2)
    throw TensorizeError("attention output term lacks a trailing V factor");
  n.V = t->b->name;
  return n;
}

// tile-side buffer names: single-segment keeps the scalar names; the
// partial section of a split run renames pmax_part -> pmax_frag etc.
std::string frag_of(const std::string& scalar_name) {
  std::string base = scalar_name;
  const std::string suf = "_part";
  if (base.size() > suf.size() &&
      base.compare(base.size() - suf.size(), suf.size(), suf) == 0)
    base.erase(base.size() - suf.size());
  return base;
}

void emit_attention_stage(Emitter& em, std::vector<TStmt>& body,
                          const Section& sec, const AttNames& n,
                          bool split_mode, long long RT, long long ST) {
  std::string P_frag = frag_of(n.P) + "_frag";
  std::string pmax = split_mode ? frag_of(n.pmax) + "_frag" : n.pmax;
  std::string psum = split_mode ? frag_of(n.psum) + "_frag" : n.psum;
  std::string o = split_mode ? frag_of(n.o) + "_frag" : n.o + "_frag";
  std::string pmax_prev = pmax + "_prev";
  std::string psum_prev = psum + "_prev";

  em.declare("fragment", P_frag, {RT, ST});
  em.declare("fragment", pmax, {RT});
  em.declare("fragment", pmax_prev, {RT});
  em.declare("fragment", psum, {RT});
  em.declare("fragment", psum_prev, {RT});
  em.declare("fragment", o, {RT, n.hd});

  Rewrite m;
  m.refs[n.P] = iref(P_frag, {ivar("i"), ivar("j")});
  m.refs[n.pmax] = iref(pmax, {ivar("i")});
  m.refs[n.psum] = iref(psum, {ivar("i")});
  m.refs[sec.groups[1].store ? sec.groups[1].store->lhs->name : pmax_prev] =
      iref(pmax_prev, {ivar("i")});
  if (sec.groups[2].store)
    m.refs[sec.groups[2].store->lhs->name] = iref(psum_prev, {ivar("i")});
  m.refs[n.o] = iref(o, {ivar("i"), ivar("j")});

  TileRef P_tile = {P_frag, {rng(0, RT), rng(0, ST)}};

  body.push_back(tcomment(sec.groups[0].header));
  body.push_back(tfill(P_tile, 0.0));
  body.push_back(tgemm({frag_of(n.Q) + "_shared", {rng(0, RT), rng(0, n.hd)}},
                       {n.K + "_shared", {rng(0, ST), rng(0, n.hd)}}, P_tile));

  // max
  const Group& gmax = sec.groups[1];
  body.push_back(tcomment(gmax.header));
  if (gmax.store) {
    body.push_back(tcomment("step 1. store previous result"));
    body.push_back(tcopy({pmax, {rng(0, RT)}}, {pmax_prev, {rng(0, RT)}}));
  }
  body.push_back(tcomment("step 3. perform reduction"));
  body.push_back(treduce(P_tile, {pmax, {rng(0, RT)}}, 1, gmax.op));

  // exp-sum
  const Group& gsum = sec.groups[2];
  body.push_back(tcomment(gsum.header));
  if (gsum.store) {
    body.push_back(tcomment("step 1. store previous result"));
    body.push_back(tcopy({psum, {rng(0, RT)}}, {psum_prev, {rng(0, RT)}}));
  }
  if (gsum.corr) {
    body.push_back(tcomment("step 2. apply correction"));
    body.push_back(tparallel(iref(psum, {ivar("i")}),
                             ibin(BinOp::Mul, iref(psum, {ivar("i")}),
                                  rw(gsum.corr->rhs, m)),
                             {{"i", RT}}));
  }
  body.push_back(tcomment("step 3. perform reduction"));
  std::string pexp = "pexp";
  em.declare("fragment", pexp, {RT, ST});
  body.push_back(tparallel(iref(pexp, {ivar("i"), ivar("j")}),
                           rw(gsum.term, m), {{"i", RT}, {"j", ST}}));
  body.push_back(treduce({pexp, {rng(0, RT), rng(0, ST)}},
                         {psum, {rng(0, RT)}}, 1, gsum.op));

  // weighted sum into o via a second gemm
  const Group& go = sec.groups[3];
  body.push_back(tcomment(go.header));
  if (go.corr) {
    body.push_back(tcomment("step 2. apply correction"));
    body.push_back(tparallel(iref(o, {ivar("i"), ivar("j")}),
                             ibin(BinOp::Mul, iref(o, {ivar("i"), ivar("j")}),
                                  rw(go.corr->rhs, m)),
                             {{"i", RT}, {"j", static_cast<long long>(n.hd)}}));
  }
  body.push_back(tcomment("step 3. perform reduction"));
  std::string oexp = "oexp";
  em.declare("fragment", oexp, {RT, ST});
  body.push_back(tparallel(iref(oexp, {ivar("i"), ivar("j")}),
                           rw(go.term->a, m), {{"i", RT}, {"j", ST}}));
  body.push_back(tgemm({oexp, {rng(0, RT), rng(0, ST)}},
                       {n.V + "_shared", {rng(0, ST), rng(0, n.hd)}},
                       {o, {rng(0, RT), rng(0, n.hd)}}));
}

void emit_attention_fills(Emitter& em, std::vector<TStmt>& sect,
                          const Section& sec, const AttNames& n,
                          bool split_mode, long long RT) {
  for (const SStmtNode* in : sec.inits) {
    if (in->kind == SKind::Assign) {
      std::string b = split_mode ? frag_of(in->lhs->name) + "_frag"
                                 : in->lhs->name;
      sect.push_back(tfill({b, {rng(0, RT)}}, init_of(in->rhs)));
    } else {  // free-axis accumulator
      const SStmtNode* a = in->body[0].get();
      std::string b = frag_of(a->lhs->name) + "_frag";
      sect.push_back(
          tfill({b, {rng(0, RT), rng(0, n.hd)}}, init_of(a->rhs)));
    }
  }
}

std::vector<TStmt> tensorize_attention_single(const Section& sec,
                                              const TileConfig& cfg) {
  AttNames n = attention_names(sec);
  long long RT = pick_tile(cfg.row_tile, sec.rows, "row");
  long long ST = pick_tile(cfg.stream_tile, sec.stream, "stream");

  Emitter em;
  std::vector<TStmt> sect;
  emit_attention_fills(em, sect, sec, n, false, RT);
  em.declare("shared", n.Q + "_shared", {RT, n.hd});
  em.declare("shared", n.K + "_shared", {ST, n.hd});
  em.declare("shared", n.V + "_shared", {ST, n.hd});
  sect.push_back(tcopy({n.Q, {block_range("bx", RT), rng(0, n.hd)}},
                       {n.Q + "_shared", {rng(0, RT), rng(0, n.hd)}}));
  TStmt loop = tfor("stage", sec.stream / ST);
  loop->body.push_back(tcopy({n.K, {block_range("stage", ST), rng(0, n.hd)}},
                             {n.K + "_shared", {rng(0, ST), rng(0, n.hd)}}));
  loop->body.push_back(tcopy({n.V, {block_range("stage", ST), rng(0, n.hd)}},
                             {n.V + "_shared", {rng(0, ST), rng(0, n.hd)}}));
  emit_attention_stage(em, loop->body, sec, n, false, RT, ST);
  sect.push_back(loop);
  std::string o = frag_of(n.o) + "_frag";
  sect.push_back(tcopy({o, {rng(0, RT), rng(0, n.hd)}},
                       {n.o, {block_range("bx", RT), rng(0, n.hd)}}));

  std::vector<TStmt> out;
  out.push_back(tlaunch("bx", "blockIdx.x", sec.rows / RT));
  for (auto& c : em.alloc_comments()) out.push_back(c);
  for (auto& s : sect) out.push_back(s);
  return out;
}

std::vector<TStmt> tensorize_attention_multi(const Section& part,
                                             const Combine& comb,
                                             const TileConfig& cfg) {
  AttNames n = attention_names(part);
  long long RT = pick_tile(cfg.row_tile, part.rows, "row");
  long long ST = pick_tile(cfg.stream_tile, part.stream, "stream");
  long long S = part.splits;
  long long seg = part.stream;

  std::string pmax = frag_of(n.pmax);   // base names
  std::string psum = frag_of(n.psum);
  std::string o = frag_of(n.o);
  std::string pmax_f = pmax + "_frag", psum_f = psum + "_frag",
              o_f = o + "_frag";

  std::vector<TStmt> out;
  out.push_back(tcomment("partial segment"));

  Emitter em;
  std::vector<TStmt> sect;
  emit_attention_fills(em, sect, part, n, true, RT);
  em.declare("shared", n.Q + "_shared", {RT, n.hd});
  em.declare("shared", n.K + "_shared", {ST, n.hd});
  em.declare("shared", n.V + "_shared", {ST, n.hd});
  sect.push_back(tcopy({n.Q, {block_range("bx", RT), rng(0, n.hd)}},
                       {n.Q + "_shared", {rng(0, RT), rng(0, n.hd)}}));
  TStmt loop = tfor("stage", seg / ST);
  loop->body.push_back(tassign(
      "offset", ibin(BinOp::Add, times("by", seg), times("stage", ST))));
  loop->body.push_back(tcopy({n.K, {var_range("offset", ST), rng(0, n.hd)}},
                             {n.K + "_shared", {rng(0, ST), rng(0, n.hd)}}));
  loop->body.push_back(tcopy({n.V, {var_range("offset", ST), rng(0, n.hd)}},
                             {n.V + "_shared", {rng(0, ST), rng(0, n.hd)}}));
  emit_attention_stage(em, loop->body, part, n, true, RT, ST);
  sect.push_back(loop);
  sect.push_back(tcopy({pmax_f, {rng(0, RT)}},
                       {pmax + "_part", {block_range("bx", RT), unit_range("by")}}));
  sect.push_back(tcopy({psum_f, {rng(0, RT)}},
                       {psum + "_part", {block_range("bx", RT), unit_range("by")}}));
  sect.push_back(tcopy({o_f, {rng(0, RT), rng(0, n.hd)}},
                       {o + "_part",
                        {block_range("bx", RT), rng(0, n.hd), unit_range("by")}}));

  out.push_back(tlaunch("bx", "blockIdx.x", part.rows / RT));
  out.push_back(tlaunch("by", "blockIdx.y", S));
  for (auto& c : em.alloc_comments()) out.push_back(c);
  for (auto& s : sect) out.push_back(s);

  // ---- combine ----
  out.push_back(tcomment("combine"));
  Emitter em2;
  std::vector<TStmt> csect;
  em2.declare("fragment", pmax_f, {RT, S});
  em2.declare("fragment", psum_f, {RT, S});
  em2.declare("fragment", o_f, {RT, n.hd, S});
  em2.declare("fragment", pmax, {RT});
  em2.declare("fragment", psum, {RT});
  em2.declare("fragment", psum + "_corr", {RT, S});
  em2.declare("fragment", o + "_final", {RT, n.hd});
  for (const SStmtNode* in : comb.inits) {
    if (in->kind == SKind::Assign) {
      csect.push_back(
          tfill({in->lhs->name, {rng(0, RT)}}, init_of(in->rhs)));
    } else {
      csect.push_back(tfill({o + "_final", {rng(0, RT), rng(0, n.hd)}},
                            init_of(in->body[0]->rhs)));
    }
  }
  csect.push_back(tcopy({pmax + "_part", {block_range("bx", RT), rng(0, S)}},
                        {pmax_f, {rng(0, RT), rng(0, S)}}));
  csect.push_back(tcopy({psum + "_part", {block_range("bx", RT), rng(0, S)}},
                        {psum_f, {rng(0, RT), rng(0, S)}}));
  csect.push_back(
      tcopy({o + "_part", {block_range("bx", RT), rng(0, n.hd), rng(0, S)}},
            {o_f, {rng(0, RT), rng(0, n.hd), rng(0, S)}}));

  Rewrite cm;
  cm.refs[pmax + "_part"] = iref(pmax_f, {ivar("i"), ivar("k")});
  cm.refs[psum + "_part"] = iref(psum_f, {ivar("i"), ivar("k")});
  cm.refs[o + "_part"] = iref(o_f, {ivar("i"), ivar("j"), ivar("k")});
  cm.refs[pmax] = iref(pmax, {ivar("i")});
  cm.refs[psum] = iref(psum, {ivar("i")});

  // max merge
  csect.push_back(
      treduce({pmax_f, {rng(0, RT), rng(0, S)}}, {pmax, {rng(0, RT)}}, 1,
              comb.groups[0].merge->rhs->name));
  // exp-sum merge: correction folded into a fresh tile so the original
  // partials stay readable by the output correction below
  csect.push_back(tparallel(iref(psum + "_corr", {ivar("i"), ivar("k")}),
                            rw(comb.groups[1].merge->rhs, cm),
                            {{"i", RT}, {"k", S}}));
  csect.push_back(treduce({psum + "_corr", {rng(0, RT), rng(0, S)}},
                          {psum, {rng(0, RT)}}, 1, "add"));
  // output merge
  const CGroup& og = comb.groups[2];
  csect.push_back(tparallel(
      iref(o_f, {ivar("i"), ivar("j"), ivar("k")}),
      ibin(BinOp::Mul, iref(o_f, {ivar("i"), ivar("j"), ivar("k")}),
           rw(og.corr->rhs, cm)),
      {{"i", RT}, {"j", static_cast<long long>(n.hd)}, {"k", S}}));
  csect.push_back(treduce({o_f, {rng(0, RT), rng(0, n.hd), rng(0, S)}},
                          {o + "_final", {rng(0, RT), rng(0, n.hd)}}, 2,
                          "add"));
  csect.push_back(tcopy({o + "_final", {rng(0, RT), rng(0, n.hd)}},
                        {o, {block_range("bx", RT), rng(0, n.hd)}}));

  out.push_back(tlaunch("bx", "blockIdx.x", part.rows / RT));
  for (auto& c : em2.alloc_comments()) out.push_back(c);
  for (auto& s : csect) out.push_back(s);
  return out;
}

// ---- generic lowering -------------------------------------------------------
//
// One block streams the whole axis (or one split of it): per stage, inputs
// are staged into shared tiles, each elementwise contribution is built with
// a parallel statement (skipped when the term is a bare input element) and
// collapsed into the accumulator fragment with reduce.

struct GenericCtx {
  const Section& sec;
  bool split_mode;
  long long T;
  std::vector<std::pair<std::string, int>> inputs;  // name, rank
  std::map<std::string, long long> input_lanes;     // rank-2 second extent
};

// accumulator tile name and extent on the tile side
std::string gacc_name(const std::string& scalar, bool split_mode) {
  return split_mode ? frag_of(scalar) + "_frag" : scalar;
}

void emit_generic_group(Emitter& em, std::vector<TStmt>& body,
                        const GenericCtx& cx, const Group& g) {
  std::string acc = gacc_name(g.acc, cx.split_mode);
  long long N = g.red_lanes;
  long long acc_len = g.kind == RKind::TopK ? g.topk : N;
  em.declare("fragment", acc, {acc_len});

  // buffer map for expressions inside this group
  auto base_map = [&](const char* lane_self) {
    Rewrite m;
    for (const auto& [in, rank] : cx.inputs) {
      if (rank == 1)
        m.refs[in] = iref(in + "_shared", {ivar("i")});
      else
        m.refs[in] = iref(in + "_shared", {ivar("i"), ivar("j")});
    }
    for (const Group& og : cx.sec.groups) {
      if (og.producer) continue;
      std::string oacc = gacc_name(og.acc, cx.split_mode);
      m.refs[og.acc] = iref(oacc, {inum(0.0)});
      if (og.store) {
        std::string prev = cx.split_mode
                               ? frag_of(og.acc) + "_frag_prev"
                               : og.store->lhs->name;
        m.refs[og.store->lhs->name] = iref(prev, {inum(0.0)});
      }
    }
    if (lane_self)
      m.refs[g.acc] = iref(acc, {ivar(lane_self)});
    return m;
  };

  body.push_back(tcomment(g.header));
  if (g.store) {
    std::string prev = cx.split_mode ? frag_of(g.acc) + "_frag_prev"
                                     : g.store->lhs->name;
    em.declare("fragment", prev, {acc_len});
    body.push_back(tcomment("step 1. store previous result"));
    body.push_back(tcopy({acc, {rng(0, acc_len)}}, {prev, {rng(0, acc_len)}}));
  }
  if (g.corr) {
    body.push_back(tcomment("step 2. apply correction"));
    if (N == 1) {
      Rewrite m = base_map("i");
      body.push_back(tparallel(iref(acc, {ivar("i")}),
                               ibin(BinOp::Mul, iref(acc, {ivar("i")}),
                                    rw(g.corr->rhs, m)),
                               {{"i", 1}}));
    } else {
      Rewrite m = base_map("j");
      body.push_back(tparallel(iref(acc, {ivar("j")}),
                               ibin(BinOp::Mul, iref(acc, {ivar("j")}),
                                    rw(g.corr->rhs, m)),
                               {{"j", N}}));
    }
  }
  body.push_back(tcomment("step 3. perform reduction"));
  bool bare = is_input_ref(g.term, {cx.sec.stream_var, "offset"}) &&
              g.term->args.size() == 1;
  if (bare) {
    body.push_back(treduce({g.term->name + "_shared", {rng(0, cx.T)}},
                           {acc, {rng(0, acc_len)}}, 0, g.op));
    return;
  }
  Rewrite m = base_map(nullptr);
  std::string tmp = "t" + std::to_string(g.id);
  if (N == 1) {
    em.declare("fragment", tmp, {cx.T});
    body.push_back(
        tparallel(iref(tmp, {ivar("i")}), rw(g.term, m), {{"i", cx.T}}));
    body.push_back(
        treduce({tmp, {rng(0, cx.T)}}, {acc, {rng(0, acc_len)}}, 0, g.op));
  } else {
    em.declare("fragment", tmp, {cx.T, N});
    body.push_back(tparallel(iref(tmp, {ivar("i"), ivar("j")}), rw(g.term, m),
                             {{"i", cx.T}, {"j", N}}));
    body.push_back(treduce({tmp, {rng(0, cx.T), rng(0, N)}},
                           {acc, {rng(0, N)}}, 0, g.op));
  }
}

void generic_collect_inputs(GenericCtx& cx) {
  std::set<std::string> svars = {cx.sec.stream_var, "offset"};
  for (const Group& g : cx.sec.groups) {
    if (g.producer) continue;
    std::vector<std::pair<std::string, int>> found;
    collect_inputs(g.term, svars, found);
    for (const auto& [n, rank] : found) {
      bool seen = false;
      for (const auto& [pn, pr] : cx.inputs) seen |= pn == n;
      if (!seen) {
        cx.inputs.emplace_back(n, rank);
        if (rank == 2) cx.input_lanes[n] = g.red_lanes;
      }
    }
  }
}

void emit_generic_fills(Emitter& em, std::vector<TStmt>& sect,
                        const std::vector<const SStmtNode*>& inits,
                        const std::vector<Group>& groups, bool split_mode) {
  for (const SStmtNode* in : inits) {
    if (in->kind == SKind::Assign) {
      std::string b = gacc_name(in->lhs->name, split_mode);
      em.declare("fragment", b, {1});
      sect.push_back(tfill({b, {rng(0, 1)}}, init_of(in->rhs)));
    } else {
      long long len = in->extents[0];
      const SStmtNode* a = in->body[0].get();
      std::string b = gacc_name(a->lhs->name, split_mode);
      em.declare("fragment", b, {len});
      sect.push_back(tfill({b, {rng(0, len)}}, init_of(a->rhs)));
    }
  }
  // top-k state has no scalar-side initializer; give the tile a zero fill
  for (const Group& g : groups) {
    if (g.producer || g.kind != RKind::TopK) continue;
    std::string b = gacc_name(g.acc, split_mode);
    em.declare("fragment", b, {g.topk});
    sect.push_back(tfill({b, {rng(0, g.topk)}}, 0.0));
  }
}

void emit_generic_copies(Emitter& em, std::vector<TStmt>& body,
                         const GenericCtx& cx, bool split_mode) {
  for (const auto& [in, rank] : cx.inputs) {
    TileRange r0 = split_mode ? var_range("offset", cx.T)
                              : block_range("stage", cx.T);
    if (rank == 1) {
      em.declare("shared", in + "_shared", {cx.T});
      body.push_back(tcopy({in, {r0}}, {in + "_shared", {rng(0, cx.T)}}));
    } else {
      long long N = cx.input_lanes.at(in);
      em.declare("shared", in + "_shared", {cx.T, N});
      body.push_back(tcopy({in, {r0, rng(0, N)}},
                           {in + "_shared", {rng(0, cx.T), rng(0, N)}}));
    }
  }
}

std::vector<TStmt> tensorize_generic_single(const Section& sec,
                                            const TileConfig& cfg) {
  GenericCtx cx{sec, false, pick_tile(cfg.stream_tile, sec.stream, "stream")};
  generic_collect_inputs(cx);

  Emitter em;
  std::vector<TStmt> sect;
  emit_generic_fills(em, sect, sec.inits, sec.groups, false);
  TStmt loop = tfor("stage", sec.stream / cx.T);
  emit_generic_copies(em, loop->body, cx, false);
  for (const Group& g : sec.groups) emit_generic_group(em, loop->body, cx, g);
  sect.push_back(loop);
  sect.push_back(tcomment("copy-out"));
  for (const Group& g : sec.groups) {
    long long len = g.kind == RKind::TopK ? g.topk : g.red_lanes;
    sect.push_back(
        tcopy({g.acc, {rng(0, len)}}, {g.acc + "_out", {rng(0, len)}}));
  }
  std::vector<TStmt> out = em.alloc_comments();
  for (auto& s : sect) out.push_back(s);
  return out;
}

std::vector<TStmt> tensorize_generic_multi(const Section& part,
                                           const Combine& comb,
                                           const TileConfig& cfg) {
  GenericCtx cx{part, true,
                pick_tile(cfg.stream_tile, part.stream, "stream")};
  generic_collect_inputs(cx);
  long long S = part.splits;
  long long seg = part.stream;

  std::vector<TStmt> out;
  out.push_back(tcomment("partial segment"));
  Emitter em;
  std::vector<TStmt> sect;
  emit_generic_fills(em, sect, part.inits, part.groups, true);
  TStmt loop = tfor("stage", seg / cx.T);
  loop->body.push_back(tassign(
      "offset", ibin(BinOp::Add, times("by", seg), times("stage", cx.T))));
  emit_generic_copies(em, loop->body, cx, true);
  for (const Group& g : part.groups) emit_generic_group(em, loop->body, cx, g);
  sect.push_back(loop);
  for (const Group& g : part.groups) {
    long long len = g.kind == RKind::TopK ? g.topk : g.red_lanes;
    std::string base = frag_of(g.acc);
    if (len == 1) {
      sect.push_back(tcopy({base + "_frag", {rng(0, 1)}},
                           {base + "_part", {unit_range("by")}}));
    } else {
      sect.push_back(tcopy({base + "_frag", {rng(0, len)}},
                           {base + "_part", {rng(0, len), unit_range("by")}}));
    }
  }
  out.push_back(tlaunch("by", "blockIdx.y", S));
  for (auto& c : em.alloc_comments()) out.push_back(c);
  for (auto& s : sect) out.push_back(s);

  // ---- combine ----
  out.push_back(tcomment("combine"));
  Emitter em2;
  std::vector<TStmt> csect;
  // final accumulators
  std::vector<std::pair<std::string, long long>> finals;  // name, lanes
  for (std::size_t i = 0; i < part.groups.size(); ++i) {
    const Group& g = part.groups[i];
    long long len = g.kind == RKind::TopK ? g.topk : g.red_lanes;
    finals.emplace_back(frag_of(g.acc), len);
  }
  std::vector<const SStmtNode*> cinits = comb.inits;
  std::vector<Group> fake;  // reuse the top-k zero-fill path
  for (const Group& g : part.groups)
    if (g.kind == RKind::TopK) {
      Group f = g;
      f.acc = frag_of(g.acc);
      fake.push_back(f);
    }
  emit_generic_fills(em2, csect, cinits, fake, false);
  // bring the partial results on chip
  for (std::size_t i = 0; i < part.groups.size(); ++i) {
    const Group& g = part.groups[i];
    const auto& [base, len] = finals[i];
    std::string frag = base + "_frag";
    if (len == 1) {
      em2.declare("fragment", frag, {S});
      csect.push_back(
          tcopy({base + "_part", {rng(0, S)}}, {frag, {rng(0, S)}}));
    } else {
      em2.declare("fragment", frag, {len, S});
      csect.push_back(tcopy({base + "_part", {rng(0, len), rng(0, S)}},
                            {frag, {rng(0, len), rng(0, S)}}));
    }
  }
  // merge loops, in reduction order
  Rewrite cm;
  for (std::size_t i = 0; i < part.groups.size(); ++i) {
    const auto& [base, len] = finals[i];
    if (len == 1) {
      cm.refs[base + "_part"] = iref(base + "_frag", {ivar("k")});
      cm.refs[base] = iref(base, {inum(0.0)});
    } else {
      cm.refs[base + "_part"] = iref(base + "_frag", {ivar("j"), ivar("k")});
    }
  }
  for (std::size_t i = 0; i < comb.groups.size(); ++i) {
    const CGroup& g = comb.groups[i];
    const Group& pg = part.groups[i];
    const auto& [base, len] = finals[i];
    std::string frag = base + "_frag";
    if (pg.kind == RKind::MaxMin || pg.kind == RKind::TopK ||
        pg.kind == RKind::Prod) {
      int axis = len == 1 ? 0 : 1;
      csect.push_back(treduce(
          {frag, len == 1 ? std::vector<TileRange>{rng(0, S)}
                          : std::vector<TileRange>{rng(0, len), rng(0, S)}},
          {base, {rng(0, len)}}, axis, pg.op));
      continue;
    }
    if (len == 1) {
      // scalar sum; a correction factor rides on the merge term
      bool corrected = g.merge->rhs->kind != IKind::Ref;
      if (corrected) {
        std::string tmp = base + "_corr";
        em2.declare("fragment", tmp, {S});
        csect.push_back(tparallel(iref(tmp, {ivar("k")}),
                                  rw(g.merge->rhs, cm), {{"k", S}}));
        csect.push_back(
            treduce({tmp, {rng(0, S)}}, {base, {rng(0, 1)}}, 0, "add"));
      } else {
        csect.push_back(
            treduce({frag, {rng(0, S)}}, {base, {rng(0, 1)}}, 0, "add"));
      }
    } else {
      if (g.corr) {
        csect.push_back(tparallel(
            iref(frag, {ivar("j"), ivar("k")}),
            ibin(BinOp::Mul, iref(frag, {ivar("j"), ivar("k")}),
                 rw(g.corr->rhs, cm)),
            {{"j", len}, {"k", S}}));
      }
      csect.push_back(treduce({frag, {rng(0, len), rng(0, S)}},
                              {base, {rng(0, len)}}, 1, "add"));
    }
  }
  csect.push_back(tcomment("copy-out"));
  for (const auto& [base, len] : finals)
    csect.push_back(
        tcopy({base, {rng(0, len)}}, {base + "_out", {rng(0, len)}}));
  for (auto& c : em2.alloc_comments()) out.push_back(c);
  for (auto& s : csect) out.push_back(s);
  return out;
}

}  // namespace

// ---- tensorize entry --------------------------------------------------------

TileIR tensorize(const ScalarIR& ir, const TileConfig& tiles) {
  TileIR out;
  if (ir.stmts.empty()) return out;
  bool multi = ir.stmts[0]->kind == SKind::Comment &&
               ir.stmts[0]->text == "partial segment";
  if (!multi) {
    Section sec = scrape_section(ir.stmts);
    bool att = !sec.groups.empty() && sec.groups[0].producer;
    out.stmts = att ? tensorize_attention_single(sec, tiles)
                    : tensorize_generic_single(sec, tiles);
    return out;
  }
  // partial wrapper + combine
  std::size_t ci = 0;
  for (std::size_t i = 2; i < ir.stmts.size(); ++i) {
    if (ir.stmts[i]->kind == SKind::Comment &&
        ir.stmts[i]->text == "combine") {
      ci = i;
      break;
    }
  }
  if (ci == 0) throw TensorizeError("split program lacks a combine section");
  const SStmt& wrap = ir.stmts[1];
  Section part;
  if (wrap->kind == SKind::Grid) {
    part.has_row = true;
    part.row_var = wrap->vars[0];
    part.rows = wrap->extents[0];
    part.splits = wrap->extents[1];
  } else {
    part.splits = wrap->extents[0];
  }
  for (const auto& s : wrap->body) {
    if (is_stream_loop_with_offset(s)) {
      part.stream_var = s->vars[0];
      part.stream = s->extents[0];
      part.groups = scrape_groups(s->body);
    } else {
      part.inits.push_back(s.get());
    }
  }
  Combine comb = scrape_combine(ir.stmts, ci + 1);
  bool att = !part.groups.empty() && part.groups[0].producer;
  out.stmts = att ? tensorize_attention_multi(part, comb, tiles)
                  : tensorize_generic_multi(part, comb, tiles);
  return out;
}

// ---- rendering --------------------------------------------------------------

namespace {

std::string render_tile(const TileRef& t) {
  std::string s = t.name + "[";
  for (std::size_t i = 0; i < t.ranges.size(); ++i) {
    if (i) s += ", ";
    s += render(t.ranges[i].lo) + ":" + render(t.ranges[i].hi);
  }
  return s + "]";
}

void trender(const TStmt& s, int ind, std::string& out) {
  out.append(static_cast<std::size_t>(ind) * 4, ' ');
  switch (s->kind) {
    case TKind::Comment:
      out += "# " + s->text + "\n";
      return;
    case TKind::Launch:
      out += s->var + " = launch_thread(\"" + s->thread + "\", " +
             std::to_string(s->extent) + ")\n";
      return;
    case TKind::For:
      out += "for " + s->var + " in range(" + std::to_string(s->extent) +
             "):\n";
      for (const auto& b : s->body) trender(b, ind + 1, out);
      return;
    case TKind::Assign:
      out += s->var + " = " + render(s->rhs) + "\n";
      return;
    case TKind::Copy:
      out += "copy(" + render_tile(s->a) + ", " + render_tile(s->b) + ")\n";
      return;
    case TKind::Gemm:
      out += "gemm(" + render_tile(s->a) + ", " + render_tile(s->b) + ", " +
             render_tile(s->c) + ")\n";
      return;
    case TKind::Reduce:
      out += "reduce(" + render_tile(s->a) + ", " + render_tile(s->b) +
             ", axis=" + std::to_string(s->axis) + ", op=" + s->op + ")\n";
      return;
    case TKind::Parallel: {
      out += "parallel(" + render(s->plhs) + ", " + render(s->rhs);
      for (const auto& [v, n] : s->iters)
        out += ", " + v + ", " + std::to_string(n);
      out += ")\n";
      return;
    }
    case TKind::Fill:
      out += "fill(" + render_tile(s->a) + ", " + render(inum(s->fill_value)) +
             ")\n";
      return;
  }
}

}  // namespace

std::string render(const TileIR& ir) {
  std::string out;
  for (const auto& s : ir.stmts) trender(s, 0, out);
  return out;
}

// ---- parsing ----------------------------------------------------------------

namespace {

void tsplit_args(const std::string& s, int line,
                 std::vector<std::string>& out) {
  int depth = 0;
  std::string cur;
  for (char c : s) {
    if (c == '(' || c == '[') ++depth;
    if (c == ')' || c == ']') --depth;
    if (depth < 0) throw IRParseError(line, "unbalanced brackets");
    if (c == ',' && depth == 0) {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
}

std::string ttrim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t");
  return s.substr(a, b - a + 1);
}

bool is_ident(const std::string& s) {
  if (s.empty() || (!std::isalpha(static_cast<unsigned char>(s[0])) &&
                    s[0] != '_'))
    return false;
  for (char c : s)
    if (!std::isalnum(static_cast<unsigned char>(c)) && c != '_' && c != '.')
      return false;
  return true;
}

TileRef parse_tile(const std::string& raw, int line) {
  std::string s = ttrim(raw);
  std::size_t lb = s.find('[');
  if (lb == std::string::npos || s.back() != ']')
    throw IRParseError(line, "expected tile reference: " + s);
  TileRef t;
  t.name = s.substr(0, lb);
  if (!is_ident(t.name)) throw IRParseError(line, "bad tile name: " + t.name);
  std::vector<std::string> parts;
  tsplit_args(s.substr(lb + 1, s.size() - lb - 2), line, parts);
  for (const auto& p : parts) {
    int depth = 0;
    std::size_t colon = std::string::npos;
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (p[i] == '(' || p[i] == '[') ++depth;
      if (p[i] == ')' || p[i] == ']') --depth;
      if (p[i] == ':' && depth == 0) {
        colon = i;
        break;
      }
    }
    if (colon == std::string::npos)
      throw IRParseError(line, "tile range needs lo:hi");
    t.ranges.push_back({parse_iexpr_text(ttrim(p.substr(0, colon)), line),
                        parse_iexpr_text(ttrim(p.substr(colon + 1)), line)});
  }
  if (t.ranges.empty()) throw IRParseError(line, "tile needs ranges");
  return t;
}

long long parse_ll(const std::string& s, int line) {
  try {
    std::size_t pos = 0;
    long long v = std::stoll(ttrim(s), &pos);
    if (pos != ttrim(s).size()) throw std::invalid_argument("trailing");
    return v;
  } catch (const std::exception&) {
    throw IRParseError(line, "expected integer: " + s);
  }
}

// "name(args)" with a full-line closing paren
std::string call_body(const std::string& s, const std::string& head,
                      int line) {
  if (s.back() != ')')
    throw IRParseError(line, head + " statement must end with ')'");
  return s.substr(head.size() + 1, s.size() - head.size() - 2);
}

TStmt parse_tstmt(const std::string& s, int line) {
  if (s[0] == '#') return tcomment(ttrim(s.substr(1)));
  if (s.rfind("for ", 0) == 0) {
    std::size_t in = s.find(" in range(");
    if (in == std::string::npos || s.substr(s.size() - 2) != "):")
      throw IRParseError(line, "malformed for header");
    std::string var = ttrim(s.substr(4, in - 4));
    if (!is_ident(var)) throw IRParseError(line, "bad loop variable");
    TStmt f = tfor(var, parse_ll(s.substr(in + 10, s.size() - in - 12), line));
    return f;
  }
  for (const char* head : {"copy", "gemm", "reduce", "parallel", "fill"}) {
    std::string h = head;
    if (s.rfind(h + "(", 0) != 0) continue;
    std::vector<std::string> args;
    tsplit_args(call_body(s, h, line), line, args);
    if (h == "copy") {
      if (args.size() != 2) throw IRParseError(line, "copy takes 2 operands");
      return tcopy(parse_tile(args[0], line), parse_tile(args[1], line));
    }
    if (h == "gemm") {
      if (args.size() != 3) throw IRParseError(line, "gemm takes 3 operands");
      return tgemm(parse_tile(args[0], line), parse_tile(args[1], line),
                   parse_tile(args[2], line));
    }
    if (h == "fill") {
      if (args.size() != 2) throw IRParseError(line, "fill takes 2 operands");
      IExpr v = parse_iexpr_text(ttrim(args[1]), line);
      double lit;
      if (v->kind == IKind::Num)
        lit = v->num;
      else if (v->kind == IKind::Neg && v->a->kind == IKind::Num)
        lit = -v->a->num;
      else
        throw IRParseError(line, "fill value must be a literal");
      return tfill(parse_tile(args[0], line), lit);
    }
    if (h == "reduce") {
      if (args.size() != 4) throw IRParseError(line, "reduce takes 4 operands");
      std::string ax = ttrim(args[2]);
      if (ax.rfind("axis", 0) != 0)
        throw IRParseError(line, "expected axis=...");
      ax = ttrim(ax.substr(4));
      if (ax.empty() || ax[0] != '=')
        throw IRParseError(line, "expected axis=...");
      long long axis = parse_ll(ax.substr(1), line);
      std::string op = ttrim(args[3]);
      if (op.rfind("op", 0) != 0) throw IRParseError(line, "expected op=...");
      op = ttrim(op.substr(2));
      if (op.empty() || op[0] != '=') throw IRParseError(line, "expected op=...");
      op = ttrim(op.substr(1));
      if (!is_ident(op)) throw IRParseError(line, "bad reduce op");
      return treduce(parse_tile(args[0], line), parse_tile(args[1], line),
                     static_cast<int>(axis), op);
    }
    // parallel
    if (args.size() < 4 || args.size() % 2 != 0)
      throw IRParseError(line, "parallel takes lhs, rhs, then var/extent pairs");
    IExpr lhs = parse_iexpr_text(ttrim(args[0]), line);
    if (lhs->kind != IKind::Ref || lhs->args.empty())
      throw IRParseError(line, "parallel target must be an indexed reference");
    IExpr rhs = parse_iexpr_text(ttrim(args[1]), line);
    std::vector<std::pair<std::string, long long>> iters;
    for (std::size_t i = 2; i < args.size(); i += 2) {
      std::string v = ttrim(args[i]);
      if (!is_ident(v)) throw IRParseError(line, "bad parallel variable");
      iters.emplace_back(v, parse_ll(args[i + 1], line));
    }
    return tparallel(lhs, rhs, std::move(iters));
  }
  // launch or plain assignment
  std::size_t eq = s.find('=');
  if (eq == std::string::npos)
    throw IRParseError(line, "unrecognized statement: " + s);
  std::string var = ttrim(s.substr(0, eq));
  std::string rest = ttrim(s.substr(eq + 1));
  if (!is_ident(var)) throw IRParseError(line, "bad assignment target");
  if (rest.rfind("launch_thread(", 0) == 0) {
    std::string body = call_body(rest, "launch_thread", line);
    std::vector<std::string> args;
    tsplit_args(body, line, args);
    if (args.size() != 2) throw IRParseError(line, "launch_thread takes 2 args");
    std::string th = ttrim(args[0]);
    if (th.size() < 2 || th.front() != '"' || th.back() != '"')
      throw IRParseError(line, "launch_thread needs a quoted thread axis");
    return tlaunch(var, th.substr(1, th.size() - 2), parse_ll(args[1], line));
  }
  return tassign(var, parse_iexpr_text(rest, line));
}

}  // namespace

TileIR parse_tile_ir(const std::string& text) {
  TileIR ir;
  std::vector<std::vector<TStmt>*> stack = {&ir.stmts};
  std::istringstream in(text);
  std::string raw;
  int line = 0;
  while (std::getline(in, raw)) {
    ++line;
    std::string s = raw;
    while (!s.empty() && (s.back() == '\r' || s.back() == ' ')) s.pop_back();
    if (ttrim(s).empty()) continue;
    std::size_t ind = 0;
    while (ind < s.size() && s[ind] == ' ') ++ind;
    if (ind % 4 != 0) throw IRParseError(line, "indentation must be 4 spaces");
    std::size_t depth = ind / 4;
    if (depth >= stack.size()) throw IRParseError(line, "unexpected indent");
    stack.resize(depth + 1);
    TStmt st = parse_tstmt(s.substr(ind), line);
    stack.back()->push_back(st);
    if (st->kind == TKind::For) stack.push_back(&st->body);
  }
  return ir;
}

// ---- validation -------------------------------------------------------------

namespace {

struct BufInfo {
  int rank = -1;
  std::vector<long long> dims;  // -1 marks an unknown extent
};

struct VState {
  std::map<std::string, BufInfo> bufs;
  std::set<std::string> globals;  // off-chip arrays, extents unchecked
  std::set<std::string> vars;
  std::vector<std::string>* problems;

  void note(const std::string& p) { problems->push_back(p); }
};

bool const_val(const IExpr& e, long long& out) {
  if (e->kind == IKind::Num) {
    out = static_cast<long long>(e->num);
    return true;
  }
  if (e->kind == IKind::Neg && e->a->kind == IKind::Num) {
    out = -static_cast<long long>(e->a->num);
    return true;
  }
  return false;
}

void check_expr_vars(const IExpr& e, const VState& st,
                     const std::set<std::string>& local,
                     std::vector<std::string>& missing) {
  if (e->kind == IKind::Var) {
    if (!st.vars.count(e->name) && !local.count(e->name))
      missing.push_back(e->name);
    return;
  }
  if (e->a) check_expr_vars(e->a, st, local, missing);
  if (e->b) check_expr_vars(e->b, st, local, missing);
  for (const auto& a : e->args) check_expr_vars(a, st, local, missing);
}

void define_tile(VState& st, const TileRef& t) {
  BufInfo info;
  info.rank = static_cast<int>(t.ranges.size());
  for (const auto& r : t.ranges) {
    long long lo, hi;
    if (const_val(r.lo, lo) && const_val(r.hi, hi) && lo == 0)
      info.dims.push_back(hi);
    else
      info.dims.push_back(-1);
  }
  st.bufs[t.name] = info;
}

void use_tile(VState& st, const TileRef& t, bool may_be_global) {
  std::vector<std::string> missing;
  for (const auto& r : t.ranges) {
    check_expr_vars(r.lo, st, {}, missing);
    check_expr_vars(r.hi, st, {}, missing);
  }
  for (const auto& v : missing)
    st.note("undefined variable '" + v + "' in ranges of " + t.name);
  auto it = st.bufs.find(t.name);
  if (it == st.bufs.end()) {
    if (st.globals.count(t.name)) return;
    if (may_be_global) {
      st.globals.insert(t.name);
      return;
    }
    st.note("buffer '" + t.name + "' used before introduction");
    return;
  }
  const BufInfo& b = it->second;
  if (b.rank != static_cast<int>(t.ranges.size())) {
    st.note("buffer '" + t.name + "' rank mismatch");
    return;
  }
  for (std::size_t i = 0; i < t.ranges.size(); ++i) {
    long long cap = b.dims[i];
    if (cap < 0) continue;
    long long lo, hi;
    if (const_val(t.ranges[i].lo, lo) && const_val(t.ranges[i].hi, hi)) {
      if (lo < 0 || hi > cap || lo > hi)
        st.note("range " + std::to_string(lo) + ":" + std::to_string(hi) +
                " exceeds extent " + std::to_string(cap) + " of " + t.name);
    }
  }
}

// references inside parallel / assign right-hand sides
void use_refs(VState& st, const IExpr& e,
              const std::map<std::string, long long>& local) {
  if (e->kind == IKind::Ref) {
    auto it = st.bufs.find(e->name);
    if (it == st.bufs.end()) {
      if (!st.globals.count(e->name))
        st.note("buffer '" + e->name + "' read before introduction");
    } else if (it->second.rank != static_cast<int>(e->args.size())) {
      st.note("buffer '" + e->name + "' rank mismatch");
    } else {
      for (std::size_t i = 0; i < e->args.size(); ++i) {
        long long cap = it->second.dims[i];
        if (cap < 0) continue;
        const IExpr& ix = e->args[i];
        long long v;
        if (const_val(ix, v)) {
          if (v < 0 || v >= cap)
            st.note("index " + std::to_string(v) + " out of bounds in " +
                    e->name);
        } else if (ix->kind == IKind::Var) {
          auto lv = local.find(ix->name);
          if (lv != local.end() && lv->second > cap)
            st.note("iteration extent " + std::to_string(lv->second) +
                    " exceeds dim " + std::to_string(cap) + " of " + e->name);
        }
      }
    }
  }
  if (e->kind == IKind::Var && !st.vars.count(e->name) &&
      !local.count(e->name))
    st.note("undefined variable '" + e->name + "'");
  if (e->a) use_refs(st, e->a, local);
  if (e->b) use_refs(st, e->b, local);
  if (e->kind != IKind::Ref) {
    for (const auto& a : e->args) use_refs(st, a, local);
  } else {
    for (const auto& a : e->args) {
      if (a->kind == IKind::Var) {
        if (!st.vars.count(a->name) && !local.count(a->name))
          st.note("undefined variable '" + a->name + "' indexing " + e->name);
      } else if (a->kind != IKind::Num) {
        use_refs(st, a, local);
      }
    }
  }
}

void validate_stmts(VState& st, const std::vector<TStmt>& stmts) {
  for (const auto& s : stmts) {
    switch (s->kind) {
      case TKind::Comment: {
        // "alloc <scope> name[d, d]" introduces a buffer declaration
        if (s->text.rfind("alloc ", 0) == 0) {
          std::istringstream is(s->text);
          std::string kw, scope, rest;
          is >> kw >> scope;
          std::getline(is, rest);
          rest = ttrim(rest);
          std::size_t lb = rest.find('[');
          if (scope != "shared" && scope != "fragment") {
            st.note("alloc scope must be shared or fragment");
            break;
          }
          if (lb == std::string::npos || rest.back() != ']') {
            st.note("malformed alloc declaration: " + s->text);
            break;
          }
          BufInfo info;
          std::vector<std::string> dims;
          tsplit_args(rest.substr(lb + 1, rest.size() - lb - 2), 0, dims);
          for (const auto& d : dims)
            info.dims.push_back(std::atoll(ttrim(d).c_str()));
          info.rank = static_cast<int>(info.dims.size());
          st.bufs[rest.substr(0, lb)] = info;
        }
        break;
      }
      case TKind::Launch:
        if (s->extent <= 0) st.note("launch extent must be positive");
        st.vars.insert(s->var);
        break;
      case TKind::For:
        if (s->extent <= 0) st.note("loop extent must be positive");
        st.vars.insert(s->var);
        validate_stmts(st, s->body);
        break;
      case TKind::Assign:
        use_refs(st, s->rhs, {});
        st.vars.insert(s->var);
        break;
      case TKind::Copy: {
        use_tile(st, s->a, true);
        if (st.bufs.count(s->b.name)) {
          use_tile(st, s->b, false);
          define_tile(st, s->b);
        } else if (!st.globals.count(s->b.name)) {
          // a fresh destination with zero-based constant ranges is an
          // on-chip introduction; anything else is a global array
          bool onchip = !s->b.ranges.empty();
          for (const auto& r : s->b.ranges) {
            long long lo, hi;
            onchip &= const_val(r.lo, lo) && const_val(r.hi, hi) && lo == 0;
          }
          if (onchip)
            define_tile(st, s->b);
          else
            use_tile(st, s->b, true);
        } else {
          use_tile(st, s->b, true);
        }
        break;
      }
      case TKind::Gemm:
        use_tile(st, s->a, false);
        use_tile(st, s->b, false);
        use_tile(st, s->c, false);
        break;
      case TKind::Reduce:
        use_tile(st, s->a, false);
        use_tile(st, s->b, false);
        if (s->axis < 0 || s->axis >= static_cast<int>(s->a.ranges.size()))
          st.note("reduce axis " + std::to_string(s->axis) +
                  " out of range for " + s->a.name);
        if (s->op != "add" && s->op != "mul" && s->op != "max" &&
            s->op != "min" && s->op != "topk")
          st.note("unknown reduce op '" + s->op + "'");
        break;
      case TKind::Parallel: {
        std::map<std::string, long long> local;
        for (const auto& [v, n] : s->iters) {
          if (n <= 0) st.note("parallel extent must be positive");
          local[v] = n;
        }
        use_refs(st, s->rhs, local);
        // the target introduces (or extends) its buffer
        if (!st.bufs.count(s->plhs->name)) {
          BufInfo info;
          info.rank = static_cast<int>(s->plhs->args.size());
          for (const auto& ix : s->plhs->args) {
            long long v;
            if (ix->kind == IKind::Var && local.count(ix->name))
              info.dims.push_back(local[ix->name]);
            else if (const_val(ix, v))
              info.dims.push_back(v + 1);
            else
              info.dims.push_back(-1);
          }
          st.bufs[s->plhs->name] = info;
        } else {
          use_refs(st, s->plhs, local);
        }
        for (const auto& ix : s->plhs->args) {
          if (ix->kind == IKind::Var && !local.count(ix->name) &&
              !st.vars.count(ix->name))
            st.note("undefined variable '" + ix->name + "' in parallel target");
        }
        break;
      }
      case TKind::Fill:
        define_tile(st, s->a);
        use_tile(st, s->a, false);
        break;
    }
  }
}

}  // namespace

std::vector<std::string> validate(const TileIR& ir) {
  std::vector<std::string> problems;
  VState st;
  st.problems = &problems;
  validate_stmts(st, ir.stmts);
  return problems;
}

}  // namespace redfuse
