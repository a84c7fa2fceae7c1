#include "redfuse/scalar_ir.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <functional>
#include <sstream>

namespace redfuse {

// ---- IR expression builders -------------------------------------------------

namespace {

IExpr mk(IExprNode n) { return std::make_shared<const IExprNode>(std::move(n)); }

}  // namespace

IExpr inum(double v) {
  IExprNode n;
  n.kind = IKind::Num;
  n.num = v;
  return mk(std::move(n));
}

IExpr ivar(const std::string& name) {
  IExprNode n;
  n.kind = IKind::Var;
  n.name = name;
  return mk(std::move(n));
}

IExpr iref(const std::string& name, std::vector<IExpr> idx) {
  IExprNode n;
  n.kind = IKind::Ref;
  n.name = name;
  n.args = std::move(idx);
  return mk(std::move(n));
}

IExpr ineg(IExpr a) {
  IExprNode n;
  n.kind = IKind::Neg;
  n.a = std::move(a);
  return mk(std::move(n));
}

IExpr ibin(BinOp op, IExpr a, IExpr b) {
  IExprNode n;
  n.kind = IKind::Bin;
  n.bop = op;
  n.a = std::move(a);
  n.b = std::move(b);
  return mk(std::move(n));
}

IExpr icall(const std::string& fn, std::vector<IExpr> args) {
  IExprNode n;
  n.kind = IKind::Call;
  n.name = fn;
  n.args = std::move(args);
  return mk(std::move(n));
}

// ---- rendering --------------------------------------------------------------

namespace {

int iprec(const IExpr& e) {
  if (e->kind == IKind::Bin) {
    switch (e->bop) {
      case BinOp::Add:
      case BinOp::Sub:
        return 1;
      case BinOp::Mul:
      case BinOp::Div:
        return 2;
      default:
        break;
    }
  }
  if (e->kind == IKind::Neg) return 3;
  if (e->kind == IKind::Num && e->num < 0) return 3;
  return 4;
}

void irender(std::ostringstream& os, const IExpr& e, int min_prec);

void irender_child(std::ostringstream& os, const IExpr& e, int min_prec) {
  if (iprec(e) < min_prec) {
    os << "(";
    irender(os, e, 0);
    os << ")";
  } else {
    irender(os, e, 0);
  }
}

const char* bsym(BinOp op) {
  switch (op) {
    case BinOp::Add:
      return "+";
    case BinOp::Sub:
      return "-";
    case BinOp::Mul:
      return "*";
    case BinOp::Div:
      return "/";
    default:
      return "?";
  }
}

void irender(std::ostringstream& os, const IExpr& e, int) {
  switch (e->kind) {
    case IKind::Num:
      if (std::isinf(e->num))
        os << (e->num < 0 ? "-inf" : "inf");
      else
        os << format_number(e->num);
      break;
    case IKind::Var:
      os << e->name;
      break;
    case IKind::Ref:
      os << e->name;
      if (!e->args.empty()) {
        os << "[";
        for (std::size_t i = 0; i < e->args.size(); ++i) {
          if (i) os << ", ";
          irender(os, e->args[i], 0);
        }
        os << "]";
      }
      break;
    case IKind::Neg:
      os << "-";
      irender_child(os, e->a, 3);
      break;
    case IKind::Bin: {
      int p = iprec(e);
      irender_child(os, e->a, p);
      os << " " << bsym(e->bop) << " ";
      irender_child(os, e->b, p + (e->bop == BinOp::Sub || e->bop == BinOp::Div
                                       ? 1
                                       : 0));
      break;
    }
    case IKind::Call:
      os << e->name << "(";
      for (std::size_t i = 0; i < e->args.size(); ++i) {
        if (i) os << ", ";
        irender(os, e->args[i], 0);
      }
      os << ")";
      break;
  }
}

}  // namespace

std::string render(const IExpr& e) {
  std::ostringstream os;
  irender(os, e, 0);
  return os.str();
}

// ---- cascade expression -> IR expression ------------------------------------

namespace {

struct LowerCtx {
  // Index expressions for each input by name.
  std::map<std::string, std::vector<IExpr>> input_idx;
  // Accumulator reference per dep id, current and snapshot flavor.
  std::map<int, IExpr> dep_cur;
  std::map<int, IExpr> dep_prev;
  IExpr free_var;
};

IExpr lower(const Expr& e, const LowerCtx& ctx) {
  switch (e->kind) {
    case ExprKind::Constant:
      return e->value < 0 ? ineg(inum(-e->value)) : inum(e->value);
    case ExprKind::Input: {
      auto it = ctx.input_idx.find(e->name);
      if (it == ctx.input_idx.end())
        throw std::logic_error("no index mapping for input " + e->name);
      return iref(e->name, it->second);
    }
    case ExprKind::Dep: {
      const auto& m = e->dep_prev ? ctx.dep_prev : ctx.dep_cur;
      auto it = m.find(e->dep);
      if (it == m.end())
        throw std::logic_error("no accumulator mapping for dep " +
                               std::to_string(e->dep));
      return it->second;
    }
    case ExprKind::FreeIndex:
      return ctx.free_var;
    case ExprKind::Unary: {
      IExpr a = lower(e->a, ctx);
      switch (e->uop) {
        case UnOp::Neg:
          return ineg(a);
        case UnOp::Exp:
          return icall("exp", {a});
        case UnOp::Log2:
          return icall("log2", {a});
        case UnOp::Ln:
          return icall("ln", {a});
        case UnOp::Abs:
          return icall("abs", {a});
        case UnOp::Sqrt:
          return icall("sqrt", {a});
        case UnOp::Sign:
          return icall("sign", {a});
        case UnOp::Recip:
          return ibin(BinOp::Div, inum(1.0), a);
      }
      break;
    }
    case ExprKind::Binary: {
      IExpr a = lower(e->a, ctx);
      IExpr b = lower(e->b, ctx);
      switch (e->bop) {
        case BinOp::Max:
          return icall("max", {a, b});
        case BinOp::Min:
          return icall("min", {a, b});
        case BinOp::Pow:
          return icall("pow", {a, b});
        default:
          return ibin(e->bop, a, b);
      }
    }
  }
  throw std::logic_error("unreachable expression kind");
}

// ---- statement builders -----------------------------------------------------

SStmt mkstmt(SStmtNode n) { return std::make_shared<SStmtNode>(std::move(n)); }

SStmt scomment(const std::string& text) {
  SStmtNode n;
  n.kind = SKind::Comment;
  n.text = text;
  return mkstmt(std::move(n));
}

SStmt sfor(const std::string& var, long long extent, std::vector<SStmt> body) {
  SStmtNode n;
  n.kind = SKind::For;
  n.vars = {var};
  n.extents = {extent};
  n.body = std::move(body);
  return mkstmt(std::move(n));
}

SStmt sgrid(std::vector<std::string> vars, std::vector<long long> extents,
            std::vector<SStmt> body) {
  SStmtNode n;
  n.kind = SKind::Grid;
  n.vars = std::move(vars);
  n.extents = std::move(extents);
  n.body = std::move(body);
  return mkstmt(std::move(n));
}

SStmt sassign(IExpr lhs, IExpr rhs) {
  SStmtNode n;
  n.kind = SKind::Assign;
  n.lhs = std::move(lhs);
  n.rhs = std::move(rhs);
  return mkstmt(std::move(n));
}

SStmt saccum(IExpr lhs, BinOp op, IExpr rhs) {
  SStmtNode n;
  n.kind = SKind::Accum;
  n.op = op;
  n.lhs = std::move(lhs);
  n.rhs = std::move(rhs);
  return mkstmt(std::move(n));
}

bool contains_prev_dep(const Expr& e, int id) {
  if (!e) return false;
  if (e->kind == ExprKind::Dep) return e->dep == id && e->dep_prev;
  return contains_prev_dep(e->a, id) || contains_prev_dep(e->b, id);
}

double init_value(const ReductionSpec& r) {
  switch (r.op) {
    case ReduceOp::Sum:
      return 0.0;
    case ReduceOp::Prod:
      return 1.0;
    case ReduceOp::Max:
      // A max over an absolute value has 0 as a usable lower bound, which
      // keeps ratio-style corrections finite from the first element on.
      return r.body && r.body->kind == ExprKind::Unary &&
                     r.body->uop == UnOp::Abs
                 ? 0.0
                 : -std::numeric_limits<double>::infinity();
    case ReduceOp::Min:
      return std::numeric_limits<double>::infinity();
    case ReduceOp::TopK:
      return 0.0;  // no scalar state; tuple state starts empty
  }
  return 0.0;
}

const char* op_word(ReduceOp op) {
  switch (op) {
    case ReduceOp::Sum:
      return "sum";
    case ReduceOp::Prod:
      return "prod";
    case ReduceOp::Max:
      return "max";
    case ReduceOp::Min:
      return "min";
    case ReduceOp::TopK:
      return "topk";
  }
  return "?";
}

// Naming scheme for one emission: accumulator/loop names plus how inputs and
// accumulators are indexed in each region.
struct EmitNames {
  bool attention = false;
  std::string stream = "i0";       // element loop var
  std::string freev = "i1";        // free-axis loop var
  std::string row;                 // outer row var (attention only)
  std::map<int, std::string> acc;  // reduction id -> accumulator buffer
  std::string in_a, in_b;          // attention: logits / value tensors
};

EmitNames make_names(const FusedProgram& prog) {
  EmitNames n;
  if (attention_shaped(prog.spec)) {
    n.attention = true;
    n.stream = "kvs";
    n.freev = "d";
    n.row = "qs";
    n.acc = {{1, "pmax"}, {2, "psum"}, {3, "o"}};
    n.in_a = prog.spec.reductions[0].body->name;
    for (const auto& in : prog.spec.inputs)
      if (in.free_len > 0) n.in_b = in.name;
  } else {
    for (const auto& r : prog.spec.reductions)
      n.acc[r.id] = "d" + std::to_string(r.id);
  }
  return n;
}

// Everything needed to instantiate the per-element template in one region
// (single-segment body, or the partial loop of a multi-segment emission).
struct Region {
  LowerCtx ctx;             // bodies and corrections lower through this
  std::map<int, IExpr> acc;       // accumulator ref per reduction
  std::map<int, IExpr> acc_prev;  // snapshot ref per reduction
  std::function<IExpr(int id, IExpr lane)> lane_acc;       // free-axis element
  std::function<IExpr(int id, IExpr lane)> lane_acc_prev;  // unused lanes ok
};

// Emits store-prev / correct / reduce for every reduction into `out`,
// assuming the element the stream variable points at is being ingested.
void emit_element_template(const FusedProgram& prog, const EmitNames& names,
                           const Region& rg, bool full,
                           std::vector<SStmt>& out) {
  const CascadeSpec& spec = prog.spec;
  for (const auto& r : spec.reductions) {
    const Decomposition& dc = prog.decomp(r.id);

    // Reduction header comment.
    if (names.attention) {
      std::ostringstream hd;
      if (r.id == 1)
        hd << "reduction2: max(" << names.in_a << ")";
      else if (r.id == 2)
        hd << "reduction3: sum(exp(" << names.in_a << " - pmax))";
      else
        hd << "reduction4: gemm(exp(" << names.in_a << " - pmax) / psum, "
           << names.in_b << ")";
      out.push_back(scomment(hd.str()));
    } else {
      out.push_back(scomment("reduction" + std::to_string(r.id) + ": " +
                             op_word(r.op) + "(" + render(lower(r.body, rg.ctx)) +
                             ")"));
    }

    // Step 1: store previous result, only when a later correction reads it.
    bool store_prev = full && r.free_len <= 1 && r.op != ReduceOp::TopK;
    for (const auto& later : prog.decomps)
      if (later.id > r.id && later.corr &&
          contains_prev_dep(later.corr, r.id))
        store_prev = true;
    if (store_prev) {
      out.push_back(scomment("step 1. store previous result"));
      out.push_back(sassign(rg.acc_prev.at(r.id), rg.acc.at(r.id)));
    }

    // Step 2: apply correction, only when the reduction has dependencies.
    bool correct = !dc.h_identity ||
                   (full && r.op != ReduceOp::TopK && r.op != ReduceOp::Max &&
                    r.op != ReduceOp::Min);
    if (correct) {
      if (!dc.h_identity && !dc.corr)
        throw std::logic_error("missing correction rule for reduction " +
                               std::to_string(r.id));
      out.push_back(scomment("step 2. apply correction"));
      IExpr corr = dc.h_identity ? inum(1.0) : lower(dc.corr, rg.ctx);
      if (r.free_len > 1) {
        IExpr lane = ivar(names.freev);
        out.push_back(sfor(
            names.freev, r.free_len,
            {saccum(rg.lane_acc(r.id, lane), BinOp::Mul, corr)}));
      } else {
        out.push_back(saccum(rg.acc.at(r.id), BinOp::Mul, corr));
      }
    }

    // Step 3: perform the reduction itself.
    out.push_back(scomment("step 3. perform reduction"));
    IExpr term = lower(r.body, rg.ctx);
    switch (r.op) {
      case ReduceOp::Sum:
        if (r.free_len > 1) {
          IExpr lane = ivar(names.freev);
          out.push_back(sfor(
              names.freev, r.free_len,
              {saccum(rg.lane_acc(r.id, lane), BinOp::Add, term)}));
        } else {
          out.push_back(saccum(rg.acc.at(r.id), BinOp::Add, term));
        }
        break;
      case ReduceOp::Prod:
        if (!dc.h_identity)
          throw std::logic_error(
              "scalar IR emission supports prod reductions without "
              "dependencies only");
        out.push_back(saccum(rg.acc.at(r.id), BinOp::Mul, term));
        break;
      case ReduceOp::Max:
      case ReduceOp::Min: {
        const char* fn = r.op == ReduceOp::Max ? "max" : "min";
        out.push_back(sassign(rg.acc.at(r.id),
                              icall(fn, {rg.acc.at(r.id), term})));
        break;
      }
      case ReduceOp::TopK:
        out.push_back(sassign(
            rg.acc.at(r.id),
            icall("topk", {rg.acc.at(r.id), term,
                           inum(static_cast<double>(r.topk))})));
        break;
    }
  }
}

// Initialization assignments for a set of accumulator refs.
void emit_inits(const CascadeSpec& spec, const EmitNames& names,
                const Region& rg, std::vector<SStmt>& out) {
  for (const auto& r : spec.reductions) {
    if (r.op == ReduceOp::TopK) continue;  // tuple state starts empty
    if (r.free_len > 1) {
      IExpr lane = ivar(names.freev);
      out.push_back(sfor(names.freev, r.free_len,
                         {sassign(rg.lane_acc(r.id, lane),
                                  inum(init_value(r)))}));
    } else {
      out.push_back(sassign(rg.acc.at(r.id), inum(init_value(r))));
    }
  }
}

// The attention producer: a gemm that materializes the logits consumed by
// the cascade.
void emit_producer(const EmitNames& names, long long hd,
                   const IExpr& logit_ref, const IExpr& kv_index,
                   std::vector<SStmt>& out) {
  out.push_back(scomment("reduction1: gemm(Q,K)"));
  IExpr lane = ivar(names.freev);
  IExpr term = ibin(BinOp::Mul, iref("Q", {ivar(names.row), lane}),
                    iref("K", {kv_index, lane}));
  out.push_back(sfor(names.freev, hd, {saccum(logit_ref, BinOp::Add, term)}));
}

}  // namespace

bool attention_shaped(const CascadeSpec& spec) {
  if (spec.reductions.size() != 3) return false;
  const auto& r1 = spec.reductions[0];
  const auto& r2 = spec.reductions[1];
  const auto& r3 = spec.reductions[2];
  if (r1.op != ReduceOp::Max || r2.op != ReduceOp::Sum ||
      r3.op != ReduceOp::Sum)
    return false;
  if (r1.free_len != 1 || r2.free_len != 1 || r3.free_len <= 1) return false;
  if (!r1.body || r1.body->kind != ExprKind::Input || r1.body->has_free)
    return false;
  Expr a = input_var(r1.body->name);
  if (!expr_equal(r2.body, exp_of(a - dep_var(1)))) return false;
  for (const auto& in : spec.inputs) {
    if (in.free_len <= 0) continue;
    Expr want = exp_of(a - dep_var(1)) / dep_var(2) * input_var(in.name, true);
    if (expr_equal(r3.body, want)) return true;
  }
  return false;
}

std::string scalar_acc_name(const FusedProgram& prog, int id) {
  return make_names(prog).acc.at(id);
}

ScalarIR emit_scalar_ir(const FusedProgram& prog,
                        const EmitStrategy& strategy) {
  const CascadeSpec& spec = prog.spec;
  EmitNames names = make_names(prog);
  long long l0 = spec.axis_len();
  long long hd = 0;
  for (const auto& in : spec.inputs)
    if (in.free_len > 0) hd = in.free_len;

  // Row indexing applies only to attention-shaped programs.
  auto row_idx = [&](std::vector<IExpr> tail) {
    std::vector<IExpr> idx;
    if (names.attention) idx.push_back(ivar(names.row));
    for (auto& e : tail) idx.push_back(std::move(e));
    return idx;
  };

  // Builds the region description for accumulators named base or base+suffix,
  // with the given extra trailing index (the split slot in partial loops).
  auto make_region = [&](const std::string& suffix, IExpr trailing,
                         IExpr stream_index) {
    Region rg;
    for (const auto& r : spec.reductions) {
      std::string acc = names.acc.at(r.id) + suffix;
      std::string prev = acc + "_prev";
      auto tail = [&](IExpr lane) {
        std::vector<IExpr> t;
        if (lane) t.push_back(lane);
        if (trailing) t.push_back(trailing);
        return row_idx(std::move(t));
      };
      if (r.free_len > 1) {
        rg.acc[r.id] = iref(acc, tail(nullptr));  // whole-lane ref (combine)
      } else {
        rg.acc[r.id] = iref(acc, tail(nullptr));
        rg.acc_prev[r.id] = iref(prev, tail(nullptr));
      }
      if (r.free_len <= 1) {
        rg.ctx.dep_cur[r.id] = rg.acc[r.id];
        rg.ctx.dep_prev[r.id] = rg.acc_prev[r.id];
      }
    }
    rg.lane_acc = [&names, suffix, trailing, row_idx](int id, IExpr lane) {
      std::vector<IExpr> t{lane};
      if (trailing) t.push_back(trailing);
      return iref(names.acc.at(id) + suffix, row_idx(std::move(t)));
    };
    rg.lane_acc_prev = rg.lane_acc;
    for (const auto& in : spec.inputs) {
      std::vector<IExpr> idx;
      if (in.free_len > 0) {
        idx = {stream_index, ivar(names.freev)};
      } else if (names.attention && in.name == names.in_a) {
        idx = row_idx({stream_index});
      } else {
        idx = {stream_index};
      }
      rg.ctx.input_idx[in.name] = idx;
    }
    rg.ctx.free_var = ivar(names.freev);
    return rg;
  };

  ScalarIR ir;
  if (strategy.segments <= 1) {
    Region rg = make_region("", nullptr, ivar(names.stream));
    std::vector<SStmt> stream_body;
    if (names.attention)
      emit_producer(names, hd, iref(names.in_a, row_idx({ivar(names.stream)})),
                    ivar(names.stream), stream_body);
    emit_element_template(prog, names, rg, strategy.full_template,
                          stream_body);

    std::vector<SStmt> outer;
    emit_inits(spec, names, rg, outer);
    outer.push_back(sfor(names.stream, l0, std::move(stream_body)));
    if (names.attention) {
      ir.stmts.push_back(sfor(names.row, strategy.rows, std::move(outer)));
    } else {
      ir.stmts = std::move(outer);
    }
    return ir;
  }

  // Multi-segment: independent streamed partials plus a combine section.
  long long s = strategy.segments;
  if (l0 % s != 0)
    throw IncompatibleSegmentation("segments " + std::to_string(s) +
                                   " do not divide axis length " +
                                   std::to_string(l0));
  long long seg = l0 / s;

  ir.stmts.push_back(scomment("partial segment"));
  IExpr split = ivar("split");
  IExpr offset = ivar("offset");
  Region part = make_region("_part", split, offset);
  std::vector<SStmt> stream_body;
  stream_body.push_back(sassign(
      iref("offset"),
      ibin(BinOp::Add, ibin(BinOp::Mul, split, inum(double(seg))),
           ivar(names.stream))));
  if (names.attention)
    emit_producer(names, hd, iref(names.in_a, row_idx({offset})), offset,
                  stream_body);
  emit_element_template(prog, names, part, strategy.full_template,
                        stream_body);

  std::vector<SStmt> part_outer;
  emit_inits(spec, names, part, part_outer);
  part_outer.push_back(sfor(names.stream, seg, std::move(stream_body)));
  if (names.attention) {
    ir.stmts.push_back(
        sgrid({names.row, "split"}, {strategy.rows, s}, std::move(part_outer)));
  } else {
    ir.stmts.push_back(sfor("split", s, std::move(part_outer)));
  }

  // Combine: fold the per-segment partials in slice order; corrections
  // retarget each partial from its own statistics to the final ones.
  ir.stmts.push_back(scomment("combine"));
  Region fin = make_region("", nullptr, ivar(names.stream));
  std::vector<SStmt> comb;
  emit_inits(spec, names, fin, comb);
  // Correction context: current deps resolve to finals, snapshots to the
  // split's partials.
  LowerCtx cctx = fin.ctx;
  for (const auto& r : spec.reductions)
    if (r.free_len <= 1) cctx.dep_prev[r.id] = part.acc.at(r.id);
  for (const auto& r : spec.reductions) {
    const Decomposition& dc = prog.decomp(r.id);
    std::vector<SStmt> body;
    IExpr corr = dc.h_identity ? nullptr : lower(dc.corr, cctx);
    // Per-lane partials are not read by any later correction, so they can be
    // rescaled in place. Scalar partials can be: a later correction must see
    // them untouched, so their correction folds into the accumulation.
    if (corr && r.free_len > 1) {
      IExpr lane = ivar(names.freev);
      body.push_back(sfor(names.freev, r.free_len,
                          {saccum(part.lane_acc(r.id, lane), BinOp::Mul,
                                  corr)}));
    }
    switch (r.op) {
      case ReduceOp::Sum:
        if (r.free_len > 1) {
          IExpr lane = ivar(names.freev);
          body.push_back(sfor(names.freev, r.free_len,
                              {saccum(fin.lane_acc(r.id, lane), BinOp::Add,
                                      part.lane_acc(r.id, lane))}));
        } else {
          IExpr term = part.acc.at(r.id);
          if (corr) term = ibin(BinOp::Mul, term, corr);
          body.push_back(saccum(fin.acc.at(r.id), BinOp::Add, term));
        }
        break;
      case ReduceOp::Prod:
        body.push_back(
            saccum(fin.acc.at(r.id), BinOp::Mul, part.acc.at(r.id)));
        break;
      case ReduceOp::Max:
      case ReduceOp::Min: {
        const char* fn = r.op == ReduceOp::Max ? "max" : "min";
        body.push_back(sassign(
            fin.acc.at(r.id),
            icall(fn, {fin.acc.at(r.id), part.acc.at(r.id)})));
        break;
      }
      case ReduceOp::TopK:
        body.push_back(sassign(
            fin.acc.at(r.id),
            icall("topk", {fin.acc.at(r.id), part.acc.at(r.id),
                           inum(static_cast<double>(r.topk))})));
        break;
    }
    comb.push_back(sfor("split", s, std::move(body)));
  }
  if (names.attention) {
    ir.stmts.push_back(sfor(names.row, strategy.rows, std::move(comb)));
  } else {
    for (auto& st : comb) ir.stmts.push_back(std::move(st));
  }
  return ir;
}

// ---- rendering of statements ------------------------------------------------

namespace {

void srender(std::ostringstream& os, const SStmt& st, int depth) {
  std::string pad(static_cast<std::size_t>(depth) * 4, ' ');
  switch (st->kind) {
    case SKind::Comment:
      os << pad << "# " << st->text << "\n";
      break;
    case SKind::For:
      os << pad << "for " << st->vars[0] << " in range(" << st->extents[0]
         << "):\n";
      for (const auto& c : st->body) srender(os, c, depth + 1);
      break;
    case SKind::Grid: {
      os << pad << "for ";
      for (std::size_t i = 0; i < st->vars.size(); ++i)
        os << (i ? ", " : "") << st->vars[i];
      os << " in grid(";
      for (std::size_t i = 0; i < st->extents.size(); ++i)
        os << (i ? ", " : "") << st->extents[i];
      os << "):\n";
      for (const auto& c : st->body) srender(os, c, depth + 1);
      break;
    }
    case SKind::Assign:
      os << pad << render(st->lhs) << " = " << render(st->rhs) << "\n";
      break;
    case SKind::Accum:
      os << pad << render(st->lhs) << (st->op == BinOp::Mul ? " *= " : " += ")
         << render(st->rhs) << "\n";
      break;
  }
}

}  // namespace

std::string render(const ScalarIR& ir) {
  std::ostringstream os;
  for (const auto& st : ir.stmts) srender(os, st, 0);
  return os.str();
}

// ---- parsing ----------------------------------------------------------------

namespace {

struct ITok {
  enum Kind { Num, Ident, Sym, End } kind = End;
  double num = 0;
  std::string text;
};

class ILexer {
 public:
  ILexer(const std::string& s, int line) : s_(s), line_(line) { advance(); }

  const ITok& peek() const { return tok_; }

  ITok take() {
    ITok t = tok_;
    advance();
    return t;
  }

  [[noreturn]] void fail(const std::string& msg) const {
    throw IRParseError(line_, msg);
  }

  // Two-character operators are matched by the statement splitter, not here.
  void advance() {
    while (pos_ < s_.size() && s_[pos_] == ' ') ++pos_;
    if (pos_ >= s_.size()) {
      tok_ = {};
      return;
    }
    char c = s_[pos_];
    if (std::isdigit(static_cast<unsigned char>(c)) ||
        (c == '.' && pos_ + 1 < s_.size() &&
         std::isdigit(static_cast<unsigned char>(s_[pos_ + 1])))) {
      const char* start = s_.c_str() + pos_;
      char* end = nullptr;
      tok_ = {ITok::Num, std::strtod(start, &end), ""};
      pos_ += static_cast<std::size_t>(end - start);
      return;
    }
    if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
      std::size_t j = pos_;
      while (j < s_.size() && (std::isalnum(static_cast<unsigned char>(s_[j])) ||
                               s_[j] == '_'))
        ++j;
      tok_ = {ITok::Ident, 0, s_.substr(pos_, j - pos_)};
      pos_ = j;
      return;
    }
    tok_ = {ITok::Sym, 0, std::string(1, c)};
    ++pos_;
  }

 private:
  const std::string& s_;
  std::size_t pos_ = 0;
  int line_;
  ITok tok_;
};

IExpr parse_iexpr(ILexer& lx);

IExpr parse_primary(ILexer& lx) {
  ITok t = lx.take();
  if (t.kind == ITok::Num) return inum(t.num);
  if (t.kind == ITok::Sym && t.text == "(") {
    IExpr e = parse_iexpr(lx);
    if (lx.peek().text != ")") lx.fail("expected )");
    lx.take();
    return e;
  }
  if (t.kind == ITok::Sym && t.text == "-") return ineg(parse_primary(lx));
  if (t.kind != ITok::Ident) lx.fail("expected an operand");
  if (t.text == "inf") return inum(std::numeric_limits<double>::infinity());
  if (lx.peek().kind == ITok::Sym && lx.peek().text == "(") {
    lx.take();
    std::vector<IExpr> args;
    if (lx.peek().text != ")") {
      args.push_back(parse_iexpr(lx));
      while (lx.peek().text == ",") {
        lx.take();
        args.push_back(parse_iexpr(lx));
      }
    }
    if (lx.peek().text != ")") lx.fail("expected ) after arguments");
    lx.take();
    return icall(t.text, std::move(args));
  }
  if (lx.peek().kind == ITok::Sym && lx.peek().text == "[") {
    lx.take();
    std::vector<IExpr> idx;
    idx.push_back(parse_iexpr(lx));
    while (lx.peek().text == ",") {
      lx.take();
      idx.push_back(parse_iexpr(lx));
    }
    if (lx.peek().text != "]") lx.fail("expected ] after indices");
    lx.take();
    return iref(t.text, std::move(idx));
  }
  return ivar(t.text);
}

IExpr parse_term(ILexer& lx) {
  IExpr e = parse_primary(lx);
  while (lx.peek().kind == ITok::Sym &&
         (lx.peek().text == "*" || lx.peek().text == "/")) {
    BinOp op = lx.take().text == "*" ? BinOp::Mul : BinOp::Div;
    e = ibin(op, e, parse_primary(lx));
  }
  return e;
}

IExpr parse_iexpr(ILexer& lx) {
  IExpr e = parse_term(lx);
  while (lx.peek().kind == ITok::Sym &&
         (lx.peek().text == "+" || lx.peek().text == "-")) {
    BinOp op = lx.take().text == "+" ? BinOp::Add : BinOp::Sub;
    e = ibin(op, e, parse_term(lx));
  }
  return e;
}

IExpr parse_iexpr_all(const std::string& s, int line) {
  ILexer lx(s, line);
  IExpr e = parse_iexpr(lx);
  if (lx.peek().kind != ITok::End)
    throw IRParseError(line, "trailing input after expression: " + s);
  return e;
}

}  // namespace

IExpr parse_iexpr_text(const std::string& s, int line) {
  return parse_iexpr_all(s, line);
}

namespace {

// Splits "a op b" at the top level for op in {+=, *=, =}; returns op or "".
std::string split_assign(const std::string& s, std::string& l,
                         std::string& r) {
  int depth = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    char c = s[i];
    if (c == '(' || c == '[') ++depth;
    if (c == ')' || c == ']') --depth;
    if (depth != 0 || c != '=') continue;
    if (i + 1 < s.size() && s[i + 1] == '=') continue;
    if (i > 0 && (s[i - 1] == '!' || s[i - 1] == '<' || s[i - 1] == '>'))
      continue;
    std::size_t cut = i, opstart = i;
    std::string op = "=";
    if (i > 0 && (s[i - 1] == '+' || s[i - 1] == '*')) {
      op = std::string(1, s[i - 1]) + "=";
      opstart = i - 1;
    }
    l = s.substr(0, opstart);
    r = s.substr(cut + 1);
    return op;
  }
  return "";
}

}  // namespace

ScalarIR parse_scalar_ir(const std::string& text) {
  ScalarIR ir;
  std::vector<std::vector<SStmt>*> stack{&ir.stmts};
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::size_t indent = 0;
    while (indent < line.size() && line[indent] == ' ') ++indent;
    std::string body = line.substr(indent);
    while (!body.empty() && (body.back() == ' ' || body.back() == '\r'))
      body.pop_back();
    if (body.empty()) continue;
    if (indent % 4 != 0) throw IRParseError(lineno, "indentation must be 4*n");
    std::size_t depth = indent / 4;
    if (depth + 1 > stack.size())
      throw IRParseError(lineno, "indented block without a loop header");
    stack.resize(depth + 1);
    std::vector<SStmt>& out = *stack.back();

    if (body[0] == '#') {
      std::size_t start = body.find_first_not_of(" ", 1);
      out.push_back(scomment(start == std::string::npos
                                 ? ""
                                 : body.substr(start)));
      continue;
    }
    if (body.rfind("for ", 0) == 0) {
      if (body.back() != ':')
        throw IRParseError(lineno, "loop header must end with :");
      std::string hdr = body.substr(4, body.size() - 5);
      std::size_t inpos = hdr.find(" in ");
      if (inpos == std::string::npos)
        throw IRParseError(lineno, "loop header needs ' in '");
      std::string vars = hdr.substr(0, inpos);
      std::string iter = hdr.substr(inpos + 4);
      std::vector<std::string> vs;
      std::istringstream vsin(vars);
      std::string v;
      while (std::getline(vsin, v, ',')) {
        while (!v.empty() && v.front() == ' ') v.erase(v.begin());
        while (!v.empty() && v.back() == ' ') v.pop_back();
        vs.push_back(v);
      }
      bool grid = iter.rfind("grid(", 0) == 0;
      if (!grid && iter.rfind("range(", 0) != 0)
        throw IRParseError(lineno, "loop iterates over range() or grid()");
      std::size_t open = iter.find('(');
      if (iter.back() != ')') throw IRParseError(lineno, "unclosed loop header");
      std::string nums = iter.substr(open + 1, iter.size() - open - 2);
      std::vector<long long> ext;
      std::istringstream nin(nums);
      std::string nstr;
      while (std::getline(nin, nstr, ','))
        ext.push_back(std::strtoll(nstr.c_str(), nullptr, 10));
      if (vs.size() != ext.size())
        throw IRParseError(lineno, "loop variable/extent count mismatch");
      SStmt st = grid ? sgrid(vs, ext, {})
                      : sfor(vs[0], ext[0], {});
      out.push_back(st);
      stack.push_back(&st->body);
      continue;
    }
    std::string l, r;
    std::string op = split_assign(body, l, r);
    if (op.empty())
      throw IRParseError(lineno, "unrecognized statement: " + body);
    IExpr lhs = parse_iexpr_all(l, lineno);
    if (lhs->kind == IKind::Var) lhs = iref(lhs->name);
    if (lhs->kind != IKind::Ref)
      throw IRParseError(lineno, "assignment target must be a reference");
    IExpr rhs = parse_iexpr_all(r, lineno);
    if (op == "=")
      out.push_back(sassign(lhs, rhs));
    else
      out.push_back(saccum(lhs, op == "*=" ? BinOp::Mul : BinOp::Add, rhs));
  }
  return ir;
}

// ---- interpretation ---------------------------------------------------------

double ScalarMachine::read(const std::string& name,
                           const std::vector<long long>& idx) const {
  auto it = bufs.find(name);
  if (it == bufs.end()) return 0.0;
  auto jt = it->second.find(idx);
  return jt == it->second.end() ? 0.0 : jt->second;
}

namespace {

using VarEnv = std::map<std::string, double>;

double ieval(const IExpr& e, const ScalarMachine& m, const VarEnv& env);

std::vector<long long> eval_indices(const IExpr& ref, const ScalarMachine& m,
                                    const VarEnv& env) {
  std::vector<long long> idx;
  for (const auto& a : ref->args)
    idx.push_back(static_cast<long long>(std::llround(ieval(a, m, env))));
  return idx;
}

double ieval(const IExpr& e, const ScalarMachine& m, const VarEnv& env) {
  switch (e->kind) {
    case IKind::Num:
      return e->num;
    case IKind::Var: {
      auto it = env.find(e->name);
      if (it != env.end()) return it->second;
      return m.read(e->name, {});
    }
    case IKind::Ref:
      return m.read(e->name, eval_indices(e, m, env));
    case IKind::Neg:
      return -ieval(e->a, m, env);
    case IKind::Bin: {
      double a = ieval(e->a, m, env), b = ieval(e->b, m, env);
      switch (e->bop) {
        case BinOp::Add:
          return a + b;
        case BinOp::Sub:
          return a - b;
        case BinOp::Mul:
          return a * b;
        case BinOp::Div:
          return a / b;
        default:
          throw std::logic_error("unexpected infix operator");
      }
    }
    case IKind::Call: {
      std::vector<double> v;
      for (const auto& a : e->args) v.push_back(ieval(a, m, env));
      const std::string& f = e->name;
      if (f == "exp") return std::exp(v[0]);
      if (f == "abs") return std::fabs(v[0]);
      if (f == "sqrt") return std::sqrt(v[0]);
      if (f == "log2") return std::log2(v[0]);
      if (f == "ln") return std::log(v[0]);
      if (f == "sign") return (v[0] > 0) - (v[0] < 0);
      if (f == "max") return std::fmax(v[0], v[1]);
      if (f == "min") return std::fmin(v[0], v[1]);
      if (f == "pow") return std::pow(v[0], v[1]);
      throw std::logic_error("unknown function in IR: " + f);
    }
  }
  throw std::logic_error("unreachable IR expression kind");
}

void topk_insert(std::vector<std::pair<double, long long>>& state,
                 std::pair<double, long long> item, int k) {
  state.push_back(item);
  std::stable_sort(state.begin(), state.end(),
                   [](const auto& a, const auto& b) {
                     if (a.first != b.first) return a.first > b.first;
                     return a.second < b.second;
                   });
  // Duplicate (value, index) pairs can only come from re-merging the same
  // source; keep the first occurrence.
  state.erase(std::unique(state.begin(), state.end()), state.end());
  if (static_cast<int>(state.size()) > k)
    state.resize(static_cast<std::size_t>(k));
}

void exec_topk_assign(const SStmtNode& st, ScalarMachine& m,
                      const VarEnv& env) {
  const IExpr& call = st.rhs;
  if (call->args.size() != 3)
    throw std::logic_error("topk(state, item, k) takes three arguments");
  int k = static_cast<int>(std::llround(call->args[2]->num));
  std::vector<long long> dst = eval_indices(st.lhs, m, env);
  auto& state = m.topk[st.lhs->name][dst];
  const IExpr& src = call->args[1];
  if (src->kind == IKind::Ref && m.topk.count(src->name)) {
    auto merged = m.topk.at(src->name).find(eval_indices(src, m, env));
    if (merged != m.topk.at(src->name).end())
      for (const auto& item : merged->second) topk_insert(state, item, k);
    return;
  }
  // Scalar ingest: the element index is the current value of the stream
  // subscript of the source reference, 1-based.
  if (src->kind != IKind::Ref || src->args.empty())
    throw std::logic_error("topk ingest must read an indexed input");
  long long pos =
      static_cast<long long>(std::llround(ieval(src->args[0], m, env)));
  topk_insert(state, {ieval(src, m, env), pos + 1}, k);
}

void exec(const SStmt& st, ScalarMachine& m, VarEnv& env) {
  switch (st->kind) {
    case SKind::Comment:
      return;
    case SKind::For:
    case SKind::Grid: {
      // Row-major nesting over however many loop variables are declared.
      std::vector<long long> cur(st->vars.size(), 0);
      std::function<void(std::size_t)> go = [&](std::size_t level) {
        if (level == st->vars.size()) {
          for (const auto& c : st->body) exec(c, m, env);
          return;
        }
        for (long long i = 0; i < st->extents[level]; ++i) {
          env[st->vars[level]] = static_cast<double>(i);
          go(level + 1);
        }
      };
      go(0);
      return;
    }
    case SKind::Assign: {
      if (st->rhs->kind == IKind::Call && st->rhs->name == "topk") {
        exec_topk_assign(*st, m, env);
        return;
      }
      m.bufs[st->lhs->name][eval_indices(st->lhs, m, env)] =
          ieval(st->rhs, m, env);
      return;
    }
    case SKind::Accum: {
      std::vector<long long> idx = eval_indices(st->lhs, m, env);
      double& slot = m.bufs[st->lhs->name][idx];
      double v = ieval(st->rhs, m, env);
      slot = st->op == BinOp::Mul ? slot * v : slot + v;
      return;
    }
  }
}

}  // namespace

ScalarMachine machine_from_store(const TensorStore& store) {
  ScalarMachine m;
  // TensorStore is 1-based; IR subscripts are 0-based loop variables.
  for (const std::string& name : store.names()) {
    const auto& a = store.array(name);
    auto& buf = m.bufs[name];
    if (a.free_len > 0) {
      for (long long l = 0; l < a.len; ++l)
        for (long long f = 0; f < a.free_len; ++f)
          buf[{l, f}] = a.data[static_cast<std::size_t>(l * a.free_len + f)];
    } else {
      for (long long l = 0; l < a.len; ++l)
        buf[{l}] = a.data[static_cast<std::size_t>(l)];
    }
  }
  return m;
}

void run_scalar_ir(const ScalarIR& ir, ScalarMachine& m) {
  VarEnv env;
  for (const auto& st : ir.stmts) exec(st, m, env);
}

std::vector<OutputVal> scalar_outputs(const FusedProgram& prog,
                                      const ScalarMachine& m) {
  EmitNames names = make_names(prog);
  std::vector<OutputVal> outs;
  for (const auto& r : prog.spec.reductions) {
    OutputVal o;
    o.id = r.id;
    const std::string& acc = names.acc.at(r.id);
    auto key = [&](std::vector<long long> tail) {
      std::vector<long long> idx;
      if (names.attention) idx.push_back(0);
      for (long long t : tail) idx.push_back(t);
      return idx;
    };
    if (r.op == ReduceOp::TopK) {
      auto it = m.topk.find(acc);
      if (it != m.topk.end()) {
        auto jt = it->second.find(key({}));
        if (jt != it->second.end()) o.topk = jt->second;
      }
    } else if (r.free_len > 1) {
      for (long long f = 0; f < r.free_len; ++f)
        o.v.push_back(m.read(acc, key({f})));
    } else {
      o.v.push_back(m.read(acc, key({})));
    }
    outs.push_back(std::move(o));
  }
  return outs;
}

}  // namespace redfuse
