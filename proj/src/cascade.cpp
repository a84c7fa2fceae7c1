#include "redfuse/cascade.hpp"

#include <cctype>
#include <cstdlib>
#include <map>
#include <sstream>

namespace redfuse {

const InputDecl* CascadeSpec::find_input(const std::string& n) const {
  for (const auto& in : inputs)
    if (in.name == n) return &in;
  return nullptr;
}

const ReductionSpec& CascadeSpec::reduction(int id) const {
  for (const auto& r : reductions)
    if (r.id == id) return r;
  throw std::out_of_range("no reduction with id " + std::to_string(id));
}

long long CascadeSpec::axis_len() const {
  return inputs.empty() ? 0 : inputs.front().len;
}

std::pair<long long, long long> segment_bounds(const TreeConfig& cfg, int k,
                                               long long j) {
  if (k < 1 || k > cfg.depth())
    throw std::out_of_range("level out of range: " + std::to_string(k));
  long long lk = cfg.levels[static_cast<std::size_t>(k)];
  if (j < 1 || j > lk)
    throw std::out_of_range("segment out of range: " + std::to_string(j));
  long long seg = cfg.levels[static_cast<std::size_t>(k) - 1] / lk;
  return {(j - 1) * seg + 1, j * seg};
}

std::vector<Diagnostic> validate_tree(const TreeConfig& cfg,
                                      long long require_l0) {
  std::vector<Diagnostic> out;
  const auto& ls = cfg.levels;
  if (ls.size() < 2) {
    out.push_back({"BadLevels", "need at least [L0, 1]"});
    return out;
  }
  if (ls.back() != 1) out.push_back({"BadTerminal", "last level must be 1"});
  for (std::size_t k = 1; k < ls.size(); ++k) {
    // [1, 1] is allowed so a length-1 axis still has a valid tree.
    if (ls[k] == 1 && ls[k - 1] == 1) continue;
    if (ls[k] <= 0 || ls[k] >= ls[k - 1]) {
      out.push_back({"NotDecreasing",
                     "levels must strictly decrease at index " +
                         std::to_string(k)});
      continue;
    }
    if (ls[k - 1] % ls[k] != 0)
      out.push_back({"DivisibilityViolation",
                     std::to_string(ls[k]) + " does not divide " +
                         std::to_string(ls[k - 1])});
  }
  if (require_l0 > 0 && ls.front() != require_l0)
    out.push_back({"AxisMismatch",
                   "levels[0] = " + std::to_string(ls.front()) +
                       " but the cascade axis is " +
                       std::to_string(require_l0)});
  return out;
}

namespace {

void collect_inputs(const Expr& e,
                    std::map<std::string, bool>& used) {  // name -> has_free
  if (e->kind == ExprKind::Input) used[e->name] = e->has_free;
  if (e->a) collect_inputs(e->a, used);
  if (e->b) collect_inputs(e->b, used);
}

bool uses_free_index(const Expr& e) {
  if (e->kind == ExprKind::FreeIndex) return true;
  if (e->a && uses_free_index(e->a)) return true;
  return e->b && uses_free_index(e->b);
}

}  // namespace

std::vector<Diagnostic> validate(const CascadeSpec& spec) {
  std::vector<Diagnostic> out;
  if (spec.reductions.empty())
    out.push_back({"EmptyCascade", "cascade has no reductions"});
  for (std::size_t i = 0; i < spec.inputs.size(); ++i) {
    const auto& in = spec.inputs[i];
    if (in.len <= 0)
      out.push_back({"BadInput", in.name + " has non-positive length"});
    for (std::size_t j = i + 1; j < spec.inputs.size(); ++j)
      if (spec.inputs[j].name == in.name)
        out.push_back({"DuplicateInput", in.name + " declared twice"});
    if (!spec.inputs.empty() && in.len != spec.inputs.front().len)
      out.push_back({"MixedAxisLength",
                     in.name + " disagrees with the cascade reduce axis"});
  }
  for (std::size_t i = 0; i < spec.reductions.size(); ++i) {
    const auto& r = spec.reductions[i];
    std::string at = "at reduction " + std::to_string(r.id);
    if (r.id != static_cast<int>(i) + 1)
      out.push_back({"BadId", "ids must be 1..I in order, " + at});
    if (!r.body) {
      out.push_back({"MissingBody", at});
      continue;
    }
    for (int d : dep_ids(r.body)) {
      if (d >= r.id) {
        out.push_back({"ForwardDependency", at + ": references d" +
                                                std::to_string(d)});
        continue;
      }
      for (const auto& p : spec.reductions)
        if (p.id == d && p.free_len > 1)
          out.push_back({"VectorDependency",
                         at + ": d" + std::to_string(d) +
                             " is vector-valued (free axis)"});
    }
    std::map<std::string, bool> used;
    collect_inputs(r.body, used);
    for (const auto& [name, has_free] : used) {
      const InputDecl* in = spec.find_input(name);
      if (!in) {
        out.push_back({"UnknownInput", at + ": " + name + " not declared"});
        continue;
      }
      if (has_free && (in->free_len <= 0 || in->free_len != r.free_len))
        out.push_back({"FreeAxisMismatch",
                       at + ": " + name + "[l, f] needs a matching free axis"});
      if (!has_free && in->free_len > 0)
        out.push_back({"FreeAxisMismatch",
                       at + ": " + name + " has a free axis, index [l, f]"});
    }
    if (uses_free_index(r.body) && r.free_len <= 1)
      out.push_back({"FreeAxisMismatch", at + ": f used in a scalar body"});
    if (r.op == ReduceOp::TopK) {
      if (r.topk < 1)
        out.push_back({"BadTopK", at + ": k must be positive"});
      if (contains_dep(r.body))
        out.push_back({"TopKDependency",
                       at + ": topk bodies must be dependency-free"});
      if (r.free_len > 1)
        out.push_back({"BadTopK", at + ": topk output is the tuple itself"});
    } else if (r.topk != 0) {
      out.push_back({"BadTopK", at + ": k given for a non-topk op"});
    }
  }
  return out;
}

// ---- DSL parsing ------------------------------------------------------------

namespace {

struct Tok {
  enum Kind { Num, Ident, Sym, End } kind = End;
  double num = 0;
  std::string text;
};

class Lexer {
 public:
  Lexer(const std::string& s, int line) : s_(s), line_(line) { advance(); }

  const Tok& peek() const { return tok_; }
  Tok take() {
    Tok t = tok_;
    advance();
    return t;
  }
  [[noreturn]] void fail(const std::string& msg) const {
    throw SyntaxError(line_, msg);
  }

 private:
  void advance() {
    while (pos_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[pos_])))
      ++pos_;
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
      tok_ = {Tok::Num, std::strtod(start, &end), ""};
      pos_ += static_cast<std::size_t>(end - start);
      return;
    }
    if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
      std::size_t j = pos_;
      while (j < s_.size() && (std::isalnum(static_cast<unsigned char>(s_[j])) ||
                               s_[j] == '_'))
        ++j;
      tok_ = {Tok::Ident, 0, s_.substr(pos_, j - pos_)};
      pos_ = j;
      return;
    }
    tok_ = {Tok::Sym, 0, std::string(1, c)};
    ++pos_;
  }

  const std::string& s_;
  std::size_t pos_ = 0;
  int line_;
  Tok tok_;
};

struct ExprCtx {
  const std::map<std::string, double>* consts;
};

bool is_sym(const Tok& t, const char* s) {
  return t.kind == Tok::Sym && t.text == s;
}

Expr parse_expr(Lexer& lx, const ExprCtx& ctx);

Expr parse_call(Lexer& lx, const ExprCtx& ctx, const std::string& fn) {
  if (!is_sym(lx.take(), "(")) lx.fail("expected ( after " + fn);
  Expr a = parse_expr(lx, ctx);
  Expr b;
  bool binary = fn == "max" || fn == "min" || fn == "pow";
  if (binary) {
    if (!is_sym(lx.take(), ",")) lx.fail(fn + " takes two arguments");
    b = parse_expr(lx, ctx);
  }
  if (!is_sym(lx.take(), ")")) lx.fail("expected ) closing " + fn);
  if (fn == "exp") return un(UnOp::Exp, a);
  if (fn == "abs") return un(UnOp::Abs, a);
  if (fn == "log2") return un(UnOp::Log2, a);
  if (fn == "ln") return un(UnOp::Ln, a);
  if (fn == "sqrt") return un(UnOp::Sqrt, a);
  if (fn == "sign") return un(UnOp::Sign, a);
  if (fn == "max") return bin(BinOp::Max, a, b);
  if (fn == "min") return bin(BinOp::Min, a, b);
  if (fn == "pow") return bin(BinOp::Pow, a, b);
  lx.fail("unknown function " + fn);
}

bool is_dep_name(const std::string& s, int& id) {
  if (s.size() < 2 || s[0] != 'd') return false;
  for (std::size_t i = 1; i < s.size(); ++i)
    if (!std::isdigit(static_cast<unsigned char>(s[i]))) return false;
  id = std::atoi(s.c_str() + 1);
  return true;
}

Expr parse_primary(Lexer& lx, const ExprCtx& ctx) {
  Tok t = lx.take();
  if (t.kind == Tok::Num) return cst(t.num);
  if (is_sym(t, "(")) {
    Expr e = parse_expr(lx, ctx);
    if (!is_sym(lx.take(), ")")) lx.fail("expected )");
    return e;
  }
  if (is_sym(t, "-")) return neg(parse_primary(lx, ctx));
  if (t.kind != Tok::Ident) lx.fail("unexpected token '" + t.text + "'");

  if (is_sym(lx.peek(), "(")) return parse_call(lx, ctx, t.text);

  if (is_sym(lx.peek(), "[")) {
    lx.take();
    Tok idx = lx.take();
    if (idx.kind != Tok::Ident || idx.text != "l")
      lx.fail("reduce-axis index must be l");
    bool has_free = false;
    Tok close = lx.take();
    if (is_sym(close, ",")) {
      Tok fr = lx.take();
      if (fr.kind != Tok::Ident || fr.text != "f")
        lx.fail("free-axis index must be f");
      has_free = true;
      close = lx.take();
    }
    if (!is_sym(close, "]")) lx.fail("expected ]");
    return input_var(t.text, has_free);
  }

  int dep_id = 0;
  if (is_dep_name(t.text, dep_id)) return dep_var(dep_id);
  if (t.text == "f") return free_index("f");
  auto it = ctx.consts->find(t.text);
  if (it != ctx.consts->end()) return cst(it->second);
  lx.fail("unknown identifier '" + t.text + "'");
}

Expr parse_term(Lexer& lx, const ExprCtx& ctx) {
  Expr e = parse_primary(lx, ctx);
  while (is_sym(lx.peek(), "*") || is_sym(lx.peek(), "/")) {
    bool mul = lx.take().text == "*";
    Expr r = parse_primary(lx, ctx);
    e = bin(mul ? BinOp::Mul : BinOp::Div, e, r);
  }
  return e;
}

Expr parse_expr(Lexer& lx, const ExprCtx& ctx) {
  Expr e = parse_term(lx, ctx);
  while (is_sym(lx.peek(), "+") || is_sym(lx.peek(), "-")) {
    bool add = lx.take().text == "+";
    Expr r = parse_term(lx, ctx);
    e = bin(add ? BinOp::Add : BinOp::Sub, e, r);
  }
  return e;
}

std::vector<std::string> split_words(const std::string& line) {
  std::vector<std::string> out;
  std::istringstream is(line);
  std::string w;
  while (is >> w) out.push_back(w);
  return out;
}

long long parse_len(const std::string& s, int line) {
  char* end = nullptr;
  long long v = std::strtoll(s.c_str(), &end, 10);
  if (end == s.c_str() || *end != '\0' || v <= 0)
    throw SyntaxError(line, "expected a positive length, got '" + s + "'");
  return v;
}

}  // namespace

CascadeSpec parse_cascade(const std::string& text) {
  CascadeSpec spec;
  std::map<std::string, double> consts;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  bool want_body = false;

  while (std::getline(is, line)) {
    ++lineno;
    std::string trimmed = line;
    std::size_t b = trimmed.find_first_not_of(" \t");
    if (b == std::string::npos) continue;
    bool indented = b > 0;
    trimmed = trimmed.substr(b);
    if (trimmed[0] == '#') continue;

    if (want_body) {
      if (!indented) throw SyntaxError(lineno, "expected an indented body");
      Lexer lx(trimmed, lineno);
      ExprCtx ctx{&consts};
      spec.reductions.back().body = parse_expr(lx, ctx);
      if (lx.peek().kind != Tok::End)
        lx.fail("trailing tokens after expression");
      want_body = false;
      continue;
    }
    if (indented) throw SyntaxError(lineno, "unexpected indentation");

    auto words = split_words(trimmed);
    const std::string& kw = words[0];
    if (kw == "cascade") {
      if (words.size() != 2) throw SyntaxError(lineno, "cascade <name>");
      spec.name = words[1];
    } else if (kw == "input") {
      if (words.size() != 4 && words.size() != 6)
        throw SyntaxError(lineno, "input <name> len <L0> [free <len>]");
      if (words[2] != "len") throw SyntaxError(lineno, "expected 'len'");
      InputDecl in;
      in.name = words[1];
      in.len = parse_len(words[3], lineno);
      if (words.size() == 6) {
        if (words[4] != "free") throw SyntaxError(lineno, "expected 'free'");
        in.free_len = parse_len(words[5], lineno);
      }
      spec.inputs.push_back(in);
    } else if (kw == "const") {
      if (words.size() != 4 || words[2] != "=")
        throw SyntaxError(lineno, "const <name> = <number>");
      char* end = nullptr;
      double v = std::strtod(words[3].c_str(), &end);
      if (end == words[3].c_str() || *end != '\0')
        throw SyntaxError(lineno, "bad constant value '" + words[3] + "'");
      consts[words[1]] = v;
    } else if (kw == "reduce") {
      if (words.size() < 4 || words[2] != "op")
        throw SyntaxError(lineno, "reduce <id> op <op> [free <len>]");
      ReductionSpec r;
      r.id = static_cast<int>(parse_len(words[1], lineno));
      std::size_t w = 3;
      const std::string& opname = words[w++];
      if (opname == "sum")
        r.op = ReduceOp::Sum;
      else if (opname == "prod")
        r.op = ReduceOp::Prod;
      else if (opname == "max")
        r.op = ReduceOp::Max;
      else if (opname == "min")
        r.op = ReduceOp::Min;
      else if (opname == "topk") {
        r.op = ReduceOp::TopK;
        if (w >= words.size())
          throw SyntaxError(lineno, "topk needs a tuple size");
        r.topk = static_cast<int>(parse_len(words[w++], lineno));
      } else {
        throw SyntaxError(lineno, "unknown reduce op '" + opname + "'");
      }
      if (w < words.size()) {
        if (words[w] != "free" || w + 1 >= words.size())
          throw SyntaxError(lineno, "expected 'free <len>'");
        r.free_len = parse_len(words[w + 1], lineno);
        w += 2;
      }
      if (w != words.size()) throw SyntaxError(lineno, "trailing tokens");
      spec.reductions.push_back(r);
      want_body = true;
    } else {
      throw SyntaxError(lineno, "unknown directive '" + kw + "'");
    }
  }
  if (want_body) throw SyntaxError(lineno, "missing reduction body");

  for (const auto& d : validate(spec)) {
    if (d.kind == "ForwardDependency") throw ForwardDependency(d.message);
    if (d.kind == "UnknownInput") throw UnknownInput(d.message);
    throw SyntaxError(0, d.kind + ": " + d.message);
  }
  return spec;
}

std::string serialize(const CascadeSpec& spec) {
  std::ostringstream os;
  os << "cascade " << spec.name << "\n";
  for (const auto& in : spec.inputs) {
    os << "input " << in.name << " len " << in.len;
    if (in.free_len > 0) os << " free " << in.free_len;
    os << "\n";
  }
  for (const auto& r : spec.reductions) {
    os << "reduce " << r.id << " op " << reduce_name(r.op);
    if (r.op == ReduceOp::TopK) os << " " << r.topk;
    if (r.free_len > 1) os << " free " << r.free_len;
    os << "\n    " << render(r.body) << "\n";
  }
  return os.str();
}

}  // namespace redfuse
