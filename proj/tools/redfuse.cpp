// Command-line front end: parse -> fuse -> simulate -> verify -> emit.
//
// Exit codes: 0 success, 1 usage/parse errors, 2 not fusable,
// 3 verification failure.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "redfuse/scalar_ir.hpp"
#include "redfuse/simplify.hpp"
#include "redfuse/tile_ir.hpp"
#include "redfuse/workloads.hpp"

using json = nlohmann::ordered_json;
using namespace redfuse;

namespace {

constexpr int kSchemaVersion = 1;

struct RunConfig {
  std::string workload;
  std::string spec_path;
  std::vector<long long> levels;
  int k = 0;  // 0: deepest level
  std::string strategy = "single";
  std::string tiles;
  int seeds = 5;
  std::uint64_t seed = 42;
  double tol = 1e-6;
  bool as_json = false;
  std::string out_path;
  std::string stage = "scalar";
  long long rows = 1;
};

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::uint64_t env_seed() {
  const char* s = std::getenv("REDFUSE_SEED");
  if (!s) return 42;
  return std::strtoull(s, nullptr, 10);
}

std::uint64_t mix_name(std::uint64_t seed, const std::string& name) {
  std::uint64_t h = 1469598103934665603ull ^ seed;
  for (char c : name) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  return h;
}

// Workload wrapper for a cascade loaded from a DSL file: uniform random
// inputs with per-array streams split off the run seed, and the plain
// unfused chain standing in as the reference oracle.
Workload wrap_spec(const CascadeSpec& spec) {
  Workload w;
  w.name = spec.name;
  w.spec = spec;
  w.generate = [spec](std::uint64_t seed) {
    TensorStore st;
    for (const auto& in : spec.inputs) {
      std::mt19937_64 rng(mix_name(seed, in.name));
      std::uniform_real_distribution<double> uni(-1.0, 1.0);
      long long total = in.len * (in.free_len > 0 ? in.free_len : 1);
      std::vector<double> data(static_cast<std::size_t>(total));
      for (auto& v : data) v = uni(rng);
      st.define(in.name, in.len, in.free_len, std::move(data));
    }
    return st;
  };
  w.oracle = [spec](const TensorStore& st) {
    TensorStore copy = st;  // counters of the caller's store stay untouched
    TreeConfig flat{{spec.axis_len(), 1}};
    ExecReport rep = run_unfused(spec, flat, copy);
    rep.strategy = "oracle";
    rep.input_loads.clear();
    rep.dep_root_loads.clear();
    rep.peak_aux_slots.clear();
    return rep;
  };
  return w;
}

Workload load_workload(const RunConfig& cfg) {
  if (!cfg.workload.empty() && !cfg.spec_path.empty())
    throw UsageError("--workload and --spec are mutually exclusive");
  if (!cfg.workload.empty()) return builtin(cfg.workload);
  if (cfg.spec_path.empty())
    throw UsageError("one of --workload or --spec is required");
  std::ifstream in(cfg.spec_path);
  if (!in.good()) throw UsageError("cannot open " + cfg.spec_path);
  std::ostringstream os;
  os << in.rdbuf();
  return wrap_spec(parse_cascade(os.str()));
}

TreeConfig tree_of(const RunConfig& cfg, const Workload& w) {
  TreeConfig t;
  if (cfg.levels.empty())
    t.levels = {w.spec.axis_len(), 1};
  else
    t.levels = cfg.levels;
  auto diags = validate_tree(t, w.spec.axis_len());
  if (!diags.empty()) throw UsageError("bad --levels: " + diags[0].message);
  return t;
}

long long strategy_segments(const std::string& s) {
  if (s == "single") return 1;
  if (s.rfind("multi:", 0) == 0) {
    long long n = std::atoll(s.c_str() + 6);
    if (n >= 2) return n;
  }
  throw UsageError("--strategy must be single or multi:S with S >= 2");
}

void write_out(const RunConfig& cfg, const std::string& text) {
  if (cfg.out_path.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream out(cfg.out_path);
  if (!out.good()) throw UsageError("cannot write " + cfg.out_path);
  out << text;
}

json decomposition_json(const FusedProgram& prog) {
  json arr = json::array();
  for (const auto& d : prog.decomps) {
    const ReductionSpec& r = prog.spec.reduction(d.id);
    json j;
    j["id"] = d.id;
    j["op"] = reduce_name(r.op);
    j["combine"] = d.combine == MonoidOp::Add ? "add" : "mul";
    j["G"] = render(d.G);
    j["H"] = d.h_identity ? json(nullptr) : json(render(d.H));
    j["correction"] = d.corr ? json(render(d.corr)) : json(nullptr);
    j["log_transformed"] = d.prod_transformed;
    arr.push_back(j);
  }
  return arr;
}

// ---- fuse -------------------------------------------------------------------

int cmd_fuse(const RunConfig& cfg) {
  Workload w = load_workload(cfg);
  FusedProgram prog;
  try {
    prog = derive_fused(w.spec);
  } catch (const NotFusable& e) {
    if (cfg.as_json) {
      json j;
      j["version"] = kSchemaVersion;
      j["command"] = "fuse";
      j["workload"] = w.name;
      j["fusable"] = false;
      j["reduction"] = e.id;
      j["reason"] = e.why;
      write_out(cfg, j.dump(2) + "\n");
    } else {
      write_out(cfg, "not fusable: " + std::string(e.what()) + "\n");
    }
    return 2;
  }
  if (cfg.as_json) {
    json j;
    j["version"] = kSchemaVersion;
    j["command"] = "fuse";
    j["workload"] = w.name;
    j["fusable"] = true;
    j["reductions"] = decomposition_json(prog);
    j["incremental_ir"] = render(emit_scalar_ir(prog, {.rows = cfg.rows}));
    write_out(cfg, j.dump(2) + "\n");
    return 0;
  }
  std::ostringstream os;
  os << "cascade " << w.name << ": fusable\n";
  for (const auto& d : prog.decomps) {
    const ReductionSpec& r = prog.spec.reduction(d.id);
    os << "reduction " << d.id << ": op " << reduce_name(r.op)
       << ", combine " << (d.combine == MonoidOp::Add ? "add" : "mul");
    if (d.prod_transformed) os << " (log-sum form)";
    os << "\n";
    os << "  G: " << render(d.G) << "\n";
    os << "  H: " << (d.h_identity ? "identity" : render(d.H)) << "\n";
    if (d.corr) os << "  correction: " << render(d.corr) << "\n";
  }
  os << "\nincremental update program:\n";
  os << render(emit_scalar_ir(prog, {.rows = cfg.rows}));
  write_out(cfg, os.str());
  return 0;
}

// ---- verify -----------------------------------------------------------------

struct ModeResult {
  std::string mode;
  double max_rel_err = 0.0;
  bool pass = true;
  std::string worst;
};

int cmd_verify(const RunConfig& cfg) {
  Workload w = load_workload(cfg);
  FusedProgram prog;
  try {
    prog = derive_fused(w.spec);
  } catch (const NotFusable& e) {
    std::cerr << "not fusable: " << e.what() << "\n";
    return 2;
  }
  TreeConfig tree = tree_of(cfg, w);
  int k = cfg.k == 0 ? tree.depth() : cfg.k;
  if (k < 1 || k > tree.depth())
    throw UsageError("--k must lie in 1.." + std::to_string(tree.depth()));
  long long segs = cfg.strategy == "single" ? 4  // default sweep width
                                            : strategy_segments(cfg.strategy);

  std::vector<ModeResult> results = {
      {"unfused"}, {"fused@" + std::to_string(k)}, {"incremental"},
      {"multi:" + std::to_string(segs)}};
  ExecReport last_incremental;
  for (int s = 0; s < cfg.seeds; ++s) {
    std::uint64_t seed = cfg.seed + static_cast<std::uint64_t>(s);
    ExecReport want = w.oracle(w.generate(seed));
    for (auto& mr : results) {
      TensorStore st = w.generate(seed);
      ExecReport got;
      if (mr.mode == "unfused")
        got = run_unfused(w.spec, tree, st);
      else if (mr.mode.rfind("fused", 0) == 0)
        got = run_fused(prog, tree, k, st);
      else if (mr.mode == "incremental")
        got = run_incremental(prog, tree, st);
      else
        got = run_multisegment(prog, tree, segs, st);
      if (mr.mode == "incremental") last_incremental = got;
      DiffReport d = compare_reports(got, want, cfg.tol);
      if (d.max_rel_err > mr.max_rel_err || !d.pass) {
        mr.max_rel_err = std::max(mr.max_rel_err, d.max_rel_err);
        if (!d.pass && mr.pass)
          mr.worst = d.worst + " (seed " + std::to_string(seed) + ")";
        mr.pass = mr.pass && d.pass;
      }
    }
  }
  bool all_pass = true;
  for (const auto& mr : results) all_pass &= mr.pass;

  if (cfg.as_json) {
    json j;
    j["version"] = kSchemaVersion;
    j["command"] = "verify";
    j["workload"] = w.name;
    j["levels"] = tree.levels;
    j["k"] = k;
    j["seeds"] = cfg.seeds;
    j["tolerance"] = cfg.tol;
    j["pass"] = all_pass;
    j["modes"] = json::array();
    for (const auto& mr : results) {
      json m;
      m["mode"] = mr.mode;
      m["max_rel_err"] = mr.max_rel_err;
      m["pass"] = mr.pass;
      if (!mr.pass) m["worst"] = mr.worst;
      j["modes"].push_back(m);
    }
    j["reductions"] = decomposition_json(prog);
    json counters;
    counters["input_loads"] = last_incremental.input_loads;
    json roots = json::object();
    for (const auto& [id, n] : last_incremental.dep_root_loads)
      roots["d" + std::to_string(id)] = n;
    counters["dep_root_loads"] = roots;
    json aux = json::object();
    for (const auto& [lvl, n] : last_incremental.peak_aux_slots)
      aux["level" + std::to_string(lvl)] = n;
    counters["peak_aux_slots"] = aux;
    j["counters"] = counters;
    write_out(cfg, j.dump(2) + "\n");
  } else {
    std::ostringstream os;
    os << "verify " << w.name << ": levels [";
    for (std::size_t i = 0; i < tree.levels.size(); ++i)
      os << (i ? ", " : "") << tree.levels[i];
    os << "] k=" << k << " seeds=" << cfg.seeds << " tol=" << cfg.tol << "\n";
    for (const auto& mr : results) {
      os << "  " << mr.mode;
      for (std::size_t p = mr.mode.size(); p < 14; ++p) os << ' ';
      os << "max rel err " << mr.max_rel_err << "  "
         << (mr.pass ? "pass" : "FAIL " + mr.worst) << "\n";
    }
    os << (all_pass ? "PASS" : "FAIL") << "\n";
    write_out(cfg, os.str());
  }
  return all_pass ? 0 : 3;
}

// ---- emit -------------------------------------------------------------------

int cmd_emit(const RunConfig& cfg) {
  Workload w = load_workload(cfg);
  FusedProgram prog;
  try {
    prog = derive_fused(w.spec);
  } catch (const NotFusable& e) {
    std::cerr << "not fusable: " << e.what() << "\n";
    return 2;
  }
  EmitStrategy es;
  es.segments = static_cast<int>(strategy_segments(cfg.strategy));
  es.rows = cfg.rows;
  ScalarIR ir = emit_scalar_ir(prog, es);
  if (cfg.stage == "scalar") {
    write_out(cfg, render(ir));
    return 0;
  }
  if (cfg.stage != "tile") throw UsageError("--stage must be scalar or tile");
  TileConfig tiles;
  if (!cfg.tiles.empty()) {
    std::size_t comma = cfg.tiles.find(',');
    if (comma == std::string::npos)
      throw UsageError("--tiles expects row,stream");
    tiles.row_tile = std::atoll(cfg.tiles.substr(0, comma).c_str());
    tiles.stream_tile = std::atoll(cfg.tiles.substr(comma + 1).c_str());
  }
  try {
    write_out(cfg, render(tensorize(ir, tiles)));
  } catch (const NonDivisibleTile& e) {
    std::cerr << e.what() << "\n";
    return 1;
  }
  return 0;
}

// ---- counters ---------------------------------------------------------------

int cmd_counters(const RunConfig& cfg) {
  Workload w = load_workload(cfg);
  FusedProgram prog;
  try {
    prog = derive_fused(w.spec);
  } catch (const NotFusable& e) {
    std::cerr << "not fusable: " << e.what() << "\n";
    return 2;
  }
  TreeConfig tree = tree_of(cfg, w);

  struct Row {
    std::string label;
    ExecReport rep;
  };
  std::vector<Row> rows;
  {
    TensorStore st = w.generate(cfg.seed);
    rows.push_back({"unfused", run_unfused(w.spec, tree, st)});
  }
  for (int k = 1; k <= tree.depth(); ++k) {
    TensorStore st = w.generate(cfg.seed);
    rows.push_back({"fused@" + std::to_string(k), run_fused(prog, tree, k, st)});
  }
  {
    TensorStore st = w.generate(cfg.seed);
    rows.push_back({"incremental", run_incremental(prog, tree, st)});
  }

  auto total_loads = [](const ExecReport& r) {
    long long t = 0;
    for (const auto& [name, n] : r.input_loads) t += n;
    return t;
  };
  if (cfg.as_json) {
    json j;
    j["version"] = kSchemaVersion;
    j["command"] = "counters";
    j["workload"] = w.name;
    j["levels"] = tree.levels;
    j["rows"] = json::array();
    for (const auto& row : rows) {
      json r;
      r["mode"] = row.label;
      r["input_loads"] = row.rep.input_loads;
      json roots = json::object();
      for (const auto& [id, n] : row.rep.dep_root_loads)
        roots["d" + std::to_string(id)] = n;
      r["dep_root_loads"] = roots;
      json aux = json::object();
      for (const auto& [lvl, n] : row.rep.peak_aux_slots)
        aux["level" + std::to_string(lvl)] = n;
      r["peak_aux_slots"] = aux;
      j["rows"].push_back(r);
    }
    write_out(cfg, j.dump(2) + "\n");
    return 0;
  }
  std::ostringstream os;
  os << "counters " << w.name << ": levels [";
  for (std::size_t i = 0; i < tree.levels.size(); ++i)
    os << (i ? ", " : "") << tree.levels[i];
  os << "]\n";
  os << "mode           input_loads  dep_root_loads        peak_aux_slots\n";
  for (const auto& row : rows) {
    os << row.label;
    for (std::size_t p = row.label.size(); p < 15; ++p) os << ' ';
    std::ostringstream loads;
    loads << total_loads(row.rep);
    os << loads.str();
    for (std::size_t p = loads.str().size(); p < 13; ++p) os << ' ';
    std::ostringstream roots;
    bool first = true;
    for (const auto& [id, n] : row.rep.dep_root_loads) {
      roots << (first ? "" : " ") << "d" << id << ":" << n;
      first = false;
    }
    os << roots.str();
    for (std::size_t p = roots.str().size(); p < 22; ++p) os << ' ';
    first = true;
    for (const auto& [lvl, n] : row.rep.peak_aux_slots) {
      os << (first ? "" : " ") << "L" << lvl << ":" << n;
      first = false;
    }
    os << "\n";
  }
  write_out(cfg, os.str());
  return 0;
}

int cmd_list(const RunConfig& cfg) {
  if (cfg.as_json) {
    json j;
    j["version"] = kSchemaVersion;
    j["command"] = "list-workloads";
    j["workloads"] = builtin_names();
    write_out(cfg, j.dump(2) + "\n");
    return 0;
  }
  std::ostringstream os;
  for (const auto& n : builtin_names()) os << n << "\n";
  write_out(cfg, os.str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cascaded-reduction fusion engine"};
  app.require_subcommand(1);

  RunConfig cfg;
  cfg.seed = env_seed();

  auto add_common = [&](CLI::App* sub, bool needs_workload) {
    if (needs_workload) {
      sub->add_option("--workload", cfg.workload, "builtin workload name");
      sub->add_option("--spec", cfg.spec_path, "cascade DSL file");
    }
    sub->add_flag("--json", cfg.as_json, "emit the versioned JSON schema");
    sub->add_option("--out", cfg.out_path, "write output to a file");
    sub->add_option("--seed", cfg.seed, "base seed (default REDFUSE_SEED)");
    return sub;
  };

  CLI::App* fuse = add_common(app.add_subcommand("fuse", "derive fusion"), true);
  fuse->add_option("--rows", cfg.rows, "data-parallel row count for emission");

  CLI::App* verify =
      add_common(app.add_subcommand("verify", "cross-check all modes"), true);
  verify->add_option("--levels", cfg.levels, "tree level widths a,b,...,1")
      ->delimiter(',');
  verify->add_option("--k", cfg.k, "fuse level (default: deepest)");
  verify->add_option("--strategy", cfg.strategy, "single or multi:S");
  verify->add_option("--seeds", cfg.seeds, "number of seeds");
  verify->add_option("--tol", cfg.tol, "relative error tolerance");

  CLI::App* emit = add_common(app.add_subcommand("emit", "emit IR"), true);
  emit->add_option("--stage", cfg.stage, "scalar or tile");
  emit->add_option("--strategy", cfg.strategy, "single or multi:S");
  emit->add_option("--tiles", cfg.tiles, "row,stream tile sizes");
  emit->add_option("--rows", cfg.rows, "data-parallel row count");

  CLI::App* counters =
      add_common(app.add_subcommand("counters", "fuse-level counter table"),
                 true);
  counters->add_option("--levels", cfg.levels, "tree level widths a,b,...,1")
      ->delimiter(',');

  CLI::App* list =
      add_common(app.add_subcommand("list-workloads", "list builtins"), false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }

  try {
    if (fuse->parsed()) return cmd_fuse(cfg);
    if (verify->parsed()) return cmd_verify(cfg);
    if (emit->parsed()) return cmd_emit(cfg);
    if (counters->parsed()) return cmd_counters(cfg);
    if (list->parsed()) return cmd_list(cfg);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const SyntaxError& e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return 1;
  } catch (const UnknownWorkload& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const UnknownInput& e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return 1;
  } catch (const ForwardDependency& e) {
    std::cerr << "parse error: " << e.what() << "\n";
    return 1;
  } catch (const IncompatibleSegmentation& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
