#include "redfuse/workloads.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

namespace redfuse {

namespace {

std::vector<double> uniform(std::mt19937_64& rng, long long n, double lo,
                            double hi) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(static_cast<std::size_t>(n));
  for (double& x : v) x = dist(rng);
  return v;
}

OutputVal scalar_out(int id, double v) {
  OutputVal o;
  o.id = id;
  o.v = {v};
  return o;
}

ExecReport oracle_report(std::vector<OutputVal> outs) {
  ExecReport rep;
  rep.strategy = "oracle";
  rep.outputs = std::move(outs);
  return rep;
}

}  // namespace

// ---- safe softmax -----------------------------------------------------------

Workload make_safe_softmax(long long n) {
  Workload w;
  w.name = "safe_softmax";
  std::ostringstream dsl;
  dsl << "cascade safe_softmax\n"
      << "input x len " << n << "\n"
      << "reduce 1 op max\n    x[l]\n"
      << "reduce 2 op sum\n    exp(x[l] - d1)\n";
  w.spec = parse_cascade(dsl.str());
  w.generate = [n](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    TensorStore st;
    st.define("x", n, 0, uniform(rng, n, -2.0, 2.0));
    return st;
  };
  w.oracle = [](const TensorStore& st) {
    const auto& x = st.array("x").data;
    double m = x[0];
    for (double v : x) m = std::max(m, v);
    double t = 0;
    for (double v : x) t += std::exp(v - m);
    return oracle_report({scalar_out(1, m), scalar_out(2, t)});
  };
  return w;
}

// ---- attention (single query row over precomputed logits) -------------------

Workload make_attention(long long kv, long long hd) {
  Workload w;
  w.name = "attention";
  std::ostringstream dsl;
  dsl << "cascade attention\n"
      << "input P len " << kv << "\n"
      << "input V len " << kv << " free " << hd << "\n"
      << "reduce 1 op max\n    P[l]\n"
      << "reduce 2 op sum\n    exp(P[l] - d1)\n"
      << "reduce 3 op sum free " << hd << "\n"
      << "    exp(P[l] - d1) / d2 * V[l, f]\n";
  w.spec = parse_cascade(dsl.str());
  w.generate = [kv, hd](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    // Logits come from a q.K' product with q pre-scaled by 1/sqrt(hd); the
    // producer arrays ride along for IR-level interpretation.
    std::vector<double> q = uniform(rng, hd, -1.0, 1.0);
    double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    for (double& x : q) x *= scale;
    std::vector<double> key = uniform(rng, kv * hd, -1.0, 1.0);
    std::vector<double> p(static_cast<std::size_t>(kv));
    for (long long l = 0; l < kv; ++l) {
      double acc = 0;
      for (long long d = 0; d < hd; ++d)
        acc += q[static_cast<std::size_t>(d)] *
               key[static_cast<std::size_t>(l * hd + d)];
      p[static_cast<std::size_t>(l)] = acc;
    }
    TensorStore st;
    st.define("P", kv, 0, std::move(p));
    st.define("V", kv, hd, uniform(rng, kv * hd, -1.0, 1.0));
    st.define("Q", 1, hd, std::move(q));
    st.define("K", kv, hd, std::move(key));
    return st;
  };
  w.oracle = [kv, hd](const TensorStore& st) {
    const auto& p = st.array("P").data;
    const auto& v = st.array("V").data;
    double m = p[0];
    for (double x : p) m = std::max(m, x);
    double t = 0;
    for (double x : p) t += std::exp(x - m);
    OutputVal o;
    o.id = 3;
    o.v.assign(static_cast<std::size_t>(hd), 0.0);
    for (long long l = 0; l < kv; ++l) {
      double wgt = std::exp(p[static_cast<std::size_t>(l)] - m) / t;
      for (long long f = 0; f < hd; ++f)
        o.v[static_cast<std::size_t>(f)] +=
            wgt * v[static_cast<std::size_t>(l * hd + f)];
    }
    return oracle_report({scalar_out(1, m), scalar_out(2, t), o});
  };
  return w;
}

// ---- MoE routing ------------------------------------------------------------

Workload make_moe_routing(long long experts, long long kprime) {
  Workload w;
  w.name = "moe_routing";
  std::ostringstream dsl;
  dsl << "cascade moe_routing\n"
      << "input s len " << experts << "\n"
      << "reduce 1 op max\n    s[l]\n"
      << "reduce 2 op sum\n    exp(s[l] - d1)\n"
      << "reduce 3 op topk " << kprime << "\n    s[l]\n";
  w.spec = parse_cascade(dsl.str());
  w.generate = [experts](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    TensorStore st;
    st.define("s", experts, 0, uniform(rng, experts, -2.0, 2.0));
    return st;
  };
  w.oracle = [experts, kprime](const TensorStore& st) {
    const auto& s = st.array("s").data;
    double m = s[0];
    for (double x : s) m = std::max(m, x);
    double t = 0;
    for (double x : s) t += std::exp(x - m);
    // Sort-based selection: descending value, ties to the lowest index.
    std::vector<std::pair<double, long long>> all;
    for (long long l = 0; l < experts; ++l)
      all.emplace_back(s[static_cast<std::size_t>(l)], l + 1);
    std::stable_sort(all.begin(), all.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second < b.second;
    });
    OutputVal o;
    o.id = 3;
    all.resize(static_cast<std::size_t>(std::min<long long>(kprime, experts)));
    o.topk = std::move(all);
    return oracle_report({scalar_out(1, m), scalar_out(2, t), o});
  };
  w.finalize = [](const std::vector<OutputVal>& outs) {
    double m = outs[0].v[0], t = outs[1].v[0];
    std::vector<std::pair<std::string, double>> fin;
    for (std::size_t i = 0; i < outs[2].topk.size(); ++i)
      fin.emplace_back("gate" + std::to_string(i + 1),
                       std::exp(outs[2].topk[i].first - m) / t);
    return fin;
  };
  return w;
}

// ---- quant + gemm -----------------------------------------------------------

Workload make_quant_gemm(long long k, long long n, double fmax) {
  Workload w;
  w.name = "quant_gemm";
  std::ostringstream dsl;
  dsl << "cascade quant_gemm\n"
      << "input a len " << k << "\n"
      << "input w len " << k << " free " << n << "\n"
      << "const FMAX = " << format_number(fmax) << "\n"
      << "reduce 1 op max\n    abs(a[l])\n"
      << "reduce 2 op sum free " << n << "\n"
      << "    (FMAX * a[l] / d1) * w[l, f]\n";
  w.spec = parse_cascade(dsl.str());
  w.generate = [k, n](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    TensorStore st;
    st.define("a", k, 0, uniform(rng, k, -2.0, 2.0));
    st.define("w", k, n, uniform(rng, k * n, -1.0, 1.0));
    return st;
  };
  w.oracle = [k, n, fmax](const TensorStore& st) {
    const auto& a = st.array("a").data;
    const auto& wt = st.array("w").data;
    double amax = 0;
    for (double x : a) amax = std::max(amax, std::fabs(x));
    OutputVal o;
    o.id = 2;
    o.v.assign(static_cast<std::size_t>(n), 0.0);
    for (long long l = 0; l < k; ++l) {
      double q = fmax * a[static_cast<std::size_t>(l)] / amax;
      for (long long f = 0; f < n; ++f)
        o.v[static_cast<std::size_t>(f)] +=
            q * wt[static_cast<std::size_t>(l * n + f)];
    }
    return oracle_report({scalar_out(1, amax), o});
  };
  return w;
}

// ---- sum + sum --------------------------------------------------------------

Workload make_sum_sum(long long n) {
  Workload w;
  w.name = "sum_sum";
  std::ostringstream dsl;
  dsl << "cascade sum_sum\n"
      << "input x1 len " << n << "\n"
      << "input x2 len " << n << "\n"
      << "const EPS = 1e-12\n"
      << "reduce 1 op sum\n    x1[l] * x1[l]\n"
      << "reduce 2 op sum\n    x1[l] * x2[l] / sqrt(max(d1 - 10, EPS))\n";
  w.spec = parse_cascade(dsl.str());
  w.generate = [n](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    TensorStore st;
    st.define("x1", n, 0, uniform(rng, n, -1.0, 1.0));
    st.define("x2", n, 0, uniform(rng, n, -1.0, 1.0));
    return st;
  };
  w.oracle = [](const TensorStore& st) {
    const auto& x1 = st.array("x1").data;
    const auto& x2 = st.array("x2").data;
    double m = 0;
    for (double x : x1) m += x * x;
    double denom = std::sqrt(std::fmax(m - 10.0, 1e-12));
    double s = 0;
    for (std::size_t i = 0; i < x1.size(); ++i) s += x1[i] * x2[i] / denom;
    return oracle_report({scalar_out(1, m), scalar_out(2, s)});
  };
  return w;
}

// ---- variance ---------------------------------------------------------------

Workload make_variance(long long n) {
  Workload w;
  w.name = "variance";
  std::ostringstream dsl;
  dsl << "cascade variance\n"
      << "input x len " << n << "\n"
      << "reduce 1 op sum\n    x[l]\n"
      << "reduce 2 op sum\n    x[l] * x[l]\n";
  w.spec = parse_cascade(dsl.str());
  w.generate = [n](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    TensorStore st;
    st.define("x", n, 0, uniform(rng, n, -2.0, 2.0));
    return st;
  };
  w.oracle = [](const TensorStore& st) {
    const auto& x = st.array("x").data;
    double s = 0, sq = 0;
    for (double v : x) {
      s += v;
      sq += v * v;
    }
    return oracle_report({scalar_out(1, s), scalar_out(2, sq)});
  };
  w.finalize = [n](const std::vector<OutputVal>& outs) {
    double mean = outs[0].v[0] / static_cast<double>(n);
    double var = outs[1].v[0] / static_cast<double>(n) - mean * mean;
    return std::vector<std::pair<std::string, double>>{{"mean", mean},
                                                       {"variance", var}};
  };
  return w;
}

// ---- moment of inertia ------------------------------------------------------

Workload make_moment_of_inertia(long long n) {
  Workload w;
  w.name = "moment_of_inertia";
  std::ostringstream dsl;
  dsl << "cascade moment_of_inertia\n"
      << "input mass len " << n << "\n"
      << "input pos len " << n << " free 3\n"
      << "reduce 1 op sum\n    mass[l]\n"
      << "reduce 2 op sum free 3\n    mass[l] * pos[l, f]\n"
      << "reduce 3 op sum free 3\n    mass[l] * pos[l, f] * pos[l, f]\n";
  w.spec = parse_cascade(dsl.str());
  w.generate = [n](std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    TensorStore st;
    st.define("mass", n, 0, uniform(rng, n, 0.1, 2.0));
    st.define("pos", n, 3, uniform(rng, n * 3, -2.0, 2.0));
    return st;
  };
  w.oracle = [n](const TensorStore& st) {
    const auto& mass = st.array("mass").data;
    const auto& pos = st.array("pos").data;
    double total = 0;
    for (double v : mass) total += v;
    OutputVal s2, s3;
    s2.id = 2;
    s3.id = 3;
    s2.v.assign(3, 0.0);
    s3.v.assign(3, 0.0);
    for (long long l = 0; l < n; ++l)
      for (int f = 0; f < 3; ++f) {
        double p = pos[static_cast<std::size_t>(l * 3 + f)];
        s2.v[static_cast<std::size_t>(f)] +=
            mass[static_cast<std::size_t>(l)] * p;
        s3.v[static_cast<std::size_t>(f)] +=
            mass[static_cast<std::size_t>(l)] * p * p;
      }
    return oracle_report({scalar_out(1, total), s2, s3});
  };
  w.finalize = [](const std::vector<OutputVal>& outs) {
    double total = outs[0].v[0];
    std::vector<std::pair<std::string, double>> fin;
    const char* names[3] = {"cx", "cy", "cz"};
    double inertia = 0;
    for (int f = 0; f < 3; ++f) {
      double s = outs[1].v[static_cast<std::size_t>(f)];
      fin.emplace_back(names[f], s / total);
      inertia += outs[2].v[static_cast<std::size_t>(f)] - s * s / total;
    }
    fin.emplace_back("inertia", inertia);
    return fin;
  };
  return w;
}

// ---- registry ---------------------------------------------------------------

const std::vector<std::string>& builtin_names() {
  static const std::vector<std::string> names = {
      "safe_softmax", "attention", "moe_routing",       "quant_gemm",
      "sum_sum",      "variance",  "moment_of_inertia"};
  return names;
}

Workload builtin(const std::string& name) {
  if (name == "safe_softmax") return make_safe_softmax(1024);
  if (name == "attention") return make_attention(256, 64);
  if (name == "moe_routing") return make_moe_routing(128, 8);
  if (name == "quant_gemm") return make_quant_gemm(512, 256);
  if (name == "sum_sum") return make_sum_sum(1024);
  if (name == "variance") return make_variance(8192);
  if (name == "moment_of_inertia") return make_moment_of_inertia(1024);
  throw UnknownWorkload("no builtin workload named " + name);
}

ExecReport oracle_eval(const Workload& w, const TensorStore& store) {
  for (const auto& in : w.spec.inputs) {
    const auto& a = store.array(in.name);  // ShapeMismatch if absent
    if (a.len != in.len || a.free_len != in.free_len)
      throw ShapeMismatch(in.name + ": shape does not match the workload");
  }
  return w.oracle(store);
}

std::vector<std::pair<std::string, double>> finalized(const Workload& w,
                                                      const ExecReport& rep) {
  if (!w.finalize) return {};
  return w.finalize(rep.outputs);
}

std::vector<TreeConfig> default_tree_configs(long long l0) {
  std::vector<TreeConfig> cfgs;
  cfgs.push_back({{l0, 1}});
  if (l0 % 16 == 0 && l0 / 16 > 1) cfgs.push_back({{l0, l0 / 16, 1}});
  // Deep tree: keep dividing by 16 (then 4) while the widths stay integral.
  std::vector<long long> deep{l0};
  while (deep.back() > 1) {
    long long cur = deep.back();
    if (cur % 16 == 0 && cur / 16 > 1)
      deep.push_back(cur / 16);
    else if (cur % 4 == 0 && cur / 4 > 1)
      deep.push_back(cur / 4);
    else
      deep.push_back(1);
  }
  if (deep.size() > 3) cfgs.push_back({deep});
  return cfgs;
}

}  // namespace redfuse
