// Bundled cascades with seeded input generators and brute-force oracles.
// Oracles evaluate the defining formulas with plain sequential loops, with
// no trees, no fusion, and no shared code with the engine.

#ifndef REDFUSE_WORKLOADS_HPP
#define REDFUSE_WORKLOADS_HPP

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "redfuse/cascade.hpp"
#include "redfuse/simulator.hpp"

namespace redfuse {

struct UnknownWorkload : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Workload {
  std::string name;
  CascadeSpec spec;
  // Seeded generator of all input arrays at the workload's shapes.
  std::function<TensorStore(std::uint64_t seed)> generate;
  // Direct sequential evaluation; counters in the report stay empty.
  std::function<ExecReport(const TensorStore&)> oracle;
  // Post-scale hook: named final values computed from reduction outputs
  // (mean prefactors, center coordinates, normalized gates). May be null.
  std::function<std::vector<std::pair<std::string, double>>(
      const std::vector<OutputVal>&)>
      finalize;
};

const std::vector<std::string>& builtin_names();
Workload builtin(const std::string& name);  // UnknownWorkload

// Shape-parameterized constructors behind the builtins.
Workload make_safe_softmax(long long n);
Workload make_attention(long long kv, long long hd);
Workload make_moe_routing(long long experts, long long kprime);
Workload make_quant_gemm(long long k, long long n, double fmax = 448.0);
Workload make_sum_sum(long long n);
Workload make_variance(long long n);
Workload make_moment_of_inertia(long long n);

ExecReport oracle_eval(const Workload& w, const TensorStore& store);

// Post-scale hook applied to any report's outputs (empty if w has no hook).
std::vector<std::pair<std::string, double>> finalized(const Workload& w,
                                                      const ExecReport& rep);

// A small family of level configurations over the workload's reduce axis:
// always the flat tree, plus deeper trees when the lengths divide evenly.
std::vector<TreeConfig> default_tree_configs(long long l0);

}  // namespace redfuse

#endif  // REDFUSE_WORKLOADS_HPP
