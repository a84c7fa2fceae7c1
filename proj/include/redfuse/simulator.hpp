// Executable semantics for cascades over multi-level reduction trees:
// unfused chains, fused trees at any level, incremental streaming, and
// multi-segment execution, with instrumented access counters.

#ifndef REDFUSE_SIMULATOR_HPP
#define REDFUSE_SIMULATOR_HPP

#include <map>
#include <string>
#include <vector>

#include "redfuse/acrf.hpp"
#include "redfuse/cascade.hpp"

namespace redfuse {

struct ShapeMismatch : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IncompatibleSegmentation : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Named input arrays with per-array load/store counters. Layout is
// reduce-axis major; l is 1-based, f is 1-based (0 selects a rank-1 array).
class TensorStore {
 public:
  struct Array {
    std::vector<double> data;
    long long len = 0;
    long long free_len = 0;  // 0: rank 1
    long long loads = 0;
    long long stores = 0;
  };

  void define(const std::string& name, long long len, long long free_len,
              std::vector<double> data);
  double load(const std::string& name, long long l, long long f = 0);
  const Array& array(const std::string& name) const;
  bool has(const std::string& name) const { return arrays_.count(name) > 0; }
  long long loads_of(const std::string& name) const;
  std::vector<std::string> names() const;

 private:
  std::map<std::string, Array> arrays_;
};

struct OutputVal {
  int id = 0;
  std::vector<double> v;  // one entry per free-axis lane
  std::vector<std::pair<double, long long>> topk;  // (value, 1-based index)
};

struct ExecReport {
  std::string strategy;
  std::vector<OutputVal> outputs;                // by reduction, id order
  std::map<std::string, long long> input_loads;  // element loads per array
  std::map<int, long long> dep_root_loads;  // final-result reads per producer
  std::map<int, long long> peak_aux_slots;  // scalar scratch slots per level
};

// Chain of reduction trees: reduction i runs only after d_1..d_{i-1} are
// final; every dependency read hits the producer's final result.
ExecReport run_unfused(const CascadeSpec& spec, const TreeConfig& cfg,
                       TensorStore& store);

// Levels 1..fuse_level execute as one merged tree with same-level
// corrections; a bridging correction per level-k partial converts to final
// dependency values; the remaining levels fold plainly.
ExecReport run_fused(const FusedProgram& prog, const TreeConfig& cfg,
                     int fuse_level, TensorStore& store);

// Fully fused streaming execution: every level keeps O(1) state and updates
// it per arriving element / child segment (store-prev, correct, reduce).
ExecReport run_incremental(const FusedProgram& prog, const TreeConfig& cfg,
                           TensorStore& store);

// num_segments independent streamed partials over equal slices of the
// reduce axis, merged by the level rule in slice order.
ExecReport run_multisegment(const FusedProgram& prog, const TreeConfig& cfg,
                            long long num_segments, TensorStore& store);

struct DiffReport {
  double max_rel_err = 0.0;
  bool pass = true;
  std::string worst;  // "d<i>[lane]" of the largest error, or a mismatch note
  std::map<std::string, long long> input_load_delta;
  std::map<int, long long> dep_root_delta;
};

// Per-output scaled relative error |a-b| / (1 + max(|a|,|b|)) against tol,
// plus counter deltas (a minus b).
DiffReport compare_reports(const ExecReport& a, const ExecReport& b,
                           double tol);

}  // namespace redfuse

#endif  // REDFUSE_SIMULATOR_HPP
