#ifndef CLFLOW_DRIVER_HPP
#define CLFLOW_DRIVER_HPP

#include <cstdint>
#include <string>

#include "clflow/costmodel.hpp"
#include "clflow/netdef.hpp"
#include "clflow/plan.hpp"

namespace clflow::driver {

struct CompileOptions {
  std::string model_path;
  std::string device_path;
  std::string mode = "auto";
  bool verify = false;
  std::uint64_t seed = 0;
  std::string out_dir = ".";
  std::string report_path;  // defaults to <out_dir>/report.json
  bool of_enabled = true;
};

struct VerifyOutcome {
  bool run = false;
  bool passed = true;
  std::vector<ir::i64> input_shape;
  std::vector<std::uint64_t> seeds;
  double max_rel_err = 0.0;
};

/// Verify an optimized plan against the unoptimized folded reference on
/// synthesized weights/input. Large inputs are reduced to 32x32 first
/// (plan rebuilt at that size, same mode).
VerifyOutcome verify_against_reference(const netdef::NetworkGraph &graph,
                                       const cost::DeviceProfile &device,
                                       const plan::ExecutionPlan &full_plan,
                                       std::uint64_t seed_first, int seed_count);

/// Full pipeline: parse -> plan -> estimate -> (verify) -> emit. Writes
/// kernels.cl, host_plan.json, report.json and build_flags.txt into out_dir.
/// Returns the process exit status; on planning errors a report naming the
/// failure is still written.
int compile_run(const CompileOptions &options);

/// Relative elementwise comparison used by verification and tests:
/// |a-b| <= tol * max(|a|, |b|) per element (exact equality passes).
double max_rel_err(const std::vector<float> &a, const std::vector<float> &b);

}  // namespace clflow::driver

#endif
