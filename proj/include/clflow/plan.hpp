#ifndef CLFLOW_PLAN_HPP
#define CLFLOW_PLAN_HPP

#include <map>
#include <string>
#include <vector>

#include "clflow/ir.hpp"
#include "clflow/lower.hpp"
#include "clflow/netdef.hpp"

namespace clflow::cost {
struct DeviceProfile;
}

namespace clflow::plan {

using ir::i64;

enum class Mode { Pipelined, Folded };

const char *to_string(Mode m);

/// One kernel launch. Pipelined plans have exactly one invocation per
/// kernel; folded plans execute invocations in order through global memory.
struct Invocation {
  std::string kernel_id;
  ir::Bindings bindings;                          // parameterized kernels only
  std::map<std::string, std::string> buffer_map;  // formal -> storage name
  std::vector<std::string> layers;                // graph layers this launch covers
};

struct GlobalBuffer {
  std::string name;
  i64 elems = 0;
  std::string role;  // input | output | weights | feature_map
};

struct FactorChoice {
  std::string kernel_id;
  std::string loop_var;
  std::vector<i64> candidates;  // divisors of the (gcd) extent, ascending
  i64 chosen = 1;
  std::string limiting;  // bandwidth | divisibility | resources
};

struct ModeRationale {
  i64 required_bits = 0;
  i64 budget_bits = 0;  // occupancy_cap * device bram bits
  std::string detail;
};

struct ExecutionPlan {
  Mode mode = Mode::Folded;
  bool of_enabled = true;
  std::string model_name;
  std::vector<ir::KernelIR> kernels;
  std::vector<lower::KernelMeta> metas;  // parallel to kernels
  std::vector<Invocation> invocations;
  std::vector<ir::ChannelDecl> channels;
  std::map<std::string, int> queues;  // kernel id -> queue index
  std::vector<FactorChoice> factors;
  std::vector<GlobalBuffer> global_buffers;
  std::string input_buffer = "fm_input";
  std::string output_buffer;
  ModeRationale rationale;

  const ir::KernelIR *find_kernel(const std::string &id) const;
  lower::KernelMeta *find_meta(const std::string &kernel_id);
  const lower::KernelMeta *find_meta(const std::string &kernel_id) const;
};

/// Mode selection: auto picks pipelined iff the summed activation and weight
/// bits fit under occupancy_cap * bram_bits; an explicit override is
/// validated against the same bound (OverrideInfeasible otherwise).
Mode select_mode(const netdef::NetworkGraph &normalized, const cost::DeviceProfile &device,
                 const std::string &override_mode, ModeRationale *rationale = nullptr);

/// Lower + fuse + cache-write the network into an unoptimized folded plan
/// (the reference schedule every optimized plan is verified against).
ExecutionPlan reference_plan(const netdef::NetworkGraph &graph);

/// Full planning pipeline: lower, fuse, cache writes, select mode, group and
/// parameterize (folded) or channelize + autorun (pipelined), choose factors,
/// assign queues.
ExecutionPlan build_plan(const netdef::NetworkGraph &graph, const cost::DeviceProfile &device,
                         const std::string &mode_override = "auto", bool of_enabled = true);

/// Replace inter-kernel feature-map buffers with channels (pipelined only).
ExecutionPlan channelize(ExecutionPlan plan);

/// Per-channel FIFO depth: next power of two >= the producing stage's output
/// feature-map element count.
std::map<std::string, i64> channel_depths(const ExecutionPlan &plan);

/// Apply channel_depths to the plan's channel declarations.
ExecutionPlan apply_channel_depths(ExecutionPlan plan);

/// Mark kernels with no global buffers and no scalar parameters autorun.
ExecutionPlan mark_autorun(ExecutionPlan plan);

/// Pipelined: one queue per non-autorun kernel; folded: a single queue.
ExecutionPlan assign_queues(ExecutionPlan plan);

/// Divisor sweep per tagged loop under the bandwidth cap and resource fit.
ExecutionPlan choose_factors(ExecutionPlan plan, const cost::DeviceProfile &device);

/// Plan-level invariants on top of the per-kernel checks.
std::vector<ir::Violation> structural_check(const ExecutionPlan &plan);

}  // namespace clflow::plan

#endif
