#ifndef CLFLOW_INTERP_HPP
#define CLFLOW_INTERP_HPP

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "clflow/ir.hpp"
#include "clflow/plan.hpp"

namespace clflow::interp {

using ir::i64;
using Tensor = std::vector<float>;
using TensorMap = std::map<std::string, Tensor>;

/// Instrumented operation counts; count_flops on the source graph must agree
/// exactly with the counters of the unoptimized folded reference plan.
struct Counters {
  i64 macs = 0;
  i64 elem_flops = 0;  // ElemOp executions, Copy excluded
  i64 stmts = 0;
  i64 flops() const { return 2 * macs + elem_flops; }
};

/// Run one channel-free kernel to completion with sequential semantics.
/// `inputs` must hold a tensor for every global read buffer (by buffer
/// name); every global written buffer comes back in the result. Mac order
/// follows loop order exactly.
TensorMap interpret_kernel(const ir::KernelIR &kernel, const ir::Bindings &bindings,
                           const TensorMap &inputs, Counters *counters = nullptr);

struct PlanRunResult {
  TensorMap tensors;  // every global buffer after execution
  Counters counters;
  i64 steps = 0;
};

/// Execute a plan: folded plans run their invocations in order through
/// global buffers; pipelined plans co-simulate all kernels with blocking
/// bounded-FIFO channels under deterministic round-robin stepping.
/// Fails with DeadlockDetected when every unfinished kernel is blocked on a
/// channel operation, or StepBudgetExceeded past `max_steps` statements
/// (0 = default generous budget).
PlanRunResult interpret_plan(const plan::ExecutionPlan &plan, const TensorMap &inputs,
                             i64 max_steps = 0);

// --- deterministic data synthesis (counter-based, reproducible) ---

std::uint64_t splitmix64(std::uint64_t x);

/// Uniform [0, 1) value for element `index` of the named stream.
double synth_u01(std::uint64_t seed, const std::string &name, i64 index);

/// Weights uniform in (-1/sqrt(fan_in), 1/sqrt(fan_in)).
Tensor synth_weights(const std::string &name, i64 count, i64 fan_in, std::uint64_t seed);

/// Batchnorm parameters [2, C]: row 0 scale in [0.5, 1.5), row 1 shift in
/// [-0.5, 0.5).
Tensor synth_batchnorm(const std::string &name, i64 channels, std::uint64_t seed);

/// Input activations uniform in [0, 1).
Tensor synth_input(i64 count, std::uint64_t seed);

/// Every weight tensor a plan needs, keyed by storage name.
TensorMap synth_plan_weights(const plan::ExecutionPlan &plan,
                             const netdef::NetworkGraph &graph, std::uint64_t seed);

// --- tensor file I/O: flat little-endian f32 plus a ".shape" sidecar ---

void write_tensor(const std::string &path, const Tensor &data, const std::vector<i64> &dims);
std::pair<Tensor, std::vector<i64>> read_tensor(const std::string &path);

}  // namespace clflow::interp

#endif
