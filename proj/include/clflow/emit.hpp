#ifndef CLFLOW_EMIT_HPP
#define CLFLOW_EMIT_HPP

#include <string>
#include <vector>

#include "clflow/plan.hpp"

namespace clflow::emit {

/// Render the plan as single-work-item kernels in the Intel FPGA OpenCL
/// dialect: channel declarations with depth attributes, autorun kernels
/// wrapped in an infinite loop, unroll pragmas on fully unrolled loops,
/// scalar dim arguments on parameterized kernels. Byte-deterministic.
std::string emit_kernels(const plan::ExecutionPlan &plan);

/// Host execution plan document: buffer allocations, queue map, ordered
/// invocations with bindings, channel list, synchronization notes.
std::string emit_host_plan(const plan::ExecutionPlan &plan);

/// Compiler flags implied by the plan's float-optimization setting.
std::vector<std::string> build_flags(const plan::ExecutionPlan &plan);

/// Lightweight grammar smoke-check of emitted kernel source: balanced
/// brackets, declared channels for every channel op, declared identifiers
/// inside every kernel. Returns human-readable violations (empty = pass).
std::vector<std::string> grammar_check(const std::string &source);

}  // namespace clflow::emit

#endif
