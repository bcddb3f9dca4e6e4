#ifndef CLFLOW_LOWER_HPP
#define CLFLOW_LOWER_HPP

#include <string>
#include <utility>
#include <vector>

#include "clflow/ir.hpp"
#include "clflow/netdef.hpp"

namespace clflow::lower {

using ir::i64;

/// Planner-facing description of one lowered kernel stage. A stage starts as
/// a single layer; loop fusion folds elementwise consumers into it.
struct KernelMeta {
  std::vector<std::string> layers;      // covered layer ids, execution order
  netdef::LayerKind base_kind = netdef::LayerKind::Relu;
  i64 kernel_h = 0, kernel_w = 0, stride = 1;
  bool global_pool = false;

  // Parameterization dims (conv/depthwise/dense only): out channels,
  // in channels, output and input spatial extents.
  i64 filters = 0, channels = 0, out_h = 0, out_w = 0, in_h = 0, in_w = 0;

  std::vector<i64> out_shape;
  std::vector<std::string> inputs;      // producing layer ids ("input" allowed)
  std::string output_layer;             // last covered layer id
  std::vector<std::string> weight_buffers;

  /// Fused tail ops in application order; bool marks a weighted op (batchnorm).
  std::vector<std::pair<ir::ElemOpKind, bool>> post_ops;

  /// True when the kernel reads that input exactly once per element in
  /// row-major order (streamable through a channel without staging).
  std::vector<bool> inputs_linear;
  /// True when output stores happen in row-major order from a single site.
  bool output_linear = true;

  i64 out_elems() const {
    i64 n = 1;
    for (i64 d : out_shape) n *= d;
    return n;
  }
};

struct LoweredStage {
  ir::KernelIR kernel;
  KernelMeta meta;
};

/// Canonical naive lowering of one layer: no unrolling, accumulators kept in
/// global memory. `graph` must be padding-normalized (no same-padded layers).
LoweredStage lower_layer(const netdef::LayerSpec &layer, const netdef::NetworkGraph &graph);

/// One kernel per layer, in graph order.
std::vector<LoweredStage> lower_network(const netdef::NetworkGraph &graph);

/// Structure key of a stage for kernel grouping: base layer geometry plus
/// the fused post-op pattern.
struct StagePattern {
  netdef::LayerKind kind = netdef::LayerKind::Conv2d;
  i64 kernel_h = 0, kernel_w = 0, stride = 1;
  std::vector<std::pair<ir::ElemOpKind, bool>> post_ops;
  bool operator==(const StagePattern &) const = default;
  bool operator<(const StagePattern &o) const;
};

StagePattern pattern_of(const KernelMeta &meta);

/// Symbolic replay material for parameterized kernels: the base kernel with
/// F/C/H/W (C/H/W for depthwise) as scalar parameters, plus one elementwise
/// kernel per fused post-op, ready to be fused in the same order.
/// Input spatial extents are stride*H + in_offset_h (and likewise for W);
/// the offsets come from the concrete members being abstracted.
struct SymbolicStage {
  LoweredStage base;
  std::vector<LoweredStage> post;
};

SymbolicStage lower_stage_symbolic(const StagePattern &pattern, const std::string &kernel_id,
                                   i64 in_offset_h, i64 in_offset_w);

/// Substitute parameter bindings into every dim and index of the kernel,
/// producing a fully concrete kernel with an empty parameter list.
ir::KernelIR bind_kernel(const ir::KernelIR &k, const ir::Bindings &bindings);

}  // namespace clflow::lower

#endif
