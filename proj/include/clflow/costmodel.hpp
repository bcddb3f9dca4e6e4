#ifndef CLFLOW_COSTMODEL_HPP
#define CLFLOW_COSTMODEL_HPP

#include <map>
#include <string>
#include <vector>

#include "clflow/ir.hpp"
#include "clflow/plan.hpp"

namespace clflow::cost {

using ir::i64;

/// Logic/BRAM constants are nominal placeholders (the vendor compiler's own
/// estimates are unreliable); every value is profile-overridable.
struct Calibration {
  i64 alut_per_lsu = 2000;
  i64 bram_blocks_per_lsu = 4;
  i64 alut_per_loop = 300;
  i64 alut_kernel_base = 5000;
  i64 bram_block_bits = 20480;
  i64 pipeline_fill_cycles = 200;
  i64 launch_overhead_cycles = 5000;
  double bram_occupancy_cap = 0.8;
};

struct DeviceProfile {
  std::string name;
  i64 aluts = 0;
  i64 ffs = 0;
  i64 dsps = 0;
  i64 bram_bits = 0;
  double ext_bandwidth_bytes_per_s = 0.0;
  double assumed_clock_hz = 0.0;
  Calibration calibration;
};

DeviceProfile parse_device_profile(const std::string &json_text);
DeviceProfile load_device_profile(const std::string &path);

/// Largest unroll factor the external memory interface can feed per cycle:
/// floor(bandwidth / clock / elem_bytes).
i64 bandwidth_cap_factor(const DeviceProfile &device, i64 elem_bytes);

enum class LsuKind { Coalesced, Replicated };

const char *to_string(LsuKind k);

struct LsuInstance {
  std::string kernel_id;
  std::string buffer;
  LsuKind kind = LsuKind::Coalesced;
  i64 width_bytes = 4;
  i64 replication = 1;  // coalesced units always report 1
};

struct KernelUsage {
  std::string kernel_id;
  i64 dsps = 0;
  i64 bram_bits = 0;
  i64 aluts = 0;
  i64 loops = 0;
  i64 lsu_replication = 0;
};

struct ResourceEstimate {
  i64 dsps = 0;
  i64 bram_bits = 0;  // local buffers, channel FIFOs, LSU burst buffers
  i64 aluts = 0;
  std::vector<LsuInstance> lsus;
  std::vector<KernelUsage> per_kernel;
  i64 lsu_replication_total() const;
};

struct FitReport {
  bool ok = false;
  std::map<std::string, i64> margins;  // budget - used, per resource
};

/// LSU inventory of one kernel: each global access site yields one coalesced
/// LSU when the unrolled access is unit-stride, a replicated LSU otherwise.
/// On-chip accesses produce none.
std::vector<LsuInstance> estimate_lsus(const ir::KernelIR &kernel);

/// DSPs = Mac statements x product of enclosing unroll factors; BRAM from
/// local buffer bits x port replication plus LSU burst buffers plus channel
/// FIFOs; ALUTs from the per-kernel calibration constants.
ResourceEstimate estimate_resources(const plan::ExecutionPlan &plan, const DeviceProfile &device);

FitReport fits(const ResourceEstimate &estimate, const DeviceProfile &device);

struct ThroughputEstimate {
  std::vector<std::pair<std::string, i64>> per_kernel_cycles;
  i64 plan_cycles = 0;
  double fps = 0.0;
};

/// Statement-per-cycle pipeline model: a kernel costs its non-unrolled trip
/// count plus a fill constant; pipelined plans are bounded by the slowest
/// kernel, folded plans sum invocations plus launch overhead.
ThroughputEstimate estimate_throughput(const plan::ExecutionPlan &plan,
                                       const DeviceProfile &device);

i64 kernel_cycles(const ir::KernelIR &kernel, const ir::Bindings &bindings,
                  const Calibration &calibration);

}  // namespace clflow::cost

#endif
