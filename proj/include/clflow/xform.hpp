#ifndef CLFLOW_XFORM_HPP
#define CLFLOW_XFORM_HPP

#include <map>
#include <string>
#include <vector>

#include "clflow/ir.hpp"
#include "clflow/lower.hpp"
#include "clflow/netdef.hpp"

namespace clflow::xform {

using ir::i64;

/// One schedule step; the declarative file form mirrors this.
struct XformStep {
  enum class Kind { UnrollFull, StripMine, Tile, FusePostOp, CacheWrites, Parameterize };
  Kind kind = Kind::UnrollFull;
  std::string loop;
  i64 factor = 0;
  std::vector<std::string> loops;
  std::vector<i64> factors;
  std::string buffer;
  std::string consumer;   // FusePostOp: kernel id of the elementwise consumer
  std::string group_key;  // Parameterize: "<kind>/<kh>x<kw>/s<stride>"
};

/// Ordered steps per kernel id. Applied in kernel-id order, then step order.
using Schedule = std::map<std::string, std::vector<XformStep>>;

/// Annotate a constant-extent loop for full unrolling; semantics unchanged.
ir::KernelIR unroll_full(const ir::KernelIR &k, const std::string &loop_var);

/// Factor-checking variant: any factor below the extent must go through
/// strip_mine (PartialUnrollRequested).
ir::KernelIR unroll_full(const ir::KernelIR &k, const std::string &loop_var, i64 factor);

/// Split loop into outer(extent/f) x inner(f); the inner loop is fully
/// unrolled and indices are rewritten affinely.
ir::KernelIR strip_mine(const ir::KernelIR &k, const std::string &loop_var, i64 f);

/// Strip-mine a symbolic-extent loop of a parameterized kernel; divisibility
/// is enforced per binding at interpretation/plan time.
ir::KernelIR strip_mine_symbolic(const ir::KernelIR &k, const std::string &loop_var, i64 f);

/// Multi-dimensional strip mine over tagged loops on one nesting chain
/// around the Mac reduction.
ir::KernelIR tile(const ir::KernelIR &k, const std::vector<std::string> &loop_vars,
                  const std::vector<i64> &factors);

/// Merge an elementwise consumer (relu/relu6/batchnorm over exactly the
/// producer's output space) into the producer; the intermediate global
/// buffer disappears and the op applies to the accumulator before the store.
ir::KernelIR fuse_postop(const ir::KernelIR &producer, const ir::KernelIR &post);

/// Replace a global accumulator with a register accumulator plus a single
/// store to global at each output point, removing the global
/// read-after-write dependence from the reduction.
ir::KernelIR cache_writes(const ir::KernelIR &k, const std::string &buffer);

/// Planner helper: full unroll when f equals a constant extent, strip mine
/// otherwise (symbolic loops always strip mine). f == 1 is the identity.
ir::KernelIR apply_factor(const ir::KernelIR &k, const std::string &loop_var, i64 f);

struct ParameterizedGroup {
  ir::KernelIR kernel;  // symbolic dims as scalar parameters
  struct Member {
    ir::Bindings bindings;
    std::map<std::string, std::string> buffer_map;  // formal -> storage name
  };
  std::vector<Member> members;
};

/// Abstract a set of structurally identical stages that share filter size
/// and stride into one kernel with F/C/H/W runtime parameters.
ParameterizedGroup parameterize_group(const std::vector<lower::LoweredStage> &members,
                                      const netdef::FlopKey &key, const std::string &kernel_id);

/// Rename kernel id and buffers to positional placeholders; structural
/// equality modulo naming.
ir::KernelIR canonicalized(const ir::KernelIR &k);

std::vector<std::string> loop_vars(const ir::KernelIR &k);

// --- schedule file format (JSON, format_version 1) ---

Schedule parse_schedule(const std::string &text);
std::string serialize_schedule(const Schedule &schedule);

/// Apply a schedule to a kernel set; FusePostOp consumes the named consumer
/// kernel. Parameterize steps are planner-produced and rejected here.
void apply_schedule(std::map<std::string, ir::KernelIR> &kernels, const Schedule &schedule);

}  // namespace clflow::xform

#endif
