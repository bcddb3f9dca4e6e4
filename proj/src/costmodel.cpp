#include "clflow/costmodel.hpp"

#include <cmath>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "clflow/error.hpp"

namespace clflow::cost {

using ir::BufferDecl;
using ir::BufRef;
using ir::Dim;
using ir::KernelIR;
using ir::MemSpace;
using ir::Node;
using ir::Stmt;
using json = nlohmann::json;

const char *to_string(LsuKind k) {
  return k == LsuKind::Coalesced ? "coalesced" : "replicated";
}

i64 ResourceEstimate::lsu_replication_total() const {
  i64 n = 0;
  for (const auto &l : lsus) n += l.replication;
  return n;
}

DeviceProfile parse_device_profile(const std::string &text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception &e) {
    fail("SchemaError", std::string("device profile is not valid JSON: ") + e.what());
  }
  DeviceProfile d;
  try {
    d.name = doc.at("name").get<std::string>();
    d.aluts = doc.at("aluts").get<i64>();
    d.ffs = doc.at("ffs").get<i64>();
    d.dsps = doc.at("dsps").get<i64>();
    d.bram_bits = doc.at("bram_bits").get<i64>();
    d.ext_bandwidth_bytes_per_s = doc.at("ext_bandwidth_bytes_per_s").get<double>();
    d.assumed_clock_hz = doc.at("assumed_clock_hz").get<double>();
    if (doc.contains("calibration")) {
      const auto &c = doc.at("calibration");
      Calibration &cal = d.calibration;
      cal.alut_per_lsu = c.value("alut_per_lsu", cal.alut_per_lsu);
      cal.bram_blocks_per_lsu = c.value("bram_blocks_per_lsu", cal.bram_blocks_per_lsu);
      cal.alut_per_loop = c.value("alut_per_loop", cal.alut_per_loop);
      cal.alut_kernel_base = c.value("alut_kernel_base", cal.alut_kernel_base);
      cal.bram_block_bits = c.value("bram_block_bits", cal.bram_block_bits);
      cal.pipeline_fill_cycles = c.value("pipeline_fill_cycles", cal.pipeline_fill_cycles);
      cal.launch_overhead_cycles = c.value("launch_overhead_cycles", cal.launch_overhead_cycles);
      cal.bram_occupancy_cap = c.value("bram_occupancy_cap", cal.bram_occupancy_cap);
    }
  } catch (const json::exception &e) {
    fail("SchemaError", std::string("malformed device profile: ") + e.what());
  }
  if (d.aluts <= 0 || d.ffs <= 0 || d.dsps <= 0 || d.bram_bits <= 0 ||
      d.ext_bandwidth_bytes_per_s <= 0 || d.assumed_clock_hz <= 0)
    fail("SchemaError", "device profile fields must all be positive");
  return d;
}

DeviceProfile load_device_profile(const std::string &path) {
  std::ifstream f(path);
  if (!f) fail("IoError", "cannot read device profile '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return parse_device_profile(ss.str());
}

i64 bandwidth_cap_factor(const DeviceProfile &device, i64 elem_bytes) {
  if (elem_bytes <= 0) fail("SchemaError", "elem_bytes must be positive");
  double per_cycle = device.ext_bandwidth_bytes_per_s / device.assumed_clock_hz;
  return static_cast<i64>(per_cycle / static_cast<double>(elem_bytes));
}

// ---------------------------------------------------------------------------
// LSU inventory

namespace {

struct UnrolledLoop {
  std::string var;
  i64 factor;
};

/// Element stride of `var` in a reference; nullopt when a symbolic dimension
/// makes it unknown (conservatively treated as non-unit).
std::optional<i64> elem_stride(const BufRef &r, const BufferDecl &decl, const std::string &var) {
  i64 stride = 0;
  i64 row = 1;
  bool row_known = true;
  for (size_t d = r.index.size(); d-- > 0;) {
    i64 coeff = r.index[d].coeff_of(var);
    if (coeff != 0) {
      if (!row_known) return std::nullopt;
      stride += coeff * row;
    }
    if (!decl.shape[d].is_const())
      row_known = false;
    else
      row *= decl.shape[d].const_value();
  }
  return stride;
}

struct LsuScan {
  const KernelIR &k;
  std::vector<LsuInstance> out;
  std::vector<UnrolledLoop> unrolled;
  std::set<std::string> seen;  // one LSU per static (buffer, index, direction) site

  void site(const BufRef &r, bool is_store) {
    const BufferDecl *decl = k.find_buffer(r.buffer);
    if (!decl || decl->space != MemSpace::Global) return;
    std::string key = r.buffer + (is_store ? "!w" : "!r");
    for (const auto &e : r.index) key += "|" + ir::print_affine(e);
    if (!seen.insert(key).second) return;
    i64 unit = 1, repl = 1;
    for (const auto &u : unrolled) {
      bool present = false;
      for (const auto &e : r.index) present |= e.references(u.var);
      if (!present) continue;
      auto s = elem_stride(r, *decl, u.var);
      if (s && *s == 1)
        unit *= u.factor;
      else
        repl *= u.factor;
    }
    LsuInstance lsu;
    lsu.kernel_id = k.id;
    lsu.buffer = r.buffer;
    lsu.kind = repl == 1 ? LsuKind::Coalesced : LsuKind::Replicated;
    lsu.width_bytes = 4 * unit;
    lsu.replication = repl;
    out.push_back(std::move(lsu));
  }

  void walk(const std::vector<Node> &nodes) {
    for (const auto &n : nodes) {
      if (n.is_loop()) {
        const ir::Loop &l = n.loop();
        bool push = l.unroll_full && l.extent.is_const();
        if (push) unrolled.push_back({l.var, l.extent.const_value()});
        walk(l.body);
        if (push) unrolled.pop_back();
        continue;
      }
      const Stmt &s = n.stmt();
      switch (s.kind) {
        case Stmt::Kind::Store:
        case Stmt::Kind::ElemOp:
        case Stmt::Kind::ChannelRead:
          site(s.dst, true);
          break;
        case Stmt::Kind::Mac:
          site(s.dst, false);  // load of the running sum
          site(s.dst, true);   // store of the updated sum
          break;
        case Stmt::Kind::ChannelWrite:
          break;
      }
      for (const auto &a : s.args)
        if (!a.is_imm()) site(*a.ref, false);
    }
  }
};

i64 unroll_product_of_macs(const std::vector<Node> &nodes, i64 enclosing) {
  i64 dsps = 0;
  for (const auto &n : nodes) {
    if (n.is_loop()) {
      const ir::Loop &l = n.loop();
      i64 f = l.unroll_full && l.extent.is_const() ? l.extent.const_value() : 1;
      dsps += unroll_product_of_macs(l.body, enclosing * f);
    } else if (n.stmt().kind == Stmt::Kind::Mac) {
      dsps += enclosing;
    }
  }
  return dsps;
}

i64 count_loops(const std::vector<Node> &nodes) {
  i64 n = 0;
  for (const auto &node : nodes)
    if (node.is_loop()) n += 1 + count_loops(node.loop().body);
  return n;
}

/// Concurrent read lanes per local buffer (for port replication).
void local_readers(const std::vector<Node> &nodes, i64 enclosing,
                   std::map<std::string, i64> &readers) {
  for (const auto &n : nodes) {
    if (n.is_loop()) {
      const ir::Loop &l = n.loop();
      i64 f = l.unroll_full && l.extent.is_const() ? l.extent.const_value() : 1;
      local_readers(l.body, enclosing * f, readers);
      continue;
    }
    const Stmt &s = n.stmt();
    for (const auto &a : s.args)
      if (!a.is_imm()) readers[a.ref->buffer] += enclosing;
    if (s.kind == Stmt::Kind::Mac) readers[s.dst.buffer] += enclosing;
  }
}

}  // namespace

std::vector<LsuInstance> estimate_lsus(const KernelIR &kernel) {
  LsuScan scan{kernel, {}, {}, {}};
  scan.walk(kernel.body);
  return std::move(scan.out);
}

ResourceEstimate estimate_resources(const plan::ExecutionPlan &p, const DeviceProfile &device) {
  const Calibration &cal = device.calibration;
  ResourceEstimate est;

  for (const auto &k : p.kernels) {
    KernelUsage u;
    u.kernel_id = k.id;
    u.dsps = unroll_product_of_macs(k.body, 1);
    u.loops = count_loops(k.body);

    auto lsus = estimate_lsus(k);
    for (const auto &l : lsus) u.lsu_replication += l.replication;
    u.aluts = cal.alut_kernel_base + u.loops * cal.alut_per_loop +
              u.lsu_replication * cal.alut_per_lsu;

    std::map<std::string, i64> readers;
    local_readers(k.body, 1, readers);
    for (const auto &b : k.buffers) {
      if (b.space != MemSpace::Local) continue;
      i64 elems = 1;
      for (const auto &d : b.shape) elems *= d.const_value();
      i64 lanes = std::max<i64>(1, readers.count(b.name) ? readers.at(b.name) : 1);
      i64 ports = (lanes + 1) / 2;
      u.bram_bits += elems * 32 * ports;
    }
    u.bram_bits += u.lsu_replication * cal.bram_blocks_per_lsu * cal.bram_block_bits;

    est.dsps += u.dsps;
    est.aluts += u.aluts;
    est.bram_bits += u.bram_bits;
    est.lsus.insert(est.lsus.end(), lsus.begin(), lsus.end());
    est.per_kernel.push_back(std::move(u));
  }

  for (const auto &ch : p.channels) est.bram_bits += ch.depth_elems * 32;
  return est;
}

FitReport fits(const ResourceEstimate &estimate, const DeviceProfile &device) {
  FitReport r;
  r.margins["dsps"] = device.dsps - estimate.dsps;
  r.margins["bram_bits"] = device.bram_bits - estimate.bram_bits;
  r.margins["aluts"] = device.aluts - estimate.aluts;
  r.ok = true;
  for (const auto &[name, margin] : r.margins) r.ok &= margin >= 0;
  return r;
}

// ---------------------------------------------------------------------------
// throughput

namespace {

i64 trip_cycles(const std::vector<Node> &nodes, const ir::Bindings &b) {
  i64 total = 0;
  for (const auto &n : nodes) {
    if (n.is_loop()) {
      const ir::Loop &l = n.loop();
      i64 extent = l.unroll_full ? 1 : l.extent.value(b);
      total += extent * trip_cycles(l.body, b);
    } else {
      total += 1;
    }
  }
  return total;
}

}  // namespace

i64 kernel_cycles(const KernelIR &kernel, const ir::Bindings &bindings,
                  const Calibration &calibration) {
  return trip_cycles(kernel.body, bindings) + calibration.pipeline_fill_cycles;
}

ThroughputEstimate estimate_throughput(const plan::ExecutionPlan &p,
                                       const DeviceProfile &device) {
  const Calibration &cal = device.calibration;
  ThroughputEstimate t;
  if (p.kernels.empty() || p.invocations.empty())
    fail("EmptyPlan", "cannot estimate throughput of an empty plan");

  if (p.mode == plan::Mode::Pipelined) {
    for (const auto &k : p.kernels) {
      const plan::Invocation *inv = nullptr;
      for (const auto &i : p.invocations)
        if (i.kernel_id == k.id) inv = &i;
      i64 cycles = kernel_cycles(k, inv ? inv->bindings : ir::Bindings{}, cal);
      t.per_kernel_cycles.emplace_back(k.id, cycles);
      t.plan_cycles = std::max(t.plan_cycles, cycles);
    }
  } else {
    for (const auto &inv : p.invocations) {
      const KernelIR *k = p.find_kernel(inv.kernel_id);
      if (!k) fail("InvalidPlan", "invocation of unknown kernel '" + inv.kernel_id + "'");
      i64 cycles = kernel_cycles(*k, inv.bindings, cal) + cal.launch_overhead_cycles;
      t.per_kernel_cycles.emplace_back(inv.kernel_id, cycles);
      t.plan_cycles += cycles;
    }
  }
  t.fps = device.assumed_clock_hz / static_cast<double>(t.plan_cycles);
  return t;
}

}  // namespace clflow::cost
