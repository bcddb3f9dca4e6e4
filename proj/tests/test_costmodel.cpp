#include <doctest.h>

#include "clflow/costmodel.hpp"
#include "clflow/error.hpp"
#include "clflow/xform.hpp"
#include "testutil.hpp"

using namespace clflow;
using ir::AffineExpr;
using ir::Dim;
using netdef::LayerKind;

namespace {

cost::DeviceProfile s10sx() { return cost::load_device_profile(testutil::s10sx_path()); }

lower::LoweredStage lower_conv(ir::i64 filters, ir::i64 in_ch, ir::i64 k, ir::i64 h) {
  netdef::LayerSpec conv;
  conv.id = "c";
  conv.kind = LayerKind::Conv2d;
  conv.attrs = {{"filters", filters}, {"kernel_h", k}, {"kernel_w", k}, {"stride", 1}};
  auto g = testutil::single_layer_graph(conv, {in_ch, h, h});
  return lower::lower_layer(g.layers[0], g);
}

plan::ExecutionPlan wrap(std::vector<ir::KernelIR> kernels) {
  plan::ExecutionPlan p;
  p.mode = plan::Mode::Folded;
  for (auto &k : kernels) {
    p.invocations.push_back({k.id, {}, {}, {}});
    p.metas.emplace_back();
    p.kernels.push_back(std::move(k));
  }
  return p;
}

}  // namespace

TEST_CASE("bandwidth cap factor") {
  auto device = s10sx();
  CHECK(cost::bandwidth_cap_factor(device, 4) == 76);
  CHECK(cost::bandwidth_cap_factor(device, 8) == 38);

  auto half = device;
  half.ext_bandwidth_bytes_per_s = 38.4e9;
  CHECK(cost::bandwidth_cap_factor(half, 4) == 38);

  // non-increasing in element size, non-decreasing in bandwidth
  ir::i64 prev = cost::bandwidth_cap_factor(device, 1);
  for (ir::i64 bytes = 2; bytes <= 16; ++bytes) {
    ir::i64 cap = cost::bandwidth_cap_factor(device, bytes);
    CHECK(cap <= prev);
    prev = cap;
  }
}

TEST_CASE("lsu classification by stride") {
  // dense: w[o][i] with i innermost unit-stride
  netdef::LayerSpec dense;
  dense.id = "d";
  dense.kind = LayerKind::Dense;
  dense.attrs = {{"units", 4}};
  auto g = testutil::single_layer_graph(dense, {32});
  auto stage = lower::lower_layer(g.layers[0], g);

  auto mined = xform::strip_mine(stage.kernel, "i", 8);
  bool found_coalesced = false;
  for (const auto &l : cost::estimate_lsus(mined))
    if (l.buffer == "w_d") {
      CHECK(l.kind == cost::LsuKind::Coalesced);
      CHECK(l.width_bytes == 32);  // 8 lanes x 4 bytes
      CHECK(l.replication == 1);
      found_coalesced = true;
    }
  CHECK(found_coalesced);

  // unrolling the outer (stride-32) loop replicates instead
  auto mined_o = xform::strip_mine(stage.kernel, "o", 4);
  bool found_replicated = false;
  for (const auto &l : cost::estimate_lsus(mined_o))
    if (l.buffer == "w_d" && l.kind == cost::LsuKind::Replicated) {
      CHECK(l.replication == 4);
      found_replicated = true;
    }
  CHECK(found_replicated);

  // kernels touching only on-chip buffers produce no LSUs
  ir::KernelIR local_only;
  local_only.id = "l";
  local_only.buffers = {{"a", ir::MemSpace::Local, {Dim::constant(8)}, ir::Access::ReadWrite}};
  ir::Stmt s;
  s.kind = ir::Stmt::Kind::Store;
  s.dst = ir::BufRef{"a", {AffineExpr::var("x")}};
  s.args = {ir::Operand::immediate(0.0f)};
  local_only.body = {ir::Node(ir::Loop{"x", Dim::constant(8), false, "", {ir::Node(s)}})};
  CHECK(cost::estimate_lsus(local_only).empty());
}

TEST_CASE("dsp estimate equals mac statements times unroll product") {
  auto device = s10sx();
  auto stage = lower_conv(8, 8, 1, 4);
  auto tiled = xform::tile(stage.kernel, {"f", "ic"}, {8, 8});
  auto est = cost::estimate_resources(wrap({tiled}), device);
  CHECK(est.dsps == 64);

  auto est1 = cost::estimate_resources(wrap({stage.kernel}), device);
  CHECK(est1.dsps == 1);  // unrolled by 1: just the Mac statement count
}

TEST_CASE("fits is inclusive at the boundary") {
  auto device = s10sx();
  cost::ResourceEstimate zero;
  CHECK(cost::fits(zero, device).ok);

  cost::ResourceEstimate exact;
  exact.dsps = device.dsps;
  CHECK(cost::fits(exact, device).ok);

  cost::ResourceEstimate over;
  over.dsps = 6000;  // paper-scale plan exceeding the 5760 budget
  auto fit = cost::fits(over, device);
  CHECK(!fit.ok);
  CHECK(fit.margins.at("dsps") == 5760 - 6000);

  cost::ResourceEstimate bram_over;
  bram_over.bram_bits = device.bram_bits + 1;
  auto fb = cost::fits(bram_over, device);
  CHECK(!fb.ok);
  CHECK(fb.margins.at("bram_bits") == -1);
}

TEST_CASE("throughput formula") {
  auto device = s10sx();
  device.calibration.pipeline_fill_cycles = 200;
  device.calibration.launch_overhead_cycles = 0;

  // two kernels with 800 and 3800 single-statement iterations: 1000 and
  // 4000 cycles after the fill constant
  auto make = [&](const std::string &id, ir::i64 n) {
    ir::KernelIR k;
    k.id = id;
    k.buffers = {{"out_" + id, ir::MemSpace::Global, {Dim::constant(n)}, ir::Access::Write}};
    ir::Stmt s;
    s.kind = ir::Stmt::Kind::Store;
    s.dst = ir::BufRef{"out_" + id, {AffineExpr::var("x" + id)}};
    s.args = {ir::Operand::immediate(0.0f)};
    k.body = {ir::Node(ir::Loop{"x" + id, Dim::constant(n), false, "", {ir::Node(s)}})};
    return k;
  };

  auto p = wrap({make("a", 800), make("b", 3800)});
  p.mode = plan::Mode::Pipelined;
  auto t = cost::estimate_throughput(p, device);
  CHECK(t.plan_cycles == 4000);
  CHECK(t.fps == doctest::Approx(62500.0));

  auto f = wrap({make("a", 800), make("b", 800)});
  auto tf = cost::estimate_throughput(f, device);
  CHECK(tf.plan_cycles == 2000);
  CHECK(tf.fps == doctest::Approx(125000.0));

  plan::ExecutionPlan empty;
  try {
    cost::estimate_throughput(empty, device);
    FAIL("expected EmptyPlan");
  } catch (const Error &e) {
    CHECK(e.code() == "EmptyPlan");
  }
}

TEST_CASE("unrolling divides the trip-count term exactly") {
  auto device = s10sx();
  auto stage = lower_conv(4, 8, 1, 4);
  ir::i64 base = cost::kernel_cycles(stage.kernel, {}, device.calibration) -
                 device.calibration.pipeline_fill_cycles;
  for (ir::i64 f : {2, 4, 8}) {
    auto mined = xform::strip_mine(stage.kernel, "ic", f);
    ir::i64 cycles = cost::kernel_cycles(mined, {}, device.calibration) -
                     device.calibration.pipeline_fill_cycles;
    // the reduction term shrinks by exactly f; the per-point init store
    // outside the reduction is unchanged
    ir::i64 outside = 4 * 4 * 4;  // one init per (f, oy, ox) point
    CHECK((base - outside) % f == 0);
    CHECK(cycles == (base - outside) / f + outside);
  }
}

TEST_CASE("monotonicity under larger unroll factors") {
  auto device = s10sx();
  auto stage = lower_conv(4, 16, 1, 6);
  ir::i64 prev_dsps = 0;
  ir::i64 prev_cycles = std::numeric_limits<ir::i64>::max();
  for (ir::i64 f : {1, 2, 4, 8, 16}) {
    auto k = f == 1 ? stage.kernel : xform::strip_mine(stage.kernel, "ic", f);
    auto est = cost::estimate_resources(wrap({k}), device);
    ir::i64 cycles = cost::kernel_cycles(k, {}, device.calibration);
    CHECK(est.dsps >= prev_dsps);
    CHECK(cycles <= prev_cycles);
    prev_dsps = est.dsps;
    prev_cycles = cycles;
  }
}

TEST_CASE("fusion strictly reduces lsu count") {
  netdef::NetworkGraph g;
  g.name = "t";
  g.input_shape.dims = {2, 6, 6};
  netdef::LayerSpec conv;
  conv.id = "c";
  conv.kind = LayerKind::Conv2d;
  conv.attrs = {{"filters", 3}, {"kernel_h", 3}, {"kernel_w", 3}, {"stride", 1}};
  conv.inputs = {"input"};
  netdef::LayerSpec relu;
  relu.id = "r";
  relu.kind = LayerKind::Relu;
  relu.inputs = {"c"};
  g.layers = {conv, relu};
  g.shapes = netdef::infer_shapes(g);
  auto ks = lower::lower_network(g);

  ir::i64 before = 0;
  for (const auto &s : ks)
    for (const auto &l : cost::estimate_lsus(s.kernel)) before += l.replication;
  auto fused = xform::fuse_postop(ks[0].kernel, ks[1].kernel);
  ir::i64 after = 0;
  for (const auto &l : cost::estimate_lsus(fused)) after += l.replication;
  CHECK(after < before);
}

TEST_CASE("estimates are deterministic") {
  auto device = s10sx();
  auto lenet = testutil::load_model("lenet5");
  auto p = plan::build_plan(lenet, device, "auto");
  auto a = cost::estimate_resources(p, device);
  auto b = cost::estimate_resources(p, device);
  CHECK(a.dsps == b.dsps);
  CHECK(a.bram_bits == b.bram_bits);
  CHECK(a.aluts == b.aluts);
  CHECK(a.lsus.size() == b.lsus.size());
  auto ta = cost::estimate_throughput(p, device);
  auto tb = cost::estimate_throughput(p, device);
  CHECK(ta.plan_cycles == tb.plan_cycles);
}

TEST_CASE("device profile parsing validates fields") {
  try {
    cost::parse_device_profile(R"({"name": "x", "aluts": -1, "ffs": 1, "dsps": 1,
      "bram_bits": 1, "ext_bandwidth_bytes_per_s": 1.0, "assumed_clock_hz": 1.0})");
    FAIL("expected SchemaError");
  } catch (const Error &e) {
    CHECK(e.code() == "SchemaError");
  }
  auto d = cost::load_device_profile(testutil::s10sx_path());
  CHECK(d.dsps == 5760);
  CHECK(d.bram_bits == 11000000);
  CHECK(d.calibration.bram_occupancy_cap == doctest::Approx(0.8));
}
