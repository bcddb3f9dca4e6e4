#include <algorithm>
#include <functional>
#include <set>

#include <doctest.h>

#include "clflow/costmodel.hpp"
#include "clflow/driver.hpp"
#include "clflow/error.hpp"
#include "clflow/interp.hpp"
#include "clflow/plan.hpp"
#include "testutil.hpp"

using namespace clflow;
using ir::AffineExpr;
using ir::Dim;
using netdef::LayerKind;

namespace {

std::string check_code(const std::function<void()> &f) {
  try {
    f();
  } catch (const Error &e) {
    return e.code();
  }
  return "";
}

cost::DeviceProfile s10sx() { return cost::load_device_profile(testutil::s10sx_path()); }

cost::DeviceProfile ample_device() {
  auto d = s10sx();
  d.name = "ample";
  d.aluts = 1'000'000'000;
  d.dsps = 1'000'000'000;
  d.bram_bits = 1'000'000'000'000;
  return d;
}

/// Reconvergent-path fixture: a source feeding an adder directly over a
/// short channel and through a staging (transpose-like) kernel on the long
/// path. The short channel backs up while the staging kernel waits for its
/// whole input.
plan::ExecutionPlan diamond_plan(ir::i64 n, ir::i64 short_depth, ir::i64 long_depth) {
  using ir::Access;
  using ir::BufRef;
  using ir::ElemOpKind;
  using ir::KernelIR;
  using ir::Loop;
  using ir::MemSpace;
  using ir::Node;
  using ir::Operand;
  using ir::Stmt;

  auto c0 = AffineExpr::c(0);
  auto x = AffineExpr::var("x");

  KernelIR src;
  src.id = "k_src";
  src.buffers = {{"fm_input", MemSpace::Global, {Dim::constant(n)}, Access::Read}};
  src.channels_out = {"ch_short", "ch_long_a"};
  Stmt w1{Stmt::Kind::ChannelWrite, {}, {Operand::of(BufRef{"fm_input", {x}})},
          ElemOpKind::Copy, "ch_short"};
  Stmt w2 = w1;
  w2.channel = "ch_long_a";
  src.body = {Node(Loop{"x", Dim::constant(n), false, "", {Node(w1), Node(w2)}})};

  KernelIR mid;
  mid.id = "k_mid";
  mid.autorun = true;
  mid.buffers = {{"stage", MemSpace::Local, {Dim::constant(n)}, Access::ReadWrite}};
  mid.channels_in = {"ch_long_a"};
  mid.channels_out = {"ch_long_b"};
  auto a = AffineExpr::var("a");
  auto b = AffineExpr::var("b");
  Stmt rd{Stmt::Kind::ChannelRead, BufRef{"stage", {a}}, {}, ElemOpKind::Copy, "ch_long_a"};
  Stmt wr{Stmt::Kind::ChannelWrite, {}, {Operand::of(BufRef{"stage", {b}})},
          ElemOpKind::Copy, "ch_long_b"};
  mid.body = {Node(Loop{"a", Dim::constant(n), false, "", {Node(rd)}}),
              Node(Loop{"b", Dim::constant(n), false, "", {Node(wr)}})};

  KernelIR sink;
  sink.id = "k_sink";
  sink.buffers = {{"fm_out", MemSpace::Global, {Dim::constant(n)}, Access::Write},
                  {"t0", MemSpace::Register, {Dim::constant(1)}, Access::ReadWrite},
                  {"t1", MemSpace::Register, {Dim::constant(1)}, Access::ReadWrite}};
  sink.channels_in = {"ch_short", "ch_long_b"};
  auto y = AffineExpr::var("y");
  Stmt r0{Stmt::Kind::ChannelRead, BufRef{"t0", {c0}}, {}, ElemOpKind::Copy, "ch_short"};
  Stmt r1{Stmt::Kind::ChannelRead, BufRef{"t1", {c0}}, {}, ElemOpKind::Copy, "ch_long_b"};
  Stmt add{Stmt::Kind::ElemOp, BufRef{"fm_out", {y}},
           {Operand::of(BufRef{"t0", {c0}}), Operand::of(BufRef{"t1", {c0}})},
           ElemOpKind::Add, ""};
  sink.body = {Node(Loop{"y", Dim::constant(n), false, "", {Node(r0), Node(r1), Node(add)}})};

  plan::ExecutionPlan p;
  p.mode = plan::Mode::Pipelined;
  p.model_name = "diamond";
  p.kernels = {src, mid, sink};
  lower::KernelMeta src_meta;
  src_meta.layers = {"src"};
  src_meta.output_layer = "src";
  src_meta.out_shape = {n};
  lower::KernelMeta mid_meta = src_meta;
  mid_meta.layers = {"mid"};
  mid_meta.output_layer = "mid";
  lower::KernelMeta sink_meta = src_meta;
  sink_meta.layers = {"sink"};
  sink_meta.output_layer = "sink";
  p.metas = {src_meta, mid_meta, sink_meta};
  for (const auto &k : p.kernels) p.invocations.push_back({k.id, {}, {}, {}});
  p.channels = {{"ch_short", short_depth, "k_src", "k_sink"},
                {"ch_long_a", long_depth, "k_src", "k_mid"},
                {"ch_long_b", long_depth, "k_mid", "k_sink"}};
  p.output_buffer = "fm_out";
  return p;
}

}  // namespace

TEST_CASE("mode selection per network") {
  auto device = s10sx();
  auto lenet = testutil::load_model("lenet5");
  CHECK(plan::select_mode(netdef::normalize_padding(lenet), device, "auto") ==
        plan::Mode::Pipelined);

  auto mobilenet = testutil::load_model("mobilenetv1");
  CHECK(plan::select_mode(netdef::normalize_padding(mobilenet), device, "auto") ==
        plan::Mode::Folded);

  auto resnet = testutil::load_model("resnet34");
  CHECK(plan::select_mode(netdef::normalize_padding(resnet), device, "auto") ==
        plan::Mode::Folded);

  // any multi-layer net on a nearly-BRAM-free device folds
  auto tiny = device;
  tiny.bram_bits = 1;
  CHECK(plan::select_mode(netdef::normalize_padding(lenet), tiny, "auto") == plan::Mode::Folded);

  // forcing pipelined where it cannot fit names the blocking resource
  CHECK(check_code([&] {
          plan::select_mode(netdef::normalize_padding(mobilenet), device, "pipelined");
        }) == "OverrideInfeasible");
}

TEST_CASE("lenet pipelined plan structure") {
  auto device = s10sx();
  auto lenet = testutil::load_model("lenet5");
  auto p = plan::build_plan(lenet, device, "auto");

  CHECK(p.mode == plan::Mode::Pipelined);
  CHECK(p.kernels.size() == 7);   // conv, pool, conv, pool, flatten, fc, fc
  CHECK(p.channels.size() == 6);  // a chain has kernels-1 edges

  // no inter-layer feature maps remain in global memory
  for (const auto &b : p.global_buffers) CHECK(b.role != "feature_map");

  int autorun = 0;
  for (const auto &k : p.kernels) autorun += k.autorun;
  CHECK(autorun == 3);  // pool1, pool2, flatten
  CHECK(p.queues.size() == 4);

  // queue rule: |queues| = |kernels| - |autorun| in pipelined mode
  CHECK(static_cast<int>(p.queues.size()) ==
        static_cast<int>(p.kernels.size()) - autorun);

  CHECK(plan::structural_check(p).empty());
}

TEST_CASE("channel depths round up to powers of two") {
  auto device = s10sx();
  auto lenet = testutil::load_model("lenet5");
  auto p = plan::build_plan(lenet, device, "auto");

  std::map<std::string, ir::i64> depth;
  for (const auto &ch : p.channels) depth[ch.name] = ch.depth_elems;
  // conv2 output feature map is exactly 256 floats = 1024 bytes
  CHECK(depth.at("ch_relu2__pool2") == 256);
  // conv1 output: 9*24*24 = 5184 -> 8192
  CHECK(depth.at("ch_relu1__pool1") == 8192);

  // every channel holds at least the producer's transfer unit
  auto depths = plan::channel_depths(p);
  for (const auto &ch : p.channels) {
    const auto *meta = p.find_meta(ch.producer);
    REQUIRE(meta != nullptr);
    CHECK(ch.depth_elems >= meta->out_elems());
    CHECK(depths.at(ch.name) == ch.depth_elems);
  }
}

TEST_CASE("mode-specific operations reject the wrong mode") {
  auto device = s10sx();
  auto mobilenet = testutil::load_model("mobilenetv1");
  auto folded = plan::build_plan(mobilenet, device, "folded");
  CHECK(check_code([&] { plan::channelize(folded); }) == "ModeMismatch");
  CHECK(check_code([&] { plan::mark_autorun(folded); }) == "ModeMismatch");
  CHECK(plan::channel_depths(folded).empty());

  // folded: single queue
  std::set<int> queues;
  for (const auto &[k, q] : folded.queues) queues.insert(q);
  CHECK(queues.size() == 1);
}

TEST_CASE("empty plan has zero queues") {
  plan::ExecutionPlan empty;
  auto q = plan::assign_queues(empty);
  CHECK(q.queues.empty());
}

TEST_CASE("factor sweep obeys bandwidth, divisibility and resources") {
  // dense 224 -> 2: the reduction loop streams uncached weights from global
  // memory, so the bandwidth cap (76 floats on the S10SX) binds first.
  netdef::NetworkGraph g;
  g.name = "t";
  g.input_shape.dims = {224};
  netdef::LayerSpec dense;
  dense.id = "d";
  dense.kind = LayerKind::Dense;
  dense.attrs = {{"units", 2}};
  dense.inputs = {"input"};
  g.layers = {dense};
  g.shapes = netdef::infer_shapes(g);

  auto p = plan::build_plan(g, ample_device(), "folded");
  const plan::FactorChoice *i_choice = nullptr;
  for (const auto &f : p.factors)
    if (f.loop_var == "i") i_choice = &f;
  REQUIRE(i_choice != nullptr);
  CHECK(i_choice->chosen == 56);  // largest divisor of 224 under the cap of 76
  CHECK(i_choice->limiting == "bandwidth");

  // ample everything, extent 28 -> full unroll preferred
  netdef::NetworkGraph g28 = g;
  g28.input_shape.dims = {28};
  g28.shapes = netdef::infer_shapes(g28);
  auto p28 = plan::build_plan(g28, ample_device(), "folded");
  const plan::FactorChoice *c28 = nullptr;
  for (const auto &f : p28.factors)
    if (f.loop_var == "i") c28 = &f;
  REQUIRE(c28 != nullptr);
  CHECK(c28->chosen == 28);
  CHECK(c28->limiting == "divisibility");

  // DSP-starved: budget 8 with one Mac forces f=7 out of {1,2,4,7,14,28}
  netdef::NetworkGraph g1 = g28;
  netdef::LayerSpec d1 = dense;
  d1.attrs = {{"units", 1}};
  g1.layers = {d1};
  g1.shapes = netdef::infer_shapes(g1);
  auto starved = ample_device();
  starved.dsps = 8;
  auto p1 = plan::build_plan(g1, starved, "folded");
  const plan::FactorChoice *c1 = nullptr;
  for (const auto &f : p1.factors)
    if (f.loop_var == "i") c1 = &f;
  REQUIRE(c1 != nullptr);
  CHECK(c1->candidates == std::vector<ir::i64>{1, 2, 4, 7, 14, 28});
  CHECK(c1->chosen == 7);
  CHECK(c1->limiting == "resources");

  // all chosen factors satisfy divisibility, the cap, and the fit
  auto device = s10sx();
  auto lenet = testutil::load_model("lenet5");
  auto lp = plan::build_plan(lenet, device, "auto");
  ir::i64 cap = cost::bandwidth_cap_factor(device, 4);
  auto est = cost::estimate_resources(lp, device);
  CHECK(cost::fits(est, device).ok);
  for (const auto &f : lp.factors) {
    CHECK(f.chosen >= 1);
    CHECK(f.chosen <= cap);
    bool divides = false;
    for (ir::i64 c : f.candidates) divides |= c == f.chosen;
    CHECK(divides);
  }
}

TEST_CASE("infeasible devices raise NoFeasibleFactor") {
  auto g = testutil::load_model("lenet5");
  auto micro = s10sx();
  micro.aluts = 100;  // not even an unfactored kernel fits
  CHECK(check_code([&] { plan::build_plan(g, micro, "folded"); }) == "NoFeasibleFactor");
}

TEST_CASE("pipelined plan matches the folded reference") {
  auto device = s10sx();
  auto lenet = testutil::load_model("lenet5");
  auto optimized = plan::build_plan(lenet, device, "auto");
  auto reference = plan::reference_plan(lenet);

  interp::TensorMap inputs = interp::synth_plan_weights(optimized, lenet, 0);
  inputs["fm_input"] = interp::synth_input(lenet.input_shape.elems(), 0);
  auto ref = interp::interpret_plan(reference, inputs);
  auto opt = interp::interpret_plan(optimized, inputs);

  const auto &a = ref.tensors.at(reference.output_buffer);
  const auto &b = opt.tensors.at(optimized.output_buffer);
  CHECK(driver::max_rel_err(a, b) <= 1e-4);

  // argmax agreement in particular
  auto argmax = [](const interp::Tensor &t) {
    return std::distance(t.begin(), std::max_element(t.begin(), t.end()));
  };
  CHECK(argmax(a) == argmax(b));
}

TEST_CASE("deadlock detection on the reconvergent fixture") {
  // depth 1 on the short path, below the reconvergence skew
  auto starving = diamond_plan(6, 1, 8);
  interp::TensorMap inputs;
  inputs["fm_input"] = {1, 2, 3, 4, 5, 6};
  CHECK(check_code([&] { interp::interpret_plan(starving, inputs); }) == "DeadlockDetected");

  // at the planner's computed depths everything completes
  auto healthy = plan::apply_channel_depths(diamond_plan(6, 1, 8));
  for (const auto &ch : healthy.channels) CHECK(ch.depth_elems == 8);
  auto run = interp::interpret_plan(healthy, inputs);
  CHECK(run.tensors.at("fm_out") == interp::Tensor{2, 4, 6, 8, 10, 12});
}

TEST_CASE("increasing channel depth preserves completion") {
  interp::TensorMap inputs;
  inputs["fm_input"] = {1, 2, 3, 4, 5, 6};
  for (ir::i64 short_depth = 1; short_depth <= 16; short_depth *= 2) {
    auto p = diamond_plan(6, short_depth, 8);
    bool completes = true;
    try {
      interp::interpret_plan(p, inputs);
    } catch (const Error &e) {
      REQUIRE(e.code() == "DeadlockDetected");
      completes = false;
    }
    if (short_depth >= 6) CHECK(completes);
    static bool completed_before = false;
    if (completed_before) CHECK(completes);  // monotone in depth
    completed_before = completes;
  }
}

TEST_CASE("step budget is enforced") {
  auto p = plan::apply_channel_depths(diamond_plan(6, 1, 8));
  interp::TensorMap inputs;
  inputs["fm_input"] = {1, 2, 3, 4, 5, 6};
  CHECK(check_code([&] { interp::interpret_plan(p, inputs, 5); }) == "StepBudgetExceeded");
}

TEST_CASE("mode choice is monotone under shrinking layers") {
  auto device = s10sx();
  auto lenet = testutil::load_model("lenet5");
  REQUIRE(plan::select_mode(netdef::normalize_padding(lenet), device, "auto") ==
          plan::Mode::Pipelined);
  // halve every filter count / dense width
  netdef::NetworkGraph shrunk = lenet;
  for (auto &l : shrunk.layers) {
    if (l.attrs.contains("filters")) l.attrs["filters"] = std::max<ir::i64>(1, l.attr("filters") / 2);
    if (l.attrs.contains("units")) l.attrs["units"] = std::max<ir::i64>(1, l.attr("units") / 2);
  }
  shrunk.shapes = netdef::infer_shapes(shrunk);
  CHECK(plan::select_mode(netdef::normalize_padding(shrunk), device, "auto") ==
        plan::Mode::Pipelined);
}

TEST_CASE("folded mobilenet plan groups pointwise convolutions") {
  auto device = s10sx();
  auto mobilenet = testutil::load_model("mobilenetv1");
  auto p = plan::build_plan(mobilenet, device, "auto");
  CHECK(p.mode == plan::Mode::Folded);
  CHECK(p.channels.empty());
  CHECK(plan::structural_check(p).empty());

  const ir::KernelIR *pw = p.find_kernel("g_conv2d_1x1_s1");
  REQUIRE(pw != nullptr);
  CHECK(pw->params == std::vector<std::string>{"F", "C", "H", "W"});

  // thirteen pointwise stages invoke the one parameterized kernel
  int pw_invocations = 0;
  for (const auto &inv : p.invocations) pw_invocations += inv.kernel_id == "g_conv2d_1x1_s1";
  CHECK(pw_invocations == 13);

  // no kernel is autorun in folded mode
  for (const auto &k : p.kernels) CHECK(!k.autorun);
}
