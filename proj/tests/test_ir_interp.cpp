#include <cstdio>
#include <filesystem>
#include <functional>

#include <doctest.h>

#include "clflow/error.hpp"
#include "clflow/interp.hpp"
#include "clflow/lower.hpp"
#include "clflow/plan.hpp"
#include "clflow/xform.hpp"
#include "testutil.hpp"

using namespace clflow;
using ir::AffineExpr;
using ir::Dim;

namespace {

lower::LoweredStage lower_single(const netdef::NetworkGraph &g) {
  return lower::lower_layer(g.layers[0], g);
}

int nest_depth(const ir::KernelIR &k) {
  int depth = 0;
  const std::vector<ir::Node> *body = &k.body;
  while (!body->empty() && body->front().is_loop()) {
    ++depth;
    body = &body->front().loop().body;
  }
  return depth;
}

int count_kind(const ir::KernelIR &k, ir::Stmt::Kind kind) {
  int n = 0;
  ir::for_each_stmt(k.body, [&](const ir::Stmt &s) { n += s.kind == kind; });
  return n;
}

}  // namespace

TEST_CASE("canonical conv lowering shape") {
  netdef::LayerSpec conv;
  conv.id = "c";
  conv.kind = netdef::LayerKind::Conv2d;
  conv.attrs = {{"filters", 8}, {"kernel_h", 5}, {"kernel_w", 5}, {"stride", 1}};
  auto g = testutil::single_layer_graph(conv, {1, 28, 28});
  auto stage = lower_single(g);

  CHECK(nest_depth(stage.kernel) == 3);  // point loops; reduction nest below the init store
  int macs = count_kind(stage.kernel, ir::Stmt::Kind::Mac);
  CHECK(macs == 1);
  // the accumulator is the global output buffer itself (base schedule)
  const ir::BufferDecl *out = stage.kernel.find_buffer("fm_c");
  REQUIRE(out != nullptr);
  CHECK(out->space == ir::MemSpace::Global);
  CHECK(out->access == ir::Access::ReadWrite);
  // six loops in total: f, oy, ox, ic, ky, kx
  CHECK(xform::loop_vars(stage.kernel).size() == 6);
  CHECK(ir::structural_check(stage.kernel).empty());
}

TEST_CASE("hand-checked 2x2 convolution") {
  netdef::LayerSpec conv;
  conv.id = "c";
  conv.kind = netdef::LayerKind::Conv2d;
  conv.attrs = {{"filters", 1}, {"kernel_h", 2}, {"kernel_w", 2}, {"stride", 1}};
  auto g = testutil::single_layer_graph(conv, {1, 3, 3});
  auto stage = lower_single(g);

  interp::TensorMap inputs;
  inputs["fm_input"] = {1, 2, 3, 4, 5, 6, 7, 8, 9};
  inputs["w_c"] = {1, 0, 0, 1};
  auto out = interp::interpret_kernel(stage.kernel, {}, inputs);
  CHECK(out.at("fm_c") == interp::Tensor{6, 8, 12, 14});
}

TEST_CASE("relu lowering and evaluation") {
  netdef::LayerSpec relu;
  relu.id = "r";
  relu.kind = netdef::LayerKind::Relu;
  auto g = testutil::single_layer_graph(relu, {8, 14, 14});
  auto stage = lower_single(g);
  CHECK(nest_depth(stage.kernel) == 3);
  CHECK(count_kind(stage.kernel, ir::Stmt::Kind::ElemOp) == 1);

  auto g3 = testutil::single_layer_graph(relu, {3, 1, 1});
  auto st = lower_single(g3);
  interp::TensorMap inputs;
  inputs["fm_input"] = {-1.0f, 0.0f, 2.5f};
  auto out = interp::interpret_kernel(st.kernel, {}, inputs);
  CHECK(out.at("fm_r") == interp::Tensor{0.0f, 0.0f, 2.5f});
}

TEST_CASE("dense trip count") {
  netdef::LayerSpec dense;
  dense.id = "d";
  dense.kind = netdef::LayerKind::Dense;
  dense.attrs = {{"units", 10}};
  auto g = testutil::single_layer_graph(dense, {256});
  auto stage = lower::lower_layer(g.layers[0], g);

  CHECK(xform::loop_vars(stage.kernel).size() == 2);  // (o, i)
  std::mt19937_64 rng(7);
  auto inputs = testutil::random_inputs(rng, stage.kernel);
  interp::Counters c;
  auto out = interp::interpret_kernel(stage.kernel, {}, inputs, &c);
  CHECK(c.macs == 2560);

  // matches a direct matrix-vector product
  const auto &x = inputs.at("fm_input");
  const auto &w = inputs.at("w_d");
  for (int o = 0; o < 10; ++o) {
    float acc = 0.0f;
    for (int i = 0; i < 256; ++i) acc += x[i] * w[o * 256 + i];
    CHECK(out.at("fm_d")[o] == doctest::Approx(acc).epsilon(1e-5));
  }
}

TEST_CASE("elementwise copy kernel is the identity") {
  ir::KernelIR k;
  k.id = "copy";
  k.buffers = {{"in", ir::MemSpace::Global, {Dim::constant(16)}, ir::Access::Read},
               {"out", ir::MemSpace::Global, {Dim::constant(16)}, ir::Access::Write}};
  ir::Stmt s;
  s.kind = ir::Stmt::Kind::ElemOp;
  s.op = ir::ElemOpKind::Copy;
  s.dst = ir::BufRef{"out", {AffineExpr::var("x")}};
  s.args = {ir::Operand::of(ir::BufRef{"in", {AffineExpr::var("x")}})};
  k.body = {ir::Node(ir::Loop{"x", Dim::constant(16), false, "", {ir::Node(s)}})};

  std::mt19937_64 rng(3);
  interp::TensorMap inputs;
  inputs["in"] = testutil::random_tensor(rng, 16);
  auto out = interp::interpret_kernel(k, {}, inputs);
  CHECK(out.at("out") == inputs.at("in"));
}

TEST_CASE("interpreter rejects out-of-bounds indices") {
  ir::KernelIR k;
  k.id = "broken";
  k.buffers = {{"in", ir::MemSpace::Global, {Dim::constant(4)}, ir::Access::Read},
               {"out", ir::MemSpace::Global, {Dim::constant(4)}, ir::Access::Write}};
  ir::Stmt s;
  s.kind = ir::Stmt::Kind::Store;
  s.dst = ir::BufRef{"out", {AffineExpr::var("x")}};
  s.args = {ir::Operand::of(
      ir::BufRef{"in", {AffineExpr::var("x").plus(AffineExpr::c(1))}})};  // reads in[x+1]
  k.body = {ir::Node(ir::Loop{"x", Dim::constant(4), false, "", {ir::Node(s)}})};

  interp::TensorMap inputs;
  inputs["in"] = {1, 2, 3, 4};
  try {
    interp::interpret_kernel(k, {}, inputs);
    FAIL("expected OutOfBoundsIndex");
  } catch (const Error &e) {
    CHECK(e.code() == "OutOfBoundsIndex");
  }
}

TEST_CASE("unbound symbols are rejected") {
  netdef::FlopKey key{netdef::LayerKind::Conv2d, 1, 1, 1};
  auto sym = lower::lower_stage_symbolic(lower::StagePattern{netdef::LayerKind::Conv2d, 1, 1, 1, {}},
                                         "g", 0, 0);
  try {
    interp::interpret_kernel(sym.base.kernel, {{"F", 2}, {"C", 3}}, {});  // H, W missing
    FAIL("expected UnboundSym");
  } catch (const Error &e) {
    CHECK(e.code() == "UnboundSym");
  }
  (void)key;
}

TEST_CASE("structural check flags broken kernels") {
  ir::KernelIR k;
  k.id = "bad";
  k.autorun = true;
  k.buffers = {{"g", ir::MemSpace::Global, {Dim::constant(4)}, ir::Access::Read}};
  ir::Stmt s;
  s.kind = ir::Stmt::Kind::Store;
  s.dst = ir::BufRef{"nope", {AffineExpr::c(0)}};
  s.args = {ir::Operand::immediate(1.0f)};
  k.body = {ir::Node(s)};

  auto violations = ir::structural_check(k);
  bool autorun_global = false, undeclared = false;
  for (const auto &v : violations) {
    autorun_global |= v.code == "autorun-with-global";
    undeclared |= v.code == "undeclared-buffer";
  }
  CHECK(autorun_global);
  CHECK(undeclared);
}

TEST_CASE("printer golden dump") {
  netdef::LayerSpec conv;
  conv.id = "c";
  conv.kind = netdef::LayerKind::Conv2d;
  conv.attrs = {{"filters", 2}, {"kernel_h", 2}, {"kernel_w", 2}, {"stride", 1}};
  auto g = testutil::single_layer_graph(conv, {1, 3, 3});
  auto stage = lower_single(g);
  std::string expected = testutil::read_file(testutil::source_dir() +
                                             "/tests/golden/conv_2x2.ir.txt");
  CHECK(ir::print_kernel(stage.kernel) == expected);
}

TEST_CASE("tensor file round trip") {
  auto dir = std::filesystem::temp_directory_path() / "clflow_tensor_io";
  std::filesystem::create_directories(dir);
  std::string path = (dir / "t.bin").string();
  std::mt19937_64 rng(11);
  auto t = testutil::random_tensor(rng, 24);
  interp::write_tensor(path, t, {2, 3, 4});
  auto [back, dims] = interp::read_tensor(path);
  CHECK(back == t);
  CHECK(dims == std::vector<ir::i64>{2, 3, 4});
}

TEST_CASE("weight synthesis is reproducible and seed-sensitive") {
  auto a = interp::synth_weights("w_x", 64, 9, 0);
  auto b = interp::synth_weights("w_x", 64, 9, 0);
  auto c = interp::synth_weights("w_x", 64, 9, 1);
  CHECK(a == b);
  CHECK(a != c);
  for (float v : a) CHECK(std::abs(v) <= 1.0f / 3.0f);
}

TEST_CASE("count_flops matches interpreter counters exactly") {
  auto g = testutil::load_model("lenet5");
  auto report = netdef::count_flops(g);
  auto reference = plan::reference_plan(g);

  interp::TensorMap inputs = interp::synth_plan_weights(reference, g, 0);
  inputs["fm_input"] = interp::synth_input(g.input_shape.elems(), 0);
  auto run = interp::interpret_plan(reference, inputs);
  CHECK(run.counters.macs == report.total_macs);
  CHECK(run.counters.flops() == report.total_flops);
}

TEST_CASE("flop counters agree on random graphs, with bounds checks on") {
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 12; ++trial) {
    auto g = testutil::random_chain_graph(rng);
    auto report = netdef::count_flops(g);
    auto reference = plan::reference_plan(g);
    REQUIRE(plan::structural_check(reference).empty());

    interp::TensorMap inputs =
        interp::synth_plan_weights(reference, g, static_cast<uint64_t>(trial));
    inputs["fm_input"] = interp::synth_input(g.input_shape.elems(), static_cast<uint64_t>(trial));
    // every access is bounds-checked here; OutOfBoundsIndex would throw
    auto run = interp::interpret_plan(reference, inputs);
    CHECK(run.counters.macs == report.total_macs);
    CHECK(run.counters.flops() == report.total_flops);
  }
}
