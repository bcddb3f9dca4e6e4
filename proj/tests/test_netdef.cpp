#include <cmath>
#include <functional>

#include <doctest.h>

#include "clflow/error.hpp"
#include "clflow/netdef.hpp"
#include "testutil.hpp"

using namespace clflow;
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

}  // namespace

TEST_CASE("parse bundled lenet5") {
  auto g = testutil::load_model("lenet5");
  CHECK(g.input_shape.dims == std::vector<ir::i64>{1, 28, 28});
  int convs = 0, pools = 0, denses = 0, relus = 0;
  for (const auto &l : g.layers) {
    convs += l.kind == LayerKind::Conv2d;
    pools += l.kind == LayerKind::MaxPool;
    denses += l.kind == LayerKind::Dense;
    relus += l.kind == LayerKind::Relu;
  }
  CHECK(convs == 2);
  CHECK(pools == 2);
  CHECK(denses == 2);
  CHECK(relus == 3);
  CHECK(g.shape_of("conv1").dims == std::vector<ir::i64>{9, 24, 24});
  CHECK(g.shape_of("conv2").dims == std::vector<ir::i64>{4, 8, 8});
  CHECK(g.shape_of("fc2").dims == std::vector<ir::i64>{10});
}

TEST_CASE("single relu layer preserves shape") {
  netdef::NetworkGraph g = netdef::parse_network(R"({
    "input_shape": [3, 8, 8],
    "layers": [{"id": "r", "kind": "relu", "inputs": ["input"]}]
  })");
  CHECK(g.layers.size() == 1);
  CHECK(g.shape_of("r").dims == std::vector<ir::i64>{3, 8, 8});
}

TEST_CASE("dangling input id is rejected") {
  std::string code = check_code([] {
    netdef::parse_network(R"({
      "input_shape": [3, 8, 8],
      "layers": [{"id": "c", "kind": "conv2d",
                  "attrs": {"filters": 4, "kernel_h": 3, "kernel_w": 3,
                            "stride": 1, "padding": "same"},
                  "inputs": ["x9"]}]
    })");
  });
  CHECK(code == "DanglingInput");
}

TEST_CASE("unknown kind and malformed documents") {
  CHECK(check_code([] {
          netdef::parse_network(R"({"input_shape": [1,4,4],
            "layers": [{"id": "z", "kind": "softmax9", "inputs": ["input"]}]})");
        }) == "UnknownKind");
  CHECK(check_code([] { netdef::parse_network("not json at all"); }) == "SchemaError");
  CHECK(check_code([] { netdef::parse_network(R"({"layers": []})"); }) == "SchemaError");
}

TEST_CASE("shape inference arithmetic") {
  // same padding, stride 1 preserves spatial dims
  netdef::LayerSpec conv;
  conv.id = "c";
  conv.kind = LayerKind::Conv2d;
  conv.attrs = {{"filters", 8}, {"kernel_h", 3}, {"kernel_w", 3}, {"stride", 1}};
  conv.padding = "same";
  auto g = testutil::single_layer_graph(conv, {3, 28, 28});
  CHECK(g.shape_of("c").dims == std::vector<ir::i64>{8, 28, 28});

  netdef::LayerSpec pool;
  pool.id = "p";
  pool.kind = LayerKind::MaxPool;
  pool.attrs = {{"kernel_h", 2}, {"kernel_w", 2}, {"stride", 2}};
  auto gp = testutil::single_layer_graph(pool, {8, 28, 28});
  CHECK(gp.shape_of("p").dims == std::vector<ir::i64>{8, 14, 14});
}

TEST_CASE("add with unequal operand shapes is rejected") {
  std::string code = check_code([] {
    netdef::parse_network(R"({
      "input_shape": [16, 8, 8],
      "layers": [
        {"id": "p", "kind": "maxpool",
         "attrs": {"kernel_h": 2, "kernel_w": 2, "stride": 2}, "inputs": ["input"]},
        {"id": "a", "kind": "add", "inputs": ["p", "input"]}
      ]
    })");
  });
  CHECK(code == "ShapeMismatch");
}

TEST_CASE("dense requires a flattened input") {
  std::string code = check_code([] {
    netdef::parse_network(R"({
      "input_shape": [4, 4, 4],
      "layers": [{"id": "d", "kind": "dense", "attrs": {"units": 10}, "inputs": ["input"]}]
    })");
  });
  CHECK(code == "ShapeMismatch");
}

TEST_CASE("flop counting formulas") {
  // conv2d 4 filters, 3 in_ch, k=3, same, stride 1 over (3,8,8)
  netdef::LayerSpec conv;
  conv.id = "c";
  conv.kind = LayerKind::Conv2d;
  conv.attrs = {{"filters", 4}, {"kernel_h", 3}, {"kernel_w", 3}, {"stride", 1}};
  conv.padding = "same";
  auto g = testutil::single_layer_graph(conv, {3, 8, 8});
  auto report = netdef::count_flops(g);
  CHECK(report.per_layer.at("c").macs == 6912);
  CHECK(report.per_layer.at("c").flops == 13824);

  // its own key carries the full MAC share
  CHECK(netdef::flop_share(g, {LayerKind::Conv2d, 3, 3, 1}) == doctest::Approx(1.0));
  CHECK(netdef::flop_share(g, {LayerKind::Conv2d, 1, 1, 1}) == 0.0);
}

TEST_CASE("bundled model flop totals") {
  auto lenet = testutil::load_model("lenet5");
  auto r = netdef::count_flops(lenet);
  CHECK(r.total_flops >= 389000 * 0.95);
  CHECK(r.total_flops <= 389000 * 1.05);
  CHECK(netdef::flop_share(lenet, {LayerKind::Conv2d, 1, 1, 1}) == 0.0);

  auto mobilenet = testutil::load_model("mobilenetv1");
  auto rm = netdef::count_flops(mobilenet);
  CHECK(static_cast<double>(rm.total_flops) >= 1.11e9 * 0.98);
  CHECK(static_cast<double>(rm.total_flops) <= 1.11e9 * 1.02);
  double share = netdef::flop_share(mobilenet, {LayerKind::Conv2d, 1, 1, 1});
  CHECK(share == doctest::Approx(0.949).epsilon(0.0053));
}

TEST_CASE("flop shares sum to one over MAC-bearing layers") {
  for (const char *name : {"lenet5", "mobilenetv1", "resnet34"}) {
    auto g = testutil::load_model(name);
    auto r = netdef::count_flops(g);
    double sum = 0.0;
    for (const auto &[key, share] : r.share_by_key) sum += share;
    CHECK(std::abs(sum - 1.0) < 1e-9);
  }
}

TEST_CASE("padding normalization rewrites same-padded ops") {
  auto mobilenet = testutil::load_model("mobilenetv1");
  auto normalized = netdef::normalize_padding(mobilenet);
  for (const auto &l : normalized.layers) {
    if (l.kind == LayerKind::Conv2d || l.kind == LayerKind::DepthwiseConv2d)
      CHECK(l.padding == "valid");
  }
  // shapes agree layer-for-layer with the original graph
  for (const auto &l : mobilenet.layers)
    CHECK(normalized.shape_of(l.id) == mobilenet.shape_of(l.id));
  // counted work is unchanged by normalization
  CHECK(netdef::count_flops(normalized).total_flops ==
        netdef::count_flops(mobilenet).total_flops);

  // stride-2 same conv pads asymmetrically (smaller half first)
  const auto *conv1_pad = normalized.find("conv1__pad");
  REQUIRE(conv1_pad != nullptr);
  CHECK(conv1_pad->attr("pad_top") + conv1_pad->attr("pad_bottom") == 1);  // k=3, s=2, 224
  CHECK(conv1_pad->attr("pad_top") == 0);

  // the 7x7 stride-2 stem of resnet34 pads 5 in total, 2 on the leading edge
  auto resnet = netdef::normalize_padding(testutil::load_model("resnet34"));
  const auto *stem_pad = resnet.find("conv1__pad");
  REQUIRE(stem_pad != nullptr);
  CHECK(stem_pad->attr("pad_top") + stem_pad->attr("pad_bottom") == 5);
  CHECK(stem_pad->attr("pad_top") == 2);
}

TEST_CASE("shape inference is deterministic and total on validated graphs") {
  auto g = testutil::load_model("resnet34");
  auto a = netdef::infer_shapes(g);
  auto b = netdef::infer_shapes(g);
  CHECK(a == b);
  CHECK(a.size() == g.layers.size());
}
