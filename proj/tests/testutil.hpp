#ifndef CLFLOW_TESTUTIL_HPP
#define CLFLOW_TESTUTIL_HPP

#include <cstdint>
#include <fstream>
#include <random>
#include <sstream>
#include <string>

#include "clflow/interp.hpp"
#include "clflow/lower.hpp"
#include "clflow/netdef.hpp"

namespace testutil {

using clflow::ir::i64;

inline std::string source_dir() { return CLFLOW_SOURCE_DIR; }

inline std::string read_file(const std::string &path) {
  std::ifstream f(path);
  REQUIRE(f.good());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline clflow::netdef::NetworkGraph load_model(const std::string &name) {
  return clflow::netdef::parse_network(read_file(source_dir() + "/models/" + name + ".json"));
}

inline std::string s10sx_path() { return source_dir() + "/devices/s10sx.json"; }

/// Deterministic random tensor in [-1, 1).
inline clflow::interp::Tensor random_tensor(std::mt19937_64 &rng, i64 elems) {
  std::uniform_real_distribution<float> dist(-1.0f, 1.0f);
  clflow::interp::Tensor t(static_cast<size_t>(elems));
  for (auto &x : t) x = dist(rng);
  return t;
}

/// Input tensors for every global read buffer of a kernel.
inline clflow::interp::TensorMap random_inputs(std::mt19937_64 &rng,
                                               const clflow::ir::KernelIR &k,
                                               const clflow::ir::Bindings &bindings = {}) {
  clflow::interp::TensorMap inputs;
  for (const auto &b : k.buffers) {
    if (b.space != clflow::ir::MemSpace::Global || b.access != clflow::ir::Access::Read)
      continue;
    i64 elems = 1;
    for (const auto &d : b.shape) elems *= d.value(bindings);
    inputs[b.name] = random_tensor(rng, elems);
  }
  return inputs;
}

inline bool bitwise_equal(const clflow::interp::TensorMap &a, const clflow::interp::TensorMap &b) {
  if (a.size() != b.size()) return false;
  for (const auto &[name, ta] : a) {
    auto it = b.find(name);
    if (it == b.end() || !(it->second == ta)) return false;
  }
  return true;
}

/// Build a small single-layer graph around the given layer (input feeds it).
inline clflow::netdef::NetworkGraph
single_layer_graph(clflow::netdef::LayerSpec layer, std::vector<i64> input_shape) {
  clflow::netdef::NetworkGraph g;
  g.name = "test";
  g.input_shape.dims = std::move(input_shape);
  layer.inputs = {"input"};
  g.layers.push_back(std::move(layer));
  g.shapes = clflow::netdef::infer_shapes(g);
  return g;
}

/// Random small MAC-bearing layer for transformation fuzzing.
inline clflow::netdef::NetworkGraph random_mac_graph(std::mt19937_64 &rng) {
  using clflow::netdef::LayerKind;
  auto pick = [&](i64 lo, i64 hi) {
    return std::uniform_int_distribution<i64>(lo, hi)(rng);
  };
  clflow::netdef::LayerSpec l;
  l.id = "c";
  switch (pick(0, 3)) {
    case 0: {
      l.kind = LayerKind::Conv2d;
      i64 k = pick(1, 3);
      l.attrs = {{"filters", pick(1, 4)}, {"kernel_h", k}, {"kernel_w", k},
                 {"stride", pick(1, 2)}};
      i64 h = k + pick(1, 5), w = k + pick(1, 5);
      return single_layer_graph(l, {pick(1, 4), h, w});
    }
    case 1: {
      l.kind = LayerKind::DepthwiseConv2d;
      i64 k = pick(1, 3);
      l.attrs = {{"kernel_h", k}, {"kernel_w", k}, {"stride", pick(1, 2)}};
      i64 h = k + pick(1, 5), w = k + pick(1, 5);
      return single_layer_graph(l, {pick(1, 4), h, w});
    }
    case 2: {
      l.kind = LayerKind::Dense;
      l.attrs = {{"units", pick(1, 12)}};
      return single_layer_graph(l, {pick(2, 24)});
    }
    default: {
      l.kind = pick(0, 1) ? LayerKind::MaxPool : LayerKind::AvgPool;
      i64 k = pick(1, 3);
      l.attrs = {{"kernel_h", k}, {"kernel_w", k}, {"stride", pick(1, 2)}};
      i64 h = k + pick(1, 5), w = k + pick(1, 5);
      return single_layer_graph(l, {pick(1, 4), h, w});
    }
  }
}

/// Random multi-layer chain (conv/pool/activation/pad/flatten/dense) with
/// occasional same-padding, for plan-level fuzzing.
inline clflow::netdef::NetworkGraph random_chain_graph(std::mt19937_64 &rng) {
  using clflow::netdef::LayerKind;
  auto pick = [&](i64 lo, i64 hi) {
    return std::uniform_int_distribution<i64>(lo, hi)(rng);
  };
  clflow::netdef::NetworkGraph g;
  g.name = "chain";
  g.input_shape.dims = {pick(1, 3), pick(6, 12), pick(6, 12)};
  std::string prev = "input";
  i64 id = 0;
  auto add = [&](clflow::netdef::LayerSpec l) {
    l.id = "l" + std::to_string(id++);
    l.inputs = {prev};
    prev = l.id;
    g.layers.push_back(std::move(l));
  };
  i64 spatial_layers = pick(1, 3);
  for (i64 i = 0; i < spatial_layers; ++i) {
    clflow::netdef::LayerSpec l;
    switch (pick(0, 3)) {
      case 0: {
        l.kind = LayerKind::Conv2d;
        i64 k = pick(1, 3);
        l.attrs = {{"filters", pick(1, 4)}, {"kernel_h", k}, {"kernel_w", k},
                   {"stride", pick(1, 2)}};
        l.padding = pick(0, 1) ? "same" : "valid";
        break;
      }
      case 1: {
        l.kind = LayerKind::DepthwiseConv2d;
        i64 k = pick(1, 2);
        l.attrs = {{"kernel_h", k}, {"kernel_w", k}, {"stride", 1}};
        l.padding = pick(0, 1) ? "same" : "valid";
        break;
      }
      case 2:
        l.kind = pick(0, 1) ? LayerKind::MaxPool : LayerKind::AvgPool;
        l.attrs = {{"kernel_h", 2}, {"kernel_w", 2}, {"stride", 2}};
        break;
      default:
        l.kind = pick(0, 1) ? LayerKind::Relu : LayerKind::Relu6;
        break;
    }
    add(std::move(l));
    // shapes must stay viable for the next windowed op
    auto shapes = clflow::netdef::infer_shapes(g);
    if (shapes.at(prev).dims.size() == 3 &&
        (shapes.at(prev).dims[1] < 4 || shapes.at(prev).dims[2] < 4))
      break;
  }
  clflow::netdef::LayerSpec flatten;
  flatten.kind = LayerKind::Flatten;
  add(std::move(flatten));
  clflow::netdef::LayerSpec dense;
  dense.kind = LayerKind::Dense;
  dense.attrs = {{"units", pick(2, 8)}};
  add(std::move(dense));
  g.shapes = clflow::netdef::infer_shapes(g);
  return g;
}

/// Interpret original and transformed kernels on the same random inputs and
/// require bitwise identical outputs.
inline void check_equivalent(const clflow::ir::KernelIR &original,
                             const clflow::ir::KernelIR &transformed, std::mt19937_64 &rng) {
  auto inputs = random_inputs(rng, original);
  auto a = clflow::interp::interpret_kernel(original, {}, inputs);
  auto b = clflow::interp::interpret_kernel(transformed, {}, inputs);
  REQUIRE(bitwise_equal(a, b));
}

}  // namespace testutil

#endif
