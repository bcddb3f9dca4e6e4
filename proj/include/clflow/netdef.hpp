#ifndef CLFLOW_NETDEF_HPP
#define CLFLOW_NETDEF_HPP

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

namespace clflow::netdef {

using i64 = std::int64_t;

enum class LayerKind {
  Conv2d,
  DepthwiseConv2d,
  Dense,
  MaxPool,
  AvgPool,
  Relu,
  Relu6,
  BatchNorm,
  Add,
  Pad,
  Flatten,
  Transpose,
};

const char *to_string(LayerKind k);
std::optional<LayerKind> layer_kind_from(const std::string &name);

/// Data layout is channels-first (C, H, W) with batch fixed at 1; dense
/// layers operate on rank-1 shapes produced by an explicit flatten.
struct Shape {
  std::vector<i64> dims;
  i64 elems() const {
    i64 n = 1;
    for (i64 d : dims) n *= d;
    return n;
  }
  bool operator==(const Shape &) const = default;
};

struct LayerSpec {
  std::string id;
  LayerKind kind = LayerKind::Relu;
  std::map<std::string, i64> attrs;  // kind-specific integer attributes
  std::string padding = "valid";     // conv/pool only: "same" | "valid"
  std::vector<std::string> inputs;   // producer ids; "input" = network input
  std::optional<std::vector<i64>> weights_shape;

  i64 attr(const std::string &name) const;
  i64 attr_or(const std::string &name, i64 fallback) const;
  bool is_mac_kind() const {
    return kind == LayerKind::Conv2d || kind == LayerKind::DepthwiseConv2d ||
           kind == LayerKind::Dense;
  }
};

struct NetworkGraph {
  std::string name;
  Shape input_shape;                   // (C, H, W)
  std::vector<LayerSpec> layers;       // topologically ordered
  std::map<std::string, Shape> shapes; // layer id -> output shape

  const LayerSpec *find(const std::string &id) const;
  const Shape &shape_of(const std::string &id) const;  // "input" resolves too
};

/// MAC-layer grouping key: (kind, kernel_h, kernel_w, stride).
/// Dense layers use (Dense, 0, 0, 0).
using FlopKey = std::tuple<LayerKind, i64, i64, i64>;

FlopKey flop_key(const LayerSpec &layer);

struct FlopReport {
  struct LayerFlops {
    i64 macs = 0;
    i64 flops = 0;  // 2*macs for MAC layers, element-op count otherwise
  };
  std::map<std::string, LayerFlops> per_layer;
  i64 total_macs = 0;
  i64 total_flops = 0;
  std::map<FlopKey, double> share_by_key;  // fraction of total MACs
};

/// Parse and validate a model document, returning a graph with shapes
/// inferred. Layer order in the document must already be topological.
NetworkGraph parse_network(const std::string &text);

/// Standard conv/pool arithmetic over the graph's layer order.
/// out = floor((in + pad_total - k) / stride) + 1 per spatial dim.
std::map<std::string, Shape> infer_shapes(const NetworkGraph &graph);

FlopReport count_flops(const NetworkGraph &graph);

/// MAC share of layers matching `key`; 0 when the key is absent.
double flop_share(const NetworkGraph &graph, const FlopKey &key);

/// Same-padding amounts in (top, bottom, left, right) order, TF convention
/// (smaller half first). All zero for valid padding.
std::array<i64, 4> padding_amounts(const LayerSpec &layer, const Shape &in);

/// Rewrite same-padded conv/pool layers into an explicit pad layer followed
/// by the valid-padded operation. Shapes are re-inferred. FLOP counts are
/// unaffected (pad layers cost no floating-point work).
NetworkGraph normalize_padding(const NetworkGraph &graph);

}  // namespace clflow::netdef

#endif
