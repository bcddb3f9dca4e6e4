#include "clflow/netdef.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <set>

#include <nlohmann/json.hpp>

#include "clflow/error.hpp"

namespace clflow::netdef {

using json = nlohmann::json;

const char *to_string(LayerKind k) {
  switch (k) {
    case LayerKind::Conv2d: return "conv2d";
    case LayerKind::DepthwiseConv2d: return "depthwise_conv2d";
    case LayerKind::Dense: return "dense";
    case LayerKind::MaxPool: return "maxpool";
    case LayerKind::AvgPool: return "avgpool";
    case LayerKind::Relu: return "relu";
    case LayerKind::Relu6: return "relu6";
    case LayerKind::BatchNorm: return "batchnorm";
    case LayerKind::Add: return "add";
    case LayerKind::Pad: return "pad";
    case LayerKind::Flatten: return "flatten";
    case LayerKind::Transpose: return "transpose";
  }
  return "?";
}

std::optional<LayerKind> layer_kind_from(const std::string &name) {
  static const std::map<std::string, LayerKind> table = {
      {"conv2d", LayerKind::Conv2d},
      {"depthwise_conv2d", LayerKind::DepthwiseConv2d},
      {"dense", LayerKind::Dense},
      {"maxpool", LayerKind::MaxPool},
      {"avgpool", LayerKind::AvgPool},
      {"relu", LayerKind::Relu},
      {"relu6", LayerKind::Relu6},
      {"batchnorm", LayerKind::BatchNorm},
      {"add", LayerKind::Add},
      {"pad", LayerKind::Pad},
      {"flatten", LayerKind::Flatten},
      {"transpose", LayerKind::Transpose},
  };
  auto it = table.find(name);
  if (it == table.end()) return std::nullopt;
  return it->second;
}

i64 LayerSpec::attr(const std::string &name) const {
  auto it = attrs.find(name);
  if (it == attrs.end())
    fail("SchemaError", "layer '" + id + "' (" + to_string(kind) + ") missing attr '" + name + "'");
  return it->second;
}

i64 LayerSpec::attr_or(const std::string &name, i64 fallback) const {
  auto it = attrs.find(name);
  return it == attrs.end() ? fallback : it->second;
}

const LayerSpec *NetworkGraph::find(const std::string &id) const {
  for (const auto &l : layers)
    if (l.id == id) return &l;
  return nullptr;
}

const Shape &NetworkGraph::shape_of(const std::string &id) const {
  if (id == "input") return input_shape;
  auto it = shapes.find(id);
  if (it == shapes.end()) fail("DanglingInput", "no shape for layer '" + id + "'");
  return it->second;
}

FlopKey flop_key(const LayerSpec &layer) {
  if (layer.kind == LayerKind::Dense) return {LayerKind::Dense, 0, 0, 0};
  return {layer.kind, layer.attr("kernel_h"), layer.attr("kernel_w"), layer.attr("stride")};
}

// ---------------------------------------------------------------------------
// validation

namespace {

bool is_pool(LayerKind k) { return k == LayerKind::MaxPool || k == LayerKind::AvgPool; }

bool is_windowed(LayerKind k) {
  return k == LayerKind::Conv2d || k == LayerKind::DepthwiseConv2d || is_pool(k);
}

void validate_attrs(const LayerSpec &l) {
  switch (l.kind) {
    case LayerKind::Conv2d:
      l.attr("filters");
      [[fallthrough]];
    case LayerKind::DepthwiseConv2d:
    case LayerKind::MaxPool:
    case LayerKind::AvgPool:
      if (l.kind == LayerKind::MaxPool || l.kind == LayerKind::AvgPool) {
        if (l.attr_or("global", 0)) break;  // kernel covers the whole map
      }
      if (l.attr("kernel_h") < 1 || l.attr("kernel_w") < 1)
        fail("SchemaError", "layer '" + l.id + "': kernel dims must be >= 1");
      if (l.attr("stride") < 1)
        fail("SchemaError", "layer '" + l.id + "': stride must be >= 1");
      if (l.padding != "same" && l.padding != "valid")
        fail("SchemaError", "layer '" + l.id + "': padding must be same|valid");
      break;
    case LayerKind::Dense:
      if (l.attr("units") < 1) fail("SchemaError", "layer '" + l.id + "': units must be >= 1");
      break;
    case LayerKind::Pad:
      for (const char *a : {"pad_top", "pad_bottom", "pad_left", "pad_right"})
        if (l.attr(a) < 0) fail("SchemaError", "layer '" + l.id + "': negative padding");
      break;
    case LayerKind::Transpose:
      for (const char *a : {"perm_0", "perm_1", "perm_2"}) l.attr(a);
      break;
    default:
      break;
  }
  size_t want_inputs = l.kind == LayerKind::Add ? 2 : 1;
  if (l.inputs.size() != want_inputs)
    fail("SchemaError", "layer '" + l.id + "' expects " + std::to_string(want_inputs) +
                            " input(s), has " + std::to_string(l.inputs.size()));
}

void validate_graph(const NetworkGraph &g) {
  if (g.input_shape.dims.size() != 3)
    fail("SchemaError", "input_shape must be [C, H, W]");
  for (i64 d : g.input_shape.dims)
    if (d < 1) fail("SchemaError", "input_shape dims must be positive");
  if (g.layers.empty()) fail("SchemaError", "network has no layers");

  std::set<std::string> seen{"input"};
  for (const auto &l : g.layers) {
    if (l.id == "input" || l.id.empty())
      fail("SchemaError", "invalid layer id '" + l.id + "'");
    if (!seen.insert(l.id).second) fail("SchemaError", "duplicate layer id '" + l.id + "'");
    validate_attrs(l);
    for (const auto &in : l.inputs)
      if (!seen.contains(in))
        fail("DanglingInput", "layer '" + l.id + "' references unknown input '" + in + "'");
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// parsing

NetworkGraph parse_network(const std::string &text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception &e) {
    fail("SchemaError", std::string("model document is not valid JSON: ") + e.what());
  }
  if (!doc.is_object() || !doc.contains("input_shape") || !doc.contains("layers"))
    fail("SchemaError", "model document needs 'input_shape' and 'layers'");

  NetworkGraph g;
  g.name = doc.value("name", "network");
  try {
    g.input_shape.dims = doc.at("input_shape").get<std::vector<i64>>();
    for (const auto &jl : doc.at("layers")) {
      LayerSpec l;
      l.id = jl.at("id").get<std::string>();
      std::string kind = jl.at("kind").get<std::string>();
      auto k = layer_kind_from(kind);
      if (!k) fail("UnknownKind", "layer '" + l.id + "' has unknown kind '" + kind + "'");
      l.kind = *k;
      if (jl.contains("attrs")) {
        for (const auto &[key, val] : jl.at("attrs").items()) {
          if (key == "padding") {
            l.padding = val.get<std::string>();
          } else {
            if (!val.is_number_integer())
              fail("SchemaError", "attr '" + key + "' of '" + l.id + "' must be an integer");
            l.attrs[key] = val.get<i64>();
          }
        }
      }
      l.inputs = jl.at("inputs").get<std::vector<std::string>>();
      if (jl.contains("weights_shape"))
        l.weights_shape = jl.at("weights_shape").get<std::vector<i64>>();
      g.layers.push_back(std::move(l));
    }
  } catch (const Error &) {
    throw;
  } catch (const json::exception &e) {
    fail("SchemaError", std::string("malformed model document: ") + e.what());
  }

  validate_graph(g);
  g.shapes = infer_shapes(g);
  return g;
}

// ---------------------------------------------------------------------------
// shape inference

namespace {

i64 out_spatial(i64 in, i64 k, i64 stride, i64 pad_total) {
  i64 padded = in + pad_total - k;
  if (padded < 0)
    fail("ShapeMismatch", "window " + std::to_string(k) + " exceeds padded extent " +
                              std::to_string(in + pad_total));
  return padded / stride + 1;
}

Shape windowed_shape(const LayerSpec &l, const Shape &in, i64 out_channels) {
  if (in.dims.size() != 3)
    fail("ShapeMismatch", "layer '" + l.id + "' needs a (C,H,W) input");
  if (is_pool(l.kind) && l.attr_or("global", 0))
    return Shape{{in.dims[0], 1, 1}};
  auto pads = padding_amounts(l, in);
  i64 oh = out_spatial(in.dims[1], l.attr("kernel_h"), l.attr("stride"), pads[0] + pads[1]);
  i64 ow = out_spatial(in.dims[2], l.attr("kernel_w"), l.attr("stride"), pads[2] + pads[3]);
  return Shape{{out_channels, oh, ow}};
}

std::vector<i64> expected_weights(const LayerSpec &l, const Shape &in) {
  switch (l.kind) {
    case LayerKind::Conv2d:
      return {l.attr("filters"), in.dims[0], l.attr("kernel_h"), l.attr("kernel_w")};
    case LayerKind::DepthwiseConv2d:
      return {in.dims[0], l.attr("kernel_h"), l.attr("kernel_w")};
    case LayerKind::Dense:
      return {l.attr("units"), in.dims[0]};
    case LayerKind::BatchNorm:
      return {2, in.dims[0]};  // row 0 = scale, row 1 = shift
    default:
      return {};
  }
}

}  // namespace

std::array<i64, 4> padding_amounts(const LayerSpec &layer, const Shape &in) {
  if (!is_windowed(layer.kind) || layer.padding != "same" ||
      (is_pool(layer.kind) && layer.attr_or("global", 0)))
    return {0, 0, 0, 0};
  auto amount = [&](i64 dim, i64 k, i64 s) -> std::pair<i64, i64> {
    i64 out = (dim + s - 1) / s;
    i64 total = std::max<i64>(0, (out - 1) * s + k - dim);
    return {total / 2, total - total / 2};
  };
  auto [t, b] = amount(in.dims[1], layer.attr("kernel_h"), layer.attr("stride"));
  auto [l, r] = amount(in.dims[2], layer.attr("kernel_w"), layer.attr("stride"));
  return {t, b, l, r};
}

std::map<std::string, Shape> infer_shapes(const NetworkGraph &graph) {
  std::map<std::string, Shape> shapes;
  auto lookup = [&](const std::string &id) -> const Shape & {
    if (id == "input") return graph.input_shape;
    auto it = shapes.find(id);
    if (it == shapes.end()) fail("DanglingInput", "unresolved input '" + id + "'");
    return it->second;
  };

  for (const auto &l : graph.layers) {
    const Shape &in = lookup(l.inputs[0]);
    Shape out;
    switch (l.kind) {
      case LayerKind::Conv2d:
        out = windowed_shape(l, in, l.attr("filters"));
        break;
      case LayerKind::DepthwiseConv2d:
      case LayerKind::MaxPool:
      case LayerKind::AvgPool:
        out = windowed_shape(l, in, in.dims[0]);
        break;
      case LayerKind::Dense:
        if (in.dims.size() != 1)
          fail("ShapeMismatch",
               "dense layer '" + l.id + "' needs a flattened input, got rank " +
                   std::to_string(in.dims.size()));
        out = Shape{{l.attr("units")}};
        break;
      case LayerKind::Relu:
      case LayerKind::Relu6:
      case LayerKind::BatchNorm:
        out = in;
        break;
      case LayerKind::Add: {
        const Shape &rhs = lookup(l.inputs[1]);
        if (!(in == rhs))
          fail("ShapeMismatch", "add layer '" + l.id + "' has unequal operand shapes");
        out = in;
        break;
      }
      case LayerKind::Pad:
        if (in.dims.size() != 3) fail("ShapeMismatch", "pad needs a (C,H,W) input");
        out = Shape{{in.dims[0], in.dims[1] + l.attr("pad_top") + l.attr("pad_bottom"),
                     in.dims[2] + l.attr("pad_left") + l.attr("pad_right")}};
        break;
      case LayerKind::Flatten:
        out = Shape{{in.elems()}};
        break;
      case LayerKind::Transpose: {
        if (in.dims.size() != 3) fail("ShapeMismatch", "transpose needs a (C,H,W) input");
        std::array<i64, 3> perm{l.attr("perm_0"), l.attr("perm_1"), l.attr("perm_2")};
        std::array<bool, 3> used{};
        out.dims.resize(3);
        for (int i = 0; i < 3; ++i) {
          if (perm[i] < 0 || perm[i] > 2 || used[perm[i]])
            fail("SchemaError", "transpose '" + l.id + "' has an invalid permutation");
          used[perm[i]] = true;
          out.dims[i] = in.dims[perm[i]];
        }
        break;
      }
    }
    if (l.weights_shape) {
      auto want = expected_weights(l, in);
      if (*l.weights_shape != want)
        fail("ShapeMismatch", "layer '" + l.id + "' declares a weights_shape that does not " +
                                  "match its attributes");
    }
    shapes[l.id] = std::move(out);
  }
  return shapes;
}

// ---------------------------------------------------------------------------
// FLOP accounting
//
// MAC layers: flops = 2 * macs. Every other layer is charged one operation
// per ElemOp the lowered kernel executes, so count_flops agrees exactly with
// the interpreter's instrumented counters:
//   maxpool: k_h*k_w per output element (window max reduction)
//   avgpool: k_h*k_w + 1 per output element (adds plus the final scale)
//   relu/relu6/batchnorm/add: 1 per output element
//   pad/flatten/transpose: 0 (data movement only)

FlopReport count_flops(const NetworkGraph &graph) {
  FlopReport report;
  std::map<FlopKey, i64> macs_by_key;

  for (const auto &l : graph.layers) {
    const Shape &in = graph.shape_of(l.inputs[0]);
    const Shape &out = graph.shape_of(l.id);
    FlopReport::LayerFlops f;
    switch (l.kind) {
      case LayerKind::Conv2d:
        f.macs = l.attr("filters") * in.dims[0] * l.attr("kernel_h") * l.attr("kernel_w") *
                 out.dims[1] * out.dims[2];
        break;
      case LayerKind::DepthwiseConv2d:
        f.macs = in.dims[0] * l.attr("kernel_h") * l.attr("kernel_w") * out.dims[1] * out.dims[2];
        break;
      case LayerKind::Dense:
        f.macs = in.dims[0] * l.attr("units");
        break;
      case LayerKind::MaxPool: {
        i64 kh = l.attr_or("global", 0) ? in.dims[1] : l.attr("kernel_h");
        i64 kw = l.attr_or("global", 0) ? in.dims[2] : l.attr("kernel_w");
        f.flops = kh * kw * out.elems();
        break;
      }
      case LayerKind::AvgPool: {
        i64 kh = l.attr_or("global", 0) ? in.dims[1] : l.attr("kernel_h");
        i64 kw = l.attr_or("global", 0) ? in.dims[2] : l.attr("kernel_w");
        f.flops = (kh * kw + 1) * out.elems();
        break;
      }
      case LayerKind::Relu:
      case LayerKind::Relu6:
      case LayerKind::BatchNorm:
      case LayerKind::Add:
        f.flops = out.elems();
        break;
      case LayerKind::Pad:
      case LayerKind::Flatten:
      case LayerKind::Transpose:
        break;  // no floating-point work
    }
    if (l.is_mac_kind()) {
      f.flops = 2 * f.macs;
      macs_by_key[flop_key(l)] += f.macs;
    }
    report.total_macs += f.macs;
    report.total_flops += f.flops;
    report.per_layer[l.id] = f;
  }

  if (report.total_macs > 0)
    for (const auto &[key, macs] : macs_by_key)
      report.share_by_key[key] = static_cast<double>(macs) / static_cast<double>(report.total_macs);
  return report;
}

double flop_share(const NetworkGraph &graph, const FlopKey &key) {
  FlopReport r = count_flops(graph);
  auto it = r.share_by_key.find(key);
  return it == r.share_by_key.end() ? 0.0 : it->second;
}

// ---------------------------------------------------------------------------
// padding normalization

NetworkGraph normalize_padding(const NetworkGraph &graph) {
  NetworkGraph out;
  out.name = graph.name;
  out.input_shape = graph.input_shape;

  for (const auto &l : graph.layers) {
    if (is_windowed(l.kind) && l.padding == "same") {
      const Shape &in = graph.shape_of(l.inputs[0]);
      auto pads = padding_amounts(l, in);
      if (pads[0] + pads[1] + pads[2] + pads[3] > 0) {
        LayerSpec pad;
        pad.id = l.id + "__pad";
        pad.kind = LayerKind::Pad;
        pad.attrs = {{"pad_top", pads[0]},
                     {"pad_bottom", pads[1]},
                     {"pad_left", pads[2]},
                     {"pad_right", pads[3]}};
        pad.inputs = {l.inputs[0]};
        out.layers.push_back(std::move(pad));

        LayerSpec valid = l;
        valid.padding = "valid";
        valid.inputs = {l.id + "__pad"};
        out.layers.push_back(std::move(valid));
        continue;
      }
      LayerSpec valid = l;
      valid.padding = "valid";
      out.layers.push_back(std::move(valid));
      continue;
    }
    out.layers.push_back(l);
  }

  out.shapes = infer_shapes(out);
  return out;
}

}  // namespace clflow::netdef
