#include "clflow/lower.hpp"

#include <array>
#include <limits>

#include "clflow/error.hpp"

namespace clflow::lower {

using ir::Access;
using ir::AffineExpr;
using ir::BufferDecl;
using ir::BufRef;
using ir::Dim;
using ir::ElemOpKind;
using ir::KernelIR;
using ir::Loop;
using ir::MemSpace;
using ir::Node;
using ir::Operand;
using ir::Stmt;
using netdef::LayerKind;

namespace {

AffineExpr v(const std::string &name) { return AffineExpr::var(name); }

BufRef ref(std::string buf, std::vector<AffineExpr> idx) {
  return BufRef{std::move(buf), std::move(idx)};
}

Operand imm(float x) { return Operand::immediate(x); }
Operand rd(BufRef r) { return Operand::of(std::move(r)); }

Stmt store(BufRef dst, Operand val) {
  return Stmt{Stmt::Kind::Store, std::move(dst), {std::move(val)}, ElemOpKind::Copy, ""};
}

Stmt mac(BufRef acc, Operand a, Operand b) {
  return Stmt{Stmt::Kind::Mac, std::move(acc), {std::move(a), std::move(b)}, ElemOpKind::Copy, ""};
}

Stmt elem(ElemOpKind op, BufRef dst, std::vector<Operand> srcs) {
  return Stmt{Stmt::Kind::ElemOp, std::move(dst), std::move(srcs), op, ""};
}

Loop loop(std::string var, Dim extent, std::string tag, std::vector<Node> body) {
  return Loop{std::move(var), std::move(extent), false, std::move(tag), std::move(body)};
}

/// Window-op geometry; symbolic for parameterized kernels.
struct WindowGeom {
  Dim out_c, out_h, out_w;  // filters (or channels), OH, OW
  Dim in_c, in_h, in_w;
  i64 k_h = 1, k_w = 1, stride = 1;
};

// s*oy + ky as the input row index of a valid window op.
AffineExpr win(const std::string &out_var, i64 stride, const std::string &k_var) {
  return AffineExpr::var(out_var, stride).plus(v(k_var));
}

KernelIR conv_kernel(const std::string &id, const WindowGeom &g, const std::string &in_buf,
                     const std::string &w_buf, const std::string &out_buf, bool depthwise) {
  KernelIR k;
  k.id = id;
  k.buffers = {
      {in_buf, MemSpace::Global, {g.in_c, g.in_h, g.in_w}, Access::Read},
      {w_buf, MemSpace::Global,
       depthwise ? std::vector<Dim>{g.in_c, Dim::constant(g.k_h), Dim::constant(g.k_w)}
                 : std::vector<Dim>{g.out_c, g.in_c, Dim::constant(g.k_h), Dim::constant(g.k_w)},
       Access::Read},
      {out_buf, MemSpace::Global, {g.out_c, g.out_h, g.out_w}, Access::ReadWrite},
  };

  std::string cv = depthwise ? "c" : "f";
  BufRef out_pt = ref(out_buf, {v(cv), v("oy"), v("ox")});
  BufRef in_pt = ref(in_buf, {depthwise ? v("c") : v("ic"), win("oy", g.stride, "ky"),
                              win("ox", g.stride, "kx")});
  BufRef w_pt = depthwise ? ref(w_buf, {v("c"), v("ky"), v("kx")})
                          : ref(w_buf, {v("f"), v("ic"), v("ky"), v("kx")});

  Node macs = loop("ky", Dim::constant(g.k_h), "window",
                   {loop("kx", Dim::constant(g.k_w), "window",
                         {mac(out_pt, rd(in_pt), rd(w_pt))})});
  std::vector<Node> point_body = {store(out_pt, imm(0.0f))};
  if (depthwise) {
    point_body.push_back(std::move(macs));
  } else {
    point_body.push_back(loop("ic", g.in_c, "reduce", {std::move(macs)}));
  }
  k.body = {loop(cv, g.out_c, "filter",
                 {loop("oy", g.out_h, "spatial",
                       {loop("ox", g.out_w, "spatial", std::move(point_body))})})};
  return k;
}

KernelIR dense_kernel(const std::string &id, Dim out_units, Dim in_units,
                      const std::string &in_buf, const std::string &w_buf,
                      const std::string &out_buf) {
  KernelIR k;
  k.id = id;
  k.buffers = {
      {in_buf, MemSpace::Global, {in_units}, Access::Read},
      {w_buf, MemSpace::Global, {out_units, in_units}, Access::Read},
      {out_buf, MemSpace::Global, {out_units}, Access::ReadWrite},
  };
  BufRef out_pt = ref(out_buf, {v("o")});
  k.body = {loop("o", out_units, "filter",
                 {store(out_pt, imm(0.0f)),
                  loop("i", in_units, "reduce",
                       {mac(out_pt, rd(ref(in_buf, {v("i")})), rd(ref(w_buf, {v("o"), v("i")})))})})};
  return k;
}

KernelIR pool_kernel(const std::string &id, const WindowGeom &g, const std::string &in_buf,
                     const std::string &out_buf, bool is_max) {
  KernelIR k;
  k.id = id;
  k.buffers = {
      {in_buf, MemSpace::Global, {g.in_c, g.in_h, g.in_w}, Access::Read},
      {out_buf, MemSpace::Global, {g.out_c, g.out_h, g.out_w}, Access::ReadWrite},
  };
  BufRef out_pt = ref(out_buf, {v("c"), v("oy"), v("ox")});
  BufRef in_pt =
      ref(in_buf, {v("c"), win("oy", g.stride, "ky"), win("ox", g.stride, "kx")});

  std::vector<Node> point_body;
  point_body.push_back(store(out_pt, imm(is_max ? -std::numeric_limits<float>::max() : 0.0f)));
  ElemOpKind reduce = is_max ? ElemOpKind::Max : ElemOpKind::Add;
  point_body.push_back(loop("ky", Dim::constant(g.k_h), "window",
                            {loop("kx", Dim::constant(g.k_w), "window",
                                  {elem(reduce, out_pt, {rd(out_pt), rd(in_pt)})})}));
  if (!is_max) {
    float inv = 1.0f / static_cast<float>(g.k_h * g.k_w);
    point_body.push_back(elem(ElemOpKind::BnScaleShift, out_pt, {rd(out_pt), imm(inv), imm(0.0f)}));
  }
  k.body = {loop("c", g.out_c, "",
                 {loop("oy", g.out_h, "spatial",
                       {loop("ox", g.out_w, "spatial", std::move(point_body))})})};
  return k;
}

/// Elementwise map over 1..3 dims; identity-indexed input and output.
KernelIR elementwise_kernel(const std::string &id, ElemOpKind op, const std::vector<Dim> &dims,
                            const std::string &in_buf, const std::string &out_buf,
                            const std::string &bn_buf) {
  KernelIR k;
  k.id = id;
  k.buffers.push_back({in_buf, MemSpace::Global, dims, Access::Read});
  if (!bn_buf.empty())
    k.buffers.push_back({bn_buf, MemSpace::Global, {Dim::constant(2), dims[0]}, Access::Read});
  k.buffers.push_back({out_buf, MemSpace::Global, dims, Access::Write});

  static const std::array<const char *, 3> vars{"c", "y", "x"};
  size_t rank = dims.size();
  std::vector<AffineExpr> pt;
  for (size_t i = 0; i < rank; ++i) pt.push_back(v(vars[3 - rank + i]));
  std::string chan_var = vars[3 - rank];  // first dim indexes the bn row

  std::vector<Operand> srcs = {rd(ref(in_buf, pt))};
  if (!bn_buf.empty()) {
    srcs.push_back(rd(ref(bn_buf, {AffineExpr::c(0), v(chan_var)})));
    srcs.push_back(rd(ref(bn_buf, {AffineExpr::c(1), v(chan_var)})));
  }
  std::vector<Node> body = {elem(op, ref(out_buf, pt), std::move(srcs))};
  for (size_t i = rank; i-- > 0;)
    body = {loop(vars[3 - rank + i], dims[i], "", std::move(body))};
  k.body = std::move(body);
  return k;
}

}  // namespace

bool StagePattern::operator<(const StagePattern &o) const {
  auto key = [](const StagePattern &p) {
    return std::tuple(p.kind, p.kernel_h, p.kernel_w, p.stride, p.post_ops);
  };
  return key(*this) < key(o);
}

StagePattern pattern_of(const KernelMeta &meta) {
  return StagePattern{meta.base_kind, meta.kernel_h, meta.kernel_w, meta.stride, meta.post_ops};
}

LoweredStage lower_layer(const netdef::LayerSpec &layer, const netdef::NetworkGraph &graph) {
  const netdef::Shape &in = graph.shape_of(layer.inputs[0]);
  const netdef::Shape &out = graph.shape_of(layer.id);

  KernelMeta meta;
  meta.layers = {layer.id};
  meta.base_kind = layer.kind;
  meta.out_shape = out.dims;
  meta.inputs = layer.inputs;
  meta.output_layer = layer.id;

  std::string id = "k_" + layer.id;
  std::string in_buf = "fm_" + layer.inputs[0];
  std::string out_buf = "fm_" + layer.id;
  std::string w_buf = "w_" + layer.id;

  auto cd = [](i64 n) { return Dim::constant(n); };

  LoweredStage stage;
  switch (layer.kind) {
    case LayerKind::Conv2d:
    case LayerKind::DepthwiseConv2d: {
      if (layer.padding != "valid")
        fail("UnsupportedKind", "lowering requires padding-normalized graphs");
      bool dw = layer.kind == LayerKind::DepthwiseConv2d;
      WindowGeom g{cd(out.dims[0]), cd(out.dims[1]), cd(out.dims[2]),
                   cd(in.dims[0]),  cd(in.dims[1]),  cd(in.dims[2]),
                   layer.attr("kernel_h"), layer.attr("kernel_w"), layer.attr("stride")};
      stage.kernel = conv_kernel(id, g, in_buf, w_buf, out_buf, dw);
      meta.kernel_h = g.k_h;
      meta.kernel_w = g.k_w;
      meta.stride = g.stride;
      meta.filters = out.dims[0];
      meta.channels = in.dims[0];
      meta.out_h = out.dims[1];
      meta.out_w = out.dims[2];
      meta.in_h = in.dims[1];
      meta.in_w = in.dims[2];
      meta.weight_buffers = {w_buf};
      meta.inputs_linear = {false};
      break;
    }
    case LayerKind::Dense: {
      stage.kernel = dense_kernel(id, cd(out.dims[0]), cd(in.dims[0]), in_buf, w_buf, out_buf);
      meta.filters = out.dims[0];
      meta.channels = in.dims[0];
      meta.out_h = meta.out_w = 1;
      meta.weight_buffers = {w_buf};
      meta.inputs_linear = {false};
      break;
    }
    case LayerKind::MaxPool:
    case LayerKind::AvgPool: {
      bool global = layer.attr_or("global", 0) != 0;
      WindowGeom g{cd(out.dims[0]), cd(out.dims[1]), cd(out.dims[2]),
                   cd(in.dims[0]),  cd(in.dims[1]),  cd(in.dims[2]),
                   global ? in.dims[1] : layer.attr("kernel_h"),
                   global ? in.dims[2] : layer.attr("kernel_w"),
                   global ? 1 : layer.attr("stride")};
      stage.kernel = pool_kernel(id, g, in_buf, out_buf, layer.kind == LayerKind::MaxPool);
      meta.kernel_h = g.k_h;
      meta.kernel_w = g.k_w;
      meta.stride = g.stride;
      meta.global_pool = global;
      meta.inputs_linear = {false};
      break;
    }
    case LayerKind::Relu:
    case LayerKind::Relu6:
    case LayerKind::BatchNorm: {
      std::vector<Dim> dims;
      for (i64 d : out.dims) dims.push_back(cd(d));
      ElemOpKind op = layer.kind == LayerKind::Relu    ? ElemOpKind::Relu
                      : layer.kind == LayerKind::Relu6 ? ElemOpKind::Relu6
                                                       : ElemOpKind::BnScaleShift;
      bool bn = layer.kind == LayerKind::BatchNorm;
      stage.kernel = elementwise_kernel(id, op, dims, in_buf, out_buf, bn ? w_buf : "");
      if (bn) meta.weight_buffers = {w_buf};
      meta.inputs_linear = {true};
      break;
    }
    case LayerKind::Add: {
      std::vector<Dim> dims;
      for (i64 d : out.dims) dims.push_back(cd(d));
      std::string in2 = "fm_" + layer.inputs[1];
      KernelIR k;
      k.id = id;
      k.buffers = {{in_buf, MemSpace::Global, dims, Access::Read},
                   {in2, MemSpace::Global, dims, Access::Read},
                   {out_buf, MemSpace::Global, dims, Access::Write}};
      static const std::array<const char *, 3> vars{"c", "y", "x"};
      size_t rank = dims.size();
      std::vector<AffineExpr> pt;
      for (size_t i = 0; i < rank; ++i) pt.push_back(v(vars[3 - rank + i]));
      std::vector<Node> body = {
          elem(ElemOpKind::Add, ref(out_buf, pt), {rd(ref(in_buf, pt)), rd(ref(in2, pt))})};
      for (size_t i = rank; i-- > 0;)
        body = {loop(vars[3 - rank + i], dims[i], "", std::move(body))};
      k.body = std::move(body);
      stage.kernel = std::move(k);
      meta.inputs_linear = {true, true};
      break;
    }
    case LayerKind::Pad: {
      i64 pt_ = layer.attr("pad_top"), pl = layer.attr("pad_left");
      KernelIR k;
      k.id = id;
      std::vector<Dim> idims{cd(in.dims[0]), cd(in.dims[1]), cd(in.dims[2])};
      std::vector<Dim> odims{cd(out.dims[0]), cd(out.dims[1]), cd(out.dims[2])};
      k.buffers = {{in_buf, MemSpace::Global, idims, Access::Read},
                   {out_buf, MemSpace::Global, odims, Access::Write}};
      Node zero = loop("zc", odims[0], "",
                       {loop("zy", odims[1], "",
                             {loop("zx", odims[2], "",
                                   {store(ref(out_buf, {v("zc"), v("zy"), v("zx")}), imm(0.0f))})})});
      Node copy = loop(
          "c", idims[0], "",
          {loop("y", idims[1], "",
                {loop("x", idims[2], "",
                      {store(ref(out_buf, {v("c"), v("y").plus(AffineExpr::c(pt_)),
                                           v("x").plus(AffineExpr::c(pl))}),
                             rd(ref(in_buf, {v("c"), v("y"), v("x")})))})})});
      k.body = {std::move(zero), std::move(copy)};
      stage.kernel = std::move(k);
      meta.inputs_linear = {true};
      meta.output_linear = false;  // zero fill then interior copy
      break;
    }
    case LayerKind::Flatten: {
      KernelIR k;
      k.id = id;
      std::vector<Dim> idims{cd(in.dims[0]), cd(in.dims[1]), cd(in.dims[2])};
      k.buffers = {{in_buf, MemSpace::Global, idims, Access::Read},
                   {out_buf, MemSpace::Global, {cd(out.dims[0])}, Access::Write}};
      AffineExpr flat = AffineExpr::var("c", in.dims[1] * in.dims[2])
                            .plus(AffineExpr::var("y", in.dims[2]))
                            .plus(v("x"));
      k.body = {loop("c", idims[0], "",
                     {loop("y", idims[1], "",
                           {loop("x", idims[2], "",
                                 {store(ref(out_buf, {flat}),
                                        rd(ref(in_buf, {v("c"), v("y"), v("x")})))})})})};
      stage.kernel = std::move(k);
      meta.inputs_linear = {true};
      break;
    }
    case LayerKind::Transpose: {
      std::array<i64, 3> perm{layer.attr("perm_0"), layer.attr("perm_1"), layer.attr("perm_2")};
      std::array<i64, 3> inv{};
      for (i64 i = 0; i < 3; ++i) inv[perm[i]] = i;
      KernelIR k;
      k.id = id;
      std::vector<Dim> idims{cd(in.dims[0]), cd(in.dims[1]), cd(in.dims[2])};
      std::vector<Dim> odims{cd(out.dims[0]), cd(out.dims[1]), cd(out.dims[2])};
      k.buffers = {{in_buf, MemSpace::Global, idims, Access::Read},
                   {out_buf, MemSpace::Global, odims, Access::Write}};
      static const std::array<const char *, 3> vars{"c", "y", "x"};
      std::vector<AffineExpr> in_idx(3);
      for (i64 j = 0; j < 3; ++j) in_idx[j] = v(vars[inv[j]]);
      std::vector<Node> body = {store(ref(out_buf, {v("c"), v("y"), v("x")}),
                                      rd(ref(in_buf, in_idx)))};
      for (size_t i = 3; i-- > 0;) body = {loop(vars[i], odims[i], "", std::move(body))};
      k.body = std::move(body);
      stage.kernel = std::move(k);
      meta.inputs_linear = {false};  // gathers across the input
      break;
    }
  }
  stage.meta = std::move(meta);
  return stage;
}

std::vector<LoweredStage> lower_network(const netdef::NetworkGraph &graph) {
  std::vector<LoweredStage> stages;
  stages.reserve(graph.layers.size());
  for (const auto &l : graph.layers) stages.push_back(lower_layer(l, graph));
  return stages;
}

// ---------------------------------------------------------------------------
// symbolic stage construction for parameterized kernels

SymbolicStage lower_stage_symbolic(const StagePattern &pattern, const std::string &kernel_id,
                                   i64 in_offset_h, i64 in_offset_w) {
  bool dw = pattern.kind == netdef::LayerKind::DepthwiseConv2d;
  if (pattern.kind != netdef::LayerKind::Conv2d && !dw)
    fail("KeyMismatch", "kernel parameterization applies to convolutions only");

  Dim F = Dim::symbol("F");
  Dim C = Dim::symbol("C");
  Dim H = Dim::symbol("H");
  Dim W = Dim::symbol("W");
  Dim in_h = Dim::symbol("H", pattern.stride, in_offset_h);
  Dim in_w = Dim::symbol("W", pattern.stride, in_offset_w);

  WindowGeom g{dw ? C : F, H, W, C, in_h, in_w, pattern.kernel_h, pattern.kernel_w,
               pattern.stride};

  SymbolicStage sym;
  sym.base.kernel = conv_kernel(kernel_id, g, "x", "w0", "y", dw);
  if (dw)
    sym.base.kernel.params = {"C", "H", "W"};
  else
    sym.base.kernel.params = {"F", "C", "H", "W"};

  KernelMeta &meta = sym.base.meta;
  meta.base_kind = pattern.kind;
  meta.kernel_h = pattern.kernel_h;
  meta.kernel_w = pattern.kernel_w;
  meta.stride = pattern.stride;
  meta.weight_buffers = {"w0"};
  meta.inputs_linear = {false};
  meta.output_layer = kernel_id;

  std::vector<Dim> out_dims{dw ? C : F, H, W};
  int wi = 1;
  std::string prev_out = "y";
  for (size_t i = 0; i < pattern.post_ops.size(); ++i) {
    const auto &[op, weighted] = pattern.post_ops[i];
    std::string wb = weighted ? "w" + std::to_string(wi++) : "";
    std::string next_out = "y" + std::to_string(i + 2);
    LoweredStage post;
    post.kernel = elementwise_kernel(kernel_id + "_post", op, out_dims, prev_out, next_out, wb);
    post.kernel.params = sym.base.kernel.params;
    if (weighted) post.meta.weight_buffers = {wb};
    post.meta.post_ops = {{op, weighted}};
    sym.post.push_back(std::move(post));
    prev_out = next_out;
  }
  return sym;
}

// ---------------------------------------------------------------------------
// binding

namespace {

AffineExpr bind_affine(const AffineExpr &e, const ir::Bindings &b) {
  AffineExpr r;
  r.constant = e.constant;
  for (const auto &[name, coeff] : e.terms) {
    auto it = b.find(name);
    if (it == b.end())
      r.add_term(name, coeff);
    else
      r.constant += coeff * it->second;
  }
  return r;
}

Dim bind_dim(const Dim &d, const ir::Bindings &b) {
  if (d.is_const() || !b.contains(d.sym)) return d;
  return Dim::constant(d.value(b));
}

void bind_nodes(std::vector<Node> &nodes, const ir::Bindings &b) {
  for (auto &n : nodes) {
    if (n.is_loop()) {
      n.loop().extent = bind_dim(n.loop().extent, b);
      bind_nodes(n.loop().body, b);
    } else {
      Stmt &s = n.stmt();
      for (auto &e : s.dst.index) e = bind_affine(e, b);
      for (auto &a : s.args)
        if (!a.is_imm())
          for (auto &e : a.ref->index) e = bind_affine(e, b);
    }
  }
}

}  // namespace

ir::KernelIR bind_kernel(const ir::KernelIR &k, const ir::Bindings &bindings) {
  ir::KernelIR out = k;
  for (auto &buf : out.buffers)
    for (auto &d : buf.shape) d = bind_dim(d, bindings);
  bind_nodes(out.body, bindings);
  std::vector<std::string> remaining;
  for (const auto &p : out.params)
    if (!bindings.contains(p)) remaining.push_back(p);
  out.params = std::move(remaining);
  return out;
}

}  // namespace clflow::lower
