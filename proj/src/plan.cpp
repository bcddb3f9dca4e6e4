#include "clflow/plan.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <functional>
#include <numeric>
#include <set>

#include "clflow/costmodel.hpp"
#include "clflow/error.hpp"
#include "clflow/xform.hpp"

namespace clflow::plan {

using ir::AffineExpr;
using ir::BufferDecl;
using ir::BufRef;
using ir::ChannelDecl;
using ir::Dim;
using ir::ElemOpKind;
using ir::KernelIR;
using ir::Loop;
using ir::MemSpace;
using ir::Node;
using ir::Operand;
using ir::Stmt;
using lower::KernelMeta;
using lower::LoweredStage;
using netdef::LayerKind;

const char *to_string(Mode m) { return m == Mode::Pipelined ? "pipelined" : "folded"; }

const KernelIR *ExecutionPlan::find_kernel(const std::string &id) const {
  for (const auto &k : kernels)
    if (k.id == id) return &k;
  return nullptr;
}

KernelMeta *ExecutionPlan::find_meta(const std::string &kernel_id) {
  for (size_t i = 0; i < kernels.size(); ++i)
    if (kernels[i].id == kernel_id) return &metas[i];
  return nullptr;
}

const KernelMeta *ExecutionPlan::find_meta(const std::string &kernel_id) const {
  return const_cast<ExecutionPlan *>(this)->find_meta(kernel_id);
}

// ---------------------------------------------------------------------------
// mode selection

namespace {

i64 weight_elems(const netdef::LayerSpec &l, const netdef::Shape &in) {
  switch (l.kind) {
    case LayerKind::Conv2d:
      return l.attr("filters") * in.dims[0] * l.attr("kernel_h") * l.attr("kernel_w");
    case LayerKind::DepthwiseConv2d:
      return in.dims[0] * l.attr("kernel_h") * l.attr("kernel_w");
    case LayerKind::Dense:
      return l.attr("units") * in.dims[0];
    case LayerKind::BatchNorm:
      return 2 * in.dims[0];
    default:
      return 0;
  }
}

}  // namespace

Mode select_mode(const netdef::NetworkGraph &normalized, const cost::DeviceProfile &device,
                 const std::string &override_mode, ModeRationale *rationale) {
  i64 required = normalized.input_shape.elems() * 32;
  for (const auto &l : normalized.layers) {
    required += normalized.shape_of(l.id).elems() * 32;
    required += weight_elems(l, normalized.shape_of(l.inputs[0])) * 32;
  }
  i64 budget = static_cast<i64>(device.calibration.bram_occupancy_cap *
                                static_cast<double>(device.bram_bits));
  ModeRationale r;
  r.required_bits = required;
  r.budget_bits = budget;

  Mode mode;
  if (override_mode == "auto") {
    mode = required <= budget ? Mode::Pipelined : Mode::Folded;
    r.detail = std::string("auto: on-chip activation+weight estimate ") +
               (mode == Mode::Pipelined ? "fits under" : "exceeds") + " the BRAM occupancy cap";
  } else if (override_mode == "pipelined") {
    if (required > budget)
      fail("OverrideInfeasible",
           "pipelined execution forced but the BRAM estimate (" + std::to_string(required) +
               " bits) exceeds the occupancy budget (" + std::to_string(budget) + " bits)");
    mode = Mode::Pipelined;
    r.detail = "pipelined forced by override; BRAM estimate fits";
  } else if (override_mode == "folded") {
    mode = Mode::Folded;
    r.detail = "folded forced by override";
  } else {
    fail("SchemaError", "mode must be auto|pipelined|folded, got '" + override_mode + "'");
  }
  if (rationale) *rationale = r;
  return mode;
}

// ---------------------------------------------------------------------------
// stage fusion and cached writes

namespace {

bool fusable_producer(LayerKind k) {
  return k == LayerKind::Conv2d || k == LayerKind::DepthwiseConv2d || k == LayerKind::Dense ||
         k == LayerKind::MaxPool || k == LayerKind::AvgPool;
}

bool fusable_postop(LayerKind k) {
  return k == LayerKind::Relu || k == LayerKind::Relu6 || k == LayerKind::BatchNorm;
}

ElemOpKind postop_kind(LayerKind k) {
  return k == LayerKind::Relu    ? ElemOpKind::Relu
         : k == LayerKind::Relu6 ? ElemOpKind::Relu6
                                 : ElemOpKind::BnScaleShift;
}

/// Fuse activation/batchnorm stages into their producing conv/dense/pool
/// stage wherever the producer has exactly that one consumer.
void fuse_stages(std::vector<LoweredStage> &stages) {
  bool changed = true;
  while (changed) {
    changed = false;
    for (size_t i = 0; i < stages.size() && !changed; ++i) {
      if (!fusable_producer(stages[i].meta.base_kind)) continue;
      const std::string &out = stages[i].meta.output_layer;
      size_t consumer = stages.size();
      int uses = 0;
      for (size_t j = 0; j < stages.size(); ++j) {
        for (const auto &in : stages[j].meta.inputs)
          if (in == out) {
            ++uses;
            consumer = j;
          }
      }
      if (uses != 1 || !fusable_postop(stages[consumer].meta.base_kind)) continue;

      LoweredStage &p = stages[i];
      LoweredStage &c = stages[consumer];
      p.kernel = xform::fuse_postop(p.kernel, c.kernel);
      p.meta.layers.insert(p.meta.layers.end(), c.meta.layers.begin(), c.meta.layers.end());
      p.meta.output_layer = c.meta.output_layer;
      p.meta.out_shape = c.meta.out_shape;
      bool weighted = c.meta.base_kind == LayerKind::BatchNorm;
      p.meta.post_ops.emplace_back(postop_kind(c.meta.base_kind), weighted);
      p.meta.weight_buffers.insert(p.meta.weight_buffers.end(), c.meta.weight_buffers.begin(),
                                   c.meta.weight_buffers.end());
      stages.erase(stages.begin() + static_cast<std::ptrdiff_t>(consumer));
      changed = true;
    }
  }
}

void cache_stage_writes(std::vector<LoweredStage> &stages) {
  for (auto &s : stages) {
    if (!fusable_producer(s.meta.base_kind)) continue;
    s.kernel = xform::cache_writes(s.kernel, "fm_" + s.meta.output_layer);
  }
}

std::set<std::string> taken_vars(const KernelIR &k) {
  std::set<std::string> vars;
  for (const auto &v : xform::loop_vars(k)) vars.insert(v);
  return vars;
}

std::string fresh(std::set<std::string> &taken, std::string base) {
  while (taken.contains(base)) base += "_";
  taken.insert(base);
  return base;
}

}  // namespace

// ---------------------------------------------------------------------------
// plan assembly

namespace {

std::string sink_layer(const netdef::NetworkGraph &g) {
  std::set<std::string> consumed;
  for (const auto &l : g.layers)
    for (const auto &in : l.inputs) consumed.insert(in);
  for (auto it = g.layers.rbegin(); it != g.layers.rend(); ++it)
    if (!consumed.contains(it->id)) return it->id;
  return g.layers.back().id;
}

void collect_global_buffers(ExecutionPlan &p) {
  std::map<std::string, GlobalBuffer> found;
  for (const auto &inv : p.invocations) {
    const KernelIR *k = p.find_kernel(inv.kernel_id);
    if (!k) continue;
    for (const auto &b : k->buffers) {
      if (b.space != MemSpace::Global) continue;
      auto mapped = inv.buffer_map.find(b.name);
      std::string name = mapped == inv.buffer_map.end() ? b.name : mapped->second;
      i64 elems = 1;
      for (const auto &d : b.shape) elems *= d.value(inv.bindings);
      std::string role = name == p.input_buffer    ? "input"
                         : name == p.output_buffer ? "output"
                         : name.starts_with("w_")  ? "weights"
                                                   : "feature_map";
      found.try_emplace(name, GlobalBuffer{name, elems, role});
    }
  }
  p.global_buffers.clear();
  for (auto &[name, b] : found) p.global_buffers.push_back(std::move(b));
}

}  // namespace

ExecutionPlan reference_plan(const netdef::NetworkGraph &graph) {
  netdef::NetworkGraph normalized = netdef::normalize_padding(graph);
  ExecutionPlan p;
  p.mode = Mode::Folded;
  p.model_name = graph.name;
  p.output_buffer = "fm_" + sink_layer(normalized);
  for (auto &stage : lower::lower_network(normalized)) {
    Invocation inv;
    inv.kernel_id = stage.kernel.id;
    inv.layers = stage.meta.layers;
    p.invocations.push_back(std::move(inv));
    p.kernels.push_back(std::move(stage.kernel));
    p.metas.push_back(std::move(stage.meta));
  }
  for (auto &k : p.kernels) p.queues[k.id] = 0;
  collect_global_buffers(p);
  return p;
}

// ---------------------------------------------------------------------------
// channelization

ExecutionPlan channelize(ExecutionPlan p) {
  if (p.mode != Mode::Pipelined)
    fail("ModeMismatch", "channels are not used in folded execution");

  // Stage graph edges: consumer input position -> producing stage.
  struct Edge {
    size_t producer, consumer;
    size_t input_pos;
    std::string name;
  };
  std::vector<Edge> edges;
  std::map<std::string, size_t> by_output;
  for (size_t i = 0; i < p.metas.size(); ++i) by_output[p.metas[i].output_layer] = i;

  for (size_t c = 0; c < p.metas.size(); ++c) {
    for (size_t pos = 0; pos < p.metas[c].inputs.size(); ++pos) {
      const std::string &src = p.metas[c].inputs[pos];
      if (src == "input") continue;
      auto it = by_output.find(src);
      if (it == by_output.end())
        fail("InvalidPlan", "stage input '" + src + "' does not name a stage output");
      std::string name = "ch_" + src + "__" + p.metas[c].layers.front();
      if (pos > 0) name += "_" + std::to_string(pos);
      edges.push_back({it->second, c, pos, name});
    }
  }

  for (const auto &e : edges)
    p.channels.push_back(ChannelDecl{e.name, 1, p.kernels[e.producer].id, p.kernels[e.consumer].id});

  // Rewrite consumers first so producer rewrites see final operand shapes.
  for (size_t c = 0; c < p.kernels.size(); ++c) {
    KernelIR &k = p.kernels[c];
    const KernelMeta &meta = p.metas[c];
    for (const auto &e : edges) {
      if (e.consumer != c) continue;
      std::string in_buf = "fm_" + meta.inputs[e.input_pos];
      const BufferDecl *decl = k.find_buffer(in_buf);
      if (!decl) fail("InvalidPlan", "kernel '" + k.id + "' lacks input buffer '" + in_buf + "'");
      std::vector<Dim> shape = decl->shape;
      bool linear = e.input_pos < meta.inputs_linear.size() && meta.inputs_linear[e.input_pos];

      if (linear) {
        // Stream: one register read per element at the single use site.
        std::string reg = "t_in" + std::to_string(e.input_pos);
        std::set<std::string> bufnames;
        for (const auto &b : k.buffers) bufnames.insert(b.name);
        while (bufnames.contains(reg)) reg += "_";
        k.buffers.push_back({reg, MemSpace::Register, {Dim::constant(1)}, ir::Access::ReadWrite});
        BufRef reg_ref{reg, {AffineExpr::c(0)}};

        bool done = false;
        std::function<void(std::vector<Node> &)> rewrite = [&](std::vector<Node> &body) {
          for (size_t i = 0; i < body.size() && !done; ++i) {
            if (body[i].is_loop()) {
              rewrite(body[i].loop().body);
              continue;
            }
            Stmt &s = body[i].stmt();
            bool uses = false;
            for (auto &a : s.args)
              if (!a.is_imm() && a.ref->buffer == in_buf) {
                *a.ref = reg_ref;
                uses = true;
              }
            if (!uses) continue;
            Stmt read{Stmt::Kind::ChannelRead, reg_ref, {}, ElemOpKind::Copy, e.name};
            body.insert(body.begin() + static_cast<std::ptrdiff_t>(i), Node(std::move(read)));
            done = true;
          }
        };
        rewrite(k.body);
        if (!done) fail("InvalidPlan", "no use of '" + in_buf + "' found in '" + k.id + "'");
      } else {
        // Stage the stream into local memory, then run the original body.
        std::string local = "st_in" + std::to_string(e.input_pos);
        std::set<std::string> bufnames;
        for (const auto &b : k.buffers) bufnames.insert(b.name);
        while (bufnames.contains(local)) local += "_";

        ir::for_each_stmt(k.body, [&](Stmt &s) {
          if (s.kind != Stmt::Kind::ChannelWrite && s.dst.buffer == in_buf) s.dst.buffer = local;
          for (auto &a : s.args)
            if (!a.is_imm() && a.ref->buffer == in_buf) a.ref->buffer = local;
        });
        for (auto &b : k.buffers)
          if (b.name == in_buf) {
            b.name = local;
            b.space = MemSpace::Local;
            b.access = ir::Access::ReadWrite;
          }

        std::set<std::string> taken = taken_vars(k);
        std::vector<std::string> vars;
        for (size_t d = 0; d < shape.size(); ++d)
          vars.push_back(fresh(taken, "p" + std::to_string(e.input_pos) + "_" +
                                          std::to_string(d)));
        std::vector<AffineExpr> idx;
        for (const auto &v : vars) idx.push_back(AffineExpr::var(v));
        std::vector<Node> body = {
            Node(Stmt{Stmt::Kind::ChannelRead, BufRef{local, idx}, {}, ElemOpKind::Copy, e.name})};
        for (size_t d = shape.size(); d-- > 0;)
          body = {Node(Loop{vars[d], shape[d], false, "", std::move(body)})};
        k.body.insert(k.body.begin(), body.begin(), body.end());
      }
      k.channels_in.push_back(e.name);
      std::erase_if(k.buffers, [&](const BufferDecl &b) { return b.name == in_buf; });
    }
  }

  // Producer side.
  for (size_t prod = 0; prod < p.kernels.size(); ++prod) {
    std::vector<const Edge *> out_edges;
    for (const auto &e : edges)
      if (e.producer == prod) out_edges.push_back(&e);
    if (out_edges.empty()) continue;

    KernelIR &k = p.kernels[prod];
    const KernelMeta &meta = p.metas[prod];
    std::string out_buf = "fm_" + meta.output_layer;

    std::vector<Stmt *> sites;
    ir::for_each_stmt(k.body, [&](Stmt &s) {
      if (s.kind != Stmt::Kind::ChannelWrite && s.dst.buffer == out_buf) sites.push_back(&s);
    });
    if (sites.empty()) fail("InvalidPlan", "kernel '" + k.id + "' never writes its output");

    if (meta.output_linear && sites.size() == 1 && sites[0]->kind == Stmt::Kind::Store) {
      // Replace the single store with one channel write per consumer edge.
      Operand src = sites[0]->args[0];
      bool done = false;
      std::function<void(std::vector<Node> &)> rewrite = [&](std::vector<Node> &body) {
        for (size_t i = 0; i < body.size() && !done; ++i) {
          if (body[i].is_loop()) {
            rewrite(body[i].loop().body);
            continue;
          }
          if (&body[i].stmt() != sites[0]) continue;
          std::vector<Node> writes;
          for (const Edge *e : out_edges)
            writes.push_back(
                Node(Stmt{Stmt::Kind::ChannelWrite, {}, {src}, ElemOpKind::Copy, e->name}));
          body.erase(body.begin() + static_cast<std::ptrdiff_t>(i));
          body.insert(body.begin() + static_cast<std::ptrdiff_t>(i), writes.begin(),
                      writes.end());
          done = true;
        }
      };
      rewrite(k.body);
    } else if (meta.output_linear && sites.size() == 1) {
      // Elementwise producer: route the result through a register.
      std::string reg = "t_out";
      std::set<std::string> bufnames;
      for (const auto &b : k.buffers) bufnames.insert(b.name);
      while (bufnames.contains(reg)) reg += "_";
      k.buffers.push_back({reg, MemSpace::Register, {Dim::constant(1)}, ir::Access::ReadWrite});
      BufRef reg_ref{reg, {AffineExpr::c(0)}};
      Stmt *site = sites[0];
      bool done = false;
      std::function<void(std::vector<Node> &)> rewrite = [&](std::vector<Node> &body) {
        for (size_t i = 0; i < body.size() && !done; ++i) {
          if (body[i].is_loop()) {
            rewrite(body[i].loop().body);
            continue;
          }
          if (&body[i].stmt() != site) continue;
          body[i].stmt().dst = reg_ref;
          std::vector<Node> writes;
          for (const Edge *e : out_edges)
            writes.push_back(Node(Stmt{Stmt::Kind::ChannelWrite, {}, {Operand::of(reg_ref)},
                                       ElemOpKind::Copy, e->name}));
          body.insert(body.begin() + static_cast<std::ptrdiff_t>(i) + 1, writes.begin(),
                      writes.end());
          done = true;
        }
      };
      rewrite(k.body);
    } else {
      // Out-of-order producer (pad): keep the stores into a local staging
      // buffer and append a linear emit stage.
      const BufferDecl *decl = k.find_buffer(out_buf);
      std::vector<Dim> shape = decl->shape;
      std::string local = "st_out";
      std::set<std::string> bufnames;
      for (const auto &b : k.buffers) bufnames.insert(b.name);
      while (bufnames.contains(local)) local += "_";
      ir::for_each_stmt(k.body, [&](Stmt &s) {
        if (s.kind != Stmt::Kind::ChannelWrite && s.dst.buffer == out_buf) s.dst.buffer = local;
        for (auto &a : s.args)
          if (!a.is_imm() && a.ref->buffer == out_buf) a.ref->buffer = local;
      });
      for (auto &b : k.buffers)
        if (b.name == out_buf) {
          b.name = local;
          b.space = MemSpace::Local;
          b.access = ir::Access::ReadWrite;
        }
      std::set<std::string> taken = taken_vars(k);
      std::vector<std::string> vars;
      for (size_t d = 0; d < shape.size(); ++d)
        vars.push_back(fresh(taken, "q" + std::to_string(d)));
      std::vector<AffineExpr> idx;
      for (const auto &v : vars) idx.push_back(AffineExpr::var(v));
      std::vector<Node> body;
      for (const Edge *e : out_edges)
        body.push_back(Node(Stmt{Stmt::Kind::ChannelWrite, {}, {Operand::of(BufRef{local, idx})},
                                 ElemOpKind::Copy, e->name}));
      for (size_t d = shape.size(); d-- > 0;)
        body = {Node(Loop{vars[d], shape[d], false, "", std::move(body)})};
      k.body.insert(k.body.end(), body.begin(), body.end());
    }
    for (const Edge *e : out_edges) k.channels_out.push_back(e->name);
    std::erase_if(k.buffers, [&](const BufferDecl &b) { return b.name == out_buf; });
  }
  return p;
}

std::map<std::string, i64> channel_depths(const ExecutionPlan &p) {
  std::map<std::string, i64> depths;
  for (const auto &ch : p.channels) {
    const KernelMeta *meta = p.find_meta(ch.producer);
    if (!meta) fail("InvalidPlan", "channel '" + ch.name + "' has unknown producer");
    depths[ch.name] = static_cast<i64>(std::bit_ceil(static_cast<uint64_t>(
        std::max<i64>(1, meta->out_elems()))));
  }
  return depths;
}

ExecutionPlan apply_channel_depths(ExecutionPlan p) {
  auto depths = channel_depths(p);
  for (auto &ch : p.channels) ch.depth_elems = depths.at(ch.name);
  return p;
}

ExecutionPlan mark_autorun(ExecutionPlan p) {
  if (p.mode != Mode::Pipelined)
    fail("ModeMismatch", "autorun kernels exist only in pipelined execution");
  for (auto &k : p.kernels) {
    bool has_global = false;
    for (const auto &b : k.buffers) has_global |= b.space == MemSpace::Global;
    k.autorun = !has_global && k.params.empty() && !k.channels_in.empty();
  }
  return p;
}

ExecutionPlan assign_queues(ExecutionPlan p) {
  p.queues.clear();
  if (p.mode == Mode::Pipelined) {
    int next = 0;
    for (const auto &k : p.kernels)
      if (!k.autorun) p.queues[k.id] = next++;
  } else {
    for (const auto &k : p.kernels) p.queues[k.id] = 0;
  }
  return p;
}

// ---------------------------------------------------------------------------
// factor selection

namespace {

std::vector<i64> divisors_of(i64 n) {
  std::vector<i64> out;
  for (i64 d = 1; d <= n; ++d)
    if (n % d == 0) out.push_back(d);
  return out;
}

struct SweepTarget {
  size_t kernel_index;
  std::string var;
  std::vector<i64> candidates;  // ascending
  bool capped;
};

void collect_tagged(const std::vector<Node> &nodes, const std::set<std::string> &tags,
                    std::vector<const Loop *> &out) {
  for (const auto &n : nodes) {
    if (!n.is_loop()) continue;
    if (tags.contains(n.loop().tag)) out.push_back(&n.loop());
    collect_tagged(n.loop().body, tags, out);
  }
}

bool kernel_streams_var(const KernelIR &k, const std::string &var) {
  bool streams = false;
  ir::for_each_stmt(k.body, [&](const Stmt &s) {
    auto check = [&](const BufRef &r) {
      const BufferDecl *b = k.find_buffer(r.buffer);
      if (!b || b->space != MemSpace::Global) return;
      for (const auto &e : r.index) streams |= e.references(var);
    };
    if (s.kind != Stmt::Kind::ChannelWrite) check(s.dst);
    for (const auto &a : s.args)
      if (!a.is_imm()) check(*a.ref);
  });
  return streams;
}

}  // namespace

ExecutionPlan choose_factors(ExecutionPlan p, const cost::DeviceProfile &device) {
  std::set<std::string> tags{"reduce", "window"};
  if (p.mode == Mode::Folded) tags.insert("filter");
  i64 cap = cost::bandwidth_cap_factor(device, 4);

  std::vector<SweepTarget> targets;
  for (size_t ki = 0; ki < p.kernels.size(); ++ki) {
    const KernelIR &k = p.kernels[ki];
    std::vector<const Loop *> tagged;
    collect_tagged(k.body, tags, tagged);
    for (const Loop *l : tagged) {
      SweepTarget t;
      t.kernel_index = ki;
      t.var = l->var;
      if (l->extent.is_const()) {
        t.candidates = divisors_of(l->extent.const_value());
      } else {
        i64 g = 0;
        for (const auto &inv : p.invocations) {
          if (inv.kernel_id != k.id) continue;
          g = std::gcd(g, l->extent.value(inv.bindings));
        }
        if (g == 0) continue;  // kernel never invoked
        t.candidates = divisors_of(g);
      }
      t.capped = kernel_streams_var(k, l->var);
      targets.push_back(std::move(t));
    }
  }

  for (const auto &t : targets) {
    bool resource_limited = false;
    bool accepted = false;
    for (auto it = t.candidates.rbegin(); it != t.candidates.rend(); ++it) {
      i64 f = *it;
      if (t.capped && f > cap) continue;
      ExecutionPlan trial = p;
      trial.kernels[t.kernel_index] =
          xform::apply_factor(trial.kernels[t.kernel_index], t.var, f);
      auto fit = cost::fits(cost::estimate_resources(trial, device), device);
      if (!fit.ok) {
        resource_limited = true;
        continue;
      }
      p.kernels[t.kernel_index] = std::move(trial.kernels[t.kernel_index]);
      FactorChoice choice;
      choice.kernel_id = p.kernels[t.kernel_index].id;
      choice.loop_var = t.var;
      choice.candidates = t.candidates;
      choice.chosen = f;
      choice.limiting = resource_limited                          ? "resources"
                        : t.capped && cap < t.candidates.back()   ? "bandwidth"
                                                                  : "divisibility";
      p.factors.push_back(std::move(choice));
      accepted = true;
      break;
    }
    if (!accepted) {
      auto fit = cost::fits(cost::estimate_resources(p, device), device);
      std::string worst = "resources";
      i64 worst_margin = 0;
      for (const auto &[name, margin] : fit.margins)
        if (margin < worst_margin) {
          worst = name;
          worst_margin = margin;
        }
      fail("NoFeasibleFactor", "kernel '" + p.kernels[t.kernel_index].id + "' loop '" + t.var +
                                   "': no unroll factor fits the device (limiting resource: " +
                                   worst + ")");
    }
  }
  return p;
}

// ---------------------------------------------------------------------------
// full pipeline

ExecutionPlan build_plan(const netdef::NetworkGraph &graph, const cost::DeviceProfile &device,
                         const std::string &mode_override, bool of_enabled) {
  netdef::NetworkGraph normalized = netdef::normalize_padding(graph);
  std::vector<LoweredStage> stages = lower::lower_network(normalized);
  fuse_stages(stages);
  cache_stage_writes(stages);

  ExecutionPlan p;
  p.model_name = graph.name;
  p.of_enabled = of_enabled;
  p.mode = select_mode(normalized, device, mode_override, &p.rationale);
  p.output_buffer = "fm_" + sink_layer(normalized);

  if (p.mode == Mode::Folded) {
    // Group convolutions by filter size, stride, fused structure and
    // input/output extent relation; reuse one parameterized kernel per
    // multi-member group.
    using GroupKey = std::tuple<lower::StagePattern, i64, i64>;
    std::map<GroupKey, std::vector<size_t>> groups;
    for (size_t i = 0; i < stages.size(); ++i) {
      const KernelMeta &m = stages[i].meta;
      if (m.base_kind == LayerKind::Conv2d || m.base_kind == LayerKind::DepthwiseConv2d)
        groups[{lower::pattern_of(m), m.in_h - m.stride * m.out_h,
                m.in_w - m.stride * m.out_w}]
            .push_back(i);
    }

    std::map<size_t, std::pair<std::string, xform::ParameterizedGroup::Member>> grouped;
    std::set<std::string> group_ids;
    for (const auto &[gkey, indices] : groups) {
      if (indices.size() < 2) continue;
      const lower::StagePattern &pattern = std::get<0>(gkey);
      std::vector<LoweredStage> members;
      for (size_t i : indices) members.push_back(stages[i]);
      std::string gid = "g_" + std::string(netdef::to_string(pattern.kind)) + "_" +
                        std::to_string(pattern.kernel_h) + "x" + std::to_string(pattern.kernel_w) +
                        "_s" + std::to_string(pattern.stride);
      for (int v = 2; group_ids.contains(gid); ++v) {
        std::string base = gid.substr(0, gid.find("_v") == std::string::npos
                                             ? gid.size()
                                             : gid.find("_v"));
        gid = base + "_v" + std::to_string(v);
      }
      netdef::FlopKey key{pattern.kind, pattern.kernel_h, pattern.kernel_w, pattern.stride};
      xform::ParameterizedGroup group;
      try {
        group = xform::parameterize_group(members, key, gid);
      } catch (const Error &e) {
        if (e.code() == "StructuralDivergence") continue;  // keep members concrete
        throw;
      }
      group_ids.insert(gid);
      p.kernels.push_back(group.kernel);
      KernelMeta gm = members[0].meta;
      gm.layers.clear();
      gm.output_layer = gid;
      p.metas.push_back(std::move(gm));
      for (size_t m = 0; m < indices.size(); ++m)
        grouped[indices[m]] = {gid, group.members[m]};
    }

    for (size_t i = 0; i < stages.size(); ++i) {
      Invocation inv;
      inv.layers = stages[i].meta.layers;
      auto it = grouped.find(i);
      if (it != grouped.end()) {
        inv.kernel_id = it->second.first;
        inv.bindings = it->second.second.bindings;
        inv.buffer_map = it->second.second.buffer_map;
      } else {
        inv.kernel_id = stages[i].kernel.id;
        p.kernels.push_back(stages[i].kernel);
        p.metas.push_back(stages[i].meta);
      }
      p.invocations.push_back(std::move(inv));
    }
  } else {
    for (auto &stage : stages) {
      Invocation inv;
      inv.kernel_id = stage.kernel.id;
      inv.layers = stage.meta.layers;
      p.invocations.push_back(std::move(inv));
      p.kernels.push_back(stage.kernel);
      p.metas.push_back(stage.meta);
    }
    p = channelize(std::move(p));
    p = apply_channel_depths(std::move(p));
    p = mark_autorun(std::move(p));
  }

  p = choose_factors(std::move(p), device);
  p = assign_queues(std::move(p));
  collect_global_buffers(p);
  return p;
}

// ---------------------------------------------------------------------------
// plan-level structural checks

std::vector<ir::Violation> structural_check(const ExecutionPlan &p) {
  std::vector<ir::Violation> out;
  auto violation = [&](std::string code, std::string detail) {
    out.push_back({std::move(code), std::move(detail)});
  };

  std::set<std::string> kernel_ids;
  for (const auto &k : p.kernels) {
    auto v = ir::structural_check(k);
    out.insert(out.end(), v.begin(), v.end());
    if (!kernel_ids.insert(k.id).second) violation("duplicate-kernel", k.id);
    if (k.autorun && p.mode != Mode::Pipelined) violation("autorun-in-folded", k.id);
    if (k.autorun) {
      bool reads = false;
      ir::for_each_stmt(k.body,
                        [&](const Stmt &s) { reads |= s.kind == Stmt::Kind::ChannelRead; });
      if (!reads) violation("autorun-without-channel-read", k.id);
    }
  }

  std::set<std::string> channel_names;
  for (const auto &ch : p.channels) {
    if (!channel_names.insert(ch.name).second) violation("duplicate-channel", ch.name);
    if (ch.depth_elems < 1) violation("channel-depth", ch.name);
    if (!kernel_ids.contains(ch.producer) || !kernel_ids.contains(ch.consumer))
      violation("channel-endpoint", ch.name + " references a missing kernel");
    int producers = 0, consumers = 0;
    for (const auto &k : p.kernels) {
      producers += static_cast<int>(
          std::count(k.channels_out.begin(), k.channels_out.end(), ch.name));
      consumers += static_cast<int>(
          std::count(k.channels_in.begin(), k.channels_in.end(), ch.name));
    }
    if (producers != 1 || consumers != 1)
      violation("channel-endpoint", ch.name + " must have exactly one producer and one consumer");
  }
  if (p.mode == Mode::Folded && !p.channels.empty())
    violation("channels-in-folded", "folded plans do not use channels");

  for (const auto &inv : p.invocations) {
    const ir::KernelIR *k = p.find_kernel(inv.kernel_id);
    if (!k) {
      violation("unknown-kernel", "invocation of '" + inv.kernel_id + "'");
      continue;
    }
    for (const auto &param : k->params)
      if (!inv.bindings.contains(param))
        violation("unbound-param", "kernel '" + k->id + "' param '" + param + "'");
  }

  if (p.mode == Mode::Pipelined) {
    for (const auto &k : p.kernels) {
      int n = 0;
      for (const auto &inv : p.invocations) n += inv.kernel_id == k.id;
      if (n != 1)
        violation("invocation-count",
                  "pipelined kernel '" + k.id + "' has " + std::to_string(n) + " invocations");
    }
  } else {
    std::set<int> queue_values;
    for (const auto &[id, q] : p.queues) queue_values.insert(q);
    if (queue_values.size() > 1) violation("queue-count", "folded plans use a single queue");
  }
  return out;
}

}  // namespace clflow::plan
