#include "clflow/xform.hpp"

#include <algorithm>
#include <functional>
#include <set>

#include <nlohmann/json.hpp>

#include "clflow/error.hpp"

namespace clflow::xform {

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

namespace {

void collect_vars(const std::vector<Node> &nodes, std::set<std::string> &out) {
  for (const auto &n : nodes) {
    if (!n.is_loop()) continue;
    out.insert(n.loop().var);
    collect_vars(n.loop().body, out);
  }
}

std::string fresh_var(const std::set<std::string> &taken, std::string base) {
  while (taken.contains(base)) base += "_";
  return base;
}

void substitute_var(std::vector<Node> &nodes, const std::string &var, const AffineExpr &repl) {
  for (auto &n : nodes) {
    if (n.is_loop()) {
      substitute_var(n.loop().body, var, repl);
      continue;
    }
    Stmt &s = n.stmt();
    for (auto &e : s.dst.index) e = e.substituted(var, repl);
    for (auto &a : s.args)
      if (!a.is_imm())
        for (auto &e : a.ref->index) e = e.substituted(var, repl);
  }
}

/// Replace the loop named `var` in place via `rewrite`; returns false when
/// the loop does not exist.
bool rewrite_loop(std::vector<Node> &nodes, const std::string &var,
                  const std::function<Node(Loop)> &rewrite) {
  for (auto &n : nodes) {
    if (!n.is_loop()) continue;
    if (n.loop().var == var) {
      n = rewrite(std::move(n.loop()));
      return true;
    }
    if (rewrite_loop(n.loop().body, var, rewrite)) return true;
  }
  return false;
}

const Loop &require_loop(const KernelIR &k, const std::string &var) {
  const Loop *l = ir::find_loop(k.body, var);
  if (!l) fail("UnknownLoop", "kernel '" + k.id + "' has no loop '" + var + "'");
  return *l;
}

KernelIR strip_mine_impl(const KernelIR &k, const std::string &var, i64 f, bool symbolic) {
  const Loop &target = require_loop(k, var);
  if (f < 1) fail("NonDivisible", "factor must be >= 1");
  if (!symbolic) {
    if (!target.extent.is_const())
      fail("SymbolicExtent", "loop '" + var + "' has symbolic extent " +
                                 ir::print_dim(target.extent));
    if (target.extent.const_value() % f != 0)
      fail("NonDivisible", "extent " + std::to_string(target.extent.const_value()) +
                               " of loop '" + var + "' is not evenly divisible by " +
                               std::to_string(f));
  } else if (target.extent.is_const()) {
    return strip_mine_impl(k, var, f, false);
  }

  KernelIR out = k;
  std::set<std::string> taken;
  collect_vars(out.body, taken);
  std::string outer_var = fresh_var(taken, var + "_o");
  taken.insert(outer_var);
  std::string inner_var = fresh_var(taken, var + "_i");

  rewrite_loop(out.body, var, [&](Loop l) {
    substitute_var(l.body, var,
                   AffineExpr::var(outer_var, f).plus(AffineExpr::var(inner_var)));
    Dim outer_extent;
    if (l.extent.is_const()) {
      outer_extent = Dim::constant(l.extent.const_value() / f);
    } else {
      outer_extent = l.extent;
      outer_extent.div *= f;
    }
    Loop inner{inner_var, Dim::constant(f), true, l.tag, std::move(l.body)};
    Loop outer{outer_var, outer_extent, false, l.tag, {Node(std::move(inner))}};
    return Node(std::move(outer));
  });
  return out;
}

bool is_identity_index(const std::vector<AffineExpr> &index, std::vector<std::string> *vars) {
  std::vector<std::string> seen;
  for (const auto &e : index) {
    if (e.constant != 0 || e.terms.size() != 1 || e.terms[0].second != 1) return false;
    seen.push_back(e.terms[0].first);
  }
  if (vars) *vars = std::move(seen);
  return true;
}

struct WriteSite {
  Stmt *stmt = nullptr;
  std::vector<std::string> point_vars;
};

std::vector<Stmt *> stmts_writing(KernelIR &k, const std::string &buffer) {
  std::vector<Stmt *> out;
  ir::for_each_stmt(k.body, [&](Stmt &s) {
    if (s.kind != Stmt::Kind::ChannelWrite && s.dst.buffer == buffer) out.push_back(&s);
  });
  return out;
}

void rename_buffer(KernelIR &k, const std::string &from, const std::string &to) {
  for (auto &b : k.buffers)
    if (b.name == from) b.name = to;
  ir::for_each_stmt(k.body, [&](Stmt &s) {
    if (s.dst.buffer == from) s.dst.buffer = to;
    for (auto &a : s.args)
      if (!a.is_imm() && a.ref->buffer == from) a.ref->buffer = to;
  });
}

AffineExpr rename_vars(const AffineExpr &e, const std::map<std::string, std::string> &vmap) {
  AffineExpr r;
  r.constant = e.constant;
  for (const auto &[name, coeff] : e.terms) {
    auto it = vmap.find(name);
    r.add_term(it == vmap.end() ? name : it->second, coeff);
  }
  return r;
}

}  // namespace

std::vector<std::string> loop_vars(const KernelIR &k) {
  std::set<std::string> s;
  collect_vars(k.body, s);
  return {s.begin(), s.end()};
}

KernelIR unroll_full(const KernelIR &k, const std::string &loop_var) {
  const Loop &l = require_loop(k, loop_var);
  if (!l.extent.is_const())
    fail("SymbolicExtent",
         "cannot fully unroll loop '" + loop_var + "' of extent " + ir::print_dim(l.extent));
  KernelIR out = k;
  rewrite_loop(out.body, loop_var, [](Loop loop) {
    loop.unroll_full = true;
    return Node(std::move(loop));
  });
  return out;
}

KernelIR unroll_full(const KernelIR &k, const std::string &loop_var, i64 factor) {
  const Loop &l = require_loop(k, loop_var);
  if (!l.extent.is_const())
    fail("SymbolicExtent", "loop '" + loop_var + "' has symbolic extent");
  if (factor != l.extent.const_value())
    fail("PartialUnrollRequested",
         "factor " + std::to_string(factor) + " != extent " +
             std::to_string(l.extent.const_value()) + " of loop '" + loop_var +
             "'; partial unrolling goes through strip_mine");
  return unroll_full(k, loop_var);
}

KernelIR strip_mine(const KernelIR &k, const std::string &loop_var, i64 f) {
  return strip_mine_impl(k, loop_var, f, false);
}

KernelIR strip_mine_symbolic(const KernelIR &k, const std::string &loop_var, i64 f) {
  return strip_mine_impl(k, loop_var, f, true);
}

KernelIR apply_factor(const KernelIR &k, const std::string &loop_var, i64 f) {
  if (f == 1) return k;
  const Loop &l = require_loop(k, loop_var);
  if (l.extent.is_const() && l.extent.const_value() == f) return unroll_full(k, loop_var);
  return strip_mine_impl(k, loop_var, f, !l.extent.is_const());
}

// ---------------------------------------------------------------------------
// tile

namespace {

const Loop *descend_to(const Loop &from, const std::string &var) {
  for (const auto &n : from.body) {
    if (!n.is_loop()) continue;
    if (n.loop().var == var) return &n.loop();
    if (const Loop *l = descend_to(n.loop(), var)) return l;
  }
  return nullptr;
}

bool contains_mac(const std::vector<Node> &nodes) {
  bool found = false;
  ir::for_each_stmt(nodes, [&](const Stmt &s) { found |= s.kind == Stmt::Kind::Mac; });
  return found;
}

}  // namespace

KernelIR tile(const KernelIR &k, const std::vector<std::string> &loop_vars,
              const std::vector<i64> &factors) {
  if (loop_vars.empty() || loop_vars.size() != factors.size())
    fail("NonDivisible", "tile needs one factor per loop");

  static const std::set<std::string> tilable{"filter", "reduce", "window"};
  const Loop *prev = nullptr;
  for (const auto &var : loop_vars) {
    const Loop &l = require_loop(k, var);
    if (!tilable.contains(l.tag))
      fail("NotPerfectlyNested",
           "loop '" + var + "' is not a tilable filter/reduction loop around the Mac");
    if (prev && !descend_to(*prev, var))
      fail("NotPerfectlyNested",
           "loops '" + prev->var + "' and '" + var + "' do not form a nesting chain");
    prev = &l;
  }
  if (prev && !contains_mac(prev->body))
    fail("NotPerfectlyNested", "tiled loops do not enclose a Mac reduction");

  for (size_t i = 0; i < loop_vars.size(); ++i) {
    const Loop &l = require_loop(k, loop_vars[i]);
    if (l.extent.is_const() && l.extent.const_value() % factors[i] != 0)
      fail("NonDivisible", "extent " + std::to_string(l.extent.const_value()) + " of loop '" +
                               loop_vars[i] + "' is not evenly divisible by " +
                               std::to_string(factors[i]));
  }

  KernelIR out = k;
  for (size_t i = 0; i < loop_vars.size(); ++i)
    if (factors[i] > 1) out = apply_factor(out, loop_vars[i], factors[i]);
  return out;
}

// ---------------------------------------------------------------------------
// fuse_postop

KernelIR fuse_postop(const KernelIR &producer, const KernelIR &post) {
  // The consumer must be a bare elementwise map: one loop chain, one ElemOp.
  const std::vector<Node> *nodes = &post.body;
  std::vector<const Loop *> chain;
  while (nodes->size() == 1 && (*nodes)[0].is_loop()) {
    chain.push_back(&(*nodes)[0].loop());
    nodes = &chain.back()->body;
  }
  if (nodes->size() != 1 || (*nodes)[0].is_loop())
    fail("FusionMismatch", "kernel '" + post.id + "' is not a single elementwise map");
  const Stmt &op_stmt = (*nodes)[0].stmt();
  if (op_stmt.kind != Stmt::Kind::ElemOp ||
      (op_stmt.op != ElemOpKind::Relu && op_stmt.op != ElemOpKind::Relu6 &&
       op_stmt.op != ElemOpKind::BnScaleShift))
    fail("FusionMismatch", "kernel '" + post.id + "' is not a relu/relu6/batchnorm map");

  std::vector<std::string> post_vars;
  for (const auto *l : chain) post_vars.push_back(l->var);
  std::vector<std::string> dst_vars, src_vars;
  if (op_stmt.args.empty() || op_stmt.args[0].is_imm() ||
      !is_identity_index(op_stmt.dst.index, &dst_vars) ||
      !is_identity_index(op_stmt.args[0].ref->index, &src_vars) || dst_vars != post_vars ||
      src_vars != post_vars)
    fail("FusionMismatch", "kernel '" + post.id + "' does not map its input identically");

  const std::string &mid = op_stmt.args[0].ref->buffer;  // producer output
  const std::string &out_name = op_stmt.dst.buffer;

  KernelIR fused = producer;
  const BufferDecl *mid_decl = fused.find_buffer(mid);
  if (!mid_decl || mid_decl->space != MemSpace::Global)
    fail("FusionMismatch",
         "kernel '" + post.id + "' does not consume the producer's global output '" + mid + "'");
  const BufferDecl *post_in_decl = post.find_buffer(mid);
  if (!post_in_decl || !(post_in_decl->shape == mid_decl->shape))
    fail("FusionMismatch", "iteration spaces of '" + producer.id + "' and '" + post.id +
                               "' do not conform");

  auto sites = stmts_writing(fused, mid);
  if (sites.empty())
    fail("FusionMismatch", "producer '" + producer.id + "' never writes '" + mid + "'");
  Stmt *last_site = sites.back();
  std::vector<std::string> point_vars;
  if (!is_identity_index(last_site->dst.index, &point_vars) ||
      point_vars.size() != post_vars.size())
    fail("FusionMismatch", "producer output of '" + producer.id + "' is not point-indexed");

  std::map<std::string, std::string> vmap;
  for (size_t i = 0; i < post_vars.size(); ++i) vmap[post_vars[i]] = point_vars[i];

  // Target of the fused op: the register accumulator when cached writes ran
  // first, otherwise the global accumulator element itself.
  bool cached = last_site->kind == Stmt::Kind::Store && !last_site->args[0].is_imm() &&
                fused.find_buffer(last_site->args[0].ref->buffer) &&
                fused.find_buffer(last_site->args[0].ref->buffer)->space != MemSpace::Global;
  BufRef target = cached ? *last_site->args[0].ref : last_site->dst;

  Stmt fused_op;
  fused_op.kind = Stmt::Kind::ElemOp;
  fused_op.op = op_stmt.op;
  fused_op.dst = target;
  fused_op.args = {Operand::of(target)};
  for (size_t i = 1; i < op_stmt.args.size(); ++i) {
    Operand a = op_stmt.args[i];
    if (!a.is_imm()) {
      for (auto &e : a.ref->index) e = rename_vars(e, vmap);
      if (!fused.find_buffer(a.ref->buffer)) {
        const BufferDecl *d = post.find_buffer(a.ref->buffer);
        if (!d) fail("FusionMismatch", "operand buffer '" + a.ref->buffer + "' undeclared");
        fused.buffers.push_back(*d);
      }
    }
    fused_op.args.push_back(std::move(a));
  }

  // Insert the op where the accumulation completes.
  bool inserted = false;
  std::function<bool(std::vector<Node> &)> insert = [&](std::vector<Node> &body) {
    for (size_t i = 0; i < body.size(); ++i) {
      if (body[i].is_loop()) {
        if (insert(body[i].loop().body)) return true;
        continue;
      }
      if (&body[i].stmt() != last_site) continue;
      if (cached) {
        body.insert(body.begin() + static_cast<std::ptrdiff_t>(i), Node(fused_op));
      } else {
        // append after the reduction at the same point scope
        body.push_back(Node(fused_op));
      }
      return true;
    }
    return false;
  };
  if (!point_vars.empty()) {
    // locate the point loop (the loop over the innermost output index)
    inserted = false;
    std::function<void(std::vector<Node> &)> walk = [&](std::vector<Node> &body) {
      for (auto &n : body) {
        if (!n.is_loop() || inserted) continue;
        if (n.loop().var == point_vars.back()) {
          if (cached) {
            insert(n.loop().body);
          } else {
            n.loop().body.push_back(Node(fused_op));
          }
          inserted = true;
          return;
        }
        walk(n.loop().body);
      }
    };
    walk(fused.body);
  } else {
    if (cached)
      insert(fused.body);
    else
      fused.body.push_back(Node(fused_op));
    inserted = true;
  }
  if (!inserted) fail("FusionMismatch", "could not locate the accumulation point");

  rename_buffer(fused, mid, out_name);
  return fused;
}

// ---------------------------------------------------------------------------
// cache_writes

KernelIR cache_writes(const KernelIR &k, const std::string &buffer) {
  const BufferDecl *decl = k.find_buffer(buffer);
  if (!decl) fail("NoAccumulationPattern", "kernel '" + k.id + "' has no buffer '" + buffer + "'");
  if (decl->space != MemSpace::Global)
    fail("NoAccumulationPattern", "buffer '" + buffer + "' is not a global accumulator");

  KernelIR out = k;
  auto sites = stmts_writing(out, buffer);
  bool reduces = false;
  for (Stmt *s : sites) {
    if (s->kind == Stmt::Kind::Mac) reduces = true;
    if (s->kind == Stmt::Kind::ElemOp &&
        (s->op == ElemOpKind::Add || s->op == ElemOpKind::Max) && !s->args[0].is_imm() &&
        s->args[0].ref->buffer == buffer)
      reduces = true;
  }
  if (sites.empty() || !reduces)
    fail("NoAccumulationPattern",
         "buffer '" + buffer + "' is not written by a reduction in kernel '" + k.id + "'");

  const std::vector<AffineExpr> point = sites[0]->dst.index;
  for (Stmt *s : sites)
    if (!(s->dst.index == point))
      fail("NoAccumulationPattern", "buffer '" + buffer + "' is accumulated at several points");
  std::vector<std::string> point_vars;
  if (!is_identity_index(point, &point_vars))
    fail("NoAccumulationPattern", "accumulator index of '" + buffer + "' is not point-shaped");

  std::string acc = "acc";
  while (out.find_buffer(acc)) acc += "_";
  out.buffers.push_back({acc, MemSpace::Register, {Dim::constant(1)}, ir::Access::ReadWrite});
  BufRef acc_ref{acc, {AffineExpr::c(0)}};

  ir::for_each_stmt(out.body, [&](Stmt &s) {
    if (s.kind != Stmt::Kind::ChannelWrite && s.dst.buffer == buffer) s.dst = acc_ref;
    for (auto &a : s.args)
      if (!a.is_imm() && a.ref->buffer == buffer) *a.ref = acc_ref;
  });

  Stmt store{Stmt::Kind::Store, BufRef{buffer, point}, {Operand::of(acc_ref)},
             ElemOpKind::Copy, ""};
  if (point_vars.empty()) {
    out.body.push_back(Node(std::move(store)));
  } else {
    ir::Loop *point_loop = ir::find_loop(out.body, point_vars.back());
    if (!point_loop) fail("NoAccumulationPattern", "missing point loop for '" + buffer + "'");
    point_loop->body.push_back(Node(std::move(store)));
  }
  for (auto &b : out.buffers)
    if (b.name == buffer) b.access = ir::Access::Write;
  return out;
}

// ---------------------------------------------------------------------------
// parameterize_group

KernelIR canonicalized(const KernelIR &k) {
  KernelIR out = k;
  out.id = "";
  std::map<std::string, std::string> rename;
  for (size_t i = 0; i < out.buffers.size(); ++i)
    rename[out.buffers[i].name] = "b" + std::to_string(i);
  for (auto &b : out.buffers) b.name = rename.at(b.name);
  ir::for_each_stmt(out.body, [&](Stmt &s) {
    if (auto it = rename.find(s.dst.buffer); it != rename.end()) s.dst.buffer = it->second;
    for (auto &a : s.args)
      if (!a.is_imm())
        if (auto it = rename.find(a.ref->buffer); it != rename.end()) a.ref->buffer = it->second;
  });
  return out;
}

ParameterizedGroup parameterize_group(const std::vector<lower::LoweredStage> &members,
                                      const netdef::FlopKey &key, const std::string &kernel_id) {
  if (members.empty()) fail("KeyMismatch", "cannot parameterize an empty group");
  const auto &[kind, kh, kw, stride] = key;
  if (kind != netdef::LayerKind::Conv2d && kind != netdef::LayerKind::DepthwiseConv2d)
    fail("KeyMismatch", "kernel parameterization applies to convolutions, got " +
                            std::string(netdef::to_string(kind)));

  const lower::StagePattern pattern = lower::pattern_of(members[0].meta);
  const i64 off_h = members[0].meta.in_h - stride * members[0].meta.out_h;
  const i64 off_w = members[0].meta.in_w - stride * members[0].meta.out_w;
  for (const auto &m : members) {
    if (m.meta.base_kind != kind || m.meta.kernel_h != kh || m.meta.kernel_w != kw ||
        m.meta.stride != stride)
      fail("KeyMismatch", "stage '" + m.meta.output_layer + "' does not match the group key");
    if (!(lower::pattern_of(m.meta) == pattern))
      fail("StructuralDivergence",
           "stage '" + m.meta.output_layer + "' fuses a different post-op chain");
    if (m.meta.in_h - stride * m.meta.out_h != off_h ||
        m.meta.in_w - stride * m.meta.out_w != off_w)
      fail("StructuralDivergence", "stage '" + m.meta.output_layer +
                                       "' has a different input/output extent relation");
  }

  lower::SymbolicStage sym = lower::lower_stage_symbolic(pattern, kernel_id, off_h, off_w);
  KernelIR kernel = sym.base.kernel;
  for (const auto &post : sym.post) kernel = fuse_postop(kernel, post.kernel);

  bool members_cached = false;
  for (const auto &b : members[0].kernel.buffers)
    if (b.space == MemSpace::Register) members_cached = true;
  std::string out_buf;
  for (const auto &b : kernel.buffers)
    if (b.space == MemSpace::Global && b.access != ir::Access::Read) out_buf = b.name;
  if (members_cached) kernel = cache_writes(kernel, out_buf);

  ParameterizedGroup group;
  group.kernel = kernel;
  for (const auto &m : members) {
    ir::Bindings b;
    if (kind == netdef::LayerKind::Conv2d) b["F"] = m.meta.filters;
    b["C"] = m.meta.channels;
    b["H"] = m.meta.out_h;
    b["W"] = m.meta.out_w;

    KernelIR bound = lower::bind_kernel(kernel, b);
    bound.autorun = m.kernel.autorun;
    if (!(canonicalized(bound) == canonicalized(m.kernel)))
      fail("StructuralDivergence", "stage '" + m.meta.output_layer +
                                       "' diverges from the group's parameterized structure");
    if (kernel.buffers.size() != m.kernel.buffers.size())
      fail("StructuralDivergence", "buffer lists diverge in group '" + kernel_id + "'");

    ParameterizedGroup::Member member;
    member.bindings = std::move(b);
    for (size_t i = 0; i < kernel.buffers.size(); ++i)
      if (kernel.buffers[i].space == MemSpace::Global)
        member.buffer_map[kernel.buffers[i].name] = m.kernel.buffers[i].name;
    group.members.push_back(std::move(member));
  }
  return group;
}

// ---------------------------------------------------------------------------
// schedule files

namespace {

using json = nlohmann::json;

const char *step_name(XformStep::Kind k) {
  switch (k) {
    case XformStep::Kind::UnrollFull: return "unroll_full";
    case XformStep::Kind::StripMine: return "strip_mine";
    case XformStep::Kind::Tile: return "tile";
    case XformStep::Kind::FusePostOp: return "fuse_postop";
    case XformStep::Kind::CacheWrites: return "cache_writes";
    case XformStep::Kind::Parameterize: return "parameterize";
  }
  return "?";
}

}  // namespace

Schedule parse_schedule(const std::string &text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception &e) {
    fail("SchemaError", std::string("schedule document is not valid JSON: ") + e.what());
  }
  Schedule schedule;
  try {
    for (const auto &[kernel, steps] : doc.at("kernels").items()) {
      for (const auto &js : steps) {
        XformStep step;
        std::string op = js.at("op").get<std::string>();
        if (op == "unroll_full") {
          step.kind = XformStep::Kind::UnrollFull;
          step.loop = js.at("loop").get<std::string>();
        } else if (op == "strip_mine") {
          step.kind = XformStep::Kind::StripMine;
          step.loop = js.at("loop").get<std::string>();
          step.factor = js.at("factor").get<i64>();
        } else if (op == "tile") {
          step.kind = XformStep::Kind::Tile;
          step.loops = js.at("loops").get<std::vector<std::string>>();
          step.factors = js.at("factors").get<std::vector<i64>>();
        } else if (op == "fuse_postop") {
          step.kind = XformStep::Kind::FusePostOp;
          step.consumer = js.at("consumer").get<std::string>();
        } else if (op == "cache_writes") {
          step.kind = XformStep::Kind::CacheWrites;
          step.buffer = js.at("buffer").get<std::string>();
        } else if (op == "parameterize") {
          step.kind = XformStep::Kind::Parameterize;
          step.group_key = js.at("key").get<std::string>();
        } else {
          fail("SchemaError", "unknown schedule step '" + op + "'");
        }
        schedule[kernel].push_back(std::move(step));
      }
    }
  } catch (const Error &) {
    throw;
  } catch (const json::exception &e) {
    fail("SchemaError", std::string("malformed schedule document: ") + e.what());
  }
  return schedule;
}

std::string serialize_schedule(const Schedule &schedule) {
  nlohmann::ordered_json doc;
  doc["format_version"] = 1;
  nlohmann::ordered_json kernels = nlohmann::ordered_json::object();
  for (const auto &[kernel, steps] : schedule) {
    nlohmann::ordered_json list = nlohmann::ordered_json::array();
    for (const auto &s : steps) {
      nlohmann::ordered_json js;
      js["op"] = step_name(s.kind);
      switch (s.kind) {
        case XformStep::Kind::UnrollFull: js["loop"] = s.loop; break;
        case XformStep::Kind::StripMine:
          js["loop"] = s.loop;
          js["factor"] = s.factor;
          break;
        case XformStep::Kind::Tile:
          js["loops"] = s.loops;
          js["factors"] = s.factors;
          break;
        case XformStep::Kind::FusePostOp: js["consumer"] = s.consumer; break;
        case XformStep::Kind::CacheWrites: js["buffer"] = s.buffer; break;
        case XformStep::Kind::Parameterize: js["key"] = s.group_key; break;
      }
      list.push_back(std::move(js));
    }
    kernels[kernel] = std::move(list);
  }
  doc["kernels"] = std::move(kernels);
  return doc.dump(2) + "\n";
}

void apply_schedule(std::map<std::string, KernelIR> &kernels, const Schedule &schedule) {
  for (const auto &[id, steps] : schedule) {
    for (const auto &step : steps) {
      auto it = kernels.find(id);
      if (it == kernels.end()) fail("UnknownLoop", "schedule names unknown kernel '" + id + "'");
      switch (step.kind) {
        case XformStep::Kind::UnrollFull:
          it->second = unroll_full(it->second, step.loop);
          break;
        case XformStep::Kind::StripMine:
          it->second = strip_mine(it->second, step.loop, step.factor);
          break;
        case XformStep::Kind::Tile:
          it->second = tile(it->second, step.loops, step.factors);
          break;
        case XformStep::Kind::CacheWrites:
          it->second = cache_writes(it->second, step.buffer);
          break;
        case XformStep::Kind::FusePostOp: {
          auto consumer = kernels.find(step.consumer);
          if (consumer == kernels.end())
            fail("FusionMismatch", "schedule fuses unknown kernel '" + step.consumer + "'");
          it->second = fuse_postop(it->second, consumer->second);
          kernels.erase(consumer);
          break;
        }
        case XformStep::Kind::Parameterize:
          fail("SchemaError", "parameterize steps are applied by the planner, not schedules");
      }
    }
  }
}

}  // namespace clflow::xform
