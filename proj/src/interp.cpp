#include "clflow/interp.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <deque>
#include <fstream>
#include <memory>

#include "clflow/error.hpp"

namespace clflow::interp {

using ir::AffineExpr;
using ir::BufferDecl;
using ir::Dim;
using ir::ElemOpKind;
using ir::KernelIR;
using ir::MemSpace;
using ir::Stmt;

namespace {

// ---------------------------------------------------------------------------
// compiled kernel representation
//
// Loop variables are interned to dense slots and parameter bindings are
// folded into index constants up front, so the hot path is a small dot
// product per buffer reference with per-dimension bounds checks.

struct DimIdx {
  i64 constant = 0;
  std::vector<std::pair<int, i64>> terms;  // (slot, coeff)
  i64 extent = 0;
  i64 stride = 0;
};

struct CRef {
  int buf = -1;
  std::vector<DimIdx> dims;
};

struct COperand {
  bool is_imm = false;
  float imm = 0.0f;
  CRef ref;
};

struct CStmt {
  Stmt::Kind kind = Stmt::Kind::Store;
  ElemOpKind op = ElemOpKind::Copy;
  CRef dst;
  std::vector<COperand> args;
  int channel = -1;
};

struct CNode {
  bool is_loop = false;
  int slot = 0;
  i64 extent = 0;
  std::vector<CNode> body;
  CStmt stmt;
};

struct ChannelSim {
  std::vector<std::deque<float>> fifo;
  std::vector<i64> cap;
  std::map<std::string, int> index;

  int at(const std::string &name) const {
    auto it = index.find(name);
    if (it == index.end()) fail("InvalidPlan", "statement uses undeclared channel '" + name + "'");
    return it->second;
  }
};

i64 dim_value(const Dim &d, const ir::Bindings &b) { return d.value(b); }

class KernelInstance {
 public:
  enum class Status { Running, Blocked, Finished };

  KernelInstance(const KernelIR &k, const ir::Bindings &bindings,
                 const std::map<std::string, std::string> &buffer_map, TensorMap &global_storage,
                 ChannelSim *channels)
      : id_(k.id), autorun_(k.autorun), channels_(channels) {
    // Bind buffer shapes, wire global buffers to shared storage and
    // allocate private storage for on-chip buffers.
    private_store_.reserve(k.buffers.size());
    int index = 0;
    for (const auto &b : k.buffers) {
      std::vector<i64> dims;
      i64 elems = 1;
      for (const auto &d : b.shape) {
        dims.push_back(dim_value(d, bindings));
        elems *= dims.back();
      }
      Tensor *storage = nullptr;
      if (b.space == MemSpace::Global) {
        auto mapped = buffer_map.find(b.name);
        const std::string &name = mapped == buffer_map.end() ? b.name : mapped->second;
        auto [it, inserted] = global_storage.try_emplace(name);
        if (inserted) {
          it->second.assign(static_cast<size_t>(elems), 0.0f);
        } else if (static_cast<i64>(it->second.size()) != elems) {
          fail("ShapeMismatch", "buffer '" + name + "' bound with " +
                                    std::to_string(it->second.size()) + " elements, kernel '" +
                                    k.id + "' expects " + std::to_string(elems));
        }
        storage = &it->second;
      } else {
        private_store_.emplace_back(static_cast<size_t>(elems), 0.0f);
        storage = &private_store_.back();
      }
      buffers_.push_back(storage);
      buf_index_[b.name] = index;
      buf_dims_.push_back(std::move(dims));
      ++index;
    }

    prog_ = compile_nodes(k.body, bindings);
    slots_.assign(static_cast<size_t>(next_slot_), 0);
    reset();
  }

  void reset() {
    stack_.clear();
    stack_.push_back(Frame{&prog_, 0, nullptr});
  }

  bool finished() const { return stack_.empty(); }
  bool autorun() const { return autorun_; }
  const std::string &id() const { return id_; }

  /// Execute until blocked, finished, or `budget` statements have run.
  Status run(Counters &counters, i64 budget, i64 &executed) {
    while (true) {
      if (stack_.empty()) return Status::Finished;
      Frame &f = stack_.back();
      if (f.pos == f.seq->size()) {
        if (f.loop) {
          i64 iter = ++slots_[static_cast<size_t>(f.loop->slot)];
          if (iter < f.loop->extent) {
            f.pos = 0;
            continue;
          }
        }
        stack_.pop_back();
        continue;
      }
      const CNode &n = (*f.seq)[f.pos];
      if (n.is_loop) {
        f.pos++;
        if (n.extent <= 0) continue;
        slots_[static_cast<size_t>(n.slot)] = 0;
        stack_.push_back(Frame{&n.body, 0, &n});
        continue;
      }
      if (executed >= budget) return Status::Running;
      if (!exec(n.stmt, counters)) return Status::Blocked;
      ++executed;
      ++counters.stmts;
      f.pos++;
    }
  }

 private:
  struct Frame {
    const std::vector<CNode> *seq;
    size_t pos;
    const CNode *loop;  // null for the top-level sequence
  };

  i64 eval(const CRef &r) const {
    i64 offset = 0;
    for (const auto &d : r.dims) {
      i64 v = d.constant;
      for (const auto &[slot, coeff] : d.terms) v += slots_[static_cast<size_t>(slot)] * coeff;
      if (v < 0 || v >= d.extent)
        fail("OutOfBoundsIndex", "kernel '" + id_ + "': index " + std::to_string(v) +
                                     " outside extent " + std::to_string(d.extent));
      offset += v * d.stride;
    }
    return offset;
  }

  float load(const COperand &o) const {
    if (o.is_imm) return o.imm;
    return (*buffers_[static_cast<size_t>(o.ref.buf)])[static_cast<size_t>(eval(o.ref))];
  }

  float &at(const CRef &r) {
    return (*buffers_[static_cast<size_t>(r.buf)])[static_cast<size_t>(eval(r))];
  }

  // Returns false when blocked on a channel (state untouched, retryable).
  bool exec(const CStmt &s, Counters &c) {
    switch (s.kind) {
      case Stmt::Kind::Store:
        at(s.dst) = load(s.args[0]);
        return true;
      case Stmt::Kind::Mac: {
        float &acc = at(s.dst);
        acc += load(s.args[0]) * load(s.args[1]);
        ++c.macs;
        return true;
      }
      case Stmt::Kind::ElemOp: {
        float r = 0.0f;
        switch (s.op) {
          case ElemOpKind::Relu: r = std::max(load(s.args[0]), 0.0f); break;
          case ElemOpKind::Relu6: r = std::min(std::max(load(s.args[0]), 0.0f), 6.0f); break;
          case ElemOpKind::BnScaleShift:
            r = load(s.args[0]) * load(s.args[1]) + load(s.args[2]);
            break;
          case ElemOpKind::Add: r = load(s.args[0]) + load(s.args[1]); break;
          case ElemOpKind::Max: r = std::max(load(s.args[0]), load(s.args[1])); break;
          case ElemOpKind::Copy: r = load(s.args[0]); break;
        }
        at(s.dst) = r;
        if (s.op != ElemOpKind::Copy) ++c.elem_flops;
        return true;
      }
      case Stmt::Kind::ChannelRead: {
        auto &q = channels_->fifo[static_cast<size_t>(s.channel)];
        if (q.empty()) return false;
        at(s.dst) = q.front();
        q.pop_front();
        return true;
      }
      case Stmt::Kind::ChannelWrite: {
        auto &q = channels_->fifo[static_cast<size_t>(s.channel)];
        if (static_cast<i64>(q.size()) >= channels_->cap[static_cast<size_t>(s.channel)])
          return false;
        q.push_back(load(s.args[0]));
        return true;
      }
    }
    return true;
  }

  // --- compilation ---

  DimIdx compile_index(const AffineExpr &e, const ir::Bindings &bindings, i64 extent,
                       i64 stride) const {
    DimIdx d;
    d.constant = e.constant;
    d.extent = extent;
    d.stride = stride;
    for (const auto &[name, coeff] : e.terms) {
      auto it = var_slot_.find(name);
      if (it != var_slot_.end()) {
        d.terms.emplace_back(it->second, coeff);
        continue;
      }
      auto b = bindings.find(name);
      if (b == bindings.end())
        fail("UnboundSym", "kernel '" + id_ + "': no binding for '" + name + "'");
      d.constant += coeff * b->second;
    }
    return d;
  }

  CRef compile_ref(const ir::BufRef &r, const ir::Bindings &bindings) const {
    auto it = buf_index_.find(r.buffer);
    if (it == buf_index_.end())
      fail("InvalidPlan", "kernel '" + id_ + "' references undeclared buffer '" + r.buffer + "'");
    CRef c;
    c.buf = it->second;
    const auto &dims = buf_dims_[static_cast<size_t>(it->second)];
    if (r.index.size() != dims.size())
      fail("InvalidPlan", "kernel '" + id_ + "': index arity mismatch on '" + r.buffer + "'");
    i64 stride = 1;
    std::vector<i64> strides(dims.size());
    for (size_t i = dims.size(); i-- > 0;) {
      strides[i] = stride;
      stride *= dims[i];
    }
    for (size_t i = 0; i < dims.size(); ++i)
      c.dims.push_back(compile_index(r.index[i], bindings, dims[i], strides[i]));
    return c;
  }

  std::vector<CNode> compile_nodes(const std::vector<ir::Node> &nodes,
                                   const ir::Bindings &bindings) {
    std::vector<CNode> out;
    out.reserve(nodes.size());
    for (const auto &n : nodes) {
      CNode c;
      if (n.is_loop()) {
        const ir::Loop &l = n.loop();
        c.is_loop = true;
        c.extent = dim_value(l.extent, bindings);
        auto [it, inserted] = var_slot_.try_emplace(l.var, next_slot_);
        if (inserted) ++next_slot_;
        c.slot = it->second;
        c.body = compile_nodes(l.body, bindings);
      } else {
        const Stmt &s = n.stmt();
        c.stmt.kind = s.kind;
        c.stmt.op = s.op;
        if (s.kind != Stmt::Kind::ChannelWrite) c.stmt.dst = compile_ref(s.dst, bindings);
        for (const auto &a : s.args) {
          COperand op;
          if (a.is_imm()) {
            op.is_imm = true;
            op.imm = a.imm;
          } else {
            op.ref = compile_ref(*a.ref, bindings);
          }
          c.stmt.args.push_back(std::move(op));
        }
        if (s.kind == Stmt::Kind::ChannelRead || s.kind == Stmt::Kind::ChannelWrite) {
          if (!channels_)
            fail("InvalidPlan", "kernel '" + id_ + "' uses channels outside plan co-simulation");
          c.stmt.channel = channels_->at(s.channel);
        }
      }
      out.push_back(std::move(c));
    }
    return out;
  }

  std::string id_;
  bool autorun_ = false;
  ChannelSim *channels_ = nullptr;
  std::vector<Tensor *> buffers_;
  std::vector<Tensor> private_store_;
  std::map<std::string, int> buf_index_;
  std::vector<std::vector<i64>> buf_dims_;
  mutable std::map<std::string, int> var_slot_;
  mutable int next_slot_ = 0;
  std::vector<CNode> prog_;
  std::vector<Frame> stack_;
  std::vector<i64> slots_;
};

constexpr i64 kDefaultBudget = i64{1} << 42;

}  // namespace

// ---------------------------------------------------------------------------

TensorMap interpret_kernel(const KernelIR &kernel, const ir::Bindings &bindings,
                           const TensorMap &inputs, Counters *counters) {
  if (!kernel.channels_in.empty() || !kernel.channels_out.empty())
    fail("InvalidPlan", "interpret_kernel cannot run channelized kernel '" + kernel.id + "'");
  for (const auto &p : kernel.params)
    if (!bindings.contains(p))
      fail("UnboundSym", "kernel '" + kernel.id + "' parameter '" + p + "' is unbound");

  TensorMap storage;
  for (const auto &b : kernel.buffers) {
    if (b.space != MemSpace::Global) continue;
    auto it = inputs.find(b.name);
    if (it != inputs.end()) {
      storage[b.name] = it->second;
    } else if (b.access == ir::Access::Read) {
      fail("MissingInput", "kernel '" + kernel.id + "' needs input tensor '" + b.name + "'");
    }
  }

  KernelInstance inst(kernel, bindings, {}, storage, nullptr);
  Counters local;
  Counters &c = counters ? *counters : local;
  i64 executed = 0;
  auto status = inst.run(c, kDefaultBudget, executed);
  if (status != KernelInstance::Status::Finished)
    fail("StepBudgetExceeded", "kernel '" + kernel.id + "' did not finish");

  TensorMap out;
  for (const auto &b : kernel.buffers)
    if (b.space == MemSpace::Global && b.access != ir::Access::Read)
      out[b.name] = storage[b.name];
  return out;
}

PlanRunResult interpret_plan(const plan::ExecutionPlan &p, const TensorMap &inputs,
                             i64 max_steps) {
  if (max_steps <= 0) max_steps = kDefaultBudget;
  PlanRunResult result;
  result.tensors = inputs;

  if (p.mode == plan::Mode::Folded || p.channels.empty()) {
    if (p.invocations.empty()) fail("EmptyPlan", "plan has no invocations");
    for (const auto &inv : p.invocations) {
      const KernelIR *k = p.find_kernel(inv.kernel_id);
      if (!k) fail("InvalidPlan", "invocation of unknown kernel '" + inv.kernel_id + "'");
      KernelInstance inst(*k, inv.bindings, inv.buffer_map, result.tensors, nullptr);
      i64 executed = 0;
      auto status = inst.run(result.counters, max_steps - result.steps, executed);
      result.steps += executed;
      if (status == KernelInstance::Status::Running)
        fail("StepBudgetExceeded", "folded execution exceeded " + std::to_string(max_steps) +
                                       " statements");
      if (status == KernelInstance::Status::Blocked)
        fail("InvalidPlan", "folded kernel '" + k->id + "' blocked on a channel");
    }
    return result;
  }

  // Pipelined co-simulation: deterministic round-robin, run-to-block.
  if (p.kernels.empty()) fail("EmptyPlan", "plan has no kernels");
  ChannelSim channels;
  for (const auto &ch : p.channels) {
    channels.index[ch.name] = static_cast<int>(channels.fifo.size());
    channels.fifo.emplace_back();
    channels.cap.push_back(ch.depth_elems);
  }

  std::vector<std::unique_ptr<KernelInstance>> instances;
  for (const auto &k : p.kernels) {
    const plan::Invocation *inv = nullptr;
    for (const auto &i : p.invocations)
      if (i.kernel_id == k.id) inv = &i;
    static const std::map<std::string, std::string> kEmpty;
    instances.push_back(std::make_unique<KernelInstance>(
        k, inv ? inv->bindings : ir::Bindings{}, inv ? inv->buffer_map : kEmpty, result.tensors,
        &channels));
  }

  while (true) {
    i64 pass_executed = 0;
    for (auto &inst : instances) {
      if (inst->finished()) {
        if (!inst->autorun()) continue;
        inst->reset();
      }
      i64 executed = 0;
      auto status = inst->run(result.counters, max_steps - result.steps, executed);
      result.steps += executed;
      pass_executed += executed;
      if (status == KernelInstance::Status::Running)
        fail("StepBudgetExceeded", "pipelined execution exceeded " + std::to_string(max_steps) +
                                       " statements");
    }
    bool complete = true;
    for (auto &inst : instances)
      if (!inst->autorun() && !inst->finished()) complete = false;
    if (complete) break;
    if (pass_executed == 0)
      fail("DeadlockDetected",
           "no kernel can make progress; every unfinished kernel is blocked on a channel");
  }
  return result;
}

// ---------------------------------------------------------------------------
// deterministic synthesis

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

namespace {
std::uint64_t fnv1a64(const std::string &s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) h = (h ^ c) * 1099511628211ull;
  return h;
}
}  // namespace

double synth_u01(std::uint64_t seed, const std::string &name, i64 index) {
  std::uint64_t x =
      splitmix64(splitmix64(seed ^ fnv1a64(name)) + static_cast<std::uint64_t>(index));
  return static_cast<double>(x >> 11) * 0x1.0p-53;
}

Tensor synth_weights(const std::string &name, i64 count, i64 fan_in, std::uint64_t seed) {
  Tensor t(static_cast<size_t>(count));
  double scale = 1.0 / std::sqrt(static_cast<double>(std::max<i64>(fan_in, 1)));
  for (i64 i = 0; i < count; ++i)
    t[static_cast<size_t>(i)] =
        static_cast<float>((synth_u01(seed, name, i) * 2.0 - 1.0) * scale);
  return t;
}

Tensor synth_batchnorm(const std::string &name, i64 channels, std::uint64_t seed) {
  Tensor t(static_cast<size_t>(2 * channels));
  for (i64 i = 0; i < channels; ++i) {
    t[static_cast<size_t>(i)] = static_cast<float>(0.5 + synth_u01(seed, name, i));
    t[static_cast<size_t>(channels + i)] =
        static_cast<float>(synth_u01(seed, name, channels + i) - 0.5);
  }
  return t;
}

Tensor synth_input(i64 count, std::uint64_t seed) {
  Tensor t(static_cast<size_t>(count));
  for (i64 i = 0; i < count; ++i)
    t[static_cast<size_t>(i)] = static_cast<float>(synth_u01(seed, "input", i));
  return t;
}

TensorMap synth_plan_weights(const plan::ExecutionPlan &p, const netdef::NetworkGraph &graph,
                             std::uint64_t seed) {
  TensorMap out;
  for (const auto &l : graph.layers) {
    const netdef::Shape &in = graph.shape_of(l.inputs[0]);
    std::string name = "w_" + l.id;
    switch (l.kind) {
      case netdef::LayerKind::Conv2d: {
        i64 fan = in.dims[0] * l.attr("kernel_h") * l.attr("kernel_w");
        out[name] = synth_weights(name, l.attr("filters") * fan, fan, seed);
        break;
      }
      case netdef::LayerKind::DepthwiseConv2d: {
        i64 fan = l.attr("kernel_h") * l.attr("kernel_w");
        out[name] = synth_weights(name, in.dims[0] * fan, fan, seed);
        break;
      }
      case netdef::LayerKind::Dense:
        out[name] = synth_weights(name, l.attr("units") * in.dims[0], in.dims[0], seed);
        break;
      case netdef::LayerKind::BatchNorm:
        out[name] = synth_batchnorm(name, in.dims[0], seed);
        break;
      default:
        break;
    }
  }
  (void)p;
  return out;
}

// ---------------------------------------------------------------------------
// tensor file I/O

void write_tensor(const std::string &path, const Tensor &data, const std::vector<i64> &dims) {
  std::ofstream f(path, std::ios::binary);
  if (!f) fail("IoError", "cannot write '" + path + "'");
  f.write(reinterpret_cast<const char *>(data.data()),
          static_cast<std::streamsize>(data.size() * sizeof(float)));
  std::ofstream s(path + ".shape");
  for (size_t i = 0; i < dims.size(); ++i) s << (i ? " " : "") << dims[i];
  s << "\n";
}

std::pair<Tensor, std::vector<i64>> read_tensor(const std::string &path) {
  std::ifstream s(path + ".shape");
  if (!s) fail("IoError", "cannot read '" + path + ".shape'");
  std::vector<i64> dims;
  i64 d;
  while (s >> d) dims.push_back(d);
  i64 elems = 1;
  for (i64 x : dims) elems *= x;
  std::ifstream f(path, std::ios::binary);
  if (!f) fail("IoError", "cannot read '" + path + "'");
  Tensor t(static_cast<size_t>(elems));
  f.read(reinterpret_cast<char *>(t.data()),
         static_cast<std::streamsize>(t.size() * sizeof(float)));
  if (f.gcount() != static_cast<std::streamsize>(t.size() * sizeof(float)))
    fail("IoError", "'" + path + "' is shorter than its shape sidecar implies");
  return {std::move(t), std::move(dims)};
}

}  // namespace clflow::interp
