#include "clflow/ir.hpp"

#include <algorithm>
#include <set>
#include <sstream>

#include "clflow/error.hpp"

namespace clflow::ir {

i64 Dim::const_value() const {
  if (!is_const()) fail("UnboundSym", "dimension depends on symbol '" + sym + "'");
  return offset / div;
}

i64 Dim::value(const Bindings &b) const {
  if (is_const()) return offset / div;
  auto it = b.find(sym);
  if (it == b.end()) fail("UnboundSym", "no binding for symbol '" + sym + "'");
  i64 raw = scale * it->second + offset;
  if (raw % div != 0)
    fail("NonDivisible", "extent " + std::to_string(raw) + " not divisible by " +
                             std::to_string(div) + " under binding of '" + sym + "'");
  return raw / div;
}

AffineExpr AffineExpr::var(const std::string &name, i64 coeff) {
  AffineExpr e;
  e.add_term(name, coeff);
  return e;
}

AffineExpr &AffineExpr::add_term(const std::string &name, i64 coeff) {
  if (coeff == 0) return *this;
  auto it = std::lower_bound(terms.begin(), terms.end(), name,
                             [](const auto &t, const std::string &n) { return t.first < n; });
  if (it != terms.end() && it->first == name) {
    it->second += coeff;
    if (it->second == 0) terms.erase(it);
  } else {
    terms.insert(it, {name, coeff});
  }
  return *this;
}

AffineExpr AffineExpr::plus(const AffineExpr &other) const {
  AffineExpr r = *this;
  r.constant += other.constant;
  for (const auto &[n, c] : other.terms) r.add_term(n, c);
  return r;
}

AffineExpr AffineExpr::scaled(i64 factor) const {
  AffineExpr r;
  r.constant = constant * factor;
  if (factor != 0)
    for (const auto &[n, c] : terms) r.terms.emplace_back(n, c * factor);
  return r;
}

AffineExpr AffineExpr::substituted(const std::string &name, const AffineExpr &repl) const {
  i64 c = coeff_of(name);
  if (c == 0) return *this;
  AffineExpr r = *this;
  r.terms.erase(std::remove_if(r.terms.begin(), r.terms.end(),
                               [&](const auto &t) { return t.first == name; }),
                r.terms.end());
  return r.plus(repl.scaled(c));
}

i64 AffineExpr::coeff_of(const std::string &name) const {
  for (const auto &[n, c] : terms)
    if (n == name) return c;
  return 0;
}

const BufferDecl *KernelIR::find_buffer(const std::string &name) const {
  for (const auto &b : buffers)
    if (b.name == name) return &b;
  return nullptr;
}

Loop *find_loop(std::vector<Node> &nodes, const std::string &var) {
  for (auto &n : nodes) {
    if (!n.is_loop()) continue;
    if (n.loop().var == var) return &n.loop();
    if (Loop *inner = find_loop(n.loop().body, var)) return inner;
  }
  return nullptr;
}

const Loop *find_loop(const std::vector<Node> &nodes, const std::string &var) {
  return find_loop(const_cast<std::vector<Node> &>(nodes), var);
}

const char *to_string(MemSpace s) {
  switch (s) {
    case MemSpace::Global: return "global";
    case MemSpace::Local: return "local";
    case MemSpace::Register: return "register";
  }
  return "?";
}

const char *to_string(Access a) {
  switch (a) {
    case Access::Read: return "read";
    case Access::Write: return "write";
    case Access::ReadWrite: return "readwrite";
  }
  return "?";
}

const char *to_string(ElemOpKind op) {
  switch (op) {
    case ElemOpKind::Relu: return "relu";
    case ElemOpKind::Relu6: return "relu6";
    case ElemOpKind::BnScaleShift: return "bn_scale_shift";
    case ElemOpKind::Add: return "add";
    case ElemOpKind::Max: return "max";
    case ElemOpKind::Copy: return "copy";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// structural_check

namespace {

struct CheckCtx {
  const KernelIR &k;
  std::vector<Violation> out;
  std::set<std::string> loop_vars_seen;
  std::set<std::string> scope;  // loop vars + params currently visible

  void violation(std::string code, std::string detail) {
    out.push_back({std::move(code), std::move(detail)});
  }

  void check_ref(const BufRef &r, const char *role) {
    const BufferDecl *b = k.find_buffer(r.buffer);
    if (!b) {
      violation("undeclared-buffer",
                "kernel '" + k.id + "' " + role + " references '" + r.buffer + "'");
      return;
    }
    if (r.index.size() != b->shape.size())
      violation("index-arity", "'" + r.buffer + "' has rank " +
                                   std::to_string(b->shape.size()) + ", indexed with " +
                                   std::to_string(r.index.size()));
    for (const auto &e : r.index)
      for (const auto &[var, c] : e.terms)
        if (!scope.contains(var))
          violation("unbound-index-var", "index of '" + r.buffer + "' uses '" + var + "'");
  }

  void check_channel(const std::string &name, bool is_read) {
    const auto &list = is_read ? k.channels_in : k.channels_out;
    if (std::find(list.begin(), list.end(), name) == list.end())
      violation("undeclared-channel",
                "kernel '" + k.id + "' uses channel '" + name + "' not in its endpoint list");
  }

  void walk(const std::vector<Node> &nodes) {
    for (const auto &n : nodes) {
      if (n.is_loop()) {
        const Loop &l = n.loop();
        if (!loop_vars_seen.insert(l.var).second)
          violation("duplicate-loop-var", "'" + l.var + "' in kernel '" + k.id + "'");
        if (l.unroll_full && !l.extent.is_const())
          violation("unroll-symbolic-extent", "loop '" + l.var + "'");
        if (l.extent.is_const() && l.extent.const_value() < 1)
          violation("non-positive-extent", "loop '" + l.var + "'");
        if (!l.extent.is_const() &&
            std::find(k.params.begin(), k.params.end(), l.extent.sym) == k.params.end())
          violation("unknown-extent-sym", "loop '" + l.var + "' extent uses '" + l.extent.sym + "'");
        scope.insert(l.var);
        walk(l.body);
        scope.erase(l.var);
      } else {
        const Stmt &s = n.stmt();
        switch (s.kind) {
          case Stmt::Kind::Store:
          case Stmt::Kind::Mac:
          case Stmt::Kind::ElemOp:
            check_ref(s.dst, "dst");
            break;
          case Stmt::Kind::ChannelRead:
            check_ref(s.dst, "dst");
            check_channel(s.channel, true);
            break;
          case Stmt::Kind::ChannelWrite:
            check_channel(s.channel, false);
            break;
        }
        for (const auto &a : s.args)
          if (!a.is_imm()) check_ref(*a.ref, "arg");
        size_t want = s.kind == Stmt::Kind::Mac ? 2
                      : s.kind == Stmt::Kind::ChannelRead ? 0
                      : s.kind == Stmt::Kind::ElemOp
                          ? (s.op == ElemOpKind::BnScaleShift ? 3
                             : (s.op == ElemOpKind::Add || s.op == ElemOpKind::Max) ? 2
                                                                                    : 1)
                          : 1;
        if (s.args.size() != want)
          violation("arg-arity", "statement in '" + k.id + "' expects " + std::to_string(want) +
                                     " operand(s), has " + std::to_string(s.args.size()));
      }
    }
  }
};

}  // namespace

std::vector<Violation> structural_check(const KernelIR &k) {
  CheckCtx ctx{k, {}, {}, {}};
  for (const auto &p : k.params) ctx.scope.insert(p);

  for (const auto &b : k.buffers) {
    if (b.shape.empty()) ctx.violation("rank-zero-buffer", b.name);
    if (b.space != MemSpace::Global) {
      for (const auto &d : b.shape)
        if (!d.is_const()) {
          ctx.violation("symbolic-onchip-shape",
                        "'" + b.name + "' is " + to_string(b.space) + " with symbolic shape");
          break;
        }
    }
    if (b.space == MemSpace::Register) {
      i64 elems = 1;
      bool cst = true;
      for (const auto &d : b.shape) {
        if (!d.is_const()) { cst = false; break; }
        elems *= d.const_value();
      }
      if (cst && elems > 64)
        ctx.violation("register-too-large", "'" + b.name + "' has " + std::to_string(elems) +
                                                " elements");
    }
    for (const auto &d : b.shape)
      if (!d.is_const() &&
          std::find(k.params.begin(), k.params.end(), d.sym) == k.params.end())
        ctx.violation("unknown-shape-sym", "'" + b.name + "' uses '" + d.sym + "'");
  }

  if (k.autorun) {
    for (const auto &b : k.buffers)
      if (b.space == MemSpace::Global)
        ctx.violation("autorun-with-global",
                      "autorun kernel '" + k.id + "' holds global buffer '" + b.name + "'");
    if (!k.params.empty())
      ctx.violation("autorun-with-params", "autorun kernel '" + k.id + "' takes arguments");
  }

  ctx.walk(k.body);
  return std::move(ctx.out);
}

// ---------------------------------------------------------------------------
// printer

std::string print_dim(const Dim &d) {
  if (d.is_const()) return std::to_string(d.offset / d.div);
  std::string s;
  if (d.scale != 1) s += std::to_string(d.scale) + "*";
  s += d.sym;
  if (d.offset > 0) s += "+" + std::to_string(d.offset);
  if (d.offset < 0) s += std::to_string(d.offset);
  if (d.div != 1) s = "(" + s + ")/" + std::to_string(d.div);
  return s;
}

std::string print_affine(const AffineExpr &e) {
  std::string s;
  for (const auto &[n, c] : e.terms) {
    if (!s.empty()) s += c < 0 ? " - " : " + ";
    else if (c < 0) s += "-";
    i64 a = c < 0 ? -c : c;
    if (a != 1) s += std::to_string(a) + "*";
    s += n;
  }
  if (e.constant != 0 || s.empty()) {
    if (!s.empty()) s += e.constant < 0 ? " - " : " + ";
    else if (e.constant < 0) s += "-";
    s += std::to_string(e.constant < 0 ? -e.constant : e.constant);
  }
  return s;
}

namespace {

std::string print_ref(const BufRef &r) {
  std::string s = r.buffer + "[";
  for (size_t i = 0; i < r.index.size(); ++i) {
    if (i) s += ", ";
    s += print_affine(r.index[i]);
  }
  return s + "]";
}

std::string print_operand(const Operand &o) {
  if (o.is_imm()) {
    std::ostringstream os;
    os << o.imm;
    return os.str();
  }
  return print_ref(*o.ref);
}

void print_nodes(std::ostringstream &os, const std::vector<Node> &nodes, int depth) {
  std::string ind(static_cast<size_t>(depth) * 2, ' ');
  for (const auto &n : nodes) {
    if (n.is_loop()) {
      const Loop &l = n.loop();
      os << ind << "for " << l.var << " in " << print_dim(l.extent);
      if (!l.tag.empty()) os << " [" << l.tag << "]";
      if (l.unroll_full) os << " unroll";
      os << "\n";
      print_nodes(os, l.body, depth + 1);
    } else {
      const Stmt &s = n.stmt();
      os << ind;
      switch (s.kind) {
        case Stmt::Kind::Store:
          os << "store " << print_ref(s.dst) << " <- " << print_operand(s.args[0]);
          break;
        case Stmt::Kind::Mac:
          os << "mac " << print_ref(s.dst) << " += " << print_operand(s.args[0]) << " * "
             << print_operand(s.args[1]);
          break;
        case Stmt::Kind::ElemOp: {
          os << "elemop " << to_string(s.op) << " " << print_ref(s.dst) << " <- (";
          for (size_t i = 0; i < s.args.size(); ++i) {
            if (i) os << ", ";
            os << print_operand(s.args[i]);
          }
          os << ")";
          break;
        }
        case Stmt::Kind::ChannelRead:
          os << "read " << print_ref(s.dst) << " <- channel " << s.channel;
          break;
        case Stmt::Kind::ChannelWrite:
          os << "write channel " << s.channel << " <- " << print_operand(s.args[0]);
          break;
      }
      os << "\n";
    }
  }
}

}  // namespace

std::string print_kernel(const KernelIR &k) {
  std::ostringstream os;
  os << "kernel " << k.id;
  if (!k.params.empty()) {
    os << "(";
    for (size_t i = 0; i < k.params.size(); ++i) os << (i ? ", " : "") << k.params[i];
    os << ")";
  }
  if (k.autorun) os << " autorun";
  os << "\n";
  for (const auto &b : k.buffers) {
    os << "  buffer " << b.name << ": " << to_string(b.space) << " f32 [";
    for (size_t i = 0; i < b.shape.size(); ++i) os << (i ? ", " : "") << print_dim(b.shape[i]);
    os << "] " << to_string(b.access) << "\n";
  }
  for (const auto &c : k.channels_in) os << "  channel_in " << c << "\n";
  for (const auto &c : k.channels_out) os << "  channel_out " << c << "\n";
  print_nodes(os, k.body, 1);
  return os.str();
}

}  // namespace clflow::ir
