#ifndef CLFLOW_IR_HPP
#define CLFLOW_IR_HPP

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace clflow::ir {

using i64 = std::int64_t;

/// Scalar parameter bindings for a kernel invocation (symbol name -> value).
using Bindings = std::map<std::string, i64>;

/// A loop extent or buffer dimension: (scale * sym + offset) / div.
/// A constant is encoded with an empty symbol name. `div` only appears on
/// outer extents produced by tiling a symbolic loop; the division must be
/// exact under every binding (checked at bind time).
struct Dim {
  std::string sym;
  i64 scale = 0;
  i64 offset = 0;
  i64 div = 1;

  static Dim constant(i64 n) { return Dim{"", 0, n, 1}; }
  static Dim symbol(std::string name, i64 scale = 1, i64 offset = 0) {
    return Dim{std::move(name), scale, offset, 1};
  }

  bool is_const() const { return sym.empty(); }
  i64 const_value() const;           // throws UnboundSym when symbolic
  i64 value(const Bindings &b) const;
  bool operator==(const Dim &) const = default;
};

/// Affine form c0 + sum(coeff_i * var_i); vars are loop variables or
/// kernel parameters. Terms are kept sorted by variable name.
struct AffineExpr {
  i64 constant = 0;
  std::vector<std::pair<std::string, i64>> terms;

  static AffineExpr c(i64 n) { return AffineExpr{n, {}}; }
  static AffineExpr var(const std::string &name, i64 coeff = 1);

  AffineExpr &add_term(const std::string &name, i64 coeff);
  AffineExpr plus(const AffineExpr &other) const;
  AffineExpr scaled(i64 factor) const;
  /// Replace every occurrence of `name` with `repl` (used by strip mining).
  AffineExpr substituted(const std::string &name, const AffineExpr &repl) const;
  i64 coeff_of(const std::string &name) const;
  bool references(const std::string &name) const { return coeff_of(name) != 0; }
  bool operator==(const AffineExpr &) const = default;
};

enum class MemSpace { Global, Local, Register };
enum class Access { Read, Write, ReadWrite };

struct BufferDecl {
  std::string name;
  MemSpace space = MemSpace::Global;
  std::vector<Dim> shape;  // element type is always f32
  Access access = Access::ReadWrite;
  bool operator==(const BufferDecl &) const = default;
};

/// One f32 FIFO between exactly one producer and one consumer kernel.
struct ChannelDecl {
  std::string name;
  i64 depth_elems = 1;
  std::string producer;
  std::string consumer;
  bool operator==(const ChannelDecl &) const = default;
};

/// Reference to one element of a declared buffer; one affine index per dim.
struct BufRef {
  std::string buffer;
  std::vector<AffineExpr> index;
  bool operator==(const BufRef &) const = default;
};

/// Statement operand: a buffer element or an f32 immediate.
struct Operand {
  std::optional<BufRef> ref;
  float imm = 0.0f;

  static Operand immediate(float v) { return Operand{std::nullopt, v}; }
  static Operand of(BufRef r) { return Operand{std::move(r), 0.0f}; }
  bool is_imm() const { return !ref.has_value(); }
  bool operator==(const Operand &) const = default;
};

enum class ElemOpKind { Relu, Relu6, BnScaleShift, Add, Max, Copy };

struct Stmt {
  enum class Kind {
    Store,         // dst = args[0]
    Mac,           // dst = dst + args[0] * args[1]
    ElemOp,        // dst = op(args...); BnScaleShift: a0 * a1 + a2
    ChannelRead,   // dst = pop(channel)
    ChannelWrite,  // push(channel, args[0])
  };
  Kind kind = Kind::Store;
  BufRef dst;                   // unused for ChannelWrite
  std::vector<Operand> args;
  ElemOpKind op = ElemOpKind::Copy;
  std::string channel;
  bool operator==(const Stmt &) const = default;
};

struct Node;

struct Loop {
  std::string var;
  Dim extent;
  bool unroll_full = false;
  /// Role tag from lowering ("filter", "reduce", "window", ...); the factor
  /// sweep and tile validation key off it.
  std::string tag;
  std::vector<Node> body;
  bool operator==(const Loop &) const = default;
};

struct Node {
  std::variant<Loop, Stmt> v;
  Node() = default;
  Node(Loop l) : v(std::move(l)) {}
  Node(Stmt s) : v(std::move(s)) {}
  bool is_loop() const { return std::holds_alternative<Loop>(v); }
  Loop &loop() { return std::get<Loop>(v); }
  const Loop &loop() const { return std::get<Loop>(v); }
  Stmt &stmt() { return std::get<Stmt>(v); }
  const Stmt &stmt() const { return std::get<Stmt>(v); }
  bool operator==(const Node &) const = default;
};

/// A single-work-item kernel: an ordered list of top-level stages, each a
/// loop nest or statement. Execution semantics are strictly sequential; Mac
/// accumulation order is the loop order.
struct KernelIR {
  std::string id;
  std::vector<std::string> params;      // scalar i64 arguments (symbol names)
  std::vector<BufferDecl> buffers;
  std::vector<std::string> channels_in;
  std::vector<std::string> channels_out;
  std::vector<Node> body;
  bool autorun = false;

  const BufferDecl *find_buffer(const std::string &name) const;
  bool operator==(const KernelIR &) const = default;
};

struct Violation {
  std::string code;
  std::string detail;
};

/// Kernel-level invariant checks: declared references, unique loop vars,
/// const extents under unroll, const Local/Register shapes, autorun rules.
/// Returns the violation list instead of throwing.
std::vector<Violation> structural_check(const KernelIR &k);

/// Stable text dump used by golden-file tests.
std::string print_kernel(const KernelIR &k);
std::string print_affine(const AffineExpr &e);
std::string print_dim(const Dim &d);

const char *to_string(MemSpace s);
const char *to_string(Access a);
const char *to_string(ElemOpKind op);

// --- small helpers used across modules ---

/// Visit every statement in a body (pre-order).
template <typename F>
void for_each_stmt(std::vector<Node> &nodes, F &&f) {
  for (auto &n : nodes) {
    if (n.is_loop()) {
      for_each_stmt(n.loop().body, f);
    } else {
      f(n.stmt());
    }
  }
}

template <typename F>
void for_each_stmt(const std::vector<Node> &nodes, F &&f) {
  for (const auto &n : nodes) {
    if (n.is_loop()) {
      for_each_stmt(n.loop().body, f);
    } else {
      f(n.stmt());
    }
  }
}

Loop *find_loop(std::vector<Node> &nodes, const std::string &var);
const Loop *find_loop(const std::vector<Node> &nodes, const std::string &var);

}  // namespace clflow::ir

#endif
