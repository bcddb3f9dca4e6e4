#include "clflow/emit.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "clflow/error.hpp"

namespace clflow::emit {

using ir::AffineExpr;
using ir::BufferDecl;
using ir::BufRef;
using ir::Dim;
using ir::ElemOpKind;
using ir::KernelIR;
using ir::i64;
using ir::MemSpace;
using ir::Node;
using ir::Operand;
using ir::Stmt;

namespace {

std::string float_literal(float v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  std::string s(buf, end);
  if (s.find('.') == std::string::npos && s.find('e') == std::string::npos &&
      s.find("inf") == std::string::npos && s.find("nan") == std::string::npos)
    s += ".0";
  return s + "f";
}

std::string dim_expr(const Dim &d) {
  if (d.is_const()) return std::to_string(d.offset / d.div);
  std::string s = d.sym;
  if (d.scale != 1) s = std::to_string(d.scale) + " * " + s;
  if (d.offset > 0) s += " + " + std::to_string(d.offset);
  if (d.offset < 0) s += " - " + std::to_string(-d.offset);
  if (d.scale != 1 || d.offset != 0) s = "(" + s + ")";
  if (d.div != 1) s = "(" + s + " / " + std::to_string(d.div) + ")";
  return s;
}

std::string affine_expr(const AffineExpr &e) {
  std::string s;
  for (const auto &[name, coeff] : e.terms) {
    std::string term = coeff == 1 ? name : std::to_string(coeff) + " * " + name;
    if (coeff < 0) term = coeff == -1 ? "-" + name : std::to_string(coeff) + " * " + name;
    if (s.empty())
      s = term;
    else
      s += " + " + term;
  }
  if (e.constant != 0 || s.empty()) {
    if (s.empty())
      s = std::to_string(e.constant);
    else if (e.constant > 0)
      s += " + " + std::to_string(e.constant);
    else
      s += " - " + std::to_string(-e.constant);
  }
  return s;
}

struct KernelPrinter {
  const KernelIR &k;
  std::ostringstream out;
  int depth = 1;

  std::string indent() const { return std::string(static_cast<size_t>(depth) * 2, ' '); }

  bool scalar_register(const std::string &name) const {
    const BufferDecl *b = k.find_buffer(name);
    return b && b->space == MemSpace::Register && b->shape.size() == 1 &&
           b->shape[0].is_const() && b->shape[0].const_value() == 1;
  }

  std::string ref(const BufRef &r) const {
    if (scalar_register(r.buffer)) return r.buffer;
    const BufferDecl *b = k.find_buffer(r.buffer);
    if (!b) fail("InvalidPlan", "emitting reference to undeclared buffer '" + r.buffer + "'");
    std::string flat = affine_expr(r.index[0]);
    for (size_t d = 1; d < r.index.size(); ++d)
      flat = "(" + flat + ") * " + dim_expr(b->shape[d]) + " + " + affine_expr(r.index[d]);
    return r.buffer + "[" + flat + "]";
  }

  std::string operand(const Operand &o) const {
    return o.is_imm() ? float_literal(o.imm) : ref(*o.ref);
  }

  void stmt(const Stmt &s) {
    out << indent();
    switch (s.kind) {
      case Stmt::Kind::Store:
        out << ref(s.dst) << " = " << operand(s.args[0]) << ";";
        break;
      case Stmt::Kind::Mac:
        out << ref(s.dst) << " += " << operand(s.args[0]) << " * " << operand(s.args[1]) << ";";
        break;
      case Stmt::Kind::ElemOp: {
        std::string d = ref(s.dst);
        switch (s.op) {
          case ElemOpKind::Relu:
            out << d << " = fmax(" << operand(s.args[0]) << ", 0.0f);";
            break;
          case ElemOpKind::Relu6:
            out << d << " = fmin(fmax(" << operand(s.args[0]) << ", 0.0f), 6.0f);";
            break;
          case ElemOpKind::BnScaleShift:
            out << d << " = " << operand(s.args[0]) << " * " << operand(s.args[1]) << " + "
                << operand(s.args[2]) << ";";
            break;
          case ElemOpKind::Add:
            out << d << " = " << operand(s.args[0]) << " + " << operand(s.args[1]) << ";";
            break;
          case ElemOpKind::Max:
            out << d << " = fmax(" << operand(s.args[0]) << ", " << operand(s.args[1]) << ");";
            break;
          case ElemOpKind::Copy:
            out << d << " = " << operand(s.args[0]) << ";";
            break;
        }
        break;
      }
      case Stmt::Kind::ChannelRead:
        out << ref(s.dst) << " = read_channel_intel(" << s.channel << ");";
        break;
      case Stmt::Kind::ChannelWrite:
        out << "write_channel_intel(" << s.channel << ", " << operand(s.args[0]) << ");";
        break;
    }
    out << "\n";
  }

  void nodes(const std::vector<Node> &body) {
    for (const auto &n : body) {
      if (!n.is_loop()) {
        stmt(n.stmt());
        continue;
      }
      const ir::Loop &l = n.loop();
      if (l.unroll_full) out << indent() << "#pragma unroll\n";
      out << indent() << "for (int " << l.var << " = 0; " << l.var << " < "
          << dim_expr(l.extent) << "; ++" << l.var << ") {\n";
      ++depth;
      nodes(l.body);
      --depth;
      out << indent() << "}\n";
    }
  }
};

}  // namespace

std::string emit_kernels(const plan::ExecutionPlan &p) {
  std::ostringstream out;
  out << "// " << p.model_name << " kernel program (" << plan::to_string(p.mode) << ")\n";
  out << "// single work-item kernels for the Intel FPGA OpenCL dialect\n\n";
  if (!p.channels.empty()) {
    out << "#pragma OPENCL EXTENSION cl_intel_channels : enable\n\n";
    for (const auto &ch : p.channels)
      out << "channel float " << ch.name << " __attribute__((depth(" << ch.depth_elems
          << ")));\n";
    out << "\n";
  }

  for (const auto &k : p.kernels) {
    out << "__attribute__((max_global_work_dim(0)))\n";
    if (k.autorun) out << "__attribute__((autorun))\n";
    out << "__kernel void " << k.id << "(";
    bool first = true;
    for (const auto &param : k.params) {
      out << (first ? "" : ", ") << "int " << param;
      first = false;
    }
    for (const auto &b : k.buffers) {
      if (b.space != MemSpace::Global) continue;
      out << (first ? "" : ", ") << "__global "
          << (b.access == ir::Access::Read ? "const float *restrict " : "float *restrict ")
          << b.name;
      first = false;
    }
    out << ") {\n";

    for (const auto &b : k.buffers) {
      if (b.space == MemSpace::Global) continue;
      i64 elems = 1;
      for (const auto &d : b.shape) elems *= d.const_value();
      if (b.space == MemSpace::Local)
        out << "  __local float " << b.name << "[" << elems << "];\n";
      else if (elems == 1)
        out << "  float " << b.name << ";\n";
      else
        out << "  float " << b.name << "[" << elems << "];\n";
    }

    KernelPrinter printer{k, {}, k.autorun ? 2 : 1};
    printer.nodes(k.body);
    if (k.autorun) {
      out << "  while (1) {\n" << printer.out.str() << "  }\n";
    } else {
      out << printer.out.str();
    }
    out << "}\n\n";
  }
  return out.str();
}

std::string emit_host_plan(const plan::ExecutionPlan &p) {
  nlohmann::ordered_json doc;
  doc["format_version"] = 1;
  doc["model"] = p.model_name;
  doc["mode"] = plan::to_string(p.mode);

  nlohmann::ordered_json buffers = nlohmann::ordered_json::array();
  for (const auto &b : p.global_buffers) {
    nlohmann::ordered_json jb;
    jb["name"] = b.name;
    jb["elems"] = b.elems;
    jb["bytes"] = b.elems * 4;
    jb["role"] = b.role;
    buffers.push_back(std::move(jb));
  }
  doc["buffers"] = std::move(buffers);

  std::map<int, std::vector<std::string>> by_queue;
  for (const auto &[kernel, queue] : p.queues) by_queue[queue].push_back(kernel);
  nlohmann::ordered_json queues = nlohmann::ordered_json::array();
  for (auto &[index, kernels] : by_queue) {
    std::sort(kernels.begin(), kernels.end());
    nlohmann::ordered_json jq;
    jq["index"] = index;
    jq["kernels"] = kernels;
    queues.push_back(std::move(jq));
  }
  doc["queues"] = std::move(queues);

  nlohmann::ordered_json channels = nlohmann::ordered_json::array();
  for (const auto &ch : p.channels) {
    nlohmann::ordered_json jc;
    jc["name"] = ch.name;
    jc["depth_elems"] = ch.depth_elems;
    jc["depth_bytes"] = ch.depth_elems * 4;
    jc["producer"] = ch.producer;
    jc["consumer"] = ch.consumer;
    channels.push_back(std::move(jc));
  }
  doc["channels"] = std::move(channels);

  nlohmann::ordered_json invocations = nlohmann::ordered_json::array();
  for (const auto &inv : p.invocations) {
    nlohmann::ordered_json ji;
    ji["kernel"] = inv.kernel_id;
    ji["bindings"] = inv.bindings;
    ji["buffers"] = inv.buffer_map;
    ji["layers"] = inv.layers;
    invocations.push_back(std::move(ji));
  }
  doc["invocations"] = std::move(invocations);

  doc["synchronization"] =
      p.mode == plan::Mode::Pipelined
          ? "kernels synchronize through blocking channels; each queued kernel launches "
            "concurrently and autorun kernels need no launch"
          : "single in-order queue; invocations execute sequentially through global memory";
  return doc.dump(2) + "\n";
}

std::vector<std::string> build_flags(const plan::ExecutionPlan &p) {
  if (!p.of_enabled) return {};
  return {"-fp-relaxed", "-fpc"};
}

// ---------------------------------------------------------------------------
// grammar smoke-check

namespace {

bool ident_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_'; }

const std::set<std::string> &keywords() {
  static const std::set<std::string> kw{
      "for",     "while",   "int",       "float",   "void",     "const",   "if",
      "else",    "return",  "__kernel",  "__global", "__local", "restrict", "channel",
      "__attribute__", "autorun", "depth", "max_global_work_dim", "fmax", "fmin",
      "read_channel_intel", "write_channel_intel", "pragma", "unroll", "OPENCL",
      "EXTENSION", "cl_intel_channels", "enable", "f", "e"};
  return kw;
}

}  // namespace

std::vector<std::string> grammar_check(const std::string &source) {
  std::vector<std::string> violations;

  // bracket balance
  std::vector<char> stack;
  for (char c : source) {
    if (c == '(' || c == '[' || c == '{') stack.push_back(c);
    if (c == ')' || c == ']' || c == '}') {
      char want = c == ')' ? '(' : c == ']' ? '[' : '{';
      if (stack.empty() || stack.back() != want) {
        violations.push_back("unbalanced brackets");
        break;
      }
      stack.pop_back();
    }
  }
  if (!stack.empty()) violations.push_back("unclosed brackets");

  // tokenize line-wise, tracking channel declarations and kernel scopes
  std::set<std::string> channels, kernels;
  std::istringstream lines(source);
  std::string line;
  std::set<std::string> scope;  // identifiers declared in the current kernel
  bool in_kernel = false;
  int brace_depth = 0;

  auto tokens_of = [](const std::string &s) {
    std::vector<std::string> toks;
    size_t i = 0;
    while (i < s.size()) {
      if (std::isalpha(static_cast<unsigned char>(s[i])) || s[i] == '_') {
        size_t j = i;
        while (j < s.size() && ident_char(s[j])) ++j;
        toks.push_back(s.substr(i, j - i));
        i = j;
      } else if (std::isdigit(static_cast<unsigned char>(s[i]))) {
        size_t j = i;
        while (j < s.size() && (ident_char(s[j]) || s[j] == '.' || s[j] == '+' || s[j] == '-')) {
          if ((s[j] == '+' || s[j] == '-') && j > i && (s[j - 1] != 'e' && s[j - 1] != 'E'))
            break;
          ++j;
        }
        i = j;  // skip numeric literal (incl. suffix)
      } else {
        ++i;
      }
    }
    return toks;
  };

  while (std::getline(lines, line)) {
    if (line.rfind("//", 0) == 0 || line.rfind("#pragma", 0) == 0) continue;
    auto toks = tokens_of(line);
    if (toks.size() >= 3 && toks[0] == "channel" && toks[1] == "float") {
      channels.insert(toks[2]);
      continue;
    }
    for (size_t i = 0; i + 2 < toks.size(); ++i)
      if (toks[i] == "__kernel" && toks[i + 1] == "void") {
        if (!kernels.insert(toks[i + 2]).second)
          violations.push_back("duplicate kernel name '" + toks[i + 2] + "'");
        in_kernel = true;
        scope.clear();
        scope.insert(channels.begin(), channels.end());
      }
    if (in_kernel) {
      // declarations on this line: parameters, buffer args, locals, loop vars
      for (size_t i = 0; i + 1 < toks.size(); ++i) {
        if ((toks[i] == "int" || toks[i] == "float" || toks[i] == "restrict" ||
             toks[i] == "__local") &&
            !keywords().contains(toks[i + 1]))
          scope.insert(toks[i + 1]);
        if (toks[i] == "__local" && i + 2 < toks.size()) scope.insert(toks[i + 2]);
      }
      for (const auto &t : toks)
        if (!keywords().contains(t) && !scope.contains(t) && !channels.contains(t) &&
            !kernels.contains(t))
          violations.push_back("undeclared identifier '" + t + "'");
    }
    for (char c : line) {
      if (c == '{') ++brace_depth;
      if (c == '}') {
        --brace_depth;
        if (brace_depth == 0) in_kernel = false;
      }
    }
  }

  // channel ops reference declared channels; every channel is used both ways
  size_t pos = 0;
  auto scan_ops = [&](const std::string &fn, std::set<std::string> &used) {
    pos = 0;
    while ((pos = source.find(fn, pos)) != std::string::npos) {
      size_t open = source.find('(', pos);
      if (open == std::string::npos) break;
      size_t start = open + 1;
      size_t end = start;
      while (end < source.size() && ident_char(source[end])) ++end;
      std::string name = source.substr(start, end - start);
      if (!channels.contains(name))
        violations.push_back(fn + " on undeclared channel '" + name + "'");
      used.insert(name);
      pos = end;
    }
  };
  std::set<std::string> read_channels, written_channels;
  scan_ops("read_channel_intel", read_channels);
  scan_ops("write_channel_intel", written_channels);
  for (const auto &ch : channels) {
    if (!read_channels.contains(ch)) violations.push_back("channel '" + ch + "' is never read");
    if (!written_channels.contains(ch))
      violations.push_back("channel '" + ch + "' is never written");
  }
  return violations;
}

}  // namespace clflow::emit
