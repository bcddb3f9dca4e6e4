#include "clflow/driver.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "clflow/emit.hpp"
#include "clflow/error.hpp"
#include "clflow/interp.hpp"

namespace clflow::driver {

namespace fs = std::filesystem;
using ir::i64;
using nlohmann::ordered_json;

namespace {

std::string read_file(const std::string &path) {
  std::ifstream f(path);
  if (!f) fail("IoError", "cannot read '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_file(const std::string &path, const std::string &content) {
  std::ofstream f(path, std::ios::binary);
  if (!f) fail("IoError", "cannot write '" + path + "'");
  f << content;
}

std::string key_string(const netdef::FlopKey &key) {
  const auto &[kind, kh, kw, stride] = key;
  return std::string(netdef::to_string(kind)) + "/" + std::to_string(kh) + "x" +
         std::to_string(kw) + "/s" + std::to_string(stride);
}

std::vector<std::string> applied_optimizations(const plan::ExecutionPlan &p) {
  std::vector<std::string> applied;
  bool fused = false, cached = false, parameterized = false, tiled = false;
  for (const auto &m : p.metas) fused |= !m.post_ops.empty();
  for (const auto &k : p.kernels) {
    parameterized |= !k.params.empty();
    for (const auto &b : k.buffers) cached |= b.space == ir::MemSpace::Register;
  }
  std::set<std::string> filter_factored;
  for (const auto &f : p.factors) {
    const ir::Loop *l = nullptr;
    if (const ir::KernelIR *k = p.find_kernel(f.kernel_id))
      l = ir::find_loop(k->body, f.loop_var + "_o") ? ir::find_loop(k->body, f.loop_var + "_o")
                                                    : ir::find_loop(k->body, f.loop_var);
    if (l && l->tag == "filter" && f.chosen > 1) tiled = true;
  }

  if (parameterized) applied.push_back("PK");
  if (!p.factors.empty()) applied.push_back("LU");
  if (p.mode == plan::Mode::Folded && tiled) applied.push_back("LT");
  if (fused) applied.push_back("LF");
  if (cached) applied.push_back("CW");
  if (p.of_enabled) applied.push_back("OF");
  if (!p.channels.empty()) applied.push_back("CH");
  for (const auto &k : p.kernels)
    if (k.autorun) {
      applied.push_back("AR");
      break;
    }
  if (p.mode == plan::Mode::Pipelined && p.queues.size() > 1) applied.push_back("CE");
  return applied;
}

netdef::NetworkGraph reduce_input(const netdef::NetworkGraph &graph, i64 spatial) {
  netdef::NetworkGraph g = graph;
  g.input_shape.dims[1] = spatial;
  g.input_shape.dims[2] = spatial;
  g.shapes = netdef::infer_shapes(g);
  return g;
}

}  // namespace

double max_rel_err(const std::vector<float> &a, const std::vector<float> &b) {
  if (a.size() != b.size()) return std::numeric_limits<double>::infinity();
  double worst = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    double x = a[i], y = b[i];
    double diff = std::abs(x - y);
    if (diff == 0.0) continue;
    double mag = std::max(std::abs(x), std::abs(y));
    worst = std::max(worst, mag == 0.0 ? std::numeric_limits<double>::infinity() : diff / mag);
  }
  return worst;
}

VerifyOutcome verify_against_reference(const netdef::NetworkGraph &graph,
                                       const cost::DeviceProfile &device,
                                       const plan::ExecutionPlan &full_plan,
                                       std::uint64_t seed_first, int seed_count) {
  VerifyOutcome outcome;
  outcome.run = true;

  // Interpreting large models at full resolution is slow; verification runs
  // on a spatially reduced copy with the same mode.
  netdef::NetworkGraph g = graph;
  if (graph.input_shape.dims[1] > 64 || graph.input_shape.dims[2] > 64) g = reduce_input(graph, 32);
  outcome.input_shape = g.input_shape.dims;

  plan::ExecutionPlan optimized =
      plan::build_plan(g, device, plan::to_string(full_plan.mode), full_plan.of_enabled);
  plan::ExecutionPlan reference = plan::reference_plan(g);
  double tol = full_plan.of_enabled ? 1e-4 : 0.0;

  for (int s = 0; s < seed_count; ++s) {
    std::uint64_t seed = seed_first + static_cast<std::uint64_t>(s);
    outcome.seeds.push_back(seed);
    interp::TensorMap inputs = interp::synth_plan_weights(optimized, g, seed);
    inputs["fm_input"] = interp::synth_input(g.input_shape.elems(), seed);

    auto ref = interp::interpret_plan(reference, inputs);
    auto opt = interp::interpret_plan(optimized, inputs);
    const auto &expect = ref.tensors.at(reference.output_buffer);
    const auto &got = opt.tensors.at(optimized.output_buffer);
    double err = max_rel_err(expect, got);
    outcome.max_rel_err = std::max(outcome.max_rel_err, err);
    if (err > tol) outcome.passed = false;
  }
  return outcome;
}

int compile_run(const CompileOptions &options) {
  fs::create_directories(options.out_dir);
  std::string report_path = options.report_path.empty()
                                ? (fs::path(options.out_dir) / "report.json").string()
                                : options.report_path;
  ordered_json report;
  report["format_version"] = 1;

  try {
    std::string model_text = read_file(options.model_path);
    cost::DeviceProfile device = cost::load_device_profile(options.device_path);
    netdef::NetworkGraph graph = netdef::parse_network(model_text);

    report["model"] = {{"name", graph.name},
                       {"path", options.model_path},
                       {"layers", graph.layers.size()}};
    report["device"] = {{"name", device.name}, {"path", options.device_path}};

    plan::ExecutionPlan p = plan::build_plan(graph, device, options.mode, options.of_enabled);
    auto violations = plan::structural_check(p);
    if (!violations.empty()) {
      std::string detail;
      for (const auto &v : violations) detail += v.code + " (" + v.detail + "); ";
      fail("InvalidPlan", "plan failed structural checks: " + detail);
    }

    netdef::FlopReport flops = netdef::count_flops(graph);
    cost::ResourceEstimate resources = cost::estimate_resources(p, device);
    cost::FitReport fit = cost::fits(resources, device);
    cost::ThroughputEstimate throughput = cost::estimate_throughput(p, device);

    report["mode"] = {{"selected", plan::to_string(p.mode)},
                      {"override", options.mode},
                      {"rationale",
                       {{"required_bits", p.rationale.required_bits},
                        {"budget_bits", p.rationale.budget_bits},
                        {"detail", p.rationale.detail}}}};
    report["optimizations"] = {{"applied", applied_optimizations(p)}};

    ordered_json per_layer = ordered_json::object();
    for (const auto &l : graph.layers) {
      const auto &f = flops.per_layer.at(l.id);
      per_layer[l.id] = {{"macs", f.macs}, {"flops", f.flops}};
    }
    ordered_json shares = ordered_json::object();
    for (const auto &[key, share] : flops.share_by_key) shares[key_string(key)] = share;
    report["flops"] = {{"total_flops", flops.total_flops},
                       {"total_macs", flops.total_macs},
                       {"per_layer", std::move(per_layer)},
                       {"share_by_key", std::move(shares)}};

    ordered_json factors = ordered_json::array();
    for (const auto &f : p.factors)
      factors.push_back({{"kernel", f.kernel_id},
                         {"loop", f.loop_var},
                         {"candidates", f.candidates},
                         {"chosen", f.chosen},
                         {"limiting", f.limiting}});
    report["factors"] = std::move(factors);

    ordered_json lsus = ordered_json::array();
    for (const auto &l : resources.lsus)
      lsus.push_back({{"kernel", l.kernel_id},
                      {"buffer", l.buffer},
                      {"kind", cost::to_string(l.kind)},
                      {"width_bytes", l.width_bytes},
                      {"replication", l.replication}});
    ordered_json per_kernel = ordered_json::array();
    for (const auto &u : resources.per_kernel)
      per_kernel.push_back({{"kernel", u.kernel_id},
                            {"dsps", u.dsps},
                            {"bram_bits", u.bram_bits},
                            {"aluts", u.aluts},
                            {"loops", u.loops},
                            {"lsu_replication", u.lsu_replication}});
    report["resources"] = {{"dsps", resources.dsps},
                           {"bram_bits", resources.bram_bits},
                           {"aluts", resources.aluts},
                           {"fits", fit.ok},
                           {"margins", fit.margins},
                           {"lsus", std::move(lsus)},
                           {"per_kernel", std::move(per_kernel)}};

    ordered_json cycles = ordered_json::array();
    for (const auto &[kernel, n] : throughput.per_kernel_cycles)
      cycles.push_back({{"kernel", kernel}, {"cycles", n}});
    report["throughput"] = {{"plan_cycles", throughput.plan_cycles},
                            {"fps", throughput.fps},
                            {"per_kernel_cycles", std::move(cycles)}};

    ordered_json channels = ordered_json::array();
    for (const auto &ch : p.channels)
      channels.push_back({{"name", ch.name},
                          {"depth_elems", ch.depth_elems},
                          {"depth_bytes", ch.depth_elems * 4},
                          {"producer", ch.producer},
                          {"consumer", ch.consumer}});
    report["channels"] = std::move(channels);
    report["queues"] = p.queues;

    std::vector<std::string> flags = emit::build_flags(p);
    report["build_flags"] = flags;

    int exit_code = 0;
    if (options.verify) {
      VerifyOutcome v = verify_against_reference(graph, device, p, options.seed, 1);
      report["verify"] = {{"run", true},
                          {"passed", v.passed},
                          {"input_shape", v.input_shape},
                          {"seeds", v.seeds},
                          {"max_rel_err", v.max_rel_err},
                          {"tolerance", p.of_enabled ? 1e-4 : 0.0}};
      if (!v.passed) exit_code = 2;
    } else {
      report["verify"] = {{"run", false}};
    }

    std::string source = emit::emit_kernels(p);
    auto grammar = emit::grammar_check(source);
    if (!grammar.empty()) {
      std::string detail;
      for (const auto &g : grammar) detail += g + "; ";
      fail("InvalidPlan", "emitted source failed the grammar smoke-check: " + detail);
    }

    write_file((fs::path(options.out_dir) / "kernels.cl").string(), source);
    write_file((fs::path(options.out_dir) / "host_plan.json").string(), emit::emit_host_plan(p));
    std::string flags_text;
    for (const auto &f : flags) flags_text += f + "\n";
    write_file((fs::path(options.out_dir) / "build_flags.txt").string(), flags_text);
    write_file(report_path, report.dump(2) + "\n");
    if (!options.report_path.empty() && report_path != (fs::path(options.out_dir) / "report.json").string())
      write_file((fs::path(options.out_dir) / "report.json").string(), report.dump(2) + "\n");
    return exit_code;
  } catch (const Error &e) {
    report["error"] = {{"code", e.code()}, {"message", e.what()}};
    write_file(report_path, report.dump(2) + "\n");
    return 1;
  }
}

}  // namespace clflow::driver
