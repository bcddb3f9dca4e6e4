#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <nlohmann/json.hpp>

#include "clflow/costmodel.hpp"
#include "clflow/driver.hpp"
#include "clflow/emit.hpp"
#include "clflow/error.hpp"
#include "clflow/interp.hpp"
#include "clflow/netdef.hpp"
#include "clflow/plan.hpp"

namespace py = pybind11;
using namespace clflow;
using nlohmann::ordered_json;

namespace {

std::string flops_json(const std::string &model_text) {
  auto graph = netdef::parse_network(model_text);
  auto report = netdef::count_flops(graph);
  ordered_json doc;
  doc["total_flops"] = report.total_flops;
  doc["total_macs"] = report.total_macs;
  ordered_json per_layer = ordered_json::object();
  for (const auto &[id, f] : report.per_layer)
    per_layer[id] = {{"macs", f.macs}, {"flops", f.flops}};
  doc["per_layer"] = std::move(per_layer);
  ordered_json shares = ordered_json::object();
  for (const auto &[key, share] : report.share_by_key) {
    const auto &[kind, kh, kw, stride] = key;
    shares[std::string(netdef::to_string(kind)) + "/" + std::to_string(kh) + "x" +
           std::to_string(kw) + "/s" + std::to_string(stride)] = share;
  }
  doc["share_by_key"] = std::move(shares);
  return doc.dump();
}

std::string shapes_json(const std::string &model_text) {
  auto graph = netdef::parse_network(model_text);
  ordered_json doc = ordered_json::object();
  for (const auto &l : graph.layers) doc[l.id] = graph.shape_of(l.id).dims;
  return doc.dump();
}

double share_of(const std::string &model_text, const std::string &kind, ir::i64 kh, ir::i64 kw,
                ir::i64 stride) {
  auto graph = netdef::parse_network(model_text);
  auto k = netdef::layer_kind_from(kind);
  if (!k) fail("UnknownKind", "unknown layer kind '" + kind + "'");
  return netdef::flop_share(graph, {*k, kh, kw, stride});
}

int compile_model(const std::string &model_path, const std::string &device_path,
                  const std::string &mode, bool verify, std::uint64_t seed,
                  const std::string &out_dir, bool of_enabled) {
  driver::CompileOptions opts;
  opts.model_path = model_path;
  opts.device_path = device_path;
  opts.mode = mode;
  opts.verify = verify;
  opts.seed = seed;
  opts.out_dir = out_dir;
  opts.of_enabled = of_enabled;
  return driver::compile_run(opts);
}

std::string emit_for(const std::string &model_text, const std::string &device_text,
                     const std::string &mode) {
  auto graph = netdef::parse_network(model_text);
  auto device = cost::parse_device_profile(device_text);
  auto p = plan::build_plan(graph, device, mode);
  return emit::emit_kernels(p);
}

std::vector<float> reference_output(const std::string &model_text, std::uint64_t seed) {
  auto graph = netdef::parse_network(model_text);
  auto reference = plan::reference_plan(graph);
  interp::TensorMap inputs = interp::synth_plan_weights(reference, graph, seed);
  inputs["fm_input"] = interp::synth_input(graph.input_shape.elems(), seed);
  auto run = interp::interpret_plan(reference, inputs);
  return run.tensors.at(reference.output_buffer);
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "clflow: CNN graphs to dataflow-accelerator kernel plans";

  py::register_exception<Error>(m, "CompileError");

  m.def("count_flops", &flops_json, py::arg("model_text"),
        "FLOP/MAC accounting of a model document as a JSON string");
  m.def("infer_shapes", &shapes_json, py::arg("model_text"),
        "per-layer output shapes of a model document as a JSON string");
  m.def("flop_share", &share_of, py::arg("model_text"), py::arg("kind"), py::arg("kernel_h"),
        py::arg("kernel_w"), py::arg("stride"),
        "MAC share of layers matching (kind, kernel_h, kernel_w, stride)");
  m.def("bandwidth_cap_factor",
        [](const std::string &device_text, ir::i64 elem_bytes) {
          return cost::bandwidth_cap_factor(cost::parse_device_profile(device_text), elem_bytes);
        },
        py::arg("device_text"), py::arg("elem_bytes"),
        "largest unroll factor the external memory interface can feed per cycle");
  m.def("compile_model", &compile_model, py::arg("model_path"), py::arg("device_path"),
        py::arg("mode") = "auto", py::arg("verify") = false, py::arg("seed") = 0,
        py::arg("out_dir") = ".", py::arg("of_enabled") = true,
        "run the full pipeline; writes kernels.cl, host_plan.json, report.json, "
        "build_flags.txt and returns the exit status");
  m.def("emit_kernels", &emit_for, py::arg("model_text"), py::arg("device_text"),
        py::arg("mode") = "auto", "plan and emit kernel source without touching the filesystem");
  m.def("reference_output", &reference_output, py::arg("model_text"), py::arg("seed") = 0,
        "output tensor of the unoptimized folded reference plan on synthesized data");

  m.attr("__version__") = "0.1.0";
}
