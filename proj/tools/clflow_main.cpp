#include <cstdio>

#include <CLI11.hpp>

#include "clflow/driver.hpp"
#include "clflow/error.hpp"

int main(int argc, char **argv) {
  CLI::App app{"clflow: CNN graphs to dataflow-accelerator kernel plans"};
  app.require_subcommand(1);

  clflow::driver::CompileOptions options;
  CLI::App *compile = app.add_subcommand("compile", "compile a model into a kernel plan");
  compile->add_option("model", options.model_path, "model description (JSON)")->required();
  compile->add_option("--device", options.device_path, "device profile (JSON)")->required();
  compile->add_option("--mode", options.mode, "auto|pipelined|folded")->default_val("auto");
  compile->add_flag("--verify", options.verify,
                    "check the optimized plan against the reference interpreter");
  compile->add_option("--seed", options.seed, "seed for synthesized weights and input");
  compile->add_option("--out", options.out_dir, "output directory")->default_val(".");
  compile->add_option("--report", options.report_path, "report path (default <out>/report.json)");
  bool no_of = false;
  compile->add_flag("--no-of", no_of, "disable the relaxed float-operation flags");

  CLI11_PARSE(app, argc, argv);
  options.of_enabled = !no_of;

  try {
    int status = clflow::driver::compile_run(options);
    if (status != 0) std::fprintf(stderr, "clflow: compile failed (see report.json)\n");
    return status;
  } catch (const clflow::Error &e) {
    std::fprintf(stderr, "clflow: %s\n", e.what());
    return 1;
  } catch (const std::exception &e) {
    std::fprintf(stderr, "clflow: internal error: %s\n", e.what());
    return 1;
  }
}
