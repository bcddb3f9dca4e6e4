"""clflow: compile CNN inference graphs into dataflow-accelerator kernel plans.

Thin wrapper over the C++ core. Structured results cross the boundary as
JSON and come back as plain dicts here.
"""

import json

try:
    from . import _core  # installed wheel layout
except ImportError:  # pragma: no cover - in-tree test layout
    import _core

CompileError = _core.CompileError
__version__ = _core.__version__


def count_flops(model_text):
    """FLOP/MAC accounting of a model document: totals, per-layer counts and
    per-(kind, kernel, stride) MAC shares."""
    return json.loads(_core.count_flops(model_text))

def infer_shapes(model_text):
    """Per-layer output shapes of a model document."""
    return json.loads(_core.infer_shapes(model_text))

def flop_share(model_text, kind, kernel_h, kernel_w, stride):
    return _core.flop_share(model_text, kind, kernel_h, kernel_w, stride)

def bandwidth_cap_factor(device_text, elem_bytes=4):
    return _core.bandwidth_cap_factor(device_text, elem_bytes)

def emit_kernels(model_text, device_text, mode="auto"):
    """Plan and emit OpenCL kernel source without touching the filesystem."""
    return _core.emit_kernels(model_text, device_text, mode)

def reference_output(model_text, seed=0):
    """Output of the unoptimized folded reference plan on synthesized data."""
    return _core.reference_output(model_text, seed)

def compile_model(model_path, device_path, mode="auto", verify=False, seed=0,
                  out_dir=".", of_enabled=True):
    """Run the full pipeline and load the written report.

    Returns (exit_status, report_dict).
    """
    status = _core.compile_model(model_path, device_path, mode, verify, seed,
                                 out_dir, of_enabled)
    with open(f"{out_dir}/report.json") as f:
        report = json.load(f)
    return status, report
