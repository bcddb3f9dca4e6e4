import os
import sys

# In-tree layout: the compiled _core module lives in the build directory and
# the wrapper package under python/.
module_dir = os.environ.get("CLFLOW_MODULE_DIR")
if module_dir:
    sys.path.insert(0, module_dir)
source_dir = os.environ.get("CLFLOW_SOURCE_DIR")
if source_dir:
    sys.path.insert(0, os.path.join(source_dir, "python"))
