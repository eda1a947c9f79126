import os
import sys

# When run from the CMake tree, the package lives under <build>/python rather
# than in site-packages; make it importable either way.
py_dir = os.environ.get("MOEKIT_PY_DIR")
if py_dir:
    sys.path.insert(0, py_dir)
