"""Kernel backend selection.

The hot kernels (conv2d forward/backward) exist twice: a compiled Cython
extension (``soi._kernels._native``) and a pure-numpy fallback
(``soi._kernels.pykernels``).  The backend is chosen once at import:

* ``SOI_KERNELS=native``  require the compiled extension, fail if missing
* ``SOI_KERNELS=python``  force the fallback
* ``SOI_KERNELS=auto``    (default) native if importable, else fallback

Both backends are deterministic run-to-run; they are not bitwise identical
to each other (different summation orders), so a process must not switch
backends mid-run.  ``benchmarks/bench_kernels.py`` compares their speed.
"""

import importlib
import os

from soi._kernels import pykernels


def _try_native():
    try:
        return importlib.import_module("soi._kernels._native")
    except ImportError:
        return None


_requested = os.environ.get("SOI_KERNELS", "auto").lower()
if _requested == "python":
    _active = pykernels
elif _requested == "native":
    _active = importlib.import_module("soi._kernels._native")
elif _requested == "auto":
    _active = _try_native() or pykernels
else:
    raise ValueError(f"SOI_KERNELS must be auto|native|python, got {_requested!r}")

BACKEND = _active.NAME

conv2d_forward = _active.conv2d_forward
conv2d_backward = _active.conv2d_backward
maxpool2d_forward = _active.maxpool2d_forward
maxpool2d_backward = _active.maxpool2d_backward
avgpool2d_forward = _active.avgpool2d_forward
avgpool2d_backward = _active.avgpool2d_backward


def available_backends():
    """Names of importable backends (for tests and the benchmark)."""
    names = ["python"]
    if _try_native() is not None:
        names.insert(0, "native")
    return names


def get_backend(name):
    """Return the backend module by name ('native' or 'python')."""
    if name == "python":
        return pykernels
    if name == "native":
        return importlib.import_module("soi._kernels._native")
    raise ValueError(f"unknown kernel backend {name!r}")
