"""Hot array kernels with a compiled fast path.

The Cython extension `_speedups` is used when importable; otherwise the
pure-numpy backend takes over.  Set EQMANIP_KERNEL_BACKEND=numpy|compiled to
force a choice (compiled raises if the extension is missing).
"""
from __future__ import annotations

import os

from . import numpy_backend

_choice = os.environ.get("EQMANIP_KERNEL_BACKEND", "auto").lower()

if _choice == "numpy":
    backend = numpy_backend
elif _choice == "compiled":
    from . import compiled_backend as backend  # type: ignore[no-redef]
else:
    try:
        from . import compiled_backend as backend  # type: ignore[no-redef]
    except ImportError:
        backend = numpy_backend

BACKEND_NAME = backend.NAME

conv_out_size = numpy_backend.conv_out_size
im2col = backend.im2col
col2im = backend.col2im
maxpool2d = backend.maxpool2d
maxpool2d_backward = backend.maxpool2d_backward
bilinear_warp = backend.bilinear_warp


def available_backends() -> list[str]:
    names = ["numpy"]
    try:
        from . import compiled_backend  # noqa: F401

        names.append("compiled")
    except ImportError:
        pass
    return names


def get_backend(name: str):
    if name == "numpy":
        return numpy_backend
    if name == "compiled":
        from . import compiled_backend

        return compiled_backend
    raise ValueError(f"unknown kernel backend {name!r}")
