"""Build the optional compiled kernel extension.

The package works without it: eqmanip.kernels falls back to the pure-numpy
backend when the extension is missing or fails to build.
"""
import numpy as np
from setuptools import setup
from setuptools.extension import Extension

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "eqmanip.kernels._speedups",
                ["src/eqmanip/kernels/_speedups.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level="3",
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules)
