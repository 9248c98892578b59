"""Build the optional Cython kernel core.

The package works without it: ``vecfl._kernels`` falls back to numpy
implementations when the extension is missing.
"""
import os

from setuptools import setup

ext_modules = []
if os.environ.get("VECFL_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "vecfl._kernels._core",
                    ["src/vecfl/_kernels/_core.pyx"],
                    include_dirs=[np.get_include()],
                    # no -ffast-math / FMA contraction: results must match the
                    # numpy fallback bit for bit
                    extra_compile_args=["-O3", "-ffp-contract=off"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
