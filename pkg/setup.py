"""Build the optional Cython kernel core.

If Cython or a C compiler is missing the package still installs; the numpy
kernels in ``splitfed._pykernels`` are used instead.
"""
import os

from setuptools import setup

ext_modules = []
if not os.environ.get("SPLITFED_NO_EXT"):
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "splitfed._ckernels",
                    ["src/splitfed/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    # no -ffast-math: kernels must match the numpy fallback bit for bit
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={
                "language_level": "3",
                "boundscheck": False,
                "wraparound": False,
                "cdivision": True,
            },
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
