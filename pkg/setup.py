"""Build script for the optional compiled kernels.

The package works without them: if Cython or a C compiler is unavailable,
``hashmoe._backend`` falls back to the NumPy implementations.
"""

import os

from setuptools import setup

ext_modules = []
if os.environ.get("HASHMOE_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "hashmoe._core",
                    ["src/hashmoe/_core.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3", "-ffp-contract=off"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives=dict(
                language_level="3",
                boundscheck=False,
                wraparound=False,
                cdivision=True,
                initializedcheck=False,
            ),
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
