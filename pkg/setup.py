import os

import numpy as np
from setuptools import Extension, setup

# AEROCINE_NO_EXT=1 installs the pure-Python kernels only.
ext_modules = []
if not os.environ.get("AEROCINE_NO_EXT"):
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "aerocine._core",
                ["src/aerocine/_core.pyx"],
                include_dirs=[np.get_include()],
                # no fast-math / fp contraction: results must match the Python kernels bit-for-bit
                extra_compile_args=["-O3", "-ffp-contract=off"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
