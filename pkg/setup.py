import os

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pure-Python install; pfjm falls back to the numpy kernel
    cythonize = None

ext_modules = []
if cythonize is not None and not os.environ.get("PFJM_NO_EXT"):
    ext_modules = cythonize(
        [
            Extension(
                "pfjm._field_kernel",
                ["src/pfjm/_field_kernel.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": 3},
    )

setup(ext_modules=ext_modules)
