import os

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # numpy fallback only
    cythonize = None

ext_modules = []
if cythonize is not None and os.environ.get("CKKSFED_NO_EXT") != "1":
    ext_modules = cythonize(
        [
            Extension(
                "ckksfed._kernels",
                sources=["src/ckksfed/_kernels.pyx"],
                include_dirs=["src/ckksfed", np.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
