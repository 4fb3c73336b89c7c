import os

import numpy as np
from setuptools import Extension, setup

# VENTALLOC_NO_EXT=1 skips the compiled kernels; the package then runs on the numpy fallback.
ext_modules = []
if os.environ.get("VENTALLOC_NO_EXT", "") in ("", "0"):
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "ventalloc._kernels",
                ["src/ventalloc/_kernels.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
