import os

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # pure-Python install; mcc.neighbors falls back to numpy
    cythonize = None

ext_modules = []
if cythonize is not None and not os.environ.get("MCC_NO_EXT"):
    ext_modules = cythonize(
        [
            Extension(
                "mcc._neighbors_ext",
                ["src/mcc/_neighbors_ext.pyx"],
                include_dirs=[np.get_include()],
                # bit-identical distances with the numpy fallback and the brute-force oracle
                extra_compile_args=["-O3", "-ffp-contract=off"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
