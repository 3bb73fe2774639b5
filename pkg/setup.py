import os

import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # sdist without Cython: pure-python fallback only
    cythonize = None

ext = Extension(
    "morphodiff.mpm._kernels",
    [os.path.join("src", "morphodiff", "mpm", "_kernels.pyx")],
    include_dirs=[np.get_include()],
    extra_compile_args=["-O3"],
    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
)

setup(ext_modules=cythonize([ext]) if cythonize else [])
