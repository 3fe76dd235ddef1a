"""Build script for the compiled simulation core.

The extension is optional at runtime: if the build is skipped or the import
fails, the package falls back to the pure-Python kernels (see
``qpert.kernels``). Build in place for development with

    python setup.py build_ext --inplace
"""

import numpy
from Cython.Build import cythonize
from setuptools import Extension, setup

extensions = [
    Extension(
        "qpert.kernels._ckernels",
        ["src/qpert/kernels/_ckernels.pyx"],
        include_dirs=[numpy.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3"],
    )
]

setup(ext_modules=cythonize(extensions, language_level=3))
