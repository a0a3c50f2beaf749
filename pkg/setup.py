"""Build script for the optional compiled kernel core.

The Cython extension is optional: when Cython or a C compiler is missing
the package installs without it and falls back to the NumPy kernels.
"""
import os

from setuptools import setup

ext_modules = []
if os.environ.get("TTREC_NO_EXT") != "1":
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension

        extension = Extension(
            "ttrec.kernels._core",
            ["src/ttrec/kernels/_core.pyx"],
            include_dirs=[numpy.get_include()],
            extra_compile_args=["-O3"],
            define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        )
        ext_modules = cythonize(extension, language_level="3")
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
