"""Build script: compiles the optional fused-kernel extension.

The extension is marked optional; if Cython or a C compiler is missing the
install proceeds and the package falls back to the pure-numpy kernels at
import time.
"""
from setuptools import setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize
    from setuptools import Extension

    ext = Extension(
        "d2c.tensorcore.kernels._fastcore",
        sources=["src/d2c/tensorcore/kernels/_fastcore.pyx"],
        include_dirs=[numpy.get_include()],
        extra_compile_args=["-O3"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        optional=True,
    )
    ext_modules = cythonize([ext], language_level=3)
except ImportError:
    pass

setup(ext_modules=ext_modules)
