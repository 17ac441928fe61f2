"""Builds the optional Cython kernel extension.

The package works without it: edgelbs.kernels falls back to the pure
NumPy implementation when the compiled module is missing.
"""

from setuptools import setup

try:
    import numpy
    from Cython.Build import cythonize
    from setuptools import Extension

    extensions = cythonize(
        [
            Extension(
                "edgelbs.kernels._fast",
                ["src/edgelbs/kernels/_fast.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3", "boundscheck": False, "wraparound": False},
    )
except ImportError:
    extensions = []

setup(ext_modules=extensions)
