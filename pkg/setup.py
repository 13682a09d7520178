"""Builds the optional Cython kernels; metadata lives in pyproject.toml."""

import platform
import sys

import numpy as np
from Cython.Build import cythonize
from setuptools import setup
from setuptools.extension import Extension

compile_args = ["-O3"]
libraries = []
if sys.platform.startswith("linux") and platform.machine() == "x86_64":
    # lets GCC vectorize the exp() loops through glibc's libmvec; the kernels
    # never produce inf or nan from finite inputs, so finite-math is safe
    compile_args += ["-ffast-math", "-march=native"]
    libraries += ["mvec", "m"]

extensions = [
    Extension(
        "mcalab._kernels",
        ["src/mcalab/_kernels.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=compile_args,
        libraries=libraries,
        optional=True,
    )
]

setup(ext_modules=cythonize(extensions, compiler_directives={"language_level": "3"}))
