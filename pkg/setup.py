"""Build the compiled split-search kernels.

The extension is optional: if Cython or a C compiler is unavailable the package
installs without it and ``spidefect.gbdt.kernels`` falls back to numpy.
"""
import os

import numpy as np
from setuptools import Extension, setup

ext_modules = []
if os.environ.get("SPIDEFECT_NO_EXT") != "1":
    try:
        from Cython.Build import cythonize
    except ImportError:
        cythonize = None
    if cythonize is not None:
        extensions = [
            Extension(
                "spidefect.gbdt._kernels",
                ["src/spidefect/gbdt/_kernels.pyx"],
                include_dirs=[np.get_include()],
                # no fast-math / FMA contraction: kernels must match the numpy fallback bit for bit
                extra_compile_args=["-O3", "-ffp-contract=off"],
            )
        ]
        ext_modules = cythonize(extensions, compiler_directives={"language_level": "3"})

setup(ext_modules=ext_modules)
