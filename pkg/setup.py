"""Build script: compiles the grid-search kernel when a C toolchain is present.

The package works without the extension (a NumPy fallback is selected at
import time), so build failures here are downgraded to a warning.
To build in place: python setup.py build_ext --inplace
"""

import warnings

from setuptools import setup

try:
    from Cython.Build import cythonize
    from setuptools.extension import Extension

    ext_modules = cythonize(
        [Extension("twophase._gridcore", ["src/twophase/_gridcore.pyx"])],
        compiler_directives={"language_level": "3"},
    )
except Exception as exc:  # pragma: no cover - toolchain-dependent
    warnings.warn(f"building without compiled kernel: {exc}")
    ext_modules = []

setup(ext_modules=ext_modules)
