"""Build script: compiles the native scan kernel when a C toolchain is available.

The package works without the extension (a numpy fallback is selected at
import time), so a failed compile only costs speed, never correctness.
"""

import sys

from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None


def extensions():
    if cythonize is None:
        print("near2: Cython unavailable, skipping native kernel", file=sys.stderr)
        return []
    ext = Extension(
        "near2._kernels._scan",
        ["src/near2/_kernels/_scan.pyx"],
        extra_compile_args=["-O3"],
    )
    return cythonize([ext], compiler_directives={"language_level": "3"})


setup(ext_modules=extensions())
