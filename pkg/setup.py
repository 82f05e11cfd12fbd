"""Build hooks for the optional compiled kernel.

The package works without the extension (a pure numpy twin is selected at
import time), so a failed compile is downgraded to a warning rather than a
hard error.
"""

import os
import warnings

from setuptools import Extension, setup

extensions = []
try:
    if not os.path.exists("src/tpsec/_kernels_c.pyx"):
        raise ImportError("_kernels_c.pyx not present")
    import numpy
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "tpsec._kernels_c",
                ["src/tpsec/_kernels_c.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except ImportError as exc:  # pragma: no cover - build environment dependent
    warnings.warn(f"compiled kernel skipped ({exc}); using the pure python backend")

setup(ext_modules=extensions)
