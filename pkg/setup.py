"""Build the optional compiled kernels.

The package works without them; ``marsest.kernels`` falls back to numpy
when the extension is missing. Set ``MARSEST_NO_EXT=1`` to skip the build.
"""
import os

from setuptools import setup

ext_modules = []
if not os.environ.get("MARSEST_NO_EXT"):
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension
    except ImportError:  # pragma: no cover - build without Cython
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "marsest._ckernels",
                    ["src/marsest/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
