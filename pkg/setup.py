import os

import numpy as np
from setuptools import Extension, setup

# The compiled core is optional: without Cython (or with AUXNET_NO_EXT=1)
# the package installs and runs on the numpy fallback.
ext_modules = []
if not os.environ.get("AUXNET_NO_EXT"):
    try:
        from Cython.Build import cythonize
    except ImportError:
        cythonize = None
    if cythonize is not None:
        ext_modules = cythonize(
            [
                Extension(
                    "auxnet._ckernels",
                    ["src/auxnet/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
