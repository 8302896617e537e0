import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "volsplat._kernels._composite_cy",
                ["src/volsplat/_kernels/_composite_cy.pyx"],
                include_dirs=[np.get_include()],
            )
        ]
    )
except ImportError:
    # pure-Python fallback still works without the compiled kernel
    ext_modules = []

setup(ext_modules=ext_modules)
