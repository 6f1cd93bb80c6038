import numpy as np
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

extensions = [
    Extension(
        "lesionseg.kernels._conv_cy",
        ["src/lesionseg/kernels/_conv_cy.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
]

if cythonize is not None:
    extensions = cythonize(
        extensions,
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=extensions)
