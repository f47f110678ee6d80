import numpy
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    # No Cython: install the pure-python package; the numpy kernel
    # fallback is selected automatically at import time.
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "rosettavae._kernels._core",
                ["src/rosettavae/_kernels/_core.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3", "-march=native"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
