import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("LOOPDA_NO_EXT") != "1":
    try:
        import numpy
        from Cython.Build import cythonize
    except ImportError:
        # pure-Python fallback in loopda._pykernels is used instead
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "loopda._kernels",
                    ["src/loopda/_kernels.pyx"],
                    include_dirs=[numpy.get_include()],
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={
                "language_level": "3",
                "boundscheck": False,
                "wraparound": False,
                "cdivision": True,
            },
        )

setup(ext_modules=ext_modules)
