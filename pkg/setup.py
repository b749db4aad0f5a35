import os

from setuptools import Extension, setup

# JMFLOW_NO_EXT=1 builds the pure-Python package only (numpy fallback kernels).
ext_modules = []
if not os.environ.get("JMFLOW_NO_EXT"):
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "jmflow._kernels",
                ["src/jmflow/_kernels.pyx"],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "initializedcheck": False,
        },
    )

setup(ext_modules=ext_modules)
