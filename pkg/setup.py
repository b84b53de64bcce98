import os

from setuptools import setup

ext_modules = []
if not os.environ.get("DIRCFORMER_NO_EXT"):
    try:
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [Extension(
                "dircformer.evaluation._kde_ext",
                ["src/dircformer/evaluation/_kde_ext.pyx"],
                extra_compile_args=["-O3", "-fopenmp", "-ffast-math", "-march=native"],
                extra_link_args=["-fopenmp", "-lmvec", "-lm"],
            )],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        # no Cython: the numpy kernel is used at import time
        ext_modules = []

setup(ext_modules=ext_modules)
