import numpy
from Cython.Build import cythonize
from setuptools import Extension, setup

extensions = [
    Extension(
        "dualinc.engine._ckernels",
        ["src/dualinc/engine/_ckernels.pyx"],
        include_dirs=[numpy.get_include()],
        # no -ffast-math: the fallback must match bitwise
        extra_compile_args=["-O3"],
    )
]

setup(ext_modules=cythonize(extensions, compiler_directives={"language_level": "3"}))
