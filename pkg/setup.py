from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    # no Cython: the package falls back to klcox._pykernels
    ext_modules = []
else:
    ext_modules = cythonize(
        [Extension("klcox._ckernels", ["src/klcox/_ckernels.pyx"],
                   extra_compile_args=["-O3"], optional=True)],
        language_level=3,
    )

setup(ext_modules=ext_modules)
