"""Build script: compiles the optional ensemble-step kernel.

The package is pure Python plus one optional Cython extension. If Cython or a
C compiler is unavailable the extension is skipped and bondlab falls back to
the numpy kernel at import time.
"""

from setuptools import setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize
    from setuptools.extension import Extension

    # -ffast-math lets gcc call the SIMD exp from libmvec inside the path
    # loop; without it the scalar libm exp dominates and the extension is
    # slower than the numpy fallback. Accuracy stays within a few ulp.
    ext = Extension(
        "bondlab._kernels",
        sources=["src/bondlab/_kernels.pyx"],
        include_dirs=[numpy.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3", "-ffast-math", "-march=x86-64-v3"],
        libraries=["mvec", "m"],
        optional=True,  # build failure degrades to the numpy fallback
    )
    ext_modules = cythonize([ext], language_level="3")
except ImportError:
    pass

setup(ext_modules=ext_modules)
