import numpy
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "paintseq.strokes._raster_cy",
                ["src/paintseq/strokes/_raster_cy.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        language_level=3,
    )
except ImportError:
    # Source-only install: the package falls back to the NumPy kernels.
    ext_modules = []

setup(ext_modules=ext_modules)
