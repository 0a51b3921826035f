"""Build script for the compiled kernel core.

The extension is optional: if it cannot be built the package falls back to
the pure-Python kernels in markermap._core.pure (same results, slower).
"""

from setuptools import Extension, setup

ext = Extension(
    "markermap._core._native",
    ["src/markermap/_core/_native.pyx"],
    # -ffp-contract=off: no FMA contraction, so the compiled kernels are
    # bit-identical to the pure-Python fallback (same accumulation order).
    extra_compile_args=["-O2", "-ffp-contract=off"],
    optional=True,
)

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [ext],
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "initializedcheck": False,
            "cdivision": True,
        },
    )
except ImportError:
    ext_modules = []

setup(ext_modules=ext_modules)
