import os

from setuptools import Extension, setup

# The compiled kernels are an optional speedup; ovdf.kernels falls back to the
# pure-Python implementation when the extension is absent or OVDF_PURE_PYTHON=1.
ext_modules = []
if os.environ.get("OVDF_NO_EXT") != "1":
    try:
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [
                Extension(
                    "ovdf._kernels",
                    ["src/ovdf/_kernels.pyx"],
                    # -ffp-contract=off: no FMA contraction, so compiled and
                    # pure-Python kernels stay bit-identical.
                    extra_compile_args=["-O3", "-ffp-contract=off"],
                    optional=True,
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
