"""Build the optional compiled kernels.

The extension is optional: if Cython or a C compiler is missing the package
installs without it and runs on the numpy fallback.
"""
import os

from setuptools import setup

ext_modules = []
if os.environ.get("VPP_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "vppmav._kernels",
                    ["src/vppmav/_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    # no FMA contraction and no sin+cos -> sincos fusion: keeps results bit-identical
                    # to the numpy path
                    extra_compile_args=["-O3", "-fopenmp", "-ffp-contract=off", "-fno-builtin-sin", "-fno-builtin-cos"],
                    extra_link_args=["-fopenmp"],
                    libraries=["m"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
