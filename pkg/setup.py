"""Build script: compiles the optional Cython kernel extension.

The package works without the extension (a numpy implementation is selected
at import time), so any compilation problem downgrades to a pure-Python
install instead of failing the build. Set LESIONPRIOR_NO_EXT=1 to skip the
extension entirely.
"""

import os

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class optional_build_ext(build_ext):
    """build_ext that gives up on the extension instead of failing."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # compiler missing, etc.
            print(f"warning: skipping lesionprior._core build ({exc})")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            print(f"warning: failed to compile {ext.name} ({exc}); "
                  "falling back to the numpy kernels")


ext_modules = []
cmdclass = {}
if not os.environ.get("LESIONPRIOR_NO_EXT"):
    try:
        import numpy
        from Cython.Build import cythonize

        ext_modules = cythonize(
            [
                Extension(
                    "lesionprior._core",
                    ["src/lesionprior/_core.pyx"],
                    include_dirs=[numpy.get_include()],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                    extra_compile_args=["-O3", "-march=native", "-funroll-loops"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
        cmdclass["build_ext"] = optional_build_ext
    except ImportError as exc:
        print(f"warning: Cython/numpy unavailable ({exc}); "
              "installing without the compiled kernels")

setup(ext_modules=ext_modules, cmdclass=cmdclass)
