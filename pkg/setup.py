"""Build script for the optional compiled hash kernel.

The package is fully functional without the extension: batchstore.kernels
falls back to the pure-Python implementation when the compiled module is
missing, so a failed native build only costs speed.
"""

import sys

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    """build_ext that degrades to a warning instead of failing the install."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # toolchain missing
            self._warn(exc)

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            self._warn(exc)

    @staticmethod
    def _warn(exc):
        print(
            f"warning: building batchstore._kernels failed ({exc}); "
            "falling back to the pure-Python kernels",
            file=sys.stderr,
        )


def _extensions():
    try:
        from Cython.Build import cythonize
    except ImportError:
        return []
    return cythonize(
        [Extension("batchstore._kernels", ["src/batchstore/_kernels.pyx"])],
        language_level="3",
    )


setup(ext_modules=_extensions(), cmdclass={"build_ext": OptionalBuildExt})
