"""Builds the optional compiled training kernel.

The package works without it: lexrec.cfembed falls back to a plain numpy
kernel when the extension is missing (import-time selection).
"""

import numpy
from setuptools import setup
from setuptools.extension import Extension

from Cython.Build import cythonize

extensions = [
    Extension(
        "lexrec._sgns",
        ["src/lexrec/_sgns.pyx"],
        include_dirs=[numpy.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    ),
]

setup(ext_modules=cythonize(extensions, language_level=3))
