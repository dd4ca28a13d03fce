import os
import tempfile

import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup


def native_flags_supported():
    """Probe whether the C compiler accepts -march=native."""
    if os.environ.get("SURFGROW_NO_NATIVE"):
        return False
    try:
        from distutils.ccompiler import new_compiler
        from distutils.errors import CompileError

        cc = new_compiler()
        with tempfile.TemporaryDirectory() as tmp:
            src = os.path.join(tmp, "probe.c")
            with open(src, "w") as fh:
                fh.write("int main(void) { return 0; }\n")
            try:
                cc.compile([src], output_dir=tmp, extra_preargs=["-O3", "-march=native"])
            except CompileError:
                return False
        return True
    except Exception:
        return False


# -fassociative-math (with its two prerequisites) lets the compiler
# vectorize the fixed-order reduction loops; results stay deterministic
# for a given build since the instruction schedule is fixed at compile time.
compile_args = [
    "-O3",
    "-fno-math-errno",
    "-fno-trapping-math",
    "-fno-signed-zeros",
    "-fassociative-math",
]
if native_flags_supported():
    compile_args.append("-march=native")

extensions = [
    Extension(
        "surfgrow._core",
        ["src/surfgrow/_core.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=compile_args,
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
]

setup(ext_modules=cythonize(extensions, language_level="3"))
