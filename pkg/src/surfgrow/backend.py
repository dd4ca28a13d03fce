"""Select the compiled kernel core or the pure-numpy fallback at import.

The compiled extension ``surfgrow._core`` carries the hot inner loops of
patch uniformization and the Gaussian kernel evaluation. When it is missing
(source checkout without a build) the numpy implementation is used instead.
``SURFGROW_BACKEND=python`` or ``=cython`` forces the choice.
"""

import os

from . import _kernels_np

_requested = os.environ.get("SURFGROW_BACKEND", "").lower()

if _requested == "python":
    _impl = _kernels_np
    NAME = "python"
else:
    try:
        from . import _core as _impl  # type: ignore[no-redef]

        NAME = "cython"
    except ImportError:
        if _requested == "cython":
            raise ImportError(
                "SURFGROW_BACKEND=cython requested but surfgrow._core is not "
                "built; run `pip install -e .` or unset SURFGROW_BACKEND"
            )
        _impl = _kernels_np
        NAME = "python"

gaussian_weights_fwd = _impl.gaussian_weights_fwd
gaussian_weights_bwd = _impl.gaussian_weights_bwd
uniformize_fwd = _impl.uniformize_fwd
uniformize_bwd = _impl.uniformize_bwd


def implementations():
    """All available kernel implementations, keyed by backend name."""
    impls = {"python": _kernels_np}
    try:
        from . import _core

        impls["cython"] = _core
    except ImportError:
        pass
    return impls
