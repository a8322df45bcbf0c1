"""Kernel backend selection.

The compiled extension is used when importable; set ``DEPTHSCAN_PURE_PYTHON=1``
to force the numpy implementation.
"""

import os

from . import _pykernels

NAME = "python"
_impl = _pykernels

if os.environ.get("DEPTHSCAN_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _impl  # noqa: F811

        NAME = "cython"
    except ImportError:
        pass

delta_forward = _impl.delta_forward
delta_vjp = _impl.delta_vjp
closest_points_bvh = _impl.closest_points_bvh


def available() -> dict:
    """Kernel modules importable in this environment, keyed by backend name."""
    out = {"python": _pykernels}
    try:
        from . import _ckernels

        out["cython"] = _ckernels
    except ImportError:
        pass
    return out
