"""Hot-loop kernels: compiled extension when available, pure Python otherwise.

Set ``SSC3OD_PURE_PYTHON=1`` to force the fallback (used by the benchmark and
by the parity tests).
"""
import os

from . import _fallback

BACKEND = "python"
_impl = _fallback

if os.environ.get("SSC3OD_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _core as _impl  # noqa: F811
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _fallback

iou_matrix = _impl.iou_matrix
nms = _impl.nms
raycast = _impl.raycast

__all__ = ["BACKEND", "iou_matrix", "nms", "raycast"]
