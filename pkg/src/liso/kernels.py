"""Kernel backend selection.

The compiled extension is used when importable; ``LISO_KERNELS=python`` forces
the numpy fallback.
"""
import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("LISO_KERNELS", "").lower() != "python":
    try:
        from . import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:
        _impl = _pykernels

dbscan_labels = _impl.dbscan_labels
iou_matrix = _impl.iou_matrix
bev_intersection = _impl.bev_intersection
jerk_loss_grad = _impl.jerk_loss_grad


def available_backends():
    """Map of backend name to kernel module, for tests and benchmarks."""
    backends = {"python": _pykernels}
    try:
        from . import _ckernels

        backends["cython"] = _ckernels
    except ImportError:
        pass
    return backends
