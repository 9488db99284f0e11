import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from liso import kernels  # noqa: E402

BACKENDS = kernels.available_backends()


@pytest.fixture(params=sorted(BACKENDS))
def backend(request):
    """Each available kernel module in turn (compiled and numpy)."""
    return BACKENDS[request.param]

KERNEL_NAMES = ("dbscan_labels", "iou_matrix", "bev_intersection", "jerk_loss_grad")


@pytest.fixture(params=sorted(BACKENDS))
def active_backend(request, monkeypatch):
    """Route the package's kernel calls through each backend in turn."""
    mod = BACKENDS[request.param]
    for name in KERNEL_NAMES:
        monkeypatch.setattr(kernels, name, getattr(mod, name))
    return request.param
