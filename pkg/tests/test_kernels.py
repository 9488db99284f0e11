import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from liso import kernels
from oracles import check_dbscan, iou_shapely, jerk_loss_reference

from conftest import BACKENDS


def random_boxes(rng, n, spread=4.0):
    B = np.empty((n, 7))
    B[:, 0:2] = rng.uniform(-spread, spread, (n, 2))
    B[:, 2] = rng.uniform(-1, 1, n)
    B[:, 3:6] = rng.uniform(0.3, 5.0, (n, 3))
    B[:, 6] = rng.uniform(-math.pi, math.pi, n)
    return B


def test_backend_selected():
    assert kernels.BACKEND in BACKENDS
    assert "python" in BACKENDS


def test_dbscan_matches_bruteforce(backend):
    rng = np.random.default_rng(1)
    for _ in range(40):
        n = int(rng.integers(0, 120))
        X = rng.uniform(0, 6, (n, int(rng.integers(2, 7))))
        labels = backend.dbscan_labels(X, 1.0, 5)
        check_dbscan(labels, X, 1.0, 5)


def test_dbscan_label_order_and_borders(backend):
    # two blobs: the one holding the lowest-index core gets label 0
    X = np.array([[10.0, 0]] * 5 + [[0.0, 0]] * 5 + [[0.5, 0]])
    lab = backend.dbscan_labels(X, 1.0, 5)
    assert list(lab[:5]) == [0] * 5 and list(lab[5:]) == [1] * 6


def test_dbscan_border_tie_goes_to_lowest_core(backend):
    # point 10 sits exactly between two cores of different clusters
    left = [[-1.0, 0.0], [-1.1, 0.0], [-1.2, 0.0], [-1.3, 0.0], [-1.05, 0.0]]
    right = [[1.0, 0.0], [1.1, 0.0], [1.2, 0.0], [1.3, 0.0], [1.05, 0.0]]
    X = np.array(right + left + [[0.0, 0.0]])
    lab = backend.dbscan_labels(X, 1.0, 5)
    assert lab[10] == lab[0] == 0 and lab[5] == 1


def test_backends_agree_dbscan():
    if len(BACKENDS) < 2:
        pytest.skip("compiled backend not built")
    rng = np.random.default_rng(2)
    for _ in range(20):
        X = rng.uniform(0, 8, (150, 6))
        a = BACKENDS["python"].dbscan_labels(X, 1.0, 5)
        b = BACKENDS["cython"].dbscan_labels(X, 1.0, 5)
        assert np.array_equal(a, b)


@pytest.mark.parametrize("use_3d", [False, True])
def test_iou_matches_shapely(backend, use_3d):
    rng = np.random.default_rng(3)
    A, B = random_boxes(rng, 60), random_boxes(rng, 60)
    M = backend.iou_matrix(A, B, use_3d)
    for i in range(len(A)):
        for j in range(len(B)):
            assert M[i, j] == pytest.approx(iou_shapely(A[i], B[j], use_3d), abs=1e-9)


def test_iou_edge_shapes(backend):
    a = np.array([[0, 0, 0, 2, 1, 1, 0.3]])
    assert backend.iou_matrix(a, a)[0, 0] == pytest.approx(1.0, abs=1e-12)
    assert backend.iou_matrix(np.zeros((0, 7)), a).shape == (0, 1)
    # touching edges: zero overlap
    b = np.array([[2, 0, 0, 2, 1, 1, 0.0]])
    a0 = np.array([[0, 0, 0, 2, 1, 1, 0.0]])
    assert backend.iou_matrix(a0, b)[0, 0] == pytest.approx(0.0, abs=1e-12)


def test_backends_agree_iou():
    if len(BACKENDS) < 2:
        pytest.skip("compiled backend not built")
    rng = np.random.default_rng(4)
    A, B = random_boxes(rng, 80), random_boxes(rng, 80)
    for d3 in (False, True):
        np.testing.assert_allclose(BACKENDS["python"].iou_matrix(A, B, d3),
                                   BACKENDS["cython"].iou_matrix(A, B, d3), atol=1e-12)


def test_jerk_loss_batched_equals_reference(backend):
    rng = np.random.default_rng(5)
    lengths = np.array([3, 5, 9, 17])
    X = rng.normal(size=(4, 17, 3))
    O = rng.normal(size=(4, 17, 3))
    losses, grad = backend.jerk_loss_grad(X, O, lengths, 3.0, 0.1)
    for k, T in enumerate(lengths):
        assert losses[k] == pytest.approx(jerk_loss_reference(X[k, :T], O[k, :T], 3.0, 0.1), rel=1e-12)
        assert np.all(grad[k, T:] == 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_iou_symmetry_and_bounds(seed):
    rng = np.random.default_rng(seed)
    A, B = random_boxes(rng, 5), random_boxes(rng, 5)
    for d3 in (False, True):
        M = kernels.iou_matrix(A, B, d3)
        assert np.all((M >= 0) & (M <= 1))
        np.testing.assert_allclose(M, kernels.iou_matrix(B, A, d3).T, atol=1e-12)
